"""Command-line programs: ``img`` (gateway client) and ``run`` (launcher).

``img`` drives pulls, imports and catalog queries.  ``run`` assembles a
launch from flags plus the process environment and drives the runtime
pipeline, propagating the container's exit status.  Everything after the
first non-flag token (or after ``--``) is the container command, passed
through byte-for-byte.
"""

import argparse
import logging
import os
import sys

from .errors import HpcRunError
from .gateway import Gateway
from .runtime import LaunchSpec, Runtime
from .siteconfig import load_config

USAGE_RUN = """\
usage: run [--config PATH] --image=REF [--mpi] [--volume=SRC:DST]...
           [--trace=PATH] [--] COMMAND [ARG]...

Launch COMMAND inside the named container image.  Everything after the
first non-flag token is passed to the container untouched.
"""


def _setup_logging() -> None:
    level = os.environ.get("HPCRUN_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s",
                        level=getattr(logging, level, logging.WARNING))


# -- img ----------------------------------------------------------------------


def _entry_line(entry, quiet: bool) -> str:
    if quiet:
        return entry.image_id
    ref = entry.reference
    name = "%s:%s" % (ref.repository, ref.tag or "<none>")
    return "%-40s %-14s %-8s %s" % (name, entry.image_id[:12] or "-",
                                    entry.state, entry.created_at)


def img_main(argv: list[str]) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="img", allow_abbrev=False,
                                     description="image gateway client")
    parser.add_argument("--config", help="site config path")
    parser.add_argument("--quiet", action="store_true",
                        help="print image ids only")
    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("pull", help="pull an image from the registry")
    p.add_argument("reference")
    p = sub.add_parser("import", help="import a saved image tarball")
    p.add_argument("tarball")
    p.add_argument("reference")
    sub.add_parser("list", help="list catalog entries")
    p = sub.add_parser("lookup", help="show one catalog entry")
    p.add_argument("reference")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2

    try:
        gateway = Gateway(load_config(args.config))
        if args.command == "pull":
            entry = gateway.pull_image(args.reference)
            print(_entry_line(entry, args.quiet))
        elif args.command == "import":
            entry = gateway.import_tarball(args.tarball, args.reference)
            print(_entry_line(entry, args.quiet))
        elif args.command == "lookup":
            entry = gateway.lookup_image(args.reference)
            print(_entry_line(entry, args.quiet))
        elif args.command == "list":
            if not args.quiet:
                print("%-40s %-14s %-8s %s" % ("REPOSITORY:TAG", "IMAGE ID",
                                               "STATE", "CREATED"))
            for entry in gateway.list_images():
                print(_entry_line(entry, args.quiet))
    except HpcRunError as exc:
        print("img: %s" % exc, file=sys.stderr)
        return 1
    return 0


# -- run ----------------------------------------------------------------------


def _parse_run_args(argv: list[str]):
    """Split launcher flags from the container command.

    Flag scanning stops at ``--`` or at the first token that is not a
    recognized flag; the rest is the container argv, untouched.
    """
    opts = {"config": None, "image": None, "mpi": False,
            "volumes": [], "trace": None}
    i = 0
    n = len(argv)
    while i < n:
        tok = argv[i]
        if tok == "--":
            i += 1
            break
        if not tok.startswith("-"):
            break
        if tok in ("-h", "--help"):
            return None, [], "help"
        if tok == "--mpi":
            opts["mpi"] = True
            i += 1
            continue
        handled = False
        for name in ("--config", "--image", "--volume", "--trace"):
            if tok == name:
                if i + 1 >= n:
                    return None, [], "%s requires a value" % name
                value = argv[i + 1]
                i += 2
            elif tok.startswith(name + "="):
                value = tok[len(name) + 1:]
                i += 1
            else:
                continue
            if name == "--volume":
                opts["volumes"].append(value)
            else:
                opts[name[2:]] = value
            handled = True
            break
        if not handled:
            return None, [], "unknown flag %s" % tok
    return opts, argv[i:], None


def run_main(argv: list[str]) -> int:
    _setup_logging()
    opts, command, problem = _parse_run_args(argv)
    if problem == "help":
        print(USAGE_RUN, end="")
        return 0
    if problem:
        print("run: %s" % problem, file=sys.stderr)
        print(USAGE_RUN, end="", file=sys.stderr)
        return 2
    if not opts["image"]:
        print("run: --image is required", file=sys.stderr)
        print(USAGE_RUN, end="", file=sys.stderr)
        return 2

    volumes = []
    for item in opts["volumes"]:
        src, sep, dst = item.partition(":")
        if not sep or not src or not dst:
            print("run: bad --volume %r (want SRC:DST)" % item, file=sys.stderr)
            return 2
        volumes.append((src, dst))

    try:
        site = load_config(opts["config"])
        runtime = Runtime(site)
        spec = LaunchSpec(
            image=opts["image"],
            argv=command,
            mpi_enabled=opts["mpi"],
            extra_volumes=volumes,
            host_env=dict(os.environ),
            trace_path=opts["trace"],
        )
        result = runtime.launch(spec)
    except HpcRunError as exc:
        print("run: %s" % exc, file=sys.stderr)
        return exc.exit_status

    if result.error is not None:
        print("run: %s" % result.error, file=sys.stderr)
    for problem in result.cleanup_errors:
        print("run: cleanup: %s" % problem, file=sys.stderr)
    return result.exit_status


def img_entry() -> None:
    sys.exit(img_main(sys.argv[1:]))


def run_entry() -> None:
    sys.exit(run_main(sys.argv[1:]))
