"""Staged container runtime.

A launch walks a fixed stage machine:

    PREPARE -> MOUNT -> CHROOT -> DROP_PRIVILEGES -> EXPORT_ENV -> EXEC -> CLEANUP

Mount-plan realization happens while the runtime still holds its
privileges; the prepared root is sealed before the privilege drop, so no
graft can be added afterwards.  CHROOT, DROP_PRIVILEGES, EXPORT_ENV and
EXEC run in a forked child that reports each stage back over a pipe
before replacing itself with the application; the parent waits, forwards
signals, unwinds all grafts in reverse order and records CLEANUP last.
Every stage is recorded in a StageTrace for ordering audits.

Isolation uses chroot inside a fresh mount namespace when the kernel
allows it, plain chroot otherwise, and a user namespace as the
unprivileged fallback.
"""

import ctypes
import logging
import os
import shutil
import signal
import stat
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import gpu as gpu_mod
from . import mpi as mpi_mod
from .errors import (
    CleanupIncompleteError,
    DropFailedError,
    ExecNotFoundError,
    FaultInjectedError,
    HpcRunError,
    ImageNotReadyError,
    IsolationFailedError,
    MissingRequiredError,
    MountFailedError,
    StageOrderError,
)
from .gateway import STATE_READY, Gateway
from .imagefs import PackedImage, extract_pack
from .mounts import BIND_DIR, DEVICE, IMAGE_ROOT, MountEntry, MountPlan
from .siteconfig import SiteConfig

logger = logging.getLogger(__name__)

STAGES = ("PREPARE", "MOUNT", "CHROOT", "DROP_PRIVILEGES", "EXPORT_ENV",
          "EXEC", "CLEANUP")

# Tier-4 variables that prepend to (rather than replace) lower-tier values.
_PATHLIST_KEYS = ("PATH", "LD_LIBRARY_PATH")

_DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"

_MS_RDONLY = 1
_MS_REMOUNT = 32
_MS_BIND = 4096
_MS_REC = 16384
_MS_PRIVATE = 1 << 18
_MNT_DETACH = 2
_CLONE_NEWNS = 0x20000
_CLONE_NEWUSER = 0x10000000

_libc = ctypes.CDLL(None, use_errno=True)


# -- stage trace ---------------------------------------------------------------


class StageTrace:
    """Ordered record of stage events, optionally mirrored to a line file.

    File format: ``<ISO-timestamp> <STAGE> <detail>`` per line.
    """

    def __init__(self, path=None):
        self.events: list[tuple[str, str, str]] = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "w") if self.path else None

    def record(self, stage: str, detail: str = "") -> None:
        ts = datetime.now(timezone.utc).isoformat()
        self.events.append((stage, ts, detail))
        if self._fh:
            self._fh.write("%s %s %s\n" % (ts, stage, detail))
            self._fh.flush()

    def stage_names(self) -> list[str]:
        return [e[0] for e in self.events]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read_file(path) -> list[tuple[str, str, str]]:
        events = []
        for line in Path(path).read_text().splitlines():
            ts, _, rest = line.partition(" ")
            stage, _, detail = rest.partition(" ")
            events.append((stage, ts, detail))
        return events


def is_canonical_run(stage_names: list[str]) -> bool:
    """True when the sequence is a prefix of the canonical order with
    CLEANUP appended (the shape every launch, failed or not, must have)."""
    if not stage_names or stage_names[-1] != "CLEANUP":
        return False
    body = stage_names[:-1]
    return tuple(body) == STAGES[:len(body)]


# -- launch specification --------------------------------------------------------


@dataclass
class LaunchSpec:
    image: object                       # ImageReference or raw string
    argv: list[str] = field(default_factory=list)
    mpi_enabled: bool = False
    extra_volumes: list[tuple[str, str]] = field(default_factory=list)
    invoking_uid: int = field(default_factory=os.getuid)
    invoking_gid: int = field(default_factory=os.getgid)
    host_env: dict = field(default_factory=lambda: dict(os.environ))
    trace_path: str | None = None


@dataclass
class LaunchResult:
    exit_status: int
    trace: StageTrace
    plan: MountPlan | None = None
    error: HpcRunError | None = None
    cleanup_errors: list[str] = field(default_factory=list)
    gpu_plan: object = None
    mpi_plan: object = None


# -- environment merge -----------------------------------------------------------


def merge_environment(image_env: list[str], host_env: dict, site: SiteConfig,
                      injector_env: list[dict] | None = None) -> dict[str, str]:
    """Merge the container environment, lowest to highest precedence:
    image env, host variables named by the site passthrough list,
    site-forced variables, injector adjustments.  Within a tier, later
    entries win.  For PATH-like keys, injector values prepend instead of
    replacing so grafted directories take priority without erasing the
    image's own search path."""
    env: dict[str, str] = {}
    for entry in image_env:
        key, sep, value = entry.partition("=")
        if not sep or not key:
            logger.warning("skipping malformed image env entry %r", entry)
            continue
        env[key] = value
    for key in site.env_passthrough:
        if key in host_env:
            env[key] = host_env[key]
    for key, value in site.env_force.items():
        env[key] = value
    for adjustments in injector_env or []:
        for key, value in adjustments.items():
            if key in _PATHLIST_KEYS and env.get(key):
                env[key] = value + ":" + env[key]
            else:
                env[key] = value
    return env


# -- mount plan ------------------------------------------------------------------


def build_mount_plan(spec: LaunchSpec, image: PackedImage, site: SiteConfig,
                     gpu_plan=None, mpi_plan=None) -> MountPlan:
    """Assemble the deterministic graft order: image root, site grafts,
    injector grafts (GPU then MPI), user volumes."""
    entries = [MountEntry(source=str(image.path), target="/", kind=IMAGE_ROOT)]
    for m in site.site_mounts:
        entries.append(MountEntry(source=m.source, target=m.target,
                                  kind=_kind_for(m.source), writable=m.writable))
    if gpu_plan is not None:
        entries.extend(gpu_plan.all_entries())
    if mpi_plan is not None:
        entries.extend(mpi_plan.all_entries())
    for source, target in spec.extra_volumes:
        entries.append(MountEntry(source=source, target=target,
                                  kind=_kind_for(source), writable=True))
    return MountPlan(entries=entries).validate()


def _kind_for(source: str) -> str:
    from .mounts import BIND_FILE
    return BIND_DIR if os.path.isdir(source) else BIND_FILE


# -- prepared root ---------------------------------------------------------------


def _mount_bind(source: str, target: str, read_only: bool) -> None:
    if _libc.mount(os.fsencode(source), os.fsencode(target), None, _MS_BIND, None) != 0:
        raise OSError(ctypes.get_errno(), os.strerror(ctypes.get_errno()))
    if read_only:
        flags = _MS_BIND | _MS_REMOUNT | _MS_RDONLY
        if _libc.mount(b"none", os.fsencode(target), None, flags, None) != 0:
            err = ctypes.get_errno()
            _umount(target)
            raise OSError(err, os.strerror(err))


def _umount(target: str) -> None:
    if _libc.umount2(os.fsencode(target), 0) != 0:
        if _libc.umount2(os.fsencode(target), _MNT_DETACH) != 0:
            raise OSError(ctypes.get_errno(), os.strerror(ctypes.get_errno()))


def bind_mounts_available() -> bool:
    """Probe whether this process may perform bind mounts."""
    probe = tempfile.mkdtemp(prefix="hpcrun-probe-")
    try:
        try:
            _mount_bind(probe, probe, read_only=False)
        except OSError:
            return False
        _umount(probe)
        return True
    finally:
        os.rmdir(probe)


class PreparedRoot:
    """A container root under construction, with reverse-order unwind.

    Grafts are realized as real bind mounts when the process may mount,
    falling back to copies otherwise (flagged, so traces show the
    degraded mode).  After ``seal()`` any further graft is rejected:
    mounting is a privileged stage and the privilege drop has passed.
    """

    def __init__(self, root, allow_mounts: bool = True):
        self.root = Path(root)
        self.use_binds = allow_mounts and bind_mounts_available()
        self.sealed = False
        self.released = False
        self.root_ro = False
        self.warnings: list[str] = []
        self._undo: list[tuple[str, str]] = []
        self._realized = 0

    # -- realization -------------------------------------------------------

    def realize_image_root(self, packed: PackedImage) -> None:
        extract_pack(packed, self.root)
        self._undo.append(("clear", str(self.root)))

    def ensure_workdir(self, workdir: str | None) -> None:
        if workdir and workdir != "/":
            (self.root / workdir.lstrip("/")).mkdir(parents=True, exist_ok=True)

    def realize_grafts(self, plan: MountPlan, workdir: str | None = None) -> None:
        """Realize every non-root plan entry in order.

        Target mount points are created up front, then (in bind mode) the
        root is remounted read-only before the grafts land on top of it.
        """
        grafts = plan.graft_entries()
        for entry in grafts:
            self._ensure_target(entry)
        self.ensure_workdir(workdir)
        if self.use_binds:
            try:
                _mount_bind(str(self.root), str(self.root), read_only=True)
                self._undo.append(("umount", str(self.root)))
                self.root_ro = True
            except OSError as exc:
                self.warnings.append("read-only remount of root failed: %s" % exc)
        for entry in grafts:
            self.graft(entry)

    def _ensure_target(self, entry: MountEntry) -> None:
        target = self._target_path(entry)
        if entry.kind == BIND_DIR:
            target.mkdir(parents=True, exist_ok=True)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            if not target.exists():
                target.touch()

    def _target_path(self, entry: MountEntry) -> Path:
        return self.root / entry.target.lstrip("/")

    def graft(self, entry: MountEntry) -> None:
        """Realize one graft; rejected once the root is sealed."""
        if self.sealed:
            raise StageOrderError(
                "graft of %s rejected: mounts are frozen after the privilege drop"
                % entry)
        if self.released:
            raise StageOrderError("graft after release")
        target = self._target_path(entry)
        try:
            if self.use_binds:
                if not target.exists():
                    self._ensure_target(entry)
                read_only = not entry.writable and entry.kind != DEVICE
                _mount_bind(entry.source, str(target), read_only=read_only)
                self._undo.append(("umount", str(target)))
            else:
                self._copy_graft(entry, target)
                self._undo.append(("rm", str(target)))
        except OSError as exc:
            raise MountFailedError(entry, str(exc), completed=self._realized)
        self._realized += 1

    def _copy_graft(self, entry: MountEntry, target: Path) -> None:
        src = Path(entry.source)
        if not src.exists():
            raise OSError("graft source %s does not exist" % src)
        mode = os.stat(src).st_mode
        if src.is_dir():
            if target.exists():
                shutil.rmtree(target)
            shutil.copytree(src, target, symlinks=True)
        elif stat.S_ISCHR(mode) or stat.S_ISBLK(mode):
            # Cannot replicate a device node without privileges.
            target.touch()
            self.warnings.append("device %s realized as placeholder (copy mode)"
                                 % entry.source)
        else:
            shutil.copy2(src, target)

    def seal(self) -> None:
        self.sealed = True

    # -- unwind ------------------------------------------------------------

    def release(self) -> list[str]:
        """Unwind everything in reverse order; idempotent."""
        if self.released:
            return []
        self.released = True
        errors = []
        for op, path in reversed(self._undo):
            try:
                if op == "umount":
                    _umount(path)
                elif op == "rm":
                    self._remove(Path(path))
                elif op == "clear":
                    _clear_root(Path(path))
            except OSError as exc:
                errors.append("%s %s: %s" % (op, path, exc))
        self._undo.clear()
        return errors

    @staticmethod
    def _remove(path: Path) -> None:
        if path.is_dir() and not path.is_symlink():
            shutil.rmtree(path)
        elif path.exists() or path.is_symlink():
            path.unlink()


def _clear_root(root: Path) -> None:
    from .imagefs import _clear_tree
    if root.exists():
        _clear_tree(root)


def prepare_environment(plan: MountPlan, packed: PackedImage, root,
                        trace: StageTrace | None = None,
                        allow_mounts: bool = True,
                        workdir: str | None = None) -> PreparedRoot:
    """Realize a full mount plan on ``root`` and return the handle.

    On a mid-plan failure the raised MountFailedError carries the handle
    (``exc.handle``) so the caller can unwind the completed entries.
    """
    trace = trace or StageTrace()
    handle = PreparedRoot(root, allow_mounts=allow_mounts)
    trace.record("PREPARE", "root=%s" % root)
    try:
        handle.realize_image_root(packed)
        handle.realize_grafts(plan, workdir=workdir)
    except MountFailedError as exc:
        exc.handle = handle
        raise
    trace.record("MOUNT", "entries=%d mode=%s ro=%s"
                 % (len(plan.entries), "bind" if handle.use_binds else "copy",
                    int(handle.root_ro)))
    return handle


# -- child-side stages -----------------------------------------------------------


def enter_container(root, workdir: str | None) -> str:
    """Change this process's root to the prepared tree.

    Must run in the container child (or a sacrificial fork): there is no
    way back.  Returns the isolation mechanism used.
    """
    mechanism = "chroot"
    if _libc.unshare(_CLONE_NEWNS) == 0:
        _libc.mount(b"none", b"/", None, _MS_REC | _MS_PRIVATE, None)
        mechanism = "chroot+mntns"
    else:
        # Unprivileged fallback: map ourselves into a fresh user namespace,
        # which grants the capabilities chroot needs inside it.
        uid, gid = os.getuid(), os.getgid()
        if _libc.unshare(_CLONE_NEWUSER | _CLONE_NEWNS) == 0:
            try:
                Path("/proc/self/setgroups").write_text("deny")
                Path("/proc/self/gid_map").write_text("%d %d 1" % (gid, gid))
                Path("/proc/self/uid_map").write_text("%d %d 1" % (uid, uid))
            except OSError:
                pass
            mechanism = "chroot+userns"
    try:
        os.chroot(str(root))
        os.chdir("/")
    except OSError as exc:
        raise IsolationFailedError("chroot(%s): %s" % (root, exc))
    wd = workdir or "/"
    try:
        os.chdir(wd)
    except OSError as exc:
        raise IsolationFailedError("workdir %s: %s" % (wd, exc))
    return mechanism


def drop_privileges(uid: int, gid: int) -> None:
    """Set the effective group id, then the effective user id.

    Group must go first: after the user id drops, the process no longer
    has the privilege to change its groups.  Any failure aborts the
    launch; continuing privileged is never an option.
    """
    try:
        os.setegid(gid)
        os.seteuid(uid)
    except OSError as exc:
        raise DropFailedError("setegid/seteuid(%d,%d): %s" % (gid, uid, exc))
    if os.getegid() != gid or os.geteuid() != uid:
        raise DropFailedError("effective ids did not change")


def resolve_argv0(argv0: str, env: dict) -> str | None:
    """PATH resolution inside the (already entered) container root."""
    if "/" in argv0:
        candidate = argv0
        return candidate if _executable(candidate) else None
    for d in env.get("PATH", _DEFAULT_PATH).split(":"):
        if not d:
            continue
        candidate = os.path.join(d, argv0)
        if _executable(candidate):
            return candidate
    return None


def _executable(path: str) -> bool:
    return os.path.isfile(path) and os.access(path, os.X_OK)


def _child_run(pipe_fd: int, root: Path, workdir: str | None, uid: int, gid: int,
               argv: list[str], env: dict, fault_hook) -> None:
    """Post-fork continuation: report stages over the pipe, then exec.

    The pipe write end is close-on-exec, so a successful exec is visible
    to the parent as EOF right after the EXEC line.
    """
    out = os.fdopen(pipe_fd, "w")

    def say(line: str) -> None:
        out.write(line + "\n")
        out.flush()

    def boundary(stage: str) -> None:
        if fault_hook is not None:
            fault_hook(stage)

    try:
        try:
            boundary("CHROOT")
            mechanism = enter_container(root, workdir)
            say("STAGE CHROOT mechanism=%s workdir=%s" % (mechanism, workdir or "/"))

            boundary("DROP_PRIVILEGES")
            drop_privileges(uid, gid)
            say("STAGE DROP_PRIVILEGES gid=%d uid=%d order=gid-first" % (gid, uid))

            boundary("EXPORT_ENV")
            say("STAGE EXPORT_ENV vars=%d" % len(env))

            boundary("EXEC")
            target = resolve_argv0(argv[0], env)
            if target is None:
                say("ERROR EXEC_NOT_FOUND %s" % argv[0])
                os._exit(127)
            say("STAGE EXEC %s" % target)
            # The pipe closes on exec; each line was flushed as written.
            os.execve(target, argv, env)
        except FaultInjectedError as exc:
            say("FAULT %s" % exc.stage)
            os._exit(211)
        except HpcRunError as exc:
            say("ERROR %s %s" % (exc.code, exc))
            os._exit(exc.exit_status)
        except FileNotFoundError:
            say("ERROR EXEC_NOT_FOUND %s" % argv[0])
            os._exit(127)
        except OSError as exc:
            say("ERROR EXEC_FAILED %s" % exc)
            os._exit(126)
    finally:
        os._exit(255)


_FORWARDED_SIGNALS = (signal.SIGTERM, signal.SIGINT, signal.SIGHUP,
                      signal.SIGQUIT, signal.SIGUSR1, signal.SIGUSR2)


class _SignalForwarder:
    def __init__(self, pid: int):
        self.pid = pid
        self._saved = {}

    def __enter__(self):
        for sig in _FORWARDED_SIGNALS:
            try:
                self._saved[sig] = signal.signal(sig, self._forward)
            except (OSError, ValueError):
                pass
        return self

    def _forward(self, signum, frame):
        try:
            os.kill(self.pid, signum)
        except ProcessLookupError:
            pass

    def __exit__(self, *exc):
        for sig, handler in self._saved.items():
            signal.signal(sig, handler)


# -- runtime orchestration --------------------------------------------------------


class Runtime:
    """Drives one containerized execution end to end."""

    def __init__(self, site: SiteConfig, gateway: Gateway | None = None,
                 allow_mounts: bool = True):
        self.site = site
        self.gateway = gateway or Gateway(site)
        self.allow_mounts = allow_mounts

    def launch(self, spec: LaunchSpec, fault_hook=None) -> LaunchResult:
        """Run the full stage machine; never raises for launch failures.

        The result carries the child's exit status (or the failing
        error's status), the stage trace (always ending in CLEANUP), the
        realized mount plan and any cleanup problems.
        """
        trace = StageTrace(spec.trace_path or self.site.trace_file)
        handle = None
        tmp = None
        plan = None
        gpu_plan = None
        mpi_plan = None
        error: HpcRunError | None = None
        status = 200
        try:
            self._boundary(fault_hook, "PREPARE")
            entry = self.gateway.lookup_image(spec.image)
            if entry.state != STATE_READY:
                raise ImageNotReadyError("image %s is %s, refusing to launch"
                                         % (entry.reference, entry.state))
            packed = self.gateway.packed_image(entry)
            config = self.gateway.image_config(entry)
            argv = list(spec.argv) or _default_argv(config)
            if not argv:
                raise ExecNotFoundError("no command given and the image defines none")
            inventory = gpu_mod.probe_host_inventory(
                device_dir=self.site.gpu.device_dir,
                library_dirs=self.site.gpu.library_dirs,
                smi_dirs=self.site.gpu.smi_dirs,
                mock_inventory=self.site.gpu.mock_inventory)
            visibility = gpu_mod.detect_trigger(spec.host_env, inventory)
            if visibility is not None:
                gpu_plan = gpu_mod.plan_gpu_injection(visibility, inventory)
            tmp = Path(tempfile.mkdtemp(prefix="hpcrun-launch-"))
            root = tmp / "root"
            root.mkdir()
            trace.record("PREPARE", "image=%s gpu=%s argv0=%s"
                         % (entry.image_id[:12],
                            "on" if gpu_plan else "off", argv[0]))

            self._boundary(fault_hook, "MOUNT")
            handle = PreparedRoot(root, allow_mounts=self.allow_mounts)
            handle.realize_image_root(packed)
            if spec.mpi_enabled:
                if self.site.mpi is None:
                    raise MissingRequiredError("mpi (host MPI paths not configured)")
                scan = mpi_mod.scan_container_mpi(root, config.env)
                mpi_plan = mpi_mod.plan_mpi_injection(scan, self.site.mpi)
            plan = build_mount_plan(spec, packed, self.site, gpu_plan, mpi_plan)
            handle.realize_grafts(plan, workdir=config.workdir)
            trace.record("MOUNT", "entries=%d mode=%s ro=%s"
                         % (len(plan.entries),
                            "bind" if handle.use_binds else "copy",
                            int(handle.root_ro)))
            handle.seal()

            injector_env = [p.env_adjustments for p in (gpu_plan, mpi_plan) if p]
            env = merge_environment(config.env, spec.host_env, self.site,
                                    injector_env)
            status = self._spawn_and_wait(handle, spec, config, argv, env,
                                          trace, fault_hook)
        except HpcRunError as exc:
            error = exc
            status = exc.exit_status
            logger.error("%s", exc)
        finally:
            cleanup_errors = self._cleanup(handle, tmp, trace, fault_hook)
        return LaunchResult(exit_status=status, trace=trace, plan=plan,
                            error=error, cleanup_errors=cleanup_errors,
                            gpu_plan=gpu_plan, mpi_plan=mpi_plan)

    @staticmethod
    def _boundary(fault_hook, stage: str) -> None:
        if fault_hook is not None:
            fault_hook(stage)

    def _spawn_and_wait(self, handle: PreparedRoot, spec: LaunchSpec, config,
                        argv: list[str], env: dict, trace: StageTrace,
                        fault_hook) -> int:
        sys.stdout.flush()
        sys.stderr.flush()
        read_fd, write_fd = os.pipe()
        pid = os.fork()
        if pid == 0:
            os.close(read_fd)
            _child_run(write_fd, handle.root, config.workdir,
                       spec.invoking_uid, spec.invoking_gid, argv, env,
                       fault_hook)
            os._exit(255)  # unreachable
        os.close(write_fd)

        fault_stage = None
        child_error = None
        with os.fdopen(read_fd, "r", errors="replace") as pipe, \
                _SignalForwarder(pid):
            for line in pipe:
                kind, _, rest = line.rstrip("\n").partition(" ")
                if kind == "STAGE":
                    stage, _, detail = rest.partition(" ")
                    trace.record(stage, detail)
                elif kind == "FAULT":
                    fault_stage = rest
                elif kind == "ERROR":
                    child_error = rest
            _, wstatus = os.waitpid(pid, 0)

        if fault_stage:
            raise FaultInjectedError(fault_stage)
        if child_error:
            code, _, detail = child_error.partition(" ")
            raise _child_error_for(code, detail)
        if os.WIFEXITED(wstatus):
            return os.WEXITSTATUS(wstatus)
        if os.WIFSIGNALED(wstatus):
            return 128 + os.WTERMSIG(wstatus)
        return 200

    def _cleanup(self, handle, tmp, trace: StageTrace, fault_hook) -> list[str]:
        errors: list[str] = []
        try:
            self._boundary(fault_hook, "CLEANUP")
        except FaultInjectedError as exc:
            errors.append(str(CleanupIncompleteError("fault at %s" % exc.stage)))
        if handle is not None:
            errors.extend(handle.release())
        if tmp is not None:
            try:
                shutil.rmtree(tmp)
            except OSError as exc:
                errors.append(str(CleanupIncompleteError(str(exc))))
        trace.record("CLEANUP", "errors=%d" % len(errors))
        trace.close()
        for err in errors:
            logger.error("cleanup: %s", err)
        return errors


def _default_argv(config) -> list[str]:
    argv = list(config.entrypoint or [])
    argv.extend(config.cmd or [])
    return argv


def _child_error_for(code: str, detail: str) -> HpcRunError:
    if code == "ISOLATION_FAILED":
        return IsolationFailedError(detail)
    if code == "DROP_FAILED":
        return DropFailedError(detail)
    if code == "EXEC_NOT_FOUND":
        return ExecNotFoundError(detail)
    err = HpcRunError(detail)
    err.code = code
    err.exit_status = 126 if code == "EXEC_FAILED" else 200
    return err
