"""Layer flattening and image packing.

A layer stack is merged bottom-to-top into a single root tree with the
standard whiteout dialect applied: ``.wh.<name>`` deletes ``<name>`` from
the view assembled so far, ``.wh..wh..opq`` hides all lower-layer content
of its directory, and the markers themselves never reach the output.
Within one layer, opaque markers are applied first, then whiteouts, then
the layer's own entries.

The merged tree is packed either as a squash filesystem image (when the
host provides ``mksquashfs``) or as a canonical uncompressed archive:
entries sorted lexicographically by path (UTF-8 byte order), zeroed
timestamps, zeroed ownership.  The archive form is byte-reproducible.
"""

import hashlib
import json
import logging
import os
import posixpath
import shutil
import subprocess
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CorruptPackError,
    MountDeniedError,
    PackerUnavailableError,
    PathEscapeError,
    StorageFullError,
)

logger = logging.getLogger(__name__)

WHITEOUT_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"

FORMAT_SQUASH = "SQUASH"
FORMAT_ARCHIVE = "ARCHIVE"


@dataclass
class ImageConfig:
    """Runtime metadata carried alongside an image root tree."""

    env: list[str] = field(default_factory=list)
    entrypoint: list[str] | None = None
    cmd: list[str] | None = None
    workdir: str | None = None

    def __post_init__(self):
        kept = []
        for entry in self.env:
            key, sep, _ = entry.partition("=")
            if not sep or not key:
                logger.warning("dropping malformed image env entry %r", entry)
                continue
            kept.append(entry)
        self.env = kept

    @classmethod
    def from_docker_config(cls, doc: dict) -> "ImageConfig":
        cfg = doc.get("config") or doc.get("container_config") or {}
        return cls(
            env=list(cfg.get("Env") or []),
            entrypoint=list(cfg["Entrypoint"]) if cfg.get("Entrypoint") else None,
            cmd=list(cfg["Cmd"]) if cfg.get("Cmd") else None,
            workdir=cfg.get("WorkingDir") or None,
        )

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "entrypoint": self.entrypoint,
            "cmd": self.cmd,
            "workdir": self.workdir,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ImageConfig":
        return cls(
            env=list(doc.get("env") or []),
            entrypoint=doc.get("entrypoint"),
            cmd=doc.get("cmd"),
            workdir=doc.get("workdir"),
        )


@dataclass(frozen=True)
class PackedImage:
    path: Path
    format: str
    image_id: str


# -- layer extraction ---------------------------------------------------------


def _normalize_member_name(name: str) -> str | None:
    """Archive member name -> root-relative path, or None for the root itself."""
    rel = posixpath.normpath(name.lstrip("/"))
    if rel in (".", ""):
        return None
    if rel == ".." or rel.startswith("../"):
        raise PathEscapeError("member %r escapes the layer root" % name)
    return rel


def _check_containment(root: Path, dest: Path, name: str) -> None:
    # Guards against writing through a symlinked parent directory.
    parent = os.path.realpath(dest.parent)
    root_real = os.path.realpath(root)
    if parent != root_real and not parent.startswith(root_real + os.sep):
        raise PathEscapeError("member %r resolves outside the layer root" % name)


def extract_layer(archive, dest: Path, owners: dict | None = None) -> list[str]:
    """Extract one layer archive into ``dest``, hardened against escapes.

    Whiteout marker entries are preserved as plain files for the flatten
    step.  Hard links are materialized as copies; device nodes, fifos and
    extended attributes are skipped with a warning.  Nonzero ownership is
    recorded into ``owners`` (path -> "uid:gid") but never applied.

    ``archive`` is a path or a binary file object; gzip compression is
    detected automatically.  Returns the list of warnings.
    """
    warnings: list[str] = []
    dest = Path(dest)
    dir_modes: list[tuple[Path, int]] = []
    if hasattr(archive, "read"):
        tf = tarfile.open(fileobj=archive, mode="r:*")
    else:
        tf = tarfile.open(archive, mode="r:*")
    with tf:
        for member in tf:
            rel = _normalize_member_name(member.name)
            if rel is None:
                continue
            target = dest / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            _check_containment(dest, target, member.name)
            if owners is not None and (member.uid or member.gid):
                owners[rel] = "%d:%d" % (member.uid, member.gid)
            if any(k.startswith("SCHILY.xattr") for k in (member.pax_headers or {})):
                warnings.append("xattrs on %s skipped" % rel)

            if member.isdir():
                if target.is_symlink() or (target.exists() and not target.is_dir()):
                    target.unlink()
                target.mkdir(exist_ok=True)
                dir_modes.append((target, member.mode))
            elif member.isreg():
                _remove_existing(target)
                src = tf.extractfile(member)
                with open(target, "wb") as out:
                    shutil.copyfileobj(src, out)
                os.chmod(target, member.mode & 0o7777)
            elif member.issym():
                _remove_existing(target)
                os.symlink(member.linkname, target)
            elif member.islnk():
                link_rel = _normalize_member_name(member.linkname)
                source = dest / link_rel if link_rel else None
                if source is not None and source.is_file():
                    _remove_existing(target)
                    shutil.copy2(source, target)
                else:
                    warnings.append("hard link %s -> %s has no source; skipped"
                                    % (rel, member.linkname))
            else:
                warnings.append("special entry %s (%s) skipped"
                                % (rel, _member_kind(member)))
    # Directory modes applied last so restrictive modes cannot block children.
    for path, mode in reversed(dir_modes):
        os.chmod(path, mode & 0o7777)
    for w in warnings:
        logger.warning("%s", w)
    return warnings


def _member_kind(member: tarfile.TarInfo) -> str:
    if member.ischr():
        return "char device"
    if member.isblk():
        return "block device"
    if member.isfifo():
        return "fifo"
    return "type %r" % member.type


def _remove_existing(path: Path) -> None:
    if path.is_symlink() or path.exists():
        if path.is_dir() and not path.is_symlink():
            shutil.rmtree(path)
        else:
            path.unlink()


# -- flatten ------------------------------------------------------------------


def _scan_layer(root: Path) -> dict[str, tuple]:
    """Walk one layer tree -> {relpath: ("dir", mode) | ("file", mode, abs)
    | ("symlink", target)}.  Whiteout marker files are included verbatim."""
    entries: dict[str, tuple] = {}
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        base = Path(dirpath)
        for name in list(dirnames):
            p = base / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                entries[rel] = ("symlink", os.readlink(p))
                dirnames.remove(name)
            else:
                entries[rel] = ("dir", p.stat().st_mode & 0o7777)
        for name in filenames:
            p = base / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                entries[rel] = ("symlink", os.readlink(p))
            else:
                entries[rel] = ("file", p.stat().st_mode & 0o7777, str(p))
    return entries


def _drop_subtree(merged: dict, prefix: str) -> None:
    doomed = [k for k in merged if k == prefix or k.startswith(prefix + "/")]
    for k in doomed:
        del merged[k]


def flatten(layer_dirs: list[Path], out_dir: Path) -> None:
    """Merge extracted layer trees (bottom-most first) into ``out_dir``.

    The output carries no whiteout markers; metadata for every surviving
    path comes from the top-most layer that contributed it.
    """
    if not layer_dirs:
        raise ValueError("empty layer stack")
    merged: dict[str, tuple] = {}
    for layer in layer_dirs:
        entries = _scan_layer(Path(layer))
        opaque_dirs = []
        whiteouts = []
        adds = {}
        for rel, entry in entries.items():
            name = posixpath.basename(rel)
            parent = posixpath.dirname(rel)
            if name == OPAQUE_MARKER:
                opaque_dirs.append(parent)
            elif name.startswith(WHITEOUT_PREFIX):
                whiteouts.append(posixpath.join(parent, name[len(WHITEOUT_PREFIX):]))
            else:
                adds[rel] = entry

        for d in opaque_dirs:
            if d:
                _drop_subtree(merged, d)
                # the directory itself survives; this layer re-adds it below
            else:
                merged.clear()
        for target in whiteouts:
            _drop_subtree(merged, target)
        for rel in sorted(adds):
            entry = adds[rel]
            old = merged.get(rel)
            if old is not None and (old[0] != "dir" or entry[0] != "dir"):
                # Type replacement buries whatever lived underneath.
                _drop_subtree(merged, rel)
            merged[rel] = entry

    _materialize(merged, Path(out_dir))


def _materialize(merged: dict[str, tuple], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dir_modes = []
    for rel in sorted(merged):
        entry = merged[rel]
        dest = out_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        if entry[0] == "dir":
            dest.mkdir(exist_ok=True)
            dir_modes.append((dest, entry[1]))
        elif entry[0] == "file":
            shutil.copyfile(entry[2], dest)
            os.chmod(dest, entry[1])
        else:
            os.symlink(entry[1], dest)
    for path, mode in reversed(dir_modes):
        os.chmod(path, mode)


# -- identity -----------------------------------------------------------------


def canonical_listing(root: Path) -> list[list]:
    """Stable description of a tree: [path, kind, mode, content-hash|target].

    Timestamps and ownership are deliberately absent so the listing (and
    the image id derived from it) is reproducible across extractions.
    """
    listing = []
    for rel, entry in sorted(_scan_layer(Path(root)).items()):
        if entry[0] == "dir":
            listing.append([rel, "dir", entry[1], ""])
        elif entry[0] == "file":
            h = hashlib.sha256()
            with open(entry[2], "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 16), b""):
                    h.update(chunk)
            listing.append([rel, "file", entry[1], h.hexdigest()])
        else:
            listing.append([rel, "symlink", 0, entry[1]])
    return listing


def compute_image_id(root: Path, config: ImageConfig) -> str:
    doc = {"tree": canonical_listing(root), "config": config.to_dict()}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- pack ---------------------------------------------------------------------


def squash_packer_available() -> bool:
    return shutil.which("mksquashfs") is not None


def pack(root: Path, out_path: Path, fmt: str | None = None) -> str:
    """Write the packed form of ``root`` to ``out_path``; returns the format.

    Prefers the squash filesystem when a packer exists on the host,
    otherwise writes the canonical archive.  The write is atomic
    (temp file + rename).
    """
    root = Path(root)
    out_path = Path(out_path)
    if fmt is None:
        fmt = FORMAT_SQUASH if squash_packer_available() else FORMAT_ARCHIVE
    if fmt not in (FORMAT_SQUASH, FORMAT_ARCHIVE):
        raise PackerUnavailableError("unknown pack format %r" % fmt)

    tmp = out_path.with_name(out_path.name + ".tmp.%d" % os.getpid())
    try:
        if fmt == FORMAT_SQUASH:
            if not squash_packer_available():
                raise PackerUnavailableError("mksquashfs not found on host")
            subprocess.run(
                ["mksquashfs", str(root), str(tmp), "-noappend", "-no-progress",
                 "-all-root"],
                check=True, capture_output=True)
        else:
            _write_canonical_archive(root, tmp)
        os.replace(tmp, out_path)
    except OSError as exc:
        _unlink_quiet(tmp)
        raise _storage_error(exc)
    except subprocess.CalledProcessError as exc:
        _unlink_quiet(tmp)
        raise PackerUnavailableError("mksquashfs failed: %s" % exc.stderr.decode(errors="replace"))
    return fmt


def _storage_error(exc: OSError) -> Exception:
    import errno
    if exc.errno in (errno.ENOSPC, errno.EDQUOT, errno.EROFS, errno.EACCES, errno.EPERM):
        return StorageFullError(str(exc))
    return exc


def _unlink_quiet(path: Path) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass


def _write_canonical_archive(root: Path, out_path: Path) -> None:
    entries = sorted(_scan_layer(root).items())
    with open(out_path, "wb") as raw:
        with tarfile.open(fileobj=raw, mode="w", format=tarfile.GNU_FORMAT) as tf:
            for rel, entry in entries:
                info = tarfile.TarInfo(name=rel)
                info.mtime = 0
                info.uid = info.gid = 0
                info.uname = info.gname = ""
                if entry[0] == "dir":
                    info.type = tarfile.DIRTYPE
                    info.mode = entry[1]
                    tf.addfile(info)
                elif entry[0] == "file":
                    info.type = tarfile.REGTYPE
                    info.mode = entry[1]
                    info.size = os.path.getsize(entry[2])
                    with open(entry[2], "rb") as fh:
                        tf.addfile(info, fh)
                else:
                    info.type = tarfile.SYMTYPE
                    info.mode = 0o777
                    info.linkname = entry[1]
                    tf.addfile(info)


def archive_listing(pack_path: Path) -> list[list]:
    """Canonical listing computed straight from an ARCHIVE pack's members."""
    listing = []
    try:
        with tarfile.open(pack_path, mode="r:") as tf:
            for member in tf:
                rel = _normalize_member_name(member.name)
                if rel is None:
                    continue
                if member.isdir():
                    listing.append([rel, "dir", member.mode & 0o7777, ""])
                elif member.isreg():
                    h = hashlib.sha256()
                    src = tf.extractfile(member)
                    for chunk in iter(lambda: src.read(1 << 16), b""):
                        h.update(chunk)
                    listing.append([rel, "file", member.mode & 0o7777, h.hexdigest()])
                elif member.issym():
                    listing.append([rel, "symlink", 0, member.linkname])
    except (tarfile.TarError, EOFError, OSError) as exc:
        raise CorruptPackError(str(exc))
    return sorted(listing)


def verify_pack(packed: PackedImage, config: ImageConfig) -> bool:
    """Recompute the image id from pack content; True when it matches."""
    if packed.format != FORMAT_ARCHIVE:
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / "root"
            target.mkdir()
            handle = mount_packed(packed, target, prefer_mount=False)
            try:
                return compute_image_id(target, config) == packed.image_id
            finally:
                handle.release()
    doc = {"tree": archive_listing(packed.path), "config": config.to_dict()}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest() == packed.image_id


# -- mount --------------------------------------------------------------------


class MountedRoot:
    """Handle over a realized pack: loop-mounted, or extracted read-only."""

    def __init__(self, target: Path, mode: str):
        self.target = Path(target)
        self.mode = mode
        self.released = False

    @property
    def fallback_used(self) -> bool:
        return self.mode != "loop"

    def release(self) -> None:
        if self.released:
            return
        self.released = True
        if self.mode in ("loop", "extract-robind"):
            _umount(self.target)
        if self.mode.startswith("extract"):
            _clear_tree(self.target)


def _umount(target: Path) -> None:
    res = subprocess.run(["umount", str(target)], capture_output=True)
    if res.returncode != 0:
        subprocess.run(["umount", "-l", str(target)], capture_output=True)


def _clear_tree(target: Path) -> None:
    for entry in os.scandir(target):
        path = Path(entry.path)
        if entry.is_dir(follow_symlinks=False):
            _force_writable(path)
            shutil.rmtree(path, onerror=_rmtree_fix)
        else:
            try:
                path.unlink()
            except PermissionError:
                os.chmod(target, os.stat(target).st_mode | 0o700)
                path.unlink()


def _force_writable(top: Path) -> None:
    os.chmod(top, os.stat(top).st_mode | 0o700)
    for dirpath, dirnames, _ in os.walk(top):
        for d in dirnames:
            p = os.path.join(dirpath, d)
            if not os.path.islink(p):
                os.chmod(p, os.stat(p).st_mode | 0o700)


def _rmtree_fix(func, path, exc_info):
    try:
        os.chmod(os.path.dirname(path), os.stat(os.path.dirname(path)).st_mode | 0o700)
        func(path)
    except OSError:
        raise


def _try_ro_bind(target: Path) -> bool:
    """Self bind-mount ``target`` and remount it read-only; False if denied."""
    bind = subprocess.run(
        ["mount", "--bind", str(target), str(target)], capture_output=True)
    if bind.returncode != 0:
        return False
    remount = subprocess.run(
        ["mount", "-o", "remount,ro,bind", str(target), str(target)],
        capture_output=True)
    if remount.returncode != 0:
        subprocess.run(["umount", str(target)], capture_output=True)
        return False
    return True


def extract_pack(packed: PackedImage, target: Path) -> None:
    """Unpack an image pack into ``target`` (writable; no handle)."""
    target = Path(target)
    if packed.format == FORMAT_ARCHIVE:
        try:
            with open(packed.path, "rb") as fh:
                extract_layer(fh, target)
        except (tarfile.TarError, EOFError) as exc:
            raise CorruptPackError("unreadable pack %s: %s" % (packed.path, exc))
    else:
        unsquash = shutil.which("unsquashfs")
        if unsquash is None:
            raise MountDeniedError("no loop mount and no unsquashfs for %s" % packed.path)
        res = subprocess.run(
            [unsquash, "-f", "-d", str(target), str(packed.path)], capture_output=True)
        if res.returncode != 0:
            raise CorruptPackError(
                "unsquashfs failed: %s" % res.stderr.decode(errors="replace"))


def mount_packed(packed: PackedImage, target: Path, prefer_mount: bool = True) -> MountedRoot:
    """Realize a pack read-only at ``target`` (an empty directory).

    Squash packs are loop mounted when privileges allow; otherwise the
    content is extracted and the tree is remounted (or chmodded) read-only.
    The handle records which fallback was taken so the runtime can flag it.
    """
    target = Path(target)
    if not target.is_dir() or any(target.iterdir()):
        raise ValueError("mount target %s must be an empty directory" % target)

    if packed.format == FORMAT_SQUASH and prefer_mount:
        res = subprocess.run(
            ["mount", "-o", "loop,ro", str(packed.path), str(target)],
            capture_output=True)
        if res.returncode == 0:
            return MountedRoot(target, "loop")
        logger.info("loop mount denied (%s); extracting instead",
                    res.stderr.decode(errors="replace").strip())

    extract_pack(packed, target)
    if prefer_mount and _try_ro_bind(target):
        return MountedRoot(target, "extract-robind")
    _chmod_readonly(target)
    return MountedRoot(target, "extract")


def _chmod_readonly(top: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(top, topdown=False):
        for name in filenames:
            p = os.path.join(dirpath, name)
            if not os.path.islink(p):
                os.chmod(p, os.stat(p).st_mode & ~0o222)
        os.chmod(dirpath, os.stat(dirpath).st_mode & ~0o222)
