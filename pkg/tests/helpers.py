"""Shared test helpers: tree building, snapshots, and the independent
sequential-extraction oracle for layer flattening."""

import io
import os
import posixpath
import shutil
import tarfile
from pathlib import Path

OS_RELEASE = (
    'NAME="Fixture Linux"\n'
    'VERSION="16.04 (Desk Scale)"\n'
    "ID=fixture\n"
    "ID_LIKE=debian\n"
    'PRETTY_NAME="Fixture Linux 16.04"\n'
)

TOOLBOX_APPLETS = ("cat", "exitwith", "printenv", "pwd", "ids", "sleepy", "echo")


# -- layer construction ---------------------------------------------------------

# Layer entry specs:
#   ("dir", path, mode)
#   ("file", path, content_bytes_or_str, mode)
#   ("symlink", path, target)
#   ("whiteout", path)              -> parent/.wh.name
#   ("opaque", dirpath)             -> dirpath/.wh..wh..opq
#   ("copy", path, host_source, mode)


def materialize_layer(entries, dest: Path) -> Path:
    dest.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        kind = entry[0]
        if kind == "dir":
            p = dest / entry[1]
            p.mkdir(parents=True, exist_ok=True)
            os.chmod(p, entry[2])
        elif kind == "file":
            p = dest / entry[1]
            p.parent.mkdir(parents=True, exist_ok=True)
            data = entry[2].encode() if isinstance(entry[2], str) else entry[2]
            p.write_bytes(data)
            os.chmod(p, entry[3])
        elif kind == "symlink":
            p = dest / entry[1]
            p.parent.mkdir(parents=True, exist_ok=True)
            if p.is_symlink() or p.exists():
                p.unlink()
            os.symlink(entry[2], p)
        elif kind == "whiteout":
            parent, name = posixpath.split(entry[1])
            p = dest / parent / (".wh." + name)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(b"")
        elif kind == "opaque":
            p = dest / entry[1] / ".wh..wh..opq"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(b"")
        elif kind == "copy":
            p = dest / entry[1]
            p.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(entry[2], p)
            os.chmod(p, entry[3])
        else:
            raise ValueError("unknown layer entry kind %r" % kind)
    return dest


def layer_tar_bytes(entries, compress: bool = False) -> bytes:
    """Build one layer archive in memory from entry specs."""
    buf = io.BytesIO()
    mode = "w:gz" if compress else "w"
    with tarfile.open(fileobj=buf, mode=mode) as tf:
        seen_dirs = set()

        def ensure_parents(path):
            parent = posixpath.dirname(path)
            if parent and parent not in seen_dirs:
                ensure_parents(parent)
                info = tarfile.TarInfo(parent)
                info.type = tarfile.DIRTYPE
                info.mode = 0o755
                tf.addfile(info)
                seen_dirs.add(parent)

        for entry in entries:
            kind = entry[0]
            if kind == "dir":
                ensure_parents(entry[1])
                info = tarfile.TarInfo(entry[1])
                info.type = tarfile.DIRTYPE
                info.mode = entry[2]
                tf.addfile(info)
                seen_dirs.add(entry[1])
            elif kind in ("file", "copy"):
                ensure_parents(entry[1])
                if kind == "file":
                    data = entry[2].encode() if isinstance(entry[2], str) else entry[2]
                else:
                    data = Path(entry[2]).read_bytes()
                info = tarfile.TarInfo(entry[1])
                info.size = len(data)
                info.mode = entry[3]
                tf.addfile(info, io.BytesIO(data))
            elif kind == "symlink":
                ensure_parents(entry[1])
                info = tarfile.TarInfo(entry[1])
                info.type = tarfile.SYMTYPE
                info.linkname = entry[2]
                tf.addfile(info)
            elif kind == "whiteout":
                parent, name = posixpath.split(entry[1])
                path = posixpath.join(parent, ".wh." + name) if parent else ".wh." + name
                ensure_parents(path)
                info = tarfile.TarInfo(path)
                info.size = 0
                tf.addfile(info, io.BytesIO(b""))
            elif kind == "opaque":
                path = posixpath.join(entry[1], ".wh..wh..opq")
                ensure_parents(path)
                info = tarfile.TarInfo(path)
                info.size = 0
                tf.addfile(info, io.BytesIO(b""))
            else:
                raise ValueError("unknown layer entry kind %r" % kind)
    return buf.getvalue()


# -- tree snapshots ---------------------------------------------------------------


def tree_snapshot(root: Path) -> dict:
    """relpath -> ("dir", mode) | ("file", mode, content) | ("symlink", target)."""
    snap = {}
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        for name in list(dirnames):
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                snap[rel] = ("symlink", os.readlink(p))
                dirnames.remove(name)
            else:
                snap[rel] = ("dir", p.stat().st_mode & 0o7777)
        for name in filenames:
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                snap[rel] = ("symlink", os.readlink(p))
            else:
                snap[rel] = ("file", p.stat().st_mode & 0o7777, p.read_bytes())
    return snap


# -- sequential-extraction oracle -------------------------------------------------


def apply_layers_sequentially(layer_dirs, dest: Path) -> Path:
    """Reference flattening: apply each layer to a real directory in order.

    Per layer: clear opaque-marked directories, delete whiteout targets,
    then copy the layer's own entries over the result (replacing on type
    change).  Deliberately implemented as literal disk mutation so it
    stays independent of the map-based production path.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for layer in layer_dirs:
        layer = Path(layer)
        opaques = []
        whiteouts = []
        adds = []
        for dirpath, dirnames, filenames in os.walk(layer):
            rel_dir = Path(dirpath).relative_to(layer).as_posix()
            rel_dir = "" if rel_dir == "." else rel_dir
            for name in filenames:
                rel = posixpath.join(rel_dir, name) if rel_dir else name
                if name == ".wh..wh..opq":
                    opaques.append(rel_dir)
                elif name.startswith(".wh."):
                    target = posixpath.join(rel_dir, name[4:]) if rel_dir else name[4:]
                    whiteouts.append(target)
                else:
                    adds.append(rel)
            for name in dirnames:
                rel = posixpath.join(rel_dir, name) if rel_dir else name
                adds.append(rel)

        for rel_dir in opaques:
            target = dest / rel_dir if rel_dir else dest
            if target.is_dir():
                for child in target.iterdir():
                    _rm_any(child)
        for rel in whiteouts:
            _rm_any(dest / rel)
        # Shallow paths first so parent directories exist before children.
        for rel in sorted(adds):
            src = layer / rel
            dst = dest / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            if src.is_symlink():
                _rm_any(dst)
                os.symlink(os.readlink(src), dst)
            elif src.is_dir():
                if dst.is_symlink() or (dst.exists() and not dst.is_dir()):
                    _rm_any(dst)
                dst.mkdir(exist_ok=True)
                os.chmod(dst, src.stat().st_mode & 0o7777)
            else:
                _rm_any(dst)
                shutil.copyfile(src, dst)
                os.chmod(dst, src.stat().st_mode & 0o7777)
    return dest


def _rm_any(path: Path) -> None:
    if path.is_symlink():
        path.unlink()
    elif path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()


# -- random layer-stack generation -------------------------------------------------


def random_layer_stack(rng, workdir: Path, max_layers: int = 5,
                       max_entries: int = 50):
    """Generate a random stack of materialized layer directories.

    Paths come from a small alphabet so collisions (replacements,
    whiteouts of real paths, opaque markers over populated directories)
    are frequent.
    """
    names = ["a", "b", "c", "d", "e"]
    dir_pool = ["d1", "d2", "d1/d3", "d2/d4"]
    file_modes = [0o644, 0o755, 0o600]
    dir_modes = [0o755, 0o750]

    n_layers = rng.randint(1, max_layers)
    layer_dirs = []
    known_paths = set()
    for i in range(n_layers):
        entries = []
        n_entries = rng.randint(1, max_entries)
        for _ in range(n_entries):
            roll = rng.random()
            d = rng.choice(dir_pool)
            name = rng.choice(names)
            path = posixpath.join(d, name) if rng.random() < 0.8 else name
            if roll < 0.45:
                entries.append(("dir", posixpath.dirname(path) or d, rng.choice(dir_modes)))
                content = "layer%d:%s:%d" % (i, path, rng.randint(0, 999))
                entries.append(("file", path, content, rng.choice(file_modes)))
                known_paths.add(path)
            elif roll < 0.6:
                entries.append(("dir", d, rng.choice(dir_modes)))
                known_paths.add(d)
            elif roll < 0.7:
                target = rng.choice(["/abs/target", "relative", "../up", "a"])
                entries.append(("symlink", path, target))
                known_paths.add(path)
            elif roll < 0.9 and i > 0:
                victim = rng.choice(sorted(known_paths)) if known_paths else path
                entries.append(("whiteout", victim))
            elif i > 0:
                entries.append(("opaque", rng.choice(dir_pool)))
        layer = materialize_layer(entries, workdir / ("layer-%d" % i))
        layer_dirs.append(layer)
    return layer_dirs
