import os
import random
import tarfile
from pathlib import Path

import pytest

from helpers import (
    apply_layers_sequentially,
    layer_tar_bytes,
    materialize_layer,
    random_layer_stack,
    tree_snapshot,
)

from hpcrun import imagefs
from hpcrun.errors import CorruptPackError, PathEscapeError, StorageFullError
from hpcrun.imagefs import (
    FORMAT_ARCHIVE,
    ImageConfig,
    PackedImage,
    compute_image_id,
    extract_layer,
    flatten,
    mount_packed,
    pack,
)
from hpcrun.runtime import _mount_bind, _umount, bind_mounts_available

needs_mounts = pytest.mark.skipif(not bind_mounts_available(),
                                  reason="bind mounts unavailable")


# -- extraction ---------------------------------------------------------------


def test_extract_preserves_whiteout_markers(tmp_path):
    blob = layer_tar_bytes([("dir", "a", 0o755), ("whiteout", "a/f1"),
                            ("opaque", "a")])
    out = tmp_path / "layer"
    (tmp_path / "blob.tar").write_bytes(blob)
    extract_layer(tmp_path / "blob.tar", out)
    assert (out / "a" / ".wh.f1").is_file()
    assert (out / "a" / ".wh..wh..opq").is_file()


def test_extract_rejects_dotdot_traversal(tmp_path):
    blob = layer_tar_bytes([("file", "ok", "x", 0o644)])
    # Craft a malicious member by hand.
    import io
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        info = tarfile.TarInfo("../evil")
        info.size = 1
        tf.addfile(info, io.BytesIO(b"x"))
    evil = tmp_path / "evil.tar"
    evil.write_bytes(buf.getvalue())
    with pytest.raises(PathEscapeError):
        extract_layer(evil, tmp_path / "out")
    (tmp_path / "ok.tar").write_bytes(blob)
    extract_layer(tmp_path / "ok.tar", tmp_path / "out2")


def test_extract_rejects_symlinked_parent_escape(tmp_path):
    import io
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        link = tarfile.TarInfo("a")
        link.type = tarfile.SYMTYPE
        link.linkname = "/tmp"
        tf.addfile(link)
        info = tarfile.TarInfo("a/evil")
        info.size = 1
        tf.addfile(info, io.BytesIO(b"x"))
    evil = tmp_path / "evil.tar"
    evil.write_bytes(buf.getvalue())
    with pytest.raises(PathEscapeError):
        extract_layer(evil, tmp_path / "out")


def test_extract_materializes_hardlinks_as_copies(tmp_path):
    import io
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        info = tarfile.TarInfo("orig")
        info.size = 5
        tf.addfile(info, io.BytesIO(b"hello"))
        ln = tarfile.TarInfo("alias")
        ln.type = tarfile.LNKTYPE
        ln.linkname = "orig"
        tf.addfile(ln)
    (tmp_path / "l.tar").write_bytes(buf.getvalue())
    out = tmp_path / "out"
    extract_layer(tmp_path / "l.tar", out)
    assert (out / "alias").read_bytes() == b"hello"
    assert (out / "orig").stat().st_ino != (out / "alias").stat().st_ino


def test_extract_skips_device_nodes_with_warning(tmp_path):
    import io
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        dev = tarfile.TarInfo("dev-node")
        dev.type = tarfile.CHRTYPE
        dev.devmajor, dev.devminor = 1, 3
        tf.addfile(dev)
    (tmp_path / "l.tar").write_bytes(buf.getvalue())
    warnings = extract_layer(tmp_path / "l.tar", tmp_path / "out")
    assert any("char device" in w for w in warnings)
    assert not (tmp_path / "out" / "dev-node").exists()


def test_extract_accepts_gzip_layers(tmp_path):
    blob = layer_tar_bytes([("file", "f", "data", 0o644)], compress=True)
    (tmp_path / "l.tgz").write_bytes(blob)
    out = tmp_path / "out"
    extract_layer(tmp_path / "l.tgz", out)
    assert (out / "f").read_text() == "data"


# -- flatten -------------------------------------------------------------------


def _flatten_to(tmp_path, layer_dirs):
    out = tmp_path / "merged"
    flatten(layer_dirs, out)
    return out


def test_single_layer_identity(tmp_path):
    layer = materialize_layer(
        [("dir", "a", 0o755), ("file", "a/f", "content", 0o644),
         ("symlink", "a/link", "/target")],
        tmp_path / "l0")
    merged = _flatten_to(tmp_path, [layer])
    assert tree_snapshot(merged) == tree_snapshot(layer)


def test_whiteout_removes_lower_file(tmp_path):
    l1 = materialize_layer([("dir", "a", 0o755),
                            ("file", "a/f1", "one", 0o644),
                            ("file", "a/f2", "two", 0o644)], tmp_path / "l1")
    l2 = materialize_layer([("whiteout", "a/f1")], tmp_path / "l2")
    merged = _flatten_to(tmp_path, [l1, l2])
    snap = tree_snapshot(merged)
    assert "a/f2" in snap
    assert "a/f1" not in snap
    assert not any(".wh." in p for p in snap)


def test_opaque_hides_lower_directory_content(tmp_path):
    l1 = materialize_layer([("dir", "d", 0o755),
                            ("file", "d/x", "x", 0o644),
                            ("file", "d/y", "y", 0o644)], tmp_path / "l1")
    l2 = materialize_layer([("opaque", "d"),
                            ("file", "d/z", "z", 0o644)], tmp_path / "l2")
    merged = _flatten_to(tmp_path, [l1, l2])
    snap = tree_snapshot(merged)
    assert set(k for k in snap if k.startswith("d/")) == {"d/z"}


def test_upper_type_replaces_lower(tmp_path):
    l1 = materialize_layer([("dir", "p", 0o755),
                            ("file", "p/child", "c", 0o644)], tmp_path / "l1")
    l2 = materialize_layer([("file", "p", "now a file", 0o600)], tmp_path / "l2")
    merged = _flatten_to(tmp_path, [l1, l2])
    snap = tree_snapshot(merged)
    assert snap["p"] == ("file", 0o600, b"now a file")
    assert "p/child" not in snap


def test_flatten_matches_sequential_oracle(tmp_path):
    rng = random.Random(1234)
    for case in range(200):
        case_dir = tmp_path / ("case-%d" % case)
        layers = random_layer_stack(rng, case_dir)
        merged = case_dir / "impl"
        flatten(layers, merged)
        oracle = apply_layers_sequentially(layers, case_dir / "oracle")
        assert tree_snapshot(merged) == tree_snapshot(oracle), \
            "flatten diverged from oracle in case %d" % case


def test_flatten_idempotent(tmp_path):
    rng = random.Random(99)
    for case in range(20):
        case_dir = tmp_path / ("case-%d" % case)
        layers = random_layer_stack(rng, case_dir)
        once = case_dir / "once"
        flatten(layers, once)
        twice = case_dir / "twice"
        flatten([once], twice)
        assert tree_snapshot(once) == tree_snapshot(twice)


def test_no_whiteout_leakage(tmp_path):
    rng = random.Random(5)
    for case in range(50):
        case_dir = tmp_path / ("case-%d" % case)
        layers = random_layer_stack(rng, case_dir)
        merged = case_dir / "m"
        flatten(layers, merged)
        for path in tree_snapshot(merged):
            assert not any(part.startswith(".wh.") for part in path.split("/"))


# -- identity and pack -----------------------------------------------------------


def _simple_root(tmp_path, marker="v1"):
    return materialize_layer(
        [("dir", "etc", 0o755), ("file", "etc/data", marker, 0o644),
         ("symlink", "etc/link", "data")],
        tmp_path / ("root-%s" % marker))


def test_image_id_ignores_timestamps(tmp_path):
    root = _simple_root(tmp_path)
    config = ImageConfig(env=["A=1"])
    first = compute_image_id(root, config)
    os.utime(root / "etc" / "data", (1, 1))
    assert compute_image_id(root, config) == first


def test_image_id_tracks_content_and_config(tmp_path):
    config = ImageConfig(env=["A=1"])
    id_a = compute_image_id(_simple_root(tmp_path, "a"), config)
    id_b = compute_image_id(_simple_root(tmp_path, "b"), config)
    assert id_a != id_b
    id_c = compute_image_id(_simple_root(tmp_path, "a"), ImageConfig(env=["A=2"]))
    assert id_c != id_a


def test_pack_archive_is_deterministic(tmp_path):
    root = _simple_root(tmp_path)
    out1 = tmp_path / "one.pack"
    out2 = tmp_path / "two.pack"
    assert pack(root, out1, fmt=FORMAT_ARCHIVE) == FORMAT_ARCHIVE
    os.utime(root / "etc" / "data", (7, 7))
    pack(root, out2, fmt=FORMAT_ARCHIVE)
    assert out1.read_bytes() == out2.read_bytes()


def test_pack_then_extract_round_trip(tmp_path):
    root = _simple_root(tmp_path)
    out = tmp_path / "img.pack"
    fmt = pack(root, out)
    packed = PackedImage(path=out, format=fmt,
                         image_id=compute_image_id(root, ImageConfig()))
    target = tmp_path / "mnt"
    target.mkdir()
    handle = mount_packed(packed, target, prefer_mount=False)
    try:
        assert tree_snapshot(target) == tree_snapshot(root)
    finally:
        handle.release()
    assert list(target.iterdir()) == []


def test_verify_pack_detects_match_and_mismatch(tmp_path):
    root = _simple_root(tmp_path)
    config = ImageConfig(env=["A=1"])
    out = tmp_path / "img.pack"
    pack(root, out, fmt=FORMAT_ARCHIVE)
    good = PackedImage(path=out, format=FORMAT_ARCHIVE,
                       image_id=compute_image_id(root, config))
    assert imagefs.verify_pack(good, config)
    bad = PackedImage(path=out, format=FORMAT_ARCHIVE, image_id="0" * 64)
    assert not imagefs.verify_pack(bad, config)


@needs_mounts
def test_pack_to_read_only_store(tmp_path):
    root = _simple_root(tmp_path)
    store = tmp_path / "ro-store"
    store.mkdir()
    _mount_bind(str(store), str(store), read_only=True)
    try:
        with pytest.raises(StorageFullError):
            pack(root, store / "img.pack", fmt=FORMAT_ARCHIVE)
    finally:
        _umount(str(store))


def test_mount_read_back_content(tmp_path, toolbox):
    from helpers import OS_RELEASE
    root = materialize_layer(
        [("dir", "etc", 0o755), ("file", "etc/os-release", OS_RELEASE, 0o644)],
        tmp_path / "root")
    out = tmp_path / "img.pack"
    fmt = pack(root, out)
    packed = PackedImage(path=out, format=fmt, image_id="x")
    target = tmp_path / "mnt"
    target.mkdir()
    handle = mount_packed(packed, target)
    try:
        assert (target / "etc" / "os-release").read_text() == OS_RELEASE
        with pytest.raises(OSError):
            (target / "etc" / "scribble").write_text("nope")
    finally:
        handle.release()


def test_mount_truncated_pack_is_corrupt(tmp_path):
    root = _simple_root(tmp_path)
    out = tmp_path / "img.pack"
    pack(root, out, fmt=FORMAT_ARCHIVE)
    data = out.read_bytes()
    out.write_bytes(data[:len(data) // 2])
    packed = PackedImage(path=out, format=FORMAT_ARCHIVE, image_id="x")
    target = tmp_path / "mnt"
    target.mkdir()
    with pytest.raises(CorruptPackError):
        mount_packed(packed, target, prefer_mount=False)


def test_mount_requires_empty_target(tmp_path):
    root = _simple_root(tmp_path)
    out = tmp_path / "img.pack"
    fmt = pack(root, out)
    packed = PackedImage(path=out, format=fmt, image_id="x")
    target = tmp_path / "mnt"
    target.mkdir()
    (target / "junk").write_text("x")
    with pytest.raises(ValueError):
        mount_packed(packed, target)
