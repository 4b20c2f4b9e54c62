"""Image gateway: pulls, imports, flattens, packs and catalogs images.

The catalog is one JSON document per image store, guarded by a checksum
and published by write-temp-then-rename so readers observe either the
pre-publish or post-publish state.  Pulls of the same normalized
reference are serialized (thread lock plus advisory file lock) and
deduplicated: a READY entry short-circuits the download entirely.
"""

import hashlib
import json
import logging
import os
import shutil
import tarfile
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import imagefs
from .errors import (
    CatalogCorruptError,
    HpcRunError,
    ImageNotFoundError,
    MissingManifestError,
    StorageFullError,
    UnreadableArchiveError,
)
from .imagefs import ImageConfig, PackedImage
from .reference import ImageReference, parse_image_reference
from .registry import RegistryClient

logger = logging.getLogger(__name__)

STATE_PULLING = "PULLING"
STATE_READY = "READY"
STATE_FAILED = "FAILED"


@dataclass
class CatalogEntry:
    reference: ImageReference
    image_id: str
    state: str
    created_at: str
    pack_path: str
    format: str = imagefs.FORMAT_ARCHIVE
    source: str = "registry"
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "reference": {
                "registry": self.reference.registry,
                "repository": self.reference.repository,
                "tag": self.reference.tag,
                "digest": self.reference.digest,
            },
            "image_id": self.image_id,
            "state": self.state,
            "created_at": self.created_at,
            "pack_path": self.pack_path,
            "format": self.format,
            "source": self.source,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CatalogEntry":
        r = doc["reference"]
        return cls(
            reference=ImageReference(registry=r["registry"], repository=r["repository"],
                                     tag=r["tag"], digest=r.get("digest")),
            image_id=doc["image_id"],
            state=doc["state"],
            created_at=doc["created_at"],
            pack_path=doc["pack_path"],
            format=doc.get("format", imagefs.FORMAT_ARCHIVE),
            source=doc.get("source", "registry"),
            message=doc.get("message", ""),
        )


def _entries_checksum(entries: list[dict]) -> str:
    blob = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class ImageStore:
    """On-disk layout: images/<id>.pack, images/<id>.meta, catalog."""

    def __init__(self, root):
        self.root = Path(root)
        self.images_dir = self.root / "images"
        self.tmp_dir = self.root / "tmp"
        self.locks_dir = self.root / "locks"
        self.catalog_path = self.root / "catalog"

    def ensure_layout(self) -> None:
        for d in (self.root, self.images_dir, self.tmp_dir, self.locks_dir):
            d.mkdir(parents=True, exist_ok=True)

    def pack_path(self, image_id: str) -> Path:
        return self.images_dir / ("%s.pack" % image_id)

    def meta_path(self, image_id: str) -> Path:
        return self.images_dir / ("%s.meta" % image_id)

    def write_meta(self, image_id: str, doc: dict) -> None:
        path = self.meta_path(image_id)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    def load_meta(self, image_id: str) -> dict:
        try:
            return json.loads(self.meta_path(image_id).read_text())
        except OSError as exc:
            raise ImageNotFoundError("metadata for %s missing: %s" % (image_id, exc))

    def read_catalog(self) -> dict[str, CatalogEntry]:
        if not self.catalog_path.exists():
            return {}
        try:
            doc = json.loads(self.catalog_path.read_text())
        except (OSError, ValueError) as exc:
            raise CatalogCorruptError("unreadable catalog: %s" % exc)
        entries = doc.get("entries")
        if entries is None or doc.get("checksum") != _entries_checksum(entries):
            raise CatalogCorruptError("catalog checksum mismatch")
        out = {}
        for item in entries:
            entry = CatalogEntry.from_dict(item)
            out[entry.reference.key] = entry
        return out

    def publish_entry(self, entry: CatalogEntry) -> None:
        """Read-modify-write the catalog under the store lock, atomically."""
        import fcntl
        self.ensure_layout()
        lock_file = self.locks_dir / "catalog.lock"
        with open(lock_file, "w") as lk:
            fcntl.flock(lk, fcntl.LOCK_EX)
            entries = self.read_catalog()
            entries[entry.reference.key] = entry
            docs = [entries[k].to_dict() for k in sorted(entries)]
            doc = {"version": 1, "entries": docs, "checksum": _entries_checksum(docs)}
            tmp = self.catalog_path.with_name("catalog.tmp.%d" % os.getpid())
            try:
                tmp.write_text(json.dumps(doc, indent=2) + "\n")
                os.replace(tmp, self.catalog_path)
            except OSError as exc:
                try:
                    os.unlink(tmp)
                except OSError:
                    pass
                raise StorageFullError(str(exc)) if _is_storage_errno(exc) else exc


def _is_storage_errno(exc: OSError) -> bool:
    import errno
    return exc.errno in (errno.ENOSPC, errno.EDQUOT, errno.EROFS, errno.EACCES)


class Gateway:
    """Front door for pull/import/list/lookup against one image store."""

    _ref_locks: dict[tuple, threading.Lock] = {}
    _ref_locks_guard = threading.Lock()

    def __init__(self, config, client: RegistryClient | None = None):
        self.config = config
        self.store = ImageStore(config.image_store)
        self.client = client or RegistryClient(base_url=config.registry_base_url)

    # -- reference helpers --------------------------------------------------

    def normalize(self, ref) -> ImageReference:
        if isinstance(ref, ImageReference):
            return ref
        return parse_image_reference(ref, default_registry=self.config.default_registry)

    def _ref_lock(self, key: str) -> threading.Lock:
        ident = (str(self.store.root), key)
        with self._ref_locks_guard:
            return self._ref_locks.setdefault(ident, threading.Lock())

    # -- queries -------------------------------------------------------------

    def list_images(self) -> list[CatalogEntry]:
        entries = list(self.store.read_catalog().values())
        entries.sort(key=lambda e: (e.reference.repository, e.reference.tag))
        return entries

    def lookup_image(self, ref) -> CatalogEntry:
        ref = self.normalize(ref)
        entry = self.store.read_catalog().get(ref.key)
        if entry is None:
            raise ImageNotFoundError("image not found: %s" % ref)
        return entry

    def packed_image(self, entry: CatalogEntry) -> PackedImage:
        return PackedImage(path=Path(entry.pack_path), format=entry.format,
                           image_id=entry.image_id)

    def image_config(self, entry: CatalogEntry) -> ImageConfig:
        meta = self.store.load_meta(entry.image_id)
        return ImageConfig.from_dict(meta["config"])

    def verify_entry(self, entry: CatalogEntry) -> bool:
        return imagefs.verify_pack(self.packed_image(entry), self.image_config(entry))

    # -- pull ----------------------------------------------------------------

    def pull_image(self, ref) -> CatalogEntry:
        """Pull from the registry, flatten, pack and publish.

        Per normalized reference, downloads are serialized and
        deduplicated: callers arriving while a pull is in flight block and
        then receive the entry the first caller produced.
        """
        ref = self.normalize(ref)
        return self._locked_build(ref, source="registry",
                                  build=lambda workdir: self._download(ref, workdir))

    def import_tarball(self, path, ref) -> CatalogEntry:
        """Offline substitute for a registry pull; same post-state."""
        ref = self.normalize(ref)
        return self._locked_build(ref, source="import",
                                  build=lambda workdir: self._unarchive(path, workdir))

    def _locked_build(self, ref: ImageReference, source: str, build) -> CatalogEntry:
        import fcntl
        self.store.ensure_layout()
        with self._ref_lock(ref.key):
            lock_path = self.store.locks_dir / (
                "ref-%s.lock" % hashlib.sha256(ref.key.encode()).hexdigest()[:16])
            with open(lock_path, "w") as lk:
                fcntl.flock(lk, fcntl.LOCK_EX)
                existing = self.store.read_catalog().get(ref.key)
                if existing is not None and existing.state == STATE_READY:
                    return existing
                return self._build_entry(ref, source, build)

    def _build_entry(self, ref: ImageReference, source: str, build) -> CatalogEntry:
        now = datetime.now(timezone.utc).isoformat()
        self.store.publish_entry(CatalogEntry(
            reference=ref, image_id="", state=STATE_PULLING, created_at=now,
            pack_path="", source=source))
        workdir = Path(tempfile.mkdtemp(prefix="build-", dir=self.store.tmp_dir))
        try:
            config, layer_dirs, owners = build(workdir)
            root = workdir / "rootfs"
            imagefs.flatten(layer_dirs, root)
            image_id = imagefs.compute_image_id(root, config)
            pack_path = self.store.pack_path(image_id)
            fmt = imagefs.pack(root, pack_path)
            self.store.write_meta(image_id, {
                "config": config.to_dict(),
                "source": source,
                "reference": ref.render(),
                "format": fmt,
                "owners": owners,
            })
            entry = CatalogEntry(
                reference=ref, image_id=image_id, state=STATE_READY,
                created_at=datetime.now(timezone.utc).isoformat(),
                pack_path=str(pack_path), format=fmt, source=source)
            self.store.publish_entry(entry)
            logger.info("image %s ready (id %s)", ref, image_id[:12])
            return entry
        except HpcRunError as exc:
            self.store.publish_entry(CatalogEntry(
                reference=ref, image_id="", state=STATE_FAILED, created_at=now,
                pack_path="", source=source, message=str(exc)))
            raise
        finally:
            shutil.rmtree(workdir, ignore_errors=True)

    def _download(self, ref: ImageReference, workdir: Path):
        manifest = self.client.fetch_manifest(ref)
        config = self.client.fetch_config(ref, manifest.config_digest)
        owners: dict = {}
        layer_dirs = []
        for i, layer in enumerate(manifest.layers):
            blob = workdir / ("layer-%d.blob" % i)
            self.client.fetch_blob_to_file(ref, layer.digest, blob)
            layer_dir = workdir / ("layer-%d" % i)
            layer_dir.mkdir()
            try:
                imagefs.extract_layer(blob, layer_dir, owners=owners)
            except (tarfile.TarError, EOFError) as exc:
                raise UnreadableArchiveError("layer %s: %s" % (layer.digest, exc))
            blob.unlink()
            layer_dirs.append(layer_dir)
        return config, layer_dirs, owners

    def _unarchive(self, path, workdir: Path):
        try:
            archive = tarfile.open(path, mode="r:*")
        except (OSError, tarfile.TarError) as exc:
            raise UnreadableArchiveError("%s: %s" % (path, exc))
        with archive:
            names = archive.getnames()
            if "manifest.json" not in names:
                raise MissingManifestError("%s has no manifest.json" % path)
            try:
                manifest = json.loads(archive.extractfile("manifest.json").read())
            except ValueError as exc:
                raise MissingManifestError("%s manifest is not JSON: %s" % (path, exc))
            if not manifest:
                raise MissingManifestError("%s has an empty manifest" % path)
            try:
                item = manifest[0]
                config_doc = json.loads(archive.extractfile(item["Config"]).read())
                layer_names = list(item["Layers"])
            except (KeyError, TypeError, ValueError) as exc:
                raise UnreadableArchiveError("%s manifest is malformed: %s" % (path, exc))
            config = ImageConfig.from_docker_config(config_doc)
            owners: dict = {}
            layer_dirs = []
            for i, layer_name in enumerate(layer_names):
                try:
                    member = archive.extractfile(layer_name)
                except KeyError:
                    member = None
                if member is None:
                    raise UnreadableArchiveError("layer %s missing from %s"
                                                 % (layer_name, path))
                layer_dir = workdir / ("layer-%d" % i)
                layer_dir.mkdir()
                try:
                    imagefs.extract_layer(member, layer_dir, owners=owners)
                except (tarfile.TarError, EOFError) as exc:
                    raise UnreadableArchiveError("layer %s: %s" % (layer_name, exc))
                layer_dirs.append(layer_dir)
        return config, layer_dirs, owners
