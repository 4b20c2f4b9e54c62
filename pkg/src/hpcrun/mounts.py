"""Mount plan types shared by the runtime and the injectors."""

import posixpath
from dataclasses import dataclass, field

from .errors import TargetConflictError, TargetEscapeError

IMAGE_ROOT = "IMAGE_ROOT"
BIND_FILE = "BIND_FILE"
BIND_DIR = "BIND_DIR"
DEVICE = "DEVICE"

KINDS = (IMAGE_ROOT, BIND_FILE, BIND_DIR, DEVICE)


@dataclass(frozen=True)
class MountEntry:
    source: str
    target: str          # absolute path inside the container root
    kind: str
    writable: bool = False

    def __str__(self) -> str:
        return "%s %s -> %s%s" % (self.kind, self.source, self.target,
                                  " (rw)" if self.writable else "")


def normalize_target(target: str) -> str:
    """Normalize an in-container target path; reject escapes."""
    if not target.startswith("/"):
        raise TargetEscapeError("target %r is not absolute" % target)
    norm = posixpath.normpath(target)
    if norm == ".." or norm.startswith("/.."):
        raise TargetEscapeError("target %r escapes the container root" % target)
    return norm


@dataclass
class MountPlan:
    """Ordered, validated list of filesystem grafts.

    Order is total and stable: image root first, then site grafts, then
    injector grafts (GPU before MPI), then user volumes.
    """

    entries: list[MountEntry] = field(default_factory=list)

    def validate(self) -> "MountPlan":
        if not self.entries or self.entries[0].kind != IMAGE_ROOT:
            raise TargetConflictError("plan must start with the image root")
        seen: dict[str, MountEntry] = {}
        for i, entry in enumerate(self.entries):
            if entry.kind == IMAGE_ROOT and i != 0:
                raise TargetConflictError("image root may appear only first")
            if entry.kind not in KINDS:
                raise TargetConflictError("unknown mount kind %r" % entry.kind)
            norm = normalize_target(entry.target)
            if norm in seen:
                raise TargetConflictError(
                    "grafts collide on %s: %s vs %s" % (norm, seen[norm], entry))
            seen[norm] = entry
        return self

    def graft_entries(self) -> list[MountEntry]:
        """Everything after the image root."""
        return self.entries[1:]
