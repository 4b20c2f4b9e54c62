"""MPI support: ABI compatibility checking and library swap planning.

The swap relies on the ABI compatibility conventions shared by MPICH-
derived implementations: common frontend names (libmpi, libmpicxx,
libmpifort) and libtool version triples.  A host library with triple
current:revision:age provides the interface range
[current - age, current]; a container library is compatible when the
interface it exposes falls inside that range.  Revision never affects
the verdict.

Version triples are extracted from the embedded soname where possible,
falling back to the versioned file name.  Both follow libtool's Linux
naming scheme: ``lib<base>.so.<major>.<age>.<revision>`` with
``major = current - age``.
"""

import logging
import os
import posixpath
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import elf
from .errors import (
    AbiIncompatibleError,
    BaseNameMismatchError,
    NoContainerMpiError,
    UnparseableAbiError,
)
from .mounts import BIND_DIR, BIND_FILE, MountEntry

logger = logging.getLogger(__name__)

FRONTEND_BASES = ("libmpi", "libmpicxx", "libmpifort")

DEP_DIR = "/opt/hostmpi/lib"

# Loader directories searched inside the container, in precedence order.
DEFAULT_SCAN_ROOTS = (
    "/lib",
    "/lib64",
    "/lib/x86_64-linux-gnu",
    "/usr/lib",
    "/usr/lib64",
    "/usr/lib/x86_64-linux-gnu",
    "/usr/local/lib",
)

_TRIPLE_RE = re.compile(r"^(\d+):(\d+):(\d+)$")
_VERSIONED_NAME_RE = re.compile(r"^(lib[A-Za-z0-9_+-]+)\.so((?:\.\d+)+)$")


@dataclass(frozen=True)
class AbiVersion:
    """A libtool current:revision:age triple for one frontend library."""

    current: int
    revision: int
    age: int
    base: str = "libmpi"

    def __post_init__(self):
        if self.age > self.current:
            raise UnparseableAbiError(
                "age %d exceeds current %d" % (self.age, self.current))

    @property
    def provided_range(self) -> tuple[int, int]:
        return (self.current - self.age, self.current)

    @property
    def exposed_interface(self) -> int:
        """The interface number consumers link against (the soname major)."""
        return self.current - self.age

    def __str__(self) -> str:
        return "%d:%d:%d" % (self.current, self.revision, self.age)


def _decode_version_fields(fields: list[int], base: str) -> AbiVersion:
    # libtool Linux scheme: major[.age[.revision]] with major = current - age.
    major = fields[0]
    age = fields[1] if len(fields) > 1 else 0
    revision = fields[2] if len(fields) > 2 else 0
    return AbiVersion(current=major + age, revision=revision, age=age, base=base)


def parse_abi_version(text: str, base: str = "libmpi") -> AbiVersion:
    """Parse an explicit ``c:r:a`` triple or a versioned library file name."""
    m = _TRIPLE_RE.match(text)
    if m:
        return AbiVersion(current=int(m.group(1)), revision=int(m.group(2)),
                          age=int(m.group(3)), base=base)
    name = posixpath.basename(text)
    m = _VERSIONED_NAME_RE.match(name)
    if not m:
        raise UnparseableAbiError("no version information in %r" % text)
    fields = [int(f) for f in m.group(2).lstrip(".").split(".")]
    return _decode_version_fields(fields, m.group(1) if base == "libmpi" else base)


def extract_abi_version(path, base: str) -> AbiVersion:
    """Best-informed triple for a library file on disk.

    The embedded soname is authoritative for the exposed major; the file
    name refines it with age and revision when the majors agree.
    """
    path = str(path)
    soname = elf.read_soname(path)
    name_fields = None
    m = _VERSIONED_NAME_RE.match(posixpath.basename(path))
    if m:
        name_fields = [int(f) for f in m.group(2).lstrip(".").split(".")]
    if soname:
        sm = _VERSIONED_NAME_RE.match(soname)
        if sm:
            soname_fields = [int(f) for f in sm.group(2).lstrip(".").split(".")]
            if (name_fields and len(name_fields) >= len(soname_fields)
                    and name_fields[0] == soname_fields[0]):
                return _decode_version_fields(name_fields, base)
            return _decode_version_fields(soname_fields, base)
    if name_fields:
        return _decode_version_fields(name_fields, base)
    raise UnparseableAbiError("no soname or versioned name for %s" % path)


def check_abi_compatibility(container: AbiVersion, host: AbiVersion) -> bool:
    """True when the container's exposed interface lies in the host's
    provided range.  Revision is ignored by construction."""
    if container.base != host.base:
        raise BaseNameMismatchError(
            "%s vs %s" % (container.base, host.base))
    lo, hi = host.provided_range
    return lo <= container.exposed_interface <= hi


@dataclass
class HostMpiConfig:
    """Administrator-configured host MPI paths (never probed heuristically)."""

    frontends: dict[str, tuple[str, AbiVersion]]   # base -> (host path, triple)
    dependency_libs: list[str] = field(default_factory=list)
    config_paths: list[str] = field(default_factory=list)


@dataclass
class ContainerMpiScan:
    found: dict[str, tuple[str, AbiVersion]]       # base -> (container path, triple)
    scan_roots: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


@dataclass
class MpiInjectionPlan:
    overmounts: list[MountEntry]
    dependency_mounts: list[MountEntry]
    config_mounts: list[MountEntry]
    env_adjustments: dict[str, str]
    warnings: list[str] = field(default_factory=list)

    def all_entries(self) -> list[MountEntry]:
        return self.overmounts + self.dependency_mounts + self.config_mounts


def _candidate_files(directory: Path, base: str) -> list[str]:
    try:
        names = os.listdir(directory)
    except OSError:
        return []
    exact = base + ".so"
    hits = [n for n in names if n == exact or n.startswith(exact + ".")]
    # Prefer the most version-qualified concrete file over symlink aliases.
    hits.sort(key=lambda n: (-n.count("."), n))
    return hits


def scan_container_mpi(root, image_env: list[str] | None = None) -> ContainerMpiScan:
    """Locate MPI frontend libraries inside a prepared container root.

    Standard loader directories plus any directories named by the image's
    LD_LIBRARY_PATH are searched in order; the first hit per frontend
    wins, and later hits with a different version are recorded as
    warnings.
    """
    root = Path(root)
    roots = list(DEFAULT_SCAN_ROOTS)
    for entry in image_env or []:
        key, _, value = entry.partition("=")
        if key == "LD_LIBRARY_PATH" and value:
            for d in value.split(":"):
                if d and d not in roots:
                    roots.append(d)

    found: dict[str, tuple[str, AbiVersion]] = {}
    warnings: list[str] = []
    for base in FRONTEND_BASES:
        for scan_dir in roots:
            host_dir = root / scan_dir.lstrip("/")
            for name in _candidate_files(host_dir, base):
                full = host_dir / name
                if full.is_dir():
                    continue
                try:
                    version = extract_abi_version(full, base)
                except UnparseableAbiError:
                    continue
                container_path = posixpath.join(scan_dir, name)
                if base not in found:
                    found[base] = (container_path, version)
                elif found[base][1] != version:
                    warnings.append(
                        "%s also found at %s (%s); first on path (%s, %s) wins"
                        % (base, container_path, version, found[base][0], found[base][1]))
    for w in warnings:
        logger.warning("%s", w)
    return ContainerMpiScan(found=found, scan_roots=roots, warnings=warnings)


def plan_mpi_injection(scan: ContainerMpiScan, host: HostMpiConfig) -> MpiInjectionPlan:
    """Plan the swap of every scanned frontend for its host equivalent.

    All scanned frontends must be ABI-compatible or the launch aborts;
    the plan never contains a partial frontend set.  A container that
    lacks libmpi entirely aborts with NO_CONTAINER_MPI.
    """
    if "libmpi" not in scan.found:
        raise NoContainerMpiError(
            "MPI support requested but the image provides no libmpi")

    warnings = list(scan.warnings)
    overmounts = []
    for base in FRONTEND_BASES:
        if base not in scan.found:
            warnings.append("container lacks %s; frontend not swapped" % base)
            continue
        container_path, container_ver = scan.found[base]
        host_path, host_ver = host.frontends[base]
        if not check_abi_compatibility(container_ver, host_ver):
            lo, hi = host_ver.provided_range
            raise AbiIncompatibleError(base, container_ver.exposed_interface, lo, hi)
        overmounts.append(MountEntry(source=host_path, target=container_path,
                                     kind=BIND_FILE))

    dependency_mounts = [
        MountEntry(source=dep, target=posixpath.join(DEP_DIR, os.path.basename(dep)),
                   kind=BIND_FILE)
        for dep in host.dependency_libs
    ]
    config_mounts = [
        MountEntry(source=path, target=path,
                   kind=BIND_DIR if os.path.isdir(path) else BIND_FILE)
        for path in host.config_paths
    ]
    for w in warnings[len(scan.warnings):]:
        logger.warning("%s", w)
    return MpiInjectionPlan(
        overmounts=overmounts,
        dependency_mounts=dependency_mounts,
        config_mounts=config_mounts,
        env_adjustments={"LD_LIBRARY_PATH": DEP_DIR},
        warnings=warnings,
    )
