"""GPU support: trigger detection, visibility parsing and injection planning.

GPU support activates only when CUDA_VISIBLE_DEVICES holds a valid
comma-separated list of device indices or GPU- identifiers, every one of
which resolves against the host inventory.  Anything else (absent
variable, empty value, parse failure, unknown device) disables GPU
support without failing the launch.

An enabled plan grafts the selected device files at their host paths,
the seven driver libraries into /opt/hostgpu/lib, the management binary
into /opt/hostgpu/bin, and rewrites CUDA_VISIBLE_DEVICES inside the
container to the dense renumbered list 0..n-1.
"""

import json
import logging
import os
import posixpath
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingDeviceFileError, MissingDriverLibraryError
from .mounts import BIND_FILE, DEVICE, MountEntry

logger = logging.getLogger(__name__)

TRIGGER_VARIABLE = "CUDA_VISIBLE_DEVICES"

# Driver libraries grafted for CUDA operation, in graft order.
DRIVER_LIBRARIES = (
    "cuda",
    "nvidia-compiler",
    "nvidia-ptxjitcompiler",
    "nvidia-encode",
    "nvidia-ml",
    "nvidia-fatbinaryloader",
    "nvidia-opencl",
)

LIB_DIR = "/opt/hostgpu/lib"
BIN_DIR = "/opt/hostgpu/bin"
SMI_NAME = "nvidia-smi"

_INDEX_RE = re.compile(r"^\d+$")
_UUID_RE = re.compile(r"^GPU-[A-Za-z0-9-]+$")
_DEVICE_NODE_RE = re.compile(r"^nvidia(\d+)$")


@dataclass(frozen=True)
class DeviceSelector:
    kind: str                    # "INDEX" or "UUID"
    index: int | None = None
    uuid: str | None = None

    def __str__(self) -> str:
        return str(self.index) if self.kind == "INDEX" else str(self.uuid)


@dataclass
class GpuVisibilitySpec:
    raw: str
    entries: list[DeviceSelector]


@dataclass(frozen=True)
class GpuDevice:
    index: int
    uuid: str | None
    path: str


@dataclass
class HostGpuInventory:
    devices: list[GpuDevice] = field(default_factory=list)
    libraries: dict[str, str] = field(default_factory=dict)
    smi_path: str | None = None

    def device_by_index(self, index: int) -> GpuDevice | None:
        for dev in self.devices:
            if dev.index == index:
                return dev
        return None

    def device_by_uuid(self, uuid: str) -> GpuDevice | None:
        for dev in self.devices:
            if dev.uuid == uuid:
                return dev
        return None


@dataclass
class GpuInjectionPlan:
    device_mounts: list[MountEntry]
    library_mounts: list[MountEntry]
    binary_mounts: list[MountEntry]
    renumber_map: dict[int, int]        # host index -> container index, selection order
    env_adjustments: dict[str, str]

    def all_entries(self) -> list[MountEntry]:
        return self.device_mounts + self.library_mounts + self.binary_mounts


def parse_visibility(raw: str) -> GpuVisibilitySpec | None:
    """Parse a CUDA_VISIBLE_DEVICES value; None when it is not a valid list."""
    if raw is None or raw == "":
        return None
    selectors: list[DeviceSelector] = []
    seen: set[str] = set()
    for token in raw.split(","):
        if _INDEX_RE.match(token):
            sel = DeviceSelector(kind="INDEX", index=int(token))
        elif _UUID_RE.match(token):
            sel = DeviceSelector(kind="UUID", uuid=token)
        else:
            return None
        key = str(sel)
        if key in seen:
            return None
        seen.add(key)
        selectors.append(sel)
    return GpuVisibilitySpec(raw=raw, entries=selectors)


def _resolve(selector: DeviceSelector, inventory: HostGpuInventory) -> GpuDevice | None:
    if selector.kind == "INDEX":
        return inventory.device_by_index(selector.index)
    return inventory.device_by_uuid(selector.uuid)


def detect_trigger(host_env: dict, inventory: HostGpuInventory | None) -> GpuVisibilitySpec | None:
    """Decide whether GPU support activates for this launch.

    Returns the parsed visibility spec when the trigger variable is
    present, parses cleanly and every selector resolves in the inventory;
    None otherwise.  Never raises: an invalid value means the launch
    simply proceeds without GPU support.
    """
    raw = host_env.get(TRIGGER_VARIABLE)
    if raw is None:
        return None
    spec = parse_visibility(raw)
    if spec is None or inventory is None or not inventory.devices:
        return None
    resolved_indices = set()
    for sel in spec.entries:
        dev = _resolve(sel, inventory)
        if dev is None:
            logger.debug("selector %s not in host inventory; GPU support disabled", sel)
            return None
        if dev.index in resolved_indices:
            return None
        resolved_indices.add(dev.index)
    return spec


def plan_gpu_injection(spec: GpuVisibilitySpec, inventory: HostGpuInventory) -> GpuInjectionPlan:
    """Build the injection plan for an activated trigger.

    Every configured driver library must be present: a missing one is an
    error, never a silent skip.  Selected host devices are renumbered to
    a dense 0-based sequence in selection order and the in-container
    trigger variable is rewritten accordingly.
    """
    device_mounts = []
    renumber: dict[int, int] = {}
    for container_index, sel in enumerate(spec.entries):
        dev = _resolve(sel, inventory)
        if dev is None or not os.path.exists(dev.path):
            raise MissingDeviceFileError(
                sel.index if sel.kind == "INDEX" else dev.index if dev else -1)
        renumber[dev.index] = container_index
        device_mounts.append(
            MountEntry(source=dev.path, target=dev.path, kind=DEVICE, writable=True))

    library_mounts = []
    for name in DRIVER_LIBRARIES:
        host_path = inventory.libraries.get(name)
        if not host_path or not os.path.exists(host_path):
            raise MissingDriverLibraryError(name)
        target = posixpath.join(LIB_DIR, os.path.basename(host_path))
        library_mounts.append(MountEntry(source=host_path, target=target, kind=BIND_FILE))

    if not inventory.smi_path or not os.path.exists(inventory.smi_path):
        raise MissingDriverLibraryError(SMI_NAME)
    binary_mounts = [MountEntry(source=inventory.smi_path,
                                target=posixpath.join(BIN_DIR, SMI_NAME),
                                kind=BIND_FILE)]

    env = {
        TRIGGER_VARIABLE: ",".join(str(i) for i in range(len(spec.entries))),
        "LD_LIBRARY_PATH": LIB_DIR,
        "PATH": BIN_DIR,
    }
    return GpuInjectionPlan(
        device_mounts=device_mounts,
        library_mounts=library_mounts,
        binary_mounts=binary_mounts,
        renumber_map=renumber,
        env_adjustments=env,
    )


def load_mock_inventory(path) -> HostGpuInventory:
    """Read the mock inventory document (the test seam for GPU-free hosts)."""
    with open(path) as fh:
        doc = json.load(fh)
    devices = [GpuDevice(index=d["index"], uuid=d.get("uuid"), path=d["path"])
               for d in doc.get("devices", [])]
    return HostGpuInventory(
        devices=devices,
        libraries=dict(doc.get("libraries", {})),
        smi_path=doc.get("smi"),
    )


def probe_host_inventory(device_dir=None, library_dirs=(), smi_dirs=(),
                         mock_inventory=None) -> HostGpuInventory:
    """Scan configured host paths for GPU devices, driver libraries and the
    management binary.  A configured mock inventory bypasses scanning."""
    if mock_inventory:
        return load_mock_inventory(mock_inventory)

    devices = []
    if device_dir and os.path.isdir(device_dir):
        for name in sorted(os.listdir(device_dir)):
            m = _DEVICE_NODE_RE.match(name)
            if m:
                devices.append(GpuDevice(index=int(m.group(1)), uuid=None,
                                         path=os.path.join(device_dir, name)))
        devices.sort(key=lambda d: d.index)

    libraries: dict[str, str] = {}
    for name in DRIVER_LIBRARIES:
        prefix = "lib%s.so" % name
        for d in library_dirs:
            if not os.path.isdir(d):
                continue
            candidates = sorted(f for f in os.listdir(d)
                                if f == prefix or f.startswith(prefix + "."))
            if candidates:
                libraries[name] = os.path.join(d, candidates[0])
                break

    smi_path = None
    for d in smi_dirs:
        candidate = os.path.join(d, SMI_NAME)
        if os.path.isfile(candidate) and os.access(candidate, os.X_OK):
            smi_path = candidate
            break

    return HostGpuInventory(devices=devices, libraries=libraries, smi_path=smi_path)
