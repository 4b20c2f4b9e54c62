"""Administrator-facing configuration: parsing, validation, rendering.

The format is sectioned key-value text: ``[section]`` headers,
``key = value`` lines, comma-separated lists, ``#`` comments.  Parsing
is strict: unknown sections or keys are rejected so admin typos surface
immediately.  The full key table lives in the README.

The config path defaults to /etc/hpcrun/config and is overridden by the
HPCRUN_CONFIG environment variable or an explicit --config flag.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ConfigParseError,
    ConfigValidationError,
    MissingRequiredError,
    UnparseableAbiError,
)
from .mpi import FRONTEND_BASES, HostMpiConfig, extract_abi_version
from .reference import DEFAULT_REGISTRY

DEFAULT_CONFIG_PATH = "/etc/hpcrun/config"
CONFIG_ENV_VAR = "HPCRUN_CONFIG"

_SCHEMA = {
    "gateway": {"image_store", "default_registry", "registry_base_url"},
    "runtime": {"site_mounts", "env_passthrough", "env_force", "trace_file"},
    "gpu": {"device_dir", "library_dirs", "smi_dirs", "mock_inventory"},
    "mpi": {"libmpi", "libmpicxx", "libmpifort", "dependency_libs", "config_paths"},
}


@dataclass(frozen=True)
class SiteMount:
    source: str
    target: str
    writable: bool = False

    def render(self) -> str:
        return "%s:%s:%s" % (self.source, self.target, "rw" if self.writable else "ro")


@dataclass
class GpuProbeConfig:
    device_dir: str = "/dev"
    library_dirs: list[str] = field(default_factory=list)
    smi_dirs: list[str] = field(default_factory=list)
    mock_inventory: str | None = None


@dataclass
class SiteConfig:
    image_store: str
    default_registry: str = DEFAULT_REGISTRY
    registry_base_url: str | None = None
    site_mounts: list[SiteMount] = field(default_factory=list)
    env_passthrough: list[str] = field(default_factory=list)
    env_force: dict[str, str] = field(default_factory=dict)
    trace_file: str | None = None
    gpu: GpuProbeConfig = field(default_factory=GpuProbeConfig)
    mpi: HostMpiConfig | None = None


def _parse_document(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigValidationError(name, "unknown section")
            if name in sections:
                raise ConfigParseError(line_no, "duplicate section [%s]" % name)
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigParseError(line_no, "expected 'key = value', got %r" % raw)
        if current is None:
            raise ConfigParseError(line_no, "key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[current]:
            raise ConfigValidationError("%s.%s" % (current, key), "unknown key")
        if key in sections[current]:
            raise ConfigParseError(line_no, "duplicate key %r" % key)
        sections[current][key] = value
    return sections


def _split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _parse_site_mounts(value: str) -> list[SiteMount]:
    mounts = []
    for item in _split_list(value):
        parts = item.split(":")
        if len(parts) == 2:
            src, dst = parts
            writable = False
        elif len(parts) == 3 and parts[2] in ("ro", "rw"):
            src, dst = parts[0], parts[1]
            writable = parts[2] == "rw"
        else:
            raise ConfigValidationError(
                "runtime.site_mounts", "bad mount %r (want src:dst[:ro|rw])" % item)
        if not dst.startswith("/"):
            raise ConfigValidationError(
                "runtime.site_mounts", "container path %r is not absolute" % dst)
        mounts.append(SiteMount(source=src, target=dst, writable=writable))
    targets = [m.target for m in mounts]
    for t in targets:
        if targets.count(t) > 1:
            raise ConfigValidationError(
                "runtime.site_mounts", "duplicate target %s" % t)
    return mounts


def _parse_env_force(value: str) -> dict[str, str]:
    forced = {}
    for item in _split_list(value):
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigValidationError(
                "runtime.env_force", "bad entry %r (want KEY=VALUE)" % item)
        forced[key] = val
    return forced


def _parse_mpi_section(section: dict[str, str]) -> HostMpiConfig:
    frontends = {}
    for base in FRONTEND_BASES:
        path = section.get(base)
        if not path:
            raise ConfigValidationError("mpi.%s" % base, "frontend path required")
        if not os.path.isfile(path):
            raise ConfigValidationError("mpi.%s" % base, "no such file: %s" % path)
        try:
            version = extract_abi_version(path, base)
        except UnparseableAbiError as exc:
            raise ConfigValidationError("mpi.%s" % base, str(exc))
        frontends[base] = (path, version)
    deps = _split_list(section.get("dependency_libs", ""))
    for dep in deps:
        if not os.path.isfile(dep):
            raise ConfigValidationError("mpi.dependency_libs", "no such file: %s" % dep)
    config_paths = _split_list(section.get("config_paths", ""))
    for p in config_paths:
        if not os.path.exists(p):
            raise ConfigValidationError("mpi.config_paths", "no such path: %s" % p)
    return HostMpiConfig(frontends=frontends, dependency_libs=deps,
                         config_paths=config_paths)


def parse_config(text: str) -> SiteConfig:
    sections = _parse_document(text)

    gateway = sections.get("gateway", {})
    image_store = gateway.get("image_store")
    if not image_store:
        raise MissingRequiredError("gateway.image_store")
    if not image_store.startswith("/"):
        raise ConfigValidationError("gateway.image_store", "must be absolute")

    runtime = sections.get("runtime", {})
    gpu_section = sections.get("gpu", {})
    gpu = GpuProbeConfig(
        device_dir=gpu_section.get("device_dir", "/dev"),
        library_dirs=_split_list(gpu_section.get("library_dirs", "")),
        smi_dirs=_split_list(gpu_section.get("smi_dirs", "")),
        mock_inventory=gpu_section.get("mock_inventory") or None,
    )
    mpi = _parse_mpi_section(sections["mpi"]) if "mpi" in sections else None

    return SiteConfig(
        image_store=image_store,
        default_registry=gateway.get("default_registry", DEFAULT_REGISTRY),
        registry_base_url=gateway.get("registry_base_url") or None,
        site_mounts=_parse_site_mounts(runtime.get("site_mounts", "")),
        env_passthrough=_split_list(runtime.get("env_passthrough", "")),
        env_force=_parse_env_force(runtime.get("env_force", "")),
        trace_file=runtime.get("trace_file") or None,
        gpu=gpu,
        mpi=mpi,
    )


def load_config(path=None) -> SiteConfig:
    """Load and validate the site config document."""
    path = path or os.environ.get(CONFIG_ENV_VAR) or DEFAULT_CONFIG_PATH
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError("config", "cannot read %s: %s" % (path, exc))
    return parse_config(text)


def render_config(cfg: SiteConfig) -> str:
    """Serialize a SiteConfig; parsing the result yields an equal config."""
    lines = ["[gateway]", "image_store = %s" % cfg.image_store]
    if cfg.default_registry != DEFAULT_REGISTRY:
        lines.append("default_registry = %s" % cfg.default_registry)
    if cfg.registry_base_url:
        lines.append("registry_base_url = %s" % cfg.registry_base_url)

    lines.append("")
    lines.append("[runtime]")
    if cfg.site_mounts:
        lines.append("site_mounts = " + ", ".join(m.render() for m in cfg.site_mounts))
    if cfg.env_passthrough:
        lines.append("env_passthrough = " + ", ".join(cfg.env_passthrough))
    if cfg.env_force:
        lines.append("env_force = " + ", ".join(
            "%s=%s" % kv for kv in cfg.env_force.items()))
    if cfg.trace_file:
        lines.append("trace_file = %s" % cfg.trace_file)

    lines.append("")
    lines.append("[gpu]")
    lines.append("device_dir = %s" % cfg.gpu.device_dir)
    if cfg.gpu.library_dirs:
        lines.append("library_dirs = " + ", ".join(cfg.gpu.library_dirs))
    if cfg.gpu.smi_dirs:
        lines.append("smi_dirs = " + ", ".join(cfg.gpu.smi_dirs))
    if cfg.gpu.mock_inventory:
        lines.append("mock_inventory = %s" % cfg.gpu.mock_inventory)

    if cfg.mpi:
        lines.append("")
        lines.append("[mpi]")
        for base in FRONTEND_BASES:
            lines.append("%s = %s" % (base, cfg.mpi.frontends[base][0]))
        if cfg.mpi.dependency_libs:
            lines.append("dependency_libs = " + ", ".join(cfg.mpi.dependency_libs))
        if cfg.mpi.config_paths:
            lines.append("config_paths = " + ", ".join(cfg.mpi.config_paths))
    return "\n".join(lines) + "\n"
