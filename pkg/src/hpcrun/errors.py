"""Error hierarchy shared by the gateway, runtime and injectors.

Every error carries a stable ``code`` token (used in diagnostics and test
assertions) and an ``exit_status`` used by the ``run`` launcher.  Statuses
below 200 are reserved for the containerized application itself; see the
exit-code table in the README.
"""


class HpcRunError(Exception):
    """Base class for all operational errors."""

    code = "INTERNAL"
    exit_status = 200

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)

    def __str__(self) -> str:
        msg = super().__str__()
        if msg == self.code:
            return self.code
        return "%s: %s" % (self.code, msg)


# -- configuration ----------------------------------------------------------

class ConfigError(HpcRunError):
    exit_status = 201


class ConfigParseError(ConfigError):
    code = "PARSE_ERROR"

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__("line %d: %s" % (line_no, message))


class ConfigValidationError(ConfigError):
    code = "VALIDATION_ERROR"

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__("%s: %s" % (field, reason))


class MissingRequiredError(ConfigError):
    code = "MISSING_REQUIRED"

    def __init__(self, field: str):
        self.field = field
        super().__init__(field)


# -- image gateway ----------------------------------------------------------

class GatewayError(HpcRunError):
    exit_status = 202


class MalformedReferenceError(GatewayError):
    code = "MALFORMED_REFERENCE"


class RegistryUnreachableError(GatewayError):
    code = "REGISTRY_UNREACHABLE"


class ManifestNotFoundError(GatewayError):
    code = "MANIFEST_NOT_FOUND"


class DigestMismatchError(GatewayError):
    code = "DIGEST_MISMATCH"


class StorageFullError(GatewayError):
    code = "STORAGE_FULL"


class UnreadableArchiveError(GatewayError):
    code = "UNREADABLE_ARCHIVE"


class MissingManifestError(GatewayError):
    code = "MISSING_MANIFEST"


class CatalogCorruptError(GatewayError):
    code = "CATALOG_CORRUPT"


class ImageNotFoundError(GatewayError):
    code = "IMAGE_NOT_FOUND"


class ImageNotReadyError(GatewayError):
    code = "IMAGE_NOT_READY"
    exit_status = 203


# -- image filesystem -------------------------------------------------------

class PathEscapeError(HpcRunError):
    code = "PATH_ESCAPE"
    exit_status = 204


class PackerUnavailableError(HpcRunError):
    code = "PACKER_UNAVAILABLE"
    exit_status = 204


class CorruptPackError(HpcRunError):
    code = "CORRUPT_PACK"
    exit_status = 204


class MountDeniedError(HpcRunError):
    code = "MOUNT_DENIED"
    exit_status = 208


# -- runtime ----------------------------------------------------------------

class TargetConflictError(HpcRunError):
    code = "TARGET_CONFLICT"
    exit_status = 204


class TargetEscapeError(HpcRunError):
    code = "TARGET_ESCAPE"
    exit_status = 204


class MountFailedError(HpcRunError):
    code = "MOUNT_FAILED"
    exit_status = 208

    def __init__(self, entry, reason: str, completed: int = 0):
        self.entry = entry
        self.completed = completed
        super().__init__("%s (completed %d entries): %s" % (entry, completed, reason))


class IsolationFailedError(HpcRunError):
    code = "ISOLATION_FAILED"
    exit_status = 209


class DropFailedError(HpcRunError):
    code = "DROP_FAILED"
    exit_status = 210


class ExecNotFoundError(HpcRunError):
    code = "EXEC_NOT_FOUND"
    exit_status = 127


class CleanupIncompleteError(HpcRunError):
    code = "CLEANUP_INCOMPLETE"


class StageOrderError(HpcRunError):
    code = "STAGE_ORDER"


class FaultInjectedError(HpcRunError):
    """Raised by test fault hooks at stage boundaries."""

    code = "FAULT_INJECTED"
    exit_status = 211

    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(stage)


# -- GPU injector -----------------------------------------------------------

class GpuInjectionError(HpcRunError):
    exit_status = 205


class MissingDriverLibraryError(GpuInjectionError):
    code = "MISSING_DRIVER_LIBRARY"

    def __init__(self, name: str):
        self.name = name
        super().__init__(name)


class MissingDeviceFileError(GpuInjectionError):
    code = "MISSING_DEVICE_FILE"

    def __init__(self, index: int):
        self.index = index
        super().__init__(str(index))


# -- MPI injector -----------------------------------------------------------

class UnparseableAbiError(HpcRunError):
    code = "UNPARSEABLE_ABI"
    exit_status = 206


class BaseNameMismatchError(HpcRunError):
    code = "BASE_NAME_MISMATCH"
    exit_status = 206


class AbiIncompatibleError(HpcRunError):
    code = "ABI_INCOMPATIBLE"
    exit_status = 206

    def __init__(self, base: str, interface: int, lo: int, hi: int):
        self.base = base
        self.interface = interface
        self.range = (lo, hi)
        # One-line diagnostic, stable for admin triage and test assertions.
        self.diagnostic = (
            "mpi-abi: container %s interface %d not provided by host range [%d,%d]"
            % (base, interface, lo, hi))
        super().__init__(self.diagnostic)

    def __str__(self) -> str:
        return self.diagnostic


class NoContainerMpiError(HpcRunError):
    code = "NO_CONTAINER_MPI"
    exit_status = 207
