"""Exception hierarchy. ``exit_code`` is what the command line reports."""


class UnsuidError(Exception):
    exit_code = 1


# image format


class ImageFormatError(UnsuidError):
    pass


class UnknownFormat(ImageFormatError):
    pass


class Truncated(ImageFormatError):
    pass


class BadMagic(ImageFormatError):
    pass


class BadVersion(ImageFormatError):
    pass


class DescriptorOutOfBounds(ImageFormatError):
    pass


class OverlappingPartitions(ImageFormatError):
    pass


class DuplicateRootfs(ImageFormatError):
    pass


class MisalignedPartition(ImageFormatError):
    pass


class EmptyPartitionList(ImageFormatError):
    pass


# planning


class PlanError(UnsuidError):
    pass


class NoRootEmulationAvailable(PlanError):
    def __init__(self, failed_conditions):
        self.failed_conditions = list(failed_conditions)
        super().__init__(
            "no root emulation method is available: "
            + "; ".join(self.failed_conditions)
        )


class WritableButNoOverlayBackend(PlanError):
    pass


class BindDestinationConflict(PlanError):
    pass


class InvalidRequest(PlanError):
    pass


# mounting and namespaces


class MountError(UnsuidError):
    exit_code = 2


class HelperMissing(MountError):
    pass


class HelperFailed(MountError):
    def __init__(self, helper, returncode, stderr=""):
        self.helper = helper
        self.returncode = returncode
        self.stderr = stderr
        msg = f"{helper} failed (exit status {returncode})"
        if stderr:
            msg += f": {stderr.strip()}"
        super().__init__(msg)


class MountTimeout(MountError):
    pass


class MountFailed(MountError):
    pass


class OverlayRejectedByKernel(MountError):
    pass


class WindowFailed(MountError):
    pass


class FuseUnavailable(WindowFailed):
    pass


class SpecOutOfBounds(WindowFailed, ValueError):
    pass


class DestinationInsideFile(MountError):
    pass


class TeardownIncomplete(MountError):
    def __init__(self, residual):
        self.residual = list(residual)
        super().__init__("mounts still present after teardown: " + ", ".join(self.residual))


class NamespaceError(UnsuidError):
    exit_code = 2


class UsernsDenied(NamespaceError):
    pass


class IdMapWriteFailed(NamespaceError):
    pass


class HelperIdMapFailed(NamespaceError):
    pass


class PrctlFailed(NamespaceError):
    pass


class PivotFailed(NamespaceError):
    pass


class ModeRequiresSetuidHost(NamespaceError):
    pass


class MalformedIdMap(UnsuidError):
    pass


class ExecFailed(UnsuidError):
    exit_code = 127


# building


class BuildError(UnsuidError):
    pass


class SetupScriptFailed(BuildError):
    def __init__(self, status, stderr=""):
        self.status = status
        self.stderr = stderr
        super().__init__(f"setup script failed with exit status {status}")


class PackagingFailed(BuildError):
    pass


class FormatFailed(BuildError):
    pass
