"""Pure planning: choose how to emulate root and how to assemble the container root.

Nothing in here touches the filesystem or spawns processes. Paths inside
a plan that start with ``@session`` are relative to the per-run scratch
directory the mounter creates, which keeps serialized plans byte-identical
between runs.
"""

import enum
import json
import posixpath
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar, NamedTuple, Sequence

from .errors import (
    BindDestinationConflict,
    InvalidRequest,
    NoRootEmulationAvailable,
    WritableButNoOverlayBackend,
)
from .hostprobe import HostProfile
from .imagefmt import ImageInfo, ImageKind, PartKind, PartRole

SESSION = "@session"
ROOT = SESSION + "/root"
TMP_UPPER = SESSION + "/tmp-upper"
FAKEROOT_DIR = "/.unsuid/fakeroot"
FAKEROOT_WRAP = FAKEROOT_DIR + "/fakeroot"
STANDARD_MOUNTS = ("proc", "sys", "dev", "tmp", "home")

ROOT_MAPPED_INFO = (
    "Using a root-mapped user namespace: only uid 0 is mapped, onto the invoking user. "
    "Package installs needing other ids may fail."
)
FAKEROOT_INFO = (
    "Using the fakeroot command combined with a root-mapped user namespace."
)
FAKEROOT_ONLY_INFO = "Using the fakeroot command by itself, without a user namespace."
NESTED_SUBID_WARNING = (
    "subuid/subgid mapping selected while already inside a root-mapped namespace; "
    "newuidmap/newgidmap may be refused here"
)


class IdentityMode(str, enum.Enum):
    SUBID_MAPPED = "SubIdMapped"
    ROOT_MAPPED_NS = "RootMappedNs"
    ROOT_MAPPED_NS_PLUS_FAKEROOT = "RootMappedNsPlusFakerootCmd"
    FAKEROOT_CMD_ONLY = "FakerootCmdOnly"
    PLAIN_USER = "PlainUser"


# Most complete emulation first; used to check that losing a capability
# never moves the choice up this list.
MODE_PRIORITY = (
    IdentityMode.SUBID_MAPPED,
    IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT,
    IdentityMode.ROOT_MAPPED_NS,
    IdentityMode.FAKEROOT_CMD_ONLY,
)


class StrategyKind(str, enum.Enum):
    READ_ONLY_UNDERLAY = "ReadOnlyUnderlay"
    KERNEL_OVERLAY = "KernelOverlay"
    FUSE_OVERLAY = "FuseOverlay"
    # sandbox directory bound writable as the root; used by builds
    WRITABLE_SANDBOX = "WritableSandbox"


class BindSpec(NamedTuple):
    source: str
    destination: str
    readonly: bool = False

    @classmethod
    def parse(cls, text: str) -> "BindSpec":
        """Parse ``SRC[:DST[:ro|rw]]``; DST defaults to SRC."""
        parts = text.split(":")
        if not 1 <= len(parts) <= 3 or not parts[0]:
            raise InvalidRequest(f"bad bind spec {text!r}")
        src = parts[0]
        dst = parts[1] if len(parts) > 1 and parts[1] else src
        ro = False
        if len(parts) == 3:
            if parts[2] not in ("ro", "rw"):
                raise InvalidRequest(f"bad bind option {parts[2]!r} in {text!r}")
            ro = parts[2] == "ro"
        return cls(src, dst, ro)


@dataclass(frozen=True)
class RuntimeRequest:
    image: str
    command: tuple[str, ...] = ()
    writable: bool = False
    writable_tmpfs: bool = False
    overlay_paths: tuple[str, ...] = ()
    binds: tuple[BindSpec, ...] = ()
    fakeroot_requested: bool = False
    build_mode: bool = False
    env_passthrough: tuple[str, ...] = ()
    force_underlay: bool = False
    home: str | None = None
    cwd: str | None = None


@dataclass(frozen=True)
class IdentityPlan:
    mode: IdentityMode
    uid_map: tuple[tuple[int, int, int], ...] = ()
    gid_map: tuple[tuple[int, int, int], ...] = ()
    fakeroot_cmd: str | None = None
    requires_setuid_host: bool = False
    info_messages: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["uid_map"] = [list(e) for e in self.uid_map]
        d["gid_map"] = [list(e) for e in self.gid_map]
        d["info_messages"] = list(self.info_messages)
        d["warnings"] = list(self.warnings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityPlan":
        return cls(
            mode=IdentityMode(d["mode"]),
            uid_map=tuple(tuple(e) for e in d["uid_map"]),
            gid_map=tuple(tuple(e) for e in d["gid_map"]),
            fakeroot_cmd=d["fakeroot_cmd"],
            requires_setuid_host=d["requires_setuid_host"],
            info_messages=tuple(d["info_messages"]),
            warnings=tuple(d.get("warnings", ())),
        )


@dataclass(frozen=True)
class RootStrategy:
    kind: StrategyKind
    lower: tuple[str, ...] = ()  # uppermost first, as overlayfs lists them
    upper: str | None = None
    work: str | None = None


# mount steps


_STEP_TYPES: dict[str, type] = {}


def _step(cls):
    cls.step = cls.__name__
    _STEP_TYPES[cls.__name__] = cls
    return dataclass(frozen=True)(cls)


@_step
class MakeScratchRoot:
    step: ClassVar[str]
    target: str
    root: str


@_step
class MountSquashPartition:
    step: ClassVar[str]
    image: str
    offset: int
    size: int
    target: str


@_step
class ServeWindowFile:
    step: ClassVar[str]
    backing: str
    offset: int
    size: int
    writable: bool
    mountpoint: str


@_step
class MountExtPartition:
    step: ClassVar[str]
    source: str
    target: str
    writable: bool


@_step
class MountKernelOverlay:
    step: ClassVar[str]
    lower: tuple[str, ...]
    upper: str | None
    work: str | None
    target: str


@_step
class MountFuseOverlay:
    step: ClassVar[str]
    lower: tuple[str, ...]
    upper: str | None
    work: str | None
    target: str


@_step
class BindEntry:
    """Bind ``source`` onto ``target``.

    ``role`` is one of ``image`` (sandbox directory as the image mount),
    ``rootfs`` (writable sandbox as the whole root), ``underlay`` (compose
    the unshadowed image entries into the scratch root), ``bind`` (user
    request) or ``fakeroot`` (support files for the fakeroot command).
    """

    step: ClassVar[str]
    source: str
    target: str
    readonly: bool
    role: str = "bind"


@_step
class MountStandard:
    step: ClassVar[str]
    kind: str
    source: str
    target: str


@_step
class PivotIntoRoot:
    step: ClassVar[str]
    root: str


def step_to_dict(step) -> dict:
    d = {"step": step.step}
    for f in fields(step):
        v = getattr(step, f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def step_from_dict(d: dict):
    d = dict(d)
    cls = _STEP_TYPES[d.pop("step")]
    for f in fields(cls):
        if isinstance(d.get(f.name), list):
            d[f.name] = tuple(d[f.name])
    return cls(**d)


@dataclass(frozen=True)
class MountPlan:
    steps: tuple = field(default_factory=tuple)
    strategy: RootStrategy | None = None

    def to_list(self) -> list[dict]:
        return [step_to_dict(s) for s in self.steps]


def container_path(target: str) -> str | None:
    """Map ``@session/root/x`` back to ``/x``; None for paths outside the root."""
    if target == ROOT:
        return "/"
    if target.startswith(ROOT + "/"):
        return target[len(ROOT):]
    return None


# identity selection


def _subid_maps(invoking: int, ranges) -> tuple[tuple[int, int, int], ...]:
    entries = [(0, invoking, 1)]
    inside = 1
    for start, count in ranges:
        entries.append((inside, start, count))
        inside += count
    return tuple(entries)


def select_identity(profile: HostProfile, request: RuntimeRequest) -> IdentityPlan:
    """Pick the root emulation mode, trying the most complete method first."""
    uid, gid = profile.invoking_uid, profile.invoking_gid
    fakeroot = request.fakeroot_requested or request.build_mode
    if not fakeroot:
        return IdentityPlan(IdentityMode.PLAIN_USER, ((uid, uid, 1),), ((gid, gid, 1),))

    failed = []
    have_newid = bool(profile.helper("newuidmap") and profile.helper("newgidmap"))
    if profile.subid_mapped and (have_newid or profile.setuid_installed):
        warnings = (NESTED_SUBID_WARNING,) if profile.already_root_mapped else ()
        return IdentityPlan(
            IdentityMode.SUBID_MAPPED,
            _subid_maps(uid, profile.subuid_ranges),
            _subid_maps(gid, profile.subgid_ranges),
            requires_setuid_host=not have_newid,
            warnings=warnings,
        )
    if not profile.subid_mapped:
        failed.append("user has no /etc/subuid and /etc/subgid ranges")
    else:
        failed.append("newuidmap/newgidmap not found and not a setuid installation")

    fakeroot_cmd = profile.helper("fakeroot")
    if profile.userns_available:
        root_maps = dict(uid_map=((0, uid, 1),), gid_map=((0, gid, 1),))
        if fakeroot_cmd and not profile.already_root_mapped:
            return IdentityPlan(
                IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT,
                fakeroot_cmd=fakeroot_cmd,
                info_messages=(FAKEROOT_INFO,),
                **root_maps,
            )
        return IdentityPlan(IdentityMode.ROOT_MAPPED_NS, info_messages=(ROOT_MAPPED_INFO,), **root_maps)
    failed.append("unprivileged user namespaces are unavailable")

    # inside an outer root-mapped namespace the fakeroot command is never run
    if profile.setuid_installed and fakeroot_cmd and not profile.already_root_mapped:
        return IdentityPlan(
            IdentityMode.FAKEROOT_CMD_ONLY,
            fakeroot_cmd=fakeroot_cmd,
            requires_setuid_host=True,
            info_messages=(FAKEROOT_ONLY_INFO,),
        )
    if not profile.setuid_installed:
        failed.append("not a setuid-root installation")
    if not fakeroot_cmd:
        failed.append("fakeroot command not found")
    elif profile.already_root_mapped:
        failed.append("already in a root-mapped namespace, so the fakeroot command is not used")
    raise NoRootEmulationAvailable(failed)


# root strategy


def _norm_dest(dest: str) -> str:
    if not dest.startswith("/"):
        raise InvalidRequest(f"bind destination {dest!r} is not absolute")
    dest = posixpath.normpath(dest)
    if dest.startswith("//"):
        dest = "/" + dest.lstrip("/")
    if dest == "/":
        raise InvalidRequest("cannot bind onto the container root")
    return dest


def validate_request(request: RuntimeRequest, image: ImageInfo, overlays: Sequence[ImageInfo] = ()) -> None:
    seen = set()
    for b in request.binds:
        dest = _norm_dest(b.destination)
        if dest in seen:
            raise BindDestinationConflict(f"two binds target {dest}")
        if dest == FAKEROOT_DIR or dest.startswith(FAKEROOT_DIR + "/"):
            raise BindDestinationConflict(f"{dest} is reserved for the fakeroot command")
        seen.add(dest)
    if image.kind != ImageKind.SANDBOX and image.rootfs is None:
        raise InvalidRequest(f"{image.path} has no rootfs partition")
    if overlays and len(overlays) != len(request.overlay_paths):
        raise InvalidRequest("overlay image information does not match overlay paths")
    for ov in overlays:
        if ov.kind not in (ImageKind.SANDBOX, ImageKind.RAW_EXTFS):
            raise InvalidRequest(f"{ov.path}: overlays must be ext images or directories")
    if request.force_underlay and (request.writable or request.writable_tmpfs or request.overlay_paths):
        raise InvalidRequest("--underlay cannot be combined with writable or overlay options")
    if request.writable and not (
        request.overlay_paths or request.writable_tmpfs or image.overlays or image.kind == ImageKind.SANDBOX
    ):
        raise InvalidRequest("--writable needs an overlay: an overlay image or directory, "
                             "an overlay partition, or a writable tmpfs")


def _rootfs_dir(image: ImageInfo) -> str:
    if image.kind == ImageKind.SANDBOX:
        return image.path
    index = image.partitions.index(image.rootfs)
    return f"{SESSION}/image/{index}"


def _overlay_layers(request: RuntimeRequest, image: ImageInfo, overlays: Sequence[ImageInfo]) -> list[str]:
    """Directories whose ``upper``/``work`` children hold each overlay layer, lowest first."""
    layers = [f"{SESSION}/image/{i}" for i, p in enumerate(image.partitions) if p.role == PartRole.OVERLAY]
    infos = list(overlays) or [None] * len(request.overlay_paths)
    for j, (path, info) in enumerate(zip(request.overlay_paths, infos)):
        if info is not None and info.kind == ImageKind.RAW_EXTFS:
            layers.append(f"{SESSION}/overlay/{j}")
        else:
            layers.append(path)
    return layers


def select_root_strategy(
    profile: HostProfile, request: RuntimeRequest, image: ImageInfo, overlays: Sequence[ImageInfo] = ()
) -> RootStrategy:
    """Read-only runs use the underlay; anything writable or layered needs an overlay.

    ``overlays`` carries the detected kind of each overlay path; paths are
    taken to be directories when it is omitted. The last overlay listed is
    the writable upper layer.
    """
    wants_overlay = request.writable or request.writable_tmpfs or bool(request.overlay_paths)
    if not wants_overlay:
        return RootStrategy(StrategyKind.READ_ONLY_UNDERLAY)

    layers = _overlay_layers(request, image, overlays)
    if request.writable and not layers and not request.writable_tmpfs:
        if image.kind == ImageKind.SANDBOX:
            return RootStrategy(StrategyKind.WRITABLE_SANDBOX)
        raise InvalidRequest("--writable needs an overlay")

    if profile.unpriv_overlayfs:
        kind = StrategyKind.KERNEL_OVERLAY
    elif profile.helper("fuse-overlayfs"):
        kind = StrategyKind.FUSE_OVERLAY
    else:
        raise WritableButNoOverlayBackend(
            "kernel overlayfs is not usable unprivileged and fuse-overlayfs was not found"
        )

    if request.writable and layers and not request.writable_tmpfs:
        top = layers.pop()
        upper, work = f"{top}/upper", f"{top}/work"
    else:
        upper, work = f"{TMP_UPPER}/upper", f"{TMP_UPPER}/work"
    lower = tuple(f"{layer}/upper" for layer in reversed(layers)) + (_rootfs_dir(image),)
    return RootStrategy(kind, lower, upper, work)


# plan assembly


def _partition_steps(image: ImageInfo, index: int, target: str, writable: bool) -> list:
    part = image.partitions[index]
    if part.kind == PartKind.SQUASHFS:
        return [MountSquashPartition(image.path, part.offset, part.size, target)]
    window = f"{SESSION}/window/{target.rsplit('/', 2)[-2]}-{target.rsplit('/', 1)[-1]}"
    return [
        ServeWindowFile(image.path, part.offset, part.size, writable, window),
        MountExtPartition(window + "/part", target, writable),
    ]


def _ext_overlay_steps(path: str, size: int, target: str, writable: bool) -> list:
    window = f"{SESSION}/window/overlay-{target.rsplit('/', 1)[-1]}"
    return [
        ServeWindowFile(path, 0, size, writable, window),
        MountExtPartition(window + "/part", target, writable),
    ]


def _dest_key(dest: str) -> tuple[str, ...]:
    return tuple(dest.strip("/").split("/"))


def plan(
    profile: HostProfile, request: RuntimeRequest, image: ImageInfo, overlays: Sequence[ImageInfo] = ()
) -> tuple[IdentityPlan, MountPlan]:
    validate_request(request, image, overlays)
    identity = select_identity(profile, request)
    strategy = select_root_strategy(profile, request, image, overlays)
    overlaying = strategy.kind in (StrategyKind.KERNEL_OVERLAY, StrategyKind.FUSE_OVERLAY)
    writable_layer = strategy.upper.rsplit("/", 1)[0] if overlaying else None

    steps: list = [MakeScratchRoot(SESSION, ROOT)]

    if image.kind == ImageKind.SANDBOX:
        if strategy.kind == StrategyKind.READ_ONLY_UNDERLAY:
            steps.append(BindEntry(image.path, f"{SESSION}/image/0", True, "image"))
        elif strategy.kind == StrategyKind.WRITABLE_SANDBOX:
            steps.append(BindEntry(image.path, ROOT, False, "rootfs"))
    else:
        root_index = image.partitions.index(image.rootfs)
        steps += _partition_steps(image, root_index, f"{SESSION}/image/{root_index}", False)
        if overlaying:
            for i, p in enumerate(image.partitions):
                if p.role == PartRole.OVERLAY:
                    target = f"{SESSION}/image/{i}"
                    steps += _partition_steps(image, i, target, target == writable_layer)

    if overlaying:
        infos = list(overlays) or [None] * len(request.overlay_paths)
        for j, (path, info) in enumerate(zip(request.overlay_paths, infos)):
            if info is not None and info.kind == ImageKind.RAW_EXTFS:
                target = f"{SESSION}/overlay/{j}"
                steps += _ext_overlay_steps(info.path, info.file_length, target, target == writable_layer)
        cls = MountKernelOverlay if strategy.kind == StrategyKind.KERNEL_OVERLAY else MountFuseOverlay
        steps.append(cls(strategy.lower, strategy.upper, strategy.work, ROOT))

    if strategy.kind == StrategyKind.READ_ONLY_UNDERLAY:
        steps.append(BindEntry(_rootfs_dir(image), ROOT, True, "underlay"))

    binds = sorted(
        (BindSpec(b.source, _norm_dest(b.destination), b.readonly) for b in request.binds),
        key=lambda b: _dest_key(b.destination),
    )
    for b in binds:
        steps.append(BindEntry(b.source, ROOT + b.destination, b.readonly, "bind"))
    if identity.fakeroot_cmd and identity.mode == IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT:
        steps.append(BindEntry(identity.fakeroot_cmd, ROOT + FAKEROOT_DIR, True, "fakeroot"))

    taken = {b.destination for b in binds}
    for kind in STANDARD_MOUNTS:
        if kind == "home":
            if not request.home or request.home == "/":
                continue
            source = dest = _norm_dest(request.home)
            # a home under /tmp (say) already arrives with that mount
            if any(dest == f"/{k}" or dest.startswith(f"/{k}/") for k in STANDARD_MOUNTS if k != "home"):
                continue
        else:
            source = dest = "/" + kind
        if dest in taken:
            continue
        steps.append(MountStandard(kind, source, ROOT + dest))

    steps.append(PivotIntoRoot(ROOT))
    return identity, MountPlan(tuple(steps), strategy)


# rendering


def render_plan(identity: IdentityPlan, mounts: MountPlan, fmt: str = "human") -> str:
    if fmt == "json":
        doc = {"identity": identity.to_dict(), "mounts": mounts.to_list()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt != "human":
        raise ValueError(f"unknown plan format {fmt!r}")

    lines = [f"identity: {identity.mode.value}"]
    for name, entries in (("uid map", identity.uid_map), ("gid map", identity.gid_map)):
        for inside, outside, count in entries:
            lines.append(f"{name}: {inside} {outside} {count}")
    if identity.fakeroot_cmd:
        lines.append(f"fakeroot command: {identity.fakeroot_cmd}")
    if identity.requires_setuid_host:
        lines.append("requires setuid host: yes")
    lines += [f"info: {m}" for m in identity.info_messages]
    lines += [f"warning: {m}" for m in identity.warnings]
    if mounts.strategy is not None:
        lines.append(f"root strategy: {mounts.strategy.kind.value}")
    for n, step in enumerate(mounts.steps, 1):
        args = " ".join(
            f"{k}={':'.join(v) if isinstance(v, list) else v}"
            for k, v in step_to_dict(step).items()
            if k != "step"
        )
        lines.append(f"{n:2d}. {step.step} {args}")
    return "\n".join(lines) + "\n"


def load_plan(text: str) -> tuple[IdentityPlan, MountPlan]:
    """Inverse of the json rendering (the strategy summary is not serialized)."""
    doc = json.loads(text)
    return IdentityPlan.from_dict(doc["identity"]), MountPlan(tuple(step_from_dict(s) for s in doc["mounts"]))
