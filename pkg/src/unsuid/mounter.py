"""Carry out mount steps: FUSE helpers, overlays, bind mounts and the underlay root.

Everything here runs inside the private user and mount namespaces set up
by :mod:`unsuid.nsexec`.
"""

import errno
import logging
import os
import posixpath
import re
import signal
import stat
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

from . import libc
from .errors import (
    BindDestinationConflict,
    DestinationInsideFile,
    HelperFailed,
    HelperMissing,
    MountError,
    MountFailed,
    MountTimeout,
    OverlayRejectedByKernel,
    WindowFailed,
)
from .imagefmt import PartitionDescriptor, PartKind
from .planner import (
    ROOT,
    SESSION,
    BindEntry,
    MakeScratchRoot,
    MountExtPartition,
    MountFuseOverlay,
    MountKernelOverlay,
    MountPlan,
    MountSquashPartition,
    MountStandard,
    PivotIntoRoot,
    ServeWindowFile,
    StrategyKind,
    container_path,
)
from .windowfile import WindowHandle, WindowSpec, is_mounted, serve_window

log = logging.getLogger(__name__)

MOUNT_TIMEOUT = 10.0


# underlay composition


class UnderlayAction(NamedTuple):
    kind: str  # BindFromImage, BindFromHost, MakeDir, MakeFile
    source: str | None
    destination: str  # relative to the scratch root


# entry kinds reported by an image lister
DIR, FILE, SYMLINK = "dir", "file", "symlink"

Lister = Callable[[str], Mapping[str, str]]


def directory_lister(root: str) -> Lister:
    """List entries of the tree at ``root``; missing directories list as empty."""

    def entries(rel: str) -> dict[str, str]:
        path = os.path.join(root, rel) if rel else root
        out = {}
        try:
            with os.scandir(path) as it:
                for e in it:
                    if e.is_symlink():
                        out[e.name] = SYMLINK
                    elif e.is_dir():
                        out[e.name] = DIR
                    else:
                        out[e.name] = FILE
        except (FileNotFoundError, NotADirectoryError):
            pass
        return out

    return entries


def dict_lister(tree: Mapping) -> Lister:
    """Lister over a nested dict; dict values are directories, str values symlinks, others files."""

    def entries(rel: str) -> dict[str, str]:
        node = tree
        for comp in filter(None, rel.split("/")):
            node = node.get(comp) if isinstance(node, Mapping) else None
            if not isinstance(node, Mapping):
                return {}
        return {
            k: DIR if isinstance(v, Mapping) else SYMLINK if isinstance(v, str) else FILE
            for k, v in node.items()
        }

    return entries


def compose_underlay(
    image: Lister | Mapping | str,
    binds: Iterable[tuple],
    standard_targets: Iterable[str] = (),
    is_dir: Callable[[str], bool] = os.path.isdir,
) -> list[UnderlayAction]:
    """Work out how to build a root from image entries plus bind mounts without an overlay.

    Image entries that no destination passes through are bound in whole.
    Where a destination passes through an image directory, that directory
    is recreated in the scratch root and its other children are bound in
    one by one, recursing only along destination paths. Order is
    lexicographic within a level, parents before children.
    """
    if isinstance(image, str):
        image = directory_lister(image)
    elif isinstance(image, Mapping):
        image = dict_lister(image)

    targets: dict[tuple[str, ...], tuple[str | None, bool]] = {}
    for source, dest, *_ in binds:
        key = _components(dest)
        if key in targets:
            raise BindDestinationConflict(f"two binds target {dest}")
        targets[key] = (source, is_dir(source))
    for dest in standard_targets:
        key = _components(dest)
        if key in targets:
            raise BindDestinationConflict(f"{dest} is both bound and a standard mount")
        targets[key] = (dest, True)

    # destinations inside another destination are mounted on top of it later
    nested = {k for k in targets if any(k[:i] in targets for i in range(1, len(k)))}
    roots = {k: v for k, v in targets.items() if k not in nested}

    actions: list[UnderlayAction] = []
    _compose_level(image, (), roots, actions)
    for key in sorted(nested):
        actions.append(UnderlayAction("BindFromHost", targets[key][0], "/".join(key)))
    return actions


def _components(dest: str) -> tuple[str, ...]:
    norm = posixpath.normpath(dest)
    if not norm.startswith("/") or norm == "/":
        raise BindDestinationConflict(f"bad destination {dest!r}")
    return tuple(norm.strip("/").split("/"))


def _compose_level(image: Lister, prefix: tuple[str, ...], targets: dict, actions: list) -> None:
    depth = len(prefix)
    here = {k for k in targets if k[:depth] == prefix}
    entries = image("/".join(prefix))
    names = set(entries) | {k[depth] for k in here}
    for name in sorted(names):
        path = prefix + (name,)
        rel = "/".join(path)
        below = {k for k in here if k[: depth + 1] == path}
        if not below:
            actions.append(UnderlayAction("BindFromImage", rel, rel))
        elif path in below:
            source, source_is_dir = targets[path]
            actions.append(UnderlayAction("MakeDir" if source_is_dir else "MakeFile", None, rel))
            actions.append(UnderlayAction("BindFromHost", source, rel))
        else:
            kind = entries.get(name)
            if kind in (FILE, SYMLINK):
                raise DestinationInsideFile(f"/{rel} is a {'symlink' if kind == SYMLINK else 'file'} in the image")
            actions.append(UnderlayAction("MakeDir", None, rel))
            _compose_level(image, path, targets, actions)


# low level mounts


_LOCKED_FLAGS = (
    (os.ST_NOSUID, libc.MS_NOSUID),
    (os.ST_NODEV, libc.MS_NODEV),
    (os.ST_NOEXEC, libc.MS_NOEXEC),
    (os.ST_NOATIME, libc.MS_NOATIME),
    (os.ST_NODIRATIME, libc.MS_NODIRATIME),
    (os.ST_RELATIME, libc.MS_RELATIME),
)


def bind_mount(source: str, target: str, readonly: bool = False, recursive: bool = True) -> None:
    flags = libc.MS_BIND | (libc.MS_REC if recursive else 0)
    libc.mount(source, target, None, flags)
    if readonly:
        # flags inherited from a host mount are locked in a user namespace and must be repeated
        st = os.statvfs(target)
        keep = 0
        for st_flag, ms_flag in _LOCKED_FLAGS:
            if st.f_flag & st_flag:
                keep |= ms_flag
        libc.mount(None, target, None, libc.MS_REMOUNT | libc.MS_BIND | libc.MS_RDONLY | keep)


@dataclass
class HelperProcess:
    helper: str
    proc: subprocess.Popen
    mountpoint: str
    stderr_path: str
    state: str = "starting"

    @property
    def pid(self) -> int:
        return self.proc.pid

    def stderr(self) -> str:
        try:
            with open(self.stderr_path, errors="replace") as f:
                return f.read()
        except OSError:
            return ""

    def stop(self, timeout: float = 5.0) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self.state = "exited"
        try:
            os.unlink(self.stderr_path)
        except OSError:
            pass


def _which(helpers: Mapping[str, str | None], name: str) -> str:
    path = helpers.get(name)
    if not path:
        raise HelperMissing(f"{name} not found; install it or add it to UNSUID_HELPER_PATH")
    return path


def spawn_helper(name: str, argv: list[str], mountpoint: str, timeout: float = MOUNT_TIMEOUT) -> HelperProcess:
    """Run a FUSE helper in the foreground and wait until its mount shows up."""
    fd, errpath = tempfile.mkstemp(prefix=f"unsuid-{name}-", suffix=".err")
    try:
        proc = subprocess.Popen(argv, stdin=subprocess.DEVNULL, stdout=fd, stderr=fd, close_fds=True)
    except OSError as e:
        os.close(fd)
        os.unlink(errpath)
        raise HelperFailed(name, -1, str(e)) from e
    os.close(fd)
    helper = HelperProcess(name, proc, mountpoint, errpath)
    wait_for_mount(helper, timeout)
    return helper


def wait_for_mount(helper: HelperProcess, timeout: float = MOUNT_TIMEOUT) -> None:
    delay, deadline = 0.001, time.monotonic() + timeout
    while True:
        if is_mounted(helper.mountpoint):
            helper.state = "serving"
            return
        rc = helper.proc.poll()
        if rc is not None:
            err = helper.stderr()
            helper.stop()
            raise HelperFailed(helper.helper, rc, err)
        if time.monotonic() >= deadline:
            helper.stop()
            raise MountTimeout(f"{helper.helper} did not mount {helper.mountpoint} within {timeout:g}s")
        time.sleep(delay)
        delay = min(delay * 2, 0.25)


def squashfuse_argv(helper: str, image: str, offset: int, target: str) -> list[str]:
    return [helper, "-f", "-o", f"offset={offset}", image, target]


def fuse2fs_argv(helper: str, window_file: str, target: str, writable: bool) -> list[str]:
    return [helper, window_file, target, "-o", "fakeroot" if writable else "ro", "-f"]


def _check_option_path(p: str) -> str:
    if any(c in p for c in ",:\n"):
        raise MountFailed(f"path {p!r} cannot be used in overlay options")
    return p


def overlay_options(lower: Iterable[str], upper: str | None, work: str | None) -> str:
    opts = "lowerdir=" + ":".join(_check_option_path(p) for p in lower)
    if upper:
        opts += f",upperdir={_check_option_path(upper)},workdir={_check_option_path(work)}"
    return opts


def fuse_overlayfs_argv(helper: str, lower, upper, work, target) -> list[str]:
    return [helper, "-f", "-o", overlay_options(lower, upper, work), target]


def mount_squash_partition(image: str, part: PartitionDescriptor, target: str,
                           helpers: Mapping[str, str | None]) -> HelperProcess:
    if part.kind != PartKind.SQUASHFS:
        raise MountFailed(f"partition at {part.offset} is not squashfs")
    helper = _which(helpers, "squashfuse")
    return spawn_helper("squashfuse", squashfuse_argv(helper, image, part.offset, target), target)


def mount_ext_partition(image: str, part: PartitionDescriptor, target: str, writable: bool,
                        window_dir: str, helpers: Mapping[str, str | None]) -> tuple[WindowHandle, HelperProcess]:
    """Expose the partition through a window file and run fuse2fs on it."""
    if part.kind != PartKind.EXTFS:
        raise MountFailed(f"partition at {part.offset} is not ext")
    helper = _which(helpers, "fuse2fs")
    try:
        window = serve_window(WindowSpec(image, part.offset, part.size, writable, window_dir))
    except MountError as e:
        raise WindowFailed(str(e)) from e
    try:
        proc = spawn_helper("fuse2fs", fuse2fs_argv(helper, window.path, target, writable), target)
    except BaseException:
        window.shutdown()
        raise
    return window, proc


def mount_overlay(kind: StrategyKind, lower, upper, work, target: str,
                  helpers: Mapping[str, str | None] | None = None) -> HelperProcess | None:
    """Mount the merged view at ``target``. No fallback between kernel and FUSE overlay."""
    if kind == StrategyKind.KERNEL_OVERLAY:
        try:
            libc.mount("overlay", target, "overlay", 0, overlay_options(lower, upper, work))
        except OSError as e:
            raise OverlayRejectedByKernel(
                f"kernel refused the overlay mount at {target}: {e.strerror}. "
                "Re-run 'unsuid probe'; the host may need fuse-overlayfs."
            ) from e
        return None
    if kind == StrategyKind.FUSE_OVERLAY:
        helper = _which(helpers or {}, "fuse-overlayfs")
        return spawn_helper("fuse-overlayfs", fuse_overlayfs_argv(helper, lower, upper, work, target), target)
    raise MountFailed(f"{kind} is not an overlay strategy")


def execute_underlay(actions: Iterable[UnderlayAction], image_root: str, scratch_root: str,
                     readonly: bool = True, include_host: bool = False, created=None, mounted=None) -> None:
    """Apply underlay actions. Host binds are skipped unless ``include_host`` is set.

    ``created`` and ``mounted`` collect paths for teardown when given.
    """
    for kind, source, rel in actions:
        dest = os.path.join(scratch_root, rel)
        if kind == "MakeDir":
            if not os.path.isdir(dest):
                os.mkdir(dest, 0o755)
                _note(created, dest)
        elif kind == "MakeFile":
            if not os.path.lexists(dest):
                os.close(os.open(dest, os.O_CREAT | os.O_WRONLY | os.O_CLOEXEC, 0o644))
                _note(created, dest)
        elif kind == "BindFromImage":
            src = os.path.join(image_root, source)
            st = os.lstat(src)
            if stat.S_ISLNK(st.st_mode):
                os.symlink(os.readlink(src), dest)
                _note(created, dest)
                continue
            if stat.S_ISDIR(st.st_mode):
                os.mkdir(dest, 0o755)
            else:
                os.close(os.open(dest, os.O_CREAT | os.O_WRONLY | os.O_CLOEXEC, 0o644))
            _note(created, dest)
            bind_mount(src, dest, readonly=readonly)
            _note(mounted, dest)
        elif kind == "BindFromHost":
            if include_host:
                bind_mount(source, dest)
                _note(mounted, dest)
        else:
            raise ValueError(f"unknown underlay action {kind}")


def _note(collection, item) -> None:
    if collection is not None:
        collection.append(item)


# fakeroot support

_ASSIGN = re.compile(r"^(FAKED|PATHS|LIB)=(.*)$", re.M)


def prepare_fakeroot_support(fakeroot: str, support_dir: str, target_dir: str) -> list[tuple[str, str]]:
    """Lay out the fakeroot command for use inside the container.

    A shell-script fakeroot has its ``FAKED``/``PATHS`` settings rewritten
    to point under ``target_dir``. Returns the ``(host source, name)``
    pairs that must additionally be bound into ``support_dir``.
    """
    with open(fakeroot, "rb") as f:
        content = f.read()
    binds = []
    if content.startswith(b"#!"):
        text = content.decode(errors="surrogateescape")
        values = {k: v.strip().strip("'\"") for k, v in _ASSIGN.findall(text)}
        replacements = {}
        faked = values.get("FAKED")
        if faked and os.path.exists(faked):
            binds.append((faked, "faked"))
            replacements["FAKED"] = f"{target_dir}/faked"
        lib = values.get("LIB", "")
        for d in values.get("PATHS", "").split(":"):
            if d and os.path.isdir(d) and (not lib or os.path.exists(os.path.join(d, lib))):
                binds.append((d, "lib"))
                replacements["PATHS"] = f"{target_dir}/lib"
                break
        text = _ASSIGN.sub(lambda m: f"{m[1]}={replacements.get(m[1], m[2])}", text)
        content = text.encode(errors="surrogateescape")
    path = os.path.join(support_dir, "fakeroot")
    with open(path, "wb") as f:
        f.write(content)
    os.chmod(path, 0o755)
    for source, name in binds:
        dest = os.path.join(support_dir, name)
        if os.path.isdir(source):
            os.mkdir(dest)
        else:
            open(dest, "wb").close()
    return binds


# plan execution


@dataclass
class _Record:
    kind: str  # mount, rbind, helper, window, created, sealed
    path: str
    handle: object = None


@dataclass
class MountSession:
    """Executes a :class:`MountPlan` against a scratch directory and undoes it."""

    session_dir: str
    helpers: Mapping[str, str | None] = field(default_factory=dict)
    records: list[_Record] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    underlay: bool = False

    def resolve(self, path: str) -> str:
        if path == SESSION or path.startswith(SESSION + "/"):
            return self.session_dir + path[len(SESSION):]
        return path

    @property
    def root(self) -> str:
        return self.resolve(ROOT)

    def run(self, plan: MountPlan) -> None:
        for index, step in enumerate(plan.steps):
            log.debug("step %d: %s", index + 1, step)
            self.execute(step, plan.steps[index + 1:])

    def execute(self, step, later=()) -> None:
        if isinstance(step, MakeScratchRoot):
            target = self.resolve(step.target)
            libc.mount("unsuid-scratch", target, "tmpfs", libc.MS_NOSUID | libc.MS_NODEV, "mode=0755")
            self.records.append(_Record("mount", target))
            os.mkdir(self.resolve(step.root), 0o755)
        elif isinstance(step, MountSquashPartition):
            target = self._mkdirs(step.target)
            part = PartitionDescriptor(PartKind.SQUASHFS, 1, step.offset, step.size)
            proc = mount_squash_partition(step.image, part, target, self.helpers)
            self.records.append(_Record("helper", target, proc))
        elif isinstance(step, ServeWindowFile):
            mp = self._mkdirs(step.mountpoint)
            try:
                handle = serve_window(WindowSpec(step.backing, step.offset, step.size, step.writable, mp))
            except MountError as e:
                raise WindowFailed(str(e)) from e
            self.records.append(_Record("window", mp, handle))
        elif isinstance(step, MountExtPartition):
            target = self._mkdirs(step.target)
            helper = _which(self.helpers, "fuse2fs")
            proc = spawn_helper("fuse2fs", fuse2fs_argv(helper, self.resolve(step.source), target, step.writable),
                                target)
            self.records.append(_Record("helper", target, proc))
        elif isinstance(step, (MountKernelOverlay, MountFuseOverlay)):
            self._overlay(step)
        elif isinstance(step, BindEntry):
            self._bind(step, later)
        elif isinstance(step, MountStandard):
            target = self._ensure_target(self.resolve(step.target), True)
            bind_mount(step.source, target, recursive=True)
            self.records.append(_Record("rbind", target))
        elif isinstance(step, PivotIntoRoot):
            if self.underlay:
                libc.mount(None, self.root, None, libc.MS_REMOUNT | libc.MS_BIND | libc.MS_RDONLY
                           | libc.MS_NOSUID | libc.MS_NODEV)
                self.records.append(_Record("sealed", self.root))
        else:
            raise MountFailed(f"unknown step {step!r}")

    def _mkdirs(self, path: str) -> str:
        path = self.resolve(path)
        os.makedirs(path, exist_ok=True)
        return path

    def _overlay(self, step) -> None:
        lower = [self.resolve(p) for p in step.lower]
        upper = self.resolve(step.upper) if step.upper else None
        work = self.resolve(step.work) if step.work else None
        for p in lower:
            if not os.path.isdir(p):
                raise MountFailed(f"overlay layer {p} does not exist")
        if upper:
            os.makedirs(upper, exist_ok=True)
            os.makedirs(work, exist_ok=True)
        target = self.resolve(step.target)
        kind = StrategyKind.KERNEL_OVERLAY if isinstance(step, MountKernelOverlay) else StrategyKind.FUSE_OVERLAY
        proc = mount_overlay(kind, lower, upper, work, target, self.helpers)
        self.records.append(_Record("helper", target, proc) if proc else _Record("mount", target))

    def _ensure_target(self, target: str, want_dir: bool) -> str:
        """Create a missing mount point (and parents), remembering what was created."""
        if os.path.lexists(target):
            return target
        missing = []
        p = target
        while not os.path.lexists(p):
            missing.append(p)
            p = os.path.dirname(p)
        for p in reversed(missing):
            if p == target and not want_dir:
                os.close(os.open(p, os.O_CREAT | os.O_WRONLY | os.O_CLOEXEC, 0o644))
            else:
                os.mkdir(p, 0o755)
            self.records.append(_Record("created", p))
        return target

    def _bind(self, step: BindEntry, later) -> None:
        source, target = self.resolve(step.source), self.resolve(step.target)
        if step.role == "underlay":
            self._underlay(source, later)
            return
        if step.role == "fakeroot":
            support = self._mkdirs(f"{SESSION}/fakeroot")
            inside = container_path(step.target)
            for host, name in prepare_fakeroot_support(source, support, inside):
                bind_mount(host, os.path.join(support, name), readonly=True)
                self.records.append(_Record("rbind", os.path.join(support, name)))
            source = support
        if not os.path.exists(source):
            raise MountFailed(f"bind source {source} does not exist")
        if step.role == "image":
            os.makedirs(target, exist_ok=True)
        else:
            self._ensure_target(target, os.path.isdir(source))
        bind_mount(source, target, readonly=step.readonly)
        self.records.append(_Record("rbind", target))

    def _underlay(self, image_root: str, later) -> None:
        # make the root a mount of its own so it can be pivoted into and remounted read-only
        libc.mount(self.root, self.root, None, libc.MS_BIND)
        self.records.append(_Record("mount", self.root))
        self.underlay = True
        binds, standard = [], []
        dir_sources = set()
        for s in later:
            if isinstance(s, BindEntry) and s.role in ("bind", "fakeroot"):
                binds.append((s.source, container_path(s.target), s.readonly))
                if s.role == "fakeroot":
                    dir_sources.add(s.source)
            elif isinstance(s, MountStandard):
                standard.append(container_path(s.target))
        actions = compose_underlay(
            image_root, binds, standard, is_dir=lambda p: p in dir_sources or os.path.isdir(p)
        )
        created, mounted = [], []
        try:
            execute_underlay(actions, image_root, self.root, readonly=True, created=created, mounted=mounted)
        finally:
            mounted_set = set(mounted)
            for p in created:
                self.records.append(_Record("created", p))
                if p in mounted_set:
                    self.records.append(_Record("rbind", p))

    def teardown(self) -> list[str]:
        """Undo everything in reverse order. Safe to call repeatedly.

        Returns diagnostics for anything that could not be cleaned normally.
        """
        problems = []
        while self.records:
            rec = self.records.pop()
            try:
                if rec.kind == "helper":
                    if rec.handle is None:
                        _umount(rec.path, problems)
                    else:
                        _umount(rec.path, problems)
                        rec.handle.stop()
                elif rec.kind == "window":
                    rec.handle.shutdown()
                    problems.extend(rec.handle.diagnostics)
                elif rec.kind in ("mount", "rbind"):
                    _umount(rec.path, problems, lazy=rec.kind == "rbind")
                elif rec.kind == "sealed":
                    libc.mount(None, rec.path, None, libc.MS_REMOUNT | libc.MS_BIND | libc.MS_NOSUID | libc.MS_NODEV)
                elif rec.kind == "created":
                    if os.path.isdir(rec.path) and not os.path.islink(rec.path):
                        os.rmdir(rec.path)
                    else:
                        os.unlink(rec.path)
            except FileNotFoundError:
                pass
            except OSError as e:
                problems.append(f"{rec.kind} {rec.path}: {e.strerror}")
        self.diagnostics.extend(problems)
        for p in problems:
            log.warning("teardown: %s", p)
        return problems


def _umount(path: str, problems: list, lazy: bool = False) -> None:
    try:
        libc.umount2(path, libc.MNT_DETACH if lazy else 0)
    except OSError as e:
        if e.errno == errno.EINVAL:  # not mounted any more
            return
        if e.errno != errno.EBUSY:
            raise
        problems.append(f"{path} busy; detached lazily")
        libc.umount2(path, libc.MNT_DETACH)


def mounts_under(prefix: str) -> list[str]:
    prefix = os.path.realpath(prefix)
    out = []
    with open("/proc/self/mountinfo") as f:
        for line in f:
            mp = line.split()[4]
            if mp == prefix or mp.startswith(prefix.rstrip("/") + "/"):
                out.append(mp)
    return out
