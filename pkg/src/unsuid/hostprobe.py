"""Find out which unprivileged container features this host and user actually have.

Capabilities are probed by attempting the operation in a throwaway child
rather than by reading distribution specific sysctls.
"""

import os
import pwd
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, NamedTuple

from . import libc
from .errors import MalformedIdMap

HELPERS = (
    "squashfuse",
    "fuse2fs",
    "fuse-overlayfs",
    "fakeroot",
    "newuidmap",
    "newgidmap",
    "mksquashfs",
    "mkfs.ext3",
)

HELPER_PATH_ENV = "UNSUID_HELPER_PATH"
ID_LIMIT = 1 << 32
IDENTITY_MAP = (0, 0, ID_LIMIT - 1)


class SubIdRange(NamedTuple):
    start: int
    count: int


@dataclass
class HostProfile:
    userns_available: bool = False
    unpriv_overlayfs: bool = False
    fuse_device_usable: bool = False
    subid_mapped: bool = False
    subuid_ranges: list[SubIdRange] = field(default_factory=list)
    subgid_ranges: list[SubIdRange] = field(default_factory=list)
    helper_paths: dict[str, str | None] = field(default_factory=dict)
    setuid_installed: bool = False
    already_root_mapped: bool = False
    invoking_uid: int = 0
    invoking_gid: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.subuid_ranges = [SubIdRange(*r) for r in self.subuid_ranges]
        self.subgid_ranges = [SubIdRange(*r) for r in self.subgid_ranges]
        self.helper_paths = {name: self.helper_paths.get(name) for name in HELPERS}
        if self.subid_mapped != bool(self.subuid_ranges and self.subgid_ranges):
            raise ValueError("subid_mapped must be true exactly when both subuid and subgid ranges exist")

    def helper(self, name: str) -> str | None:
        return self.helper_paths.get(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subuid_ranges"] = [list(r) for r in self.subuid_ranges]
        d["subgid_ranges"] = [list(r) for r in self.subgid_ranges]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "HostProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown profile fields: {', '.join(sorted(unknown))}")
        kwargs = dict(d)
        if "subid_mapped" not in kwargs:
            kwargs["subid_mapped"] = bool(kwargs.get("subuid_ranges") and kwargs.get("subgid_ranges"))
        return cls(**kwargs)


def parse_subid(content: str, user_name: str, numeric_id: int, diagnostics: list | None = None) -> list[SubIdRange]:
    """Return the ``name:start:count`` ranges belonging to a user, in file order.

    Entries may name the user or its decimal id. Lines that do not parse, or
    that have a nonpositive count or overflow the 32-bit id space, are skipped
    and noted in ``diagnostics``.
    """
    names = {user_name, str(numeric_id)}
    ranges = []
    for lineno, line in enumerate(content.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(":")
        try:
            if len(parts) != 3:
                raise ValueError("expected name:start:count")
            name, start, count = parts[0], int(parts[1]), int(parts[2])
            if count < 1:
                raise ValueError(f"nonpositive count {count}")
            if start < 0 or start + count > ID_LIMIT:
                raise ValueError("range outside the 32-bit id space")
        except ValueError as e:
            if diagnostics is not None:
                diagnostics.append(f"line {lineno}: skipped {line!r}: {e}")
            continue
        if name in names:
            ranges.append(SubIdRange(start, count))
    return ranges


def parse_id_map(text: str) -> list[tuple[int, int, int]]:
    entries = []
    for line in text.splitlines():
        if not line.strip():
            continue
        cols = line.split()
        try:
            if len(cols) != 3:
                raise ValueError
            entries.append(tuple(int(c) for c in cols))
        except ValueError:
            raise MalformedIdMap(f"bad id map line: {line!r}") from None
    return entries


def detect_root_mapped_env(uid_map: str, euid: int) -> bool:
    """True when we are uid 0 in a namespace whose map is not the host identity map."""
    entries = parse_id_map(uid_map)
    return euid == 0 and entries != [IDENTITY_MAP]


def helper_search_path(env: Mapping[str, str]) -> str:
    parts = [env.get(HELPER_PATH_ENV, ""), env.get("PATH", os.defpath)]
    return os.pathsep.join(p for p in parts if p)


def find_helpers(env: Mapping[str, str]) -> dict[str, str | None]:
    path = helper_search_path(env)
    return {name: shutil.which(name, path=path) for name in HELPERS}


def _write(path: str, data: str) -> None:
    with open(path, "w") as f:
        f.write(data)


def _become_root_mapped(uid: int, gid: int, extra_flags: int = 0) -> None:
    libc.unshare(libc.CLONE_NEWUSER | extra_flags)
    _write("/proc/self/setgroups", "deny")
    _write("/proc/self/gid_map", f"0 {gid} 1\n")
    _write("/proc/self/uid_map", f"0 {uid} 1\n")


def run_in_child(func) -> tuple[bool, str]:
    """Run ``func`` in a forked child; report success and any error text.

    The child always leaves through ``os._exit`` so no interpreter cleanup
    from the parent runs twice.
    """
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(r)
        code = 0
        try:
            func()
        except BaseException as e:  # noqa: BLE001 - reported to the parent
            os.write(w, str(e).encode(errors="replace")[:4000])
            code = 1
        os._exit(code)
    os.close(w)
    chunks = []
    while chunk := os.read(r, 4096):
        chunks.append(chunk)
    os.close(r)
    _, status = os.waitpid(pid, 0)
    ok = os.waitstatus_to_exitcode(status) == 0
    return ok, b"".join(chunks).decode(errors="replace")


def force_rmtree(path: str) -> None:
    """rmtree that also copes with the mode-000 directories overlayfs leaves in workdir."""
    for root, dirs, _ in os.walk(path):
        for d in dirs:
            p = os.path.join(root, d)
            if not os.path.islink(p):
                os.chmod(p, 0o700)
    shutil.rmtree(path)


def probe_userns(uid: int, gid: int) -> tuple[bool, str]:
    return run_in_child(lambda: _become_root_mapped(uid, gid))


def probe_overlay(uid: int, gid: int) -> tuple[bool, str]:
    base = tempfile.mkdtemp(prefix="unsuid-probe-")
    try:
        for d in ("lower", "upper", "work", "merged"):
            os.mkdir(os.path.join(base, d))

        def attempt():
            _become_root_mapped(uid, gid, libc.CLONE_NEWNS)
            libc.mount(None, "/", None, libc.MS_REC | libc.MS_PRIVATE)
            opts = f"lowerdir={base}/lower,upperdir={base}/upper,workdir={base}/work"
            libc.mount("overlay", f"{base}/merged", "overlay", 0, opts)

        return run_in_child(attempt)
    finally:
        force_rmtree(base)


def probe_fuse_device(path: str = "/dev/fuse") -> tuple[bool, str]:
    try:
        fd = os.open(path, os.O_RDWR | os.O_CLOEXEC)
    except OSError as e:
        return False, f"{path}: {e.strerror}"
    os.close(fd)
    return True, ""


PROBE_OFFSET = 4096
PROBE_TEXT = b"offset ok\n"


def probe_squashfuse_offset(helpers: Mapping[str, str | None], uid: int, gid: int,
                            timeout: float = 10.0) -> tuple[bool, str]:
    """Check that squashfuse honours ``-o offset=N`` by mounting an embedded fixture."""
    mksquashfs, squashfuse = helpers.get("mksquashfs"), helpers.get("squashfuse")
    if not (mksquashfs and squashfuse):
        return False, "needs mksquashfs and squashfuse"
    base = tempfile.mkdtemp(prefix="unsuid-probe-")
    try:
        src, mnt = os.path.join(base, "src"), os.path.join(base, "mnt")
        os.mkdir(src)
        os.mkdir(mnt)
        with open(os.path.join(src, "probe"), "wb") as f:
            f.write(PROBE_TEXT)
        payload, image = os.path.join(base, "payload"), os.path.join(base, "image")
        res = subprocess.run([mksquashfs, src, payload, "-noappend", "-no-xattrs"],
                             stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
        if res.returncode != 0:
            return False, f"mksquashfs failed: {res.stderr.decode(errors='replace').strip()}"
        with open(image, "wb") as out, open(payload, "rb") as f:
            out.write(b"\0" * PROBE_OFFSET)
            shutil.copyfileobj(f, out)

        def attempt():
            if os.getuid() != 0:
                _become_root_mapped(uid, gid, libc.CLONE_NEWNS)
            else:
                libc.unshare(libc.CLONE_NEWNS)
            libc.mount(None, "/", None, libc.MS_REC | libc.MS_PRIVATE)
            proc = subprocess.Popen([squashfuse, "-f", "-o", f"offset={PROBE_OFFSET}", image, mnt],
                                    stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
            try:
                deadline = time.monotonic() + timeout
                target = os.path.join(mnt, "probe")
                while not os.path.exists(target):
                    if proc.poll() is not None:
                        raise RuntimeError(f"squashfuse exited {proc.returncode}: "
                                           f"{proc.stderr.read().decode(errors='replace').strip()}")
                    if time.monotonic() > deadline:
                        raise RuntimeError("squashfuse did not mount the fixture in time")
                    time.sleep(0.01)
                with open(target, "rb") as f:
                    if f.read() != PROBE_TEXT:
                        raise RuntimeError("squashfuse offset mount shows the wrong content")
            finally:
                proc.terminate()
                proc.wait()

        return run_in_child(attempt)
    finally:
        force_rmtree(base)


def _read(path: str) -> str | None:
    try:
        with open(path) as f:
            return f.read()
    except OSError:
        return None


def probe_host(env: Mapping[str, str] | None = None, sysroot: str = "/") -> HostProfile:
    """Snapshot this host's capabilities. Never raises; causes go to ``diagnostics``.

    Forks throwaway children, so call it before the program starts threads.
    """
    env = os.environ if env is None else env
    uid, gid = os.getuid(), os.getgid()
    diags: list[str] = []

    userns, why = probe_userns(uid, gid)
    if not userns:
        diags.append(f"user namespaces unavailable: {why}")
        overlay = False
    else:
        overlay, why = probe_overlay(uid, gid)
        if not overlay:
            diags.append(f"unprivileged overlayfs unavailable: {why}")

    fuse, why = probe_fuse_device()
    if not fuse:
        diags.append(f"FUSE device unusable: {why}")

    try:
        user = pwd.getpwuid(uid).pw_name
    except KeyError:
        user = str(uid)
    subid = {}
    for kind in ("subuid", "subgid"):
        content = _read(os.path.join(sysroot, "etc", kind))
        if content is None:
            diags.append(f"/etc/{kind} not readable")
            subid[kind] = []
            continue
        sub_diags: list[str] = []
        subid[kind] = parse_subid(content, user, uid, sub_diags)
        diags.extend(f"/etc/{kind} {d}" for d in sub_diags)

    helpers = find_helpers(env)
    if fuse and helpers.get("squashfuse") and helpers.get("mksquashfs"):
        ok, why = probe_squashfuse_offset(helpers, uid, gid)
        diags.append("squashfuse offset option verified" if ok else f"squashfuse offset option not usable: {why}")

    root_mapped = False
    uid_map = _read(os.path.join(sysroot, "proc", "self", "uid_map"))
    if uid_map is not None:
        try:
            root_mapped = detect_root_mapped_env(uid_map, os.geteuid())
        except MalformedIdMap as e:
            diags.append(str(e))

    return HostProfile(
        userns_available=userns,
        unpriv_overlayfs=overlay,
        fuse_device_usable=fuse,
        subid_mapped=bool(subid["subuid"] and subid["subgid"]),
        subuid_ranges=subid["subuid"],
        subgid_ranges=subid["subgid"],
        helper_paths=helpers,
        setuid_installed=False,
        already_root_mapped=root_mapped,
        invoking_uid=uid,
        invoking_gid=gid,
        diagnostics=diags,
    )


def describe(profile: HostProfile) -> str:
    """Human-readable profile listing, one ``key: value`` per line."""
    lines = []
    for key in ("userns_available", "unpriv_overlayfs", "fuse_device_usable", "subid_mapped",
                "setuid_installed", "already_root_mapped", "invoking_uid", "invoking_gid"):
        lines.append(f"{key}: {getattr(profile, key)}")
    for key in ("subuid_ranges", "subgid_ranges"):
        ranges = getattr(profile, key)
        lines.append(f"{key}: " + (", ".join(f"{s}+{c}" for s, c in ranges) or "none"))
    for name in HELPERS:
        lines.append(f"helper {name}: {profile.helper_paths.get(name) or 'absent'}")
    for d in profile.diagnostics:
        lines.append(f"note: {d}")
    return "\n".join(lines) + "\n"


__all__ = [
    "HELPERS",
    "HostProfile",
    "SubIdRange",
    "describe",
    "detect_root_mapped_env",
    "find_helpers",
    "parse_subid",
    "probe_host",
    "run_in_child",
]
