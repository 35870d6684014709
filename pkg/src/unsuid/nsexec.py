"""Enter user and mount namespaces, assemble the root, and run the command in it.

Process layout of one run::

    unsuid (caller)            waits, removes the session directory
      └─ supervisor            new user+mount namespaces, mounts, FUSE windows
           ├─ FUSE helpers     squashfuse, fuse2fs, fuse-overlayfs
           └─ payload          own mount namespace, pivots into the root, execs

Namespaces are created with ``unshare`` which the kernel only permits in a
single-threaded process, so :func:`enter_namespaces` must run before any
thread (FUSE window servers included) exists. No network, PID, UTS or IPC
namespace is ever created.
"""

import errno
import logging
import os
import signal
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import libc
from .errors import (
    ExecFailed,
    HelperIdMapFailed,
    IdMapWriteFailed,
    ModeRequiresSetuidHost,
    PivotFailed,
    PrctlFailed,
    UnsuidError,
    UsernsDenied,
)
from .mounter import MountSession
from .planner import FAKEROOT_WRAP, IdentityMode, IdentityPlan, MountPlan, PivotIntoRoot

log = logging.getLogger(__name__)

DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"
ENV_ALLOWLIST = ("PATH", "HOME", "TERM")

Map = tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class NamespaceSetup:
    uid_map_entries: Map
    gid_map_entries: Map
    deny_setgroups: bool = True
    use_newidmap_helpers: bool = False
    no_new_privs: bool = True

    @classmethod
    def from_identity(cls, identity: IdentityPlan) -> "NamespaceSetup":
        multi = any(len(m) > 1 or any(e[2] > 1 for e in m) for m in (identity.uid_map, identity.gid_map))
        return cls(tuple(identity.uid_map), tuple(identity.gid_map), not multi, multi)

    def __post_init__(self):
        multi = any(len(m) > 1 or any(e[2] > 1 for e in m)
                    for m in (self.uid_map_entries, self.gid_map_entries))
        if multi != self.use_newidmap_helpers:
            raise ValueError("multi-id maps need newuidmap/newgidmap and single-id maps must not use them")
        if not self.use_newidmap_helpers and not self.deny_setgroups:
            raise ValueError("direct gid map writes require setgroups to be denied")
        if not self.no_new_privs:
            raise ValueError("no_new_privs is always set")


@dataclass(frozen=True)
class ExecSpec:
    argv: tuple[str, ...]
    working_dir: str = "/"
    env: Mapping[str, str] = field(default_factory=dict)
    fakeroot_wrap: str | None = None

    def __post_init__(self):
        if not self.argv:
            raise ValueError("argv must not be empty")

    @property
    def final_argv(self) -> list[str]:
        return ([self.fakeroot_wrap] if self.fakeroot_wrap else []) + list(self.argv)


def format_map(entries: Map) -> str:
    return "".join(f"{inside} {outside} {count}\n" for inside, outside, count in entries)


def _write_proc(path: str, data: str, err=IdMapWriteFailed) -> None:
    try:
        with open(path, "w") as f:
            f.write(data)
    except OSError as e:
        raise err(f"writing {path}: {e.strerror}") from e


def _helper_argv(helper: str, pid: int, entries: Map) -> list[str]:
    return [helper, str(pid)] + [str(v) for e in entries for v in e]


def _map_with_helpers(pid: int, setup: NamespaceSetup, helpers: Mapping[str, str | None]) -> str:
    """Run newgidmap then newuidmap against ``pid``; returns error text or ''."""
    for name, entries in (("newgidmap", setup.gid_map_entries), ("newuidmap", setup.uid_map_entries)):
        helper = helpers.get(name)
        if not helper:
            return f"{name} not found"
        res = subprocess.run(_helper_argv(helper, pid, entries), stdin=subprocess.DEVNULL,
                             stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
        if res.returncode != 0:
            return f"{name} exited {res.returncode}: {res.stderr.decode(errors='replace').strip()}"
    return ""


def enter_namespaces(setup: NamespaceSetup, helpers: Mapping[str, str | None] | None = None) -> None:
    """Move the calling process into fresh user and mount namespaces and write its id maps.

    Must be called while the process is single-threaded. With helper maps a
    short-lived child is forked first; it stays in the parent namespace and
    runs newuidmap/newgidmap on this process once the namespace exists.
    """
    flags = libc.CLONE_NEWUSER | libc.CLONE_NEWNS
    if not setup.use_newidmap_helpers:
        try:
            libc.unshare(flags)
        except OSError as e:
            raise UsernsDenied(f"cannot create a user namespace: {e.strerror}") from e
        if setup.deny_setgroups:
            _write_proc("/proc/self/setgroups", "deny")
        _write_proc("/proc/self/gid_map", format_map(setup.gid_map_entries))
        _write_proc("/proc/self/uid_map", format_map(setup.uid_map_entries))
        return

    target = os.getpid()
    go_r, go_w = os.pipe()
    res_r, res_w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(go_w)
        os.close(res_r)
        code = 1
        try:
            if os.read(go_r, 1) == b"1":
                msg = _map_with_helpers(target, setup, helpers or {})
                os.write(res_w, msg.encode()[:4000])
                code = 0
        finally:
            os._exit(code)
    os.close(go_r)
    os.close(res_w)
    try:
        libc.unshare(flags)
    except OSError as e:
        os.write(go_w, b"0")
        os.close(go_w)
        os.waitpid(pid, 0)
        os.close(res_r)
        raise UsernsDenied(f"cannot create a user namespace: {e.strerror}") from e
    os.write(go_w, b"1")
    os.close(go_w)
    chunks = []
    while chunk := os.read(res_r, 4096):
        chunks.append(chunk)
    os.close(res_r)
    _, status = os.waitpid(pid, 0)
    msg = b"".join(chunks).decode(errors="replace")
    if msg or os.waitstatus_to_exitcode(status) != 0:
        raise HelperIdMapFailed(msg or "id map helper process failed")


def no_new_privs_status() -> int | None:
    """The ``NoNewPrivs`` value from /proc/self/status."""
    with open("/proc/self/status") as f:
        for line in f:
            if line.startswith("NoNewPrivs:"):
                return int(line.split()[1])
    return None


def apply_no_new_privs() -> None:
    try:
        libc.prctl(libc.PR_SET_NO_NEW_PRIVS, 1)
    except OSError as e:
        raise PrctlFailed(f"PR_SET_NO_NEW_PRIVS: {e.strerror}") from e


def checkpoint(name: str) -> None:
    log.debug("checkpoint %s: NoNewPrivs %s", name, no_new_privs_status())


def _is_mountpoint(path: str) -> bool:
    return os.path.ismount(path)


def pivot_into(root: str, diagnostics: list | None = None) -> None:
    """Make ``root`` the filesystem root and detach the old one.

    Falls back to a chroot-style entry when the kernel refuses the pivot
    (EINVAL, e.g. shared propagation or an initramfs root); that is noted
    in ``diagnostics``.
    """
    try:
        if not _is_mountpoint(root):
            libc.mount(root, root, None, libc.MS_BIND | libc.MS_REC)
        os.chdir(root)
        libc.pivot_root(".", ".")
        libc.umount2(".", libc.MNT_DETACH)
    except OSError as e:
        if e.errno != errno.EINVAL:
            raise PivotFailed(f"pivot into {root}: {e.strerror}") from e
        warning = f"pivot_root refused ({e.strerror}); entered {root} with chroot instead"
        log.warning(warning)
        if diagnostics is not None:
            diagnostics.append(warning)
        try:
            os.chdir(root)
            try:
                libc.mount(".", "/", None, libc.MS_MOVE)
            except OSError:
                pass
            os.chroot(".")
        except OSError as e2:
            raise PivotFailed(f"chroot into {root}: {e2.strerror}") from e2
    os.chdir("/")


def container_env(host_env: Mapping[str, str], passthrough: Sequence[str] = (), home: str | None = None) -> dict:
    env = {k: host_env[k] for k in (*ENV_ALLOWLIST, *passthrough) if k in host_env}
    env.setdefault("PATH", DEFAULT_PATH)
    if home:
        env["HOME"] = home
    return env


def exec_in_container(spec: ExecSpec) -> None:
    """Replace the process with the container command. Returns only by raising."""
    try:
        os.chdir(spec.working_dir)
    except OSError:
        log.debug("cannot enter %s, using /", spec.working_dir)
        os.chdir("/")
    argv = spec.final_argv
    try:
        libc.clear_ambient()
    except OSError:
        pass
    try:
        os.execvpe(argv[0], argv, dict(spec.env))
    except FileNotFoundError as e:
        raise ExecFailed(f"{argv[0]}: command not found") from e
    except OSError as e:
        err = ExecFailed(f"{argv[0]}: {e.strerror}")
        err.exit_code = 126
        raise err from e


def exec_spec_for(identity: IdentityPlan, argv: Sequence[str], env: Mapping[str, str],
                  working_dir: str = "/") -> ExecSpec:
    wrap = FAKEROOT_WRAP if identity.mode == IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT else None
    return ExecSpec(tuple(argv), working_dir, dict(env), wrap)


def check_runnable(identity: IdentityPlan) -> None:
    if identity.mode == IdentityMode.FAKEROOT_CMD_ONLY or identity.requires_setuid_host:
        raise ModeRequiresSetuidHost(
            f"{identity.mode.value} needs a setuid-root installation, which this runtime never uses"
        )


def _report(e: BaseException) -> int:
    code = getattr(e, "exit_code", 2)
    print(f"unsuid: error: {e}", file=sys.stderr, flush=True)
    return code


def _payload(root: str, spec: ExecSpec, stderr_path: str | None = None) -> int:
    """Child that becomes the container process. Only returns an exit code on failure."""
    try:
        if stderr_path:
            fd = os.open(stderr_path, os.O_WRONLY | os.O_APPEND)
            os.dup2(fd, 2)
            os.close(fd)
        libc.unshare(libc.CLONE_NEWNS)
        libc.mount(None, "/", None, libc.MS_REC | libc.MS_SLAVE)
        pivot_into(root)
        checkpoint("exec")
        exec_in_container(spec)
    except UnsuidError as e:
        return _report(e)
    except OSError as e:
        return _report(PivotFailed(str(e)))
    return 2


def _wait(pid: int) -> int:
    while True:
        try:
            _, status = os.waitpid(pid, 0)
        except InterruptedError:
            continue
        code = os.waitstatus_to_exitcode(status)
        return 128 - code if code < 0 else code


def supervise(identity: IdentityPlan, mounts: MountPlan, spec: ExecSpec, session_dir: str,
              helpers: Mapping[str, str | None], stderr_path: str | None = None) -> int:
    """Body of the supervisor process: namespaces, mounts, payload, teardown."""
    setup = NamespaceSetup.from_identity(identity)
    try:
        enter_namespaces(setup, helpers)
        libc.mount(None, "/", None, libc.MS_REC | libc.MS_SLAVE)
        apply_no_new_privs()
    except (UnsuidError, OSError) as e:
        return _report(e if isinstance(e, UnsuidError) else UsernsDenied(str(e)))
    checkpoint("mounts")
    if os.geteuid() != 0:
        # FUSE helpers need CAP_SYS_ADMIN in the namespace to mount
        try:
            libc.raise_ambient(libc.CAP_SYS_ADMIN)
        except OSError as e:
            log.debug("cannot raise ambient CAP_SYS_ADMIN: %s", e)

    session = MountSession(session_dir, helpers)
    try:
        session.run(mounts)
    except (UnsuidError, OSError) as e:
        code = _report(e)
        session.teardown()
        return code if isinstance(e, UnsuidError) else 2

    root = session.resolve(next(s.root for s in mounts.steps if isinstance(s, PivotIntoRoot)))
    pid = os.fork()
    if pid == 0:
        os._exit(_payload(root, spec, stderr_path))
    old = {s: signal.signal(s, signal.SIG_IGN) for s in (signal.SIGINT, signal.SIGQUIT)}
    try:
        code = _wait(pid)
    finally:
        for s, h in old.items():
            signal.signal(s, h)
        session.teardown()
    return code


def run(identity: IdentityPlan, mounts: MountPlan, spec: ExecSpec,
        helpers: Mapping[str, str | None], tmpdir: str | None = None, stderr_path: str | None = None) -> int:
    """Run the container to completion and return its exit status.

    Must be called from a single-threaded process. ``stderr_path`` redirects
    the container command's stderr to an existing file.
    """
    check_runnable(identity)
    session_dir = tempfile.mkdtemp(prefix="unsuid-", dir=tmpdir)
    try:
        sys.stdout.flush()
        sys.stderr.flush()
        pid = os.fork()
        if pid == 0:
            code = 2
            try:
                code = supervise(identity, mounts, spec, session_dir, helpers, stderr_path)
            except BaseException as e:  # noqa: BLE001 - never return into the caller's stack
                code = _report(e)
            finally:
                sys.stdout.flush()
                sys.stderr.flush()
                os._exit(code)
        old = {s: signal.signal(s, signal.SIG_IGN) for s in (signal.SIGINT, signal.SIGQUIT)}
        try:
            return _wait(pid)
        finally:
            for s, h in old.items():
                signal.signal(s, h)
    finally:
        try:
            os.rmdir(session_dir)
        except OSError as e:
            log.warning("session directory %s left behind: %s", session_dir, e.strerror)
