"""A FUSE filesystem with exactly one file, ``part``, that is a byte window into a backing file.

fuse2fs cannot start at an offset into its device, so an ext partition
inside a CIF image is handed to it through this window instead. The
server talks the kernel FUSE protocol directly over ``/dev/fuse``; no
libfuse is needed.
"""

import errno
import logging
import os
import stat
import struct
import threading
from dataclasses import dataclass

from . import libc
from .errors import FuseUnavailable, MountFailed, SpecOutOfBounds

log = logging.getLogger(__name__)

EXPOSED_NAME = "part"


@dataclass(frozen=True)
class WindowSpec:
    backing: str
    offset: int
    size: int
    writable: bool
    mountpoint: str
    exposed_name: str = EXPOSED_NAME

    def validate(self) -> None:
        if self.offset < 0 or self.size <= 0:
            raise SpecOutOfBounds(f"bad window [{self.offset}, +{self.size})")
        length = os.path.getsize(self.backing)
        if self.offset + self.size > length:
            raise SpecOutOfBounds(
                f"window [{self.offset}, {self.offset + self.size}) exceeds {self.backing} ({length} bytes)"
            )


def translate_io(window_position: int, length: int, spec: WindowSpec) -> tuple[int, int]:
    """Map a window-relative request to ``(backing_position, clamped_length)``."""
    clamped = max(0, min(length, spec.size - window_position))
    return spec.offset + window_position, clamped


class Window:
    """Positional read/write access to the window; no shared seek state."""

    def __init__(self, spec: WindowSpec):
        spec.validate()
        self.spec = spec
        self.fd = os.open(spec.backing, (os.O_RDWR if spec.writable else os.O_RDONLY) | os.O_CLOEXEC)

    def read(self, position: int, length: int) -> bytes:
        if position < 0:
            raise OSError(errno.EINVAL, "negative position")
        backing_pos, n = translate_io(position, length, self.spec)
        if n == 0:
            return b""
        return os.pread(self.fd, n, backing_pos)

    def write(self, position: int, data: bytes) -> int:
        if not self.spec.writable:
            raise OSError(errno.EROFS, "window is read-only")
        if position < 0 or position + len(data) > self.spec.size:
            raise OSError(errno.EFBIG, "write would extend the window")
        backing_pos, _ = translate_io(position, len(data), self.spec)
        done = 0
        while done < len(data):
            done += os.pwrite(self.fd, data[done:], backing_pos + done)
        return done

    def fsync(self) -> None:
        os.fsync(self.fd)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


# kernel protocol

FUSE_KERNEL_VERSION = 7
FUSE_KERNEL_MINOR_VERSION = 31
FUSE_ROOT_ID = 1
PART_ID = 2

FUSE_LOOKUP = 1
FUSE_FORGET = 2
FUSE_GETATTR = 3
FUSE_SETATTR = 4
FUSE_OPEN = 14
FUSE_READ = 15
FUSE_WRITE = 16
FUSE_STATFS = 17
FUSE_RELEASE = 18
FUSE_FSYNC = 20
FUSE_FLUSH = 25
FUSE_INIT = 26
FUSE_OPENDIR = 27
FUSE_READDIR = 28
FUSE_RELEASEDIR = 29
FUSE_FSYNCDIR = 30
FUSE_ACCESS = 34
FUSE_INTERRUPT = 36
FUSE_DESTROY = 38
FUSE_BATCH_FORGET = 42
FUSE_FALLOCATE = 43

FUSE_ASYNC_READ = 1 << 0
FUSE_BIG_WRITES = 1 << 5
FOPEN_DIRECT_IO = 1 << 0
FATTR_SIZE = 1 << 3

MAX_WRITE = 128 * 1024
READ_BUFFER = MAX_WRITE + 64 * 1024

IN_HEADER = struct.Struct("<IIQQIIIHH")
OUT_HEADER = struct.Struct("<IiQ")
ATTR = struct.Struct("<QQQQQQIIIIIIIIII")
ATTR_OUT = struct.Struct("<QII")
ENTRY_OUT = struct.Struct("<QQQQII")
INIT_IN = struct.Struct("<IIII")
INIT_OUT = struct.Struct("<IIIIHHIIHHII24x")
OPEN_IN = struct.Struct("<II")
OPEN_OUT = struct.Struct("<QIi")
RW_IN = struct.Struct("<QQIIQII")
WRITE_OUT = struct.Struct("<II")
SETATTR_IN = struct.Struct("<IIQQQQQQIIIIIIII")
KSTATFS = struct.Struct("<QQQQQIIII24x")
DIRENT = struct.Struct("<QQII")

DT_DIR = 4
DT_REG = 8
NO_REPLY = (FUSE_FORGET, FUSE_BATCH_FORGET, FUSE_INTERRUPT)


class WindowServer:
    """Serve one :class:`Window` on a FUSE connection file descriptor."""

    def __init__(self, window: Window, fuse_fd: int):
        self.window = window
        self.fd = fuse_fd
        st = os.stat(window.spec.backing)
        self.mtime = int(st.st_mtime)
        self.uid, self.gid = os.geteuid(), os.getegid()
        self.initialized = threading.Event()
        self.requests = 0

    def _attr(self, nodeid: int) -> bytes:
        t = self.mtime
        if nodeid == FUSE_ROOT_ID:
            return ATTR.pack(FUSE_ROOT_ID, 0, 0, t, t, t, 0, 0, 0, stat.S_IFDIR | 0o755, 2,
                             self.uid, self.gid, 0, 4096, 0)
        size = self.window.spec.size
        mode = stat.S_IFREG | (0o644 if self.window.spec.writable else 0o444)
        return ATTR.pack(PART_ID, size, (size + 511) // 512, t, t, t, 0, 0, 0, mode, 1,
                         self.uid, self.gid, 0, 4096, 0)

    def _reply(self, unique: int, payload: bytes = b"", error: int = 0) -> None:
        if error:
            payload = b""
        try:
            os.write(self.fd, OUT_HEADER.pack(OUT_HEADER.size + len(payload), -error, unique) + payload)
        except OSError as e:
            # ENOENT: the request was interrupted and the kernel no longer waits for it
            if e.errno != errno.ENOENT:
                raise

    def handle(self, opcode: int, nodeid: int, body: bytes) -> bytes:
        """Return the reply payload for one request; raise OSError for an error reply."""
        if opcode == FUSE_INIT:
            major, minor, readahead, flags = INIT_IN.unpack_from(body)
            if major != FUSE_KERNEL_VERSION:
                raise OSError(errno.EPROTO, "unsupported FUSE major version")
            self.initialized.set()
            return INIT_OUT.pack(FUSE_KERNEL_VERSION, min(minor, FUSE_KERNEL_MINOR_VERSION), readahead,
                                 flags & (FUSE_ASYNC_READ | FUSE_BIG_WRITES), 16, 12, MAX_WRITE, 1, 0, 0, 0, 0)
        if opcode == FUSE_LOOKUP:
            name = body.split(b"\0", 1)[0]
            if nodeid != FUSE_ROOT_ID or name != self.window.spec.exposed_name.encode():
                raise OSError(errno.ENOENT, "no such entry")
            return ENTRY_OUT.pack(PART_ID, 0, 1, 1, 0, 0) + self._attr(PART_ID)
        if opcode == FUSE_GETATTR:
            return ATTR_OUT.pack(1, 0, 0) + self._attr(nodeid)
        if opcode == FUSE_SETATTR:
            valid = SETATTR_IN.unpack_from(body)[0]
            new_size = SETATTR_IN.unpack_from(body)[3]
            if valid & FATTR_SIZE and (nodeid != PART_ID or new_size != self.window.spec.size):
                raise OSError(errno.EPERM, "the window cannot be resized")
            return ATTR_OUT.pack(1, 0, 0) + self._attr(nodeid)
        if opcode in (FUSE_OPEN, FUSE_OPENDIR):
            flags = OPEN_IN.unpack_from(body)[0]
            if opcode == FUSE_OPEN and flags & os.O_ACCMODE != os.O_RDONLY and not self.window.spec.writable:
                raise OSError(errno.EROFS, "read-only window")
            return OPEN_OUT.pack(0, FOPEN_DIRECT_IO if opcode == FUSE_OPEN else 0, 0)
        if opcode == FUSE_READ:
            _, offset, size, *_ = RW_IN.unpack_from(body)
            return self.window.read(offset, size)
        if opcode == FUSE_WRITE:
            _, offset, size, *_ = RW_IN.unpack_from(body)
            data = body[RW_IN.size:RW_IN.size + size]
            return WRITE_OUT.pack(self.window.write(offset, data), 0)
        if opcode == FUSE_READDIR:
            _, offset, size, *_ = RW_IN.unpack_from(body)
            entries = [(FUSE_ROOT_ID, b".", DT_DIR), (FUSE_ROOT_ID, b"..", DT_DIR),
                       (PART_ID, self.window.spec.exposed_name.encode(), DT_REG)]
            out = b""
            for index, (ino, name, dtype) in enumerate(entries, 1):
                if index <= offset:
                    continue
                rec = DIRENT.pack(ino, index, len(name), dtype) + name
                rec += b"\0" * (-len(rec) % 8)
                if len(out) + len(rec) > size:
                    break
                out += rec
            return out
        if opcode == FUSE_STATFS:
            blocks = (self.window.spec.size + 4095) // 4096
            return KSTATFS.pack(blocks, 0, 0, 2, 0, 4096, 255, 4096, 0)
        if opcode in (FUSE_FSYNC, FUSE_FSYNCDIR):
            if self.window.spec.writable:
                self.window.fsync()
            return b""
        if opcode in (FUSE_RELEASE, FUSE_RELEASEDIR, FUSE_FLUSH, FUSE_ACCESS, FUSE_DESTROY):
            return b""
        if opcode == FUSE_FALLOCATE:
            raise OSError(errno.EOPNOTSUPP, "fallocate")
        raise OSError(errno.ENOSYS, "not implemented")

    def serve(self) -> None:
        while True:
            try:
                msg = os.read(self.fd, READ_BUFFER)
            except OSError as e:
                if e.errno in (errno.EINTR, errno.EAGAIN, errno.ENOENT):
                    continue
                if e.errno == errno.ENODEV:  # unmounted
                    return
                raise
            if not msg:
                return
            _, opcode, unique, nodeid, *_ = IN_HEADER.unpack_from(msg)
            body = msg[IN_HEADER.size:]
            self.requests += 1
            if opcode in NO_REPLY:
                continue
            try:
                payload = self.handle(opcode, nodeid, body)
            except OSError as e:
                self._reply(unique, error=e.errno or errno.EIO)
            else:
                self._reply(unique, payload)
            if opcode == FUSE_DESTROY:
                return


def is_mounted(path: str) -> bool:
    path = os.path.realpath(path)
    with open("/proc/self/mountinfo") as f:
        for line in f:
            if _unescape(line.split()[4]) == path:
                return True
    return False


def _unescape(field: str) -> str:
    # mountinfo escapes space, tab, newline and backslash as octal
    if "\\" not in field:
        return field
    return field.encode().decode("unicode_escape").encode("latin-1").decode(errors="surrogateescape")


class WindowHandle:
    """A mounted window. ``shutdown`` may be called from any thread, more than once."""

    def __init__(self, spec: WindowSpec, window: Window, fuse_fd: int, thread: threading.Thread,
                 server: WindowServer):
        self.spec = spec
        self.window = window
        self.fuse_fd = fuse_fd
        self.thread = thread
        self.server = server
        self.path = os.path.join(spec.mountpoint, spec.exposed_name)
        self._lock = threading.Lock()
        self._closed = False
        self.diagnostics: list[str] = []

    def shutdown(self, timeout: float = 10.0) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        try:
            libc.umount2(self.spec.mountpoint)
        except OSError as e:
            if e.errno == errno.EBUSY:
                self.diagnostics.append(f"{self.spec.mountpoint} busy, detached lazily")
                libc.umount2(self.spec.mountpoint, libc.MNT_DETACH)
            elif e.errno != errno.EINVAL:  # EINVAL: already unmounted
                raise
        self.thread.join(timeout)
        if self.thread.is_alive():
            self.diagnostics.append(f"window server for {self.spec.mountpoint} still running")
        else:
            os.close(self.fuse_fd)
        self.window.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve_window(spec: WindowSpec, fuse_device: str = "/dev/fuse") -> WindowHandle:
    """Mount ``spec.mountpoint`` and serve the window from a background thread."""
    spec.validate()
    if not os.path.isdir(spec.mountpoint) or os.listdir(spec.mountpoint):
        raise MountFailed(f"{spec.mountpoint} is not an empty directory")
    try:
        fuse_fd = os.open(fuse_device, os.O_RDWR | os.O_CLOEXEC)
    except OSError as e:
        raise FuseUnavailable(f"{fuse_device}: {e.strerror}") from e

    window = Window(spec)
    opts = f"fd={fuse_fd},rootmode=40000,user_id={os.geteuid()},group_id={os.getegid()},default_permissions"
    flags = libc.MS_NOSUID | libc.MS_NODEV
    if not spec.writable:
        flags |= libc.MS_RDONLY
    try:
        libc.mount("unsuid-window", spec.mountpoint, "fuse.unsuid-window", flags, opts)
    except OSError as e:
        os.close(fuse_fd)
        window.close()
        raise MountFailed(f"mounting window at {spec.mountpoint}: {e.strerror}") from e

    server = WindowServer(window, fuse_fd)
    thread = threading.Thread(target=server.serve, name=f"window:{spec.mountpoint}", daemon=True)
    thread.start()
    handle = WindowHandle(spec, window, fuse_fd, thread, server)
    # the kernel sends INIT right after mount; waiting keeps first access from racing it
    if not server.initialized.wait(10):
        handle.shutdown()
        raise MountFailed(f"window at {spec.mountpoint} never completed FUSE INIT")
    log.debug("window %s[%d:+%d] served at %s", spec.backing, spec.offset, spec.size, spec.mountpoint)
    return handle

