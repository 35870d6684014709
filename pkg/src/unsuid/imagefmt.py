"""Image kind detection and the CIF single-file partitioned image format.

CIF layout, all integers little-endian::

    magic "CIFIMG01" | version u32 (=1) | descriptor_count u32
    descriptor_count * (kind u32, role u32, offset u64, size u64)
    payloads at their offsets, 4096-aligned, zero-filled in between
"""

import enum
import os
import shutil
import stat
import struct
import tempfile
from dataclasses import dataclass, field

from .errors import (
    BadMagic,
    BadVersion,
    DescriptorOutOfBounds,
    DuplicateRootfs,
    EmptyPartitionList,
    ImageFormatError,
    MisalignedPartition,
    OverlappingPartitions,
    Truncated,
    UnknownFormat,
)

CIF_MAGIC = b"CIFIMG01"
CIF_VERSION = 1
ALIGNMENT = 4096

_HEADER = struct.Struct("<8sII")
_DESCRIPTOR = struct.Struct("<IIQQ")

SQUASHFS_MAGIC = b"hsqs"
EXT_MAGIC_OFFSET = 1024 + 56
EXT_MAGIC = struct.pack("<H", 0xEF53)


class ImageKind(str, enum.Enum):
    RAW_SQUASHFS = "RawSquashfs"
    RAW_EXTFS = "RawExtfs"
    CIF = "Cif"
    # a plain directory tree; used for builds and sandbox runs
    SANDBOX = "Sandbox"


class PartKind(enum.IntEnum):
    SQUASHFS = 1
    EXTFS = 2


class PartRole(enum.IntEnum):
    ROOTFS = 1
    OVERLAY = 2


@dataclass(frozen=True)
class PartitionDescriptor:
    kind: PartKind
    role: PartRole
    offset: int
    size: int

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ImageInfo:
    path: str
    kind: ImageKind
    partitions: tuple[PartitionDescriptor, ...] = field(default_factory=tuple)
    file_length: int = 0

    @property
    def rootfs(self) -> PartitionDescriptor | None:
        for p in self.partitions:
            if p.role == PartRole.ROOTFS:
                return p
        return None

    @property
    def overlays(self) -> list[PartitionDescriptor]:
        return [p for p in self.partitions if p.role == PartRole.OVERLAY]


def round_up(n: int, alignment: int = ALIGNMENT) -> int:
    return -(-n // alignment) * alignment


def detect_image(path: str) -> ImageInfo:
    """Classify ``path`` by magic bytes, CIF first, then squashfs, then ext."""
    st = os.stat(path)
    if stat.S_ISDIR(st.st_mode):
        return ImageInfo(os.path.abspath(path), ImageKind.SANDBOX)

    with open(path, "rb") as f:
        head = f.read(8)
        if head == CIF_MAGIC:
            return parse_cif(path)
        length = os.fstat(f.fileno()).st_size
        if head[:4] == SQUASHFS_MAGIC:
            kind, pkind = ImageKind.RAW_SQUASHFS, PartKind.SQUASHFS
        elif os.pread(f.fileno(), 2, EXT_MAGIC_OFFSET) == EXT_MAGIC:
            kind, pkind = ImageKind.RAW_EXTFS, PartKind.EXTFS
        else:
            raise UnknownFormat(f"{path}: not a CIF, squashfs or ext image")

    part = PartitionDescriptor(pkind, PartRole.ROOTFS, 0, length)
    return ImageInfo(os.path.abspath(path), kind, (part,), length)


def _check_partitions(parts: list[PartitionDescriptor], file_length: int, data_start: int) -> None:
    roots = [p for p in parts if p.role == PartRole.ROOTFS]
    if len(roots) > 1:
        raise DuplicateRootfs(f"{len(roots)} rootfs partitions")
    for p in parts:
        if p.size <= 0:
            raise ImageFormatError(f"partition at {p.offset} has size {p.size}")
        if p.offset % ALIGNMENT:
            raise MisalignedPartition(f"partition offset {p.offset} is not {ALIGNMENT}-aligned")
        if p.end > file_length:
            raise DescriptorOutOfBounds(
                f"partition [{p.offset}, {p.end}) exceeds file length {file_length}"
            )
        if p.offset < data_start:
            raise OverlappingPartitions(f"partition at {p.offset} overlaps the descriptor table")
    ordered = sorted(parts, key=lambda p: p.offset)
    for a, b in zip(ordered, ordered[1:]):
        if b.offset < a.end:
            raise OverlappingPartitions(
                f"partitions [{a.offset}, {a.end}) and [{b.offset}, {b.end}) overlap"
            )


def parse_cif(path: str) -> ImageInfo:
    with open(path, "rb") as f:
        length = os.fstat(f.fileno()).st_size
        header = f.read(_HEADER.size)
        if len(header) < 8 or header[:8] != CIF_MAGIC:
            raise BadMagic(f"{path}: missing CIF magic")
        if len(header) < _HEADER.size:
            raise Truncated(f"{path}: header is cut short")
        _, version, count = _HEADER.unpack(header)
        if version != CIF_VERSION:
            raise BadVersion(f"{path}: unsupported CIF version {version}")
        table_end = _HEADER.size + count * _DESCRIPTOR.size
        if table_end > length:
            raise Truncated(f"{path}: header claims {count} descriptors beyond end of file")
        table = f.read(count * _DESCRIPTOR.size)

    parts = []
    for kind, role, offset, size in _DESCRIPTOR.iter_unpack(table):
        try:
            parts.append(PartitionDescriptor(PartKind(kind), PartRole(role), offset, size))
        except ValueError as e:
            raise ImageFormatError(f"{path}: bad descriptor ({e})") from None
    _check_partitions(parts, length, table_end)
    return ImageInfo(os.path.abspath(path), ImageKind.CIF, tuple(parts), length)


def write_cif(partitions, out: str) -> ImageInfo:
    """Write a CIF file from ``(kind, role, payload_path)`` triples.

    Payloads are copied verbatim in argument order at 4096-aligned offsets.
    The file appears atomically; nothing is left behind on failure.
    """
    partitions = [(PartKind(k), PartRole(r), p) for k, r, p in partitions]
    if not partitions:
        raise EmptyPartitionList("a CIF image needs at least one partition")
    roots = sum(1 for _, r, _ in partitions if r == PartRole.ROOTFS)
    if roots > 1:
        raise DuplicateRootfs(f"exactly one rootfs partition required, got {roots}")
    if roots == 0:
        raise ImageFormatError("no rootfs partition given")

    offset = round_up(_HEADER.size + len(partitions) * _DESCRIPTOR.size)
    descs = []
    for kind, role, payload in partitions:
        size = os.path.getsize(payload)
        if size == 0:
            raise ImageFormatError(f"{payload}: empty payload")
        descs.append(PartitionDescriptor(kind, role, offset, size))
        offset = round_up(offset + size)

    out = os.path.abspath(out)
    fd, tmp = tempfile.mkstemp(prefix=".cif-", dir=os.path.dirname(out))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(CIF_MAGIC, CIF_VERSION, len(descs)))
            for d in descs:
                f.write(_DESCRIPTOR.pack(d.kind, d.role, d.offset, d.size))
            for d, (_, _, payload) in zip(descs, partitions):
                f.seek(d.offset)
                with open(payload, "rb") as src:
                    shutil.copyfileobj(src, f, 1 << 20)
            f.truncate(descs[-1].end)
        os.chmod(tmp, 0o644)
        os.replace(tmp, out)
    except BaseException:
        os.unlink(tmp)
        raise
    return ImageInfo(out, ImageKind.CIF, tuple(descs), descs[-1].end)


def extract_partition(image: str, part: PartitionDescriptor, out: str) -> None:
    """Copy bytes ``[offset, offset+size)`` of ``image`` into ``out``."""
    with open(image, "rb") as src, open(out, "wb") as dst:
        src.seek(part.offset)
        remaining = part.size
        while remaining:
            chunk = src.read(min(remaining, 1 << 20))
            if not chunk:
                raise Truncated(f"{image}: partition runs past end of file")
            dst.write(chunk)
            remaining -= len(chunk)
