"""Pack two payloads into a single-file image and read one back through a window.

The window is the same single-file FUSE mount the runtime uses to hand an
embedded ext partition to fuse2fs. Mounting it needs /dev/fuse, so run this
as root or inside ``unshare -rm``:

    unshare -rm python demos/single_file_image.py
"""

import os
import tempfile

from unsuid.imagefmt import PartKind, PartRole, detect_image, write_cif
from unsuid.windowfile import WindowSpec, serve_window

work = tempfile.mkdtemp(prefix="unsuid-demo-")
rootfs = os.path.join(work, "rootfs.bin")
overlay = os.path.join(work, "overlay.bin")
with open(rootfs, "wb") as f:
    f.write(b"hsqs" + b"root payload ".ljust(5000, b"."))
with open(overlay, "wb") as f:
    f.write(b"overlay payload\n" * 300)

image = os.path.join(work, "demo.cif")
write_cif([(PartKind.SQUASHFS, PartRole.ROOTFS, rootfs), (PartKind.EXTFS, PartRole.OVERLAY, overlay)], image)
info = detect_image(image)
print(f"{image}: {info.kind.value}, {os.path.getsize(image)} bytes")
for p in info.partitions:
    print(f"  {p.kind.name:8} {p.role.name:8} offset {p.offset:6}  size {p.size}")

part = info.partitions[1]
mnt = os.path.join(work, "mnt")
os.mkdir(mnt)
with serve_window(WindowSpec(image, part.offset, part.size, False, mnt)):
    with open(os.path.join(mnt, "part"), "rb") as f:
        head = f.read(16)
    print(f"window {mnt}/part is {os.path.getsize(os.path.join(mnt, 'part'))} bytes, starts {head!r}")
