import json
import os
import shutil
import struct

import pytest

from unsuid.hostprobe import HostProfile, probe_fuse_device, probe_userns, run_in_child
from unsuid.imagefmt import PartKind, PartRole, write_cif


def _userns_ok() -> bool:
    ok, _ = probe_userns(os.getuid(), os.getgid())
    return ok


USERNS = _userns_ok()
FUSE = probe_fuse_device()[0]

needs_userns = pytest.mark.skipif(not USERNS, reason="unprivileged user namespaces unavailable")
needs_fuse = pytest.mark.skipif(not FUSE, reason="/dev/fuse not usable")


def needs_helper(*names):
    missing = [n for n in names if not shutil.which(n)]
    return pytest.mark.skipif(bool(missing), reason=f"missing helper(s): {', '.join(missing)}")


def make_profile(**kw) -> HostProfile:
    kw.setdefault("invoking_uid", 1000)
    kw.setdefault("invoking_gid", 1000)
    return HostProfile(**kw)


def write_profile(path, profile: HostProfile) -> str:
    path.write_text(json.dumps(profile.to_dict()))
    return str(path)


def fake_squashfs(path, size=8192):
    """A file that only needs to be classified as squashfs, never mounted."""
    with open(path, "wb") as f:
        f.write(b"hsqs" + b"\0" * (size - 4))
    return str(path)


def fake_ext(path, size=1 << 16):
    with open(path, "wb") as f:
        f.truncate(size)
        f.seek(1080)
        f.write(struct.pack("<H", 0xEF53))
    return str(path)


@pytest.fixture(scope="session")
def cif_image(tmp_path_factory):
    """A CIF with a squashfs rootfs and an ext overlay partition (payloads are stubs)."""
    tmp_path = tmp_path_factory.mktemp("cif")
    root = fake_squashfs(tmp_path / "root.sqfs")
    overlay = fake_ext(tmp_path / "overlay.ext")
    out = tmp_path / "image.cif"
    write_cif([(PartKind.SQUASHFS, PartRole.ROOTFS, root), (PartKind.EXTFS, PartRole.OVERLAY, overlay)], str(out))
    return str(out)


def in_child(func):
    """Run ``func`` in a forked child, re-raising its failure as an AssertionError here."""
    ok, err = run_in_child(func)
    assert ok, err


def walk_tree(root: str) -> dict:
    """Map of relative path to (type, content or link target) for a whole tree."""
    out = {}
    for dirpath, dirs, files in os.walk(root):
        for name in dirs + files:
            p = os.path.join(dirpath, name)
            rel = os.path.relpath(p, root)
            if os.path.islink(p):
                out[rel] = ("link", os.readlink(p))
            elif os.path.isdir(p):
                out[rel] = ("dir", None)
            else:
                with open(p, "rb") as f:
                    out[rel] = ("file", f.read())
        dirs[:] = [d for d in dirs if not os.path.islink(os.path.join(dirpath, d))]
    return out



def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            tag = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
            lines.append((props["criterion"], f"{tag}  criterion {props['criterion']} {props.get('elapsed', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: int(x[0].split(".")[0])):
            terminalreporter.write_line(line.rstrip())
