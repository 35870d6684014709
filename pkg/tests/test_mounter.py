import os
import random
import subprocess

import pytest

from conftest import in_child, needs_fuse, needs_helper, needs_userns, walk_tree
from underlay_cases import make_case, run_case
from unsuid import libc
from unsuid.errors import (
    BindDestinationConflict,
    DestinationInsideFile,
    HelperFailed,
    HelperMissing,
    MountTimeout,
    OverlayRejectedByKernel,
)
from unsuid.hostprobe import _become_root_mapped
from unsuid.imagefmt import PartitionDescriptor, PartKind, PartRole
from unsuid.mounter import (
    MountSession,
    UnderlayAction,
    compose_underlay,
    fuse2fs_argv,
    fuse_overlayfs_argv,
    mount_overlay,
    mount_squash_partition,
    mounts_under,
    prepare_fakeroot_support,
    spawn_helper,
    squashfuse_argv,
)
from unsuid.planner import StrategyKind
from unsuid.windowfile import is_mounted


def private_root_ns():
    _become_root_mapped(os.getuid(), os.getgid(), libc.CLONE_NEWNS)
    libc.mount(None, "/", None, libc.MS_REC | libc.MS_PRIVATE)


def test_no_shadowing():
    actions = compose_underlay({"bin": {}, "etc": {}, "usr": {}}, [("/host/data", "/data", True)], (),
                               is_dir=lambda p: True)
    assert actions == [
        UnderlayAction("BindFromImage", "bin", "bin"),
        UnderlayAction("MakeDir", None, "data"),
        UnderlayAction("BindFromHost", "/host/data", "data"),
        UnderlayAction("BindFromImage", "etc", "etc"),
        UnderlayAction("BindFromImage", "usr", "usr"),
    ]


def test_descend_only_along_destination():
    image = {"bin": {"sh": b""}, "etc": {"hosts": b"1", "passwd": b"2", "ssl": {"certs": {}}}}
    actions = compose_underlay(image, [("/h/hosts", "/etc/hosts", False)], (), is_dir=lambda p: False)
    assert actions == [
        UnderlayAction("BindFromImage", "bin", "bin"),
        UnderlayAction("MakeDir", None, "etc"),
        UnderlayAction("MakeFile", None, "etc/hosts"),
        UnderlayAction("BindFromHost", "/h/hosts", "etc/hosts"),
        UnderlayAction("BindFromImage", "etc/passwd", "etc/passwd"),
        UnderlayAction("BindFromImage", "etc/ssl", "etc/ssl"),
    ]


def test_destination_inside_file():
    with pytest.raises(DestinationInsideFile):
        compose_underlay({"bin": b"not a dir"}, [("/h", "/bin/sh", False)], ())
    with pytest.raises(DestinationInsideFile):
        compose_underlay({"bin": "usr/bin"}, [("/h", "/bin/sh", False)], ())


def test_duplicate_destinations():
    with pytest.raises(BindDestinationConflict):
        compose_underlay({}, [("/a", "/x", False), ("/b", "/x/", False)], ())
    with pytest.raises(BindDestinationConflict):
        compose_underlay({}, [("/a", "/tmp", False)], ["/tmp"])


def test_standard_targets_are_directories():
    actions = compose_underlay({"proc": {}, "etc": {}}, [], ["/proc", "/dev"])
    assert actions == [
        UnderlayAction("MakeDir", None, "dev"),
        UnderlayAction("BindFromHost", "/dev", "dev"),
        UnderlayAction("BindFromImage", "etc", "etc"),
        UnderlayAction("MakeDir", None, "proc"),
        UnderlayAction("BindFromHost", "/proc", "proc"),
    ]


def test_nested_destination_follows_ancestor():
    actions = compose_underlay({}, [("/h1", "/opt", False), ("/h2", "/opt/sub", False)], (), is_dir=lambda p: True)
    assert actions[-1] == UnderlayAction("BindFromHost", "/h2", "opt/sub")
    assert [a.destination for a in actions].count("opt/sub") == 1


def _assert_action_invariants(actions):
    made = set()
    dests = [a.destination for a in actions if a.kind != "BindFromHost"]
    assert len(dests) == len(set(dests))
    for a in actions:
        if a.kind in ("MakeDir", "MakeFile"):
            made.add(a.destination)
        elif a.kind == "BindFromHost":
            parent = os.path.dirname(a.destination)
            assert not parent or parent in made or any(parent.startswith(m + "/") for m in made)


def test_action_invariants_random():
    rng = random.Random(3)
    for _ in range(300):
        tree, binds = make_case(rng)
        try:
            actions = compose_underlay(tree, [(f"/h{i}", d, False) for i, (d, _) in enumerate(binds)], (),
                                       is_dir=lambda p: True)
        except DestinationInsideFile:
            continue
        _assert_action_invariants(actions)


@needs_userns
def test_underlay_matches_union_oracle(tmp_path):
    rng = random.Random(11)
    cases = [make_case(rng) for _ in range(60)]

    def body():
        problems = []
        for i, (tree, binds) in enumerate(cases):
            work = tmp_path / f"c{i}"
            work.mkdir()
            problem = run_case(tree, binds, str(work))
            if problem:
                problems.append(f"case {i}: {problem}")
        assert not problems, "\n".join(problems[:5])

    in_child(lambda: (private_root_ns(), body()))


@needs_userns
def test_kernel_overlay_semantics(tmp_path):
    for d in ("l1", "l2", "upper", "work", "merged"):
        (tmp_path / d).mkdir()
    (tmp_path / "l1" / "f").write_text("1")
    (tmp_path / "l2" / "f").write_text("2")
    (tmp_path / "l1" / "only1").write_text("x")

    def body():
        private_root_ns()
        merged = str(tmp_path / "merged")
        assert mount_overlay(StrategyKind.KERNEL_OVERLAY, [str(tmp_path / "l2"), str(tmp_path / "l1")],
                             str(tmp_path / "upper"), str(tmp_path / "work"), merged) is None
        view = walk_tree(merged)
        # uppermost lower wins, other entries fall through
        assert view == {"f": ("file", b"2"), "only1": ("file", b"x")}
        with open(os.path.join(merged, "f"), "w") as f:
            f.write("3")
        assert (tmp_path / "upper" / "f").read_text() == "3"
        assert (tmp_path / "l2" / "f").read_text() == "2"

    in_child(body)


@needs_userns
def test_kernel_overlay_rejected(tmp_path):
    def body():
        private_root_ns()
        with pytest.raises(OverlayRejectedByKernel) as exc:
            mount_overlay(StrategyKind.KERNEL_OVERLAY, [str(tmp_path / "nope")], str(tmp_path / "u"),
                          str(tmp_path / "w"), str(tmp_path))
        assert "probe" in str(exc.value)

    in_child(body)


def test_helper_argument_contract():
    assert squashfuse_argv("sqf", "/i.cif", 4096, "/t") == ["sqf", "-f", "-o", "offset=4096", "/i.cif", "/t"]
    assert fuse2fs_argv("f2", "/w/part", "/t", True)[:5] == ["f2", "/w/part", "/t", "-o", "fakeroot"]
    assert fuse2fs_argv("f2", "/w/part", "/t", False)[3:5] == ["-o", "ro"]
    assert fuse_overlayfs_argv("fo", ["/l1", "/l2"], "/u", "/w", "/t") == [
        "fo", "-f", "-o", "lowerdir=/l1:/l2,upperdir=/u,workdir=/w", "/t"]


def test_missing_helper():
    part = PartitionDescriptor(PartKind.SQUASHFS, PartRole.ROOTFS, 0, 10)
    with pytest.raises(HelperMissing):
        mount_squash_partition("/i", part, "/t", {"squashfuse": None})


def stub(tmp_path, name, body):
    p = tmp_path / name
    p.write_text("#!/bin/sh\n" + body)
    p.chmod(0o755)
    return str(p)


def test_helper_failure_captures_stderr(tmp_path):
    helper = stub(tmp_path, "squashfuse", "echo 'bad superblock' >&2\nexit 1\n")
    part = PartitionDescriptor(PartKind.SQUASHFS, PartRole.ROOTFS, 1 << 30, 10)
    with pytest.raises(HelperFailed) as exc:
        mount_squash_partition("/i", part, str(tmp_path), {"squashfuse": helper})
    assert exc.value.returncode == 1 and "bad superblock" in exc.value.stderr


def test_helper_timeout(tmp_path):
    helper = stub(tmp_path, "slow", "exec sleep 30\n")
    with pytest.raises(MountTimeout):
        spawn_helper("slow", [helper], str(tmp_path), timeout=0.3)


MOUNTING_STUB = 'echo "$@" > "$STUB_LOG"\nfor t; do :; done\nmount -t tmpfs stub "$t" || exit 9\nexec sleep 1000\n'


@needs_userns
def test_squash_step_with_stub_helper(tmp_path):
    log = tmp_path / "argv"
    helper = stub(tmp_path, "squashfuse", MOUNTING_STUB)
    target = tmp_path / "t"
    target.mkdir()

    def body():
        private_root_ns()
        os.environ["STUB_LOG"] = str(log)
        part = PartitionDescriptor(PartKind.SQUASHFS, PartRole.ROOTFS, 4096, 10)
        proc = mount_squash_partition("/img.cif", part, str(target), {"squashfuse": helper})
        assert proc.state == "serving" and is_mounted(str(target))
        assert log.read_text().split() == ["-f", "-o", "offset=4096", "/img.cif", str(target)]
        libc.umount2(str(target))
        proc.stop()
        assert proc.proc.returncode is not None

    in_child(body)


@needs_userns
def test_session_teardown(tmp_path):
    from unsuid.planner import BindEntry, MakeScratchRoot, MountPlan, MountStandard, PivotIntoRoot

    session_dir = tmp_path / "s"
    session_dir.mkdir()
    (tmp_path / "img").mkdir()
    (tmp_path / "img" / "etc").mkdir()
    (tmp_path / "data").mkdir()
    steps = (
        MakeScratchRoot("@session", "@session/root"),
        BindEntry(str(tmp_path / "img"), "@session/image/0", True, "image"),
        BindEntry("@session/image/0", "@session/root", True, "underlay"),
        BindEntry(str(tmp_path / "data"), "@session/root/data", False, "bind"),
        MountStandard("dev", "/dev", "@session/root/dev"),
        PivotIntoRoot("@session/root"),
    )

    def body():
        private_root_ns()
        before = open("/proc/self/mountinfo").read().count("\n")
        session = MountSession(str(session_dir))
        session.run(MountPlan(steps))
        root = session.root
        assert sorted(os.listdir(root)) == ["data", "dev", "etc"]
        assert os.statvfs(root).f_flag & os.ST_RDONLY
        # a busy mount is detached lazily and reported
        busy = os.open(os.path.join(root, "data"), os.O_RDONLY)
        problems = session.teardown()
        os.close(busy)
        assert session.teardown() == []
        assert mounts_under(str(session_dir)) == []
        after = open("/proc/self/mountinfo").read().count("\n")
        assert after == before
        assert problems == [] or all("busy" in p for p in problems)

    in_child(body)
    assert os.listdir(session_dir) == []
    assert sorted(os.listdir(tmp_path / "img")) == ["etc"]


def test_teardown_reaps_dead_helper(tmp_path):
    from unsuid.mounter import HelperProcess, _Record

    proc = subprocess.Popen(["true"])
    proc.wait()
    err = tmp_path / "err"
    err.write_text("")
    session = MountSession(str(tmp_path))
    session.records.append(_Record("helper", str(tmp_path / "nowhere"), HelperProcess("x", proc, "", str(err))))
    assert session.teardown() == []
    assert session.teardown() == []


def test_fakeroot_support_rewrites_paths(tmp_path):
    lib = tmp_path / "lib"
    lib.mkdir()
    (lib / "libfakeroot-sysv.so").write_bytes(b"")
    faked = tmp_path / "faked-sysv"
    faked.write_text("")
    script = tmp_path / "fakeroot"
    script.write_text(f"#!/bin/sh\nFAKED={faked}\nPATHS={lib}:/usr/lib64/libfakeroot\nLIB=libfakeroot-sysv.so\n")
    support = tmp_path / "support"
    support.mkdir()
    binds = prepare_fakeroot_support(str(script), str(support), "/.unsuid/fakeroot")
    assert binds == [(str(faked), "faked"), (str(lib), "lib")]
    text = (support / "fakeroot").read_text()
    assert "FAKED=/.unsuid/fakeroot/faked" in text and "PATHS=/.unsuid/fakeroot/lib" in text
    assert os.access(support / "fakeroot", os.X_OK)


@needs_fuse
@needs_helper("squashfuse", "mksquashfs", "unsquashfs")
def test_squashfuse_content_matches_extraction(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "hello").write_text("hello world\n")
    img = tmp_path / "i.sqfs"
    subprocess.run(["mksquashfs", str(src), str(img), "-noappend", "-no-xattrs", "-quiet"], check=True)
    subprocess.run(["unsquashfs", "-d", str(tmp_path / "x"), str(img)], check=True, capture_output=True)

    def body():
        private_root_ns()
        target = tmp_path / "m"
        target.mkdir()
        part = PartitionDescriptor(PartKind.SQUASHFS, PartRole.ROOTFS, 0, img.stat().st_size)
        proc = mount_squash_partition(str(img), part, str(target), {"squashfuse": shutil_which("squashfuse")})
        try:
            assert walk_tree(str(target)) == walk_tree(str(tmp_path / "x"))
        finally:
            libc.umount2(str(target), libc.MNT_DETACH)
            proc.stop()

    in_child(body)


def shutil_which(name):
    import shutil
    return shutil.which(name)
