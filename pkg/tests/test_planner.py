import itertools
import json

import pytest
from hypothesis import given, strategies as st

from conftest import fake_ext, fake_squashfs, make_profile
from unsuid.errors import (
    BindDestinationConflict,
    InvalidRequest,
    NoRootEmulationAvailable,
    WritableButNoOverlayBackend,
)
from unsuid.imagefmt import ImageKind, detect_image
from unsuid.planner import (
    FAKEROOT_INFO,
    MODE_PRIORITY,
    ROOT,
    ROOT_MAPPED_INFO,
    BindEntry,
    BindSpec,
    IdentityMode,
    MakeScratchRoot,
    MountExtPartition,
    MountFuseOverlay,
    MountKernelOverlay,
    MountSquashPartition,
    MountStandard,
    PivotIntoRoot,
    RuntimeRequest,
    ServeWindowFile,
    StrategyKind,
    load_plan,
    plan,
    render_plan,
    select_identity,
    select_root_strategy,
)

FLAGS = ("userns", "subid", "newid", "fakeroot", "setuid", "nested", "overlay")


def profile_from(flags: dict):
    helpers = {}
    if flags["newid"]:
        helpers.update(newuidmap="/usr/bin/newuidmap", newgidmap="/usr/bin/newgidmap")
    if flags["fakeroot"]:
        helpers["fakeroot"] = "/usr/bin/fakeroot"
    ranges = [(100000, 65536)] if flags["subid"] else []
    return make_profile(
        userns_available=flags["userns"],
        subid_mapped=flags["subid"],
        subuid_ranges=ranges,
        subgid_ranges=ranges,
        helper_paths=helpers,
        setuid_installed=flags["setuid"],
        already_root_mapped=flags["nested"],
        unpriv_overlayfs=flags["overlay"],
    )


ALL_FLAGS = [dict(zip(FLAGS, bits)) for bits in itertools.product([False, True], repeat=len(FLAGS))]


def expected_mode(f):
    """Independent restatement of the fakeroot decision table."""
    if f["subid"] and (f["newid"] or f["setuid"]):
        return IdentityMode.SUBID_MAPPED
    if f["userns"]:
        if f["fakeroot"] and not f["nested"]:
            return IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT
        return IdentityMode.ROOT_MAPPED_NS
    if f["setuid"] and f["fakeroot"] and not f["nested"]:
        return IdentityMode.FAKEROOT_CMD_ONLY
    return None


def mode_or_none(profile, request):
    try:
        return select_identity(profile, request).mode
    except NoRootEmulationAvailable:
        return None


FAKEROOT_REQ = RuntimeRequest(image="x", fakeroot_requested=True)
BUILD_REQ = RuntimeRequest(image="x", build_mode=True)
PLAIN_REQ = RuntimeRequest(image="x")


@pytest.mark.parametrize("flags", ALL_FLAGS, ids=lambda f: "-".join(k for k, v in f.items() if v) or "none")
def test_decision_table(flags):
    profile = profile_from(flags)
    for req in (FAKEROOT_REQ, BUILD_REQ):
        assert mode_or_none(profile, req) == expected_mode(flags)
    assert select_identity(profile, PLAIN_REQ).mode == IdentityMode.PLAIN_USER


def test_subid_wins_over_everything():
    p = profile_from(dict.fromkeys(FLAGS, True))
    ident = select_identity(p, FAKEROOT_REQ)
    assert ident.mode == IdentityMode.SUBID_MAPPED
    assert ident.uid_map == ((0, 1000, 1), (1, 100000, 65536))
    assert ident.fakeroot_cmd is None
    # nested: strict order kept, but flagged
    assert ident.warnings


def test_root_mapped_has_info_message():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), userns=True))
    ident = select_identity(p, FAKEROOT_REQ)
    assert ident.mode == IdentityMode.ROOT_MAPPED_NS
    assert ident.uid_map == ((0, 1000, 1),) and ident.gid_map == ((0, 1000, 1),)
    assert ident.info_messages == (ROOT_MAPPED_INFO,)


def test_fakeroot_skipped_when_nested():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), userns=True, fakeroot=True, nested=True))
    assert select_identity(p, FAKEROOT_REQ).mode == IdentityMode.ROOT_MAPPED_NS


def test_fakeroot_plus_userns():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), userns=True, fakeroot=True))
    ident = select_identity(p, FAKEROOT_REQ)
    assert ident.mode == IdentityMode.ROOT_MAPPED_NS_PLUS_FAKEROOT
    assert ident.fakeroot_cmd == "/usr/bin/fakeroot"
    assert ident.info_messages == (FAKEROOT_INFO,)


def test_fakeroot_only_needs_setuid():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), setuid=True, fakeroot=True))
    ident = select_identity(p, FAKEROOT_REQ)
    assert ident.mode == IdentityMode.FAKEROOT_CMD_ONLY and ident.requires_setuid_host


def test_nested_never_falls_back_to_fakeroot_alone():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), setuid=True, fakeroot=True, nested=True))
    with pytest.raises(NoRootEmulationAvailable) as exc:
        select_identity(p, FAKEROOT_REQ)
    assert any("root-mapped" in c for c in exc.value.failed_conditions)


def test_no_emulation_lists_conditions():
    p = profile_from(dict(dict.fromkeys(FLAGS, False), fakeroot=True))
    with pytest.raises(NoRootEmulationAvailable) as exc:
        select_identity(p, FAKEROOT_REQ)
    text = str(exc.value)
    assert "user namespaces" in text and "setuid" in text and "subuid" in text


def test_plain_user_identity_map():
    p = make_profile(userns_available=True)
    ident = select_identity(p, PLAIN_REQ)
    assert ident.uid_map == ((1000, 1000, 1),)


def _rank(mode):
    return len(MODE_PRIORITY) if mode is None else MODE_PRIORITY.index(mode)


@given(st.fixed_dictionaries({k: st.booleans() for k in FLAGS}), st.sampled_from(FLAGS))
def test_losing_a_capability_never_promotes(flags, drop):
    # "nested" is a restriction rather than a capability, so losing capability means setting it
    weaker = dict(flags)
    weaker[drop] = drop == "nested"
    before = mode_or_none(profile_from(flags), FAKEROOT_REQ)
    after = mode_or_none(profile_from(weaker), FAKEROOT_REQ)
    assert _rank(after) >= _rank(before)


# root strategy and plans


@pytest.fixture
def sqfs(tmp_path):
    return detect_image(fake_squashfs(tmp_path / "img.sqfs"))


@pytest.fixture
def sandbox(tmp_path):
    d = tmp_path / "sbx"
    d.mkdir()
    return detect_image(str(d))


def test_read_only_with_binds_is_underlay(sqfs):
    req = RuntimeRequest(image=sqfs.path, binds=(BindSpec("/a", "/a"), BindSpec("/b", "/b")))
    assert select_root_strategy(make_profile(unpriv_overlayfs=True), req, sqfs).kind == StrategyKind.READ_ONLY_UNDERLAY


def test_writable_strategies(sqfs, tmp_path):
    req = RuntimeRequest(image=sqfs.path, writable=True, overlay_paths=(str(tmp_path / "ov"),))
    assert select_root_strategy(make_profile(unpriv_overlayfs=True), req, sqfs).kind == StrategyKind.KERNEL_OVERLAY
    fuse = make_profile(helper_paths={"fuse-overlayfs": "/usr/bin/fuse-overlayfs"})
    assert select_root_strategy(fuse, req, sqfs).kind == StrategyKind.FUSE_OVERLAY
    with pytest.raises(WritableButNoOverlayBackend):
        select_root_strategy(make_profile(), req, sqfs)


def test_overlay_layer_order(sqfs):
    req = RuntimeRequest(image=sqfs.path, writable=True, overlay_paths=("/o1", "/o2", "/o3"))
    s = select_root_strategy(make_profile(unpriv_overlayfs=True), req, sqfs)
    assert s.upper == "/o3/upper" and s.work == "/o3/work"
    assert s.lower == ("/o2/upper", "/o1/upper", "@session/image/0")


def test_writable_without_overlay_source_rejected(sqfs):
    with pytest.raises(InvalidRequest):
        plan(make_profile(unpriv_overlayfs=True), RuntimeRequest(image=sqfs.path, writable=True), sqfs)


def test_duplicate_bind_destination(sqfs):
    req = RuntimeRequest(image=sqfs.path, binds=(BindSpec("/a", "/d"), BindSpec("/b", "/d/")))
    with pytest.raises(BindDestinationConflict):
        plan(make_profile(), req, sqfs)


def test_raw_squashfs_read_only_plan(sqfs):
    req = RuntimeRequest(image=sqfs.path, binds=(BindSpec("/data", "/data"),))
    _, mounts = plan(make_profile(userns_available=True), req, sqfs)
    assert [type(s) for s in mounts.steps] == [
        MakeScratchRoot, MountSquashPartition, BindEntry, BindEntry,
        MountStandard, MountStandard, MountStandard, MountStandard, PivotIntoRoot,
    ]
    assert mounts.steps[1].offset == 0
    assert [s.role for s in mounts.steps[2:4]] == ["underlay", "bind"]
    assert [s.kind for s in mounts.steps[4:8]] == ["proc", "sys", "dev", "tmp"]


def test_cif_with_overlay_partition_plan(cif_image):
    image = detect_image(cif_image)
    req = RuntimeRequest(image=cif_image, writable=True, home="/home/u")
    _, mounts = plan(make_profile(unpriv_overlayfs=True), req, image)
    kinds = [type(s) for s in mounts.steps]
    assert kinds[:5] == [MakeScratchRoot, MountSquashPartition, ServeWindowFile, MountExtPartition, MountKernelOverlay]
    squash, window, ext, overlay = mounts.steps[1:5]
    assert squash.offset == 4096
    assert (window.offset, window.size, window.writable) == (image.overlays[0].offset, image.overlays[0].size, True)
    assert ext.source == window.mountpoint + "/part" and ext.writable
    assert overlay.upper == ext.target + "/upper" and overlay.lower == (squash.target,)
    assert mounts.steps[-2] == MountStandard("home", "/home/u", ROOT + "/home/u")


def test_bind_shadows_standard_mount(sqfs):
    req = RuntimeRequest(image=sqfs.path, binds=(BindSpec("/scratch", "/tmp"),))
    _, mounts = plan(make_profile(), req, sqfs)
    assert "tmp" not in [s.kind for s in mounts.steps if isinstance(s, MountStandard)]


def test_ext_overlay_file_uses_window(sqfs, tmp_path):
    ov = detect_image(fake_ext(tmp_path / "ov.img"))
    req = RuntimeRequest(image=sqfs.path, writable=True, overlay_paths=(ov.path,))
    _, mounts = plan(make_profile(unpriv_overlayfs=True), req, sqfs, [ov])
    window = next(s for s in mounts.steps if isinstance(s, ServeWindowFile))
    assert (window.backing, window.offset, window.size) == (ov.path, 0, ov.file_length)


def test_fakeroot_bind_only_with_plus_fakeroot(sqfs):
    p = profile_from(dict(dict.fromkeys(FLAGS, False), userns=True, fakeroot=True))
    _, mounts = plan(p, RuntimeRequest(image=sqfs.path, fakeroot_requested=True), sqfs)
    assert any(isinstance(s, BindEntry) and s.role == "fakeroot" for s in mounts.steps)


def test_writable_sandbox(sandbox):
    _, mounts = plan(make_profile(), RuntimeRequest(image=sandbox.path, writable=True), sandbox)
    assert mounts.strategy.kind == StrategyKind.WRITABLE_SANDBOX
    assert mounts.steps[1] == BindEntry(sandbox.path, ROOT, False, "rootfs")


def _step_order_ok(steps):
    names = [type(s) for s in steps]
    assert names[0] is MakeScratchRoot and names[-1] is PivotIntoRoot
    assert PivotIntoRoot not in names[:-1]
    for i, s in enumerate(steps):
        if isinstance(s, MountExtPartition):
            assert any(isinstance(w, ServeWindowFile) and s.source == w.mountpoint + "/part" for w in steps[:i])


@given(
    flags=st.fixed_dictionaries({k: st.booleans() for k in FLAGS}),
    writable=st.booleans(),
    tmpfs=st.booleans(),
    n_overlays=st.integers(0, 2),
    binds=st.lists(st.sampled_from(["/data", "/etc/hosts", "/opt/x/y", "/srv"]), unique=True, max_size=3),
    fakeroot=st.booleans(),
)
def test_plan_properties(cif_image, flags, writable, tmpfs, n_overlays, binds, fakeroot):
    image = detect_image(cif_image)
    profile = profile_from(flags)
    req = RuntimeRequest(
        image=cif_image, writable=writable, writable_tmpfs=tmpfs,
        overlay_paths=tuple(f"/ov{i}" for i in range(n_overlays)),
        binds=tuple(BindSpec("/host" + b, b) for b in binds), fakeroot_requested=fakeroot, home="/home/u",
    )
    try:
        identity, mounts = plan(profile, req, image)
    except (NoRootEmulationAvailable, WritableButNoOverlayBackend, InvalidRequest):
        return
    _step_order_ok(mounts.steps)
    text = render_plan(identity, mounts, "json")
    assert text == render_plan(*plan(profile, req, image), "json")
    assert "net" not in json.dumps([s for s in json.loads(text)["mounts"]]).lower().replace("image", "")
    if flags["nested"]:
        assert "fakeroot" not in text.replace("fakeroot_cmd", "")
    kinds = {type(s) for s in mounts.steps}
    if MountKernelOverlay in kinds:
        assert profile.unpriv_overlayfs
    if MountFuseOverlay in kinds:
        assert profile.helper("fuse-overlayfs")
    back_identity, back_mounts = load_plan(text)
    assert back_identity == identity and back_mounts.steps == mounts.steps


def test_human_render_mentions_info_once(sqfs):
    p = profile_from(dict(dict.fromkeys(FLAGS, False), userns=True))
    identity, mounts = plan(p, RuntimeRequest(image=sqfs.path, fakeroot_requested=True), sqfs)
    text = render_plan(identity, mounts)
    assert text.count(ROOT_MAPPED_INFO) == 1
    assert text.startswith("identity: RootMappedNs\n")


def test_bind_spec_parse():
    assert BindSpec.parse("/a") == BindSpec("/a", "/a", False)
    assert BindSpec.parse("/a:/b:ro") == BindSpec("/a", "/b", True)
    with pytest.raises(InvalidRequest):
        BindSpec.parse("/a:/b:rx")


def test_sandbox_image_kind(sandbox):
    assert sandbox.kind == ImageKind.SANDBOX


@pytest.mark.parametrize("home", ["/tmp", "/tmp/u", "/dev/shm/h"])
def test_home_inside_standard_mount_is_not_mounted_twice(sqfs, home):
    _, mounts = plan(make_profile(), RuntimeRequest(image=sqfs.path, home=home), sqfs)
    kinds = [s.kind for s in mounts.steps if isinstance(s, MountStandard)]
    assert kinds == ["proc", "sys", "dev", "tmp"]
