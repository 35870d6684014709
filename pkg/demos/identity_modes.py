"""How the runtime picks a way to emulate root on different hosts.

Walks a handful of synthetic host profiles through the planner and prints
which identity mode each one gets, or why none is possible.

    python demos/identity_modes.py
"""

from unsuid.errors import NoRootEmulationAvailable
from unsuid.hostprobe import HostProfile
from unsuid.planner import RuntimeRequest, select_identity

HOSTS = {
    "laptop with /etc/subuid and newuidmap": HostProfile(
        userns_available=True, subid_mapped=True,
        subuid_ranges=[(100000, 65536)], subgid_ranges=[(100000, 65536)],
        helper_paths={"newuidmap": "/usr/bin/newuidmap", "newgidmap": "/usr/bin/newgidmap"},
        invoking_uid=1000, invoking_gid=1000),
    "HPC node with user namespaces and fakeroot": HostProfile(
        userns_available=True, helper_paths={"fakeroot": "/usr/bin/fakeroot"},
        invoking_uid=1000, invoking_gid=1000),
    "the same node, under `unshare -r`": HostProfile(
        userns_available=True, already_root_mapped=True, helper_paths={"fakeroot": "/usr/bin/fakeroot"},
        invoking_uid=0, invoking_gid=0),
    "locked-down host, no namespaces": HostProfile(invoking_uid=1000, invoking_gid=1000),
}

request = RuntimeRequest(image="demo.sif", fakeroot_requested=True)

for name, profile in HOSTS.items():
    print(f"{name}:")
    try:
        ident = select_identity(profile, request)
    except NoRootEmulationAvailable as e:
        for cond in e.failed_conditions:
            print(f"    unavailable: {cond}")
        continue
    print(f"    mode     {ident.mode.value}")
    print(f"    uid map  {list(ident.uid_map)}")
    for msg in ident.info_messages:
        print(f"    info     {msg}")
