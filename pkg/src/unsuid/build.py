"""Build images without privilege: run a setup script in the sandbox, then pack it.

The setup script runs in a container whose root is the sandbox directory
itself, bound writable, under the same identity selection a ``--fakeroot``
run would get. Packing happens inside a user namespace with the same
mapping so the image records the ids the script saw.
"""

import logging
import os
import stat
import subprocess
import sys
import tempfile
from dataclasses import dataclass

from .errors import HelperMissing, InvalidRequest, FormatFailed, PackagingFailed, SetupScriptFailed
from .hostprobe import HostProfile
from .imagefmt import ImageInfo, ImageKind, PartKind, PartRole, detect_image, write_cif
from .nsexec import NamespaceSetup, check_runnable, container_env, enter_namespaces, exec_spec_for, run
from .planner import BindSpec, IdentityPlan, MountPlan, RuntimeRequest, plan, select_identity

log = logging.getLogger(__name__)

MIN_OVERLAY_SIZE = 1 << 20
SETUP_SCRIPT_PATH = "/.unsuid/setup"


@dataclass(frozen=True)
class BuildRequest:
    sandbox: str
    output: str
    output_kind: ImageKind = ImageKind.RAW_SQUASHFS
    setup_script: str | None = None
    overlay_size: int | None = None
    # host directories made visible to the setup script, e.g. /usr when the sandbox has no tools
    binds: tuple[BindSpec, ...] = ()

    def validate(self) -> None:
        if not os.path.isdir(self.sandbox):
            raise InvalidRequest(f"{self.sandbox} is not a directory")
        parent = os.path.dirname(os.path.abspath(self.output))
        if not os.access(parent, os.W_OK):
            raise InvalidRequest(f"cannot write to {parent}")
        if self.output_kind not in (ImageKind.RAW_SQUASHFS, ImageKind.CIF):
            raise InvalidRequest(f"cannot build {self.output_kind.value} images")
        if self.overlay_size is not None and self.output_kind != ImageKind.CIF:
            raise InvalidRequest("an overlay partition needs CIF output")
        if self.setup_script and not os.path.isfile(self.setup_script):
            raise InvalidRequest(f"setup script {self.setup_script} not found")


def output_kind_for(path: str) -> ImageKind:
    return ImageKind.CIF if path.endswith((".cif", ".sif")) else ImageKind.RAW_SQUASHFS


def build_identity(profile: HostProfile, request: BuildRequest) -> IdentityPlan:
    """Builds always ask for root emulation, whether or not --fakeroot was given."""
    return select_identity(profile, RuntimeRequest(image=request.sandbox, build_mode=True))


def setup_plan(profile: HostProfile, request: BuildRequest) -> tuple[IdentityPlan, MountPlan]:
    """Plan for the container that runs the setup script."""
    binds = list(request.binds)
    if request.setup_script:
        binds.append(BindSpec(os.path.abspath(request.setup_script), SETUP_SCRIPT_PATH, True))
    rt = RuntimeRequest(
        image=request.sandbox,
        command=("/bin/sh", SETUP_SCRIPT_PATH),
        writable=True,
        binds=tuple(binds),
        build_mode=True,
    )
    return plan(profile, rt, detect_image(request.sandbox))


def mksquashfs_argv(helper: str, sandbox: str, payload: str, exclude=()) -> list[str]:
    argv = [helper, sandbox, payload, "-noappend", "-no-xattrs"]
    if exclude:
        argv += ["-e", *exclude]
    return argv


def device_nodes(sandbox: str) -> list[str]:
    """Paths (relative to ``sandbox``) of device nodes, which cannot be packed faithfully."""
    found = []
    for root, dirs, files in os.walk(sandbox):
        for name in files + dirs:
            p = os.path.join(root, name)
            mode = os.lstat(p).st_mode
            if stat.S_ISCHR(mode) or stat.S_ISBLK(mode):
                found.append(os.path.relpath(p, sandbox))
    return sorted(found)


def run_in_namespace(identity: IdentityPlan, helpers, argv: list[str]) -> tuple[int, str]:
    """Run ``argv`` inside a user namespace with ``identity``'s maps; returns (status, stderr)."""
    setup = NamespaceSetup.from_identity(identity)
    err = tempfile.TemporaryFile()
    sys.stdout.flush()
    pid = os.fork()
    if pid == 0:
        code = 2
        try:
            enter_namespaces(setup, helpers)
            code = subprocess.run(argv, stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL,
                                  stderr=err.fileno()).returncode
        except BaseException as e:  # noqa: BLE001
            os.write(err.fileno(), f"{e}\n".encode())
        finally:
            os._exit(code)
    _, status = os.waitpid(pid, 0)
    err.seek(0)
    text = err.read().decode(errors="replace")
    err.close()
    return os.waitstatus_to_exitcode(status), text


def _run_setup(profile: HostProfile, request: BuildRequest, env) -> None:
    identity, mounts = setup_plan(profile, request)
    for msg in identity.info_messages:
        print(f"INFO:    {msg}", file=sys.stderr)
    spec = exec_spec_for(identity, ("/bin/sh", SETUP_SCRIPT_PATH), container_env(env, home="/root"), "/")
    with tempfile.NamedTemporaryFile(prefix="unsuid-setup-", suffix=".err") as errfile:
        status = run(identity, mounts, spec, profile.helper_paths, stderr_path=errfile.name)
        errfile.seek(0)
        stderr = errfile.read().decode(errors="replace")
    sys.stderr.write(stderr)
    if status != 0:
        raise SetupScriptFailed(status, stderr)


def _reserve(directory: str, prefix: str) -> str:
    fd, path = tempfile.mkstemp(prefix=prefix, dir=directory)
    os.close(fd)
    return path


def build_image(request: BuildRequest, profile: HostProfile, env=None) -> ImageInfo:
    """Produce ``request.output`` from the sandbox. Nothing is left at the output path on failure."""
    env = os.environ if env is None else env
    request.validate()
    identity = build_identity(profile, request)
    check_runnable(identity)
    mksquashfs = profile.helper("mksquashfs")
    if not mksquashfs:
        raise HelperMissing("mksquashfs not found; install squashfs-tools or add it to UNSUID_HELPER_PATH")
    if request.setup_script:
        _run_setup(profile, request, env)

    outdir = os.path.dirname(os.path.abspath(request.output))
    temps = []
    try:
        payload = _reserve(outdir, ".unsuid-rootfs-")
        temps.append(payload)
        devices = device_nodes(request.sandbox)
        for d in devices:
            log.warning("skipping device node %s", d)
        status, err = run_in_namespace(
            identity, profile.helper_paths,
            mksquashfs_argv(mksquashfs, os.path.abspath(request.sandbox), payload, devices),
        )
        if status != 0:
            raise PackagingFailed(f"mksquashfs exited {status}: {err.strip()}")
        if request.output_kind == ImageKind.CIF:
            parts = [(PartKind.SQUASHFS, PartRole.ROOTFS, payload)]
            if request.overlay_size is not None:
                overlay = _reserve(outdir, ".unsuid-overlay-")
                temps.append(overlay)
                create_overlay_image(overlay, request.overlay_size, profile.helper_paths)
                parts.append((PartKind.EXTFS, PartRole.OVERLAY, overlay))
            write_cif(parts, request.output)
        else:
            os.chmod(payload, 0o644)
            os.replace(payload, request.output)
        return detect_image(request.output)
    finally:
        for t in temps:
            try:
                os.unlink(t)
            except FileNotFoundError:
                pass


def create_overlay_image(path: str, size: int, helpers) -> None:
    """Create a sparse ext3 file of ``size`` bytes for use as a writable overlay."""
    if size < MIN_OVERLAY_SIZE:
        raise InvalidRequest(f"overlay size {size} is below the 1 MiB minimum")
    mkfs = helpers.get("mkfs.ext3")
    if not mkfs:
        raise HelperMissing("mkfs.ext3 not found; install e2fsprogs or add it to UNSUID_HELPER_PATH")
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(prefix=".unsuid-ext-", dir=os.path.dirname(path))
    try:
        os.ftruncate(fd, size)
        os.close(fd)
        fd = -1
        res = subprocess.run([mkfs, "-F", "-q", tmp], stdin=subprocess.DEVNULL,
                             stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        if res.returncode != 0:
            raise FormatFailed(f"mkfs.ext3 exited {res.returncode}: {res.stdout.decode(errors='replace').strip()}")
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if fd >= 0:
            os.close(fd)
        os.unlink(tmp)
        raise
