"""Command line front end: ``unsuid probe|plan|exec|build|overlay-create``."""

import argparse
import json
import logging
import os
import pwd
import re
import sys
from typing import Mapping, Sequence

from . import __version__
from .build import BuildRequest, build_identity, build_image, create_overlay_image, output_kind_for, setup_plan
from .errors import InvalidRequest, UnsuidError
from .hostprobe import HostProfile, describe, find_helpers, probe_host
from .imagefmt import ImageInfo, detect_image
from .nsexec import container_env, exec_spec_for, run
from .planner import BindSpec, IdentityPlan, MountPlan, RuntimeRequest, plan, render_plan, select_identity

log = logging.getLogger("unsuid")


class UsageError(InvalidRequest):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_SIZE = re.compile(r"^(\d+)([KMGT]i?B?)?$", re.I)


def parse_size(text: str) -> int:
    """Bytes from ``N`` or ``N`` with a K/M/G/T suffix (powers of 1024)."""
    m = _SIZE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    scale = {"": 0, "K": 1, "M": 2, "G": 3, "T": 4}[(m[2] or " ")[0].upper().strip()]
    return int(m[1]) << (10 * scale)


def _bind(text: str) -> BindSpec:
    return BindSpec.parse(text)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fakeroot", action="store_true", help="emulate root inside the container")
    p.add_argument("--writable", action="store_true", help="make the root writable through an overlay")
    p.add_argument("--writable-tmpfs", action="store_true", help="writable root with changes discarded on exit")
    p.add_argument("--overlay", action="append", default=[], metavar="PATH",
                   help="overlay directory or ext image; the last one is writable with --writable")
    p.add_argument("--bind", action="append", default=[], type=_bind, metavar="SRC[:DST[:ro]]")
    p.add_argument("--underlay", action="store_true", help="force the read-only underlay root")
    p.add_argument("--env", action="append", default=[], metavar="NAME",
                   help="pass a host environment variable through")
    p.add_argument("--cwd", help="working directory inside the container")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unsuid", description="Run and build containers without setuid helpers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("probe", help="report what this host supports")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("plan", help="show the identity and mount plan without running anything")
    p.add_argument("--image", required=True)
    p.add_argument("--profile", metavar="FILE", help="host profile JSON to plan against instead of probing")
    p.add_argument("--json", action="store_true")
    p.add_argument("--build", action="store_true", help="plan as a build would")
    _add_run_flags(p)

    p = sub.add_parser("exec", help="run a command in a container")
    _add_run_flags(p)
    p.add_argument("image")
    p.add_argument("command", nargs=argparse.REMAINDER)

    p = sub.add_parser("build", help="pack a sandbox directory into an image")
    p.add_argument("output")
    p.add_argument("sandbox")
    p.add_argument("--setup", metavar="SCRIPT", help="script run inside the sandbox before packing")
    p.add_argument("--bind", action="append", default=[], type=_bind, metavar="SRC[:DST[:ro]]",
                   help="bind for the setup script")
    p.add_argument("--overlay-size", type=parse_size, metavar="BYTES", help="add an ext overlay partition (CIF)")
    p.add_argument("--fakeroot", action="store_true", help="accepted for symmetry; builds always emulate root")
    p.add_argument("--dry-run", action="store_true", help="print the plan only")
    p.add_argument("--profile", metavar="FILE", help="host profile JSON (with --dry-run)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("overlay-create", help="create an ext3 overlay image")
    p.add_argument("path")
    p.add_argument("--size", type=parse_size, required=True, metavar="BYTES")
    return parser


def load_profile(path: str) -> HostProfile:
    try:
        with open(path) as f:
            return HostProfile.from_dict(json.load(f))
    except (OSError, ValueError, TypeError) as e:
        raise InvalidRequest(f"cannot use profile {path}: {e}") from e


def _home(env: Mapping[str, str]) -> str | None:
    if env.get("HOME"):
        return env["HOME"]
    try:
        return pwd.getpwuid(os.getuid()).pw_dir
    except KeyError:
        return None


def _request(args, env: Mapping[str, str], command: Sequence[str] = ()) -> RuntimeRequest:
    return RuntimeRequest(
        image=args.image,
        command=tuple(command),
        writable=args.writable,
        writable_tmpfs=args.writable_tmpfs,
        overlay_paths=tuple(os.path.abspath(p) for p in args.overlay),
        binds=tuple(BindSpec(os.path.abspath(b.source), b.destination, b.readonly) for b in args.bind),
        fakeroot_requested=args.fakeroot,
        build_mode=getattr(args, "build", False),
        env_passthrough=tuple(args.env),
        force_underlay=args.underlay,
        home=_home(env),
        cwd=args.cwd,
    )


def _detect(path: str) -> ImageInfo:
    try:
        return detect_image(path)
    except OSError as e:
        raise InvalidRequest(f"cannot read image {path}: {e.strerror}") from e


def _plan(profile: HostProfile, request: RuntimeRequest) -> tuple[IdentityPlan, MountPlan]:
    # identity first so missing root emulation is reported before any image problem
    select_identity(profile, request)
    image = _detect(request.image)
    overlays = [_detect(p) for p in request.overlay_paths]
    return plan(profile, request, image, overlays)


def _announce(identity: IdentityPlan) -> None:
    for msg in identity.info_messages:
        print(f"INFO:    {msg}", file=sys.stderr)
    for msg in identity.warnings:
        print(f"WARNING: {msg}", file=sys.stderr)


def cmd_probe(args, env) -> int:
    profile = probe_host(env)
    if args.json:
        sys.stdout.write(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(describe(profile))
    return 0


def cmd_plan(args, env) -> int:
    profile = load_profile(args.profile) if args.profile else probe_host(env)
    identity, mounts = _plan(profile, _request(args, env))
    sys.stdout.write(render_plan(identity, mounts, "json" if args.json else "human"))
    return 0


def cmd_exec(args, env) -> int:
    command = args.command[1:] if args.command[:1] == ["--"] else args.command
    if not command:
        raise UsageError("exec: no command given")
    request = _request(args, env, command)
    profile = probe_host(env)
    identity, mounts = _plan(profile, request)
    _announce(identity)
    log.debug("plan:\n%s", render_plan(identity, mounts))
    cwd = request.cwd or os.getcwd()
    spec = exec_spec_for(identity, command, container_env(env, request.env_passthrough, request.home), cwd)
    sys.stderr.flush()
    return run(identity, mounts, spec, profile.helper_paths)


def cmd_build(args, env) -> int:
    request = BuildRequest(
        sandbox=args.sandbox,
        output=args.output,
        output_kind=output_kind_for(args.output),
        setup_script=args.setup,
        overlay_size=args.overlay_size,
        binds=tuple(BindSpec(os.path.abspath(b.source), b.destination, b.readonly) for b in args.bind),
    )
    if args.profile and not args.dry_run:
        raise UsageError("build: --profile is only meaningful with --dry-run")
    if args.dry_run:
        profile = load_profile(args.profile) if args.profile else probe_host(env)
        request.validate()
        if request.setup_script:
            identity, mounts = setup_plan(profile, request)
        else:
            identity, mounts = build_identity(profile, request), MountPlan()
        sys.stdout.write(render_plan(identity, mounts, "json" if args.json else "human"))
        return 0
    info = build_image(request, probe_host(env), env)
    print(f"{info.path}: {info.kind.value}, {len(info.partitions)} partition(s)")
    return 0


def cmd_overlay_create(args, env) -> int:
    create_overlay_image(args.path, args.size, find_helpers(env))
    return 0


COMMANDS = {
    "probe": cmd_probe,
    "plan": cmd_plan,
    "exec": cmd_exec,
    "build": cmd_build,
    "overlay-create": cmd_overlay_create,
}


def run_cli(argv: Sequence[str] | None = None, environment: Mapping[str, str] | None = None) -> int:
    """Run one invocation and return its exit code.

    0 success, 1 planning or validation error, 2 mount or namespace
    failure, 127 command not found in the container, otherwise the
    container's own status.
    """
    env = dict(os.environ if environment is None else environment)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"unsuid: error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:  # --help and --version
        return e.code or 0
    if args.verbose and not logging.getLogger().handlers:
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                            format="%(levelname)s: %(name)s: %(message)s")
    if args.verbose:
        log.setLevel(logging.DEBUG if args.verbose > 1 else logging.INFO)
    try:
        return COMMANDS[args.subcommand](args, env)
    except UnsuidError as e:
        print(f"unsuid: error: {e}", file=sys.stderr)
        return e.exit_code


def main() -> None:
    sys.exit(run_cli())
