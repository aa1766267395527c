"""Command line entry point: ``hetee-sim``."""

from __future__ import annotations

import argparse
import logging
import random
import sys
from pathlib import Path

from .bench import COMPONENTS, emit_report, run_experiment
from .config import RunConfig, load_config
from .controller import SecurityController
from .errors import AttestationFailed, ConfigInvalid, HeteeError
from .host import LocalChannel, attest_and_connect
from .protocol import ConfigBody
from .sim import boot_bundle, build_platform
from .vectors import verify_vectors


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _address(text: str) -> tuple[str, int]:
    hostname, _, port = text.rpartition(":")
    if not hostname or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return hostname, int(port)


def cmd_run(args) -> int:
    config = _config(args.config)
    config.bench.modes = ["baseline", "hetee"] if args.mode == "both" else [args.mode]
    report = run_experiment(config)
    if args.report:
        for path in emit_report(report, args.report):
            print(f"wrote {path}")
    for key in report.cells():
        bd = report.breakdowns[key]
        parts = " ".join(f"{c}={bd.components_us()[c]:.1f}" for c in COMPONENTS if getattr(bd, c))
        print(f"{key[0]:<10} b{key[1]:<3} {key[2]}dev {key[3]:<8} norm={report.normalized(key):.3f} "
              f"total_us={bd.total_us:.1f} {parts}")
    return 0


def cmd_verify_vectors(args) -> int:
    failed = 0
    for check in verify_vectors():
        print(f"{'PASS' if check.ok else 'FAIL'} {check.name}" + (f" ({check.detail})" if not check.ok else ""))
        failed += not check.ok
    return 1 if failed else 0


def cmd_attest(args) -> int:
    config = _config(args.config)
    try:
        expected = bytes.fromhex(args.expect)
    except ValueError:
        print("--expect must be a hex digest", file=sys.stderr)
        return 2
    bundle = boot_bundle(config)
    pubkey = bytes.fromhex(args.pubkey) if args.pubkey else bundle.identity.public_key
    if args.connect:
        from .transport import SocketChannel

        channel = SocketChannel(args.connect)
    else:
        platform = build_platform(config)
        if args.system_software is not None:
            bundle = boot_bundle(config, system_sw=args.system_software.encode())
        controller = SecurityController.boot_bundle(platform, bundle)
        print(f"controller measurement {controller.measurement.digest.hex()}")
        channel = LocalChannel(controller)
    try:
        session = attest_and_connect(
            channel, pubkey, expected, ConfigBody(config.controller.accel_type, args.count),
            rng=random.Random(config.seed),
        )
    except AttestationFailed as exc:
        print(f"REJECTED {exc.reason.value}")
        return 1
    print(f"ATTESTED task_id={session.task_id} queue_id={session.queue_id} ready={session.ready}")
    session.close()
    return 0


def cmd_serve(args) -> int:
    from .transport import ControllerServer

    config = _config(args.config)
    platform = build_platform(config)
    controller = SecurityController.boot_bundle(platform, boot_bundle(config))
    server = ControllerServer(controller, args.listen)
    print(f"listening on {server.address[0]}:{server.address[1]} "
          f"measurement {controller.measurement.digest.hex()}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetee-sim", description="Heterogeneous TEE simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the benchmark grid")
    run.add_argument("--config", help="YAML or JSON run configuration")
    run.add_argument("--mode", choices=["hetee", "baseline", "both"], default="both")
    run.add_argument("--report", type=Path, help="directory for CSV/JSONL reports")
    run.set_defaults(fn=cmd_run)

    vec = sub.add_parser("verify-vectors", help="check the built-in known-answer vectors")
    vec.set_defaults(fn=cmd_verify_vectors)

    att = sub.add_parser("attest", help="attest a controller and open a queue")
    att.add_argument("--expect", required=True, help="expected measurement digest (hex)")
    att.add_argument("--config")
    att.add_argument("--connect", type=_address, help="HOST:PORT of a running controller service")
    att.add_argument("--pubkey", help="device public key (hex); defaults to the configured identity")
    att.add_argument("--count", type=int, default=1, help="devices to request")
    att.add_argument("--system-software", help="boot the local controller from this system image instead")
    att.set_defaults(fn=cmd_attest)

    srv = sub.add_parser("serve", help="run the controller as a TCP service")
    srv.add_argument("--config")
    srv.add_argument("--listen", type=_address, default=("127.0.0.1", 7000))
    srv.set_defaults(fn=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except HeteeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
