"""Command-line front end.

Subcommands:

- ``run <scenario> --out DIR``: execute a scenario's replicate runs and
  write SOC traces, switch counters, delivery logs and a replicate report.
- ``compare --ref DIR --against DIR... --out report.csv``: cross-scenario
  comparison of run-1 SOC traces (MAPE and percentage differences).
- ``echo-serve <bind-addr>``: run the UDP echo server.
- ``echo-send <server-addr> ...``: run the periodic echo sender and write
  sample and statistics CSVs.
- ``switch --config <file>``: run the real-time proxy from a scenario file
  with ``[bindings]`` sections; SIGUSR1 dumps the port counters.

Usage errors exit 2; module errors exit 1 with a diagnostic.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
from pathlib import Path

from . import echo as echo_mod
from . import metrics, realtime, scenario as scenario_mod
from .switch import BROADCAST


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosimnet",
        description="Network-impairment co-simulation for distributed "
        "energy-storage controllers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario", help="path to the scenario file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_run.add_argument(
        "--mode",
        choices=["event", "realtime"],
        default=None,
        help="override the scenario's execution mode",
    )
    p_run.add_argument(
        "--replicates", type=int, default=None, help="override the replicate count"
    )

    p_cmp = sub.add_parser("compare", help="compare run outputs across scenarios")
    p_cmp.add_argument("--ref", required=True, help="reference output directory")
    p_cmp.add_argument(
        "--against", required=True, nargs="+", help="output directories to compare"
    )
    p_cmp.add_argument("--out", required=True, help="report CSV path")

    p_srv = sub.add_parser("echo-serve", help="run the UDP echo server")
    p_srv.add_argument("bind", help="bind address host:port")

    p_snd = sub.add_parser("echo-send", help="run the periodic echo sender")
    p_snd.add_argument("server", help="echo server address host:port")
    p_snd.add_argument("--period-us", type=int, default=10_000)
    p_snd.add_argument("--count", type=int, default=10_000)
    p_snd.add_argument("--payload-size", type=int, default=64)
    p_snd.add_argument("--timeout-us", type=int, default=1_000_000)
    p_snd.add_argument("--out", default=None, help="samples CSV path")
    p_snd.add_argument("--stats", default=None, help="statistics CSV path")
    p_snd.add_argument("--bind", default=None, help="sender bind address host:port")

    p_sw = sub.add_parser("switch", help="run the real-time switch proxy")
    p_sw.add_argument("--config", required=True, help="scenario file with bindings")
    return parser


def _proxy_from_scenario(sc: scenario_mod.Scenario) -> realtime.RealtimeProxy:
    bindings: dict[int, realtime.PortBinding] = {}
    for label, b in sc.bindings.items():
        dest = BROADCAST if b.destination == "broadcast" else sc.port_id(b.destination)
        bindings[sc.port_id(label)] = realtime.PortBinding(
            listen=b.listen.as_tuple(), node=b.node.as_tuple(), destination=dest
        )
    return realtime.RealtimeProxy(sc.switch_config(sc.seed), bindings)


def _serve_proxy(sc: scenario_mod.Scenario) -> int:
    proxy = _proxy_from_scenario(sc)
    if hasattr(signal, "SIGUSR1"):
        signal.signal(
            signal.SIGUSR1, lambda *_: print(proxy.counters_csv(), file=sys.stderr)
        )
    proxy.start()
    print(f"proxy running on {len(sc.bindings)} ports; Ctrl-C stops", file=sys.stderr)
    try:
        signal.pause()
    except KeyboardInterrupt:
        pass
    finally:
        proxy.stop()
        print(proxy.counters_csv(), end="")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    sc = scenario_mod.parse_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    if args.mode is not None:
        sc.mode = args.mode
    if args.replicates is not None:
        sc.replicates = args.replicates
    if sc.mode == "realtime":
        if not sc.bindings:
            raise scenario_mod.ValidationError(
                "realtime mode needs [bindings] sections (or use --mode event)"
            )
        return _serve_proxy(sc)
    report = scenario_mod.run_replicates(sc, args.out)
    print(report.to_text(), end="")
    print(f"artifacts written to {args.out}")
    return 0


def _load_bundle(outdir: Path) -> metrics.TraceBundle:
    soc_path = outdir / "soc_run1.csv"
    if not soc_path.exists():
        raise FileNotFoundError(f"{soc_path} not found (not a run output dir?)")
    name = outdir.name
    manifest = outdir / "manifest.json"
    if manifest.exists():
        name = json.loads(manifest.read_text()).get("scenario_name", name)
    return metrics.TraceBundle(name=name, traces=scenario_mod.read_soc_csv(soc_path))


def _cmd_compare(args: argparse.Namespace) -> int:
    bundles = [_load_bundle(Path(args.ref))]
    bundles += [_load_bundle(Path(d)) for d in args.against]
    report = metrics.compare_runs(bundles, scenario=f"{bundles[0].name} (reference)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    out.with_suffix(".txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def _write_samples_csv(path: str, samples: list[echo_mod.ResponseTimeSample]) -> None:
    with open(path, "w") as f:
        f.write("seq,send_us,recv_us,rtt_us,lost\n")
        for s in samples:
            recv = "" if s.receive_time_us is None else s.receive_time_us
            rtt = "" if s.response_time_us is None else s.response_time_us
            f.write(f"{s.sequence},{s.send_time_us},{recv},{rtt},{int(s.lost)}\n")


def _write_stats_csv(path: str, stats: echo_mod.LatencyStats) -> None:
    with open(path, "w") as f:
        f.write("kind,key,value\n")
        for key in ("n", "lost", "mean_us", "stddev_us", "min_us", "p50_us", "p99_us", "max_us"):
            f.write(f"scalar,{key},{getattr(stats, key)}\n")
        for lo, count in stats.histogram:
            f.write(f"linear_hist,{lo},{count}\n")
        for lo, count in stats.log_histogram:
            f.write(f"log_hist,{lo},{count}\n")


def _cmd_echo_send(args: argparse.Namespace) -> int:
    config = echo_mod.EchoConfig(
        server=_parse_addr(args.server),
        count=args.count,
        period_us=args.period_us,
        payload_size=args.payload_size,
        timeout_us=args.timeout_us,
        sender=_parse_addr(args.bind) if args.bind else None,
    )
    samples = echo_mod.run_sender(config)
    if args.out:
        _write_samples_csv(args.out, samples)
    stats = echo_mod.summarize(samples)
    if args.stats:
        _write_stats_csv(args.stats, stats)
    print(
        f"n={stats.n} lost={stats.lost} mean={stats.mean_us:.1f}µs "
        f"p50={stats.p50_us}µs p99={stats.p99_us}µs max={stats.max_us}µs"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "echo-serve":
            echo_mod.run_echo_server(_parse_addr(args.bind))
            return 0
        if args.command == "echo-send":
            return _cmd_echo_send(args)
        if args.command == "switch":
            return _serve_proxy(scenario_mod.parse_scenario(args.config))
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"cosimnet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
