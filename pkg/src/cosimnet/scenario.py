"""Scenario files: a flat ``key = value`` format with section headers.

The format is deliberately tiny and dependency-free so scenario diffs stay
readable. Lines are blank, ``# comments``, ``[section]`` headers, or
``key = value`` pairs. Unknown sections or keys are errors, not warnings,
and every default is documented in the generated reference table
(:func:`defaults_markdown`).

Sections:

``[scenario]``   name, mode, seed, horizon, step, replicates
``[esm]``        fleet size, overlay topology and controller parameters
``[links]``      default ingress/egress impairments for every port
``[links <esm>]``  per-port overrides (e.g. ``[links esm3]``)
``[pulse]``      optional pulse-load disturbance
``[bindings <esm>]``  real-time mode UDP endpoints, one per unit

Seeds: replicate k runs with ``seed + k``; the per-leg link RNG streams
derive as ``seed * 1_000_003 + port_id * 2 + (1 if egress else 0)`` so
reported tables are reproducible from the scenario file alone.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .esm import EsmParams, OverlayTopology, PulseEvent, SimSetup, run_scenario
from .links import LinkSpec
from .metrics import ComparisonReport, TimeSeries, TraceBundle, compare_runs
from .switch import NodeAddress, PortSpec, SwitchConfig

TOOL_VERSION = "0.1.0"


class ParseError(Exception):
    def __init__(self, path: str, line: int, column: int, message: str) -> None:
        super().__init__(f"{path}:{line}:{column}: {message}")
        self.line = line
        self.column = column


class ValidationError(Exception):
    """A parsed value violates a scenario invariant."""


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int

    def as_tuple(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass(frozen=True)
class PortBindingSpec:
    """Real-time endpoints for one unit: where the proxy listens for its
    traffic, where deliveries to it are sent, and its static destination."""

    listen: Endpoint
    node: Endpoint
    destination: str = "broadcast"


# key -> (type tag, default, description); defaults of None mean required
_SCENARIO_KEYS = {
    "name": ("str", None, "scenario name (used in reports)"),
    "mode": ("choice:event,realtime", "event", "execution mode"),
    "seed": ("int", 1, "base RNG seed; replicate k uses seed + k"),
    "horizon_s": ("float", 300.0, "simulated horizon in seconds"),
    "dt_ms": ("float", 1.0, "plant integration step in milliseconds"),
    "replicates": ("int", 1, "number of replicate runs"),
}

_ESM_KEYS = {
    "count": ("int", 5, "number of energy-storage modules"),
    "topology": ("choice:star,ring", "star", "controller overlay"),
    "capacity_j": ("float", 1e9, "energy capacity per unit (J)"),
    "max_charge_w": ("float", 5e6, "charge power limit (W)"),
    "max_discharge_w": ("float", 10e6, "discharge power limit (W)"),
    "soc_init": ("floats", (0.5,), "initial SOC: one value or one per unit"),
    "soc_target": ("float", 0.8, "target SOC"),
    "publish_period_ms": ("float", 5.0, "controller publish period (ms)"),
    "control_gain_per_s": ("float", 0.05, "proportional charge gain (1/s)"),
    "consensus_step": ("float", 0.15, "consensus step size epsilon"),
    "measurement_weight": ("float", 0.25, "estimate anchor toward own SOC"),
    "consensus_weight": ("float", 0.5, "fleet-estimate share in the command"),
    "deadband": ("float", 1e-3, "command deadband on the SOC error"),
}

_LINK_KEYS = {
    "ingress.delay_us": ("int", 0, "node-to-switch one-way delay (µs)"),
    "ingress.jitter_us": ("int", 0, "node-to-switch jitter half-width (µs)"),
    "ingress.loss": ("float", 0.0, "node-to-switch loss probability"),
    "ingress.bandwidth_bps": ("int", 0, "node-to-switch bandwidth (0 = unlimited)"),
    "egress.delay_us": ("int", 0, "switch-to-node one-way delay (µs)"),
    "egress.jitter_us": ("int", 0, "switch-to-node jitter half-width (µs)"),
    "egress.loss": ("float", 0.0, "switch-to-node loss probability"),
    "egress.bandwidth_bps": ("int", 0, "switch-to-node bandwidth (0 = unlimited)"),
}

_PULSE_KEYS = {
    "start_s": ("float", None, "pulse start time (s)"),
    "duration_s": ("float", None, "pulse duration (s)"),
    "total_power_w": ("float", None, "total pulse draw, split across units (W)"),
}

_BINDING_KEYS = {
    "listen": ("endpoint", None, "proxy socket receiving this unit's traffic"),
    "node": ("endpoint", None, "unit endpoint receiving its deliveries"),
    "destination": ("str", "broadcast", "static destination: broadcast or a label"),
}

_SECTIONS = {
    "scenario": _SCENARIO_KEYS,
    "esm": _ESM_KEYS,
    "links": _LINK_KEYS,
    "pulse": _PULSE_KEYS,
    "bindings": _BINDING_KEYS,
}


@dataclass
class Scenario:
    name: str
    mode: str = "event"
    seed: int = 1
    horizon_us: int = 300_000_000
    dt_us: int = 1_000
    replicates: int = 1
    count: int = 5
    topology: str = "star"
    esm: EsmParams = field(default_factory=EsmParams)
    soc_init_per_esm: tuple[float, ...] | None = None
    link_defaults: dict[str, float] = field(default_factory=dict)
    link_overrides: dict[str, dict[str, float]] = field(default_factory=dict)
    pulse: PulseEvent | None = None
    bindings: dict[str, PortBindingSpec] = field(default_factory=dict)
    source_path: str | None = None

    def labels(self) -> list[str]:
        return [f"esm{i + 1}" for i in range(self.count)]

    def port_id(self, label: str) -> int:
        return self.labels().index(label) + 1

    def leg_values(self, label: str, leg: str) -> dict[str, float]:
        """Effective impairment values for one port leg after overrides."""
        merged = {k: d for k, (_, d, _) in _LINK_KEYS.items()}
        merged.update(self.link_defaults)
        merged.update(self.link_overrides.get(label, {}))
        prefix = leg + "."
        return {k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix)}

    def leg_spec(self, label: str, leg: str, seed: int) -> LinkSpec:
        v = self.leg_values(label, leg)
        port = self.port_id(label)
        return LinkSpec(
            one_way_delay_us=int(v["delay_us"]),
            jitter_half_width_us=int(v["jitter_us"]),
            loss_probability=float(v["loss"]),
            bandwidth_bits_per_s=int(v["bandwidth_bps"]),
            rng_seed=derive_leg_seed(seed, port, leg == "egress"),
        )

    def switch_config(self, seed: int) -> SwitchConfig:
        ports = tuple(
            PortSpec(
                address=NodeAddress(self.port_id(label), label),
                ingress=self.leg_spec(label, "ingress", seed),
                egress=self.leg_spec(label, "egress", seed),
            )
            for label in self.labels()
        )
        return SwitchConfig(ports=ports)

    def to_setup(self, seed: int | None = None, record_deliveries: bool = True) -> SimSetup:
        run_seed = self.seed if seed is None else seed
        return SimSetup(
            params=self.esm,
            topology=(
                OverlayTopology.star(self.count)
                if self.topology == "star"
                else OverlayTopology.ring(self.count)
            ),
            switch=self.switch_config(run_seed),
            addresses=tuple(range(1, self.count + 1)),
            horizon_us=self.horizon_us,
            dt_us=self.dt_us,
            seed=run_seed,
            soc_init_per_esm=self.soc_init_per_esm,
            pulse=self.pulse,
            record_deliveries=record_deliveries,
        )


def derive_leg_seed(base_seed: int, port_id: int, egress: bool) -> int:
    return base_seed * 1_000_003 + port_id * 2 + (1 if egress else 0)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _convert(tag: str, raw: str, path: str, line: int, col: int):
    try:
        if tag == "int":
            return int(float(raw)) if ("e" in raw or "." in raw) else int(raw)
        if tag == "float":
            return float(raw)
        if tag == "str":
            return raw
        if tag == "floats":
            return tuple(float(tok) for tok in raw.split())
        if tag == "endpoint":
            host, _, port = raw.rpartition(":")
            if not host:
                raise ValueError("expected host:port")
            return Endpoint(host, int(port))
        if tag.startswith("choice:"):
            choices = tag.split(":", 1)[1].split(",")
            if raw not in choices:
                raise ValueError(f"expected one of {', '.join(choices)}")
            return raw
    except ValueError as exc:
        raise ParseError(path, line, col, f"bad value {raw!r}: {exc}") from None
    raise AssertionError(f"unhandled type tag {tag}")


def parse_scenario(path: str | Path) -> Scenario:
    """Parse and fully validate one scenario file.

    Raises ParseError (with line and column) for malformed or unknown
    content, and ValidationError when a value violates an invariant.
    """
    path = Path(path)
    text = path.read_text()
    sections: dict[tuple[str, str], dict[str, object]] = {}
    current: dict[str, object] | None = None
    current_schema: dict | None = None

    for lineno, rawline in enumerate(text.splitlines(), start=1):
        stripped = rawline.strip()
        col = rawline.index(stripped[0]) + 1 if stripped else 1
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ParseError(str(path), lineno, col, "unterminated section header")
            parts = stripped[1:-1].split()
            if not parts:
                raise ParseError(str(path), lineno, col, "empty section header")
            kind, qualifier = parts[0], " ".join(parts[1:])
            if kind not in _SECTIONS:
                raise ParseError(str(path), lineno, col, f"unknown section [{kind}]")
            if kind in ("scenario", "esm", "pulse") and qualifier:
                raise ParseError(
                    str(path), lineno, col, f"section [{kind}] takes no qualifier"
                )
            if kind == "bindings" and not qualifier:
                raise ParseError(
                    str(path), lineno, col, "section [bindings] needs a unit label"
                )
            key = (kind, qualifier)
            if key in sections:
                raise ParseError(
                    str(path), lineno, col, f"duplicate section [{stripped[1:-1]}]"
                )
            sections[key] = {}
            current = sections[key]
            current_schema = _SECTIONS[kind]
            continue
        if "=" not in stripped:
            raise ParseError(str(path), lineno, col, "expected 'key = value'")
        if current is None or current_schema is None:
            raise ParseError(str(path), lineno, col, "key outside any section")
        k, _, v = stripped.partition("=")
        k = k.strip()
        v = v.split("#", 1)[0].strip()
        if k not in current_schema:
            raise ParseError(str(path), lineno, col, f"unknown key {k!r}")
        if k in current:
            raise ParseError(str(path), lineno, col, f"duplicate key {k!r}")
        if not v:
            raise ParseError(str(path), lineno, col, f"missing value for {k!r}")
        vcol = rawline.index("=") + 2
        current[k] = _convert(current_schema[k][0], v, str(path), lineno, vcol)

    return _build_scenario(str(path), sections)


def _section_values(
    sections: dict, kind: str, qualifier: str = ""
) -> dict[str, object] | None:
    return sections.get((kind, qualifier))


def _with_defaults(schema: dict, got: dict[str, object], where: str) -> dict:
    out = {}
    for key, (_, default, _) in schema.items():
        if key in got:
            out[key] = got[key]
        elif default is None:
            raise ValidationError(f"missing required key {key!r} in [{where}]")
        else:
            out[key] = default
    return out


def _build_scenario(path: str, sections: dict) -> Scenario:
    sc_raw = _section_values(sections, "scenario")
    if sc_raw is None:
        raise ValidationError("missing required section [scenario]")
    sc = _with_defaults(_SCENARIO_KEYS, sc_raw, "scenario")
    esm_raw = _section_values(sections, "esm") or {}
    em = _with_defaults(_ESM_KEYS, esm_raw, "esm")

    horizon_us = int(round(sc["horizon_s"] * 1e6))
    dt_us = int(round(sc["dt_ms"] * 1e3))
    if not horizon_us > dt_us > 0:
        raise ValidationError(
            f"horizon ({horizon_us} µs) must exceed dt ({dt_us} µs) and dt must be > 0"
        )
    if sc["replicates"] < 1:
        raise ValidationError("replicates must be >= 1")

    count = em["count"]
    if count < 1:
        raise ValidationError("esm count must be >= 1")
    soc_init = em["soc_init"]
    if len(soc_init) == 1:
        soc_scalar, soc_per = soc_init[0], None
    elif len(soc_init) == count:
        soc_scalar, soc_per = soc_init[0], tuple(soc_init)
    else:
        raise ValidationError(
            f"soc_init needs 1 or {count} values, got {len(soc_init)}"
        )
    for v in soc_init:
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"soc_init value {v} outside [0, 1]")

    try:
        params = EsmParams(
            capacity_j=em["capacity_j"],
            max_charge_w=em["max_charge_w"],
            max_discharge_w=em["max_discharge_w"],
            soc_init=soc_scalar,
            soc_target=em["soc_target"],
            publish_period_us=int(round(em["publish_period_ms"] * 1e3)),
            control_gain_per_s=em["control_gain_per_s"],
            consensus_step=em["consensus_step"],
            measurement_weight=em["measurement_weight"],
            consensus_weight=em["consensus_weight"],
            deadband=em["deadband"],
        )
    except Exception as exc:
        raise ValidationError(str(exc)) from None

    labels = [f"esm{i + 1}" for i in range(count)]
    link_defaults = dict(_section_values(sections, "links") or {})
    link_overrides: dict[str, dict[str, float]] = {}
    bindings: dict[str, PortBindingSpec] = {}
    for (kind, qualifier), values in sections.items():
        if kind == "links" and qualifier:
            if qualifier not in labels:
                raise ValidationError(
                    f"[links {qualifier}]: no such unit (have {', '.join(labels)})"
                )
            link_overrides[qualifier] = dict(values)
        if kind == "bindings":
            if qualifier not in labels:
                raise ValidationError(
                    f"[bindings {qualifier}]: no such unit (have {', '.join(labels)})"
                )
            b = _with_defaults(_BINDING_KEYS, values, f"bindings {qualifier}")
            dest = b["destination"]
            if dest != "broadcast" and dest not in labels:
                raise ValidationError(
                    f"[bindings {qualifier}]: destination {dest!r} is not a unit label"
                )
            bindings[qualifier] = PortBindingSpec(
                listen=b["listen"], node=b["node"], destination=dest
            )

    for scope, values in [("links", link_defaults)] + [
        (f"links {q}", v) for q, v in link_overrides.items()
    ]:
        loss_keys = [k for k in values if k.endswith(".loss")]
        for k in loss_keys:
            if not 0.0 <= values[k] <= 1.0:
                raise ValidationError(
                    f"[{scope}] {k} = {values[k]} violates the [0, 1] loss bound"
                )
        for k in values:
            if k.endswith((".delay_us", ".jitter_us", ".bandwidth_bps")) and values[k] < 0:
                raise ValidationError(f"[{scope}] {k} must be >= 0")

    pulse_raw = _section_values(sections, "pulse")
    pulse = None
    if pulse_raw is not None:
        pv = _with_defaults(_PULSE_KEYS, pulse_raw, "pulse")
        try:
            pulse = PulseEvent(
                start_us=int(round(pv["start_s"] * 1e6)),
                duration_us=int(round(pv["duration_s"] * 1e6)),
                total_power_w=pv["total_power_w"],
            )
        except Exception as exc:
            raise ValidationError(str(exc)) from None

    scenario = Scenario(
        name=sc["name"],
        mode=sc["mode"],
        seed=sc["seed"],
        horizon_us=horizon_us,
        dt_us=dt_us,
        replicates=sc["replicates"],
        count=count,
        topology=em["topology"],
        esm=params,
        soc_init_per_esm=soc_per,
        link_defaults=link_defaults,
        link_overrides=link_overrides,
        pulse=pulse,
        bindings=bindings,
        source_path=path,
    )
    if scenario.mode == "realtime" and set(bindings) != set(labels):
        raise ValidationError(
            "realtime mode needs a [bindings <unit>] section for every unit"
        )
    # surface LinkSpec invariant violations (e.g. jitter > delay) now
    for label in labels:
        for leg in ("ingress", "egress"):
            try:
                scenario.leg_spec(label, leg, scenario.seed)
            except ValueError as exc:
                raise ValidationError(f"[{label} {leg}] {exc}") from None
    return scenario


def defaults_markdown() -> str:
    """Reference table of every scenario key and its default, generated
    from the parser schema so it cannot drift."""
    lines = [
        "| section | key | default | meaning |",
        "| --- | --- | --- | --- |",
    ]
    for section, schema in _SECTIONS.items():
        for key, (_, default, desc) in schema.items():
            if default is None:
                shown = "(required)"
            elif isinstance(default, tuple):
                shown = " ".join(str(v) for v in default)
            else:
                shown = str(default)
            lines.append(f"| [{section}] | {key} | {shown} | {desc} |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def write_soc_csv(path: str | Path, soc: dict[str, TimeSeries]) -> None:
    labels = list(soc)
    series = [soc[k] for k in labels]
    first = series[0]
    for s in series[1:]:
        if s.t0_us != first.t0_us or s.dt_us != first.dt_us or len(s) != len(first):
            raise ValueError("all traces must share one sampling grid")
    with open(path, "w") as f:
        f.write("time_s," + ",".join(labels) + "\n")
        times = first.times_us()
        cols = [s.values for s in series]
        for i in range(len(first)):
            row = [str(times[i] / 1e6)] + [str(float(c[i])) for c in cols]
            f.write(",".join(row) + "\n")


def read_soc_csv(path: str | Path) -> dict[str, TimeSeries]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[0] != "time_s":
            raise ValueError(f"{path}: expected a time_s column first")
        labels = header[1:]
        times: list[int] = []
        cols: list[list[float]] = [[] for _ in labels]
        for line in f:
            parts = line.rstrip("\n").split(",")
            times.append(int(round(float(parts[0]) * 1e6)))
            for j, tok in enumerate(parts[1:]):
                cols[j].append(float(tok))
    if len(times) < 2:
        raise ValueError(f"{path}: need at least two samples")
    dt = times[1] - times[0]
    for i in range(1, len(times)):
        if times[i] - times[i - 1] != dt:
            raise ValueError(f"{path}: non-uniform sampling at row {i}")
    return {
        label: TimeSeries(times[0], dt, np.array(cols[j]))
        for j, label in enumerate(labels)
    }


def write_deliveries_csv(
    path: str | Path, deliveries: list[tuple[int, int, int, int]]
) -> None:
    with open(path, "w") as f:
        f.write("deliver_us,port,sender,seq\n")
        for row in deliveries:
            f.write(",".join(str(v) for v in row) + "\n")


def run_replicates(
    scenario: Scenario, outdir: str | Path, seed: int | None = None
) -> ComparisonReport:
    """Execute the scenario's replicate runs (seed, seed+1, ...) in event
    mode and write every artifact into ``outdir``.

    Per replicate k: soc_run{k}.csv, counters_run{k}.csv and
    deliveries_run{k}.csv; across replicates a run-1-referenced comparison
    report (CSV and aligned text); plus a manifest with the scenario hash,
    the seeds used, and the tool version.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    base = scenario.seed if seed is None else seed
    seeds = [base + k for k in range(scenario.replicates)]
    bundles: list[TraceBundle] = []
    for k, s in enumerate(seeds, start=1):
        run = run_scenario(scenario.to_setup(seed=s))
        write_soc_csv(outdir / f"soc_run{k}.csv", run.soc)
        (outdir / f"counters_run{k}.csv").write_text(run.counters_csv)
        write_deliveries_csv(outdir / f"deliveries_run{k}.csv", run.deliveries)
        bundles.append(TraceBundle(name=f"run{k}", traces=run.soc))
    if len(bundles) > 1:
        report = compare_runs(bundles, scenario=scenario.name)
    else:
        report = ComparisonReport(scenario=scenario.name, reference="run1")
    (outdir / "replicate_report.csv").write_text(report.to_csv())
    (outdir / "replicate_report.txt").write_text(report.to_text())
    write_manifest(outdir, scenario, seeds)
    return report


def write_manifest(outdir: Path, scenario: Scenario, seeds: list[int]) -> None:
    digest = ""
    if scenario.source_path and Path(scenario.source_path).exists():
        digest = hashlib.sha256(Path(scenario.source_path).read_bytes()).hexdigest()
    manifest = {
        "scenario_name": scenario.name,
        "scenario_sha256": digest,
        "base_seed": seeds[0] if seeds else scenario.seed,
        "seeds": seeds,
        "replicates": scenario.replicates,
        "tool_version": TOOL_VERSION,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
