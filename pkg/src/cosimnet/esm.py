"""Distributed energy-storage charging controllers co-simulated over a virtual switch.

Each energy-storage module (ESM) is a saturating power integrator: commanded
power is clamped to the charge/discharge limits, energy is clamped to
[0, capacity], and state of charge is energy over capacity. The distributed
controllers coordinate through periodic messages carrying each unit's SOC
and its running estimate of the fleet-average SOC deviation from the target.

Controller update, once per publish period:

    z_i <- z_i + eps * sum_j (z_j_held - z_i)          (consensus on estimates)
    z_i <- z_i + lam * ((target - soc_i) - z_i)        (anchor to own measurement)

with last-value-hold neighbor data, so delayed or lost messages only make
the held values stale. The commanded power blends the unit's own deviation
with the fleet estimate:

    err_i = (1 - w) * (target - soc_i) + w * z_i
    P_cmd = g_i * clamp(k_p * err_i * capacity)        (0 inside the deadband)

where g_i <= 1 is a stale-information backoff: the gain is derated as the
average age of the neighbor data grows beyond one publish period (fresh
data leaves it at exactly 1). Acting cautiously on stale coordination data
is what makes network delay slow the fleet's convergence and packet loss
stutter it, instead of the controllers charging blindly ahead.

The estimate update is a convex combination whenever
eps * degree + lam <= 1, which keeps every estimate bounded for any
message staleness.

Everything runs on a virtual clock with 1 µs resolution: deliveries at
their exact scheduled microsecond, publications at per-controller phases,
plant integration on a fixed step. Runs are bit-identical for equal seeds.
"""

from __future__ import annotations

import heapq
import random
import struct
from dataclasses import dataclass, replace

import numpy as np

from .metrics import TimeSeries
from .switch import BROADCAST, Frame, SwitchConfig, VirtualSwitch


class ConfigError(Exception):
    """Inconsistent co-simulation setup (topology, addresses, gains)."""


NOT_SETTLED = None


@dataclass(frozen=True)
class EsmParams:
    """Parameters shared by the five energy-storage modules."""

    capacity_j: float = 1e9
    max_charge_w: float = 5e6
    max_discharge_w: float = 10e6
    soc_init: float = 0.50
    soc_target: float = 0.80
    publish_period_us: int = 5_000
    control_gain_per_s: float = 0.05
    consensus_step: float = 0.15
    measurement_weight: float = 0.25
    consensus_weight: float = 0.5
    deadband: float = 1e-3
    staleness_backoff_per_round: float = 0.02
    staleness_cap_rounds: float = 40.0

    def __post_init__(self) -> None:
        if self.capacity_j <= 0:
            raise ConfigError("capacity_j must be positive")
        if self.max_charge_w <= 0 or self.max_discharge_w <= 0:
            raise ConfigError("power limits must be positive")
        for name in ("soc_init", "soc_target"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.publish_period_us <= 0:
            raise ConfigError("publish_period_us must be positive")
        if not 0.0 < self.consensus_step < 1.0:
            raise ConfigError("consensus_step must be in (0, 1)")
        if not 0.0 <= self.consensus_weight <= 1.0:
            raise ConfigError("consensus_weight must be in [0, 1]")
        if not 0.0 < self.measurement_weight <= 1.0:
            raise ConfigError("measurement_weight must be in (0, 1]")
        if self.staleness_backoff_per_round < 0:
            raise ConfigError("staleness_backoff_per_round must be >= 0")
        if self.staleness_cap_rounds < 1:
            raise ConfigError("staleness_cap_rounds must be >= 1")


@dataclass(frozen=True)
class EsmState:
    """One unit's plant state; ``consensus_estimate`` is the shared
    fleet-average SOC-deviation estimate (None before any coordination)."""

    energy_j: float
    capacity_j: float
    power_w: float = 0.0
    consensus_estimate: float | None = None

    @property
    def soc(self) -> float:
        return self.energy_j / self.capacity_j


@dataclass(frozen=True)
class ControlMessage:
    sender: int
    seq: int
    sim_time_us: int
    consensus_estimate: float
    soc: float

    _STRUCT = struct.Struct("!BIQdd")

    def pack(self) -> bytes:
        return self._STRUCT.pack(
            self.sender, self.seq, self.sim_time_us, self.consensus_estimate, self.soc
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "ControlMessage":
        sender, seq, t, z, soc = cls._STRUCT.unpack_from(payload)
        return cls(sender, seq, t, z, soc)


@dataclass(frozen=True)
class OverlayTopology:
    """Which controllers listen to which: STAR (everyone, via broadcast),
    RING (i±1 mod n), or CUSTOM adjacency."""

    kind: str
    n: int
    adjacency: dict[int, frozenset[int]] | None = None

    @classmethod
    def star(cls, n: int) -> "OverlayTopology":
        return cls("star", n)

    @classmethod
    def ring(cls, n: int) -> "OverlayTopology":
        return cls("ring", n)

    @classmethod
    def custom(cls, adjacency: dict[int, set[int]]) -> "OverlayTopology":
        adj = {i: frozenset(v) for i, v in adjacency.items()}
        return cls("custom", len(adj), adj)

    def neighbors(self, i: int) -> frozenset[int]:
        if self.kind == "star":
            return frozenset(j for j in range(self.n) if j != i)
        if self.kind == "ring":
            if self.n == 1:
                return frozenset()
            return frozenset({(i - 1) % self.n, (i + 1) % self.n})
        assert self.adjacency is not None
        return self.adjacency[i]

    def max_degree(self) -> int:
        return max(len(self.neighbors(i)) for i in range(self.n))

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError("topology needs at least one node")
        if self.kind not in ("star", "ring", "custom"):
            raise ConfigError(f"unknown topology kind {self.kind!r}")
        if self.kind == "custom":
            if self.adjacency is None or set(self.adjacency) != set(range(self.n)):
                raise ConfigError("custom adjacency must cover nodes 0..n-1")
            for i, nbrs in self.adjacency.items():
                for j in nbrs:
                    if j == i or not 0 <= j < self.n:
                        raise ConfigError(f"bad neighbor {j} for node {i}")
                    if i not in self.adjacency[j]:
                        raise ConfigError("adjacency must be symmetric")
            self._check_connected()

    def _check_connected(self) -> None:
        seen = {0}
        stack = [0]
        while stack:
            for j in self.neighbors(stack.pop()):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != self.n:
            raise ConfigError("topology graph must be connected")


@dataclass(frozen=True)
class PulseEvent:
    """A pulse load drawing ``total_power_w`` split equally across units."""

    start_us: int
    duration_us: int
    total_power_w: float

    def __post_init__(self) -> None:
        if self.start_us < 0 or self.duration_us <= 0:
            raise ConfigError("pulse start must be >= 0 and duration > 0")


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def step_soc(
    state: EsmState, commanded_w: float, dt_us: int, params: EsmParams
) -> EsmState:
    """Advance the plant one step; energy accounting is exact.

    Commanded power is clamped to the unit's limits; if an energy bound
    clips the step, the effective power is recomputed so that the stored
    energy change equals power times dt exactly.
    """
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    dt_s = dt_us / 1e6
    p = min(max(commanded_w, -params.max_discharge_w), params.max_charge_w)
    e = state.energy_j + p * dt_s
    e_clamped = min(max(e, 0.0), params.capacity_j)
    if e_clamped != e:
        p = (e_clamped - state.energy_j) / dt_s
    return replace(state, energy_j=e_clamped, power_w=p)


def consensus_update(
    local_estimate: float, neighbor_estimates: list[float], eps: float
) -> float:
    """One discrete-time average-consensus step toward the neighbor values.

    Stale (last-received) neighbor values are fine; neighbors never heard
    from simply contribute nothing.
    """
    return local_estimate + eps * sum(v - local_estimate for v in neighbor_estimates)


def compute_charge_setpoint(state: EsmState, params: EsmParams) -> float:
    """Commanded power from the consensus-corrected SOC deviation.

    Without a fleet estimate the unit falls back to its own deviation.
    Returns 0 inside the deadband.
    """
    own = params.soc_target - state.soc
    if state.consensus_estimate is None:
        err = own
    else:
        w = params.consensus_weight
        err = (1.0 - w) * own + w * state.consensus_estimate
    if abs(err) < params.deadband:
        return 0.0
    cmd = params.control_gain_per_s * err * params.capacity_j
    return min(max(cmd, -params.max_discharge_w), params.max_charge_w)


def stale_info_backoff(
    ages_rounds: list[float], backoff_per_round: float, cap_rounds: float
) -> float:
    """Gain derating factor from the ages of the held neighbor data.

    Ages are in publish periods. Data at most one period old is normal
    operation and costs nothing; beyond that the gain shrinks as
    1 / (1 + backoff * mean excess age). Ages are capped so a silent
    neighbor bounds the derating instead of freezing the unit.
    """
    if not ages_rounds:
        return 1.0
    excess = [min(max(a - 1.0, 0.0), cap_rounds - 1.0) for a in ages_rounds]
    return 1.0 / (1.0 + backoff_per_round * sum(excess) / len(excess))


def settling_time(series: TimeSeries, target: float, band: float) -> int | None:
    """Earliest time (µs from series start) after which every sample stays
    within target ± band; None when the series never settles."""
    if band <= 0:
        raise ValueError("band must be positive")
    inside = np.abs(series.values - target) <= band
    outside_idx = np.flatnonzero(~inside)
    if outside_idx.size == 0:
        return 0
    last_outside = int(outside_idx[-1])
    if last_outside == len(series) - 1:
        return NOT_SETTLED
    return (last_outside + 1) * series.dt_us


def oscillation_count(series: TimeSeries, target: float, band: float) -> int:
    """Crossings of the target ± band envelope (entries plus exits) up to
    and including the settling instant; all crossings if never settled."""
    if band <= 0:
        raise ValueError("band must be positive")
    inside = np.abs(series.values - target) <= band
    flips = np.flatnonzero(inside[1:] != inside[:-1]) + 1
    outside_idx = np.flatnonzero(~inside)
    if outside_idx.size == 0 or outside_idx[-1] == len(series) - 1:
        return int(flips.size)
    settle_idx = int(outside_idx[-1]) + 1
    return int(np.sum(flips <= settle_idx))


# --------------------------------------------------------------------------
# co-simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimSetup:
    """Everything one event-mode fleet run needs."""

    params: EsmParams
    topology: OverlayTopology
    switch: SwitchConfig
    addresses: tuple[int, ...]
    horizon_us: int
    dt_us: int = 1_000
    seed: int = 0
    soc_init_per_esm: tuple[float, ...] | None = None
    pulse: PulseEvent | None = None
    record_deliveries: bool = True


@dataclass
class ScenarioRun:
    """Per-ESM SOC traces plus the network-side evidence of the run."""

    soc: dict[str, TimeSeries]
    deliveries: list[tuple[int, int, int, int]]
    counters_csv: str
    seed: int
    energy_integral_j: list[float] | None = None  # integral of effective P per ESM


class _Controller:
    __slots__ = ("index", "address", "seq", "phase_us", "z", "command_w", "inbox")

    def __init__(self, index: int, address: int, phase_us: int, z0: float) -> None:
        self.index = index
        self.address = address
        self.seq = 0
        self.phase_us = phase_us
        self.z = z0
        self.command_w = 0.0
        # sender address -> (last-held estimate, its send time)
        self.inbox: dict[int, tuple[float, int]] = {}


def derive_phase_seed(seed: int) -> int:
    """Stream used for the per-controller publish phases."""
    return seed * 1_000_003 + 999_331


_EV_DELIVER = 0
_EV_PUBLISH = 1
_EV_PLANT = 2


def run_scenario(setup: SimSetup) -> ScenarioRun:
    """Event-mode co-simulation of the ESM fleet over the virtual switch.

    Controllers publish every publish period from a per-controller start
    phase drawn in [0, period) from the run seed; the plant integrates on
    the fixed dt grid; deliveries land at their exact scheduled
    microsecond. Identical setups (same seed) give bit-identical results.
    """
    params = setup.params
    topo = setup.topology
    n = topo.n
    topo.validate()
    if len(setup.addresses) != n:
        raise ConfigError(f"{n} nodes but {len(setup.addresses)} addresses")
    table = setup.switch.address_table
    for addr in setup.addresses:
        if addr not in table:
            raise ConfigError(f"address {addr} not in switch config")
    if setup.horizon_us <= setup.dt_us or setup.dt_us <= 0:
        raise ConfigError("horizon must exceed dt and dt must be positive")
    deg = topo.max_degree()
    if deg and params.consensus_step >= 1.0 / deg:
        raise ConfigError(
            f"consensus_step {params.consensus_step} >= 1/{deg} (max degree bound)"
        )
    if deg * params.consensus_step + params.measurement_weight > 1.0:
        raise ConfigError("eps*degree + measurement_weight must be <= 1")

    socs0 = setup.soc_init_per_esm or tuple(params.soc_init for _ in range(n))
    if len(socs0) != n:
        raise ConfigError(f"{n} nodes but {len(socs0)} initial SOC values")
    for s in socs0:
        if not 0.0 <= s <= 1.0:
            raise ConfigError(f"initial SOC {s} outside [0, 1]")

    addr_to_index = {a: i for i, a in enumerate(setup.addresses)}
    phase_rng = random.Random(derive_phase_seed(setup.seed))
    controllers = [
        _Controller(
            i,
            setup.addresses[i],
            phase_rng.randrange(params.publish_period_us),
            params.soc_target - socs0[i],
        )
        for i in range(n)
    ]
    # message destinations per controller: one broadcast frame for the star
    # overlay, unicasts along the adjacency otherwise
    if topo.kind == "star":
        send_to = {i: (BROADCAST,) for i in range(n)}
    else:
        send_to = {
            i: tuple(sorted(setup.addresses[j] for j in topo.neighbors(i)))
            for i in range(n)
        }
    neighbor_addrs = [
        frozenset(setup.addresses[j] for j in topo.neighbors(i)) for i in range(n)
    ]

    switch = VirtualSwitch(setup.switch)
    energy = [socs0[i] * params.capacity_j for i in range(n)]
    power = [0.0] * n

    n_steps = setup.horizon_us // setup.dt_us
    samples = np.empty((n_steps + 1, n), dtype=np.float64)
    samples[0] = socs0
    deliveries: list[tuple[int, int, int, int]] = []

    pulse = setup.pulse
    pulse_share = pulse.total_power_w / n if pulse else 0.0

    counter = 0
    heap: list[tuple[int, int, int, int]] = []  # (time, kind, counter, index/port/step)

    def push(t: int, kind: int, payload: int) -> None:
        nonlocal counter
        heapq.heappush(heap, (t, kind, counter, payload))
        counter += 1

    for c in controllers:
        push(c.phase_us, _EV_PUBLISH, c.index)
    for k in range(n_steps):
        push(k * setup.dt_us, _EV_PLANT, k)

    eps = params.consensus_step
    lam = params.measurement_weight
    dt_s = setup.dt_us / 1e6
    cap = params.capacity_j
    p_charge = params.max_charge_w
    p_discharge = params.max_discharge_w
    integral = [0.0] * n

    while heap:
        t, kind, _, payload = heapq.heappop(heap)
        if kind == _EV_DELIVER:
            for deliver_time, frame in switch.pop_ready(payload, t):
                msg = ControlMessage.unpack(frame.payload)
                receiver = controllers[addr_to_index[payload]]
                if msg.sender in neighbor_addrs[receiver.index]:
                    receiver.inbox[msg.sender] = (msg.consensus_estimate, msg.sim_time_us)
                if setup.record_deliveries:
                    deliveries.append((deliver_time, payload, msg.sender, msg.seq))
        elif kind == _EV_PUBLISH:
            c = controllers[payload]
            soc = energy[payload] / cap
            held = [c.inbox[a][0] for a in sorted(c.inbox)]
            c.z = consensus_update(c.z, held, eps)
            c.z += lam * ((params.soc_target - soc) - c.z)
            period = params.publish_period_us
            ages = [
                (t - c.inbox[a][1]) / period
                if a in c.inbox
                else params.staleness_cap_rounds
                for a in neighbor_addrs[c.index]
            ]
            g = stale_info_backoff(
                ages, params.staleness_backoff_per_round, params.staleness_cap_rounds
            )
            state = EsmState(
                energy_j=energy[payload],
                capacity_j=cap,
                power_w=power[payload],
                consensus_estimate=c.z,
            )
            c.command_w = g * compute_charge_setpoint(state, params)
            msg = ControlMessage(c.address, c.seq, t, c.z, soc)
            c.seq += 1
            payload_bytes = msg.pack()
            for dest in send_to[payload]:
                for port, deliver in switch.forward(
                    Frame(c.address, dest, payload_bytes), t
                ):
                    if deliver is not None:
                        push(deliver, _EV_DELIVER, port)
            next_t = t + params.publish_period_us
            if next_t < setup.horizon_us:
                push(next_t, _EV_PUBLISH, payload)
        else:  # plant step over [t, t + dt); matches step_soc semantics
            in_pulse = pulse is not None and (
                pulse.start_us <= t < pulse.start_us + pulse.duration_us
            )
            row = samples[payload + 1]
            for i in range(n):
                p = controllers[i].command_w
                if in_pulse:
                    p -= pulse_share
                if p > p_charge:
                    p = p_charge
                elif p < -p_discharge:
                    p = -p_discharge
                e = energy[i] + p * dt_s
                if e < 0.0:
                    p = (0.0 - energy[i]) / dt_s
                    e = 0.0
                elif e > cap:
                    p = (cap - energy[i]) / dt_s
                    e = cap
                energy[i] = e
                power[i] = p
                integral[i] += p * dt_s
                row[i] = e / cap

    soc_series = {
        f"esm{i + 1}": TimeSeries(0, setup.dt_us, samples[:, i].copy())
        for i in range(n)
    }
    return ScenarioRun(
        soc=soc_series,
        deliveries=deliveries,
        counters_csv=switch.counters_csv(),
        seed=setup.seed,
        energy_integral_j=integral,
    )
