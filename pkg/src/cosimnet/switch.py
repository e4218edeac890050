"""Multi-port virtual switch forwarding frames between statically addressed ports.

Every port carries an ingress leg (node -> switch) and an egress leg
(switch -> node), each with its own :class:`~cosimnet.links.LinkSpec`. A
frame scheduled toward a destination traverses the source port's ingress
leg and then the destination port's egress leg; a loss draw on either leg
drops that copy. The address table is static — there is no MAC learning —
and frames to unknown unicast destinations are counted and discarded.

The switch itself adds zero base forwarding latency; all timing comes from
the configured link specs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .links import Link, LinkSpec

BROADCAST = 255

DEFAULT_MTU = 1500

_DRAIN_US = 2**62


class UnknownDestination(Exception):
    """Frame references an address that is not in the address table."""


@dataclass(frozen=True)
class NodeAddress:
    """A switch port address: small integer id plus a human label."""

    id: int
    label: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.id <= 255:
            raise ValueError(f"address id must be in [0, 255], got {self.id}")


@dataclass(frozen=True)
class PortSpec:
    address: NodeAddress
    ingress: LinkSpec = LinkSpec()
    egress: LinkSpec = LinkSpec()


@dataclass(frozen=True)
class SwitchConfig:
    ports: tuple[PortSpec, ...]
    mtu: int = DEFAULT_MTU

    def __post_init__(self) -> None:
        ids = [p.address.id for p in self.ports]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate port addresses in switch config")
        if BROADCAST in ids:
            raise ValueError(f"address {BROADCAST} is reserved for broadcast")

    @property
    def address_table(self) -> dict[int, PortSpec]:
        return {p.address.id: p for p in self.ports}


@dataclass(frozen=True)
class Frame:
    """A datagram between two addresses. ``destination`` may be BROADCAST."""

    source: int
    destination: int
    payload: bytes

    @property
    def size_bytes(self) -> int:
        return max(len(self.payload), 1)


@dataclass
class PortCounters:
    """Conservation counters for one port.

    ``received`` counts copies that entered this port's pipeline: copies
    scheduled toward it, plus unknown-destination frames arriving from its
    node (the only port involved in those). At every instant
    ``received == forwarded + dropped_loss + dropped_unknown + queued``.
    """

    received: int = 0
    forwarded: int = 0
    dropped_loss: int = 0
    dropped_unknown: int = 0
    late: int = 0


@dataclass(frozen=True)
class DeliveryRecord:
    deliver_time_us: int
    port: int
    frame: Frame


class VirtualSwitch:
    """Forwarding engine shared by the event-mode and real-time engines.

    Single-owner: one engine drives it at a time. Deterministic given the
    per-leg rng seeds in the config and the admission order. Broadcast
    copies draw their ingress and egress impairments per destination, in
    ascending port order.
    """

    def __init__(self, config: SwitchConfig) -> None:
        self.config = config
        self._table = config.address_table
        self.ingress: dict[int, Link] = {
            pid: Link(p.ingress) for pid, p in self._table.items()
        }
        self.egress: dict[int, Link] = {
            pid: Link(p.egress) for pid, p in self._table.items()
        }
        self.counters: dict[int, PortCounters] = {
            pid: PortCounters() for pid in self._table
        }
        # frames riding each egress queue, keyed by (port, link sequence)
        self._pending: dict[tuple[int, int], Frame] = {}

    def forward(self, frame: Frame, now_us: int) -> list[tuple[int, int | None]]:
        """Schedule one frame; return [(egress port, deliver_time or None)].

        None marks a copy dropped by a loss draw. Unknown unicast
        destinations are counted against the source port and discarded (no
        flooding).
        """
        if frame.source not in self._table:
            raise UnknownDestination(f"source address {frame.source} not configured")
        if frame.size_bytes > self.config.mtu:
            raise ValueError(
                f"frame of {frame.size_bytes} bytes exceeds MTU {self.config.mtu}"
            )
        if frame.destination == BROADCAST:
            dests = sorted(pid for pid in self._table if pid != frame.source)
        elif frame.destination in self._table:
            dests = [frame.destination]
        else:
            self.counters[frame.source].received += 1
            self.counters[frame.source].dropped_unknown += 1
            return []

        out: list[tuple[int, int | None]] = []
        for dest in dests:
            self.counters[dest].received += 1
            t_mid = self.ingress[frame.source].transit(frame.size_bytes, now_us)
            if t_mid is None:
                self.counters[dest].dropped_loss += 1
                out.append((dest, None))
                continue
            link = self.egress[dest]
            seq = link.next_sequence
            deliver = link.admit(frame.payload, t_mid)
            if deliver is None:
                self.counters[dest].dropped_loss += 1
            else:
                self._pending[(dest, seq)] = frame
            out.append((dest, deliver))
        return out

    def pop_ready(self, port: int, now_us: int) -> list[tuple[int, Frame]]:
        """Deliveries due on one port: [(deliver_time, frame)] in pop order."""
        out = []
        for packet in self.egress[port].pop_ready(now_us):
            frame = self._pending.pop((port, packet.sequence))
            self.counters[port].forwarded += 1
            out.append((packet.deliver_time_us, frame))
        return out

    def queued(self, port: int) -> int:
        return len(self.egress[port].queue)

    def next_due_us(self) -> int | None:
        """Earliest pending deliver time across all ports, or None."""
        times = [
            t
            for link in self.egress.values()
            if (t := link.queue.peek_time()) is not None
        ]
        return min(times) if times else None

    def counters_csv(self) -> str:
        lines = ["port,received,forwarded,dropped_loss,dropped_unknown,late"]
        for pid in sorted(self.counters):
            c = self.counters[pid]
            lines.append(
                f"{pid},{c.received},{c.forwarded},{c.dropped_loss},"
                f"{c.dropped_unknown},{c.late}"
            )
        return "\n".join(lines) + "\n"


def run_event_mode(
    config: SwitchConfig, schedule: list[tuple[int, Frame]]
) -> list[DeliveryRecord]:
    """Run a time-ordered traffic schedule on a virtual clock.

    Returns the delivery log ordered by (deliver_time, port); ties within a
    port keep queue order. Bit-identical across runs with identical config
    (seeds) and schedule.
    """
    last = None
    for t, _ in schedule:
        if last is not None and t < last:
            raise ValueError("traffic schedule must be time-ordered")
        last = t
    switch = VirtualSwitch(config)
    for t, frame in schedule:
        switch.forward(frame, t)
    log: list[DeliveryRecord] = []
    for port in sorted(switch.egress):
        for deliver_time, frame in switch.pop_ready(port, _DRAIN_US):
            log.append(DeliveryRecord(deliver_time, port, frame))
    log.sort(key=lambda r: (r.deliver_time_us, r.port))
    return log
