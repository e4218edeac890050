"""Single directed link with statistical impairments and a delivery-ordered queue.

All times are integer microseconds. A link applies, in order: a Bernoulli
loss draw, a serialization delay from the configured bandwidth (the wire is
FIFO, so back-to-back packets queue behind each other), a fixed one-way
delay, and a uniform jitter term. The same seed and admission sequence
always reproduce the same outcomes, which is what makes event-mode runs
replayable.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass


@dataclass(frozen=True)
class LinkSpec:
    """Statistical impairment parameters of one directed link.

    ``bandwidth_bits_per_s == 0`` means unlimited (no serialization delay).
    ``jitter_half_width_us`` is the half-width of a uniform jitter window
    centered on ``one_way_delay_us``; it may not exceed the delay, so the
    effective delay can never go negative.
    """

    one_way_delay_us: int = 0
    jitter_half_width_us: int = 0
    loss_probability: float = 0.0
    bandwidth_bits_per_s: int = 0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError(
                f"loss_probability must be in [0, 1], got {self.loss_probability}"
            )
        if self.one_way_delay_us < 0:
            raise ValueError("one_way_delay_us must be >= 0")
        if not 0 <= self.jitter_half_width_us <= self.one_way_delay_us:
            raise ValueError(
                "jitter_half_width_us must be in [0, one_way_delay_us] "
                f"(got {self.jitter_half_width_us} for delay {self.one_way_delay_us})"
            )
        if self.bandwidth_bits_per_s < 0:
            raise ValueError("bandwidth_bits_per_s must be >= 0")


@dataclass(frozen=True)
class InFlightPacket:
    """A packet scheduled for future delivery on one link."""

    payload: bytes
    size_bytes: int
    ingress_time_us: int
    deliver_time_us: int
    sequence: int


class DelayQueue:
    """Packets pending delivery, ordered by (deliver_time, sequence)."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, InFlightPacket]] = []

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, packet: InFlightPacket) -> None:
        heapq.heappush(self._heap, (packet.deliver_time_us, packet.sequence, packet))

    def peek_time(self) -> int | None:
        """Deliver time of the earliest pending packet, or None if empty."""
        return self._heap[0][0] if self._heap else None

    def pop_ready(self, now_us: int) -> list[InFlightPacket]:
        """Remove and return every packet with deliver_time <= now, in order."""
        ready: list[InFlightPacket] = []
        while self._heap and self._heap[0][0] <= now_us:
            ready.append(heapq.heappop(self._heap)[2])
        return ready


def compute_serialization_delay(size_bytes: int, bandwidth_bits_per_s: int) -> int:
    """Time in µs to clock ``size_bytes`` onto a wire of the given bandwidth.

    Returns 0 for bandwidth 0 (unlimited). Rounded up to the 1 µs tick.
    """
    if size_bytes < 1:
        raise ValueError("size_bytes must be >= 1")
    if bandwidth_bits_per_s == 0:
        return 0
    bits = size_bytes * 8
    return -(-bits * 1_000_000 // bandwidth_bits_per_s)


@dataclass
class LinkCounters:
    admitted: int = 0
    dropped: int = 0
    delivered: int = 0


class Link:
    """One directed link: a LinkSpec, its RNG stream, and its delay queue.

    Draw discipline (fixed, so an independent generator with the same seed
    can replay outcomes): one ``random()`` call per admission for the loss
    decision; if the packet survives and jitter_half_width > 0, one
    ``randint(-j, +j)`` call for the jitter offset. Nothing else consumes
    the stream.
    """

    def __init__(self, spec: LinkSpec) -> None:
        self.spec = spec
        self.rng = random.Random(spec.rng_seed)
        self.queue = DelayQueue()
        self.counters = LinkCounters()
        self._next_seq = 0
        self._busy_until_us = 0

    @property
    def next_sequence(self) -> int:
        """Sequence number the next admitted packet will receive."""
        return self._next_seq

    def transit(self, size_bytes: int, now_us: int) -> int | None:
        """Run the impairment draws for one packet; return its deliver time.

        Returns None when the loss draw discards the packet. Serialization
        starts when the wire is free, so with jitter 0 the link is FIFO for
        any mix of packet sizes.
        """
        if self.rng.random() < self.spec.loss_probability:
            self.counters.dropped += 1
            return None
        start = max(now_us, self._busy_until_us)
        finish = start + compute_serialization_delay(
            size_bytes, self.spec.bandwidth_bits_per_s
        )
        self._busy_until_us = finish
        deliver = finish + self.spec.one_way_delay_us
        if self.spec.jitter_half_width_us > 0:
            j = self.spec.jitter_half_width_us
            deliver += self.rng.randint(-j, j)
        self.counters.admitted += 1
        return deliver

    def admit(self, payload: bytes, now_us: int) -> int | None:
        """Admit one packet at ``now_us``; queue it or drop it.

        Returns the scheduled deliver time, or None if the loss draw dropped
        the packet. Admission times on one link must be non-decreasing.
        """
        size = max(len(payload), 1)
        deliver = self.transit(size, now_us)
        if deliver is None:
            return None
        packet = InFlightPacket(
            payload=payload,
            size_bytes=size,
            ingress_time_us=now_us,
            deliver_time_us=deliver,
            sequence=self._next_seq,
        )
        self._next_seq += 1
        self.queue.push(packet)
        return deliver

    def pop_ready(self, now_us: int) -> list[InFlightPacket]:
        ready = self.queue.pop_ready(now_us)
        self.counters.delivered += len(ready)
        return ready
