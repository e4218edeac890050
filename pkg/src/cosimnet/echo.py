"""Echo round-trip benchmark: periodic UDP sender, echo server, statistics.

The response time of packet k is the span between the instant the sender
transmits it and the instant the echoed copy arrives back, both read from
one monotonic clock on the sender side (no cross-host clock sync needed).
Sends follow an absolute schedule: packet k targets start + k*period, so a
late send never shifts the rest of the train.

An event-mode variant runs the same exchange through a virtual switch on a
virtual clock with exact microsecond arithmetic.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .switch import Frame, SwitchConfig, VirtualSwitch

log = logging.getLogger(__name__)

_HEADER = struct.Struct("!QQ")  # sequence, send timestamp (µs)

HEADER_BYTES = _HEADER.size


class BindFailure(Exception):
    """A datagram endpoint could not be bound."""


class AllLost(Exception):
    """No response times to summarize: every sample was lost."""


@dataclass(frozen=True)
class EchoConfig:
    server: tuple[str, int]
    count: int
    period_us: int = 10_000
    payload_size: int = 64
    sender: tuple[str, int] | None = None
    timeout_us: int = 1_000_000

    def __post_init__(self) -> None:
        if self.period_us <= 0:
            raise ValueError("period_us must be positive")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.timeout_us <= 0:
            raise ValueError("timeout_us must be positive")
        if self.payload_size < HEADER_BYTES:
            raise ValueError(f"payload_size must be >= {HEADER_BYTES}")


@dataclass
class ResponseTimeSample:
    sequence: int
    send_time_us: int
    receive_time_us: int | None = None
    lost: bool = True

    @property
    def response_time_us(self) -> int | None:
        if self.receive_time_us is None:
            return None
        return self.receive_time_us - self.send_time_us


@dataclass(frozen=True)
class LatencyStats:
    n: int
    lost: int
    mean_us: float
    stddev_us: float
    min_us: int
    p50_us: int
    p99_us: int
    max_us: int
    histogram: list[tuple[int, int]]
    log_histogram: list[tuple[float, int]]


def _nearest_rank(sorted_values: np.ndarray, q: float) -> int:
    idx = max(int(math.ceil(q * len(sorted_values))) - 1, 0)
    return int(sorted_values[idx])


def _log_bin_lower(rtt_us: int) -> float:
    """Lower edge of the decade/3 logarithmic bin containing rtt."""
    if rtt_us < 1:
        return 0.0
    k = math.floor(3 * math.log10(rtt_us))
    return 10.0 ** (k / 3)


def summarize(
    samples: list[ResponseTimeSample], linear_bin_us: int = 10
) -> LatencyStats:
    """Aggregate samples into latency statistics and histograms.

    Lost samples are excluded from the moments and counted in ``lost``.
    The linear histogram uses fixed-width bins (default 10 µs); the log
    histogram uses edges at 10^(k/3) µs, with sub-µs responses collected
    in a bin with lower bound 0. Only non-empty bins are listed.
    """
    rtts = np.array(
        [s.response_time_us for s in samples if not s.lost], dtype=np.int64
    )
    lost = len(samples) - len(rtts)
    if len(rtts) == 0:
        raise AllLost(f"all {len(samples)} samples were lost")
    rtts.sort()

    linear: dict[int, int] = {}
    logbins: dict[float, int] = {}
    for r in rtts:
        lo = int(r // linear_bin_us) * linear_bin_us
        linear[lo] = linear.get(lo, 0) + 1
        llo = _log_bin_lower(int(r))
        logbins[llo] = logbins.get(llo, 0) + 1

    return LatencyStats(
        n=len(samples),
        lost=lost,
        mean_us=float(np.mean(rtts)),
        stddev_us=float(np.std(rtts)),
        min_us=int(rtts[0]),
        p50_us=_nearest_rank(rtts, 0.50),
        p99_us=_nearest_rank(rtts, 0.99),
        max_us=int(rtts[-1]),
        histogram=sorted(linear.items()),
        log_histogram=sorted(logbins.items()),
    )


def build_payload(sequence: int, send_time_us: int, payload_size: int) -> bytes:
    head = _HEADER.pack(sequence, send_time_us)
    return head + b"\x00" * (payload_size - len(head))


def parse_sequence(payload: bytes) -> int | None:
    if len(payload) < HEADER_BYTES:
        return None
    return _HEADER.unpack_from(payload)[0]


# --------------------------------------------------------------------------
# event mode
# --------------------------------------------------------------------------


def run_event_echo(
    config: SwitchConfig,
    sender: int,
    server: int,
    count: int,
    period_us: int = 10_000,
    payload_size: int = 64,
    timeout_us: int = 1_000_000,
    start_us: int = 0,
) -> list[ResponseTimeSample]:
    """Run the echo exchange through a virtual switch on a virtual clock.

    The server echoes at the exact microsecond a ping is delivered, so with
    jitter 0 every response time is exactly the two one-way delays plus any
    serialization time. A sample is lost when either leg drops it or the
    response exceeds the timeout.
    """
    if payload_size < HEADER_BYTES:
        raise ValueError(f"payload_size must be >= {HEADER_BYTES}")
    switch = VirtualSwitch(config)
    samples = [
        ResponseTimeSample(sequence=k, send_time_us=start_us + k * period_us)
        for k in range(count)
    ]

    # ping leg: admissions are chronological by construction
    ping_deliveries: list[int] = []
    for s in samples:
        payload = build_payload(s.sequence, s.send_time_us, payload_size)
        for port, deliver in switch.forward(
            Frame(sender, server, payload), s.send_time_us
        ):
            if port == server and deliver is not None:
                ping_deliveries.append(deliver)

    # echo leg: the server answers each ping verbatim the instant it arrives
    # (jitter may have reordered the arrivals)
    ping_deliveries.sort()
    echoes: list[tuple[int, bytes]] = []
    for deliver_time in ping_deliveries:
        for arrival, frame in switch.pop_ready(server, deliver_time):
            echoes.append((arrival, frame.payload))
    for arrival, payload in echoes:
        switch.forward(Frame(server, sender, payload), arrival)

    for deliver_time, frame in switch.pop_ready(sender, 2**62):
        seq = parse_sequence(frame.payload)
        if seq is None or not 0 <= seq < count:
            continue
        s = samples[seq]
        if s.receive_time_us is None:
            s.receive_time_us = deliver_time
            s.lost = deliver_time - s.send_time_us > timeout_us
    return samples


# --------------------------------------------------------------------------
# real time
# --------------------------------------------------------------------------


def now_us() -> int:
    return time.monotonic_ns() // 1000


def sleep_until_us(target_us: int, spin_us: int = 2_000) -> int:
    """Sleep until the monotonic clock reaches target; returns actual time.

    Coarse sleep until ``spin_us`` before the target, then yield-spin, which
    holds sub-100 µs precision even on coarse-tick kernels.
    """
    while True:
        now = now_us()
        if now >= target_us:
            return now
        remaining = target_us - now
        if remaining > spin_us:
            time.sleep((remaining - spin_us) / 1e6)
        else:
            time.sleep(0)


class EchoServer:
    """Echoes every received datagram verbatim back to its source."""

    def __init__(self, bind: tuple[str, int]) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self._sock.bind(bind)
        except OSError as exc:
            self._sock.close()
            raise BindFailure(f"cannot bind echo server to {bind}: {exc}") from exc
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.echoed = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> "EchoServer":
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        return self

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self._sock.sendto(data, addr)
            self.echoed += 1

    def serve_forever(self) -> None:
        self._serve()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sock.close()

    def __enter__(self) -> "EchoServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def run_echo_server(bind: tuple[str, int]) -> None:
    """Run an echo server in the calling thread until interrupted."""
    server = EchoServer(bind)
    log.info("echo server listening on %s:%d", *server.address)
    try:
        server.serve_forever()
    finally:
        server.stop()


def run_sender(config: EchoConfig) -> list[ResponseTimeSample]:
    """Send the configured packet train and collect response-time samples.

    Matching is duplicate-aware: only the first echo of a sequence counts;
    echoes arriving after the timeout leave the sample lost and are logged.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind(config.sender or ("127.0.0.1", 0))
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind sender to {config.sender}: {exc}") from exc
    sock.settimeout(0.1)

    samples = [ResponseTimeSample(sequence=k, send_time_us=0) for k in range(config.count)]
    lock = threading.Lock()
    done = threading.Event()
    late_echoes = 0

    def receive_loop() -> None:
        nonlocal late_echoes
        while not done.is_set():
            try:
                data, _ = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            t = now_us()
            seq = parse_sequence(data)
            if seq is None or not 0 <= seq < config.count:
                continue
            with lock:
                s = samples[seq]
                if s.receive_time_us is not None:
                    continue
                s.receive_time_us = t
                rtt = t - s.send_time_us
                if rtt <= config.timeout_us:
                    s.lost = False
                else:
                    late_echoes += 1

    rx = threading.Thread(target=receive_loop, daemon=True)
    rx.start()

    start = now_us() + 2_000
    max_send_skew = 0
    for k in range(config.count):
        actual = sleep_until_us(start + k * config.period_us)
        max_send_skew = max(max_send_skew, actual - (start + k * config.period_us))
        with lock:
            samples[k].send_time_us = actual
        sock.sendto(
            build_payload(k, actual, config.payload_size), config.server
        )

    deadline = samples[-1].send_time_us + config.timeout_us
    while now_us() < deadline:
        with lock:
            if all(s.receive_time_us is not None for s in samples):
                break
        time.sleep(0.002)

    done.set()
    rx.join()
    sock.close()

    if max_send_skew > 0.05 * config.period_us:
        log.warning(
            "send jitter reached %d µs (> 5%% of the %d µs period)",
            max_send_skew,
            config.period_us,
        )
    if late_echoes:
        log.warning("%d echoes arrived after the timeout (counted lost)", late_echoes)
    return samples
