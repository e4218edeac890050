"""Real-time UDP proxy: the virtual switch driven by the wall clock.

Each configured port owns one UDP socket. Datagrams arriving on a port's
``listen`` socket are treated as frames from that port's node; they are run
through the same dual-leg impairment path as event mode and scheduled for
delivery at their computed time on the monotonic clock. Deliveries to a
port are sent from that port's socket to its configured ``node`` endpoint.

Payloads travel unmodified — there is no addressing header on the wire —
so every port carries a static destination (a unicast peer or broadcast),
mirroring a fixed patch-panel topology. Publish-subscribe traffic maps to
broadcast ports.

Deliveries may run late by up to one scheduler quantum; lateness is counted
per port, never corrected retroactively. No lock is held across a blocking
socket operation.
"""

from __future__ import annotations

import copy
import socket
import threading
import time
from dataclasses import dataclass

from .echo import BindFailure, now_us
from .switch import Frame, SwitchConfig, VirtualSwitch


@dataclass(frozen=True)
class PortBinding:
    """Endpoints for one port: where its node's traffic arrives, where its
    deliveries go, and its static destination (port id or BROADCAST)."""

    listen: tuple[str, int]
    node: tuple[str, int]
    destination: int


class RealtimeProxy:
    """Relays datagrams between bound endpoints per virtual-switch semantics.

    Start with :meth:`start` (or as a context manager); \
    :meth:`counters_csv` can be read at any time, including after stop.
    """

    def __init__(
        self,
        config: SwitchConfig,
        bindings: dict[int, PortBinding],
        late_quantum_us: int = 1_000,
        spin_us: int = 2_000,
    ) -> None:
        table = config.address_table
        if set(bindings) != set(table):
            raise ValueError("bindings must cover exactly the configured ports")
        self._switch = VirtualSwitch(config)
        self._bindings = bindings
        self._late_quantum_us = late_quantum_us
        self._spin_us = spin_us
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._socks: dict[int, socket.socket] = {}
        try:
            for pid, binding in bindings.items():
                sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
                sock.bind(binding.listen)
                sock.settimeout(0.1)
                self._socks[pid] = sock
        except OSError as exc:
            for sock in self._socks.values():
                sock.close()
            raise BindFailure(f"cannot bind proxy port: {exc}") from exc

    def listen_address(self, port: int) -> tuple[str, int]:
        return self._socks[port].getsockname()

    def start(self) -> "RealtimeProxy":
        for pid in self._socks:
            t = threading.Thread(target=self._receive_loop, args=(pid,), daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._deliver_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        for t in self._threads:
            t.join()
        for sock in self._socks.values():
            sock.close()

    def __enter__(self) -> "RealtimeProxy":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def counters_csv(self) -> str:
        with self._cond:
            return self._switch.counters_csv()

    def counters(self, port: int):
        with self._cond:
            return copy.copy(self._switch.counters[port])

    def _receive_loop(self, pid: int) -> None:
        sock = self._socks[pid]
        dest = self._bindings[pid].destination
        mtu = self._switch.config.mtu
        while not self._stop.is_set():
            try:
                data, _ = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            t = now_us()
            with self._cond:
                if len(data) > mtu:
                    # unforwardable; keep the conservation identity intact
                    self._switch.counters[pid].received += 1
                    self._switch.counters[pid].dropped_unknown += 1
                    continue
                scheduled = self._switch.forward(Frame(pid, dest, data), t)
                if any(d is not None for _, d in scheduled):
                    self._cond.notify_all()

    def _deliver_loop(self) -> None:
        while not self._stop.is_set():
            with self._cond:
                due = self._switch.next_due_us()
                if due is None:
                    self._cond.wait(timeout=0.05)
                    continue
                now = now_us()
                if due > now + self._spin_us:
                    self._cond.wait(timeout=(due - now - self._spin_us) / 1e6)
                    continue
            while now_us() < due and not self._stop.is_set():
                # yield-spin for the last stretch: precise without hogging
                # the interpreter lock
                time.sleep(0)
            batch: list[tuple[int, bytes]] = []
            with self._cond:
                now = now_us()
                for pid in self._socks:
                    for deliver_time, frame in self._switch.pop_ready(pid, now):
                        if now - deliver_time > self._late_quantum_us:
                            self._switch.counters[pid].late += 1
                        batch.append((pid, frame.payload))
            for pid, payload in batch:
                try:
                    self._socks[pid].sendto(payload, self._bindings[pid].node)
                except OSError:
                    pass


def run_realtime_proxy(
    config: SwitchConfig, bindings: dict[int, PortBinding]
) -> RealtimeProxy:
    """Construct, start and return the proxy; caller owns stop()."""
    return RealtimeProxy(config, bindings).start()
