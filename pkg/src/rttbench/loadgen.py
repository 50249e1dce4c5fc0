"""Disturbance sources: host stress workers and constant-bit-rate traffic.

Stress workers mirror the classic `stress` tool: CPU workers spin on
arithmetic, vm workers allocate/touch/free memory, io workers issue sync
calls, hdd workers write and remove temp files. All workers run as child
processes at default (non-real-time) scheduling so RT threads preempt
them.

CBR traffic is plain UDP paced on an absolute token schedule; datagrams
carry an 8-byte big-endian sequence number so a sink can account for loss.
It shares the benchmark's network path unprioritized, on its own port.
"""

import multiprocessing
import os
import socket
import struct
import tempfile
import threading
import time
from dataclasses import dataclass

from .errors import PartialStartError, StressSpecError, TransportError
from .pubsub import Endpoint

DEFAULT_VM_BYTES = 64 << 20
DEFAULT_CBR_PACKET = 1250  # gives round packet rates; never fragments
_HDD_BLOCK = 1 << 20
_HDD_BLOCKS = 8
_SEQ = struct.Struct("!Q")

_ctx = multiprocessing.get_context("fork")


@dataclass(frozen=True)
class StressSpec:
    cpu_workers: int = 0
    vm_workers: int = 0
    io_workers: int = 0
    hdd_workers: int = 0
    vm_bytes: int = DEFAULT_VM_BYTES

    def __post_init__(self):
        for name in ("cpu_workers", "vm_workers", "io_workers", "hdd_workers"):
            if getattr(self, name) < 0:
                raise StressSpecError(f"{name} must be >= 0")
        if self.vm_bytes <= 0:
            raise StressSpecError("vm_bytes must be positive")

    def total(self) -> int:
        return (self.cpu_workers + self.vm_workers + self.io_workers
                + self.hdd_workers)


def _cpu_worker(stop):
    x = 0x9E3779B9
    while not stop.is_set():
        for _ in range(20000):
            x = (x * x + 1) & 0xFFFFFFFF


def _vm_worker(stop, nbytes):
    page = 4096
    while not stop.is_set():
        block = bytearray(nbytes)
        for i in range(0, nbytes, page):
            block[i] = 0xA5
        del block


def _io_worker(stop):
    while not stop.is_set():
        os.sync()


def _hdd_worker(stop, tmpdir):
    block = b"\xA5" * _HDD_BLOCK
    while not stop.is_set():
        fd, path = tempfile.mkstemp(prefix="rttbench-hdd-", dir=tmpdir)
        try:
            for _ in range(_HDD_BLOCKS):
                if stop.is_set():
                    break
                os.write(fd, block)
            os.fsync(fd)
        finally:
            os.close(fd)
            os.unlink(path)


class StressHandle:
    """Owns the worker processes; stop() terminates and joins them all."""

    def __init__(self, spec: StressSpec, processes, stop_event):
        self.spec = spec
        self._procs = processes
        self._stop = stop_event

    def alive_count(self) -> int:
        return sum(1 for p in self._procs if p.is_alive())

    def pids(self) -> list[int]:
        return [p.pid for p in self._procs if p.pid is not None]

    def stop(self) -> None:
        """Idempotent; all workers are gone when this returns."""
        self._stop.set()
        deadline = time.monotonic() + 0.8
        for p in self._procs:
            p.join(max(0.0, deadline - time.monotonic()))
        for p in self._procs:
            if p.is_alive():
                p.terminate()
        for p in self._procs:
            p.join(1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_stress(spec: StressSpec, tmpdir: str | None = None) -> StressHandle:
    """Spawn the specified workers; rolls back on partial failure."""
    if spec.total() == 0:
        raise StressSpecError("stress enabled with zero workers")
    stop = _ctx.Event()
    tmpdir = tmpdir or tempfile.gettempdir()
    targets = (
        [( _cpu_worker, (stop,)) ] * spec.cpu_workers
        + [(_vm_worker, (stop, spec.vm_bytes))] * spec.vm_workers
        + [(_io_worker, (stop,))] * spec.io_workers
        + [(_hdd_worker, (stop, tmpdir))] * spec.hdd_workers
    )
    procs = []
    try:
        for fn, args in targets:
            p = _ctx.Process(target=fn, args=args, daemon=True)
            p.start()
            procs.append(p)
    except OSError as exc:
        handle = StressHandle(spec, procs, stop)
        handle.stop()
        raise PartialStartError(f"worker spawn failed after {len(procs)}: {exc}") from exc
    return StressHandle(spec, procs, stop)


@dataclass(frozen=True)
class CbrSpec:
    rate_bps: int
    dest: Endpoint
    packet_size: int = DEFAULT_CBR_PACKET
    duration_s: float | None = None  # None: run until stop()

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError("rate must be positive")
        if not 64 <= self.packet_size <= 1400:
            raise ValueError(f"packet_size {self.packet_size} outside 64..1400")

    @property
    def packets_per_second(self) -> float:
        return self.rate_bps / (self.packet_size * 8)


@dataclass
class TrafficReport:
    packets_sent: int
    bytes_sent: int
    elapsed_ns: int
    send_errors: int

    @property
    def achieved_bps(self) -> float:
        if self.elapsed_ns <= 0:
            return 0.0
        return self.bytes_sent * 8 / (self.elapsed_ns / 1e9)


class TrafficHandle:
    def __init__(self, thread, stop_event, report_box):
        self._thread = thread
        self._stop = stop_event
        self._box = report_box

    def running(self) -> bool:
        return self._thread.is_alive()

    def wait(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    def stop(self) -> TrafficReport:
        """Idempotent; returns the final send-side report."""
        self._stop.set()
        self._thread.join(5.0)
        return self._box[0]

    def report(self) -> TrafficReport:
        return self._box[0]


def start_cbr(spec: CbrSpec, rate_cap_bps: int | None = None) -> TrafficHandle:
    """Start a paced UDP sender toward spec.dest.

    Packet k leaves at t0 + k/pps on the absolute schedule, so short stalls
    are caught up in bursts and the average rate stays on target. An
    optional rate cap models devices that cannot sustain the requested
    rate.
    """
    rate = spec.rate_bps if rate_cap_bps is None else min(spec.rate_bps, rate_cap_bps)
    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 21)
    except OSError as exc:
        raise TransportError(f"cbr socket: {exc}") from exc

    stop = threading.Event()
    report = TrafficReport(0, 0, 0, 0)
    box = [report]
    dest = (spec.dest.address, spec.dest.port)
    pad = b"\x00" * (spec.packet_size - _SEQ.size)
    interval_ns = spec.packet_size * 8 * 1_000_000_000 / rate
    total = None if spec.duration_s is None \
        else int(spec.duration_s * rate / (spec.packet_size * 8))

    def _send_loop():
        seq = 0
        sent = errors = 0
        t0 = time.monotonic_ns()
        try:
            while not stop.is_set():
                if total is not None and seq >= total:
                    break
                now = time.monotonic_ns()
                due = int((now - t0) / interval_ns) + 1
                if total is not None:
                    due = min(due, total)
                while seq < due:
                    try:
                        sock.sendto(_SEQ.pack(seq) + pad, dest)
                        sent += 1
                    except OSError:
                        errors += 1
                    seq += 1
                next_ns = t0 + int(seq * interval_ns)
                delay = (next_ns - time.monotonic_ns()) / 1e9
                if delay > 0:
                    stop.wait(min(delay, 0.05))
        finally:
            report.packets_sent = sent
            report.bytes_sent = sent * spec.packet_size
            report.elapsed_ns = time.monotonic_ns() - t0
            report.send_errors = errors
            sock.close()

    thread = threading.Thread(target=_send_loop, name="cbr-send", daemon=True)
    thread.start()
    return TrafficHandle(thread, stop, box)


class CbrSink:
    """Counts CBR datagrams on a bound port; loss is inferred from seq gaps."""

    def __init__(self, local: Endpoint, recv_buffer: int = 1 << 22):
        try:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, recv_buffer)
            self._sock.bind((local.address, local.port))
            self._sock.settimeout(0.05)
        except OSError as exc:
            raise TransportError(f"cbr sink bind {local}: {exc}") from exc
        self.local = Endpoint(local.address, self._sock.getsockname()[1])
        self.packets = 0
        self.bytes = 0
        self.max_seq = -1
        self.first_rx_ns = 0
        self.last_rx_ns = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="cbr-sink",
                                        daemon=True)
        self._thread.start()

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, _ = self._sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            now = time.monotonic_ns()
            if not self.packets:
                self.first_rx_ns = now
            self.last_rx_ns = now
            self.packets += 1
            self.bytes += len(data)
            if len(data) >= _SEQ.size:
                seq = _SEQ.unpack_from(data)[0]
                if seq > self.max_seq:
                    self.max_seq = seq

    def lost(self) -> int:
        expected = self.max_seq + 1
        return max(0, expected - self.packets)

    def achieved_bps(self, window_ns: int | None = None) -> float:
        span = window_ns if window_ns else self.last_rx_ns - self.first_rx_ns
        if span <= 0:
            return 0.0
        return self.bytes * 8 / (span / 1e9)

    def close(self):
        if self._stop.is_set():
            return
        self._stop.set()
        self._thread.join(2.0)
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
