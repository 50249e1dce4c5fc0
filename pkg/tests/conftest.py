"""Shared fixtures and independent oracles for the test suite.

The oracles here re-derive expected behavior from first principles
(brute-force splitting, replaying the documented scheduling rules) and
must stay independent of the code paths they check.
"""

import math
import socket

import pytest

from rttbench.bench import SampleClass
from rttbench.pubsub import Endpoint


def free_udp_port() -> int:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def loopback_endpoint() -> Endpoint:
    return Endpoint("127.0.0.1", free_udp_port())


@pytest.fixture
def endpoint_pair():
    return loopback_endpoint(), loopback_endpoint()


def split_oracle(payload: bytes, chunk_cap: int) -> list[bytes]:
    """Brute-force splitter: consecutive chunks of at most chunk_cap bytes."""
    if len(payload) <= chunk_cap:
        return [payload]
    chunks = []
    pos = 0
    while pos < len(payload):
        chunks.append(payload[pos:pos + chunk_cap])
        pos += chunk_cap
    return chunks


def classify_oracle(rtt_us, deadline_us) -> SampleClass:
    """Spec rules verbatim: no reply -> LOST; above deadline -> missed; else OK."""
    if rtt_us is None:
        return SampleClass.LOST
    if rtt_us > deadline_us:
        return SampleClass.MISSED_DEADLINE
    return SampleClass.OK


def replay_oracle(delays, *, duration_ns, period_ns=10_000_000,
                  deadline_ns=10_000_000, loss_timeout_ns=500_000_000,
                  warmup_ns=0):
    """Brute-force replay of the cycle scheduling rules under scripted delays.

    `delays` maps seq -> reply delay in ns, None for a reply that never
    comes. Rules replayed: wakeups on the absolute grid k*period starting
    at virtual t=0; one ping in flight; a reply later than the loss
    timeout is a loss finalized at t1+loss_timeout; the next wakeup is the
    first grid point at or after the finalization time, and never earlier
    than the next grid point; the run covers wakeups up to and including
    t=warmup+duration, stopping early once the clock passes that end.
    Returns (t1, t2, rtt_us, class) tuples for the measurement window.
    """
    end = warmup_ns + duration_ns
    deadline_us = deadline_ns // 1000
    samples = []
    now = 0
    k = 0
    seq = 0
    while True:
        if now >= end:
            break
        wake = k * period_ns
        if wake > end:
            break
        t1 = wake
        delay = delays(seq) if callable(delays) else (
            delays[seq] if seq < len(delays) else None)
        if delay is not None and delay <= loss_timeout_ns:
            t2 = t1 + delay
            rtt_us = delay // 1000
            cls = classify_oracle(rtt_us, deadline_us)
            finalized = t2
        else:
            t2 = None
            rtt_us = None
            cls = SampleClass.LOST
            finalized = t1 + loss_timeout_ns
        if t1 >= warmup_ns:
            samples.append((t1, t2, rtt_us, cls))
        seq += 1
        k = max(k + 1, math.ceil(finalized / period_ns))
        now = finalized
    return samples
