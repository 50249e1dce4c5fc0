"""Aggregate statistics and time-series export for round-trip samples.

All functions are pure over the sample list and order-independent.
LOST samples carry no rtt and are therefore excluded from min/avg/max
and the histogram; they are counted in `lost` and in `total`.
"""

import csv
import io
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

from .bench import RttSample, SampleClass
from .errors import ExportError

#: Fixed geometric bin edges, 4 per decade, 1 us .. 10 s. Samples outside
#: the range clamp into the first/last bin so bin totals always equal the
#: number of samples with an rtt.
HISTOGRAM_EDGES_US = tuple(round(10 ** (k / 4)) for k in range(29))
_NBINS = len(HISTOGRAM_EDGES_US) - 1

TIMESERIES_HEADER = ("seq", "t1_ns", "rtt_us", "class")


@dataclass(frozen=True)
class LatencyStats:
    """The paper-style table row plus tail percentiles and a histogram."""

    min_us: int | None
    avg_us: int | None
    max_us: int | None
    missed: int
    lost: int
    total: int
    p99_us: int | None = None
    p999_us: int | None = None
    histogram: tuple = tuple([0] * _NBINS)


def _avg_half_up(total: int, n: int) -> int:
    return (2 * total + n) // (2 * n)


def _nearest_rank(sorted_rtts: list[int], q_thousandths: int) -> int:
    # nearest-rank percentile: value at ceil(q*n), 1-indexed
    rank = max(1, -(-(len(sorted_rtts) * q_thousandths) // 1000))
    return sorted_rtts[rank - 1]


def _bin_index(rtt_us: int) -> int:
    return min(max(bisect_right(HISTOGRAM_EDGES_US, rtt_us) - 1, 0), _NBINS - 1)


def compute_stats(samples: list[RttSample]) -> LatencyStats:
    rtts = [s.rtt_us for s in samples if s.rtt_us is not None]
    missed = sum(1 for s in samples if s.cls is SampleClass.MISSED_DEADLINE)
    lost = sum(1 for s in samples if s.cls is SampleClass.LOST)
    hist = [0] * _NBINS
    for r in rtts:
        hist[_bin_index(r)] += 1
    if not rtts:
        return LatencyStats(None, None, None, missed, lost, len(samples),
                            histogram=tuple(hist))
    rtts.sort()
    return LatencyStats(
        min_us=rtts[0],
        avg_us=_avg_half_up(sum(rtts), len(rtts)),
        max_us=rtts[-1],
        missed=missed,
        lost=lost,
        total=len(samples),
        p99_us=_nearest_rank(rtts, 990),
        p999_us=_nearest_rank(rtts, 999),
        histogram=tuple(hist),
    )


def export_timeseries(samples: list[RttSample], sink) -> int:
    """Write one CSV row per sample (seq order, LF endings, UTF-8).

    `sink` is a path or a text file object. Returns the number of sample
    rows written (the header row is not counted). I/O failures raise
    ExportError; the sample list is never modified.
    """
    try:
        if isinstance(sink, (str, Path)):
            with open(sink, "w", encoding="utf-8", newline="") as fh:
                return _write_rows(samples, fh)
        return _write_rows(samples, sink)
    except OSError as exc:
        raise ExportError(f"time-series export failed: {exc}") from exc


def _write_rows(samples: list[RttSample], fh) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TIMESERIES_HEADER)
    for s in samples:
        writer.writerow((s.seq, s.t1_ns,
                         "" if s.rtt_us is None else s.rtt_us,
                         s.cls.value))
    return len(samples)


def import_timeseries(source) -> list[RttSample]:
    """Inverse of export_timeseries.

    The export schema has no t2 column; for non-lost samples t2 is
    reconstructed as t1 + rtt*1000, which keeps the LOST<->no-t2 invariant
    and is invisible to compute_stats.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return _read_rows(fh)
    return _read_rows(source)


def _read_rows(fh) -> list[RttSample]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != TIMESERIES_HEADER:
        raise ExportError(f"unexpected time-series header: {header}")
    samples = []
    for row in reader:
        if not row:
            continue
        seq, t1 = int(row[0]), int(row[1])
        rtt = int(row[2]) if row[2] != "" else None
        cls = SampleClass(row[3])
        t2 = None if rtt is None else t1 + rtt * 1000
        samples.append(RttSample(seq, t1, t2, rtt, cls))
    return samples


def stats_to_text(stats: LatencyStats) -> str:
    """Debug one-liner used by the CLI."""
    buf = io.StringIO()
    fmt = lambda v: "-" if v is None else str(v)
    buf.write(f"min {fmt(stats.min_us)} avg {fmt(stats.avg_us)} "
              f"max {fmt(stats.max_us)} us, missed {stats.missed}/{stats.total}, "
              f"lost {stats.lost}/{stats.total}")
    return buf.getvalue()
