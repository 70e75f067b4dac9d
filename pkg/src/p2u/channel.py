"""Analytic channel model and transfer accounting.

Channel time is ``bytes * 8 / bandwidth + delay``, evaluated in exact
rational arithmetic. Measured compute times (encode, decode, dequantize,
apply) and modeled channel times are kept in separate fields so reports can
be compared with or without the channel.
"""
from __future__ import annotations

import csv
import io
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Callable, Iterable, Literal

__all__ = [
    "ChannelConfig",
    "PhaseStats",
    "TransferReport",
    "ReportError",
    "channel_time",
    "p2u_delay_overhead",
    "bandwidth_requirement",
    "MetricsSink",
    "median_time",
    "DEFAULT_CHANNEL",
]


def _exact(x) -> Fraction:
    # via repr so that 0.01 means one hundredth, not its binary neighbour
    return x if isinstance(x, Fraction) else Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class ChannelConfig:
    bandwidth_bps: float
    delay_s: float = 0.0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if not self.delay_s >= 0:
            raise ValueError("propagation delay must be non-negative")


DEFAULT_CHANNEL = ChannelConfig(bandwidth_bps=100e6, delay_s=0.01)


def channel_time(nbytes: int, cfg: ChannelConfig) -> float:
    return float(Fraction(int(nbytes) * 8) / _exact(cfg.bandwidth_bps) + _exact(cfg.delay_s))


def p2u_delay_overhead(cfg: ChannelConfig) -> float:
    """Extra propagation delay of sequenced delivery (2C) over direct (C)."""
    return float(2 * _exact(cfg.delay_s) - _exact(cfg.delay_s))


@dataclass
class PhaseStats:
    size_bytes: int = 0
    encode_s: float = 0.0
    channel_s: float = 0.0
    decode_s: float = 0.0
    dequantize_s: float = 0.0

    @property
    def compute_s(self) -> float:
        return self.encode_s + self.decode_s + self.dequantize_s


class ReportError(ValueError):
    """A TransferReport's derived fields disagree with its phase fields."""


@dataclass
class TransferReport:
    """One progressive delivery: the base phase and (optionally) an update.

    Startup latencies include modeled channel time; the ``*_compute_s``
    properties give the compute-only figure (encode + decode + dequantize).
    """

    model_id: str
    base_bitwidth: int
    base: PhaseStats = field(default_factory=PhaseStats)
    update: PhaseStats | None = None
    update_bitwidth: int | None = None
    apply_s: float = 0.0
    mode: Literal["sequenced", "parallel"] = "sequenced"

    @property
    def startup_latency_low(self) -> float:
        b = self.base
        return b.encode_s + b.channel_s + b.decode_s + b.dequantize_s

    @property
    def startup_latency_proxy(self) -> float | None:
        if self.update is None:
            return None
        u = self.update
        update_path = u.encode_s + u.channel_s + u.decode_s
        if self.mode == "parallel":
            return max(self.startup_latency_low, update_path) + self.apply_s
        return self.startup_latency_low + update_path + self.apply_s

    @property
    def low_compute_s(self) -> float:
        return self.base.compute_s

    @property
    def update_compute_s(self) -> float | None:
        if self.update is None:
            return None
        return self.update.encode_s + self.update.decode_s + self.apply_s

    @property
    def total_bytes(self) -> int:
        return self.base.size_bytes + (self.update.size_bytes if self.update else 0)

    @property
    def max_phase_bytes(self) -> int:
        return max(self.base.size_bytes, self.update.size_bytes if self.update else 0)

    def validate(self) -> "TransferReport":
        """Recompute every derived field from phase fields and compare."""
        b, u = self.base, self.update
        phases = [b] if u is None else [b, u]
        for p in phases:
            for f in fields(p):
                v = getattr(p, f.name)
                if v < 0:
                    raise ReportError(f"negative {f.name}: {v}")
        low = b.encode_s + b.channel_s + b.decode_s + b.dequantize_s
        if low != self.startup_latency_low:
            raise ReportError("startup_latency_low inconsistent")
        if u is not None:
            update_path = u.encode_s + u.channel_s + u.decode_s
            if self.mode == "sequenced":
                expect = low + update_path + self.apply_s
            else:
                expect = max(low, update_path) + self.apply_s
            if expect != self.startup_latency_proxy:
                raise ReportError("startup_latency_proxy inconsistent")
            if self.total_bytes != b.size_bytes + u.size_bytes:
                raise ReportError("total_bytes inconsistent")
            if self.max_phase_bytes != max(b.size_bytes, u.size_bytes):
                raise ReportError("max_phase_bytes inconsistent")
        elif self.total_bytes != b.size_bytes:
            raise ReportError("total_bytes inconsistent")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(
            startup_latency_low=self.startup_latency_low,
            startup_latency_proxy=self.startup_latency_proxy,
            total_bytes=self.total_bytes,
            max_phase_bytes=self.max_phase_bytes,
        )
        return d

    def rows(self) -> list[dict]:
        """Table-style rows: Low-Prec., Update, Proxy."""
        out = [
            dict(row="Low-Prec.", bitwidth=self.base_bitwidth, size_bytes=self.base.size_bytes,
                 compute_s=self.low_compute_s, channel_s=self.base.channel_s,
                 startup_s=self.startup_latency_low),
        ]
        if self.update is not None:
            out.append(dict(row="Update", bitwidth=self.update_bitwidth, size_bytes=self.update.size_bytes,
                            compute_s=self.update_compute_s, channel_s=self.update.channel_s,
                            startup_s=self.startup_latency_proxy - self.startup_latency_low))
            out.append(dict(row="Proxy", bitwidth=self.update_bitwidth, size_bytes=self.total_bytes,
                            compute_s=self.low_compute_s + self.update_compute_s,
                            channel_s=self.base.channel_s + self.update.channel_s,
                            startup_s=self.startup_latency_proxy))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'':10} {'bits':>4} {'Size (MB)':>10} {'Time (s)':>9} {'Channel (s)':>11} {'Startup (s)':>11}"]
        for r in self.rows():
            lines.append(
                f"{r['row']:10} {r['bitwidth']:>4} {r['size_bytes'] / 1e6:>10.4f} {r['compute_s']:>9.4f}"
                f" {r['channel_s']:>11.4f} {r['startup_s']:>11.4f}"
            )
        return "\n".join(lines)


def bandwidth_requirement(report: TransferReport, mode: Literal["sequenced", "parallel"] = "sequenced") -> int:
    if mode == "sequenced":
        return report.max_phase_bytes
    if mode == "parallel":
        return report.total_bytes
    raise ValueError(f"unknown delivery mode {mode!r}")


class MetricsSink:
    """Append-only, thread-safe record of reports."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: list = []

    def append(self, item) -> None:
        with self._lock:
            self._items.append(item)

    def snapshot(self) -> list:
        with self._lock:
            return list(self._items)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


def median_time(fn: Callable, *args, repetitions: int = 5):
    """Run ``fn(*args)`` ``repetitions`` times; return (last result, median seconds)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    times = []
    result = None
    for _ in range(repetitions):
        start = time.perf_counter()
        result = fn(*args)
        times.append(time.perf_counter() - start)
    return result, statistics.median(times)


def sum_channel_times(sizes: Iterable[int], cfg: ChannelConfig) -> float:
    """Channel time of phases delivered back to back, each paying the delay."""
    return float(sum(Fraction(int(n) * 8) / _exact(cfg.bandwidth_bps) + _exact(cfg.delay_s) for n in sizes))
