"""Direct-quantization baseline versus progressive delivery, one row group per
base bitwidth, laid out as Size / Time / Top-1 columns."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .channel import ChannelConfig, PhaseStats, TransferReport, bandwidth_requirement, channel_time, median_time
from .codec import decode, encode
from .evalnet import LabeledDataset, MlpSpec, top1_accuracy
from .model_store import TensorModel
from .proto.client import ClientSession
from .proto.server import ServerRepository
from .quant import dequantize
from .update import UpdateModel, apply_update

COLUMNS = ["base_bits", "row", "bitwidth", "size_bytes", "size_mb", "time_s", "channel_s", "startup_s", "peak_bytes", "top1"]

NA = "n/a"


@dataclass
class BenchRow:
    base_bits: int
    row: str
    bitwidth: int
    size_bytes: int
    time_s: float
    channel_s: float
    startup_s: float
    peak_bytes: int
    top1: float | None

    def cells(self) -> dict[str, str]:
        """Every value rendered once, so table, CSV and JSON agree exactly."""
        return {
            "base_bits": str(self.base_bits),
            "row": self.row,
            "bitwidth": str(self.bitwidth),
            "size_bytes": str(self.size_bytes),
            "size_mb": f"{self.size_bytes / 1e6:.6f}",
            "time_s": f"{self.time_s:.6f}",
            "channel_s": f"{self.channel_s:.6f}",
            "startup_s": f"{self.startup_s:.6f}",
            "peak_bytes": str(self.peak_bytes),
            "top1": NA if self.top1 is None else f"{100 * self.top1:.2f}",
        }


def _timed_phase(data: bytes, channel: ChannelConfig, reps: int, wallclock: bool) -> tuple[PhaseStats, object]:
    obj = decode(data)
    is_update = isinstance(obj, UpdateModel)
    chan = channel_time(len(data), channel)
    if not wallclock:
        return PhaseStats(len(data), 0.0, chan, 0.0, 0.0), None if is_update else dequantize(obj)
    _, enc = median_time(encode, obj, repetitions=reps)
    _, dec = median_time(decode, data, repetitions=reps)
    if is_update:
        return PhaseStats(len(data), enc, chan, dec, 0.0), None
    deq, dq = median_time(dequantize, obj, repetitions=reps)
    return PhaseStats(len(data), enc, chan, dec, dq), deq


def run_bench(
    model: TensorModel,
    bitwidths,
    channel: ChannelConfig,
    *,
    repetitions: int = 5,
    dataset: LabeledDataset | None = None,
    wallclock: bool = True,
) -> tuple[list[BenchRow], list[TransferReport]]:
    """Deliver ``model`` through an in-process server at each base bitwidth.

    Artifacts come from a real request/response exchange; timings are then
    re-measured as medians over ``repetitions``. With ``wallclock=False``
    every compute time is zero and the output depends only on the inputs.
    """
    spec = MlpSpec.infer(model) if dataset is not None else None

    def acc(w: TensorModel) -> float | None:
        return None if spec is None else top1_accuracy(spec, w, dataset)

    repo = ServerRepository({model.name: model})
    rows: list[BenchRow] = []
    reports: list[TransferReport] = []
    for b in bitwidths:
        session = ClientSession(repo, channel)
        session.fetch_base(model.name, b)
        session.fetch_update()
        base_bytes = repo.prepare(model.name, b).bitstream.data
        update_bytes = repo.prepare_update(model.name, b).data
        base, low = _timed_phase(base_bytes, channel, repetitions, wallclock)
        update, _ = _timed_phase(update_bytes, channel, repetitions, wallclock)
        apply_s = 0.0
        if wallclock:
            _, apply_s = median_time(
                apply_update, session.low, decode(update_bytes), session.base_checksum, repetitions=repetitions
            )
        direct = TransferReport(model.name, b, base).validate()
        report = TransferReport(model.name, b, base, update, 32, apply_s).validate()
        reports.append(report)

        low_acc, proxy_acc = acc(low), acc(session.proxy)
        upd_s = report.startup_latency_proxy - report.startup_latency_low
        rows += [
            BenchRow(b, "Baseline", b, base.size_bytes, base.compute_s, base.channel_s,
                     direct.startup_latency_low, bandwidth_requirement(direct), low_acc),
            BenchRow(b, "Low-Prec.", b, base.size_bytes, report.low_compute_s, base.channel_s,
                     report.startup_latency_low, base.size_bytes, low_acc),
            BenchRow(b, "Update", 32, update.size_bytes, report.update_compute_s, update.channel_s,
                     upd_s, update.size_bytes, None),
            BenchRow(b, "Proxy", 32, report.total_bytes, report.low_compute_s + report.update_compute_s,
                     base.channel_s + update.channel_s, report.startup_latency_proxy,
                     bandwidth_requirement(report, "sequenced"), proxy_acc),
        ]
    return rows, reports


def format_rows(rows: list[BenchRow], output: str) -> str:
    cells = [r.cells() for r in rows]
    if output == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(cells)
        return buf.getvalue()
    if output == "json":
        def num(k, v):
            if k == "row":
                return v
            if v == NA:
                return None
            return float(v) if "." in v else int(v)

        return json.dumps([{k: num(k, v) for k, v in c.items()} for c in cells], indent=2) + "\n"
    if output == "table":
        head = ["base", "row", "bits", "Size (MB)", "Time (s)", "Channel (s)", "Startup (s)", "Peak (B)", "Top-1 (%)"]
        keys = ["base_bits", "row", "bitwidth", "size_mb", "time_s", "channel_s", "startup_s", "peak_bytes", "top1"]
        table = [head] + [[c[k] for k in keys] for c in cells]
        widths = [max(len(r[i]) for r in table) for i in range(len(head))]
        lines = []
        for r in table:
            lines.append("  ".join(v.ljust(w) if i == 1 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown output format {output!r}")
