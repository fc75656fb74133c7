"""Analytic MAC counting over a graph descriptor, latency timing and payload sizes."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

CONV_KINDS = ("conv", "pwconv", "dwconv")
ELEMENTWISE_KINDS = ("input", "add", "mul", "concat")


def standard_conv_macs(k: int, cin: int, cout: int, h: int, w: int) -> int:
    return k * k * cin * cout * h * w


def separable_conv_macs(k: int, cin: int, cout: int, h: int, w: int) -> int:
    return k * k * cin * h * w + cin * cout * h * w


def separable_ratio(k: int, cout: int) -> Fraction:
    return Fraction(1, cout) + Fraction(1, k * k)


@dataclass
class MacRow:
    name: str
    kind: str
    k: int
    cin: int
    cout: int
    h_out: int
    w_out: int
    macs: int
    branch: str


@dataclass
class SeparablePair:
    depthwise: str
    pointwise: str
    k: int
    cin: int
    cout: int
    h: int
    w: int
    macs: int
    standard_macs: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.macs, self.standard_macs)


@dataclass
class MacReport:
    rows: list[MacRow]
    pairs: list[SeparablePair] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.macs for r in self.rows)

    def by_branch(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            out[r.branch] = out.get(r.branch, 0) + r.macs
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "K", "C_in", "C_out", "H_out", "W_out", "MACs", "branch"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.k, r.cin, r.cout, r.h_out, r.w_out, r.macs, r.branch])
        return buf.getvalue()

    def text(self) -> str:
        lines = [f"{'layer':<36} {'kind':<7} {'K':>2} {'C_in':>5} {'C_out':>5} {'H':>4} {'W':>4} {'MACs':>12}"]
        for r in self.rows:
            if r.kind in CONV_KINDS:
                lines.append(f"{r.name:<36} {r.kind:<7} {r.k:>2} {r.cin:>5} {r.cout:>5} {r.h_out:>4} {r.w_out:>4} {r.macs:>12,}")
        for b, v in self.by_branch().items():
            lines.append(f"total[{b}] {v:,}")
        lines.append(f"total {self.total:,}")
        return "\n".join(lines) + "\n"


def _branch(name: str) -> str:
    head = name.split(".", 1)[0]
    return {"backbone_oi": "oi", "backbone_dem": "dem", "input_oi": "oi", "input_dem": "dem", "fusion": "fusion", "head": "heads"}.get(head, head)


def count_macs(graph: dict, input_hw: tuple[int, int] = (64, 64)) -> MacReport:
    """Evaluate the per-layer cost formulas over a static graph; nothing is executed."""
    dims: dict[str, tuple[int, int, int]] = {}
    rows = []
    layers = graph["layers"]
    for L in layers:
        kind = L["kind"]
        name = L["name"]
        if kind == "input":
            dims[L["output"]] = (L.get("cout", 1), *input_hw)
            rows.append(MacRow(name, kind, 0, 0, L.get("cout", 1), *input_hw, 0, _branch(name)))
            continue
        if kind not in CONV_KINDS + ELEMENTWISE_KINDS:
            raise ValueError(f"count_macs: unknown layer kind {kind!r} ({name})")
        ins = [dims[i] for i in L["inputs"]]
        c, h, w = ins[0]
        if kind in CONV_KINDS:
            k, s, p = L["k"], L["stride"], L["padding"]
            ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if kind == "dwconv":
                macs = k * k * L["cin"] * ho * wo
            else:
                macs = standard_conv_macs(k, L["cin"], L["cout"], ho, wo)
            dims[L["output"]] = (L["cout"], ho, wo)
            rows.append(MacRow(name, kind, k, L["cin"], L["cout"], ho, wo, macs, _branch(name)))
        else:
            cout = sum(d[0] for d in ins) if kind == "concat" else c
            dims[L["output"]] = (cout, h, w)
            rows.append(MacRow(name, kind, 0, c, cout, h, w, 0, _branch(name)))
    # a depthwise layer feeding straight into a pointwise layer is one separable conv
    by_name = {r.name: r for r in rows}
    consumer = {}
    for L in layers:
        for i in L.get("inputs", []):
            consumer.setdefault(i, []).append(L["name"])
    pairs = []
    for L in layers:
        if L["kind"] != "dwconv":
            continue
        nxt = consumer.get(L["output"], [])
        if len(nxt) == 1 and by_name[nxt[0]].kind == "pwconv":
            d, pw = by_name[L["name"]], by_name[nxt[0]]
            std = standard_conv_macs(d.k, d.cin, pw.cout, d.h_out, d.w_out)
            pairs.append(SeparablePair(d.name, pw.name, d.k, d.cin, pw.cout, d.h_out, d.w_out, d.macs + pw.macs, std))
    return MacReport(rows, pairs)


# ---- latency -----------------------------------------------------------------------

@dataclass
class LatencyStats:
    median_ms: float
    p95_ms: float
    repetitions: int
    threads: int

    def row(self) -> dict:
        return {"median_ms": self.median_ms, "p95_ms": self.p95_ms, "reps": self.repetitions, "threads": self.threads}


def blas_threads() -> int:
    return max((i.get("num_threads", 1) for i in threadpool_info()), default=1)


def bench_latency(fn, repetitions: int = 20, warmup: int = 2, threads: int | None = 1) -> LatencyStats:
    """Time ``fn()`` after ``warmup`` calls; BLAS pinned to ``threads`` (None leaves it alone)."""
    if repetitions < 10:
        raise ValueError("repetitions must be >= 10")
    with threadpool_limits(limits=threads):
        used = blas_threads()
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(repetitions):
            t = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t) * 1e3)
    times.sort()
    p95 = float(np.percentile(times, 95, method="higher"))
    return LatencyStats(statistics.median(times), p95, repetitions, used)


def float_weight_bytes(model) -> int:
    """f32 bytes of all conv weights (biases and BN vectors excluded)."""
    return sum(c.weight.data.size * 4 for c in model.convs())


def int8_weight_bytes(qmodel) -> int:
    return sum(c.layer.weight.size for _, c in qmodel.named_convs())


@dataclass
class BenchReport:
    macs: MacReport
    float_latency: LatencyStats | None
    int8_latency: LatencyStats | None
    float_weight_bytes: int
    int8_weight_bytes: int
    float_file_bytes: int | None = None
    int8_file_bytes: int | None = None
    input_hw: tuple[int, int] = (64, 64)

    def text(self) -> str:
        out = [self.macs.text()]
        for name, st in (("f32", self.float_latency), ("int8", self.int8_latency)):
            if st:
                out.append(f"latency {name}: median {st.median_ms:.2f} ms  p95 {st.p95_ms:.2f} ms  ({st.repetitions} reps, {st.threads} thread)")
        out.append(f"weight payload f32 {self.float_weight_bytes:,} B  int8 {self.int8_weight_bytes:,} B  ratio {self.int8_weight_bytes / self.float_weight_bytes:.4f}")
        if self.float_file_bytes and self.int8_file_bytes:
            out.append(f"file size f32 {self.float_file_bytes:,} B  int8 {self.int8_file_bytes:,} B  ratio {self.int8_file_bytes / self.float_file_bytes:.4f}")
        return "\n".join(out) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["mac_total", self.macs.total])
        for b, v in self.macs.by_branch().items():
            w.writerow([f"mac_{b}", v])
        for name, st in (("f32", self.float_latency), ("int8", self.int8_latency)):
            if st:
                w.writerow([f"latency_{name}_median_ms", f"{st.median_ms:.4f}"])
                w.writerow([f"latency_{name}_p95_ms", f"{st.p95_ms:.4f}"])
                w.writerow([f"latency_{name}_threads", st.threads])
        w.writerow(["weight_bytes_f32", self.float_weight_bytes])
        w.writerow(["weight_bytes_int8", self.int8_weight_bytes])
        if self.float_file_bytes:
            w.writerow(["file_bytes_f32", self.float_file_bytes])
        if self.int8_file_bytes:
            w.writerow(["file_bytes_int8", self.int8_file_bytes])
        return buf.getvalue()
