"""Read identity by global alignment, throughput, and model reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numba import njit

from .quant import bops, layers_latency, model_size_bytes

_CODES = {"A": 0, "C": 1, "G": 2, "T": 3}


@dataclass(frozen=True)
class AlignmentResult:
    matches: int
    mismatches: int
    insertions: int
    deletions: int
    score: int = 0

    @property
    def alignment_length(self) -> int:
        return self.matches + self.mismatches + self.insertions + self.deletions

    @property
    def identity(self) -> float:
        n = self.alignment_length
        return self.matches / n if n else 0.0


@njit(cache=True)
def _nw(a, b):
    n, m = a.shape[0], b.shape[0]
    score = np.empty((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        score[i, 0] = -i
    for j in range(m + 1):
        score[0, j] = -j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = score[i - 1, j - 1] + (1 if a[i - 1] == b[j - 1] else -1)
            up = score[i - 1, j] - 1
            left = score[i, j - 1] - 1
            best = diag
            if up > best:
                best = up
            if left > best:
                best = left
            score[i, j] = best
    i, j = n, m
    mat = mis = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            s = 1 if a[i - 1] == b[j - 1] else -1
            if score[i, j] == score[i - 1, j - 1] + s:
                if s == 1:
                    mat += 1
                else:
                    mis += 1
                i -= 1
                j -= 1
                continue
        if i > 0 and score[i, j] == score[i - 1, j] - 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return mat, mis, ins, dels, score[n, m]


def _codes(seq: str) -> np.ndarray:
    return np.frombuffer(seq.encode("ascii"), dtype=np.uint8)


def align_identity(call: str, truth: str) -> AlignmentResult:
    """Global alignment (match +1, mismatch -1, gap -1) of a call to its truth.

    ``deletions`` count bases of ``call`` aligned to a gap and ``insertions``
    count bases of ``truth`` aligned to a gap.  Traceback prefers the
    diagonal, then a deletion, then an insertion.
    """
    if not call or not truth:
        raise ValueError("align_identity needs two non-empty sequences")
    mat, mis, ins, dels, score = _nw(_codes(call), _codes(truth))
    return AlignmentResult(int(mat), int(mis), int(ins), int(dels), int(score))


def throughput(bases_emitted: int, wall_seconds: float) -> float:
    """Kilobases per second."""
    if wall_seconds <= 0:
        raise ValueError("wall_seconds must be positive")
    return bases_emitted / 1000.0 / wall_seconds


def identity_summary(values) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarize")
    return {
        "mean": float(v.mean()),
        "min": float(v.min()),
        "max": float(v.max()),
        "median": float(np.percentile(v, 50)),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
    }


REPORT_COLUMNS = ("layer", "params", "bits", "bytes", "bops", "latency")


def model_report(model) -> dict:
    """Per-layer size/BOPs/latency rows plus totals cross-checked against the accounting."""
    rows = []
    costs = [c for c in model.layer_costs() if c.params > 0]
    for c in costs:
        rows.append({
            "layer": c.name,
            "params": c.params,
            "bits": str(c.quant),
            "bytes": c.params * c.quant.weight_bits / 8,
            "bops": bops(c),
            "latency": layers_latency([c]),
        })
    totals = {
        "params": sum(r["params"] for r in rows),
        "bytes": sum(r["bytes"] for r in rows),
        "bops": sum(r["bops"] for r in rows),
        "latency": sum(r["latency"] for r in rows),
    }
    expected_bytes = model_size_bytes(model)["total_bytes"]
    expected_bops = sum(bops(c) for c in model.layer_costs())
    if totals["bytes"] != expected_bytes or totals["bops"] != expected_bops:
        raise AssertionError("report totals disagree with quantization accounting")
    return {"rows": rows, "totals": totals}


def report_text(report: dict) -> str:
    rows = report["rows"]
    cells = [list(REPORT_COLUMNS)]
    for r in rows:
        cells.append([r["layer"], str(r["params"]), r["bits"], f"{r['bytes']:g}", str(r["bops"]), f"{r['latency']:.1f}"])
    t = report["totals"]
    cells.append(["TOTAL", str(t["params"]), "", f"{t['bytes']:g}", str(t["bops"]), f"{t['latency']:.1f}"])
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(REPORT_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for r in report["rows"]:
        writer.writerow(r)
    return buf.getvalue()
