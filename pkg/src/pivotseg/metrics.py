"""Average precision at tIoU thresholds and boundary F1."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
BOUNDARY_TOLERANCE_S = 5.0
MIN_PROPOSAL_S = 10.0


def tiou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if not (s1 < e1 and s2 < e2):
        raise ValueError(f"degenerate interval in tiou({a}, {b})")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    return inter / union


def _ranked(preds: dict) -> list[tuple[float, float, str, tuple]]:
    rows = []
    for rid, items in preds.items():
        for p in items:
            rows.append((float(p["confidence"]), float(p["start_s"]), rid,
                         (float(p["start_s"]), float(p["end_s"]))))
    # ties: earlier start, then record id, then earlier end
    rows.sort(key=lambda r: (-r[0], r[1], r[2], r[3][1]))
    return rows


def average_precision(preds: dict, gts: dict, threshold: float) -> float:
    """Dataset-level AP with one global confidence ranking.

    ``preds`` maps record id -> list of {start_s, end_s, confidence};
    ``gts`` maps record id -> list of (start_s, end_s). Each prediction, in
    ranked order, claims the unmatched same-record ground truth of highest
    tIoU if that tIoU reaches ``threshold``. AP is the all-point interpolated
    area under the precision/recall curve.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        warnings.warn("average_precision: no ground-truth intervals, returning 0")
        return 0.0
    used = {rid: np.zeros(len(v), bool) for rid, v in gts.items()}
    hits = []
    for _, _, rid, interval in _ranked(preds):
        truth = gts.get(rid, [])
        best, best_j = -1.0, -1
        for j, gt in enumerate(truth):
            if used[rid][j]:
                continue
            ov = tiou(interval, gt)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= threshold:
            used[rid][best_j] = True
            hits.append(1.0)
        else:
            hits.append(0.0)
    if not hits:
        return 0.0
    tp = np.cumsum(hits)
    recall = tp / n_gt
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def pr_curve(preds: dict, gts: dict, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw (recall, precision) points in ranked order, for plotting."""
    n_gt = max(1, sum(len(v) for v in gts.values()))
    used = {rid: np.zeros(len(v), bool) for rid, v in gts.items()}
    hits = []
    for _, _, rid, interval in _ranked(preds):
        cands = [(tiou(interval, gt), j) for j, gt in enumerate(gts.get(rid, []))
                 if not used[rid][j]]
        ov, j = max(cands, default=(-1.0, -1), key=lambda c: (c[0], -c[1]))
        ok = j >= 0 and ov >= threshold
        if ok:
            used[rid][j] = True
        hits.append(float(ok))
    tp = np.cumsum(hits) if hits else np.zeros(0)
    return tp / n_gt, tp / np.arange(1, len(hits) + 1)


@dataclass
class BoundaryCounts:
    f1: float
    p: int
    p_bar: int
    p_tilde: int


def boundary_f1(preds: dict, gts: dict, side: str = "start",
                tolerance: float = BOUNDARY_TOLERANCE_S,
                min_duration: float = MIN_PROPOSAL_S) -> BoundaryCounts:
    """F1 = 2*p_tilde / (p_bar + p) over start (or end) timestamps.

    Predictions shorter than ``min_duration`` seconds are discarded first.
    A surviving prediction counts toward p_tilde when its nearest same-record
    ground-truth boundary is closer than ``tolerance`` seconds; several
    predictions may count against the same ground truth.
    """
    if side not in ("start", "end"):
        raise ValueError("side must be 'start' or 'end'")
    col = 0 if side == "start" else 1
    p = p_bar = p_tilde = 0
    for rid in sorted(set(preds) | set(gts)):
        truth = np.array([g[col] for g in gts.get(rid, [])], dtype=float)
        p_bar += len(truth)
        for q in preds.get(rid, []):
            if q["end_s"] - q["start_s"] < min_duration:
                continue
            p += 1
            stamp = q["start_s"] if side == "start" else q["end_s"]
            if truth.size and np.min(np.abs(stamp - truth)) < tolerance:
                p_tilde += 1
    denom = p_bar + p
    return BoundaryCounts(2.0 * p_tilde / denom if denom else 0.0, p, p_bar, p_tilde)


@dataclass
class EvalReport:
    ap: dict[float, float]
    f1_start: float
    f1_end: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ap": {f"{t:.1f}": v for t, v in self.ap.items()},
            "f1_start": self.f1_start,
            "f1_end": self.f1_end,
            "counts": self.counts,
        }

    def table(self, label: str = "model") -> str:
        head1 = f"{'':<12}|{'Average Precision':^40}|{'F1':^16}"
        head2 = f"{'':<12}|" + "".join(f"{t:^8.1f}" for t in self.ap) + "|" + f"{'Start':^8}{'End':^8}"
        row = (f"{label:<12}|" + "".join(f"{100 * v:^8.1f}" for v in self.ap.values())
               + "|" + f"{100 * self.f1_start:^8.1f}{100 * self.f1_end:^8.1f}")
        rule = "-" * len(head2)
        return "\n".join([rule, head1, head2, rule, row, rule]) + "\n"


def evaluate(preds: dict, gts: dict, thresholds=THRESHOLDS) -> EvalReport:
    ap = {t: average_precision(preds, gts, t) for t in thresholds}
    start = boundary_f1(preds, gts, "start")
    end = boundary_f1(preds, gts, "end")
    counts = {
        side: {"p": c.p, "p_bar": c.p_bar, "p_tilde": c.p_tilde}
        for side, c in (("start", start), ("end", end))
    }
    return EvalReport(ap, start.f1, end.f1, counts)


def group_proposals(rows) -> dict:
    """List of proposal dicts carrying ``record_id`` -> per-record mapping."""
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r.get("record_id", ""), []).append(r)
    return out


def write_report(report: EvalReport, json_path, text_path=None, label="model") -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(report.table(label))
