"""Losses, scoring and the training loop with best-on-validation selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .data import Record
from .decoding import ScoreSequence, decode_dp, greedy_decode, simple_decode
from .metrics import average_precision, evaluate
from .model import HighlightModel, ModelOutput, PivotConfig
from .optim import OptimState, TrainingError, adamw_step, lr_at

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


def _bce(p: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if np.any(p.data < 0) or np.any(p.data > 1) or not np.all(np.isfinite(p.data)):
        raise FloatingPointError("probabilities outside [0, 1] reached the loss")
    q = ag.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -ag.tsum(target * ag.log(q) + (1.0 - target) * ag.log(1.0 - q))


def boundary_loss(b: Tensor, b_bar) -> Tensor:
    """Summed binary cross-entropy of boundary probabilities."""
    b = ag.as_tensor(b)
    if b.shape != np.shape(b_bar):
        raise ag.ShapeError("boundary predictions and labels differ in length")
    return _bce(b, b_bar)


def highlight_loss(h: Tensor, h_bar) -> Tensor:
    h = ag.as_tensor(h)
    if h.shape != np.shape(h_bar):
        raise ag.ShapeError("highlight predictions and labels differ in length")
    return _bce(h, h_bar)


def class_loss(probs: Tensor, c_bar) -> Tensor:
    """Summed cross-entropy of start/end/none probabilities."""
    c_bar = np.asarray(c_bar, dtype=np.int64)
    picked = ag.getitem(probs, (np.arange(len(c_bar)), c_bar))
    return -ag.tsum(ag.log(ag.clip(picked, PROB_FLOOR, 1.0)))


def total_loss(l_b, l_h, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_b + lam * l_h


def record_loss(model: HighlightModel, rec: Record) -> tuple[Tensor, ModelOutput]:
    out = model(rec.features)
    if model.cfg.boundary_head == "three_class":
        l_b = class_loss(out.class_probs, rec.labels.c_bar)
    else:
        l_b = boundary_loss(out.b, rec.labels.b_bar)
    l_h = highlight_loss(out.h, rec.labels.h_bar)
    return total_loss(l_b, l_h, model.cfg.lam), out


# ---------------------------------------------------------------------------
# inference helpers


def score_record(model: HighlightModel, rec: Record) -> tuple[ScoreSequence, ModelOutput]:
    with ag.no_grad():
        out = model(rec.features)
    seq = ScoreSequence(out.h.data.copy(), out.b.data.copy(), rec.annotation.times, rec.record_id)
    return seq, out


def predict(model: HighlightModel, records, strategy: str = "dp", terminals=None,
            t_b: float = 0.25, t_h: float = 0.7) -> dict[str, list[dict]]:
    """Proposals per record id under the chosen decoding strategy."""
    was_training = model.training
    model.eval()
    preds = {}
    try:
        for rec in records:
            seq, out = score_record(model, rec)
            if strategy == "dp":
                props = decode_dp(seq, terminals) if terminals else decode_dp(seq)
            elif strategy == "simple":
                props = simple_decode(seq, t_b, t_h)
            elif strategy == "greedy":
                if out.class_probs is None:
                    raise ValueError("greedy decoding needs a three_class boundary head")
                p = out.class_probs.data
                props = greedy_decode(p[:, 0], p[:, 1], p[:, 2], seq.times,
                                      h=seq.normalize().h, record_id=rec.record_id)
            else:
                raise ValueError(f"unknown strategy {strategy!r}")
            preds[rec.record_id] = [q.to_json() for q in props]
    finally:
        model.train(was_training)
    return preds


def ground_truth(records) -> dict[str, list[tuple[float, float]]]:
    return {rec.record_id: list(rec.annotation.highlights) for rec in records}


def evaluate_model(model, records, strategy: str = "dp", **kw):
    preds = predict(model, records, strategy, **kw)
    return evaluate(preds, ground_truth(records)), preds


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = -1.0

    def jsonl(self) -> str:
        lines = [json.dumps({"seed": self.seed, **e}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"


def train(model: HighlightModel, train_records, val_records, epochs: int = 20,
          base_lr: float = 3e-4, weight_decay: float = 5e-5, seed: int = 0,
          warmup_frac: float = 0.1, shuffle: bool = True):
    """Train with batch size one record; return (report, best checkpoint bytes).

    Validation AP@0.5 (DP decoding, or greedy for the three_class head) is
    measured after every epoch; the earliest epoch attaining the maximum wins.
    """
    if not train_records or not val_records:
        raise ValueError("training needs non-empty train and validation splits")
    total = epochs * len(train_records)
    state = OptimState(total_steps=total, base_lr=base_lr, weight_decay=weight_decay,
                       warmup_steps=max(1, round(warmup_frac * total)))
    params = model.parameters()
    order_rng = np.random.default_rng(seed)
    strategy = "greedy" if model.cfg.boundary_head == "three_class" else "dp"
    report = TrainReport(seed=seed)
    best_blob = checkpoint.dumps(model.named_parameters())

    for epoch in range(1, epochs + 1):
        model.train()
        order = order_rng.permutation(len(train_records)) if shuffle else np.arange(len(train_records))
        losses = []
        for idx in order:
            ag.zero_grads(params)
            with ag.Tape() as tape:
                loss, _ = record_loss(model, train_records[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            tape.backward(loss)
            lr = adamw_step(params, state)
            if lr != lr_at(state.step, state):
                raise TrainingError("learning-rate trace diverged from the schedule")
            report.lr_trace.append(lr)
            report.step_losses.append(value)
            losses.append(value)
        model.eval()
        val_preds = predict(model, val_records, strategy)
        metric = average_precision(val_preds, ground_truth(val_records), 0.5)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ap50": metric,
               "lr": report.lr_trace[-1]}
        report.epochs.append(row)
        log.info("epoch %d loss %.4f val AP@0.5 %.4f", epoch, row["train_loss"], metric)
        if metric > report.best_metric:
            report.best_metric = metric
            report.best_epoch = epoch
            best_blob = checkpoint.dumps(model.named_parameters())
    for row in report.epochs:
        row["selected"] = row["epoch"] == report.best_epoch
    checkpoint.load_into(model, best_blob)
    return report, best_blob

