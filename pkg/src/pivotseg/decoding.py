"""Turn per-utterance (h, b) scores into ordered, non-overlapping proposals."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

START, END, IN, OUT = 0, 1, 2, 3
STATE_NAMES = ("start", "end", "in", "out")
NEG_INF = -np.inf

# legal predecessors of each state
PREDECESSORS = {START: (END, OUT), END: (START, IN), IN: (START, IN), OUT: (END, OUT)}
INITIAL = (START, OUT)
DEFAULT_TERMINALS = (END, OUT)
LITERAL_TERMINALS = (IN, OUT)


class DecodeError(ValueError):
    pass


def parse_terminals(text: str) -> tuple[int, ...]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    try:
        states = tuple(STATE_NAMES.index(n) for n in names)
    except ValueError:
        raise DecodeError(f"unknown state in terminal set {text!r}") from None
    if set(states) not in ({END, OUT}, {IN, OUT}):
        raise DecodeError("terminal states must be 'end,out' or 'in,out'")
    return tuple(sorted(states))


@dataclass
class ScoreSequence:
    h: np.ndarray
    b: np.ndarray
    times: np.ndarray
    record_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1, 2)
        if not len(self.h) == len(self.b) == len(self.times):
            raise DecodeError("h, b and times must have equal length")

    def normalize(self) -> "ScoreSequence":
        if self.normalized:
            raise DecodeError(f"scores for {self.record_id!r} are already normalised")
        return ScoreSequence(minmax_normalize(self.h), minmax_normalize(self.b),
                             self.times, self.record_id, True)

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "h": self.h.tolist(), "b": self.b.tolist(),
                "times": self.times.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreSequence":
        return cls(obj["h"], obj["b"], obj["times"], obj.get("record_id", ""))


@dataclass
class Proposal:
    start_idx: int
    end_idx: int
    start_s: float
    end_s: float
    confidence: float
    record_id: str = ""

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "start_idx": self.start_idx,
                "end_idx": self.end_idx, "start_s": self.start_s, "end_s": self.end_s,
                "confidence": self.confidence}


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DecodeError("cannot normalise an empty vector")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def state_gains(h, b) -> np.ndarray:
    """Per-position score for entering each state, shape (L, 4)."""
    h, b = np.asarray(h, float), np.asarray(b, float)
    return np.stack([b, b, h * (1 - b), (1 - h) * (1 - b)], axis=1)


@dataclass
class DpTable:
    f: np.ndarray
    ptr: np.ndarray


def dp_decode(h, b, terminals=DEFAULT_TERMINALS) -> tuple[DpTable, np.ndarray, float]:
    """Fill the 4-state table and backtrack the best legal path.

    At equal scores the predecessor producing fewer proposals wins
    (out over end, in over start); the same rule picks the terminal state.
    """
    gains = state_gains(h, b)
    L = len(gains)
    if L == 0:
        raise DecodeError("cannot decode an empty sequence")
    f = np.full((L, 4), NEG_INF)
    ptr = np.full((L, 4), -1, dtype=np.int64)
    f[0, START] = gains[0, START]
    f[0, OUT] = gains[0, OUT]
    for i in range(1, L):
        prev = f[i - 1]
        # second entry of each pair is preferred on ties
        for state, (a, pref) in ((START, (END, OUT)), (END, (START, IN)),
                                 (IN, (START, IN)), (OUT, (END, OUT))):
            best = pref if prev[pref] >= prev[a] else a
            f[i, state] = prev[best] + gains[i, state]
            ptr[i, state] = best
    order = sorted(terminals, key=lambda s: (s != OUT, s != IN))
    last = max(order, key=lambda s: f[L - 1, s])
    if not np.isfinite(f[L - 1, last]):
        raise DecodeError("no legal terminal state")
    states = np.empty(L, dtype=np.int64)
    states[-1] = last
    for i in range(L - 1, 0, -1):
        states[i - 1] = ptr[i, states[i]]
    return DpTable(f, ptr), states, float(f[L - 1, last])


def path_score(states, h, b) -> float:
    gains = state_gains(h, b)
    total = 0.0
    for i, s in enumerate(states):
        total += gains[i, s]
    return total


def is_legal(states, terminals=DEFAULT_TERMINALS) -> bool:
    if len(states) == 0 or states[0] not in INITIAL or states[-1] not in terminals:
        return False
    return all(prev in PREDECESSORS[cur] for prev, cur in zip(states[:-1], states[1:]))


def brute_force_decode(h, b, terminals=DEFAULT_TERMINALS, max_len: int = 14):
    """Exhaustive search over legal state strings.

    Returns (best score, best states, all optimal state strings). Strings are
    grown one position at a time and abandoned as soon as a transition is
    illegal, so only legal prefixes are ever extended. Ties resolve to the
    lexicographically smallest string under start < end < in < out.
    """
    gains = state_gains(h, b)
    L = len(gains)
    if L > max_len:
        raise DecodeError(f"brute force limited to L <= {max_len}, got {L}")
    if L == 0:
        raise DecodeError("cannot decode an empty sequence")
    results = []

    def grow(prefix, score):
        i = len(prefix)
        if i == L:
            if prefix[-1] in terminals:
                results.append((score, tuple(prefix)))
            return
        for s in range(4):
            if i == 0 and s not in INITIAL:
                continue
            if i > 0 and prefix[-1] not in PREDECESSORS[s]:
                continue
            prefix.append(s)
            grow(prefix, score + gains[i, s])
            prefix.pop()

    grow([], 0.0)
    best = max(r[0] for r in results)
    optimal = sorted(r[1] for r in results if r[0] == best)
    return best, np.array(optimal[0]), [np.array(o) for o in optimal]


def path_to_proposals(states, scores: ScoreSequence, close_open: bool = False) -> list[Proposal]:
    """Pair each start with the following end; confidence is mean h over the span."""
    out = []
    open_at = None
    for i, s in enumerate(states):
        if s == START:
            if open_at is not None:
                raise DecodeError(f"start at {i} while a proposal is open")
            open_at = i
        elif s == END:
            if open_at is None:
                raise DecodeError(f"end at {i} without a start")
            out.append(_proposal(open_at, i, scores))
            open_at = None
    if open_at is not None:
        if not close_open:
            raise DecodeError("path ends inside an unclosed proposal")
        if open_at < len(states) - 1:
            out.append(_proposal(open_at, len(states) - 1, scores))
    return out


def _proposal(i: int, j: int, scores: ScoreSequence) -> Proposal:
    return Proposal(i, j, float(scores.times[i, 0]), float(scores.times[j, 1]),
                    float(scores.h[i : j + 1].mean()), scores.record_id)


def check_proposals(props: list[Proposal]) -> None:
    for p in props:
        if not p.start_idx < p.end_idx:
            raise DecodeError(f"proposal with start {p.start_idx} >= end {p.end_idx}")
    for a, c in zip(props[:-1], props[1:]):
        if not a.end_idx < c.start_idx:
            raise DecodeError("proposals overlap or are out of order")


def decode_dp(scores: ScoreSequence, terminals=DEFAULT_TERMINALS) -> list[Proposal]:
    if not scores.normalized:
        scores = scores.normalize()
    _, states, _ = dp_decode(scores.h, scores.b, terminals)
    props = path_to_proposals(states, scores, close_open=IN in terminals)
    check_proposals(props)
    return props


def simple_decode(scores: ScoreSequence, t_b: float = 0.25, t_h: float = 0.7) -> list[Proposal]:
    """Threshold baseline: pair consecutive boundary candidates, keep spans with mean h > t_h."""
    if not scores.normalized:
        scores = scores.normalize()
    cand = np.flatnonzero(scores.b > t_b)
    out = []
    for i, j in zip(cand[0::2], cand[1::2]):
        if scores.h[i : j + 1].mean() > t_h:
            out.append(_proposal(int(i), int(j), scores))
    check_proposals(out)
    return out


def greedy_decode(start_p, end_p, none_p, times, h=None, record_id: str = "") -> list[Proposal]:
    """Argmax labelling, then pair each start with the nearest following end.

    A start seen while another is open is treated as nested and skipped; ends
    with no open start are dropped. Confidence is mean h over the span when h
    is given, else the mean of the pair's start/end probabilities.
    """
    probs = np.stack([start_p, end_p, none_p], axis=1)
    labels = probs.argmax(axis=1)
    times = np.asarray(times, float).reshape(-1, 2)
    out = []
    open_at = None
    for i, lab in enumerate(labels):
        if lab == 0 and open_at is None:
            open_at = i
        elif lab == 1 and open_at is not None:
            conf = (float(np.mean(h[open_at : i + 1])) if h is not None
                    else float((start_p[open_at] + end_p[i]) / 2))
            out.append(Proposal(open_at, i, float(times[open_at, 0]), float(times[i, 1]),
                                conf, record_id))
            open_at = None
    check_proposals(out)
    return out


def dump_proposals(props: list[Proposal], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([p.to_json() for p in props], fh, indent=1)
        fh.write("\n")


def load_proposals(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

