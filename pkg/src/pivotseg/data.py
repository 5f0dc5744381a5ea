"""Annotation / feature file formats, dataset splits and the synthetic generator."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import RecordFeatures, pool_filterbank
from .nn import ConfigError

AFMX_MAGIC = b"AFMX"
AFMX_VERSION = 1
DEFAULT_SPLIT = (3055, 100, 500)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# AFMX feature matrices


def save_afmx(matrix, path) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DataError("AFMX stores 2-D matrices only")
    header = AFMX_MAGIC + struct.pack("<III", AFMX_VERSION, m.shape[0], m.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_afmx(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != AFMX_MAGIC:
        raise DataError(f"{path}: not an AFMX file")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != AFMX_VERSION:
        raise DataError(f"{path}: unsupported AFMX version {version}")
    if len(blob) - 16 != rows * cols * 4:
        raise DataError(f"{path}: payload is {len(blob) - 16} bytes, expected {rows * cols * 4}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------------------
# annotations


@dataclass
class Utterance:
    start_s: float
    end_s: float
    speaker_id: int
    feature_row: int
    frame_offset: int = 0
    frame_count: int = 0


@dataclass
class RecordAnnotation:
    record_id: str
    duration_s: float
    utterances: list[Utterance]
    highlights: list[tuple[float, float]] = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([[u.start_s, u.end_s] for u in self.utterances]).reshape(-1, 2)

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "duration_s": self.duration_s,
            "utterances": [asdict(u) for u in self.utterances],
            "highlights": [{"start_s": s, "end_s": e} for s, e in self.highlights],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RecordAnnotation":
        return cls(
            record_id=str(obj["record_id"]),
            duration_s=float(obj["duration_s"]),
            utterances=[Utterance(**u) for u in obj["utterances"]],
            highlights=[(float(h["start_s"]), float(h["end_s"])) for h in obj["highlights"]],
        )


def validate_record(rec: RecordAnnotation, where: str = "") -> None:
    loc = f"{where}record {rec.record_id!r}"
    prev_end = -math.inf
    for i, u in enumerate(rec.utterances):
        if not u.start_s < u.end_s:
            raise DataError(f"{loc}: utterance {i} has start >= end")
        if u.start_s < prev_end:
            raise DataError(f"{loc}: utterance {i} overlaps or precedes utterance {i - 1}")
        if u.speaker_id < 0:
            raise DataError(f"{loc}: utterance {i} has a negative speaker id")
        prev_end = u.end_s
    prev_end = -math.inf
    for i, (s, e) in enumerate(rec.highlights):
        if not s < e:
            raise DataError(f"{loc}: highlight {i} has start >= end")
        if not prev_end < s:
            raise DataError(f"{loc}: highlight {i} overlaps highlight {i - 1} (e_{i} >= s_{i + 1})")
        prev_end = e


def load_annotations(path) -> list[RecordAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = RecordAnnotation.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: malformed record ({exc})") from exc
            validate_record(rec, f"{path}:{n}: ")
            out.append(rec)
    return out


def save_annotations(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# labels


@dataclass
class LabelSequence:
    b_bar: np.ndarray
    h_bar: np.ndarray
    c_bar: np.ndarray  # 0 start, 1 end, 2 none


def runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (first, last) index pairs."""
    mask = np.asarray(mask, bool)
    out, i = [], 0
    while i < len(mask):
        if mask[i]:
            j = i
            while j + 1 < len(mask) and mask[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def labels_from_annotations(rec: RecordAnnotation) -> LabelSequence:
    """h_bar marks utterances whose midpoint falls inside a highlight; b_bar
    marks the first and last utterance of each maximal h_bar run."""
    for (s1, e1), (s2, _) in zip(rec.highlights[:-1], rec.highlights[1:]):
        if not e1 < s2:
            raise DataError(f"record {rec.record_id!r}: overlapping highlights")
    L = len(rec.utterances)
    h_bar = np.zeros(L)
    for i, u in enumerate(rec.utterances):
        mid = 0.5 * (u.start_s + u.end_s)
        if any(s <= mid <= e for s, e in rec.highlights):
            h_bar[i] = 1.0
    b_bar = np.zeros(L)
    c_bar = np.full(L, 2, dtype=np.int64)
    for i, j in runs(h_bar > 0):
        b_bar[i] = b_bar[j] = 1.0
        c_bar[j] = 1
        c_bar[i] = 0
    return LabelSequence(b_bar, h_bar, c_bar)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    n_records: int = 40
    scale: float = 1.0
    mean_utterances: float = 298.58
    mean_highlights: float = 9.60
    mean_highlight_duration_s: float = 211.87
    highlight_ratio: float = 0.0765
    utterance_share: float = 0.9163
    mean_record_duration_s: float = 2861.55 * 3600 / 3655
    n_speakers: int = 8
    signal_strength: float = 2.0
    semantic_dim: int = 768
    n_mels: int = 128
    latent_dim: int = 16
    min_run: int = 2
    min_utterances: int = 10
    seed: int = 0

    @property
    def mean_utterance_s(self) -> float:
        return self.utterance_share * self.mean_record_duration_s / self.mean_utterances

    def validate(self):
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if not 1 <= self.latent_dim <= min(self.semantic_dim, self.n_mels):
            raise ConfigError("latent_dim must lie in [1, min(semantic_dim, n_mels)]")
        if not 0 < self.highlight_ratio < 1:
            raise ConfigError("highlight_ratio must lie in (0, 1)")
        for name in ("mean_utterances", "mean_highlights", "mean_record_duration_s", "scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.highlight_ratio * self.mean_utterances * self.scale < self.min_run:
            raise ConfigError(
                f"infeasible: ratio * utterances = "
                f"{self.highlight_ratio * self.mean_utterances * self.scale:.2f} "
                f"< minimal run {self.min_run}"
            )


@dataclass
class SyntheticDataset:
    annotations: list[RecordAnnotation]
    semantic: np.ndarray
    filterbanks: np.ndarray
    config: SyntheticConfig


def _stochastic_round(x: float, rng) -> int:
    lo = math.floor(x)
    return lo + int(rng.random() < x - lo)


def _plant_runs(L: int, total: int, k: int, min_run: int, rng) -> np.ndarray:
    lengths = np.full(k, min_run) + rng.multinomial(total - k * min_run, np.full(k, 1.0 / k))
    free = L - int(lengths.sum()) - (k - 1)
    gaps = rng.multinomial(free, np.full(k + 1, 1.0 / (k + 1)))
    mask = np.zeros(L, bool)
    pos = gaps[0]
    for i, n in enumerate(lengths):
        mask[pos : pos + n] = True
        pos += n + 1 + gaps[i + 1]
    return mask


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Seeded records whose highlight runs leave traces in all three views.

    Utterance counts are Poisson around ``mean_utterances * scale``; highlight
    runs cover about ``highlight_ratio`` of the utterances. ``signal_strength``
    shifts the semantic mean along a fixed direction, raises the filterbank
    standard deviation, and biases highlight speech toward speaker 0; at 0 the
    features carry no label information.

    Semantic vectors and filterbank frames vary only inside fixed random
    ``latent_dim``-dimensional subspaces. Full-rank noise would let a model
    memorise every utterance of a small training set instead of learning the
    planted cues.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s = cfg.signal_strength
    r_dim = cfg.latent_dim
    sem_basis = np.linalg.qr(rng.normal(size=(cfg.semantic_dim, r_dim)))[0]
    direction = sem_basis[:, 0]
    mel_basis = np.linalg.qr(rng.normal(size=(cfg.n_mels, r_dim)))[0] * math.sqrt(cfg.n_mels / r_dim)
    mel_profile = rng.normal(scale=0.5, size=cfg.n_mels)
    expert_prob = 1.0 - math.exp(-s)
    mean_gap = cfg.mean_utterance_s * (1 - cfg.utterance_share) / cfg.utterance_share

    annotations, sem_rows, fb_rows = [], [], []
    row = frame = 0
    for r in range(cfg.n_records):
        L = max(cfg.min_utterances, int(rng.poisson(cfg.mean_utterances * cfg.scale)))
        total = _stochastic_round(cfg.highlight_ratio * L, rng)
        k = max(1, int(rng.poisson(cfg.mean_highlights * cfg.scale)))
        k = min(k, max(1, total // cfg.min_run), (L + 1) // (cfg.min_run + 1))
        total = max(total, k * cfg.min_run)
        label = _plant_runs(L, total, k, cfg.min_run, rng)

        durations = rng.gamma(4.0, cfg.mean_utterance_s / 4.0, size=L)
        gaps = rng.exponential(mean_gap, size=L + 1)
        utts, t = [], gaps[0]
        for i in range(L):
            y = label[i]
            if y and rng.random() < expert_prob:
                spk = 0
            else:
                spk = int(rng.integers(cfg.n_speakers))
            n_frames = max(8, int(round(durations[i])))
            sigma = 1.0 + 0.5 * s * y
            fb_rows.append(mel_profile + sigma * rng.normal(size=(n_frames, r_dim)) @ mel_basis.T)
            sem_rows.append(sem_basis @ rng.normal(size=r_dim) + s * y * direction)
            start = round(t, 3)
            end = round(t + durations[i], 3)
            utts.append(Utterance(start, end, spk, row, frame, n_frames))
            row += 1
            frame += n_frames
            t = end + gaps[i + 1]
        highlights = [(utts[i].start_s, utts[j].end_s) for i, j in runs(label)]
        annotations.append(RecordAnnotation(f"rec{r:05d}", round(t, 3), utts, highlights))

    return SyntheticDataset(
        annotations,
        np.stack(sem_rows),
        np.concatenate(fb_rows, axis=0),
        cfg,
    )


# ---------------------------------------------------------------------------
# splits and on-disk datasets


def split_sizes(n: int, fractions=DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Validation and test sizes are rounded half-up; train takes the rest."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() <= 0:
        raise ConfigError("fractions must be three non-negative numbers")
    fr = fr / fr.sum()
    n_val = int(math.floor(n * fr[1] + 0.5))
    n_test = int(math.floor(n * fr[2] + 0.5))
    sizes = (n - n_val - n_test, n_val, n_test)
    if min(sizes) < 1:
        raise ConfigError(f"split of {n} records by {tuple(fractions)} leaves an empty subset")
    return sizes


def split(records, fractions=DEFAULT_SPLIT, seed: int = 0):
    n_train, n_val, _ = split_sizes(len(records), fractions)
    order = np.random.default_rng(seed).permutation(len(records))
    picked = [records[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


@dataclass
class Record:
    annotation: RecordAnnotation
    features: RecordFeatures
    labels: LabelSequence

    @property
    def record_id(self) -> str:
        return self.annotation.record_id


def record_features(rec: RecordAnnotation, semantic: np.ndarray, fbank: np.ndarray) -> RecordFeatures:
    rows = [u.feature_row for u in rec.utterances]
    pooled = np.stack([
        pool_filterbank(fbank[u.frame_offset : u.frame_offset + u.frame_count]).reshape(-1)
        for u in rec.utterances
    ])
    speakers = np.array([u.speaker_id for u in rec.utterances], dtype=np.int64)
    return RecordFeatures(semantic[rows], speakers, pooled)


def save_dataset(ds: SyntheticDataset, out_dir, split_seed: int = 0,
                 fractions=DEFAULT_SPLIT) -> dict[str, list[str]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_annotations(ds.annotations, out / "annotations.jsonl")
    save_afmx(ds.semantic, out / "semantic.afmx")
    save_afmx(ds.filterbanks, out / "fbank.afmx")
    tr, va, te = split(ds.annotations, fractions, seed=split_seed)
    splits = {"train": [r.record_id for r in tr], "val": [r.record_id for r in va],
              "test": [r.record_id for r in te]}
    (out / "splits.json").write_text(json.dumps(splits, indent=1) + "\n", encoding="utf-8")
    return splits


def load_dataset(data_dir) -> tuple[dict[str, list[Record]], dict]:
    """Read a dataset directory; returns ({split: records}, info)."""
    root = Path(data_dir)
    annotations = load_annotations(root / "annotations.jsonl")
    semantic = load_afmx(root / "semantic.afmx")
    fbank = load_afmx(root / "fbank.afmx")
    seen = np.zeros(semantic.shape[0], dtype=np.int64)
    for rec in annotations:
        for u in rec.utterances:
            if not 0 <= u.feature_row < semantic.shape[0]:
                raise DataError(f"record {rec.record_id!r}: feature_row {u.feature_row} out of range")
            if u.frame_count < 1 or u.frame_offset + u.frame_count > fbank.shape[0]:
                raise DataError(f"record {rec.record_id!r}: bad filterbank frame range")
            seen[u.feature_row] += 1
    if np.any(seen != 1):
        raise DataError("every feature row must be referenced exactly once")
    by_id = {
        rec.record_id: Record(rec, record_features(rec, semantic, fbank), labels_from_annotations(rec))
        for rec in annotations
    }
    splits_path = root / "splits.json"
    if splits_path.exists():
        ids = json.loads(splits_path.read_text(encoding="utf-8"))
    else:
        tr, va, te = split(annotations)
        ids = {"train": [r.record_id for r in tr], "val": [r.record_id for r in va],
               "test": [r.record_id for r in te]}
    unknown = sorted({i for members in ids.values() for i in members} - set(by_id))
    if unknown:
        raise DataError(f"splits.json names unknown records: {unknown[:3]}")
    groups = {name: [by_id[i] for i in members] for name, members in ids.items()}
    groups["all"] = list(by_id.values())
    info = {
        "semantic_dim": semantic.shape[1],
        "n_mels": fbank.shape[1],
        "n_speakers": 1 + max((u.speaker_id for r in annotations for u in r.utterances), default=0),
    }
    return groups, info
