"""Per-utterance input embeddings from the semantic, speaker and pattern views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, Embedding, Linear, Module

MODALITIES = ("S", "K", "P")
POOLED_FRAMES = 8


def parse_modalities(text: str) -> frozenset[str]:
    """``"S+K+P"`` -> {"S", "K", "P"}. The semantic view is always required."""
    parts = frozenset(p.strip().upper() for p in text.split("+") if p.strip())
    unknown = parts - set(MODALITIES)
    if unknown or "S" not in parts:
        raise ValueError(f"bad modality set {text!r}; expected S, S+P, S+K or S+K+P")
    return parts


def modality_label(mask) -> str:
    return "+".join(m for m in MODALITIES if m in mask)


def pool_filterbank(fbank: np.ndarray, bins: int = POOLED_FRAMES) -> np.ndarray:
    """Adaptive mean pooling of a (T, n_mels) filterbank to (bins, n_mels).

    Bin i averages frames [floor(i*T/bins), floor((i+1)*T/bins)); when T < bins
    an empty bin is widened to the single frame at its start.
    """
    fbank = np.asarray(fbank, dtype=np.float64)
    if fbank.ndim != 2 or fbank.shape[0] == 0:
        raise ValueError("filterbank must have at least one frame")
    T = fbank.shape[0]
    out = np.empty((bins, fbank.shape[1]))
    for i in range(bins):
        lo = (i * T) // bins
        hi = max(((i + 1) * T) // bins, lo + 1)
        out[i] = fbank[min(lo, T - 1) : min(hi, T)].mean(axis=0)
    return out


@dataclass
class RecordFeatures:
    """Raw views for one record: semantic (L, D_sem), speaker ids (L,), pooled fbanks (L, 8*n_mels)."""

    semantic: np.ndarray
    speakers: np.ndarray
    pooled: np.ndarray

    @property
    def length(self) -> int:
        return self.semantic.shape[0]


@dataclass
class ComposedEmbedding:
    e: Tensor
    s: Tensor
    k: Tensor | None
    p: Tensor | None


def compose(s: Tensor, k: Tensor | None, p: Tensor | None, mask=MODALITIES) -> Tensor:
    e = s
    if "K" in mask and k is not None:
        e = e + k
    if "P" in mask and p is not None:
        e = e + p
    return e


class FeatureEncoder(Module):
    def __init__(self, d: int, rng, semantic_dim: int = 768, n_mels: int = 128,
                 n_speakers: int = 16, modalities=MODALITIES):
        self.semantic = Linear(semantic_dim, d, rng)
        self.speaker = Embedding(n_speakers, d, rng)
        self.pattern = MLP([POOLED_FRAMES * n_mels, 2 * d, d], rng)
        self.semantic_dim = semantic_dim
        self.n_mels = n_mels
        self.modalities = frozenset(modalities)

    def project_semantic(self, semantic_raw) -> Tensor:
        x = ag.as_tensor(semantic_raw)
        if x.shape[-1] != self.semantic_dim:
            raise ag.ShapeError(f"semantic features must have {self.semantic_dim} dims, got {x.shape}")
        return self.semantic(x)

    def embed_speaker(self, speaker_ids) -> Tensor:
        return self.speaker(speaker_ids)

    def embed_pattern(self, filterbanks) -> Tensor:
        """Pool each (T, n_mels) filterbank to 8 frames, flatten, project."""
        pooled = np.stack([pool_filterbank(f).reshape(-1) for f in filterbanks])
        return self.pattern(Tensor(pooled))

    def __call__(self, feats: RecordFeatures) -> ComposedEmbedding:
        s = self.project_semantic(feats.semantic)
        k = self.embed_speaker(feats.speakers) if "K" in self.modalities else None
        p = None
        if "P" in self.modalities:
            if feats.pooled.shape[-1] != POOLED_FRAMES * self.n_mels:
                raise ag.ShapeError(f"pooled pattern features have width {feats.pooled.shape[-1]}")
            p = self.pattern(Tensor(feats.pooled))
        return ComposedEmbedding(compose(s, k, p, self.modalities), s, k, p)
