"""Pivot encoder, ablation backbones and the highlight / boundary heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .features import FeatureEncoder, RecordFeatures, parse_modalities
from .nn import (
    MLP,
    BiGRU,
    ConfigError,
    Conv1d,
    DropoutRNG,
    Module,
    SandwichBlock,
)

BACKBONES = ("pivot", "vanilla6", "gru")
BOUNDARY_HEADS = ("binary", "three_class")


@dataclass
class PivotConfig:
    d: int = 256
    heads: int = 4
    B: int = 3
    layers_per_stage: int = 2
    N: int | None = None
    dropout: float = 0.4
    shift_enabled: bool = True
    pivot_enabled: bool = True
    backbone: str = "pivot"
    boundary_head: str = "binary"
    lam: float = 1.0
    backbone_layers: int = 6
    max_conv_width: int = 15
    semantic_dim: int = 768
    n_mels: int = 128
    n_speakers: int = 16
    modalities: str = "S+K+P"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.N is not None and self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.boundary_head not in BOUNDARY_HEADS:
            raise ConfigError(f"boundary_head must be one of {BOUNDARY_HEADS}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        parse_modalities(self.modalities)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "PivotConfig":
        """Inverse of the flat ``key = value`` config file."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            if raw == "None":
                kwargs[key] = None
            elif kind == "bool":
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            elif kind in ("int", "int | None"):
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# blocking arithmetic


def choose_N(L: int) -> int:
    return max(1, int(math.floor(math.sqrt(L) + 0.5)))


def block_shape(L: int, N: int) -> tuple[int, int]:
    """Return (blocks actually used, block length M = ceil(L / N)).

    Trailing blocks that would hold only padding are dropped.
    """
    if L < 1:
        raise ValueError("sequence must be non-empty")
    if N < 1:
        raise ConfigError("N must be >= 1")
    N = min(N, L)
    M = -(-L // N)
    return -(-L // M), M


def conv_width(M: int) -> int:
    """Receptive field of about M/2, rounded up to an odd width."""
    k = max(1, -(-M // 2))
    return k if k % 2 else k + 1


@dataclass
class BlockGrid:
    blocks: Tensor
    pad_mask: np.ndarray
    L: int

    @property
    def N(self) -> int:
        return self.pad_mask.shape[0]

    @property
    def M(self) -> int:
        return self.pad_mask.shape[1]


def partition(e_tilde: Tensor, N: int) -> BlockGrid:
    L, d = e_tilde.shape
    N, M = block_shape(L, N)
    pad = N * M - L
    rows = e_tilde if pad == 0 else ag.concat([e_tilde, Tensor(np.zeros((pad, d)))], axis=0)
    mask = (np.arange(N * M) < L).reshape(N, M)
    return BlockGrid(ag.reshape(rows, (N, M, d)), mask, L)


def flatten(grid_values: Tensor, L: int) -> Tensor:
    """(N, M, ...) -> first L rows of the (N*M, ...) flattening."""
    N, M = grid_values.shape[:2]
    flat = ag.reshape(grid_values, (N * M,) + grid_values.shape[2:])
    return flat if N * M == L else ag.getitem(flat, slice(0, L))


@dataclass
class AttentionCost:
    L: int
    N: int
    M: int
    d: int
    pivot_macs: int
    pivot_macs_with_token: int
    vanilla_macs: int

    @property
    def ratio(self) -> float:
        return self.pivot_macs / self.vanilla_macs


def attention_cost(L: int, N: int, d: int) -> AttentionCost:
    """Score multiply-accumulates of one attention round.

    ``pivot_macs`` is N*M^2*d + N^2*d. ``pivot_macs_with_token`` also counts the
    pivot token prepended to every block, N*(M+1)^2*d + N^2*d, which is what the
    runtime counter observes. ``vanilla_macs`` is L^2*d.
    """
    if not 1 <= N <= L:
        raise ValueError("need 1 <= N <= L")
    N, M = block_shape(L, N)
    return AttentionCost(
        L, N, M, d,
        pivot_macs=(N * M * M + N * N) * d,
        pivot_macs_with_token=(N * (M + 1) ** 2 + N * N) * d,
        vanilla_macs=L * L * d,
    )


def optimal_N(L: int) -> int:
    """Brute-force argmin over integer N of L^2/N + N^2 (first minimiser)."""
    costs = [L * L / n + n * n for n in range(1, L + 1)]
    return int(np.argmin(costs)) + 1


# ---------------------------------------------------------------------------
# gates and the pivot encoder


class LocalGlobalGate(Module):
    """Scores each element from [global; local; element] and pools by softmax."""

    def __init__(self, d: int, rng, dropout: float = 0.0, source=None):
        self.mlp = MLP([3 * d, d, 1], rng, dropout=dropout, source=source)

    def __call__(self, g: Tensor, locals_: Tensor, elems: Tensor, pad_mask: np.ndarray):
        """g: (N, d); locals_, elems: (N, M, d); pad_mask: (N, M).

        Returns raw logits (N, M) and pooled pivots (N, d).
        """
        N, M, d = elems.shape
        if not pad_mask.any(axis=1).all():
            raise RuntimeError("gate called on a block with no real elements")
        g_b = ag.broadcast_to(ag.reshape(g, (g.shape[0], 1, d)), (N, M, d))
        logits = ag.reshape(self.mlp(ag.concat([g_b, locals_, elems], axis=-1)), (N, M))
        weights = ag.softmax(logits, axis=-1, mask=pad_mask)
        pooled = ag.reshape(ag.matmul(ag.reshape(weights, (N, 1, M)), elems), (N, d))
        return logits, pooled, weights


def local_global_gate(gate: LocalGlobalGate, g, locals_, elems, pad_mask):
    logits, pooled, _ = gate(g, locals_, elems, pad_mask)
    return logits, pooled


class PivotLoop(Module):
    def __init__(self, cfg: PivotConfig, rng, source):
        blk = lambda: SandwichBlock(cfg.d, cfg.heads, rng, cfg.dropout, source)  # noqa: E731
        self.block_layers = [blk() for _ in range(cfg.layers_per_stage)]
        self.internal_gate = LocalGlobalGate(cfg.d, rng, cfg.dropout, source)
        self.pivot_layers = [blk() for _ in range(cfg.layers_per_stage)]


@dataclass
class BranchResult:
    gate_logits: list[Tensor]
    e_hat: Tensor
    gate_weights: list[np.ndarray] = field(default_factory=list)
    grid_mask: np.ndarray | None = None


class PivotEncoder(Module):
    def __init__(self, cfg: PivotConfig, rng, source):
        self.cfg = cfg
        self.bigru = BiGRU(cfg.d, cfg.d, rng)
        self.conv = Conv1d(cfg.d, cfg.d, cfg.max_conv_width, rng)
        self.external_gate = LocalGlobalGate(cfg.d, rng, cfg.dropout, source)
        self.loops = [PivotLoop(cfg, rng, source) for _ in range(cfg.B)]

    def init_encode(self, E: Tensor) -> tuple[Tensor, Tensor]:
        outputs, final = self.bigru(E)
        return final, outputs

    def block_attention(self, loop: PivotLoop, t_prev: Tensor, blocks: Tensor, pad_mask):
        N, M, d = blocks.shape
        x = ag.concat([ag.reshape(t_prev, (N, 1, d)), blocks], axis=1)
        key_mask = np.concatenate([np.ones((N, 1), bool), pad_mask], axis=1)
        for layer in loop.block_layers:
            x = layer(x, key_mask)
        t_tilde = ag.reshape(ag.getitem(x, (slice(None), slice(0, 1))), (N, d))
        updated = ag.where(pad_mask[..., None], ag.getitem(x, (slice(None), slice(1, None))))
        return t_tilde, updated

    def pivot_attention(self, loop: PivotLoop, t_hat: Tensor, t_tilde: Tensor) -> Tensor:
        y = ag.reshape(t_hat + t_tilde, (1,) + t_hat.shape)
        for layer in loop.pivot_layers:
            y = layer(y)
        return ag.reshape(y, t_hat.shape)

    def branch(self, E: Tensor) -> BranchResult:
        cfg = self.cfg
        L, d = E.shape
        N_req = cfg.N if cfg.N is not None else choose_N(L)
        N, M = block_shape(L, N_req)
        mask = (np.arange(N * M) < L).reshape(N, M)
        counts = mask.sum(axis=1, keepdims=True).astype(float)

        if cfg.pivot_enabled:
            g, e_tilde = self.init_encode(E)
            g_blocks = ag.broadcast_to(g, (N, d))
        else:
            # encode every block in isolation so nothing crosses block borders
            outs, finals = [], []
            for i in range(N):
                lo, hi = i * M, min((i + 1) * M, L)
                gi, oi = self.init_encode(ag.getitem(E, slice(lo, hi)))
                outs.append(oi)
                finals.append(gi)
            e_tilde = ag.concat(outs, axis=0)
            g_blocks = ag.concat(finals, axis=0)

        grid = partition(e_tilde, N)
        r = grid.blocks
        locals_ = self.conv(r, conv_width(M))
        w0, t, a0 = self.external_gate(g_blocks, locals_, r, mask)
        logits, weights = [w0], [a0.data]

        for loop in self.loops:
            t_tilde, r = self.block_attention(loop, t, r, mask)
            if cfg.pivot_enabled:
                total = ag.tsum(ag.reshape(r, (N * M, d)), axis=0, keepdims=True)
                g_mean = ag.broadcast_to(total * (1.0 / L), (N, d))
            else:
                g_mean = ag.tsum(r, axis=1) / counts
            t_local = ag.broadcast_to(ag.reshape(t_tilde, (N, 1, d)), (N, M, d))
            wl, t_hat, al = loop.internal_gate(g_mean, t_local, r, mask)
            logits.append(wl)
            weights.append(al.data)
            t = self.pivot_attention(loop, t_hat, t_tilde) if cfg.pivot_enabled else t_hat + t_tilde

        return BranchResult(
            gate_logits=[flatten(w, L) for w in logits],
            e_hat=flatten(r, L),
            gate_weights=weights,
            grid_mask=mask,
        )


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelOutput:
    h: Tensor
    b: Tensor
    e_hat: Tensor
    class_probs: Tensor | None = None
    gate_logits: list[Tensor] = field(default_factory=list)
    n_branches: int = 1
    shift: int = 0


class HighlightModel(Module):
    """Feature encoder + backbone + highlight and boundary heads."""

    def __init__(self, cfg: PivotConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = DropoutRNG(cfg.seed + 1)
        source = self.dropout_rng
        d = cfg.d
        self.features = FeatureEncoder(
            d, rng, cfg.semantic_dim, cfg.n_mels, cfg.n_speakers, parse_modalities(cfg.modalities)
        )
        if cfg.backbone == "pivot":
            self.encoder = PivotEncoder(cfg, rng, source)
        elif cfg.backbone == "vanilla6":
            self.bigru = BiGRU(d, d, rng)
            self.layers = [
                SandwichBlock(d, cfg.heads, rng, cfg.dropout, source)
                for _ in range(cfg.backbone_layers)
            ]
        else:
            self.grus = [BiGRU(d, d, rng) for _ in range(cfg.backbone_layers)]
        if cfg.backbone != "pivot":
            self.highlight_gate = MLP([2 * d, d, 1], rng, dropout=cfg.dropout, source=source)
        n_out = 1 if cfg.boundary_head == "binary" else 3
        self.boundary = MLP([d, max(1, d // 2), n_out], rng, dropout=cfg.dropout, source=source)
        for name, p in self.named_parameters():
            p.name = name

    # -- heads -------------------------------------------------------------

    def _boundary(self, e_hat: Tensor):
        out = self.boundary(e_hat)
        L = e_hat.shape[0]
        if self.cfg.boundary_head == "binary":
            return ag.sigmoid(ag.reshape(out, (L,))), None
        probs = ag.softmax(out, axis=-1)
        b = 1.0 - ag.reshape(ag.getitem(probs, (slice(None), slice(2, 3))), (L,))
        return b, probs

    def _pivot_branch(self, E: Tensor):
        res = self.encoder.branch(E)
        sig = [ag.sigmoid(w) for w in res.gate_logits]
        h = sig[0]
        for s in sig[1:]:
            h = h + s
        h = h * (1.0 / len(sig))
        b, probs = self._boundary(res.e_hat)
        return h, b, res.e_hat, probs, res

    def forward_embeddings(self, E: Tensor) -> ModelOutput:
        cfg = self.cfg
        L = E.shape[0]
        if L < 1:
            raise ValueError("sequence must be non-empty")
        if cfg.backbone == "pivot":
            h, b, e_hat, probs, res = self._pivot_branch(E)
            out = ModelOutput(h, b, e_hat, probs, res.gate_logits, 1, 0)
            if not cfg.shift_enabled:
                return out
            N, M = block_shape(L, cfg.N if cfg.N is not None else choose_N(L))
            s = M // 2
            hs, bs, es, ps, _ = self._pivot_branch(ag.roll(E, s, axis=0))
            hs, bs, es = ag.roll(hs, -s), ag.roll(bs, -s), ag.roll(es, -s)
            out.h = (h + hs) * 0.5
            out.b = (b + bs) * 0.5
            out.e_hat = (e_hat + es) * 0.5
            if probs is not None:
                out.class_probs = (probs + ag.roll(ps, -s)) * 0.5
            out.n_branches = 2
            out.shift = s
            return out

        if cfg.backbone == "vanilla6":
            x, g = self.bigru(E)
            y = ag.reshape(x, (1, L, cfg.d))
            for layer in self.layers:
                y = layer(y)
            x = ag.reshape(y, (L, cfg.d))
        else:
            x = E
            for gru in self.grus:
                x, g = gru(x)
        g_b = ag.broadcast_to(g, (L, cfg.d))
        h = ag.sigmoid(ag.reshape(self.highlight_gate(ag.concat([g_b, x], axis=-1)), (L,)))
        b, probs = self._boundary(x)
        return ModelOutput(h, b, x, probs)

    def __call__(self, feats: RecordFeatures) -> ModelOutput:
        return self.forward_embeddings(self.features(feats).e)


def pivot_forward(E: Tensor, cfg: PivotConfig, model: HighlightModel | None = None) -> ModelOutput:
    model = model or HighlightModel(cfg)
    return model.forward_embeddings(ag.as_tensor(E))
