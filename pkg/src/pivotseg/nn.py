"""Neural building blocks on top of :mod:`pivotseg.autograd`."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Param, Tensor

LN_EPS = 1e-10


class ConfigError(ValueError):
    pass


class Module:
    """Container whose Param / Module attributes form a named parameter tree."""

    training = False

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.weight = Param(_glorot(rng, d_in, d_out))
        self.bias = Param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ag.ShapeError(
                f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}"
            )
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class DropoutRNG:
    """Shared seeded generator so dropout masks replay exactly per seed."""

    def __init__(self, seed: int):
        self.gen = np.random.default_rng(seed)


class Dropout(Module):
    def __init__(self, p: float, source: DropoutRNG | None):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate {p} outside [0, 1)")
        self.p = p
        self.source = source

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0 or self.source is None:
            return x
        keep = self.source.gen.random(x.shape) >= self.p
        return ag.mul(x, keep / (1.0 - self.p))


class MLP(Module):
    """Stack of Linear layers; ReLU (or nothing) between, optional sigmoid on top."""

    def __init__(self, dims, rng, activation: str = "relu", final_sigmoid: bool = False,
                 dropout: float = 0.0, source: DropoutRNG | None = None):
        if activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation
        self.final_sigmoid = final_sigmoid
        self.drop = Dropout(dropout, source)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                if self.activation == "relu":
                    x = ag.relu(x)
                x = self.drop(x)
        return ag.sigmoid(x) if self.final_sigmoid else x


def mlp_forward(x: Tensor, mlp: MLP) -> Tensor:
    return mlp(x)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng):
        self.table = Param(rng.normal(0.0, 1.0 / math.sqrt(d), size=(n, d)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = self.table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            bad = ids[(ids < 0) | (ids >= n)][0]
            raise IndexError(f"speaker id {bad} outside lookup table of size {n}")
        return ag.getitem(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Param(np.ones(d))
        self.bias = Param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, LN_EPS) * self.gain + self.bias


# ---------------------------------------------------------------------------
# MAC accounting for attention

_counter_state = threading.local()


@dataclass
class MacCounter:
    score_macs: int = 0
    context_macs: int = 0
    calls: int = 0


@contextmanager
def count_macs():
    """Accumulate attention multiply-accumulates issued inside the block."""
    counter = MacCounter()
    stack = getattr(_counter_state, "stack", None)
    if stack is None:
        stack = _counter_state.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_macs(n_batch: int, t_q: int, t_k: int, d: int):
    for counter in getattr(_counter_state, "stack", ()):
        counter.score_macs += n_batch * t_q * t_k * d
        counter.context_macs += n_batch * t_q * t_k * d
        counter.calls += 1


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, T, d = x.shape
        x = ag.reshape(x, (*lead, T, self.heads, d // self.heads))
        return ag.swapaxes(x, -2, -3)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Self-attention over axis -2 of ``x`` (shape (..., T, d)).

        ``key_mask`` (shape (..., T), True = real) removes keys from every
        query's softmax; their weights are exactly zero.
        """
        *lead, T, d = x.shape
        dh = d // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        w = ag.softmax(scores, axis=-1, mask=mask)
        self.last_weights = w.data
        ctx = ag.matmul(w, v)
        _record_macs(int(np.prod(lead)) if lead else 1, T, T, d)
        ctx = ag.reshape(ag.swapaxes(ctx, -2, -3), (*lead, T, d))
        return self.o(ctx)


def mha_forward(seq: Tensor, mha: MultiHeadAttention, key_mask=None) -> Tensor:
    return mha(seq, key_mask)


# Residual branches start small; at full Glorot scale a stack of blocks
# averages the rows together and the model sits at the label prior.
RESIDUAL_INIT_SCALE = 0.1


class SandwichBlock(Module):
    """Attention and feed-forward sublayers, each wrapped in pre- and post-LN."""

    def __init__(self, d: int, heads: int, rng, dropout: float = 0.0,
                 source: DropoutRNG | None = None, ff_mult: int = 4):
        self.ln_attn_pre = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.attn.o.weight.data *= RESIDUAL_INIT_SCALE
        self.ln_attn_post = LayerNorm(d)
        self.ln_ff_pre = LayerNorm(d)
        self.ff = MLP([d, ff_mult * d, d], rng, dropout=dropout, source=source)
        self.ff.layers[-1].weight.data *= RESIDUAL_INIT_SCALE
        self.ln_ff_post = LayerNorm(d)
        self.drop = Dropout(dropout, source)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        x = self.ln_attn_post(x + self.drop(self.attn(self.ln_attn_pre(x), key_mask)))
        return self.ln_ff_post(x + self.drop(self.ff(self.ln_ff_pre(x))))


def sandwich_block(seq: Tensor, block: SandwichBlock, key_mask=None) -> Tensor:
    return block(seq, key_mask)


class Conv1d(Module):
    """Channel-mixing 1-D convolution holding ``max_width`` taps.

    Calls may request any odd width up to ``max_width``; the centred taps
    are used.
    """

    def __init__(self, d_in: int, d_out: int, max_width: int, rng):
        if max_width < 1:
            raise ConfigError("kernel width must be >= 1")
        if max_width % 2 == 0:
            max_width += 1
        self.kernel = Param(
            _glorot(rng, d_in * max_width, d_out, shape=(max_width, d_in, d_out))
        )
        self.bias = Param(np.zeros(d_out))

    @property
    def max_width(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x: Tensor, width: int | None = None) -> Tensor:
        width = self.max_width if width is None else min(width, self.max_width)
        return ag.conv1d(x, self.kernel, width) + self.bias


def conv1d_forward(seq: Tensor, conv: Conv1d, kernel_width: int) -> Tensor:
    if kernel_width < 1:
        raise ConfigError("kernel width must be >= 1")
    return conv(seq, kernel_width)


class GRU(Module):
    """Single-direction GRU with the reset gate applied before the recurrent product."""

    def __init__(self, d_in: int, d_hidden: int, rng):
        self.w = Linear(d_in, 3 * d_hidden, rng)
        self.u_zr = Linear(d_hidden, 2 * d_hidden, rng, bias=False)
        self.u_n = Linear(d_hidden, d_hidden, rng, bias=False)
        self.d_hidden = d_hidden

    def __call__(self, seq: Tensor, reverse: bool = False) -> list[Tensor]:
        L = seq.shape[0]
        H = self.d_hidden
        xw = self.w(seq)
        h = Tensor(np.zeros((1, H)))
        states = [None] * L
        order = range(L - 1, -1, -1) if reverse else range(L)
        for i in order:
            x_i = ag.getitem(xw, slice(i, i + 1))
            zr = ag.sigmoid(ag.getitem(x_i, (slice(None), slice(0, 2 * H))) + self.u_zr(h))
            z = ag.getitem(zr, (slice(None), slice(0, H)))
            r = ag.getitem(zr, (slice(None), slice(H, 2 * H)))
            cand = ag.tanh(ag.getitem(x_i, (slice(None), slice(2 * H, 3 * H))) + self.u_n(r * h))
            h = z * h + (1.0 - z) * cand
            states[i] = h
        return states


class BiGRU(Module):
    """Forward and backward GRUs of width d, fused by a shared 2d -> d projection."""

    def __init__(self, d_in: int, d: int, rng):
        self.fwd = GRU(d_in, d, rng)
        self.bwd = GRU(d_in, d, rng)
        self.proj = Linear(2 * d, d, rng)

    def __call__(self, seq: Tensor) -> tuple[Tensor, Tensor]:
        if seq.ndim != 2 or seq.shape[0] == 0:
            raise ValueError("bigru needs a non-empty (L, d) sequence")
        hf = self.fwd(seq)
        hb = self.bwd(seq, reverse=True)
        both = ag.concat([ag.concat(hf, axis=0), ag.concat(hb, axis=0)], axis=-1)
        outputs = self.proj(both)
        final = self.proj(ag.concat([hf[-1], hb[0]], axis=-1))
        return outputs, final


def bigru_forward(seq: Tensor, gru: BiGRU) -> tuple[Tensor, Tensor]:
    return gru(seq)
