"""Pre-LN transformer blocks as residual time steps, with their adjoints.

A block maps a state ``x`` to ``x + h * F(x)``.  For the encoder

    F(x) = phi1(x) + phi2(x + phi1(x)),   phi1 = SA o LN,  phi2 = MLP o LN

and for a cross-attending decoder with encoder output ``x_enc``

    ybar = phi1(y) + phi3(y + phi1(y), x_enc),   phi3 = CA o LN (query side)
    F(y) = ybar + phi2(y + ybar)

Encoder-decoder models advance the stacked state ``[X, Y]`` (packed along the
sequence axis) one layer at a time: encoder steps move X and hold Y, decoder
steps move Y against the frozen X.  Attention is scaled dot-product with
scale ``1/sqrt(d/H)``; causal masking adds -inf above the diagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tree
from .tensor import (
    LN_EPS,
    DimensionError,
    LinearParams,
    bmm,
    bmm_vjp,
    gelu,
    gelu_vjp,
    layer_norm,
    layer_norm_vjp,
    linear,
    linear_vjp,
    softmax_rows,
    softmax_vjp_from_output,
)

ENC, CAUSAL, DEC = "enc", "causal", "dec"


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams


@dataclass
class EncoderBlockParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn: AttentionParams
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_in: LinearParams
    mlp_out: LinearParams


@dataclass
class DecoderBlockParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn: AttentionParams
    ln3_gain: np.ndarray
    ln3_bias: np.ndarray
    cross: AttentionParams
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_in: LinearParams
    mlp_out: LinearParams


# -- initialization ----------------------------------------------------------


def truncated_normal(rng, shape, std):
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _init_linear(rng, n_in, n_out, std, gain=1.0):
    return LinearParams(gain * truncated_normal(rng, (n_out, n_in), std), np.zeros(n_out))


def _init_attention(rng, d, std, gain):
    return AttentionParams(
        q=_init_linear(rng, d, d, std),
        k=_init_linear(rng, d, d, std),
        v=_init_linear(rng, d, d, std, gain),
        o=_init_linear(rng, d, d, std, gain),
    )


def depth_gain(n_layers: int) -> float:
    """Depth multiplier sqrt(log 2L) for value/output/MLP projections."""
    return math.sqrt(math.log(2 * n_layers))


def init_encoder_block(rng, d, ff, std=0.02, gain=1.0) -> EncoderBlockParams:
    return EncoderBlockParams(
        ln1_gain=np.ones(d),
        ln1_bias=np.zeros(d),
        attn=_init_attention(rng, d, std, gain),
        ln2_gain=np.ones(d),
        ln2_bias=np.zeros(d),
        mlp_in=_init_linear(rng, d, ff, std, gain),
        mlp_out=_init_linear(rng, ff, d, std, gain),
    )


def init_decoder_block(rng, d, ff, std=0.02, gain=1.0) -> DecoderBlockParams:
    return DecoderBlockParams(
        ln1_gain=np.ones(d),
        ln1_bias=np.zeros(d),
        attn=_init_attention(rng, d, std, gain),
        ln3_gain=np.ones(d),
        ln3_bias=np.zeros(d),
        cross=_init_attention(rng, d, std, gain),
        ln2_gain=np.ones(d),
        ln2_bias=np.zeros(d),
        mlp_in=_init_linear(rng, d, ff, std, gain),
        mlp_out=_init_linear(rng, ff, d, std, gain),
    )


# -- dropout -----------------------------------------------------------------


class DropoutMask:
    """Per-(layer, site) dropout masks frozen until :meth:`new_batch`.

    A mask depends only on ``(seed, tag, layer, site)``, so re-evaluating a
    layer any number of times during relaxation and coarse solves sees the
    same mask, and the stream does not depend on worker count or mode.
    """

    _SITES = {"attn": 0, "cross": 1, "mlp": 2}

    def __init__(self, keep: float, seed: int, tag: int = 0):
        if not 0.0 < keep <= 1.0:
            raise ValueError("keep probability must be in (0, 1]")
        self.keep = keep
        self.seed = seed
        self.tag = tag
        self._masks: dict = {}

    def new_batch(self, tag: int):
        self.tag = tag
        self._masks = {}

    def get(self, layer: int, site: str, shape) -> np.ndarray:
        key = (layer, site, tuple(shape))
        mask = self._masks.get(key)
        if mask is None:
            rng = np.random.default_rng([self.seed, 7, self.tag, layer, self._SITES[site]])
            mask = (rng.random(shape) < self.keep) / self.keep
            self._masks[key] = mask
        return mask


# -- attention ---------------------------------------------------------------


def _split_heads(t, heads):
    b, s, d = t.shape
    return t.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3).reshape(b * heads, s, d // heads)


def _merge_heads(t, batch, heads):
    bh, s, dh = t.shape
    return t.reshape(batch, heads, s, dh).transpose(0, 2, 1, 3).reshape(batch, s, heads * dh)


def _causal_keep(s, t):
    return np.tril(np.ones((s, t), dtype=bool), k=t - s)


def attention_forward(xq, xkv, p: AttentionParams, heads: int, causal: bool = False):
    """Multi-head attention; returns ``(out, cache)``."""
    batch, s, d = xq.shape
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    scale = 1.0 / math.sqrt(d // heads)
    qh = _split_heads(linear(xq, p.q), heads)
    kh = _split_heads(linear(xkv, p.k), heads)
    vh = _split_heads(linear(xkv, p.v), heads)
    scores = bmm(qh, kh.transpose(0, 2, 1)) * scale
    if causal:
        scores = np.where(_causal_keep(s, xkv.shape[1]), scores, -np.inf)
    a = softmax_rows(scores)
    o = _merge_heads(bmm(a, vh), batch, heads)
    return linear(o, p.o), (xq, xkv, qh, kh, vh, a, o, scale)


def attention_vjp(cache, p: AttentionParams, heads: int, upstream):
    """Returns ``(d_xq, d_xkv, AttentionParams grads)``."""
    xq, xkv, qh, kh, vh, a, o, scale = cache
    batch = xq.shape[0]
    do, g_o = linear_vjp(o, p.o, upstream)
    da, dvh = bmm_vjp(a, vh, _split_heads(do, heads))
    dscores = softmax_vjp_from_output(a, da) * scale
    dqh, dkt = bmm_vjp(qh, kh.transpose(0, 2, 1), dscores)
    dxq, g_q = linear_vjp(xq, p.q, _merge_heads(dqh, batch, heads))
    dxk, g_k = linear_vjp(xkv, p.k, _merge_heads(dkt.transpose(0, 2, 1), batch, heads))
    dxv, g_v = linear_vjp(xkv, p.v, _merge_heads(dvh, batch, heads))
    return dxq, dxk + dxv, AttentionParams(g_q, g_k, g_v, g_o)


# -- sublayers ---------------------------------------------------------------


@dataclass
class BlockContext:
    """Static settings shared by every block of a stack."""

    heads: int
    eps: float = LN_EPS
    dropout: DropoutMask | None = None

    def mask(self, layer, site, shape):
        if self.dropout is None or layer is None:
            return None
        return self.dropout.get(layer, site, shape)


def _mlp_forward(x, p, gain, bias, ctx, layer):
    ln = layer_norm(x, gain, bias, ctx.eps)
    m1 = linear(ln, p.mlp_in)
    g = gelu(m1)
    out = linear(g, p.mlp_out)
    mask = ctx.mask(layer, "mlp", out.shape)
    if mask is not None:
        out = out * mask
    return out, (x, ln, m1, g, mask)


def _mlp_vjp(cache, p, gain, bias, ctx, u):
    x, ln, m1, g, mask = cache
    if mask is not None:
        u = u * mask
    dg, g_out = linear_vjp(g, p.mlp_out, u)
    dln, g_in = linear_vjp(ln, p.mlp_in, gelu_vjp(m1, dg))
    dx, dgain, dbias = layer_norm_vjp(x, gain, bias, dln, ctx.eps)
    return dx, g_in, g_out, dgain, dbias


def _attn_forward(x, kv, p, gain, bias, ctx, layer, site, causal):
    ln = layer_norm(x, gain, bias, ctx.eps)
    src = ln if kv is None else kv
    out, acache = attention_forward(ln, src, p, ctx.heads, causal)
    mask = ctx.mask(layer, site, out.shape)
    if mask is not None:
        out = out * mask
    return out, (x, acache, mask, kv is None)


def _attn_vjp(cache, p, gain, bias, ctx, u):
    x, acache, mask, is_self = cache
    if mask is not None:
        u = u * mask
    dq, dkv, g_attn = attention_vjp(acache, p, ctx.heads, u)
    if is_self:
        dq = dq + dkv
        dkv = None
    dx, dgain, dbias = layer_norm_vjp(x, gain, bias, dq, ctx.eps)
    return dx, dkv, g_attn, dgain, dbias


# -- encoder / decoder steps -------------------------------------------------


def _encoder_forward(x, p: EncoderBlockParams, h, ctx, layer, causal):
    a, c1 = _attn_forward(x, None, p.attn, p.ln1_gain, p.ln1_bias, ctx, layer, "attn", causal)
    b, c2 = _mlp_forward(x + a, p, p.ln2_gain, p.ln2_bias, ctx, layer)
    return x + h * (a + b), (c1, c2)


def _encoder_vjp(cache, p: EncoderBlockParams, h, ctx, lam):
    c1, c2 = cache
    hl = h * lam
    dx2, g_in, g_out, g2, b2 = _mlp_vjp(c2, p, p.ln2_gain, p.ln2_bias, ctx, hl)
    dx1, _, g_attn, g1, b1 = _attn_vjp(c1, p.attn, p.ln1_gain, p.ln1_bias, ctx, hl + dx2)
    dx = lam + dx2 + dx1
    grads = EncoderBlockParams(g1, b1, g_attn, g2, b2, g_in, g_out)
    return dx, grads


def encoder_step(x, p: EncoderBlockParams, h: float, t=None, *, ctx: BlockContext, causal=False):
    """``x + h*(phi1(x) + phi2(x + phi1(x)))``; ``t`` is the layer index (dropout key)."""
    if x.ndim != 3 or x.shape[-1] != p.ln1_gain.shape[0]:
        raise DimensionError(f"encoder_step: bad state shape {x.shape}")
    return _encoder_forward(x, p, h, ctx, t, causal)[0]


def _decoder_forward(y, x_enc, p: DecoderBlockParams, h, ctx, layer):
    a, c1 = _attn_forward(y, None, p.attn, p.ln1_gain, p.ln1_bias, ctx, layer, "attn", True)
    c, c3 = _attn_forward(y + a, x_enc, p.cross, p.ln3_gain, p.ln3_bias, ctx, layer, "cross", False)
    ybar = a + c
    b, c2 = _mlp_forward(y + ybar, p, p.ln2_gain, p.ln2_bias, ctx, layer)
    return y + h * (ybar + b), (c1, c3, c2)


def _decoder_vjp(cache, p: DecoderBlockParams, h, ctx, lam):
    c1, c3, c2 = cache
    hl = h * lam
    dy2, g_in, g_out, g2, b2 = _mlp_vjp(c2, p, p.ln2_gain, p.ln2_bias, ctx, hl)
    dbar = hl + dy2
    dy1, dx_enc, g_cross, g3, b3 = _attn_vjp(c3, p.cross, p.ln3_gain, p.ln3_bias, ctx, dbar)
    dy0, _, g_attn, g1, b1 = _attn_vjp(c1, p.attn, p.ln1_gain, p.ln1_bias, ctx, dbar + dy1)
    dy = lam + dy2 + dy1 + dy0
    grads = DecoderBlockParams(g1, b1, g_attn, g3, b3, g_cross, g2, b2, g_in, g_out)
    return dy, dx_enc, grads


def decoder_step(y, x_enc, p: DecoderBlockParams, h: float, t=None, *, ctx: BlockContext):
    """``y + h*(ybar + phi2(y + ybar))`` with causal self-attention."""
    if y.ndim != 3 or x_enc.ndim != 3 or y.shape[0] != x_enc.shape[0]:
        raise DimensionError(f"decoder_step: shapes {y.shape} / {x_enc.shape}")
    return _decoder_forward(y, x_enc, p, h, ctx, t)[0]


# -- stacked state -----------------------------------------------------------


@dataclass
class StackedState:
    X: np.ndarray
    Y: np.ndarray
    encoder_frozen: bool = False

    def pack(self) -> np.ndarray:
        return np.concatenate([self.X, self.Y], axis=1)

    @classmethod
    def unpack(cls, z, split, encoder_frozen=False):
        return cls(z[:, :split].copy(), z[:, split:].copy(), encoder_frozen)


@dataclass
class LayerStack:
    """Ordered propagators with per-layer step sizes and buffer flags.

    ``kinds[n]`` is ``"enc"``, ``"causal"`` (decoder-only block) or ``"dec"``
    (cross-attending decoder).  States are ``[batch, seq, d]`` arrays; for
    stacked encoder-decoder models the first ``split`` sequence positions
    hold X and the rest hold Y.
    """

    blocks: list
    kinds: list
    h: list
    ctx: BlockContext
    buffer: list = field(default=None)
    split: int | None = None

    def __post_init__(self):
        if not len(self.blocks) == len(self.kinds) == len(self.h):
            raise ValueError("blocks, kinds and h must have equal length")
        if self.buffer is None:
            self.buffer = [False] * len(self.blocks)
        if DEC in self.kinds:
            n_enc = self.n_enc
            if any(k != ENC for k in self.kinds[:n_enc]) or any(k != DEC for k in self.kinds[n_enc:]):
                raise ValueError("stacked stacks list all encoder layers before decoder layers")
            if self.split is None:
                raise ValueError("stacked stacks need the encoder sequence length (split)")

    def __len__(self):
        return len(self.blocks)

    @property
    def n_enc(self) -> int:
        return sum(1 for k in self.kinds if k == ENC)

    def interior(self) -> tuple[int, int]:
        """Half-open range of non-buffer layers."""
        n = len(self.blocks)
        start = 0
        while start < n and self.buffer[start]:
            start += 1
        stop = n
        while stop > start and self.buffer[stop - 1]:
            stop -= 1
        if any(self.buffer[start:stop]):
            raise ValueError("buffer layers must sit at the ends of the stack")
        return start, stop

    def _forward(self, n, z, h):
        p, kind = self.blocks[n], self.kinds[n]
        if kind == DEC:
            s = self.split
            y, cache = _decoder_forward(z[:, s:], z[:, :s], p, h, self.ctx, n)
            out = z.copy()
            out[:, s:] = y
            return out, cache
        if self.split is not None:
            s = self.split
            x, cache = _encoder_forward(z[:, :s], p, h, self.ctx, n, False)
            out = z.copy()
            out[:, :s] = x
            return out, cache
        return _encoder_forward(z, p, h, self.ctx, n, kind == CAUSAL)

    def step(self, n: int, z: np.ndarray, h: float | None = None) -> np.ndarray:
        if not 0 <= n < len(self.blocks):
            raise IndexError(f"layer index {n} out of range")
        return self._forward(n, z, self.h[n] if h is None else h)[0]

    def step_vjp(self, n: int, z: np.ndarray, lam: np.ndarray, h: float | None = None):
        """Cotangent pullback through layer ``n`` evaluated at state ``z``.

        Returns ``(lam_in, grads)`` with ``lam_in = lam + h*(dF/dz)^T lam`` and
        the h-scaled parameter gradient of ``<lam, step(z)>``.
        """
        if lam.shape != z.shape:
            raise DimensionError(f"cotangent shape {lam.shape} != state shape {z.shape}")
        h = self.h[n] if h is None else h
        _, cache = self._forward(n, z, h)
        p, kind = self.blocks[n], self.kinds[n]
        if kind == DEC:
            s = self.split
            dy, dx_enc, grads = _decoder_vjp(cache, p, h, self.ctx, lam[:, s:])
            out = np.empty_like(lam)
            out[:, :s] = lam[:, :s] + dx_enc
            out[:, s:] = dy
            return out, grads
        if self.split is not None:
            s = self.split
            dx, grads = _encoder_vjp(cache, p, h, self.ctx, lam[:, :s])
            out = lam.copy()
            out[:, :s] = dx
            return out, grads
        return _encoder_vjp(cache, p, h, self.ctx, lam)


def stacked_step(z: StackedState, stack: LayerStack, n: int, h: float | None = None) -> StackedState:
    """Advance the stacked encoder-decoder state through layer ``n``."""
    n_enc = stack.n_enc
    if not 0 <= n < len(stack):
        raise IndexError(f"step index {n} outside 0..{len(stack) - 1}")
    out = stack.step(n, z.pack(), h)
    return StackedState.unpack(out, z.X.shape[1], encoder_frozen=n + 1 >= n_enc)


def adjoint_step(stack: LayerStack, n: int, z: np.ndarray, lam: np.ndarray, h: float | None = None):
    """``lam^T (I + h dF/dz)`` at ``z`` plus the layer's parameter gradients."""
    return stack.step_vjp(n, z, lam, h)


def serial_forward(stack: LayerStack, z0: np.ndarray, start: int = 0, stop: int | None = None):
    """States ``[z_start, ..., z_stop]`` of plain layer-by-layer propagation."""
    stop = len(stack) if stop is None else stop
    states = [z0]
    for n in range(start, stop):
        states.append(stack.step(n, states[-1]))
    return states


def serial_backward(stack: LayerStack, states, lam_out, start: int = 0, stop: int | None = None):
    """Backpropagate through layers ``start..stop-1``; returns ``(lam_in, grads)``."""
    stop = len(stack) if stop is None else stop
    grads = [None] * (stop - start)
    lam = lam_out
    for n in range(stop - 1, start - 1, -1):
        lam, grads[n - start] = stack.step_vjp(n, states[n - start], lam)
    return lam, grads


def apply_buffer_layers(z0, stack: LayerStack, interior=None):
    """Run open buffers serially, the interior via ``interior``, then close buffers.

    ``interior(z)`` maps the open-buffer output to the interior output and
    defaults to serial propagation.  Returns the final state.
    """
    start, stop = stack.interior()
    z = serial_forward(stack, z0, 0, start)[-1]
    z = serial_forward(stack, z, start, stop)[-1] if interior is None else interior(z)
    return serial_forward(stack, z, stop, len(stack))[-1]


def buffer_schedule(n_layers: int, k_open: int, k_close: int, h: float | None = None):
    """Step sizes: 1 for buffer layers, ``h`` (default 1/interior) elsewhere."""
    if k_open < 0 or k_close < 0 or k_open + k_close >= n_layers:
        raise ValueError("buffer counts must leave at least one interior layer")
    n_int = n_layers - k_open - k_close
    h_int = 1.0 / n_int if h is None else h
    flags = [i < k_open or i >= n_layers - k_close for i in range(n_layers)]
    return [1.0 if f else h_int for f in flags], flags


__all__ = [
    "AttentionParams",
    "BlockContext",
    "DecoderBlockParams",
    "DropoutMask",
    "EncoderBlockParams",
    "LayerStack",
    "StackedState",
    "adjoint_step",
    "apply_buffer_layers",
    "attention_forward",
    "attention_vjp",
    "buffer_schedule",
    "decoder_step",
    "depth_gain",
    "encoder_step",
    "init_decoder_block",
    "init_encoder_block",
    "serial_backward",
    "serial_forward",
    "stacked_step",
    "truncated_normal",
]
