"""Embeddings, the transformer layer stack and the output head.

The open layer (embeddings), the layer stack and the close layer (final
layer norm + linear head + cross-entropy) make up a model.  Losses and
gradients are produced either serially or with MGRIT over the interior
(non-buffer) part of the stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tree
from .adjoint import serial_adjoint, solve_backward
from .blocks import (
    CAUSAL,
    DEC,
    ENC,
    BlockContext,
    DropoutMask,
    LayerStack,
    buffer_schedule,
    depth_gain,
    init_decoder_block,
    init_encoder_block,
    serial_backward,
    serial_forward,
    truncated_normal,
)
from .mgrit import StackPropagator, build_hierarchy, serial_solution, solve_forward
from .tensor import LN_EPS, LinearParams, layer_norm, layer_norm_vjp, linear, linear_vjp

ARCHS = ("encoder", "decoder", "encdec")


@dataclass
class ModelConfig:
    arch: str = "encoder"
    vocab: int = 16  # input vocabulary
    n_out: int = 4  # head outputs
    seq_len: int = 8
    tgt_vocab: int = 0  # encdec decoder inputs
    tgt_len: int = 0
    d: int = 32
    heads: int = 2
    ff: int = 64
    layers: int = 8  # encoder-only / decoder-only depth
    enc_layers: int = 0
    dec_layers: int = 0
    buffer_open: int = 0
    buffer_close: int = 0
    h: float | None = None  # None: 1, or 1/interior when buffers are used
    dropout: float = 0.0
    init_std: float = 0.02
    depth_scaled_init: bool = False
    eps: float = LN_EPS

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.d % self.heads:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")
        if self.arch == "encdec" and (self.enc_layers < 1 or self.dec_layers < 1):
            raise ValueError("encdec needs enc_layers >= 1 and dec_layers >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_layers(self) -> int:
        return self.enc_layers + self.dec_layers if self.arch == "encdec" else self.layers

    def kinds(self):
        if self.arch == "encdec":
            return [ENC] * self.enc_layers + [DEC] * self.dec_layers
        return [ENC if self.arch == "encoder" else CAUSAL] * self.layers

    def step_sizes(self):
        n = self.n_layers
        if self.buffer_open or self.buffer_close:
            return buffer_schedule(n, self.buffer_open, self.buffer_close, self.h)
        return [1.0 if self.h is None else self.h] * n, [False] * n


@dataclass
class ModelParams:
    tok: np.ndarray
    pos: np.ndarray
    dec_embed: list  # [tgt_tok, tgt_pos] for encdec, else empty
    blocks: list
    final_gain: np.ndarray
    final_bias: np.ndarray
    head: LinearParams


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 3])
    std = cfg.init_std
    gain = depth_gain(cfg.n_layers) if cfg.depth_scaled_init else 1.0
    blocks = [
        (init_decoder_block if k == DEC else init_encoder_block)(rng, cfg.d, cfg.ff, std, gain)
        for k in cfg.kinds()
    ]
    dec = []
    if cfg.arch == "encdec":
        dec = [
            truncated_normal(rng, (cfg.tgt_vocab, cfg.d), std),
            truncated_normal(rng, (cfg.tgt_len, cfg.d), std),
        ]
    return ModelParams(
        tok=truncated_normal(rng, (cfg.vocab, cfg.d), std),
        pos=truncated_normal(rng, (cfg.seq_len, cfg.d), std),
        dec_embed=dec,
        blocks=blocks,
        final_gain=np.ones(cfg.d),
        final_bias=np.zeros(cfg.d),
        head=LinearParams(truncated_normal(rng, (cfg.n_out, cfg.d), std), np.zeros(cfg.n_out)),
    )


@dataclass
class MGRITConfig:
    cf: int = 2
    levels: int = 2
    fwd_iters: int = 2  # 0: serial forward
    bwd_iters: int = 1  # 0: serial backward
    fwd_tol: float = 0.0
    bwd_tol: float = 0.0
    init_guess: str = "warm"  # broadcast | zeros | warm


@dataclass
class LossGrad:
    loss: float
    grads: ModelParams
    correct: int
    total: int
    fwd_trace: list = field(default_factory=list)
    bwd_trace: list = field(default_factory=list)
    fwd_converged: bool = True
    bwd_converged: bool = True


class Model:
    def __init__(self, cfg: ModelConfig, params: ModelParams, seed: int = 0):
        self.cfg = cfg
        self.params = params
        h, flags = cfg.step_sizes()
        split = cfg.seq_len if cfg.arch == "encdec" else None
        self.dropout = DropoutMask(1.0 - cfg.dropout, seed) if cfg.dropout > 0 else None
        self.stack = LayerStack(
            params.blocks, cfg.kinds(), h, BlockContext(cfg.heads, cfg.eps, self.dropout), flags, split
        )
        self.eval_stack = LayerStack(
            params.blocks, cfg.kinds(), h, BlockContext(cfg.heads, cfg.eps, None), flags, split
        )

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0):
        return cls(cfg, init_params(cfg, seed), seed)

    def new_batch(self, tag: int):
        if self.dropout is not None:
            self.dropout.new_batch(tag)

    # -- open layer --

    def embed(self, batch):
        p = self.params
        x = p.tok[batch.src] + p.pos[None, : batch.src.shape[1]]
        if self.cfg.arch != "encdec":
            return x
        tok, pos = p.dec_embed
        y = tok[batch.tgt_in] + pos[None, : batch.tgt_in.shape[1]]
        return np.concatenate([x, y], axis=1)

    def embed_vjp(self, batch, lam0):
        p = self.params
        s = batch.src.shape[1]
        d = self.cfg.d
        dtok = np.zeros_like(p.tok)
        np.add.at(dtok, batch.src.ravel(), lam0[:, :s].reshape(-1, d))
        dpos = np.zeros_like(p.pos)
        dpos[:s] = lam0[:, :s].sum(axis=0)
        dec = []
        if self.cfg.arch == "encdec":
            tok, pos = p.dec_embed
            t = batch.tgt_in.shape[1]
            dt = np.zeros_like(tok)
            np.add.at(dt, batch.tgt_in.ravel(), lam0[:, s:].reshape(-1, d))
            dp = np.zeros_like(pos)
            dp[:t] = lam0[:, s:].sum(axis=0)
            dec = [dt, dp]
        return dtok, dpos, dec

    # -- close layer --

    def _head_input(self, z):
        return z[:, self.cfg.seq_len :] if self.cfg.arch == "encdec" else z

    def logits(self, z):
        p = self.params
        ln = layer_norm(self._head_input(z), p.final_gain, p.final_bias, self.cfg.eps)
        return linear(ln, p.head)

    def head_loss(self, z, labels):
        """Mean cross-entropy over labelled positions and its pullback to ``z``."""
        p = self.params
        y = self._head_input(z)
        ln = layer_norm(y, p.final_gain, p.final_bias, self.cfg.eps)
        logits = linear(ln, p.head)
        mask = labels >= 0
        count = int(mask.sum())
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        safe = np.where(mask, labels, 0)
        picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
        loss = -float(np.where(mask, picked, 0.0).sum()) / count
        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, safe[..., None], np.take_along_axis(dlogits, safe[..., None], -1) - 1.0, -1)
        dlogits = dlogits * (mask[..., None] / count)
        dln, ghead = linear_vjp(ln, p.head, dlogits)
        dy, dgain, dbias = layer_norm_vjp(y, p.final_gain, p.final_bias, dln, self.cfg.eps)
        dz = np.zeros_like(z)
        if self.cfg.arch == "encdec":
            dz[:, self.cfg.seq_len :] = dy
        else:
            dz[...] = dy
        correct = int(((logits.argmax(axis=-1) == labels) & mask).sum())
        return loss, dz, (dgain, dbias, ghead), correct, count

    def assemble(self, batch, lam0, block_grads, head_grads) -> ModelParams:
        dtok, dpos, dec = self.embed_vjp(batch, lam0)
        dgain, dbias, ghead = head_grads
        return ModelParams(dtok, dpos, dec, block_grads, dgain, dbias, ghead)

    # -- evaluation --

    def loss(self, batch) -> float:
        z = serial_forward(self.stack, self.embed(batch))[-1]
        return self.head_loss(z, batch.labels)[0]

    def accuracy(self, batch) -> float:
        z = serial_forward(self.eval_stack, self.embed(batch))[-1]
        pred = self.logits(z).argmax(axis=-1)
        mask = batch.labels >= 0
        return float(((pred == batch.labels) & mask).sum()) / float(mask.sum())


def serial_loss_grad(model: Model, batch) -> LossGrad:
    states = serial_forward(model.stack, model.embed(batch))
    loss, dz, head_grads, correct, total = model.head_loss(states[-1], batch.labels)
    lam0, block_grads = serial_backward(model.stack, states, dz)
    return LossGrad(loss, model.assemble(batch, lam0, block_grads, head_grads), correct, total)


def layer_parallel_loss_grad(model: Model, batch, mg: MGRITConfig, executor=None, warm=None) -> LossGrad:
    """Loss and gradient with MGRIT forward/adjoint solves on the interior layers.

    ``warm`` is a dict carrying the previous interior forward states and
    reversed adjoint states when ``mg.init_guess == "warm"``; it is updated.
    """
    stack = model.stack
    n = len(stack)
    start, stop = stack.interior()
    open_states = serial_forward(stack, model.embed(batch), 0, start)
    prop = StackPropagator(stack, start, stop)
    use_warm = mg.init_guess == "warm" and warm is not None

    def guess(key):
        if mg.init_guess == "warm":
            return warm.get(key, "broadcast") if use_warm else "broadcast"
        return mg.init_guess

    fwd_trace, fwd_conv = [], True
    if mg.fwd_iters > 0:
        hier = build_hierarchy(prop, open_states[-1], mg.cf, mg.levels, guess("fwd"), executor)
        W, trace, fwd_conv = solve_forward(hier, mg.fwd_iters, mg.fwd_tol)
        W = list(W)
        fwd_trace = trace.norms
    else:
        W = serial_solution(prop, open_states[-1])
    close_states = serial_forward(stack, W[-1], stop, n)
    loss, dz, head_grads, correct, total = model.head_loss(close_states[-1], batch.labels)
    lam, close_grads = serial_backward(stack, close_states, dz, stop, n)

    bwd_trace, bwd_conv = [], True
    if mg.bwd_iters > 0:
        adj = solve_backward(
            prop, W, lam, mg.cf, mg.levels, mg.bwd_iters, mg.bwd_tol, guess("bwd"), executor
        )
        lam_int, int_grads = adj.lam[0], adj.grads
        bwd_trace, bwd_conv = adj.trace.norms, adj.converged
        if use_warm:
            warm["bwd"] = adj.reversed_states
    else:
        lams, int_grads = serial_adjoint(prop, W, lam)
        lam_int = lams[0]
    if use_warm:
        warm["fwd"] = W
    lam0, open_grads = serial_backward(stack, open_states, lam_int, 0, start)
    grads = model.assemble(batch, lam0, open_grads + int_grads + close_grads, head_grads)
    return LossGrad(loss, grads, correct, total, fwd_trace, bwd_trace, fwd_conv, bwd_conv)


def flat_params(model: Model) -> np.ndarray:
    return tree.flatten(model.params)


def set_flat_params(model: Model, flat: np.ndarray):
    """Overwrite parameters in place (the stacks keep their references)."""
    pos = 0
    for _, x in tree.leaves(model.params):
        x[...] = flat[pos : pos + x.size].reshape(x.shape)
        pos += x.size
