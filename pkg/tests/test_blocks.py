import dataclasses

import numpy as np
import pytest

from layerpar import tree
from layerpar.blocks import (
    CAUSAL,
    DEC,
    ENC,
    BlockContext,
    DropoutMask,
    LayerStack,
    StackedState,
    adjoint_step,
    apply_buffer_layers,
    attention_forward,
    buffer_schedule,
    decoder_step,
    encoder_step,
    init_decoder_block,
    init_encoder_block,
    serial_backward,
    serial_forward,
    stacked_step,
)
from layerpar.tensor import DimensionError, gelu, layer_norm, linear

from oracles import attention_oracle, central_fd

D, FF, H = 8, 16, 2
CTX = BlockContext(H)


def enc_block(seed=0, std=0.3):
    return init_encoder_block(np.random.default_rng(seed), D, FF, std)


def dec_block(seed=0, std=0.3):
    return init_decoder_block(np.random.default_rng(seed), D, FF, std)


def zeroed(p):
    return tree.tree_map(np.zeros_like, p)


def x_of(seed, s=5, b=2):
    return np.random.default_rng(seed).standard_normal((b, s, D))


def phi_attn(x, kv, ln_g, ln_b, p, causal):
    ln = layer_norm(x, ln_g, ln_b)
    return attention_forward(ln, ln if kv is None else kv, p, H, causal)[0]


def phi_mlp(x, p):
    return linear(gelu(linear(layer_norm(x, p.ln2_gain, p.ln2_bias), p.mlp_in)), p.mlp_out)


# -- encoder -------------------------------------------------------------------


def test_encoder_zero_weights_is_identity():
    x = x_of(1)
    assert np.array_equal(encoder_step(x, zeroed(enc_block()), 1.0, ctx=CTX), x)


def test_encoder_h_zero_is_identity():
    x = x_of(2)
    assert np.array_equal(encoder_step(x, enc_block(), 0.0, ctx=CTX), x)


def test_encoder_matches_composition_oracle():
    x, p = x_of(3), enc_block(3)
    a = phi_attn(x, None, p.ln1_gain, p.ln1_bias, p.attn, False)
    expect = x + 1.0 * (a + phi_mlp(x + a, p))
    assert np.array_equal(encoder_step(x, p, 1.0, ctx=CTX), expect)


@pytest.mark.parametrize("causal", [False, True])
def test_attention_matches_per_head_oracle(causal):
    x, p = x_of(4), enc_block(4)
    out = attention_forward(x, x, p.attn, H, causal)[0]
    assert np.max(np.abs(out - attention_oracle(x, x, p.attn, H, causal))) <= 1e-13


def test_encoder_shape_error():
    with pytest.raises(DimensionError):
        encoder_step(np.ones((2, 3, D + 1)), enc_block(), 1.0, ctx=CTX)


def test_residual_step_is_linear_in_h():
    x, p = x_of(5), enc_block(5)
    f1 = encoder_step(x, p, 1.0, ctx=CTX) - x
    for h in (0.5, 0.125, 2.0):
        assert np.max(np.abs((encoder_step(x, p, h, ctx=CTX) - x) - h * f1)) <= 1e-14 * np.abs(f1).max() * 4


# -- decoder ---------------------------------------------------------------------


def test_decoder_zero_weights_is_identity():
    y, xe = x_of(6, 4), x_of(7, 5)
    assert np.array_equal(decoder_step(y, xe, zeroed(dec_block()), 1.0, ctx=CTX), y)


def test_decoder_without_cross_values_is_causal_encoder():
    p = dec_block(8)
    p.cross.v.weight[...] = 0.0
    p.cross.v.bias[...] = 0.0
    p.cross.o.bias[...] = 0.0
    enc = init_encoder_block(np.random.default_rng(0), D, FF)
    for f in ("ln1_gain", "ln1_bias", "attn", "ln2_gain", "ln2_bias", "mlp_in", "mlp_out"):
        setattr(enc, f, getattr(p, f))
    y, xe = x_of(9, 4), x_of(10, 6)
    expect = encoder_step(y, enc, 0.7, ctx=CTX, causal=True)
    assert np.array_equal(decoder_step(y, xe, p, 0.7, ctx=CTX), expect)


def test_decoder_matches_composition_oracle():
    p = dec_block(11)
    y, xe = x_of(12, 4), x_of(13, 6)
    a = phi_attn(y, None, p.ln1_gain, p.ln1_bias, p.attn, True)
    c = attention_forward(layer_norm(y + a, p.ln3_gain, p.ln3_bias), xe, p.cross, H)[0]
    ybar = a + c
    expect = y + 0.5 * (ybar + phi_mlp(y + ybar, p))
    assert np.array_equal(decoder_step(y, xe, p, 0.5, ctx=CTX), expect)


def test_decoder_is_causal():
    p = dec_block(14)
    y, xe = x_of(15, 5), x_of(16, 3)
    y2 = y.copy()
    y2[:, -1] += 1.0
    a, b = decoder_step(y, xe, p, 1.0, ctx=CTX), decoder_step(y2, xe, p, 1.0, ctx=CTX)
    assert np.array_equal(a[:, :-1], b[:, :-1])


# -- stacked encoder-decoder -----------------------------------------------------


def encdec_stack(n_enc=6, n_dec=6, split=5):
    blocks = [enc_block(i) for i in range(n_enc)] + [dec_block(100 + i) for i in range(n_dec)]
    kinds = [ENC] * n_enc + [DEC] * n_dec
    return LayerStack(blocks, kinds, [1.0] * (n_enc + n_dec), CTX, split=split)


def test_stacked_step_freezes_the_inactive_half():
    st = encdec_stack(3, 3)
    z = StackedState(x_of(20, 5), x_of(21, 4))
    z1 = stacked_step(z, st, 2)
    assert not np.array_equal(z1.X, z.X) and np.array_equal(z1.Y, z.Y)
    assert z1.encoder_frozen
    z2 = stacked_step(z1, st, 3)
    assert np.array_equal(z2.X, z1.X) and not np.array_equal(z2.Y, z1.Y)


def test_stacked_step_range():
    st = encdec_stack(2, 2)
    with pytest.raises(IndexError):
        stacked_step(StackedState(x_of(0, 5), x_of(1, 4)), st, 4)


def test_stacked_trajectory_matches_two_phase_order():
    st = encdec_stack()
    X, Y = x_of(22, 5), x_of(23, 4)
    z = StackedState(X, Y)
    for n in range(12):
        prev = z
        z = stacked_step(z, st, n)
        if n < 6:
            assert np.array_equal(z.Y, prev.Y)
        else:
            assert np.array_equal(z.X, prev.X)
    for n in range(6):
        X = encoder_step(X, st.blocks[n], 1.0, n, ctx=CTX)
    for n in range(6, 12):
        Y = decoder_step(Y, X, st.blocks[n], 1.0, n, ctx=CTX)
    assert np.array_equal(z.X, X) and np.array_equal(z.Y, Y)


def test_no_decoder_layers_is_plain_encoder():
    blocks = [enc_block(i) for i in range(3)]
    st = LayerStack(blocks, [ENC] * 3, [1.0] * 3, CTX, split=5)
    X, Y = x_of(24, 5), x_of(25, 2)
    z = StackedState(X, Y)
    for n in range(3):
        z = stacked_step(z, st, n)
        X = encoder_step(X, blocks[n], 1.0, n, ctx=CTX)
    assert np.array_equal(z.X, X) and np.array_equal(z.Y, Y)


# -- adjoint -----------------------------------------------------------------------


def mixed_stacks():
    yield "encoder", LayerStack([enc_block(i) for i in range(3)], [ENC] * 3, [1.0, 0.5, 1.0], CTX), x_of(30)
    yield "causal", LayerStack([enc_block(i) for i in range(3)], [CAUSAL] * 3, [1.0] * 3, CTX), x_of(31)
    yield "encdec", encdec_stack(2, 2), x_of(32, 9)


@pytest.mark.parametrize("name,stack,z", list(mixed_stacks()), ids=lambda v: v if isinstance(v, str) else "")
def test_adjoint_zero_cotangent(name, stack, z):
    lam, g = adjoint_step(stack, len(stack) - 1, z, np.zeros_like(z))
    assert not lam.any() and tree.norm(g) == 0.0


def test_adjoint_zero_weight_layer_is_identity():
    st = LayerStack([zeroed(enc_block())], [ENC], [1.0], CTX)
    z, lam = x_of(33), x_of(34)
    assert np.array_equal(adjoint_step(st, 0, z, lam)[0], lam)


@pytest.mark.parametrize("name,stack,z", list(mixed_stacks()), ids=lambda v: v if isinstance(v, str) else "")
def test_adjoint_step_matches_fd(name, stack, z):
    r = np.random.default_rng(35)
    n = len(stack) - 1
    lam = r.standard_normal(z.shape)
    lam_in, grads = adjoint_step(stack, n, z, lam)
    v = r.standard_normal(z.shape)
    fd = central_fd(lambda x: float(np.vdot(lam, stack.step(n, x))), z, v)
    assert abs(fd - float(np.vdot(lam_in, v))) <= 1e-5 * abs(fd)
    # parameter direction
    p = stack.blocks[n]
    x0 = tree.flatten(p)
    dp = r.standard_normal(x0.size)

    def f(flat):
        stack.blocks[n] = tree.unflatten(p, flat)
        return float(np.vdot(lam, stack.step(n, z)))

    try:
        fd = central_fd(f, x0, dp)
    finally:
        stack.blocks[n] = p
    an = float(tree.flatten(grads) @ dp)
    assert abs(fd - an) <= 1e-5 * abs(fd)


def test_adjoint_shape_mismatch():
    st = LayerStack([enc_block()], [ENC], [1.0], CTX)
    with pytest.raises(DimensionError):
        adjoint_step(st, 0, x_of(0), x_of(1, 4))


@pytest.mark.parametrize("name,stack,z", list(mixed_stacks()), ids=lambda v: v if isinstance(v, str) else "")
def test_whole_stack_backprop_matches_fd(name, stack, z):
    r = np.random.default_rng(36)
    w = r.standard_normal(z.shape)
    loss = lambda x: float(np.sum(w * np.tanh(serial_forward(stack, x)[-1])))
    states = serial_forward(stack, z)
    lam0, _ = serial_backward(stack, states, w * (1 - np.tanh(states[-1]) ** 2))
    v = r.standard_normal(z.shape)
    fd = central_fd(loss, z, v)
    assert abs(fd - float(np.vdot(lam0, v))) <= 1e-5 * abs(fd)


# -- buffers -------------------------------------------------------------------------


def test_buffer_schedule_gpt_split():
    h, flags = buffer_schedule(20, 2, 2)
    assert sum(not f for f in flags) == 16
    assert h[:2] == [1.0, 1.0] and h[-2:] == [1.0, 1.0] and set(h[2:18]) == {1.0 / 16}
    st = LayerStack([enc_block(i) for i in range(20)], [CAUSAL] * 20, h, CTX, flags)
    assert st.interior() == (2, 18)


def test_buffer_schedule_rejects_too_many():
    with pytest.raises(ValueError):
        buffer_schedule(4, 2, 2)


def test_zero_buffers_is_identity_wrapper():
    st = LayerStack([enc_block(i) for i in range(4)], [ENC] * 4, [1.0] * 4, CTX)
    z = x_of(40)
    assert st.interior() == (0, 4)
    assert np.array_equal(apply_buffer_layers(z, st), serial_forward(st, z)[-1])


def test_buffered_and_unbuffered_match_their_serial_oracles():
    blocks = [enc_block(i) for i in range(6)]
    z = x_of(41)
    for h, flags in (buffer_schedule(6, 1, 1), ([1.0] * 6, [False] * 6)):
        st = LayerStack(blocks, [ENC] * 6, h, CTX, flags)
        expect = z
        for n in range(6):
            expect = encoder_step(expect, blocks[n], h[n], n, ctx=CTX)
        assert np.array_equal(apply_buffer_layers(z, st), expect)


def test_buffer_flags_must_sit_at_ends():
    st = LayerStack([enc_block(i) for i in range(4)], [ENC] * 4, [1.0] * 4, CTX, [False, True, False, False])
    with pytest.raises(ValueError):
        st.interior()


# -- dropout -------------------------------------------------------------------------


def test_dropout_frozen_within_batch():
    mask = DropoutMask(0.8, seed=3)
    ctx = BlockContext(H, dropout=mask)
    st = LayerStack([enc_block(i) for i in range(2)], [ENC] * 2, [1.0] * 2, ctx)
    z = x_of(50)
    mask.new_batch(5)
    a = st.step(1, z)
    st.step(0, z)
    assert np.array_equal(st.step(1, z), a)
    assert not np.array_equal(a, LayerStack(st.blocks, st.kinds, st.h, CTX).step(1, z))


def test_dropout_depends_only_on_seed_batch_layer():
    a, b = DropoutMask(0.5, 1), DropoutMask(0.5, 1)
    a.new_batch(7)
    b.new_batch(7)
    b.get(3, "mlp", (2, 4))  # different evaluation order
    assert np.array_equal(a.get(1, "attn", (2, 4)), b.get(1, "attn", (2, 4)))
    m1 = a.get(1, "attn", (2, 4))
    a.new_batch(8)
    assert not np.array_equal(m1, a.get(1, "attn", (2, 4)))


def test_dropout_adjoint_matches_fd():
    mask = DropoutMask(0.7, seed=2)
    mask.new_batch(1)
    st = LayerStack([enc_block(0)], [ENC], [1.0], BlockContext(H, dropout=mask))
    r = np.random.default_rng(0)
    z, lam, v = x_of(51), r.standard_normal((2, 5, D)), r.standard_normal((2, 5, D))
    lam_in, _ = st.step_vjp(0, z, lam)
    fd = central_fd(lambda x: float(np.vdot(lam, st.step(0, x))), z, v)
    assert abs(fd - float(np.vdot(lam_in, v))) <= 1e-5 * abs(fd)


def test_params_dataclasses_roundtrip():
    p = dec_block(0)
    q = tree.copy(p)
    assert [n for n, _ in tree.leaves(p)] == [n for n, _ in tree.leaves(q)]
    assert dataclasses.fields(p)[0].name == "ln1_gain"
