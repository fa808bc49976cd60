"""Model tests: position encodings, masking, loss oracle, checkpoint bytes."""

import math

import numpy as np
import pytest

from bdlm.autodiff import Tensor, finite_difference_grad, grad_gap
from bdlm.errors import (AllPositionsPadded, ConfigMismatch, SequenceTooLong,
                         ShapeMismatch, SoftPositionOutOfRange)
from bdlm.model import (Model, ModelConfig, load_checkpoint, save_checkpoint,
                        sinusoidal_positions)

V, NT = 20, 4


def tiny_config(**kw):
    base = dict(vocab_size=V, n_types=NT, d_model=8, n_heads=2, enc_layers=1,
                dec_layers=1, ffn_dim=16, dropout=0.0, max_len=62,
                label_smoothing=0.1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(dtype=np.float64, seed=3, **kw):
    return Model.init(tiny_config(**kw), seed=seed, dtype=dtype)


def batch(rng, b=2, ts=5, td=4):
    enc_t = rng.integers(12, V, size=(b, ts))
    enc_y = rng.integers(0, NT, size=(b, ts))
    dec_t = rng.integers(12, V, size=(b, td))
    dec_y = rng.integers(0, NT, size=(b, td))
    hard = np.broadcast_to(np.arange(td), (b, td)).copy()
    soft = rng.integers(0, ts, size=(b, td))
    tgt = rng.integers(12, V, size=(b, td))
    return enc_t, enc_y, dec_t, dec_y, hard, soft, tgt


def full_logits(m, rng_seed=5, **kw):
    rng = np.random.default_rng(rng_seed)
    enc_t, enc_y, dec_t, dec_y, hard, soft, tgt = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    logits = m.decode_forward(dec_t, dec_y, hard, soft, states, mask,
                              use_soft=True, **kw)
    return logits, tgt


# --- sinusoidal positions ---

def test_position_zero_alternates_zero_one():
    pe = sinusoidal_positions(4, 8)
    assert np.allclose(pe[0, 0::2], 0.0)
    assert np.allclose(pe[0, 1::2], 1.0)


def test_position_one_first_component_is_sin_one():
    pe = sinusoidal_positions(4, 8)
    assert pe[1, 0] == pytest.approx(math.sin(1.0))


def test_position_values_match_direct_formula():
    pe = sinusoidal_positions(8, 16)
    assert pe[3, 4] == pytest.approx(math.sin(3.0 / 10000 ** (4 / 16)))
    assert pe[3, 5] == pytest.approx(math.cos(3.0 / 10000 ** (4 / 16)))
    assert pe[7, 15] == pytest.approx(math.cos(7.0 / 10000 ** (14 / 16)))


def test_position_bounds():
    pe = sinusoidal_positions(64, 128)
    assert np.all(pe <= 1.0) and np.all(pe >= -1.0)


# --- config ---

def test_config_defaults():
    cfg = ModelConfig(vocab_size=100, n_types=4)
    assert (cfg.d_model, cfg.n_heads, cfg.enc_layers, cfg.dec_layers) == (128, 8, 6, 6)
    assert cfg.ffn_dim == 512 and cfg.dropout == 0.1 and cfg.max_len == 64
    assert cfg.label_smoothing == 0.1


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        ModelConfig(vocab_size=10, n_types=2, d_model=10, n_heads=4)
    with pytest.raises(ShapeMismatch):
        ModelConfig(vocab_size=10, n_types=2, max_len=32)


# --- forward shape and masking behavior ---

def test_forward_shapes():
    m = tiny_model()
    logits, _ = full_logits(m)
    assert logits.shape == (2, 4, V)


def test_sequence_too_long():
    m = tiny_model()
    t = np.ones((1, 63), dtype=int)
    with pytest.raises(SequenceTooLong):
        m.encode_forward(t, t)


def test_shape_mismatch_tokens_types():
    m = tiny_model()
    with pytest.raises(ShapeMismatch):
        m.encode_forward(np.ones((1, 4), int), np.ones((1, 5), int))


def test_all_positions_padded():
    m = tiny_model()
    toks = np.zeros((1, 4), dtype=int)
    with pytest.raises(AllPositionsPadded):
        m.encode_forward(toks, np.zeros((1, 4), int))


def test_soft_position_out_of_range():
    m = tiny_model()
    rng = np.random.default_rng(0)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    soft[0, 0] = enc_t.shape[1]          # one past the encoder end
    with pytest.raises(SoftPositionOutOfRange):
        m.decode_forward(dec_t, dec_y, hard, soft, states, mask, use_soft=True)


def test_padding_invariance():
    m = tiny_model()
    rng = np.random.default_rng(1)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    base = m.decode_forward(dec_t, dec_y, hard, soft, states, mask,
                            use_soft=True).data
    pad = np.zeros((2, 2), dtype=int)
    enc_tp = np.concatenate([enc_t, pad], axis=1)
    enc_yp = np.concatenate([enc_y, pad], axis=1)
    states_p, mask_p = m.encode_forward(enc_tp, enc_yp)
    assert not mask_p[:, -2:].any()
    padded = m.decode_forward(dec_t, dec_y, hard, soft, states_p, mask_p,
                              use_soft=True).data
    assert np.array_equal(base, padded)


def test_decoder_padding_invariance():
    m = tiny_model()
    rng = np.random.default_rng(2)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    base = m.decode_forward(dec_t, dec_y, hard, soft, states, mask,
                            use_soft=True).data
    pad = np.zeros((2, 3), dtype=int)
    dec_tp = np.concatenate([dec_t, pad], axis=1)
    dec_yp = np.concatenate([dec_y, pad], axis=1)
    hard_p = np.broadcast_to(np.arange(7), (2, 7)).copy()
    soft_p = np.concatenate([soft, pad], axis=1)
    out = m.decode_forward(dec_tp, dec_yp, hard_p, soft_p, states, mask,
                           use_soft=True).data
    assert np.array_equal(base, out[:, :4, :])


def test_causality():
    m = tiny_model()
    rng = np.random.default_rng(3)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    a = m.decode_forward(dec_t, dec_y, hard, soft, states, mask, use_soft=True).data
    dec_t2 = dec_t.copy()
    dec_t2[:, -1] = (dec_t2[:, -1] + 1 - 12) % (V - 12) + 12
    b = m.decode_forward(dec_t2, dec_y, hard, soft, states, mask, use_soft=True).data
    assert np.array_equal(a[:, :-1, :], b[:, :-1, :])
    assert not np.array_equal(a[:, -1, :], b[:, -1, :])


def test_batch_permutation_equivariance():
    m = tiny_model()
    rng = np.random.default_rng(4)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng, b=3)
    perm = np.array([2, 0, 1])
    states, mask = m.encode_forward(enc_t, enc_y)
    a = m.decode_forward(dec_t, dec_y, hard, soft, states, mask, use_soft=True).data
    states_p, mask_p = m.encode_forward(enc_t[perm], enc_y[perm])
    b = m.decode_forward(dec_t[perm], dec_y[perm], hard[perm], soft[perm],
                         states_p, mask_p, use_soft=True).data
    assert np.array_equal(a[perm], b)


def test_soft_off_equals_zeroed_soft_table():
    m = tiny_model()
    rng = np.random.default_rng(5)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    m.params["dec_soft_pos"].data[:] = 0.0
    a = m.decode_forward(dec_t, dec_y, hard, soft, states, mask, use_soft=True).data
    b = m.decode_forward(dec_t, dec_y, hard, None, states, mask, use_soft=False).data
    assert np.array_equal(a, b)


def test_soft_table_untouched_when_disabled():
    m = tiny_model()
    rng = np.random.default_rng(6)
    enc_t, enc_y, dec_t, dec_y, hard, _, tgt = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    logits = m.decode_forward(dec_t, dec_y, hard, None, states, mask, use_soft=False)
    loss, _ = m.loss(logits, tgt, np.ones_like(tgt, dtype=bool))
    loss.backward()
    assert m.params["dec_soft_pos"].grad is None
    assert m.params["dec_hard_pos"].grad is not None


def test_cross_attention_rows_sum_to_one():
    m = tiny_model()
    rng = np.random.default_rng(7)
    enc_t, enc_y, dec_t, dec_y, hard, soft, _ = batch(rng)
    states, mask = m.encode_forward(enc_t, enc_y)
    collected = []
    m.decode_forward(dec_t, dec_y, hard, soft, states, mask, use_soft=True,
                     collect_attn=collected)
    assert len(collected) == m.config.dec_layers
    for w in collected:
        assert w.shape == (2, m.config.n_heads, 4, 5)
        assert np.allclose(w.sum(-1), 1.0, atol=1e-6)


# --- loss oracle ---

def test_loss_uniform_logits_is_log_vocab():
    m = tiny_model()
    logits = Tensor(np.zeros((1, 3, V)))
    tgt = np.array([[4, 9, 17]])
    loss, _ = m.loss(logits, tgt, np.ones((1, 3), bool))
    assert float(loss.data) == pytest.approx(math.log(V), rel=1e-12)


def test_loss_zero_smoothing_perfect_prediction():
    m = tiny_model(label_smoothing=0.0)
    logits = np.full((1, 2, V), -1e4)
    logits[0, 0, 7] = 1e4
    logits[0, 1, 3] = 1e4
    loss, stats = m.loss(Tensor(logits), np.array([[7, 3]]), np.ones((1, 2), bool))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)
    assert stats["n_correct"] == 2


def test_loss_hand_computed_smoothed_value():
    # V=4, eps=0.1, logits (10,0,0,0), target 0:
    #   loss = -sum_v q_v log p_v with q = (0.925, 0.025, 0.025, 0.025)
    #        = log(e^10 + 3) - 0.925 * 10
    cfg = ModelConfig(vocab_size=4, n_types=2, d_model=8, n_heads=2,
                      enc_layers=1, dec_layers=1, label_smoothing=0.1)
    m = Model.init(cfg, dtype=np.float64)
    logits = np.array([[[10.0, 0.0, 0.0, 0.0]]])
    expected = math.log(math.exp(10.0) + 3.0) - 0.925 * 10.0
    loss, _ = m.loss(Tensor(logits), np.array([[0]]), np.ones((1, 1), bool))
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)


def test_loss_batch_is_token_weighted_mean():
    m = tiny_model()
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(2, 3, V))
    tgt = rng.integers(0, V, size=(2, 3))
    mask = np.array([[True, True, False], [True, True, True]])
    whole, _ = m.loss(Tensor(logits), tgt, mask)
    l0, _ = m.loss(Tensor(logits[:1]), tgt[:1], mask[:1])
    l1, _ = m.loss(Tensor(logits[1:]), tgt[1:], mask[1:])
    merged = (2 * float(l0.data) + 3 * float(l1.data)) / 5
    assert float(whole.data) == pytest.approx(merged, rel=1e-12)


def test_loss_all_padded_rejected():
    m = tiny_model()
    with pytest.raises(AllPositionsPadded):
        m.loss(Tensor(np.zeros((1, 2, V))), np.zeros((1, 2), int),
               np.zeros((1, 2), bool))


def test_loss_ignores_padded_positions():
    m = tiny_model()
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(1, 4, V))
    tgt = rng.integers(0, V, size=(1, 4))
    mask = np.array([[True, True, True, False]])
    a, _ = m.loss(Tensor(logits), tgt, mask)
    logits2 = logits.copy()
    logits2[0, 3, :] = 123.0
    tgt2 = tgt.copy()
    tgt2[0, 3] = 1
    b, _ = m.loss(Tensor(logits2), tgt2, mask)
    assert float(a.data) == float(b.data)


# --- end-to-end gradients (spot check; the full sweep is an acceptance test) ---

def test_model_gradients_spot_check():
    m = tiny_model(dtype=np.float64)
    rng = np.random.default_rng(10)
    enc_t, enc_y, dec_t, dec_y, hard, soft, tgt = batch(rng)
    mask = np.ones(tgt.shape, bool)

    def forward():
        states, emask = m.encode_forward(enc_t, enc_y)
        logits = m.decode_forward(dec_t, dec_y, hard, soft, states, emask,
                                  use_soft=True)
        loss, _ = m.loss(logits, tgt, mask)
        return loss

    loss = forward()
    loss.backward()
    for name in ("tok_emb", "type_emb", "dec_soft_pos", "enc0.self.wq",
                 "dec0.cross.wv", "dec0.w1", "enc_lng"):
        analytic = m.params[name].grad
        fd = finite_difference_grad(lambda: forward().data, m.params[name], h=1e-5)
        assert grad_gap(analytic, fd) < 1e-6, name


# --- greedy decoding ---

def test_greedy_ties_pick_lowest_id():
    m = tiny_model()
    for p in m.params.values():
        p.data[:] = 0.0
    out, truncated = m.greedy_decode([13, 14], [0, 0], tgt_type_id=1,
                                     bos_id=2, eos_id=3, max_len=4)
    assert out == [0, 0, 0, 0]       # all-equal logits -> lowest id wins
    assert truncated


def test_greedy_max_len_one_gives_single_token():
    m = tiny_model()
    out, truncated = m.greedy_decode([13, 14, 15], [0, 0, 0], tgt_type_id=1,
                                     bos_id=2, eos_id=3, max_len=1)
    assert len(out) <= 1
    if out:                          # eos on the first step is legal
        assert truncated


def test_greedy_deterministic():
    m = tiny_model(seed=11)
    a = m.greedy_decode([13, 14, 15], [0, 0, 0], 1, 2, 3)
    b = m.greedy_decode([13, 14, 15], [0, 0, 0], 1, 2, 3)
    assert a == b


def test_greedy_batch_matches_single():
    m = tiny_model(seed=12)
    srcs = [[13, 14], [15, 16, 17]]
    singles = [m.greedy_decode(s, [0] * len(s), 1, 2, 3, max_len=6)[0] for s in srcs]
    padded = np.zeros((2, 3), dtype=int)
    padded[0, :2] = srcs[0]
    padded[1, :] = srcs[1]
    types = np.zeros((2, 3), dtype=int)
    batch_out, _ = m.greedy_decode_batch(padded, types, 1, 2, 3, max_len=6)
    assert batch_out == singles


# --- checkpoint format ---

def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = tiny_model(dtype=np.float32, seed=13)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, m)
    m2 = load_checkpoint(p1)
    assert m2.config == m.config
    assert list(m2.params) == list(m.params)
    for k in m.params:
        assert np.array_equal(m2.params[k].data, m.params[k].data)
    save_checkpoint(p2, m2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(b"bdlm-ckpt v1\n")


def test_checkpoint_rejects_wrong_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(p)


def test_float64_forward_dtype():
    m = tiny_model(dtype=np.float64)
    logits, _ = full_logits(m)
    assert logits.dtype == np.float64
    m32 = m.astype(np.float32)
    logits32, _ = full_logits(m32)
    assert logits32.dtype == np.float32
