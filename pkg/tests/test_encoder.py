import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitrans import tensor as tn
from hitrans.encoder import EncoderConfig, EncoderStack, sinusoidal_positions
from hitrans.errors import ConfigError, ContractError, LengthError
from hitrans.gradcheck import grad_check
from hitrans.tensor import Tensor
from reference import reference_block


def stack(seed=0, std=0.3, **kw):
    cfg = EncoderConfig(**{"n_layers": 2, "n_heads": 2, "d_model": 8, "d_ff": 16, "max_positions": 16, **kw})
    return EncoderStack(cfg, np.random.default_rng(seed), init_std=std)


def test_matches_straight_line_reference():
    st_ = stack(seed=3)
    x = np.random.default_rng(4).normal(size=(5, 8))
    ref = x + st_.params["positions"].data[:5]
    for i in range(2):
        ref = reference_block(ref, st_.params, f"layers.{i}.", 2, 1e-12)
    np.testing.assert_allclose(st_.encode(Tensor(x)).data, ref, atol=1e-12)


def test_single_position_attention_is_value_then_output_projection():
    st_ = stack()
    P = st_.params
    x = np.random.default_rng(1).normal(size=(1, 8))
    out = st_.multi_head_attention(Tensor(x), None, 0).data
    v = x @ P["layers.0.attn.wv"].data + P["layers.0.attn.bv"].data
    np.testing.assert_allclose(out, v @ P["layers.0.attn.wo"].data + P["layers.0.attn.bo"].data, atol=1e-14)


def test_attention_rows_and_masking():
    st_ = stack()
    x = Tensor(np.random.default_rng(2).normal(size=(3, 6, 8)))
    mask = np.ones((3, 6), dtype=bool)
    mask[0, 4:] = False
    mask[2, 1] = False
    attn = []
    st_.encode(x, mask, attn_out=attn)
    assert len(attn) == 2
    for w in attn:
        assert w.shape == (3, 2, 6, 6)
        assert np.all(np.abs(w.sum(axis=-1) - 1) < 1e-9) and (w >= 0).all()
        assert (w[0, :, :, 4:] < 1e-12).all() and (w[2, :, :, 1] < 1e-12).all()


def test_all_keys_masked_is_contract_error():
    with pytest.raises(ContractError):
        stack().encode(Tensor(np.zeros((2, 8))), np.zeros(2, dtype=bool))


def test_shapes_and_eval_determinism():
    st_ = stack(attn_dropout=0.5)
    x = Tensor(np.random.default_rng(0).normal(size=(7, 8)))
    a, b = st_.encode(x).data, st_.encode(x).data
    assert a.shape == (7, 8) and np.array_equal(a, b)
    t1 = st_.encode(x, train=True, rng=np.random.default_rng(1)).data
    t2 = st_.encode(x, train=True, rng=np.random.default_rng(1)).data
    assert np.array_equal(t1, t2) and not np.array_equal(t1, a)


def test_too_long_sequence_is_length_error():
    with pytest.raises(LengthError):
        stack().encode(Tensor(np.zeros((17, 8))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_no_positions_is_exactly_permutation_equivariant(T, seed):
    rng = np.random.default_rng(seed)
    st_ = stack(seed=seed % 7, positional_kind="none")
    x = rng.normal(size=(T, 8))
    perm = rng.permutation(T)
    assert np.array_equal(st_.encode(Tensor(x)).data[perm], st_.encode(Tensor(x[perm])).data)


def test_learned_positions_break_equivariance():
    st_ = stack()
    x = np.random.default_rng(5).normal(size=(4, 8))
    perm = np.array([1, 0, 3, 2])
    assert not np.allclose(st_.encode(Tensor(x)).data[perm], st_.encode(Tensor(x[perm])).data)


def test_sinusoidal_examples():
    pe = sinusoidal_positions(6, 8)
    assert (pe[0, 0::2] == 0).all() and (pe[0, 1::2] == 1).all()
    assert (np.abs(pe) <= 1).all()
    assert pe[1, 0] == pytest.approx(0.84147, abs=5e-6) and pe[1, 0] == math.sin(1.0)
    with pytest.raises(ConfigError):
        sinusoidal_positions(3, 5)


@pytest.mark.parametrize("kind", ["learned", "sinusoidal", "none"])
def test_param_count_matches_closed_form(kind):
    st_ = stack(positional_kind=kind)
    assert st_.param_count() == st_.cfg.param_count()


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(attn_dropout=1.0)
    with pytest.raises(ConfigError):
        EncoderConfig(positional_kind="rotary")


def test_one_layer_gradient():
    st_ = stack(n_layers=1)
    x = Tensor(np.random.default_rng(6).normal(size=(4, 8)), requires_grad=True)
    w = Tensor(np.random.default_rng(7).normal(size=(4, 8)))
    params = [x] + list(st_.params.values())
    assert grad_check(lambda: tn.total(st_.layer(x, None, 0) * w), params, eps=1e-5, samples=200) < 1e-5


def test_full_stack_gradient_tiny():
    cfg = EncoderConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_positions=8)
    st_ = EncoderStack(cfg, np.random.default_rng(8), init_std=0.3)
    x = Tensor(np.random.default_rng(9).normal(size=(5, 16)), requires_grad=True)
    w = Tensor(np.random.default_rng(10).normal(size=(5, 16)))
    params = [x] + list(st_.params.values())
    assert grad_check(lambda: tn.total(st_.encode(x) * w), params, eps=1e-5, samples=200) < 1e-5
