import pytest
from hypothesis import given, settings, strategies as st

from headfold.accounting import count_flops, count_params, flop_breakdown, param_breakdown
from headfold.model import ENCODER_DECODER, ENCODER_ONLY, ModelConfig, build, parse_shorthand, reconstruct


def cfg(kind=ENCODER_ONLY, heads=1, enc=1, dec=0, m=4, d_head=4, d_ffn=8, vocab=10, max_pos=6, tie=True):
    return ModelConfig(kind, heads, enc, dec, m, d_head, d_ffn, vocab, max_pos, "relu", tie)


def test_single_layer_by_hand():
    # attention 4*(4*4+4)=80, ffn 4*8+8+8*4+4=76, two layer norms 16,
    # embeddings 10*4 + 6*4, embedding norm 8
    c = cfg()
    assert count_params(c, "built") == 80 + 76 + 16 + 40 + 24 + 8 == 244
    # segment table 2*4 and pooler 4*4+4
    assert count_params(c, "published") == 244 + 8 + 20


def test_encoder_decoder_by_hand():
    c = cfg(ENCODER_DECODER, enc=1, dec=1)
    dec_layer = 2 * 80 + 76 + 3 * 8
    assert count_params(c) == 244 + dec_layer + 24 + 8
    untied = cfg(ENCODER_DECODER, enc=1, dec=1, tie=False)
    assert count_params(untied) - count_params(c) == 2 * 10 * 4


@pytest.mark.parametrize(
    "shorthand, heads, enc, dec, kind, tie",
    [
        ("1H-1L", 1, 1, 0, ENCODER_ONLY, True),
        ("2H-3L", 2, 3, 0, ENCODER_ONLY, True),
        ("2H-2L-1L", 2, 2, 1, ENCODER_DECODER, True),
        ("4H-1L-2L", 4, 1, 2, ENCODER_DECODER, False),
    ],
)
def test_built_convention_matches_materialised_model(shorthand, heads, enc, dec, kind, tie):
    c = parse_shorthand(shorthand, "desk", d_model=8, d_head=4, d_ffn=6 * heads, vocab=13, max_pos=7, tie_embeddings=tie)
    assert count_params(c, "built") == build(c, rng=0).n_params()


def test_unknown_convention():
    with pytest.raises(ValueError):
        param_breakdown(cfg(), "megatron")


@pytest.mark.parametrize(
    "shallow, profile, deep, millions, tol",
    [
        ("12H-12L", "bert-base", False, 109.5, 0.02),
        ("12H-12L", "bert-base", True, 110.0, 0.02),
        ("16H-24L", "bert-large", False, 335.1, 0.02),
        ("16H-24L", "bert-large", True, 337.4, 0.02),
        ("8H-6L-6L", "transformer-base", False, 63.2, 0.03),
    ],
)
def test_published_parameter_counts(shallow, profile, deep, millions, tol):
    c = parse_shorthand(shallow, profile)
    if deep:
        c = reconstruct(c)
    assert abs(count_params(c) / 1e6 - millions) <= tol * millions


@pytest.mark.parametrize(
    "shallow, profile, billions, deep_billions",
    [("12H-12L", "bert-base", 46.3, 46.9), ("16H-24L", "bert-large", 161.8, None)],
)
def test_published_flop_counts(shallow, profile, billions, deep_billions):
    c = parse_shorthand(shallow, profile)
    assert abs(count_flops(c, 512) / 1e9 - billions) <= 0.05 * billions
    if deep_billions is not None:
        assert abs(count_flops(reconstruct(c), 512) / 1e9 - deep_billions) <= 0.05 * deep_billions


def test_flops_by_hand():
    # n=2, m=4, w=4, d_ffn=8: projections 4*2*4*4=128, scores+context 2*2*2*4=32,
    # ffn 2*4*8*2=128, pooler 1*4*4=16
    assert count_flops(cfg(), 2) == 128 + 32 + 128 + 16
    e = cfg(ENCODER_DECODER, dec=1)
    parts = flop_breakdown(e, 2)
    assert parts["decoder"] == 2 * (128 + 32) + 128
    assert parts["output_head"] == 2 * 4 * 10
    with pytest.raises(ValueError):
        count_flops(cfg(), 0)


def test_head_count_does_not_change_attention_cost():
    # same attention width split into more heads: identical params and MACs
    one = cfg(heads=1, d_head=8, m=8)
    four = cfg(heads=4, d_head=2, m=8)
    assert count_params(one) == count_params(four)
    assert count_flops(one, 5) == count_flops(four, 5)


def test_reconstruction_preserves_flops_exactly():
    for text, profile in (("12H-12L", "bert-base"), ("8H-6L-6L", "transformer-base"), ("3H-2L", "desk")):
        c = parse_shorthand(text, profile)
        assert count_flops(reconstruct(c), 64) == count_flops(c, 64)


@pytest.mark.parametrize(
    "shorthand, profile",
    [("12H-12L", "bert-base"), ("16H-24L", "bert-large"), ("8H-6L-6L", "transformer-base")],
)
def test_reconstruction_parity_published(shorthand, profile):
    c = parse_shorthand(shorthand, profile)
    assert abs(count_params(reconstruct(c)) / count_params(c) - 1) <= 0.015


valid_configs = st.builds(
    lambda heads, enc, dec, vocab, ffn_mult, max_pos: ModelConfig(
        ENCODER_DECODER if dec else ENCODER_ONLY,
        heads,
        enc,
        dec,
        heads * 64,
        64,
        ffn_mult * heads * 64,
        vocab,
        max_pos,
    ),
    st.integers(1, 16),
    st.integers(1, 24),
    st.integers(0, 12),
    st.integers(1000, 50000),
    st.integers(1, 4),
    st.sampled_from([128, 256, 512]),
)


@settings(max_examples=50, deadline=None)
@given(valid_configs)
def test_reconstruction_parity_random(c):
    assert abs(count_params(reconstruct(c)) / count_params(c) - 1) <= 0.015


@settings(max_examples=50, deadline=None)
@given(valid_configs)
def test_reconstruction_keeps_weight_matrices(c):
    # only biases and layer norms grow with depth; weight matrices are conserved
    r = reconstruct(c)
    grown = count_params(r) - count_params(c)
    # per extra layer: output biases of each attention and the FFN, plus two scalars per norm width
    enc_extra = 2 * c.d_model + 2 * 2 * c.d_model
    dec_extra = 3 * c.d_model + 3 * 2 * c.d_model
    assert grown == (c.heads - 1) * (c.enc_layers * enc_extra + c.dec_layers * dec_extra)
