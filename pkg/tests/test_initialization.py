import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import truncnorm

from headfold.initialization import (
    AdminProfile,
    ConfigError,
    InitSpec,
    ProfilingError,
    admin_omegas,
    admin_profile,
    apply_admin,
    truncated_normal_init,
    xavier_init,
)
from headfold.model import Trace, build, encoder_forward, forward_logits, parse_shorthand
from headfold.rng import RngStream
from headfold.tasks import ToyTask


def desk(text="2H-2L"):
    return parse_shorthand(text, "desk")


def copy_batches(layout="encoder-only"):
    task = ToyTask("copy", vocab=32, seq_len=6, layout=layout)
    return lambda rng: task(rng, 8)


# -- weight draws -----------------------------------------------------------------
def test_xavier_bound_and_variance():
    w = xavier_init((64, 192), RngStream(0)).data
    bound = math.sqrt(6 / (64 + 192))
    assert np.abs(w).max() <= bound
    assert w.std() == pytest.approx(bound / math.sqrt(3), rel=0.02)


def test_xavier_custom_fans():
    w = xavier_init((4, 4), RngStream(0), fans=(100, 200)).data
    assert np.abs(w).max() <= math.sqrt(6 / 300)
    with pytest.raises(ConfigError):
        xavier_init((4,), RngStream(0))


def test_truncated_normal_statistics():
    w = truncated_normal_init((1000, 1000), 0.02, RngStream(3)).data
    assert np.abs(w).max() <= 0.04
    expected = truncnorm(-2, 2, scale=0.02).std()  # 0.02 * 0.879626
    assert expected == pytest.approx(0.02 * 0.879626, rel=1e-6)
    assert 0.0175 <= w.std() <= 0.0185
    assert w.std() == pytest.approx(expected, rel=5e-3)


def test_init_spec_parsing():
    assert InitSpec.parse("vanilla") == InitSpec("xavier")
    assert InitSpec.parse("admin").weight_scheme == "xavier"
    a = InitSpec.parse("admin:truncated-normal")
    assert a.is_admin and a.uses_scale and a.weight_scheme == "truncated-normal"
    for bad in ("lecun", "xavier:admin", "admin:admin"):
        with pytest.raises(ConfigError):
            InitSpec.parse(bad)
    with pytest.raises(ConfigError):
        InitSpec("truncated-normal", scale=0.0)
    with pytest.raises(ConfigError):
        InitSpec("admin", profile_batches=0)


def test_reference_config_sets_xavier_fans():
    shallow = desk("4H-1L")
    deep = parse_shorthand("1H-4L", "desk", d_ffn=shallow.d_ffn // 4)
    w = build(deep, InitSpec(reference=shallow), rng=0).encoder[0].params.w_query.data
    assert np.abs(w).max() <= math.sqrt(6 / (64 + 64))
    wide = build(deep, InitSpec(), rng=0).encoder[0].params.w_query.data
    assert np.abs(wide).max() > math.sqrt(6 / 128)


# -- residual scales --------------------------------------------------------------
def test_omegas_unit_variances():
    w = admin_omegas([1.0, 1.0, 1.0, 1.0])
    assert w[:2] == [1.0, 1.0]
    assert w[2] == pytest.approx(math.sqrt(2))
    assert w[3] == pytest.approx(math.sqrt(3))


def test_omegas_are_floored_at_one():
    assert admin_omegas([0.0, 0.0, 0.0]) == [1.0, 1.0, 1.0]
    assert admin_omegas([0.3, 0.3, 0.3]) == [1.0, 1.0, 1.0]


def test_omegas_restart_per_stack():
    w = admin_omegas([4.0, 4.0, 4.0, 4.0], stack_starts=[0, 2])
    assert w == [1.0, 2.0, 1.0, 2.0]


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30))
def test_omegas_monotone_and_at_least_one(variances):
    w = admin_omegas(variances)
    assert all(x >= 1.0 for x in w)
    assert all(b >= a for a, b in zip(w, w[1:]))
    assert w[-1] == pytest.approx(math.sqrt(max(1.0, sum(variances[:-1]))))


def test_unit_omegas_are_bit_identical_to_vanilla():
    model = build(desk("2H-2L-2L"), rng=4)
    ones = AdminProfile([0.0] * 10, [1.0] * 10, [0, 4])
    scaled = apply_admin(model, ones)
    batch = copy_batches("encoder-decoder")(RngStream(1))
    a = forward_logits(model, batch, grad=False).data
    b = forward_logits(scaled, batch, grad=False).data
    assert a.tobytes() == b.tobytes()


def test_apply_admin_shares_parameters():
    model = build(desk("2H-2L"), rng=0)
    prof = AdminProfile([1.0] * 4, [1.0, 1.5, 2.0, 2.5])
    scaled = apply_admin(model, prof)
    assert scaled.n_params() == model.n_params()
    assert list(scaled.parameters()) == list(model.parameters())
    assert all(a is b for a, b in zip(scaled.parameters().values(), model.parameters().values()))
    assert scaled.omegas() == [1.0, 1.5, 2.0, 2.5]
    assert model.omegas() == [1.0] * 4


def test_apply_admin_validates_profile():
    model = build(desk("1H-1L"), rng=0)
    with pytest.raises(ConfigError):
        apply_admin(model, AdminProfile([1.0], [1.0]))
    with pytest.raises(ConfigError):
        apply_admin(model, AdminProfile([1.0, 1.0], [1.0, 0.0]))


def test_scaled_residual_matches_hand_computation():
    # one FFN sub-layer with omega = 2: LN(2h + f(h)) by hand
    c = parse_shorthand("1H-1L", "desk", d_model=4, d_head=4, d_ffn=4, vocab=6, max_pos=3)
    model = build(c, rng=2)
    scaled = apply_admin(model, AdminProfile([0.0, 0.0], [1.0, 2.0]))
    tokens = np.array([4, 5])
    trace = Trace(keep_branches=True)
    out = encoder_forward(scaled, tokens, trace).data
    h = encoder_forward(replace(model, encoder=model.encoder[:1]), tokens).data
    z = 2 * h + trace.branches[1]
    want = (z - z.mean(-1, keepdims=True)) / np.sqrt(z.var(-1, keepdims=True) + 1e-5)
    assert np.max(np.abs(out - want)) <= 1e-12
    assert np.max(np.abs(out - encoder_forward(model, tokens).data)) > 1e-6


def test_profile_is_deterministic_and_sized():
    model = build(desk("2H-2L"), rng=0)
    a = admin_profile(model, copy_batches(), RngStream(5), 2)
    b = admin_profile(model, copy_batches(), RngStream(5), 2)
    assert a.to_dict() == b.to_dict()
    assert len(a.variances) == len(a.omegas) == 4
    assert (a.batch_size, a.seq_len) == (8, 12)
    assert a.omegas == admin_omegas(a.variances, a.stack_starts)


def test_profile_variances_match_branch_outputs():
    model = build(desk("1H-2L"), rng=0)
    prof = admin_profile(model, copy_batches(), RngStream(5), 1)
    trace = Trace(keep_branches=True)
    forward_logits(model, copy_batches()(RngStream(5)), trace, grad=False)
    for i, v in enumerate(prof.variances):
        assert v == pytest.approx(trace.branches[i].var(), rel=1e-10)


def test_profile_requires_unscaled_model():
    model = apply_admin(build(desk("1H-1L"), rng=0), AdminProfile([0, 0], [1.0, 2.0]))
    with pytest.raises(ConfigError):
        admin_profile(model, copy_batches(), RngStream(0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_profile_reports_failing_sublayer():
    model = build(desk("1H-2L"), rng=0)
    model.encoder[3].params.w_in.data[0, 0] = np.inf
    with pytest.raises(ProfilingError, match="sub-layer 3"):
        admin_profile(model, copy_batches(), RngStream(0))
