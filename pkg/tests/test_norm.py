import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metanorm.norm import (KINDS, AffineParams, BlendParams, MomentPair, NormLayer, NormScheme, RunningMoments,
                           alpha_curve, apply_normalization, batch_moments, blend_moments, brn_correction,
                           compute_alpha, group_moments, instance_moments, layer_moments, reptile_alpha,
                           update_running_moments)
from metanorm.tensor import Tape, Tensor, backward, default_dtype


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def affine(C, gamma=1.0, beta=0.0, eps=1e-5):
    return AffineParams(T(np.full(C, gamma)), T(np.full(C, beta)), eps)


def pair(mean, var, kind="per_channel"):
    return MomentPair(T(mean), T(var), kind)


def layer_params(layer, rng=None):
    out = {}
    for name, (shape, value) in layer.parameter_specs().items():
        v = np.full(shape, value, dtype=np.float64)
        if rng is not None:
            v = v + rng.normal(0, 0.1, shape)
        out[name] = T(v)
    return out


def make_layer(kind, C=4, **kw):
    with default_dtype(np.float64):
        return NormLayer(NormScheme(kind, **kw), C, "n")


# moments ---------------------------------------------------------------------------

def test_batch_moments_known():
    a = np.array([1.0, 3.0, 5.0, 7.0]).reshape(2, 1, 1, 2)
    m = batch_moments(T(a))
    assert m.mean.data.tolist() == [4.0] and m.variance.data.tolist() == [5.0]


def test_batch_moments_degenerate_batch(rng):
    m = batch_moments(T(rng.normal(size=(1, 3, 1, 1))))
    np.testing.assert_array_equal(m.variance.data, 0.0)


def test_batch_moments_channel_permutation(rng):
    a = rng.normal(size=(3, 2, 2, 2))
    m, mp = batch_moments(T(a)), batch_moments(T(a[:, ::-1]))
    np.testing.assert_array_equal(mp.mean.data, m.mean.data[::-1])
    np.testing.assert_array_equal(mp.variance.data, m.variance.data[::-1])


def test_layer_moments_constant_and_shift(rng):
    m = layer_moments(T(np.full((1, 2, 2, 2), 3.0)))
    assert m.mean.data.tolist() == [3.0] and m.variance.data.tolist() == [0.0]
    a = rng.normal(size=(1, 2, 3, 3))
    m = layer_moments(T(np.concatenate([a, a + 1.0])))
    assert abs(m.mean.data[1] - m.mean.data[0] - 1.0) < 1e-12
    assert abs(m.variance.data[1] - m.variance.data[0]) < 1e-12


def loop_moments(a, keep):
    """Scalar-loop moments keeping the dims in ``keep``."""
    idx = np.ndindex(*[a.shape[d] for d in keep])
    means, vars_ = {}, {}
    for key in idx:
        vals = [a[i] for i in np.ndindex(*a.shape) if all(i[d] == k for d, k in zip(keep, key))]
        mu = sum(vals) / len(vals)
        means[key] = mu
        vars_[key] = sum((v - mu) ** 2 for v in vals) / len(vals)
    shape = tuple(a.shape[d] for d in keep)
    return np.array([means[k] for k in np.ndindex(*shape)]).reshape(shape), np.array([vars_[k] for k in np.ndindex(*shape)]).reshape(shape)


def test_layer_moments_loop_oracle(rng):
    a = rng.normal(size=(2, 2, 2, 2))
    mu, var = loop_moments(a, (0,))
    m = layer_moments(T(a))
    np.testing.assert_allclose(m.mean.data, mu, atol=1e-12)
    np.testing.assert_allclose(m.variance.data, var, atol=1e-12)


def test_instance_moments_cases(rng):
    a = rng.normal(size=(2, 3, 1, 1))
    m = instance_moments(T(a))
    np.testing.assert_array_equal(m.variance.data, 0.0)
    np.testing.assert_array_equal(m.mean.data, a[:, :, 0, 0])
    const = np.broadcast_to(rng.normal(size=(2, 3, 1, 1)), (2, 3, 4, 4))
    np.testing.assert_allclose(instance_moments(T(const)).variance.data, 0.0, atol=1e-15)
    a = rng.normal(size=(2, 3, 2, 3))
    mu, var = loop_moments(a, (0, 1))
    np.testing.assert_allclose(instance_moments(T(a)).mean.data, mu, atol=1e-12)
    np.testing.assert_allclose(instance_moments(T(a)).variance.data, var, atol=1e-12)


def test_group_moments_limits_and_oracle(rng):
    a = rng.normal(size=(3, 4, 2, 2))
    g1 = group_moments(T(a), 1)
    np.testing.assert_allclose(g1.mean.data.reshape(-1), layer_moments(T(a)).mean.data, atol=1e-12)
    gc = group_moments(T(a), 4)
    np.testing.assert_allclose(gc.variance.data, instance_moments(T(a)).variance.data, atol=1e-12)
    g2 = group_moments(T(a), 2)
    for b in range(3):
        for g in range(2):
            vals = a[b, 2 * g : 2 * g + 2].ravel()
            assert abs(g2.mean.data[b, g] - vals.mean()) < 1e-12
            assert abs(g2.variance.data[b, g] - ((vals - vals.mean()) ** 2).mean()) < 1e-12


def test_group_count_must_divide():
    with pytest.raises(ValueError):
        group_moments(T(np.ones((1, 6, 2, 2))), 4)


# apply_normalization -----------------------------------------------------------------

def test_normalization_identity(rng):
    a = rng.normal(size=(4, 3, 2, 2))
    a = (a - a.mean(axis=(0, 2, 3), keepdims=True)) / a.std(axis=(0, 2, 3), keepdims=True)
    out = apply_normalization(T(a), batch_moments(T(a)), affine(3, eps=0.0))
    np.testing.assert_allclose(out.data, a, atol=1e-12)


def test_gamma_zero_gives_beta(rng):
    a = T(rng.normal(size=(2, 3, 2, 2)))
    out = apply_normalization(a, batch_moments(a), affine(3, gamma=0.0, beta=0.7))
    np.testing.assert_array_equal(out.data, 0.7)


def test_normalization_loop_oracle(rng):
    a = rng.normal(size=(2, 3, 2, 2))
    g, bta = rng.normal(size=3), rng.normal(size=3)
    mu, var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    out = apply_normalization(T(a), pair(mu, var), AffineParams(T(g), T(bta), 1e-5)).data
    for i in np.ndindex(*a.shape):
        c = i[1]
        assert abs(out[i] - (g[c] * (a[i] - mu[c]) / np.sqrt(var[c] + 1e-5) + bta[c])) < 1e-6


def test_incompatible_moments():
    with pytest.raises(ValueError):
        apply_normalization(T(np.ones((2, 3, 2, 2))), pair(np.zeros(4), np.ones(4)), affine(3))


@pytest.mark.parametrize("kind", ["TBN", "LN", "IN", "GN"])
def test_scheme_identity_on_standardized_input(rng, kind):
    a = rng.normal(size=(3, 4, 3, 3))
    axes = {"TBN": (0, 2, 3), "LN": (1, 2, 3), "IN": (2, 3)}.get(kind)
    if kind == "GN":
        g = a.reshape(3, 4, -1)
        a = ((g - g.mean(axis=2, keepdims=True)) / g.std(axis=2, keepdims=True)).reshape(a.shape)
        a = a.reshape(3, 4, 3, 3)
        layer = make_layer("GN", group_count=4, epsilon=0.0)
    else:
        a = (a - a.mean(axis=axes, keepdims=True)) / a.std(axis=axes, keepdims=True)
        layer = make_layer(kind, epsilon=0.0)
    np.testing.assert_allclose(layer.forward(T(a), layer_params(layer)).data, a, atol=1e-6)


# alpha ------------------------------------------------------------------------------

def blend(scale, offset, mode="functional_shared"):
    return BlendParams(mode, T(np.atleast_1d(scale)), T(np.atleast_1d(offset)))


def test_alpha_values():
    assert compute_alpha(blend(0.0, 0.0), 17).data.tolist() == [0.5]
    assert abs(compute_alpha(blend(1.0, 0.0), 14).data[0] - 1.0) < 1e-6
    assert compute_alpha(blend(0.1, -0.5), 5).data.tolist() == [0.5]
    assert compute_alpha(blend(5.0, 0.0, "independent_shared"), 100).data.tolist() == [0.5]


def test_reptile_alpha():
    assert reptile_alpha(1) == 0.5 and reptile_alpha(4) == 0.8
    vals = [reptile_alpha(n) for n in range(1, 200)]
    assert all(b > a for a, b in zip(vals, vals[1:])) and vals[-1] < 1.0
    with pytest.raises(ValueError):
        reptile_alpha(0)


@settings(max_examples=80, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(1, 500), st.integers(1, 500))
def test_alpha_bounds_and_monotone(scale, offset, n1, n2):
    a1 = compute_alpha(blend(scale, offset), n1).data[0]
    a2 = compute_alpha(blend(scale, offset), n2).data[0]
    assert 0.0 <= a1 <= 1.0
    if scale > 0 and n2 >= n1:
        assert a2 >= a1


def test_alpha_curve_matches_compute_alpha(rng):
    s, o = rng.normal(size=3), rng.normal(size=3)
    curve = alpha_curve("functional_per_channel", s, o, [1, 5, 9])
    for row, n in zip(curve, [1, 5, 9]):
        np.testing.assert_allclose(row, compute_alpha(blend(s, o, "functional_per_channel"), n).data, rtol=1e-12)


# blend_moments -----------------------------------------------------------------------

def test_blend_extremes(rng):
    a = T(rng.normal(size=(3, 2, 2, 2)))
    p, s = batch_moments(a), instance_moments(a)
    one = blend_moments(p, s, T([1.0]))
    np.testing.assert_allclose(one.mean.data, np.broadcast_to(p.mean.data, (3, 2)))
    np.testing.assert_allclose(one.variance.data, np.broadcast_to(p.variance.data, (3, 2)))
    zero = blend_moments(p, s, T([0.0]))
    np.testing.assert_allclose(zero.mean.data, s.mean.data)
    np.testing.assert_allclose(zero.variance.data, s.variance.data)


def test_blend_half_mixture():
    m = blend_moments(pair([0.0], [1.0]), pair([[2.0]], [[1.0]], "per_instance_channel"), T([0.5]))
    assert m.mean.data.item() == 1.0 and m.variance.data.item() == 2.0
    # equal-weight mixture of N(0,1) and N(2,1): variance = 1 + 1 = 2
    rng = np.random.default_rng(3)
    samples = np.concatenate([rng.normal(0, 1, 200_000), rng.normal(2, 1, 200_000)])
    assert abs(samples.var() - 2.0) < 0.02


def test_blend_rejects_bad_alpha():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        blend_moments(pair([0.0], [1.0]), pair([0.0], [1.0]), T([1.5]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_pooled_variance_is_concatenation(n1, n2, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(1, 2, n1), rng.normal(-1, 0.5, n2)
    both = np.concatenate([x1, x2])
    m = blend_moments(pair([x1.mean()], [x1.var()]), pair([x2.mean()], [x2.var()]), T([n1 / (n1 + n2)]))
    assert abs(m.mean.data[0] - both.mean()) < 1e-9
    assert abs(m.variance.data[0] - both.var()) < 1e-9


# running moments and BRN ----------------------------------------------------------------

def test_running_update_cases():
    r = RunningMoments.fresh(2, momentum=1.0, dtype=np.float64)
    m = pair([3.0, -1.0], [2.0, 0.5])
    r1 = update_running_moments(r, m)
    np.testing.assert_array_equal(r1.mean, [3.0, -1.0])
    np.testing.assert_array_equal(r1.variance, [2.0, 0.5])
    r = RunningMoments.fresh(1, momentum=0.1, dtype=np.float64)
    for _ in range(300):
        r = update_running_moments(r, pair([3.0], [2.0]))
    assert abs(r.mean[0] - 3.0) < 1e-9 and abs(r.variance[0] - 2.0) < 1e-9


def test_running_update_two_step_unroll():
    r = RunningMoments.fresh(1, momentum=0.1, dtype=np.float64)
    r = update_running_moments(r, pair([2.0], [4.0]))
    r = update_running_moments(r, pair([-1.0], [0.5]))
    assert abs(r.mean[0] - (0.9 * (0.9 * 0.0 + 0.1 * 2.0) + 0.1 * -1.0)) < 1e-15
    assert abs(r.variance[0] - (0.9 * (0.9 * 1.0 + 0.1 * 4.0) + 0.1 * 0.5)) < 1e-15
    assert r.update_count == 2


def test_running_update_forbidden_at_meta_test():
    with pytest.raises(RuntimeError):
        update_running_moments(RunningMoments.fresh(1), pair([0.0], [1.0]), "meta_test")


def test_brn_matched_and_clipped():
    r = RunningMoments(np.array([0.5]), np.array([2.0]), 0.1, 0)
    rf, d = brn_correction(pair([0.5], [2.0]), r, 3.0, 5.0)
    assert abs(rf.data[0] - 1.0) < 1e-12 and abs(d.data[0]) < 1e-12
    rf, _ = brn_correction(pair([0.0], [100.0 * (1.0 + 1e-5) - 1e-5]), RunningMoments(np.zeros(1), np.ones(1), 0.1, 0), 3.0, 5.0)
    assert rf.data[0] == 3.0


def test_brn_reduces_to_cbn_normalization(rng):
    a = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    bl = make_layer("BRN", C=2)
    m = batch_moments(T(a))
    bl.running = RunningMoments(m.mean.data.copy(), m.variance.data.copy(), 0.1, 0)
    bl.track_running = False
    out = bl.forward(T(a), layer_params(bl)).data
    np.testing.assert_allclose(out, apply_normalization(T(a), m, affine(2)).data, atol=1e-12)


def test_brn_running_moments_get_no_gradient(rng):
    """The loss reacts to running moments only through forward values of r and d."""
    a = rng.normal(size=(4, 2, 3, 3))
    weights = rng.normal(size=a.shape)
    layer = make_layer("BRN", C=2)
    layer.track_running = False
    mean_r = T(np.array([0.3, -0.2]))
    mean_r.requires_grad = True
    var_r = T(np.array([1.5, 0.7]))
    var_r.requires_grad = True
    m = batch_moments(T(a))
    with Tape():
        rf, d = brn_correction(m, RunningMoments(mean_r.data, var_r.data, 0.1, 0), 3.0, 5.0)
        loss = ((rf * mean_r).sum() + (d * var_r).sum())
    backward(loss)
    # with r and d blocked, d(loss)/d(mean_r) = r and d(loss)/d(var_r) = d exactly
    np.testing.assert_array_equal(mean_r.grad, rf.data)
    np.testing.assert_array_equal(var_r.grad, d.data)

    def loss_at(mu):
        layer.running = RunningMoments(mu, np.array([1.5, 0.7]), 0.1, 0)
        return float((layer.forward(T(a), layer_params(layer)).data * weights).sum())

    base = np.array([0.3, -0.2])
    h = 1e-4
    fd = (loss_at(base + [h, 0]) - loss_at(base - [h, 0])) / (2 * h)
    # the forward effect of d on the output is weight * gamma * (-1/sigma_r) per element
    sigma_r = np.sqrt(1.5 + 1e-5)
    assert abs(fd - (-weights[:, 0].sum() / sigma_r)) < 1e-6


# layer behaviour -----------------------------------------------------------------------

def context_then_target(layer, ctx, tgt, params):
    layer.reset_episode()
    layer.pass_kind = "context"
    layer.forward(T(ctx), params)
    layer.pass_kind = "target"
    return layer.forward(T(tgt), params).data


def test_target_pass_without_context_errors(rng):
    layer = make_layer("MetaBN")
    layer.pass_kind = "target"
    with pytest.raises(RuntimeError, match="context pass required first"):
        layer.forward(T(rng.normal(size=(2, 4, 2, 2))), layer_params(layer))


@pytest.mark.parametrize("kind", ["MetaBN", "TaskNormI", "TaskNormL", "RN"])
def test_target_output_ignores_other_targets(rng, kind):
    layer = make_layer(kind)
    params = layer_params(layer, rng)
    ctx, tgt = rng.normal(size=(5, 4, 3, 3)), rng.normal(size=(6, 4, 3, 3))
    full = context_then_target(layer, ctx, tgt, params)
    perm = rng.permutation(6)
    permuted = context_then_target(layer, ctx, tgt[perm], params)
    np.testing.assert_array_equal(permuted, full[perm])
    single = context_then_target(layer, ctx, tgt[2:3], params)
    np.testing.assert_array_equal(single, full[2:3])


def test_tbn_target_depends_on_batch(rng):
    layer = make_layer("TBN")
    params = layer_params(layer)
    tgt = rng.normal(size=(4, 4, 3, 3))
    a = layer.forward(T(tgt), params).data[0]
    b = layer.forward(T(np.concatenate([tgt[:1], tgt[1:] + 1.0])), params).data[0]
    assert np.any(a != b)


def test_rn_is_tasknorm_i_with_reptile_alpha(rng):
    ctx, tgt = rng.normal(size=(5, 4, 3, 3)), rng.normal(size=(7, 4, 3, 3))
    for blend_context in (False, True):
        rn = make_layer("RN", context_blend=blend_context)
        tn = make_layer("TaskNormI", context_blend=blend_context)
        tn.alpha_override = reptile_alpha
        p = layer_params(tn, rng)
        for pass_kind in ("context", "target"):
            for layer in (rn, tn):
                layer.reset_episode()
            rn.pass_kind = tn.pass_kind = "context"
            out_rn, out_tn = rn.forward(T(ctx), p), tn.forward(T(ctx), p)
            if pass_kind == "target":
                rn.pass_kind = tn.pass_kind = "target"
                out_rn, out_tn = rn.forward(T(tgt), p), tn.forward(T(tgt), p)
            assert out_rn.data.tobytes() == out_tn.data.tobytes()


@pytest.mark.parametrize("mode", ["functional_shared", "functional_per_channel", "independent_shared", "independent_per_channel"])
def test_blend_parameter_shapes(mode):
    specs = make_layer("TaskNormI", blend_mode=mode).parameter_specs()
    assert specs["n.scale"][0] == ((4,) if mode.endswith("per_channel") else (1,))


def test_unknown_kind():
    with pytest.raises(ValueError):
        NormScheme("WN")


def test_every_kind_runs_a_meta_test_episode(rng):
    for kind in KINDS:
        layer = make_layer(kind)
        layer.phase = "meta_test"
        out = context_then_target(layer, rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(2, 4, 2, 2)), layer_params(layer))
        assert out.shape == (2, 4, 2, 2) and np.all(np.isfinite(out))


def test_cbn_running_moments_diverge_from_task_moments():
    """Two tasks with disparate statistics: running moments fit neither."""
    layer = make_layer("CBN", C=1)
    params = layer_params(layer)
    rng = np.random.default_rng(1)
    tasks = [rng.normal(-3.0, 0.5, size=(8, 1, 2, 2)), rng.normal(4.0, 2.0, size=(8, 1, 2, 2))]
    for step in range(200):
        layer.forward(T(tasks[step % 2]), params)
    layer.phase = "meta_test"
    for x in tasks:
        test_out = layer.forward(T(x), params).data
        task_out = apply_normalization(T(x), batch_moments(T(x)), affine(1)).data
        assert np.max(np.abs(test_out - task_out)) > 1e-5
        assert np.max(np.abs(test_out - task_out)) > 0.5


def test_tasknorm_r_updates_from_context_only(rng):
    layer = make_layer("TaskNormR")
    params = layer_params(layer)
    context_then_target(layer, rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(5, 4, 2, 2)), params)
    assert layer.running.update_count == 1


@pytest.mark.parametrize("from_target,expected", [(True, 2), (False, 1)])
def test_cbn_target_update_switch(rng, from_target, expected):
    layer = make_layer("CBN", cbn_update_from_target=from_target)
    context_then_target(layer, rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(5, 4, 2, 2)), layer_params(layer))
    assert layer.running.update_count == expected
