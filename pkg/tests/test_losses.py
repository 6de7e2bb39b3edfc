import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err, richardson_fd, small_teacher, std_gaussian
from gcslab.losses import (BASE_KINDS, LossContext, LossSpec, cc, cds, cg, compute_loss, cp, csd, gcs, isd,
                           isd_cfg, loss_value, parse_kind, sds, sds_cfg, term_values)
from gcslab.oracle import NULL, build_teacher
from gcslab.renderer import Decoder, SplatScene, View, identity_decoder, render
from gcslab.schedule import TimeSampler, TimestepTriple, add_noise
from gcslab.solver import (Denoiser, RecordingDenoiser, ReplayDenoiser, SolverConfig, ddim_step, f_pred,
                           g_solution, invert_ladder)

SHAPE = (3, 3, 2)
FD_KINDS = ("sds", "sds-cfg", "csd", "isd", "isd-cfg", "cds", "cc", "cg", "cp", "gcs", "cc+cg", "brighten")


def make_ctx(sched, rng, order=1, cfg_mode="one-step", shape=SHAPE, decoder=True):
    teacher = small_teacher(rng, shape=shape)
    dec = Decoder(rng.uniform(-1, 1, (3, shape[2])), 2, True) if decoder else None
    return LossContext(Denoiser(teacher, sched), SolverConfig(order=order, cfg_mode=cfg_mode), dec)


def random_triple(rng):
    return TimeSampler().sample(int(rng.integers(0, 3000)), int(rng.integers(10, 200)), rng)


def surrogate(ctx, spec, x, triple, y, eps):
    """Frozen-teacher loss: ε values replayed, target branch held at its base value."""
    rec = RecordingDenoiser(ctx.model.teacher, ctx.model.schedule)
    base = term_values(LossContext(rec, ctx.solver, ctx.decoder), spec, x, triple, y, eps)

    def f(z):
        rep = ReplayDenoiser(ctx.model.teacher, ctx.model.schedule, rec.record)
        tv = term_values(LossContext(rep, ctx.solver, ctx.decoder), spec, z, triple, y, eps)
        return sum(w * np.sum((a - base[n][2]) ** 2) for n, (w, a, _) in tv.items())
    return f


def fd_error(ctx, spec, x, triple, y, eps):
    res = compute_loss(ctx, spec, x, triple, y, eps)
    if spec.grad_mode == "exact-jacobian":
        f = lambda z: loss_value(ctx, spec, z, triple, y, eps)
    else:
        f = surrogate(ctx, spec, x, triple, y, eps)
    return rel_err(res.grad, richardson_fd(f, x, h=2e-4))


# -- gradient suite ----------------------------------------------------------------

@pytest.mark.parametrize("mode", ["stop-grad", "exact-jacobian"])
@pytest.mark.parametrize("kind", FD_KINDS)
def test_gradient_matches_finite_differences(sched, kind, mode):
    r = np.random.default_rng(zlib.crc32(f"{kind}|{mode}".encode()))
    worst = 0.0
    for i in range(20):
        ctx = make_ctx(sched, r, order=1 + i % 2, cfg_mode=("one-step", "per-step")[(i // 2) % 2])
        spec = LossSpec(kind, w=float(r.uniform(0, 10)), w_cc=float(r.uniform(0.5, 2)),
                        w_cg=float(r.uniform(0.5, 2)), w_cp=float(r.uniform(0.5, 2)),
                        weighting=("unit", "snr")[i % 2 if kind in ("sds", "csd", "cds") else 0],
                        grad_mode=mode, cg_cfg_weight=float(r.uniform(0, 8)))
        x, eps = r.standard_normal(SHAPE), r.standard_normal(SHAPE)
        y = "target" if i % 5 else NULL
        worst = max(worst, fd_error(ctx, spec, x, random_triple(r), y, eps))
    assert worst < 1e-4


def test_stop_grad_differs_from_exact(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    tr = TimestepTriple(500, 400, 320)
    a = compute_loss(ctx, LossSpec("gcs"), x, tr, "target", eps)
    b = compute_loss(ctx, LossSpec("gcs", grad_mode="exact-jacobian"), x, tr, "target", eps)
    assert a.value == b.value
    assert not np.allclose(a.grad, b.grad)


def test_sds_stop_grad_is_analytic(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    res = sds(ctx, x, 400, "target", eps)
    fp = f_pred(ctx.model, add_noise(x, 400, eps, sched), 400, "target")
    assert np.abs(res.grad - 2 * (x - fp)).max() < 1e-12


# -- identities --------------------------------------------------------------------

@pytest.mark.parametrize("weighting", ["unit", "snr"])
def test_sds_noise_identity(sched, rng, weighting):
    ctx = make_ctx(sched, rng)
    for t in (30, 300, 800):
        x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
        res = sds(ctx, x, t, "target", eps, LossSpec("sds", weighting=weighting))
        c = sched.coef(t)
        e_hat = ctx.model.eps(add_noise(x, t, eps, sched), t, "target")
        weight = 1.0 if weighting == "unit" else sched.snr(t)
        expect = weight * (c.sigma / c.alpha) ** 2 * np.sum((e_hat - eps) ** 2)
        assert abs(res.value - expect) <= 1e-10 * max(1.0, expect)


def test_sds_cfg_reductions(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert sds_cfg(ctx, x, 300, "target", eps, LossSpec(w=0.0)).value == sds(ctx, x, 300, "target", eps).value
    res = sds_cfg(ctx, x, 300, NULL, eps, LossSpec(w=9.0))
    assert res.diagnostics["classifier_sq"] == 0.0
    assert res.value == sds(ctx, x, 300, NULL, eps).value


def test_sds_cfg_diagnostic_split(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    res = sds_cfg(ctx, x, 450, "target", eps, LossSpec(w=7.5))
    a, b = res.terms["sds-cfg"]
    assert np.abs(res.vectors["generator"] + res.vectors["classifier"] - (a - b)).max() < 1e-12


def test_csd_zero_cases(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert csd(ctx, x, 300, NULL, eps).value == 0.0
    single = LossContext(Denoiser(std_gaussian(x.size), sched))
    assert csd(single, x.reshape(-1), 300, "target", eps.reshape(-1)).value == 0.0


def test_isd_degenerate(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert isd(ctx, x, 300, 300, NULL, eps, strict=False).value == 0.0
    with pytest.raises(ValueError):
        isd(ctx, x, 300, 300, NULL, eps)
    with pytest.raises(ValueError):
        isd_cfg(ctx, x, 200, 300, "target", eps)


def test_isd_shares_inversion_ladder(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    m = ctx.model
    x_s, x_t = invert_ladder(m, add_noise(x, 0, eps, sched), 0, 200, 350)
    res = isd_cfg(ctx, x, 350, 200, "target", eps, LossSpec(w=7.5))
    a, b = res.terms["isd-cfg"]
    assert np.array_equal(a, f_pred(m, x_s, 200, NULL))
    assert np.array_equal(b, f_pred(m, x_t, 350, "target", 7.5))


def test_cds_degenerate_and_checks(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert cds(ctx, x, 300, 300, "target", eps, strict=False).value == 0.0
    with pytest.raises(ValueError):
        cds(ctx, x, 300, 300, "target", eps)


def test_cds_decreases_towards_target_mode(sched):
    # 1-splat scene whose colour is slid from a wrong value to the target render
    r = np.random.default_rng(7)
    canvas = (6, 6, 2)
    base = dict(positions=np.array([[2.5, 2.5]]), log_scales=np.log([[1.5, 1.0]]), rotations=np.array([0.3]),
                opacity_logits=np.array([2.0]), depth_rank=np.array([0]), canvas=canvas)
    target = render(SplatScene(colors=np.array([[0.8, -0.6]]), **base), View(0.0, 0))
    decoy = render(SplatScene(colors=np.array([[-0.7, 0.5]]), **base), View(0.0, 0))
    ctx = LossContext(Denoiser(build_teacher([target], [decoy], 0.05 ** 2), sched))
    start = np.array([[-0.2, 0.9]])
    epsilons = [r.standard_normal(canvas) for _ in range(16)]
    vals = []
    for a in np.linspace(0, 1, 6):
        x = render(SplatScene(colors=(1 - a) * start + a * np.array([[0.8, -0.6]]), **base), View(0.0, 0))
        vals.append(np.mean([cds(ctx, x, 300, 200, "target", e, LossSpec(w=7.5)).value for e in epsilons]))
    assert all(b < a for a, b in zip(vals, vals[1:])), vals


def test_cc_degenerate(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    for mode in ("one-step", "per-step"):
        c2 = LossContext(ctx.model, SolverConfig(cfg_mode=mode), ctx.decoder)
        assert cc(c2, x, (300, 300, 120), "target", eps, strict=False).value == 0.0
    with pytest.raises(ValueError):
        cc(ctx, x, (300, 300, 120), "target", eps)


def test_cc_branches(sched, rng):
    ctx = make_ctx(sched, rng)
    m = ctx.model
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    res = cc(ctx, x, (500, 400, 330), "target", eps, LossSpec(w=7.5))
    _, x_t = invert_ladder(m, add_noise(x, 330, eps, sched), 330, 400, 500)
    x_bar = ddim_step(m, x_t, 500, 400, "target", 7.5)
    a, b = res.terms["cc"]
    assert np.array_equal(a, g_solution(m, x_t, 500, 330, NULL))
    assert np.array_equal(b, g_solution(m, x_bar, 400, 330, NULL))


def test_cg_degenerate_and_e0_form(sched, rng):
    ctx = make_ctx(sched, rng)
    m = ctx.model
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert cg(ctx, x, (250, 250, 250), NULL, eps, strict=False).value == 0.0
    with pytest.raises(ValueError):
        cg(ctx, x, (250, 250, 250), NULL, eps)
    spec = LossSpec(cg_cfg_weight=3.0)
    res = cg(ctx, x, (400, 200, 0), "target", eps, spec)
    x0 = add_noise(x, 0, eps, sched)
    _, x_t = invert_ladder(m, x0, 0, 200, 400)
    expect = np.sum((f_pred(m, x0, 0, NULL) - f_pred(m, g_solution(m, x_t, 400, 0, "target", 1, 3.0), 0, "target")) ** 2)
    assert res.value == pytest.approx(expect, rel=1e-12)
    z = rng.standard_normal(SHAPE)
    assert np.abs(f_pred(m, z, 0, "target") - z).max() < 1e-5


def test_cp_identity_decoder_equals_cg(sched, rng):
    ctx = make_ctx(sched, rng)
    ident = LossContext(ctx.model, ctx.solver, identity_decoder(SHAPE[2]))
    for _ in range(5):
        x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
        tr = random_triple(rng)
        assert cp(ident, x, tr, "target", eps).value == cg(ident, x, tr, "target", eps).value


def test_cp_vanishes_with_cg(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert cg(ctx, x, (250, 250, 250), NULL, eps, strict=False).value == 0.0
    assert cp(ctx, x, (250, 250, 250), NULL, eps, strict=False).value == 0.0


def test_cp_needs_decoder(sched, rng):
    ctx = make_ctx(sched, rng, decoder=False)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    with pytest.raises(ValueError):
        cp(ctx, x, (300, 200, 120), "target", eps)


# -- GCS bookkeeping ------------------------------------------------------------------

def test_gcs_zero_when_terms_vanish(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert gcs(ctx, x, (250, 250, 250), NULL, eps, strict=False).value == 0.0


def test_gcs_weights_project_to_cc(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    tr = TimestepTriple(420, 320, 250)
    a = gcs(ctx, x, tr, "target", eps, LossSpec(w_cc=1, w_cg=0, w_cp=0))
    b = cc(ctx, x, tr, "target", eps)
    assert a.value == b.value
    assert np.abs(a.grad - b.grad).max() < 1e-12


@pytest.mark.parametrize("mode", ["stop-grad", "exact-jacobian"])
def test_gcs_diagnostics_sum(sched, rng, mode):
    ctx = make_ctx(sched, rng)
    spec = LossSpec(w_cc=0.7, w_cg=1.3, w_cp=2.1, grad_mode=mode)
    for _ in range(10):
        x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
        res = gcs(ctx, x, random_triple(rng), "target", eps, spec)
        d = res.diagnostics
        total = 0.7 * d["cc"] + 1.3 * d["cg"] + 2.1 * d["cp"]
        assert abs(total - res.value) <= 1e-12 * max(1.0, res.value)


def test_gcs_grad_is_weighted_sum(sched, rng):
    ctx = make_ctx(sched, rng)
    x, eps = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    tr = TimestepTriple(480, 380, 300)
    total = gcs(ctx, x, tr, "target", eps, LossSpec(w_cc=0.5, w_cg=2.0, w_cp=3.0))
    parts = [f(ctx, x, tr, "target", eps).grad * w for f, w in ((cc, 0.5), (cg, 2.0), (cp, 3.0))]
    assert np.abs(total.grad - sum(parts)).max() < 1e-12


# -- LossSpec validation and fuzz -----------------------------------------------------------

def test_parse_kind():
    assert parse_kind("gcs") == ("cc", "cg", "cp")
    assert parse_kind("cc+cg") == ("cc", "cg")
    assert parse_kind("cc+cc") is None
    assert parse_kind("sds") is None


@pytest.mark.parametrize("bad", [dict(kind="vsd"), dict(w=-1.0), dict(w_cp=-0.1), dict(weighting="cosine"),
                                 dict(grad_mode="sometimes"), dict(kind="cc+sds")])
def test_loss_spec_validation(bad):
    with pytest.raises(ValueError):
        LossSpec(**bad)


def test_pinned_noise_flag():
    assert LossSpec("gcs").uses_pinned_noise and LossSpec("isd").uses_pinned_noise
    assert not LossSpec("sds").uses_pinned_noise and not LossSpec("cds").uses_pinned_noise


def test_noise_shape_checked(sched, rng):
    ctx = make_ctx(sched, rng)
    with pytest.raises(ValueError):
        compute_loss(ctx, LossSpec("sds"), np.zeros(SHAPE), TimestepTriple(300, 200, 100), "target", np.zeros((3, 3, 1)))


def test_fuzz_nonnegative_and_finite(sched):
    r = np.random.default_rng(99)
    ctxs = [make_ctx(sched, r, order=o, cfg_mode=m) for o in (1, 2) for m in ("one-step", "per-step")]
    kinds = [k for k in BASE_KINDS] + ["cc+cg", "cg+cp"]
    for i in range(1000):
        ctx = ctxs[i % len(ctxs)]
        spec = LossSpec(kinds[i % len(kinds)], w=float(r.uniform(0, 100)),
                        grad_mode=("stop-grad", "exact-jacobian")[(i // 7) % 2],
                        weighting=("unit", "snr")[(i // 3) % 2])
        x = r.standard_normal(SHAPE) * float(r.uniform(0.1, 5))
        res = compute_loss(ctx, spec, x, random_triple(r), ("target", NULL)[i % 4 == 0], r.standard_normal(SHAPE))
        assert res.value >= 0 and np.isfinite(res.value)
        assert np.all(np.isfinite(res.grad))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), kind=st.sampled_from(FD_KINDS))
def test_loss_is_deterministic(sched, seed, kind):
    r = np.random.default_rng(seed)
    ctx = make_ctx(sched, r)
    x, eps = r.standard_normal(SHAPE), r.standard_normal(SHAPE)
    tr = random_triple(r)
    a = compute_loss(ctx, LossSpec(kind), x, tr, "target", eps)
    b = compute_loss(ctx, LossSpec(kind), x, tr, "target", eps)
    assert a.value == b.value and a.grad.tobytes() == b.grad.tobytes()
