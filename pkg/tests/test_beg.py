import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcslab.beg import BegConfig, beg_apply, beg_check, brightness, percentile
from gcslab.renderer import Decoder, SplatScene, View, make_views, render
from gcslab.trainer import random_scene


def flat(value, shape=(4, 4)):
    return np.full((*shape, 3), value, dtype=np.float64)


def one_splat(color):
    color = np.asarray(color, dtype=np.float64)
    return SplatScene(np.array([[3.0, 3.0]]), np.zeros((1, 2)), np.zeros(1), color[None], np.zeros(1),
                      np.array([0]), (8, 8, color.size))


# -- brightness and percentile ----------------------------------------------------

def test_brightness_is_channel_mean():
    img = np.array([[[0.0, 0.3, 0.6], [1.0, 1.0, 1.0]]])
    assert np.allclose(brightness(img), [[0.3, 1.0]], atol=1e-15)
    with pytest.raises(ValueError):
        brightness(np.zeros((2, 2, 4)))


def test_percentile_examples():
    assert percentile(np.full(50, 0.7), 85) == 0.7
    vals = np.round(np.arange(1, 11) / 10.0, 10)
    assert percentile(vals, 85) == 0.9
    assert percentile(vals, 100) == 1.0
    assert percentile(vals, 10) == 0.1
    assert percentile([3.0], 1) == 3.0
    with pytest.raises(ValueError):
        percentile([], 85)
    with pytest.raises(ValueError):
        percentile([1.0], 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), m=st.floats(1, 100))
def test_percentile_is_permutation_invariant(seed, m):
    r = np.random.default_rng(seed)
    v = r.random(37)
    assert percentile(v, m) == percentile(r.permutation(v), m)
    assert percentile(v, m) in v


# -- check --------------------------------------------------------------------------

@pytest.mark.parametrize("level,fires", [(0.95, True), (0.85, False), (0.9, False)])
def test_check_threshold_is_strict(level, fires):
    rep = beg_check([flat(0.1), flat(level)])
    assert rep.triggered is fires
    assert rep.max == pytest.approx(level, abs=1e-15)
    assert len(rep.percentiles) == 2


def test_check_rejects_empty_batch():
    with pytest.raises(ValueError):
        beg_check([])


# -- apply --------------------------------------------------------------------------

def test_apply_scales_colour():
    out = beg_apply(one_splat([1.0, 0.5, 0.25, 0.1]))
    assert np.allclose(out.colors[0], [0.8, 0.4, 0.2, 0.08], atol=1e-15)


def test_apply_touches_only_colours():
    scene = random_scene(np.random.default_rng(1), 5, (8, 8, 4), 2.0)
    out = beg_apply(scene)
    for k in ("positions", "log_scales", "rotations", "opacity_logits"):
        assert np.array_equal(out.params()[k], scene.params()[k])
    assert np.array_equal(out.depth_rank, scene.depth_rank)


def test_apply_with_unit_factor_is_identity():
    scene = random_scene(np.random.default_rng(2), 4, (8, 8, 4), 2.0)
    assert np.array_equal(beg_apply(scene, BegConfig(t_b=1.0)).colors, scene.colors)


@pytest.mark.parametrize("seed", range(5))
def test_render_after_apply_is_scaled_render(seed):
    scene = random_scene(np.random.default_rng(seed), 6, (10, 10, 4), 3.0)
    once, twice = beg_apply(scene), beg_apply(beg_apply(scene))
    for v in make_views(4):
        base = render(scene, v)
        assert np.abs(render(once, v) - 0.8 * base).max() < 1e-12
        assert np.abs(render(twice, v) - 0.64 * base).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), pose=st.integers(0, 3))
def test_apply_never_brightens_nonnegative_scene(seed, pose):
    scene = random_scene(np.random.default_rng(seed), 5, (8, 8, 3), 2.0)
    scene = scene.with_params(colors=np.abs(scene.colors))
    v = make_views(4)[pose]
    assert np.all(brightness(render(beg_apply(scene), v)) <= brightness(render(scene, v)) + 1e-15)


def test_linear_decoder_percentile_scales_with_factor():
    scene = random_scene(np.random.default_rng(7), 6, (8, 8, 3), 2.0)
    scene = scene.with_params(colors=np.abs(scene.colors))
    dec = Decoder(np.eye(3), 1, False)
    v = View(0.0, 0)
    before = percentile(brightness(dec(render(scene, v))), 85)
    after = percentile(brightness(dec(render(beg_apply(scene), v))), 85)
    assert after == pytest.approx(0.8 * before, rel=1e-12)


def test_per_splat_only_scales_bright_splats():
    colors = np.array([[0.95, 0.95, 0.95, 0.0], [0.1, 0.2, 0.3, 0.0]])
    scene = SplatScene(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2), colors, np.zeros(2), np.array([0, 1]),
                       (4, 4, 4))
    out = beg_apply(scene, BegConfig(per_splat=True))
    assert np.allclose(out.colors[0], 0.8 * colors[0]) and np.array_equal(out.colors[1], colors[1])


@pytest.mark.parametrize("kw", [dict(m=0), dict(m=100), dict(t_gs=0), dict(t_gs=1.5), dict(t_b=0), dict(t_b=1.1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BegConfig(**kw)
