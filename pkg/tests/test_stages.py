import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irpipe.errors import DimensionMismatch, InvalidParams, StateParamMismatch
from irpipe.nuc import BadPixelMap
from irpipe.simulator import NoiseParams, Scene, build_noise_model, render_clean, simulate_raw
from irpipe.stages import (
    BprParams,
    DestripeParams,
    FlareParams,
    SpatialDenoiseParams,
    TdnState,
    TemporalDenoiseParams,
    destripe,
    flare_correct,
    match_blocks,
    replace_bad_pixels,
    spatial_denoise,
    temporal_denoise,
)

from conftest import make_frame
from oracles import bpr_value, brute_block_search


# ---------------------------------------------------------------- BPR


def test_bpr_center_of_constant_frame():
    flags = np.zeros((16, 16), bool)
    flags[8, 8] = True
    fr = make_frame(np.full((16, 16), 777))
    out = replace_bad_pixels(fr, BadPixelMap(flags))
    assert out == fr


def test_bpr_matches_integer_oracle(rng):
    samples = rng.integers(0, 16384, (20, 24)).astype(np.uint16)
    flags = rng.random((20, 24)) < 0.1
    flags[0, 0] = flags[19, 23] = flags[0, 23] = True
    out = replace_bad_pixels(make_frame(samples), BadPixelMap(flags)).samples
    for r, c in zip(*np.nonzero(flags)):
        expected = bpr_value(samples, flags, r, c)
        if expected is not None:
            assert out[r, c] == expected
    assert np.array_equal(out[~flags], samples[~flags])


def test_bpr_orphan_uses_good_median():
    samples = np.arange(256, dtype=np.uint16).reshape(16, 16)
    flags = np.zeros((16, 16), bool)
    flags[:5, :5] = True  # (0,0) has no good neighbour within 2 pixels
    out = replace_bad_pixels(make_frame(samples), BadPixelMap(flags)).samples
    good = samples[~flags]
    assert out[0, 0] == int(np.floor(np.median(good) + 0.5))


def test_bpr_custom_kernel_and_validation():
    with pytest.raises(InvalidParams):
        BprParams(np.ones((5, 5)))
    with pytest.raises(InvalidParams):
        BprParams(np.ones((3, 3)))
    k = np.zeros((5, 5))
    k[2, 1] = 1.0  # left neighbour only
    flags = np.zeros((16, 16), bool)
    flags[4, 4] = True
    samples = np.arange(256, dtype=np.uint16).reshape(16, 16)
    out = replace_bad_pixels(make_frame(samples), BadPixelMap(flags), BprParams(k)).samples
    assert out[4, 4] == samples[4, 3]


def test_bpr_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        replace_bad_pixels(make_frame(np.zeros((16, 16))), BadPixelMap(np.zeros((16, 17), bool)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.2))
def test_bpr_only_touches_flagged(seed, frac):
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, 16384, (16, 16)).astype(np.uint16)
    flags = rng.random((16, 16)) < frac
    out = replace_bad_pixels(make_frame(samples), BadPixelMap(flags)).samples
    assert np.array_equal(out[~flags], samples[~flags])
    # replacements stay inside the range of good values
    if flags.any() and (~flags).any():
        good = samples[~flags]
        assert out[flags].min() >= good.min() and out[flags].max() <= good.max()


# ---------------------------------------------------------------- destripe


def test_destripe_keeps_linear_ramp():
    ramp = np.tile(np.arange(64) * 100 + 1000, (32, 1))
    fr = make_frame(ramp)
    diff = destripe(fr).samples.astype(int) - ramp
    assert np.max(np.abs(diff[:, 4:-4])) <= 1


def test_destripe_constant_frame_identity():
    fr = make_frame(np.full((16, 32), 4321))
    assert destripe(fr) == fr


def test_destripe_reduces_stripes(rng):
    base = np.full((64, 96), 6000.0)
    stripes = 20 * rng.standard_normal(96)
    fr = make_frame(np.round(base + stripes[None, :]))
    out = destripe(fr).samples.astype(float)
    before = np.std(fr.samples.astype(float).mean(axis=0))
    after = np.std(out.mean(axis=0))
    # the moving average leaves roughly 1/sqrt(window) of the stripe energy
    assert after < 0.5 * before


def test_destripe_params():
    with pytest.raises(InvalidParams):
        DestripeParams(4)
    with pytest.raises(InvalidParams):
        destripe(make_frame(np.zeros((16, 16))), DestripeParams(17))


@pytest.mark.xfail(strict=True, reason="moving-average stripe estimate leaves ~sigma/sqrt(window) residual")
def test_destripe_restores_clean_within_one_lsb(rng):
    clean = np.tile(np.arange(96) * 20 + 3000, (64, 1))
    stripes = np.round(20 * rng.standard_normal(96))
    out = destripe(make_frame(clean + stripes[None, :])).samples.astype(int)
    assert np.max(np.abs(out - clean)[:, 4:-4]) <= 1


# ---------------------------------------------------------------- spatial denoise


@pytest.mark.parametrize("method", ["bilateral", "nlm"])
def test_sdn_constant_identity(method):
    fr = make_frame(np.full((24, 24), 5000))
    p = SpatialDenoiseParams(method=method, search_radius=3, patch_radius=1)
    assert spatial_denoise(fr, p) == fr


@pytest.mark.parametrize("method", ["bilateral", "nlm"])
def test_sdn_reduces_noise(method, rng):
    clean = np.full((48, 48), 5000.0)
    noisy = np.round(clean + 10 * rng.standard_normal(clean.shape))
    p = SpatialDenoiseParams(method=method, search_radius=4, patch_radius=2)
    out = spatial_denoise(make_frame(noisy), p).samples.astype(float)
    assert np.std(out - clean) < 0.6 * np.std(noisy - clean)


def test_bilateral_preserves_strong_edge():
    img = np.full((32, 32), 2000)
    img[:, 16:] = 8000
    out = spatial_denoise(make_frame(img)).samples.astype(int)
    assert np.max(np.abs(out - img)) <= 1


def test_sdn_params():
    with pytest.raises(InvalidParams):
        SpatialDenoiseParams(method="median")
    with pytest.raises(InvalidParams):
        SpatialDenoiseParams(sigma_range=0)


# ---------------------------------------------------------------- temporal denoise


def test_tdn_first_frame_passthrough(rng):
    fr = make_frame(rng.integers(0, 16384, (32, 32)))
    out, state = temporal_denoise(TdnState(), fr)
    assert out == fr and state.previous == fr


def test_tdn_static_blend_is_average(rng):
    a = rng.integers(1000, 1100, (32, 32))
    b = a + rng.integers(-5, 6, a.shape)
    _, s = temporal_denoise(TdnState(), make_frame(a))
    out, s = temporal_denoise(s, make_frame(b))
    assert np.array_equal(out.samples, np.floor(0.5 * a + 0.5 * b + 0.5).astype(int))
    assert np.all(s.last_vectors == 0)


def test_tdn_param_mismatch():
    with pytest.raises(StateParamMismatch):
        temporal_denoise(TdnState(), make_frame(np.zeros((16, 16))), TemporalDenoiseParams(block=8))


def test_tdn_shape_change():
    _, s = temporal_denoise(TdnState(), make_frame(np.zeros((16, 16))))
    with pytest.raises(DimensionMismatch):
        temporal_denoise(s, make_frame(np.zeros((16, 17))))


def test_tdn_rejects_mismatched_blocks(rng):
    a = rng.integers(0, 16384, (32, 32))
    b = rng.integers(0, 16384, (32, 32))
    _, s = temporal_denoise(TdnState(), make_frame(a))
    out, _ = temporal_denoise(s, make_frame(b))
    assert np.array_equal(out.samples, b)


def test_match_blocks_against_brute_force(rng):
    prev = rng.integers(0, 1000, (40, 48)).astype(float)
    cur = np.roll(prev, (2, -3), axis=(0, 1)) + rng.integers(-2, 3, prev.shape)
    p = TemporalDenoiseParams(block=16, search_radius=4)
    vectors, _, _ = match_blocks(cur, prev, p)
    for i, r0 in enumerate(range(0, 40, 16)):
        for j, c0 in enumerate(range(0, 48, 16)):
            assert tuple(vectors[i, j]) == brute_block_search(cur, prev, r0, c0, 16, 4)


def test_match_blocks_tie_prefers_zero():
    flat = np.full((32, 32), 100.0)
    vectors, sad, comp = match_blocks(flat, flat, TemporalDenoiseParams())
    assert np.all(vectors == 0) and np.all(sad == 0)
    assert np.array_equal(comp, flat)


def test_tdn_translation_vectors():
    model = build_noise_model(1, NoiseParams.ideal(width=128, height=96))
    scene = Scene.targets(96, 128, 20.0, seed=4)
    f0 = simulate_raw(scene, model, 25.0, 0)
    f1 = simulate_raw(scene.shifted(8, 0), model, 25.0, 1)
    _, s = temporal_denoise(TdnState(), f0)
    _, s = temporal_denoise(s, f1)
    # interior blocks only: the leftmost column of blocks sees wrapped content
    inner = s.last_vectors[1:-1, 1:-1]
    assert np.all(inner[..., 0] == 8) and np.all(inner[..., 1] == 0)


def test_tdn_reduces_temporal_noise():
    model = build_noise_model(2, NoiseParams.ideal(width=64, height=64, temporal_sigma=6.0))
    scene = Scene.flat(64, 64, 25.0)
    clean = render_clean(scene, model, 25.0).samples.astype(float)
    state = TdnState()
    for i in range(32):
        out, state = temporal_denoise(state, simulate_raw(scene, model, 25.0, i))
    raw_err = simulate_raw(scene, model, 25.0, 99).samples.astype(float) - clean
    assert np.std(out.samples.astype(float) - clean) < 0.7 * np.std(raw_err)


# ---------------------------------------------------------------- flare


def test_flare_constant_identity():
    fr = make_frame(np.full((64, 64), 3000))
    assert flare_correct(fr) == fr


def test_flare_preserves_mean_and_reduces_blob():
    h, w = 96, 128
    yy, xx = np.mgrid[:h, :w]
    blob = 1500 * np.exp(-((xx - 64) ** 2 + (yy - 48) ** 2) / (2 * 24.0**2))
    img = np.round(5000 + blob)
    out = flare_correct(make_frame(img)).samples.astype(float)
    assert abs(out.mean() - img.mean()) < 1.0
    before = np.ptp(img)
    after = np.ptp(out)
    assert after < 0.6 * before


@pytest.mark.xfail(strict=True, reason="default blur/fraction removes ~55-66% of a broad blob, not 70%")
def test_flare_removes_seventy_percent():
    model = build_noise_model(7, NoiseParams.ideal(width=160, height=120))
    from irpipe.simulator import Flare

    flare = Flare(80, 60, 30, 1500.0)
    blob = flare.render(120, 160)
    img = np.round(5000 + blob)
    out = flare_correct(make_frame(img)).samples.astype(float)
    residual = out - out.mean()
    excess = blob - blob.mean()
    assert np.abs(residual).max() <= 0.3 * np.abs(excess).max()


def test_flare_params():
    with pytest.raises(InvalidParams):
        FlareParams(background_sigma=2)
    with pytest.raises(InvalidParams):
        FlareParams(max_removal_fraction=1.5)
    fr = make_frame(np.random.default_rng(0).integers(0, 5000, (32, 32)))
    assert flare_correct(fr, FlareParams(max_removal_fraction=0.0)) == fr


def test_destripe_zero_frame():
    fr = make_frame(np.zeros((16, 32)))
    assert destripe(fr) == fr


def test_tdn_alpha_zero_identity(rng):
    p = TemporalDenoiseParams(blend_alpha=0.0)
    state = TdnState(p)
    for _ in range(4):
        fr = make_frame(rng.integers(0, 16384, (32, 32)))
        out, state = temporal_denoise(state, fr)
        assert out == fr


def test_tdn_identical_frames_pass_through(rng):
    fr = make_frame(rng.integers(0, 16384, (32, 48)))
    _, s = temporal_denoise(TdnState(), fr)
    out, _ = temporal_denoise(s, fr)
    assert out == fr


def test_nlm_defaults_halve_rmse(rng):
    clean = np.full((48, 48), 4000.0)
    noisy = np.round(clean + 20 * rng.standard_normal(clean.shape))
    out = spatial_denoise(make_frame(noisy), SpatialDenoiseParams(method="nlm")).samples.astype(float)
    rmse = lambda x: np.sqrt(np.mean((x - clean) ** 2))
    assert rmse(out) * 2 <= rmse(noisy)


def test_bilateral_step_edge_location():
    img = np.full((32, 40), 1000)
    img[:, 20:] = 5000
    out = spatial_denoise(make_frame(img)).samples.astype(int)
    grad_in = np.abs(np.diff(img, axis=1)).sum(axis=0)
    grad_out = np.abs(np.diff(out, axis=1)).sum(axis=0)
    assert np.argmax(grad_out) == np.argmax(grad_in)


def test_tdn_seeded_sigma16_stream():
    model = build_noise_model(6, NoiseParams.ideal(width=64, height=64, temporal_sigma=16.0))
    scene = Scene.flat(64, 64, 40.0)
    clean = render_clean(scene, model, 25.0).samples.astype(float)
    state = TdnState()
    for i in range(10):
        out, state = temporal_denoise(state, simulate_raw(scene, model, 25.0, i))
    assert np.std(out.samples.astype(float) - clean) <= 0.7 * 16.0
