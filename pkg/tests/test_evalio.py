import math
import warnings

import numpy as np
import pytest

from hsigan.evalio import (CubeFormatError, HsiCube, RdPoint, bpp, cube_bytes, parse_cube,
                           psnr, rd_curve, rd_from_points, read_cube, ssim, ssim_and_grad,
                           synth_dataset, write_cube)
from hsigan.networks import ModelConfig, build
from hsigan.tensor import Parameter, ShapeError, grad_check, make_rng


def naive_psnr(x, y):
    d = (np.asarray(x) - np.asarray(y)).ravel()
    mse = math.fsum(float(v) * float(v) for v in d) / d.size
    return 10.0 * math.log10(1.0 / mse)


def naive_ssim(x, y, size=11, sigma=1.5):
    """Explicit sliding window with a 2D Gaussian weight, one band at a time."""
    k = np.arange(size) - (size - 1) / 2
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    per_band = []
    for xb, yb in zip(x, y):
        vals = []
        for i in range(xb.shape[0] - size + 1):
            for j in range(xb.shape[1] - size + 1):
                px, py = xb[i:i + size, j:j + size], yb[i:i + size, j:j + size]
                mx, my = np.sum(w * px), np.sum(w * py)
                vx = np.sum(w * (px - mx) ** 2)
                vy = np.sum(w * (py - my) ** 2)
                cxy = np.sum(w * (px - mx) * (py - my))
                vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                            / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        per_band.append(np.mean(vals))
    return float(np.mean(per_band))


def random_pair(seed, shape=(2, 16, 16)):
    rng = make_rng(seed)
    x = rng.uniform(size=shape)
    y = np.clip(x + rng.uniform(0.01, 0.3) * rng.standard_normal(shape), 0, 1)
    return x, y


# ---------------------------------------------------------------- psnr


def test_psnr_formula():
    x = np.zeros((2, 4, 4))
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identity_is_capped_and_flagged():
    x = make_rng(0).uniform(size=(3, 5, 5))
    assert psnr(x, x, return_exact=True) == (99.0, True)
    db, exact = psnr(x, x + 0.01, return_exact=True)
    assert not exact and db == pytest.approx(40.0)


@pytest.mark.parametrize("seed", range(10))
def test_psnr_matches_two_pass_formula(seed):
    x, y = random_pair(seed)
    assert abs(psnr(x, y) - naive_psnr(x, y)) < 1e-9


def test_psnr_decreases_with_noise():
    rng = make_rng(3)
    x = rng.uniform(size=(4, 16, 16))
    noise = rng.standard_normal(x.shape)
    vals = [psnr(x, x + s * noise) for s in (0.01, 0.02, 0.05)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError, match="shape mismatch"):
        psnr(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


# ---------------------------------------------------------------- ssim


def test_ssim_identity_is_one():
    x = make_rng(1).uniform(size=(3, 16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_luminance_closed_form():
    m1, m2 = 0.3, 0.45
    x = np.full((2, 16, 16), m1)
    y = np.full((2, 16, 16), m2)
    c1 = 0.01 ** 2
    expected = (2 * m1 * m2 + c1) / (m1 ** 2 + m2 ** 2 + c1)
    assert ssim(x, y) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_ssim_matches_naive_window(seed):
    x, y = random_pair(seed)
    assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-8


def test_ssim_inverted_image_scores_lower():
    x = make_rng(2).uniform(size=(1, 16, 16))
    assert ssim(x, 1 - x) < ssim(x, x)


def test_ssim_window_too_large():
    with pytest.raises(ValueError, match="smaller than"):
        ssim(np.zeros((1, 10, 16)), np.zeros((1, 10, 16)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_gradient(seed):
    x, y = random_pair(seed, (2, 12, 12))
    yp = Parameter("y", y)

    def analytic():
        yp.grad[...] = ssim_and_grad(x, yp.value)[1]

    # corner pixels touch only the window tails (|grad| ~ 1e-8), below f's roundoff / eps
    rep = grad_check(lambda: ssim(x, yp.value), [yp], eps=1e-5, analytic=analytic, floor=1e-6)
    assert rep.max_rel_error < 1e-4, rep


# ---------------------------------------------------------------- bpp


def test_bpp_examples():
    assert bpp(6912, (32, 96, 96)) == 0.0234375
    assert bpp(b"\0" * 10, (2, 4, 4)) == 80 / 32
    assert bpp(6912, (32, 96, 96), mode="pixel") == 32 * 0.0234375
    with pytest.raises(ValueError):
        bpp(1, (1, 1, 1), mode="nats")


# ---------------------------------------------------------------- synthetic data


def test_synth_split_sizes_and_partition():
    cubes, split = synth_dataset(100, 4, 16, 16, seed=7)
    assert (len(split.train), len(split.val), len(split.test)) == (80, 10, 10)
    allidx = np.concatenate([split.train, split.val, split.test])
    assert sorted(allidx.tolist()) == list(range(100))
    assert len(cubes) == 100


def test_synth_uneven_split():
    _, split = synth_dataset(13, 2, 8, 8, seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (10, 1, 2)


def test_synth_range_and_determinism():
    a, sa = synth_dataset(10, 8, 16, 16, seed=3)
    b, sb = synth_dataset(10, 8, 16, 16, seed=3)
    for ca, cb in zip(a, b):
        assert ca.values.min() >= 0 and ca.values.max() <= 1
        np.testing.assert_array_equal(ca.values, cb.values)
    np.testing.assert_array_equal(sa.test, sb.test)


@pytest.mark.parametrize("bands", [8, 32])
def test_synth_adjacent_band_correlation(bands):
    cubes, _ = synth_dataset(10, bands, 32, 32, seed=0)
    corr = [np.corrcoef(c.values[b].ravel(), c.values[b + 1].ravel())[0, 1]
            for c in cubes for b in range(bands - 1)]
    assert np.mean(corr) > 0.9


def test_synth_rejects_small_n():
    with pytest.raises(ValueError, match="n >= 10"):
        synth_dataset(5, 2, 8, 8, seed=0)


# ---------------------------------------------------------------- HSSC-RAW


def test_cube_round_trip_bit_exact(tmp_path):
    v = make_rng(0).uniform(size=(3, 5, 7)).astype(np.float32)
    path = tmp_path / "c.hsraw"
    write_cube(path, HsiCube(v))
    back = read_cube(path)
    assert back.values.astype(np.float32).tobytes() == v.tobytes()
    assert path.read_bytes()[:8] == b"HSSCRAW1"
    assert len(path.read_bytes()) == 8 + 12 + 1 + 4 * v.size


def test_cube_truncated():
    data = cube_bytes(np.zeros((2, 3, 3)))
    with pytest.raises(CubeFormatError, match="payload underrun"):
        parse_cube(data[:-1])


def test_cube_bad_magic():
    data = cube_bytes(np.zeros((1, 2, 2)))
    with pytest.raises(CubeFormatError, match="bad magic"):
        parse_cube(b"XXXXXXXX" + data[8:])


def test_cube_non_finite():
    with pytest.raises(CubeFormatError, match="non-finite"):
        parse_cube(cube_bytes(np.array([[[np.nan]]])))


def test_cube_out_of_range_errors_or_clamps():
    data = cube_bytes(np.array([[[1.5, -0.25]]]))
    with pytest.raises(CubeFormatError, match="outside"):
        parse_cube(data)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cube = parse_cube(data, clamp=True)
    assert caught
    np.testing.assert_array_equal(cube.values, [[[1.0, 0.0]]])


# ---------------------------------------------------------------- RD curves


def test_rd_sorting_and_monotonicity_flag():
    pts = [RdPoint("3d", 1.0, 1.43, 31.92, 0.9), RdPoint("3d", 0.8, 1.22, 32.24, 0.9),
           RdPoint("3d", 0.2, 0.3, 28.0, 0.8)]
    curve = rd_from_points(pts)
    assert [p.bpp for p in curve.points] == [0.3, 1.22, 1.43]
    assert curve.non_monotone == [("3d", 0.8, 1.0)]
    lines = curve.to_csv().splitlines()
    assert lines[0] == "variant,r_t,bpp,psnr_db,ssim"
    assert len(lines) == 4


def test_rd_rejects_duplicate_rt():
    with pytest.raises(ValueError, match="duplicate"):
        rd_from_points([RdPoint("opt", 0.2, 0.1, 20, 0.5), RdPoint("opt", 0.2, 0.2, 21, 0.5)])


def test_rd_single_untrained_model():
    bundle = build(ModelConfig("opt", bands=2, width_scale=0.0625, seed=0))
    cubes, split = synth_dataset(10, 2, 16, 16, seed=1)
    curve = rd_curve([("opt", 0.4, bundle)], [cubes[i] for i in split.test])
    assert len(curve.points) == 1
    p = curve.points[0]
    assert all(np.isfinite([p.bpp, p.psnr_db, p.ssim]))
