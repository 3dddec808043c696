import math

import numpy as np
import pytest

from sifa.core import InvalidInputError
from sifa.metrics import VolumePrediction, _kernels, asd, dice_coefficient, evaluate, surface_voxels


# ---------------------------------------------------------------------------
# brute-force oracles: explicit loops, no shared code with the implementation
# ---------------------------------------------------------------------------


def oracle_surface(vol, k):
    Z, H, W = vol.shape
    out = set()
    steps = [(0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    if Z > 1:
        steps += [(1, 0, 0), (-1, 0, 0)]
    for z in range(Z):
        for y in range(H):
            for x in range(W):
                if vol[z, y, x] != k:
                    continue
                for dz, dy, dx in steps:
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < Z and 0 <= yy < H and 0 <= xx < W) or vol[zz, yy, xx] != k:
                        out.add((z, y, x))
                        break
    return out


def oracle_dice(p, g, k):
    inter = sp = sg = 0
    for a, b in zip(p.ravel(), g.ravel()):
        sp += a == k
        sg += b == k
        inter += (a == k) and (b == k)
    if sp + sg == 0:
        return 100.0
    return 100.0 * 2 * inter / (sp + sg)


def oracle_asd(p, g, k, spacing=(1.0, 1.0, 1.0)):
    sp, sg = oracle_surface(p, k), oracle_surface(g, k)
    if not sp or not sg:
        return None

    def directed(a, b):
        total = 0.0
        for pa in a:
            best = math.inf
            for pb in b:
                d = math.sqrt(sum(((pa[i] - pb[i]) * spacing[i]) ** 2 for i in range(3)))
                best = min(best, d)
            total += best
        return total / len(a)

    return 0.5 * (directed(sp, sg) + directed(sg, sp))


def random_volume(rng, shape, K=5):
    # blobby labels so surfaces are non-trivial
    vol = rng.integers(0, K, size=shape)
    keep = rng.random(shape) < 0.5
    vol[keep] = 0
    return vol


# ---------------------------------------------------------------------------


def test_dice_cases():
    a = np.zeros((4, 4), int)
    a[0, :2] = 1
    assert dice_coefficient(a, 1, a) == 100.0
    b = np.zeros((4, 4), int)
    b[3, :2] = 1
    assert dice_coefficient(a, 1, b) == 0.0
    c = np.zeros((4, 4), int)
    c[0, 1:3] = 1
    assert dice_coefficient(a, 1, c) == 50.0
    assert dice_coefficient(np.zeros((4, 4), int), 1, np.zeros((4, 4), int)) == 100.0


def test_dice_is_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p, g = random_volume(rng, (2, 6, 6)), random_volume(rng, (2, 6, 6))
        for k in range(1, 5):
            assert dice_coefficient(p, k, g) == dice_coefficient(g, k, p)


def test_surface_voxels_cases():
    single = np.zeros((3, 3, 3), int)
    single[1, 1, 1] = 2
    assert surface_voxels(single, 2).tolist() == [[1, 1, 1]]
    cube = np.ones((3, 3, 3), int)
    surf = {tuple(p) for p in surface_voxels(cube, 1)}
    assert len(surf) == 26 and (1, 1, 1) not in surf
    assert len(surface_voxels(cube, 3)) == 0


def test_asd_cases():
    a = np.zeros((1, 5, 5), int)
    a[0, 1, 1] = 1
    assert asd(a, 1, a) == 0.0
    b = np.zeros((1, 5, 5), int)
    b[0, 3, 1] = 1
    assert asd(a, 1, b) == 2.0
    assert asd(np.zeros_like(a), 1, a) is None
    assert asd(a, 1, np.zeros_like(a)) is None


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        dice_coefficient(np.zeros((4, 4)), 1, np.zeros((4, 5)))
    with pytest.raises(InvalidInputError):
        VolumePrediction([np.zeros((4, 4))], [np.zeros((4, 5))])


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
        p, g = random_volume(rng, shape), random_volume(rng, shape)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        for k in range(1, 5):
            assert dice_coefficient(p, k, g) == oracle_dice(p, g, k)
            got, want = asd(p, k, g, spacing), oracle_asd(p, g, k, spacing)
            if want is None:
                assert got is None
            else:
                assert abs(got - want) < 1e-9
            assert {tuple(v) for v in surface_voxels(p, k)} == oracle_surface(p, k)


def test_asd_zero_iff_surfaces_equal():
    rng = np.random.default_rng(9)
    for _ in range(30):
        p = random_volume(rng, (2, 6, 6))
        g = p.copy()
        if rng.random() < 0.5:
            g[rng.integers(2), rng.integers(6), rng.integers(6)] = 1
        for k in range(1, 5):
            d = asd(p, k, g)
            if d is None:
                continue
            same = oracle_surface(p, k) == oracle_surface(g, k)
            assert (d == 0.0) == same


@pytest.mark.parametrize("c", [2.0, 0.5, 4.0])
def test_asd_spacing_scaling_exact(c):
    rng = np.random.default_rng(4)
    p, g = random_volume(rng, (3, 7, 7)), random_volume(rng, (3, 7, 7))
    base = (1.0, 0.75, 1.25)
    for k in range(1, 5):
        d1 = asd(p, k, g, base)
        d2 = asd(p, k, g, tuple(c * s for s in base))
        if d1 is not None:
            assert d2 == c * d1


def test_asd_spacing_scaling_arbitrary_factor():
    rng = np.random.default_rng(5)
    p, g = random_volume(rng, (3, 7, 7)), random_volume(rng, (3, 7, 7))
    d1 = asd(p, 1, g, (1.0, 1.0, 1.0))
    d2 = asd(p, 1, g, (1.7, 1.7, 1.7))
    assert d2 == pytest.approx(1.7 * d1, rel=1e-12)


def test_numba_and_numpy_paths_agree():
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(6)
    for _ in range(40):
        shape = tuple(int(s) for s in rng.integers(1, 12, size=3))
        m = rng.random(shape) < rng.uniform(0.05, 0.9)
        for check_z in (True, False):
            assert np.array_equal(_kernels.surface_mask_numba(m, check_z), _kernels.surface_mask_numpy(m, check_z))
        surf = rng.random(shape) < rng.uniform(0.0, 0.2)
        pts = np.argwhere(np.ones(shape, bool))
        sp = rng.uniform(0.3, 3.0, 3)
        np.testing.assert_allclose(
            _kernels.nearest_distances_numba(pts, surf, sp), _kernels.nearest_distances_numpy(pts, surf, sp), rtol=0, atol=1e-12
        )


def _vp(p, g):
    return VolumePrediction(list(p), list(g))


def test_evaluate_perfect_volume():
    rng = np.random.default_rng(0)
    g = np.zeros((2, 16, 16), int)
    g[:, 2:5, 2:5], g[:, 2:5, 8:12], g[:, 9:13, 2:6], g[:, 9:14, 9:14] = 1, 2, 3, 4
    rep = evaluate([_vp(g, g)])
    assert all(v == 100.0 for v in rep.dice.values())
    assert all(v == 0.0 for v in rep.asd.values())
    assert rep.dice_avg == 100.0 and rep.asd_avg == 0.0


def test_evaluate_na_propagates():
    g = np.zeros((1, 16, 16), int)
    g[0, 2:5, 2:5], g[0, 2:5, 8:12], g[0, 9:13, 2:6], g[0, 9:14, 9:14] = 1, 2, 3, 4
    p = g.copy()
    p[p == 3] = 0  # no LVC prediction
    rep = evaluate([_vp(g, g), _vp(p, g)])
    assert rep.asd["LVC"] is None
    assert rep.asd_avg is None
    assert rep.asd["AA"] == 0.0
    assert "NA" in rep.to_text() and "LVC,50.0000,NA" in rep.to_csv()


def test_evaluate_averages_volumes():
    g = np.zeros((1, 8, 8), int)
    g[0, 0, :5] = 1  # 5 voxels
    p1 = np.zeros_like(g)
    p1[0, 0, :1] = 1
    p1[0, 7, :4] = 1  # |P|=5, overlap 1 -> dice 2/10 = 20
    p2 = np.zeros_like(g)
    p2[0, 0, :4] = 1
    p2[0, 7, :1] = 1  # overlap 4 -> 80
    assert dice_coefficient(p1, 1, g) == pytest.approx(20.0)
    assert dice_coefficient(p2, 1, g) == pytest.approx(80.0)
    rep = evaluate([_vp(p1, g), _vp(p2, g)])
    assert rep.dice["AA"] == pytest.approx(50.0)


def test_evaluate_empty_list():
    with pytest.raises(InvalidInputError):
        evaluate([])


def test_report_columns():
    g = np.ones((1, 8, 8), int)
    rep = evaluate([_vp(g, g)])
    header = rep.to_text().splitlines()[0].split()
    assert header == ["AA", "LAC", "LVC", "MYO", "Average"]
