import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from addit.attention import AttentionState
from addit.exceptions import ContractError, DegenerateInputError
from addit.masking import (
    OtsuThresholder,
    SubjectMapRecorder,
    aggregate_subject_attention,
    blend_latents,
    build_subject_mask,
    exclusion_radius,
    grow_regions,
    mask_from_json,
    mask_to_json,
    otsu_bin,
    otsu_threshold,
    read_pgm,
    refine_mask,
    sample_points,
    subject_saliency,
    to_pgm,
)

seeds = st.integers(0, 2**32 - 1)


# -- oracles ----------------------------------------------------------------------


def otsu_scan(values, num_bins=64):
    """Exhaustive between-class variance over every bin boundary, plain loops."""
    vals = [float(v) for v in np.ravel(values)]
    lo, hi = min(vals), max(vals)
    width = (hi - lo) / num_bins
    counts = [0] * num_bins
    for v in vals:
        b = int((v - lo) / width) if v < hi else num_bins - 1
        counts[min(b, num_bins - 1)] += 1
    best, best_k = -1.0, None
    n = len(vals)
    for k in range(num_bins - 1):
        n0 = sum(counts[: k + 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        m0 = sum(c * (i + 0.5) for i, c in enumerate(counts[: k + 1])) / n0
        m1 = sum(c * (i + 0.5) for i, c in enumerate(counts[k + 1:], start=k + 1)) / n1
        var = (n0 / n) * (n1 / n) * (m0 - m1) ** 2
        if var > best + 1e-12 * max(1.0, best):
            best, best_k = var, k
    return best_k


def greedy_replay(sal, max_points=4, stop_ratio=0.35, radius=None):
    h, w = sal.shape
    radius = math.ceil(max(h, w) / 8) if radius is None else radius
    alive = [[True] * w for _ in range(h)]
    p_max = max(max(row) for row in sal.tolist())
    pts = []
    while len(pts) < max_points:
        best, where = None, None
        for r in range(h):
            for c in range(w):
                if alive[r][c] and (best is None or sal[r, c] > best):
                    best, where = sal[r, c], (r, c)
        if where is None or (pts and best < stop_ratio * p_max):
            break
        pts.append(where)
        for r in range(h):
            for c in range(w):
                if (r - where[0]) ** 2 + (c - where[1]) ** 2 <= radius**2:
                    alive[r][c] = False
    return pts


def flood_fill(pred, seed):
    h, w = pred.shape
    out = np.zeros_like(pred, dtype=bool)
    if not pred[seed]:
        return out
    queue = deque([seed])
    out[seed] = True
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and pred[rr, cc] and not out[rr, cc]:
                out[rr, cc] = True
                queue.append((rr, cc))
    return out


# -- saliency and aggregation -----------------------------------------------------


def test_single_alignment_gives_one_hot():
    heads, d, grid = 2, 4, (5, 6)
    k_obj = np.zeros((heads, d))
    k_obj[:, 0] = 1.0
    q_img = np.zeros((heads, 30, d))
    q_img[:, 3 * 6 + 4, 0] = 2.0
    q_img[:, 7, 0] = -5.0  # anti-aligned, clipped
    state = AttentionState(q_p=np.zeros((heads, 2, d)), q_img=q_img, k_p=np.stack([k_obj, k_obj], 1),
                           k_img=np.zeros((heads, 30, d)), v_p=np.zeros((heads, 2, d)),
                           v_img=np.zeros((heads, 30, d)))
    m = aggregate_subject_attention([subject_saliency(state, 1, grid)])
    expected = np.zeros(grid)
    expected[3, 4] = 1.0
    assert np.array_equal(m, expected)


def test_aggregate_is_mean_then_max_normalised():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 4, 4))
    mean = (a + b) / 2
    np.testing.assert_allclose(aggregate_subject_attention({(0, 1): a, (1, 1): b}), mean / mean.max())
    with pytest.raises(ContractError):
        aggregate_subject_attention([])
    with pytest.raises(ContractError):
        aggregate_subject_attention([-a])


def test_saliency_matches_raw_recomputation():
    rng = np.random.default_rng(1)
    heads, d, grid = 3, 8, (4, 5)
    states = []
    for _ in range(2):
        states.append(AttentionState(
            q_p=rng.standard_normal((heads, 3, d)), q_img=rng.standard_normal((heads, 20, d)),
            k_p=rng.standard_normal((heads, 3, d)), k_img=rng.standard_normal((heads, 20, d)),
            v_p=np.zeros((heads, 3, d)), v_img=np.zeros((heads, 20, d))))
    rec = SubjectMapRecorder(2, grid, {(0, 5), (1, 5)})
    for block, s in enumerate(states):
        rec.record(5, block, s)
    rec.record(6, 0, states[0])  # outside the configured set
    assert set(rec.maps) == {(0, 5), (1, 5)}
    maps = []
    for s in states:
        m = np.zeros(20)
        for n in range(20):
            total = 0.0
            for h in range(heads):
                total += max(0.0, float(np.dot(s.q_img[h, n], s.k_p[h, 2])) / math.sqrt(d))
            m[n] = total / heads
        maps.append(m.reshape(grid))
    ref = (maps[0] + maps[1]) / 2
    np.testing.assert_allclose(rec.aggregate(), ref / ref.max(), atol=1e-10)
    with pytest.raises(ContractError):
        rec.aggregate([(0, 5), (3, 3)])
    with pytest.raises(ContractError):
        subject_saliency(states[0], None, grid)


# -- Otsu ---------------------------------------------------------------------------


def test_bimodal_map():
    m = np.full((8, 8), 0.1)
    m[:, 4:] = 0.9
    t, rough = otsu_threshold(m)
    assert 0.1 < t < 0.9
    assert np.array_equal(rough, m == 0.9)


def test_constant_map_is_degenerate():
    with pytest.raises(DegenerateInputError):
        otsu_threshold(np.full((4, 4), 0.3))


@settings(max_examples=40)
@given(seeds)
def test_otsu_matches_exhaustive_scan(seed):
    m = np.random.default_rng(seed).random((10, 10)) ** 2
    assert otsu_bin(m) == otsu_scan(m)


@settings(max_examples=30)
@given(seeds, st.sampled_from([0.5, 2.0, 3.7]), st.sampled_from([-1.0, 0.0, 5.0]))
def test_otsu_affine_invariance(seed, a, b):
    m = np.random.default_rng(seed).random((8, 8))
    t, rough = otsu_threshold(m)
    t2, rough2 = otsu_threshold(a * m + b)
    assert np.array_equal(rough, rough2)
    assert t2 == pytest.approx(a * t + b, abs=1e-9)


@settings(max_examples=30)
@given(seeds)
def test_otsu_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 6))
    perm = rng.permutation(36)
    t, rough = otsu_threshold(m)
    t2, rough2 = otsu_threshold(m.ravel()[perm].reshape(6, 6))
    assert t == t2
    assert np.array_equal(rough.ravel()[perm], rough2.ravel())


def test_otsu_transformer():
    m = np.random.default_rng(2).random((8, 8))
    est = OtsuThresholder().fit(m)
    assert np.array_equal(est.transform(m), otsu_threshold(m)[1])
    assert est.get_params() == {"num_bins": 64}


# -- points -------------------------------------------------------------------------


def test_one_hot_gives_one_point():
    m = np.zeros((16, 16))
    m[5, 9] = 1.0
    assert sample_points(m) == [(5, 9)]


def test_stop_rule_drops_weak_second_peak():
    m = np.zeros((16, 16))
    m[2, 2], m[12, 12] = 1.0, 0.30
    assert sample_points(m) == [(2, 2)]
    m[12, 12] = 0.36
    assert sample_points(m) == [(2, 2), (12, 12)]


def test_cap_keeps_four_tallest():
    m = np.zeros((16, 16))
    peaks = {(1, 1): 1.0, (1, 14): 0.9, (14, 1): 0.8, (14, 14): 0.7, (8, 8): 0.6}
    for (r, c), v in peaks.items():
        m[r, c] = v
    pts = sample_points(m)
    assert pts == [(1, 1), (1, 14), (14, 1), (14, 14)]
    assert pts == greedy_replay(m)


@settings(max_examples=40)
@given(seeds)
def test_points_match_greedy_replay(seed):
    m = np.random.default_rng(seed).random((12, 12))
    pts = sample_points(m)
    assert pts == greedy_replay(m)
    r = exclusion_radius(m.shape)
    for (r1, c1), (r2, c2) in zip(pts, pts[1:]):
        assert (r1 - r2) ** 2 + (c1 - c2) ** 2 > r**2
    # each point is a local maximum of the map left after earlier suppressions
    rows, cols = np.indices(m.shape)
    remaining = m.copy()
    for pr, pc in pts:
        window = remaining[max(pr - 1, 0):pr + 2, max(pc - 1, 0):pc + 2]
        assert remaining[pr, pc] == window.max()
        remaining[(rows - pr) ** 2 + (cols - pc) ** 2 <= r**2] = -np.inf


def test_row_major_tie_break():
    m = np.zeros((16, 16))
    m[3, 10] = m[3, 2] = m[9, 1] = 1.0
    assert sample_points(m)[0] == (3, 2)


def test_exclusion_radius_default():
    assert exclusion_radius((16, 16)) == 2
    assert exclusion_radius((9, 4)) == 2


# -- refinement -----------------------------------------------------------------------


def test_rectangle_is_recovered():
    x0 = np.zeros((10, 10, 3))
    x0[2:6, 3:8] = 4.0
    rough = np.zeros((10, 10), bool)
    rough[4, 5] = True
    mask = refine_mask(x0, rough, [(4, 5)])
    expected = np.zeros((10, 10), bool)
    expected[2:6, 3:8] = True
    assert np.array_equal(mask, expected)


def test_refine_needs_points():
    with pytest.raises(ContractError):
        refine_mask(np.zeros((4, 4, 1)), np.zeros((4, 4), bool), [])


@settings(max_examples=40)
@given(seeds)
def test_grown_region_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((9, 9, 3))
    field_ = np.linalg.norm(x0, axis=-1)
    pts = [tuple(p) for p in rng.integers(0, 9, size=(3, 2))]
    tol = 0.2 * field_.std()
    expected = np.zeros((9, 9), bool)
    for p in pts:
        expected |= flood_fill(np.abs(field_ - field_[p]) <= tol, p)
    assert np.array_equal(grow_regions(field_, pts, tol), expected)

    rough = rng.random((9, 9)) > 0.5
    mask = refine_mask(x0, rough, pts)
    ring = expected.copy()
    for r, c in zip(*np.nonzero(expected)):
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            if 0 <= r + dr < 9 and 0 <= c + dc < 9:
                ring[r + dr, c + dc] = True
    assert np.array_equal(mask, expected | (rough & ring))
    for p in pts:
        assert mask[p]
    # every 4-connected component of the mask holds a point
    seen = np.zeros_like(mask)
    for r, c in zip(*np.nonzero(mask)):
        if not seen[r, c]:
            comp = flood_fill(mask, (r, c))
            seen |= comp
            assert any(comp[p] for p in pts)


def test_build_subject_mask_chain():
    sal = np.zeros((16, 16))
    sal[2:4, 2:4] = 1.0
    sal[12, 12] = 0.2
    x0 = np.zeros((16, 16, 2))
    x0[1:5, 1:5] = 3.0
    sm = build_subject_mask(sal, x0)
    assert sm.points == [(2, 2)]
    assert sm.rough[2:4, 2:4].all() and sm.rough.sum() == 4
    assert sm.refined[1:5, 1:5].all() and sm.refined.sum() == 16


# -- blending ---------------------------------------------------------------------------


def test_blend_endpoints_bitwise():
    rng = np.random.default_rng(3)
    zt, zs = rng.standard_normal((2, 5, 5, 3))
    assert np.array_equal(blend_latents(zt, zs, np.ones((5, 5), bool)), zt)
    assert np.array_equal(blend_latents(zt, zs, np.zeros((5, 5), bool)), zs)


@settings(max_examples=30)
@given(seeds)
def test_blend_cellwise_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    zt, zs = rng.standard_normal((2, 6, 4, 3))
    m = rng.random((6, 4)) > 0.5
    out = blend_latents(zt, zs, m)
    for r in range(6):
        for c in range(4):
            assert np.array_equal(out[r, c], zt[r, c] if m[r, c] else zs[r, c])
    assert np.array_equal(blend_latents(out, zs, m), out)


def test_blend_shape_errors():
    with pytest.raises(ContractError):
        blend_latents(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)), np.zeros((4, 4), bool))
    with pytest.raises(ContractError):
        blend_latents(np.zeros((4, 4, 2)), np.zeros((4, 4, 2)), np.zeros((3, 4), bool))


# -- export -------------------------------------------------------------------------------


def test_pgm_and_json_round_trips(tmp_path):
    m = np.zeros((5, 7), bool)
    m[1:3, 2:6] = True
    to_pgm(m, tmp_path / "m.pgm")
    img = read_pgm(tmp_path / "m.pgm")
    assert img.shape == (5, 7) and np.array_equal(img == 255, m)
    assert np.array_equal(mask_from_json(mask_to_json(m)), m)
    sal = np.linspace(0, 1, 35).reshape(5, 7)
    sal[0, 0] = 11 / 255  # a pixel byte equal to ASCII whitespace
    to_pgm(sal, tmp_path / "s.pgm")
    assert read_pgm(tmp_path / "s.pgm").shape == (5, 7)
