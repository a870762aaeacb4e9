import math
import warnings
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udeep.imaging import ImageBuffer, gray_values
from udeep.segmentation import (
    BackgroundModel,
    DegenerateInput,
    DimensionMismatch,
    GmmParams,
    PixelLabelMap,
    background_label,
    background_update,
    estimate_component_count,
    extract_regions,
    fit_gmm,
    label_pixels,
    log_likelihood,
    responsibilities,
    smoothed_histogram,
)


def gray_image(values: np.ndarray) -> ImageBuffer:
    v = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return ImageBuffer(np.repeat(v[..., None], 3, axis=2))


def mixture_image(means, n_side=200, sd=10.0, seed=0):
    rng = np.random.default_rng(seed)
    n = n_side * n_side
    parts = [rng.normal(m, sd, n // len(means)) for m in means]
    vals = np.concatenate(parts)
    vals = np.concatenate([vals, rng.normal(means[0], sd, n - vals.size)])
    return gray_image(vals.reshape(n_side, n_side))


def literal_peak_count(img: ImageBuffer) -> int:
    """Hand oracle: 7-bin moving average, then strict/plateau local maxima above 0.5% of pixels."""
    g = gray_values(img).reshape(-1)
    hist = [0] * 256
    for v in g.tolist():
        hist[v] += 1
    sm = []
    for i in range(256):
        window = [hist[j] for j in range(i - 3, i + 4) if 0 <= j < 256]
        sm.append(sum(window) / 7)
    thr = 0.005 * g.size
    peaks = 0
    i = 0
    while i < 256:
        j = i
        while j + 1 < 256 and sm[j + 1] == sm[i]:
            j += 1
        left = sm[i - 1] if i > 0 else 0.0
        right = sm[j + 1] if j < 255 else 0.0
        if sm[i] > left and sm[i] > right and sm[i] > thr:
            peaks += 1
        i = j + 1
    return peaks


# --- component count --------------------------------------------------------

def test_constant_image_has_one_component():
    assert estimate_component_count(ImageBuffer.filled(64, 64, (90, 90, 90))) == 1


def test_bimodal_image_has_two_components():
    img = mixture_image([60, 190])
    assert literal_peak_count(img) == 2
    assert estimate_component_count(img) == 2


def test_six_modes_clamped_to_five():
    img = mixture_image([20, 60, 100, 140, 180, 220], sd=4.0)
    assert literal_peak_count(img) == 6
    assert estimate_component_count(img) == 5


def test_edge_modes_count():
    vals = np.zeros((40, 40))
    vals[:, 20:] = 255
    assert estimate_component_count(gray_image(vals)) == 2


def test_bimodal_noise_robustness():
    # small noisy histograms have jagged flanks; prominence keeps the count at 2
    hits = sum(estimate_component_count(mixture_image([60, 190], n_side=64, seed=s)) == 2 for s in range(30))
    assert hits >= 28


def test_smoothed_histogram_preserves_mass_away_from_edges():
    img = mixture_image([100, 150], n_side=50)
    assert smoothed_histogram(img).sum() == pytest.approx(2500)


# --- EM ---------------------------------------------------------------------

def test_k1_is_closed_form():
    x = np.random.default_rng(4).normal(120, 7, 500)
    fit = fit_gmm(x, 1)
    assert fit.params.weights.tolist() == [1.0]
    assert fit.params.means[0] == pytest.approx(x.mean(), abs=1e-9)
    assert fit.params.variances[0] == pytest.approx(x.var(), rel=1e-9)


def two_component_sample(seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(50, 10, 5000), rng.normal(200, 10, 5000)])


def test_two_components_recovered():
    fit = fit_gmm(two_component_sample(), 2)
    order = np.argsort(fit.params.means)
    means = fit.params.means[order]
    weights = fit.params.weights[order]
    assert abs(means[0] - 50) <= 3 and abs(means[1] - 200) <= 3
    assert np.all(np.abs(weights - 0.5) <= 0.05)
    assert fit.converged


def naive_em(x, k, iters):
    """Per-sample textbook EM in plain Python, same quantile start."""
    x = [float(v) for v in x]
    n = len(x)
    mean = sum(x) / n
    var0 = max(sum((v - mean) ** 2 for v in x) / n, 1e-3)
    means = [float(q) for q in np.quantile(x, (np.arange(k) + 0.5) / k)]
    variances = [var0] * k
    weights = [1.0 / k] * k
    for _ in range(iters):
        resp = []
        for v in x:
            p = [w * math.exp(-(v - m) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)
                 for w, m, s2 in zip(weights, means, variances)]
            tot = sum(p)
            resp.append([q / tot for q in p])
        nk = [sum(r[j] for r in resp) for j in range(k)]
        weights = [c / n for c in nk]
        means = [sum(r[j] * v for r, v in zip(resp, x)) / nk[j] for j in range(k)]
        variances = [max(sum(r[j] * (v - means[j]) ** 2 for r, v in zip(resp, x)) / nk[j], 1e-3) for j in range(k)]
    return weights, means, variances


def test_em_matches_naive_oracle():
    x = np.rint(np.random.default_rng(9).normal([40, 90, 160], 12, (60, 3)).reshape(-1))
    fit = fit_gmm(x, 3, max_iter=6, tol=-np.inf)
    w, m, v = naive_em(x, 3, 6)
    assert fit.n_iter == 6
    assert np.allclose(fit.params.weights, w, rtol=1e-9)
    assert np.allclose(fit.params.means, m, rtol=1e-9)
    assert np.allclose(fit.params.variances, v, rtol=1e-9)


def test_identical_input_degenerates_to_k1():
    with pytest.warns(DegenerateInput):
        fit = fit_gmm([128.0] * 50, 2)
    assert fit.params.k == 1 and fit.requested_k == 2 and fit.degenerate


def test_rejects_too_few_samples():
    with pytest.raises(ValueError):
        fit_gmm([1.0], 2)


def test_log_likelihood_examples():
    p = GmmParams(np.array([1.0]), np.array([3.0]), np.array([1.0]))
    single = log_likelihood([3.0], p)
    assert single == pytest.approx(math.log(1 / math.sqrt(2 * math.pi)), abs=1e-12)
    assert single == pytest.approx(-0.9189, abs=1e-4)
    assert log_likelihood([], p) == 0.0
    assert log_likelihood([3.0, 3.0], p) == 2 * single


def test_log_likelihood_matches_direct_sum():
    p = GmmParams(np.array([0.3, 0.7]), np.array([10.0, 40.0]), np.array([4.0, 25.0]))
    x = [0.0, 12.5, 30.0, 255.0 / 4]

    def pdf(v, m, s2):
        return math.exp(-(v - m) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)

    direct = sum(math.log(0.3 * pdf(v, 10, 4) + 0.7 * pdf(v, 40, 25)) for v in x)
    assert log_likelihood(x, p) == pytest.approx(direct, rel=1e-12)


fuzz_data = st.tuples(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(20, 400))


def fuzzed_sample(seed, k, n):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, 255, k)
    return np.clip(np.rint(rng.normal(centers[rng.integers(0, k, n)], rng.uniform(1, 30))), 0, 255)


@settings(max_examples=40, deadline=None)
@given(fuzz_data)
def test_em_invariants(case):
    seed, k, n = case
    x = fuzzed_sample(seed, k, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInput)
        fit = fit_gmm(x, k, seed=seed)
    hist = np.array(fit.history)
    assert np.all(np.diff(hist) >= -1e-9)
    assert abs(fit.params.weights.sum() - 1) <= 1e-12
    r = responsibilities(x, fit.params)
    assert np.all(np.abs(r.sum(axis=1) - 1) <= 1e-12)
    labels = label_pixels(gray_image(x.reshape(1, -1)), fit.params)
    assert labels.labels.min() >= 0 and labels.labels.max() < fit.params.k


def test_params_validation():
    with pytest.raises(ValueError):
        GmmParams(np.array([0.5, 0.4]), np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        GmmParams(np.array([1.0]), np.array([1.0]), np.array([0.0]))


# --- labelling ----------------------------------------------------------------

def test_k1_labels_everything_zero():
    img = mixture_image([60, 190], n_side=32)
    labels = label_pixels(img, GmmParams(np.array([1.0]), np.array([100.0]), np.array([50.0])))
    assert labels.labels.max() == 0 and labels.labels.shape == (32, 32)


def test_bimodal_labelling_accuracy():
    rng = np.random.default_rng(0)
    dark = np.clip(np.rint(rng.normal(50, 10, (50, 100))), 0, 255)
    bright = np.clip(np.rint(rng.normal(200, 10, (50, 100))), 0, 255)
    img = gray_image(np.vstack([dark, bright]))
    fit = fit_gmm(gray_values(img).reshape(-1), 2)
    lab = label_pixels(img, fit.params).labels
    top, bottom = lab[:50], lab[50:]
    top_major = np.bincount(top.reshape(-1)).argmax()
    bottom_major = np.bincount(bottom.reshape(-1)).argmax()
    assert top_major != bottom_major
    assert np.mean(top == top_major) >= 0.99
    assert np.mean(bottom == bottom_major) >= 0.99


def test_tie_goes_to_lower_index():
    p = GmmParams(np.array([0.5, 0.5]), np.array([100.0, 110.0]), np.array([9.0, 9.0]))
    assert label_pixels(gray_image(np.array([[105.0]])), p).labels[0, 0] == 0
    assert label_pixels(gray_image(np.array([[106.0]])), p).labels[0, 0] == 1


def test_background_label_is_most_populous():
    labels = np.zeros((4, 4), dtype=np.int32)
    labels[:1] = 1
    assert background_label(PixelLabelMap(labels, 2)) == 0


# --- regions ------------------------------------------------------------------

def flood_fill_components(labels: np.ndarray):
    """BFS oracle for 8-connected components: returns {(label, x, y, w, h, area)}."""
    h, w = labels.shape
    seen = np.zeros_like(labels, dtype=bool)
    out = set()
    for sy in range(h):
        for sx in range(w):
            if seen[sy, sx]:
                continue
            lab = labels[sy, sx]
            q = deque([(sy, sx)])
            seen[sy, sx] = True
            ys, xs = [], []
            while q:
                y, x = q.popleft()
                ys.append(y)
                xs.append(x)
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and labels[ny, nx] == lab:
                            seen[ny, nx] = True
                            q.append((ny, nx))
            out.add((int(lab), min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1, len(xs)))
    return out


def as_tuples(props):
    return {(p.label, p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h, p.area) for p in props}


def square_map(squares, size=40):
    lab = np.zeros((size, size), dtype=np.int32)
    for x, y, s in squares:
        lab[y:y + s, x:x + s] = 1
    return PixelLabelMap(lab, 2)


def test_single_square_from_k2():
    vals = np.zeros((40, 40))
    vals[5:15, 12:22] = 255
    img = gray_image(vals)
    fit = fit_gmm(gray_values(img).reshape(-1), 2)
    labels = label_pixels(img, fit.params)
    props = extract_regions(labels, min_area=1, exclude_label=background_label(labels))
    assert len(props) == 1
    b = props[0].bbox
    assert (b.x, b.y, b.w, b.h) == (12, 5, 10, 10) and props[0].area == 100


def test_disjoint_squares_give_two():
    props = extract_regions(square_map([(2, 2, 8), (20, 20, 8)]), min_area=1, exclude_label=0)
    assert len(props) == 2


def test_corner_touching_squares_merge():
    labels = square_map([(2, 2, 8), (10, 10, 8)])
    props = extract_regions(labels, min_area=1, exclude_label=0)
    assert len(props) == 1
    assert as_tuples(props) == {t for t in flood_fill_components(labels.labels) if t[0] == 1}


def test_min_area_and_order():
    props = extract_regions(square_map([(0, 0, 3), (10, 10, 9), (25, 25, 12)]), min_area=64, exclude_label=0)
    assert [p.area for p in props] == [144, 81]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 20), st.integers(1, 20))
def test_regions_match_flood_fill(seed, k, h, w):
    lab = np.random.default_rng(seed).integers(0, k, (h, w)).astype(np.int32)
    labels = PixelLabelMap(lab, k)
    props = extract_regions(labels, min_area=1)
    assert as_tuples(props) == flood_fill_components(lab)
    for p in props:
        assert p.bbox.x2 <= w and p.bbox.y2 <= h
    for c in range(k):
        assert sum(p.area for p in props if p.label == c) <= w * h
    assert [p.area for p in props] == sorted((p.area for p in props), reverse=True)


# --- temporal background ------------------------------------------------------

def scalar_update(state, x, alpha=0.05, thr=2.5, ratio=0.6, init_var=225.0, floor=4.0, M=3):
    """Per-pixel reference for one update on ``state`` (list of [w, mu, var]); returns the foreground flag."""
    order = sorted(range(len(state)), key=lambda i: -state[i][0])
    hit = next((i for i in order if (x - state[i][1]) ** 2 < thr * thr * state[i][2]), None)
    for i, comp in enumerate(state):
        comp[0] = (1 - alpha) * comp[0] + (alpha if i == hit else 0.0)
    if hit is not None:
        c = state[hit]
        c[1] = (1 - alpha) * c[1] + alpha * x
        c[2] = max((1 - alpha) * c[2] + alpha * (x - c[1]) ** 2, floor)
    elif len(state) < M:
        state.append([alpha, float(x), init_var])
    else:
        weakest = min(range(len(state)), key=lambda i: state[i][0])
        state[weakest] = [alpha, float(x), init_var]
    total = sum(c[0] for c in state)
    for c in state:
        c[0] /= total
    if hit is None:
        return True
    acc = 0.0
    for i in sorted(range(len(state)), key=lambda i: -state[i][0]):
        if acc >= ratio:
            return True
        if i == hit:
            return False
        acc += state[i][0]
    return True


def test_first_frame_is_all_background():
    model, mask = background_update(None, ImageBuffer.filled(8, 6, (40, 40, 40)))
    assert mask.shape == (6, 8) and not mask.any()
    assert np.allclose(model.weights.sum(axis=2), 1)


def test_square_after_static_background():
    bg = ImageBuffer.filled(32, 24, (30, 30, 30))
    model, _ = background_update(None, bg)
    for _ in range(100):
        model, mask = background_update(model, bg)
        assert not mask.any()
    px = bg.pixels.copy()
    px[8:16, 10:20] = 220
    model, mask = background_update(model, ImageBuffer(px))
    expected = np.zeros((24, 32), dtype=bool)
    expected[8:16, 10:20] = True
    assert np.array_equal(mask, expected)
    assert np.all(np.abs(model.weights.sum(axis=2) - 1) <= 1e-9)


def test_dimension_mismatch():
    model, _ = background_update(None, ImageBuffer.filled(8, 8))
    with pytest.raises(DimensionMismatch):
        background_update(model, ImageBuffer.filled(8, 9))


def test_update_does_not_mutate_input():
    model, _ = background_update(None, ImageBuffer.filled(4, 4, (10, 10, 10)))
    before = model.weights.copy()
    background_update(model, ImageBuffer.filled(4, 4, (200, 200, 200)))
    assert np.array_equal(model.weights, before)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=2, max_size=40), st.integers(0, 255))
def test_vectorized_update_matches_scalar_reference(seq, other):
    # two pixels: one follows the sequence, the other a constant
    frames = [ImageBuffer(np.array([[[v] * 3, [other] * 3]], dtype=np.uint8)) for v in seq]
    model, mask = background_update(None, frames[0])
    states = [[[1.0, float(seq[0]), 225.0]], [[1.0, float(other), 225.0]]]
    for f, v in zip(frames[1:], seq[1:]):
        model, mask = background_update(model, f)
        expected = [scalar_update(states[0], float(v)), scalar_update(states[1], float(other))]
        assert mask[0].tolist() == expected
        for p, st_ in enumerate(states):
            n = int(model.n_active[0, p])
            assert n == len(st_)
            got = sorted(zip(model.weights[0, p, :n], model.means[0, p, :n], model.variances[0, p, :n]))
            want = sorted(tuple(c) for c in st_)
            assert np.allclose(got, want, rtol=1e-9, atol=1e-12)
        assert np.all(np.abs(model.weights.sum(axis=2) - 1) <= 1e-9)


def test_background_model_defaults():
    m = BackgroundModel.from_frame(ImageBuffer.filled(2, 2))
    assert (m.max_components, m.alpha, m.match_sigmas, m.background_ratio) == (3, 0.05, 2.5, 0.6)
