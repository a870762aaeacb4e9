"""Intensity GMM segmentation, region proposals and a per-pixel mixture background subtractor."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks

from udeep.imaging import ImageBuffer, PixelRect, gray_values

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-3
MAX_AUTO_K = 5
HIST_SMOOTH_BINS = 7
PEAK_MIN_FRACTION = 0.005
DEFAULT_MIN_AREA = 64

_LOG_2PI = np.log(2.0 * np.pi)


class DegenerateInput(UserWarning):
    """Fewer distinct values than requested components; K was reduced."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.weights) == len(self.means) == len(self.variances) >= 1):
            raise ValueError("weights, means and variances must share a length >= 1")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        if np.any(self.variances < VARIANCE_FLOOR):
            raise ValueError(f"variances below floor {VARIANCE_FLOOR}: {self.variances}")

    @property
    def k(self) -> int:
        return len(self.weights)


@dataclass
class GmmFit:
    params: GmmParams
    log_likelihood: float
    n_iter: int
    converged: bool
    requested_k: int
    # log-likelihood of the initial parameters followed by one entry per EM iteration
    history: list[float] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.params.k < self.requested_k


def _component_log_density(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """(n, K) matrix of log(pi_k) + log N(x; mu_k, var_k)."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    var = params.variances[None, :]
    with np.errstate(divide="ignore"):
        log_w = np.log(params.weights)[None, :]
    return log_w - 0.5 * (_LOG_2PI + np.log(var) + (x - params.means[None, :]) ** 2 / var)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def log_likelihood(intensities, params: GmmParams) -> float:
    x = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if x.size == 0:
        return 0.0
    return float(_logsumexp_rows(_component_log_density(x, params)).sum())


def responsibilities(intensities, params: GmmParams) -> np.ndarray:
    """E-step: (n, K) posterior component probabilities; rows sum to 1."""
    x = np.asarray(intensities, dtype=np.float64).reshape(-1)
    a = _component_log_density(x, params)
    r = np.exp(a - _logsumexp_rows(a)[:, None])
    return r / r.sum(axis=1, keepdims=True)


def _initial_params(x: np.ndarray, k: int, rng: np.random.Generator) -> GmmParams:
    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    # equal initial means would stay tied forever; nudge duplicates apart
    if len(np.unique(means)) < k:
        spread = max(float(x.std()), 1.0)
        means = means + rng.uniform(-0.01, 0.01, size=k) * spread
    var = max(float(x.var()), VARIANCE_FLOOR)
    return GmmParams(np.full(k, 1.0 / k), means, np.full(k, var))


def _m_step(x: np.ndarray, r: np.ndarray, prev: GmmParams) -> GmmParams:
    """Closed-form updates; ``r`` rows are already scaled by each value's multiplicity."""
    nk = r.sum(axis=0)
    weights = nk / nk.sum()
    weights = weights / weights.sum()
    safe = nk > 0
    means = prev.means.copy()
    means[safe] = (r[:, safe] * x[:, None]).sum(axis=0) / nk[safe]
    variances = prev.variances.copy()
    diff2 = (x[:, None] - means[None, :]) ** 2
    variances[safe] = (r[:, safe] * diff2[:, safe]).sum(axis=0) / nk[safe]
    variances = np.maximum(variances, VARIANCE_FLOOR)
    return GmmParams(weights, means, variances)


def _weighted_ll(values: np.ndarray, counts: np.ndarray, params: GmmParams) -> float:
    return float((counts * _logsumexp_rows(_component_log_density(values, params))).sum())


def fit_gmm(intensities, k: int, max_iter: int = 200, tol: float = 1e-6, seed: int = 0) -> GmmFit:
    """Fit a 1-D Gaussian mixture by EM.

    Means start at evenly spaced quantiles, variances at the sample variance
    and weights at 1/K; ``seed`` only breaks ties between coincident starting
    means. Iteration stops once the log-likelihood gain drops below ``tol``.
    If the data has fewer distinct values than ``k``, K is reduced to that
    count and a :class:`DegenerateInput` warning is issued.
    """
    x = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if x.size < k:
        raise ValueError(f"need at least k={k} samples, got {x.size}")
    requested = k
    distinct = len(np.unique(x))
    if distinct < k:
        warnings.warn(f"only {distinct} distinct values; fitting K={distinct} instead of {k}", DegenerateInput, stacklevel=2)
        k = distinct
    rng = np.random.default_rng(seed)
    params = _initial_params(x, k, rng)
    # 8-bit images repeat values heavily; iterate over distinct values weighted by multiplicity
    values, counts = np.unique(x, return_counts=True)
    counts = counts.astype(np.float64)
    ll = _weighted_ll(values, counts, params)
    history = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        r = responsibilities(values, params) * counts[:, None]
        params = _m_step(values, r, params)
        new_ll = _weighted_ll(values, counts, params)
        history.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if gain < tol:
            converged = True
            break
    return GmmFit(params, ll, n_iter, converged, requested, history)


def smoothed_histogram(img: ImageBuffer) -> np.ndarray:
    hist = np.bincount(gray_values(img).reshape(-1), minlength=256).astype(np.float64)
    kernel = np.full(HIST_SMOOTH_BINS, 1.0 / HIST_SMOOTH_BINS)
    return np.convolve(hist, kernel, mode="same")


def count_histogram_peaks(smoothed: np.ndarray, min_prominence: float) -> int:
    """Maxima whose prominence exceeds ``min_prominence``; flat tops count once.

    The histogram is zero-padded so modes at intensity 0 or 255 still count.
    """
    padded = np.r_[0.0, smoothed, 0.0]
    _, props = find_peaks(padded, prominence=min_prominence)
    return int(np.count_nonzero(props["prominences"] > min_prominence))


def estimate_component_count(img: ImageBuffer) -> int:
    n_pixels = img.width * img.height
    peaks = count_histogram_peaks(smoothed_histogram(img), PEAK_MIN_FRACTION * n_pixels)
    return int(min(max(peaks, 1), MAX_AUTO_K))


@dataclass(frozen=True)
class PixelLabelMap:
    labels: np.ndarray  # (h, w) ints in [0, k)
    k: int

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def label_pixels(img: ImageBuffer, params: GmmParams) -> PixelLabelMap:
    """Most probable component for each pixel's luma; ties go to the lowest index."""
    table = np.argmax(_component_log_density(np.arange(256), params), axis=1)
    return PixelLabelMap(table[gray_values(img)].astype(np.int32), params.k)


def background_label(labels: PixelLabelMap) -> int:
    """Most populous label (lowest index on ties), treated as static background."""
    return int(np.argmax(np.bincount(labels.labels.reshape(-1), minlength=labels.k)))


@dataclass(frozen=True)
class RegionProposal:
    bbox: PixelRect
    area: int
    label: int

    def to_dict(self) -> dict:
        b = self.bbox
        return {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "area": self.area, "label": self.label}


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def extract_regions(
    labels: PixelLabelMap, min_area: int = DEFAULT_MIN_AREA, exclude_label: int | None = None
) -> list[RegionProposal]:
    """8-connected components of each label, largest first."""
    out = []
    for lab in range(labels.k):
        if lab == exclude_label:
            continue
        mask = labels.labels == lab
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
        if n == 0:
            continue
        areas = np.bincount(comp.reshape(-1), minlength=n + 1)
        for idx, sl in enumerate(ndimage.find_objects(comp), start=1):
            if areas[idx] < min_area:
                continue
            ys, xs = sl
            rect = PixelRect(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
            out.append(RegionProposal(rect, int(areas[idx]), lab))
    out.sort(key=lambda r: (-r.area, r.bbox.y, r.bbox.x, r.label))
    return out


@dataclass
class BackgroundModel:
    """Per-pixel mixture of up to ``max_components`` Gaussians over luma.

    Slots beyond ``n_active`` are unused and carry zero weight.
    """

    weights: np.ndarray  # (h, w, M)
    means: np.ndarray
    variances: np.ndarray
    n_active: np.ndarray  # (h, w)
    alpha: float = 0.05
    match_sigmas: float = 2.5
    background_ratio: float = 0.6
    init_variance: float = 225.0
    variance_floor: float = 4.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[:2]

    @property
    def max_components(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def from_frame(cls, frame: ImageBuffer, max_components: int = 3, **kwargs) -> BackgroundModel:
        g = gray_values(frame).astype(np.float64)
        h, w = g.shape
        init_var = kwargs.get("init_variance", cls.init_variance)
        weights = np.zeros((h, w, max_components))
        weights[..., 0] = 1.0
        means = np.zeros((h, w, max_components))
        means[..., 0] = g
        variances = np.full((h, w, max_components), float(init_var))
        return cls(weights, means, variances, np.ones((h, w), dtype=np.int64), **kwargs)


def background_update(model: BackgroundModel | None, frame: ImageBuffer, **kwargs) -> tuple[BackgroundModel, np.ndarray]:
    """Apply one frame; returns the updated model and a boolean foreground mask.

    Passing ``model=None`` seeds a fresh model from ``frame`` (all background).
    The input model is not modified.
    """
    if model is None:
        m = BackgroundModel.from_frame(frame, **kwargs)
        return m, np.zeros(m.shape, dtype=bool)
    if (frame.height, frame.width) != model.shape:
        raise DimensionMismatch(f"frame is {frame.width}x{frame.height}, model is {model.shape[1]}x{model.shape[0]}")

    g = gray_values(frame).astype(np.float64)[..., None]
    M = model.max_components
    w = model.weights.copy()
    mu = model.means.copy()
    var = model.variances.copy()
    n_active = model.n_active.copy()
    slot = np.arange(M)[None, None, :]
    active = slot < n_active[..., None]

    # first matching component in descending-weight order
    close = active & ((g - mu) ** 2 < (model.match_sigmas**2) * var)
    order = np.argsort(-np.where(active, w, -1.0), axis=2, kind="stable")
    close_sorted = np.take_along_axis(close, order, axis=2)
    any_match = close_sorted.any(axis=2)
    first = np.argmax(close_sorted, axis=2)
    matched_idx = np.take_along_axis(order, first[..., None], axis=2)[..., 0]
    matched = (slot == matched_idx[..., None]) & any_match[..., None]

    a = model.alpha
    w = np.where(active, (1 - a) * w + a * matched, 0.0)
    mu = np.where(matched, (1 - a) * mu + a * g, mu)
    var = np.where(matched, np.maximum((1 - a) * var + a * (g - mu) ** 2, model.variance_floor), var)

    # unmatched pixels: append a component, or replace the weakest one
    miss = ~any_match
    grow = miss & (n_active < M)
    weakest = np.argmin(np.where(active, w, np.inf), axis=2)
    new_idx = np.where(grow, n_active, weakest)
    n_active = np.where(grow, n_active + 1, n_active)
    new_slot = (slot == new_idx[..., None]) & miss[..., None]
    w = np.where(new_slot, a, w)
    mu = np.where(new_slot, g, mu)
    var = np.where(new_slot, model.init_variance, var)
    w = w / w.sum(axis=2, keepdims=True)

    # background = shortest descending-weight prefix whose cumulative weight exceeds the ratio
    order = np.argsort(-w, axis=2, kind="stable")
    w_sorted = np.take_along_axis(w, order, axis=2)
    before = np.cumsum(w_sorted, axis=2) - w_sorted
    in_bg_sorted = before < model.background_ratio
    in_bg = np.zeros_like(in_bg_sorted)
    np.put_along_axis(in_bg, order, in_bg_sorted, axis=2)
    background = (matched & in_bg).any(axis=2)

    updated = BackgroundModel(
        w, mu, var, n_active, model.alpha, model.match_sigmas, model.background_ratio,
        model.init_variance, model.variance_floor,
    )
    return updated, ~background
