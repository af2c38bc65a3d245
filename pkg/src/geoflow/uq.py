"""Retrieval entropy, the Fano risk bound, and calibration / selective-prediction metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from scipy.special import logsumexp, softmax

from . import geometry as geo
from .errors import DataError
from .runtime import SolverConfig, _kind, sample

QUERY_SALT = 211
FANO_TOL = 1e-10
COVERAGES = tuple(np.round(np.arange(10, 0, -1) / 10.0, 1))


def shannon_entropy(probs, axis: int = -1) -> np.ndarray:
    """Entropy in nats with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise DataError("probabilities must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


@dataclass
class GalleryPosterior:
    probs: np.ndarray
    entropy: np.ndarray
    kappa: float
    n_samples: int


def gallery_posterior(samples, gallery, kappa: float = 100.0) -> GalleryPosterior:
    """Kernel-aggregate M endpoint samples onto an N-item gallery.

    ``samples`` is (M, d) or batched (Q, M, d); the score of item j is
    log mean_m exp(kappa g_j^T e_m), normalised by softmax over the gallery.
    """
    samples = np.asarray(samples, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise DataError("gallery must be a non-empty (N, d) array")
    if gallery.shape[0] < 2:
        raise DataError("gallery needs at least two items")
    if samples.shape[-2] < 1:
        raise DataError("need at least one posterior sample")
    if kappa < 0:
        raise DataError("kappa must be non-negative")
    M = samples.shape[-2]
    sims = kappa * np.einsum("...md,nd->...nm", samples, gallery)
    scores = logsumexp(sims, axis=-1) - math.log(M)
    probs = softmax(scores, axis=-1)
    return GalleryPosterior(probs, shannon_entropy(probs), kappa, M)


def _h2(r):
    r = np.asarray(r, dtype=np.float64)
    return shannon_entropy(np.stack([r, 1.0 - r], axis=-1))


def fano_forward(r, n: int) -> np.ndarray:
    """f(r) = H2(r) + r log(N - 1)."""
    if n < 2:
        raise DataError("gallery size must be at least 2")
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > (n - 1) / n + 1e-12):
        raise DataError(f"risk must lie in [0, {(n - 1) / n}]")
    return _h2(r) + r * math.log(n - 1)


@dataclass
class FanoBound:
    entropy_threshold: np.ndarray
    gallery_size: int
    risk_lower_bound: np.ndarray


def fano_invert(c, n: int, tol: float = FANO_TOL) -> np.ndarray:
    """Smallest MAP risk compatible with entropy ``c``, by bisection of the increasing f."""
    if n < 2:
        raise DataError("gallery size must be at least 2")
    c = np.asarray(c, dtype=np.float64)
    log_n = math.log(n)
    if np.any(c > log_n + 1e-9):
        raise DataError(f"entropy {float(np.max(c)):.6g} exceeds log N = {log_n:.6g}; bound unattainable")
    if np.any(c < -1e-12):
        raise DataError("entropy must be non-negative")
    target = np.clip(c, 0.0, log_n)
    lo = np.zeros_like(target)
    hi = np.full_like(target, (n - 1) / n)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = fano_forward(mid, n) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    # f is flat at its maximum, so resolve the log N end exactly instead of by bisection
    top = (n - 1) / n
    out = np.where(fano_forward(top, n) <= target, top, out)
    return np.where(target <= 0, 0.0, out)


def fano_bound(c, n: int) -> FanoBound:
    return FanoBound(np.asarray(c, dtype=np.float64), n, fano_invert(c, n))


def _check_pair(scores, correct):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(correct, dtype=bool)
    if s.ndim != 1 or s.shape != y.shape:
        raise DataError("scores and correctness must be equal-length vectors")
    if s.size == 0:
        raise DataError("empty input")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    return s, y


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    recall: np.ndarray
    spearman: float
    r_squared: float
    degenerate: bool

    def table_csv(self, header_comment=None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin", "recall", "count"))
        for i, (r, c) in enumerate(zip(self.recall, self.counts)):
            w.writerow((i, repr(float(r)), int(c)))
        return buf.getvalue()


def equal_frequency_bins(n: int, n_bins: int) -> np.ndarray:
    """Bin sizes for n items; the first n mod n_bins bins take one extra."""
    if not 1 <= n_bins <= n:
        raise DataError(f"need 1 <= n_bins <= n, got n_bins={n_bins}, n={n}")
    sizes = np.full(n_bins, n // n_bins)
    sizes[: n % n_bins] += 1
    return sizes


def calibration_report(scores, correct, n_bins: int = 10) -> CalibrationReport:
    s, y = _check_pair(scores, correct)
    order = np.argsort(s, kind="stable")
    sizes = equal_frequency_bins(s.size, n_bins)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    recall = np.array([y[order[a:b]].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    sorted_s = s[order]
    edges = np.concatenate([sorted_s[bounds[:-1]], [sorted_s[-1]]])
    idx = np.arange(n_bins, dtype=np.float64)
    degenerate = bool(np.all(s == s[0]) or np.all(recall == recall[0]) or n_bins < 2)
    if degenerate:
        rho = r2 = float("nan")
    else:
        rho = float(stats.spearmanr(idx, recall).statistic)
        r2 = float(stats.linregress(idx, 1.0 - recall).rvalue ** 2)
    return CalibrationReport(edges, sizes, recall, rho, r2, degenerate)


@dataclass
class SelectiveCurve:
    coverage: np.ndarray
    accuracy: np.ndarray
    ausac: float

    def table_csv(self, header_comment=None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("coverage", "accuracy"))
        for c, a in zip(self.coverage, self.accuracy):
            w.writerow((repr(float(c)), repr(float(a))))
        return buf.getvalue()

    def trend_spearman(self) -> float:
        """Spearman of coverage against accuracy; negative means accuracy rises as coverage shrinks."""
        if np.all(self.accuracy == self.accuracy[0]):
            return float("nan")
        return float(stats.spearmanr(self.coverage, self.accuracy).statistic)


def selective_curve(scores, correct, coverages=COVERAGES) -> SelectiveCurve:
    """Keep the round(c n) least uncertain samples at each coverage c (ties by input order)."""
    s, y = _check_pair(scores, correct)
    order = np.argsort(s, kind="stable")
    cov = np.asarray(coverages, dtype=np.float64)
    acc = np.empty_like(cov)
    for i, c in enumerate(cov):
        keep = max(1, int(math.floor(c * s.size + 0.5)))
        acc[i] = y[order[:keep]].mean()
    return SelectiveCurve(cov, acc, float(acc.mean()))


@dataclass
class RetrievalEntropy:
    entropy: np.ndarray
    probs: np.ndarray
    fano: FanoBound

    def table_csv(self, ranks=None, ids=None, header_comment=None) -> str:
        """Per-query rows; ``ranks`` is the retrieval rank of each query's true item, if known."""
        n = self.entropy.shape[0]
        ranks = [""] * n if ranks is None else [int(r) for r in ranks]
        ids = range(n) if ids is None else ids
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id", "H", "r_min", "rank_of_true_item"))
        for i, row_id in enumerate(ids):
            w.writerow((row_id, repr(float(self.entropy[i])), repr(float(self.fano.risk_lower_bound[i])), ranks[i]))
        return buf.getvalue()


def cosine_rank(queries, gallery, true_index) -> np.ndarray:
    """1-based rank of each query's true item under cosine similarity (ties resolved optimistically)."""
    sims = np.asarray(queries, dtype=np.float64) @ np.asarray(gallery, dtype=np.float64).T
    true_index = np.asarray(true_index)
    s_true = sims[np.arange(sims.shape[0]), true_index]
    return 1 + (sims > s_true[:, None]).sum(-1)


def posterior_samples(field, queries, direction, solver: SolverConfig = SolverConfig(), n_samples: int = 50,
                      guidance_scale=None, geometry=None) -> torch.Tensor:
    """Conditional endpoints per query: (Q, M, d) blocks from the transported stream."""
    kind = _kind(direction)
    if not kind.is_conditional:
        raise DataError("retrieval requires a conditional direction (i2t or t2i)")
    q = geo._t(queries)
    if q.ndim == 1:
        q = q.unsqueeze(0)
    Q, d = q.shape
    bases, noises = [], []
    for i in range(Q):
        rng = np.random.default_rng([solver.seed, QUERY_SALT, i])
        bases.append(geo.uniform_product(n_samples, d, rng))
        noises.append(geo.uniform_sphere(n_samples, d, rng))
    cond = q.repeat_interleave(n_samples, dim=0)
    z = sample(field, kind, cond, solver=solver, geometry=geometry, base=torch.cat(bases),
               noise=torch.cat(noises), guidance_scale=guidance_scale)
    block = z[:, d:] if kind.transports_text else z[:, :d]
    return block.reshape(Q, n_samples, d)


def retrieval_entropy_pipeline(field, queries, gallery, direction, solver: SolverConfig = SolverConfig(),
                               n_samples: int = 50, kappa: float = 100.0, guidance_scale=None,
                               geometry=None) -> RetrievalEntropy:
    """Per-query retrieval entropy H and its Fano risk lower bound."""
    ends = posterior_samples(field, queries, direction, solver, n_samples, guidance_scale, geometry)
    gallery = np.asarray(geo._t(gallery))
    post = gallery_posterior(ends.numpy(), gallery, kappa)
    ent = np.minimum(post.entropy, math.log(gallery.shape[0]))
    return RetrievalEntropy(ent, post.probs, fano_bound(ent, gallery.shape[0]))
