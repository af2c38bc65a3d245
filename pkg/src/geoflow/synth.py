"""Paired von Mises-Fisher mixtures on S^2 x S^2 with closed-form densities.

vMF sampling on S^2 uses the closed-form inverse CDF of w = mu^T x,

    w = 1 + log(u + (1 - u) exp(-2 kappa)) / kappa,    u ~ U(0, 1),

with w = 2u - 1 at kappa = 0, and an isotropic direction in the tangent
plane of mu for the remaining coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import logsumexp

from .errors import DataError

LOG_4PI = math.log(4.0 * math.pi)
TETRAHEDRON = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / math.sqrt(3.0)


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def vmf_log_normalizer(kappa) -> np.ndarray:
    """log C(kappa) = log kappa - log 4pi - log sinh kappa, with the kappa -> 0 limit -log 4pi."""
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("kappa must be non-negative")
    small = k < 1.0
    ks = np.where(small, k, 1.0)
    kl = np.where(small, 1.0, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ks == 0, 1.0, np.sinh(ks) / np.where(ks == 0, 1.0, ks))
    small_val = -np.log(ratio)
    large_val = np.log(kl) - kl - np.log1p(-np.exp(-2.0 * kl)) + math.log(2.0)
    return np.where(small, small_val, large_val) - LOG_4PI


def vmf_log_density(x, mu, kappa) -> np.ndarray:
    x, mu = np.asarray(x, dtype=np.float64), np.asarray(mu, dtype=np.float64)
    if x.shape[-1] != 3 or mu.shape[-1] != 3:
        raise DataError("closed-form vMF density is restricted to S^2 (d=3)")
    return vmf_log_normalizer(kappa) + np.asarray(kappa) * (x * mu).sum(-1)


def _tangent_basis(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal vectors spanning the tangent plane at each row of ``mu``."""
    helper = np.where(np.abs(mu[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    e1 = _unit(helper - (helper * mu).sum(-1, keepdims=True) * mu)
    e2 = np.cross(mu, e1)
    return e1, e2


def sample_vmf(mu, kappa, n: int | None, rng) -> np.ndarray:
    """Draw vMF samples on S^2; ``mu``/``kappa`` broadcast against ``n`` rows."""
    mu = _unit(mu)
    if n is not None:
        mu = np.broadcast_to(mu, (n, 3))
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), mu.shape[:-1])
    u = rng.random(mu.shape[:-1])
    phi = rng.random(mu.shape[:-1]) * 2.0 * math.pi
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(kappa > 0, kappa, 1.0)
        w = np.where(kappa > 0, 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * safe)) / safe, 2.0 * u - 1.0)
    w = np.clip(w, -1.0, 1.0)
    r = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    e1, e2 = _tangent_basis(mu)
    x = w[..., None] * mu + r[..., None] * (np.cos(phi)[..., None] * e1 + np.sin(phi)[..., None] * e2)
    return _unit(x)


@dataclass
class OracleLogs:
    log_joint: np.ndarray
    log_marg_i: np.ndarray
    log_marg_t: np.ndarray
    log_cond_t_given_i: np.ndarray
    log_cond_i_given_t: np.ndarray
    pmi: np.ndarray


@dataclass
class PairedMixture:
    """p(x, y) = sum_k w_k vMF(x; mu_k, kappa_img_k) vMF(y; nu_k, kappa_txt_k)."""

    weights: np.ndarray
    image_means: np.ndarray
    text_means: np.ndarray
    kappa_img: np.ndarray
    kappa_txt: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        K = self.weights.shape[0]
        self.image_means = _unit(self.image_means)
        self.text_means = _unit(self.text_means)
        self.kappa_img = np.broadcast_to(np.asarray(self.kappa_img, dtype=np.float64), (K,)).copy()
        self.kappa_txt = np.broadcast_to(np.asarray(self.kappa_txt, dtype=np.float64), (K,)).copy()
        if self.image_means.shape != (K, 3) or self.text_means.shape != (K, 3):
            raise DataError("component means must be (K, 3)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataError("mixture weights must form a simplex")
        if np.any(self.kappa_img < 0) or np.any(self.kappa_txt < 0):
            raise DataError("concentrations must be non-negative")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Return (pairs (n, 6), component ids (n,))."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        x = sample_vmf(self.image_means[comp], self.kappa_img[comp], None, rng)
        y = sample_vmf(self.text_means[comp], self.kappa_txt[comp], None, rng)
        return np.concatenate([x, y], axis=-1), comp

    def sampler(self):
        """Callable ``(rng, n) -> pairs`` for streaming training data."""
        return lambda rng, n: self.sample(n, rng)[0]

    def _img_terms(self, x):
        return vmf_log_density(np.asarray(x)[..., None, :], self.image_means, self.kappa_img)

    def _txt_terms(self, y):
        return vmf_log_density(np.asarray(y)[..., None, :], self.text_means, self.kappa_txt)

    def log_marg_img(self, x) -> np.ndarray:
        return logsumexp(np.log(self.weights) + self._img_terms(x), axis=-1)

    def log_marg_txt(self, y) -> np.ndarray:
        return logsumexp(np.log(self.weights) + self._txt_terms(y), axis=-1)

    def log_joint(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.float64)
        return logsumexp(np.log(self.weights) + self._img_terms(pairs[..., :3]) + self._txt_terms(pairs[..., 3:]), axis=-1)

    def oracle_logs(self, pairs) -> OracleLogs:
        pairs = np.asarray(pairs, dtype=np.float64)
        joint = self.log_joint(pairs)
        mi, mt = self.log_marg_img(pairs[..., :3]), self.log_marg_txt(pairs[..., 3:])
        return OracleLogs(joint, mi, mt, joint - mi, joint - mt, joint - mi - mt)

    def component_posterior(self, x) -> np.ndarray:
        """p(k | x) from the image block alone."""
        s = np.log(self.weights) + self._img_terms(x)
        return np.exp(s - logsumexp(s, axis=-1, keepdims=True))

    def conditional_text(self, x) -> "PairedMixture":
        """p(y | x) as a text-only mixture, stored with zero image concentration."""
        w = self.component_posterior(np.asarray(x, dtype=np.float64))
        return PairedMixture(w / w.sum(), self.image_means, self.text_means, 0.0, self.kappa_txt)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("weights", "image_means", "text_means", "kappa_img", "kappa_txt")}

    @classmethod
    def from_dict(cls, data: dict) -> "PairedMixture":
        try:
            return cls(**{k: np.asarray(data[k]) for k in
                          ("weights", "image_means", "text_means", "kappa_img", "kappa_txt")})
        except KeyError as exc:
            raise DataError(f"mixture spec missing {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def text_rotation(angle_deg: float = 20.0, axis=(1.0, 2.0, 3.0)) -> np.ndarray:
    return Rotation.from_rotvec(math.radians(angle_deg) * _unit(axis)).as_matrix()


def default_mixture(kappa: float = 20.0, angle_deg: float = 20.0) -> PairedMixture:
    """Four tetrahedral image modes; text modes are a fixed small rotation of them."""
    R = text_rotation(angle_deg)
    return PairedMixture(np.full(4, 0.25), TETRAHEDRON, TETRAHEDRON @ R.T, kappa, kappa)


def independent_mixture(kappa: float = 20.0, angle_deg: float = 20.0) -> PairedMixture:
    """Product of the default image and text marginals; the true PMI is identically zero."""
    base = default_mixture(kappa, angle_deg)
    K = base.n_components
    a, b = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    a, b = a.ravel(), b.ravel()
    return PairedMixture(base.weights[a] * base.weights[b], base.image_means[a], base.text_means[b],
                         base.kappa_img[a], base.kappa_txt[b])
