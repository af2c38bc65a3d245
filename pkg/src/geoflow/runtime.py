"""ODE sampling, reverse-time log-densities and the chain-rule decomposition."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor

from . import geometry as geo
from .errors import ConfigError, DataError, NumericalError
from .net import VelocityNet, input_vjp, predict

PROBE_KINDS = ("rademacher", "gaussian")
SAMPLE_SALT = 101
NOISE_SALT = 103
MASK_SALT = {geo.MaskKind.JOINT: 0, geo.MaskKind.IMAGE_TO_TEXT: 1, geo.MaskKind.TEXT_TO_IMAGE: 2}
SCORE_COLUMNS = ("id", "joint_nll", "cond_i2t", "cond_t2i", "marg_i", "marg_t", "pmi", "epistemic_sum",
                 "n_steps", "K", "seed")


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 50
    n_probes: int = 1
    probe_kind: str = "rademacher"
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1")
        if self.n_probes < 1:
            raise ConfigError("n_probes must be at least 1")
        if self.probe_kind not in PROBE_KINDS:
            raise ConfigError(f"probe_kind must be one of {PROBE_KINDS}")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be non-negative")

    def replace(self, **kw) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **kw})


class Field:
    """Tangent-projected velocity field from a VelocityNet or any callable ``f(z, t_img, t_txt, mask)``."""

    def __init__(self, source, geometry=None):
        self.source = source
        self.geometry = geometry or geo.SphereGeometry()

    def __call__(self, z, t_img, t_txt, mask) -> Tensor:
        if isinstance(self.source, VelocityNet):
            return predict(self.source, z, t_img, t_txt, mask, self.geometry)
        return self.geometry.project(z, self.source(z, t_img, t_txt, mask))

    def vjp(self, z, t_img, t_txt, mask, cotangent) -> Tensor:
        if isinstance(self.source, VelocityNet):
            return input_vjp(self.source, z, t_img, t_txt, mask, cotangent, project=True, geometry=self.geometry)
        z = geo._t(z).detach().requires_grad_(True)
        with torch.enable_grad():
            out = self(z, t_img, t_txt, mask)
            (g,) = torch.autograd.grad(out, z, grad_outputs=geo._t(cotangent), allow_unused=True)
        return torch.zeros_like(z) if g is None else g.detach()


def as_field(source, geometry=None) -> Field:
    if isinstance(source, Field):
        return source
    return Field(source, geometry)


def _kind(mask) -> geo.MaskKind:
    return mask.kind if isinstance(mask, geo.FlowMask) else geo.MaskKind.parse(mask)


def _stream_times(kind: geo.MaskKind, t: float) -> tuple[float, float]:
    return (t if kind.transports_image else 0.0), (t if kind.transports_text else 0.0)


def _embed_conditioner(z: Tensor, kind: geo.MaskKind, conditioner) -> Tensor:
    """Write the conditioner into the non-transported block of ``z``."""
    d = z.shape[-1] // 2
    c = torch.broadcast_to(geo._t(conditioner), (z.shape[0], d))
    if not kind.transports_image:
        return torch.cat([c, z[:, d:]], dim=-1)
    return torch.cat([z[:, :d], c], dim=-1)


def _replace_conditioner(z: Tensor, kind: geo.MaskKind, block: Tensor) -> Tensor:
    return _embed_conditioner(z, kind, block)


def guided_velocity(field, z, t_img, t_txt, mask, noise_conditioner, guidance_scale: float, geometry=None) -> Tensor:
    """v_c + lambda (v_c - v_u), with v_u evaluated on the noise-substituted conditioner."""
    if guidance_scale < 0:
        raise ConfigError("guidance_scale must be non-negative")
    kind = _kind(mask)
    if not kind.is_conditional:
        raise ConfigError("guidance requires a conditional mask")
    field = as_field(field, geometry)
    z = geo._t(z)
    v_c = field(z, t_img, t_txt, kind)
    if guidance_scale == 0:
        return v_c
    v_u = field(_replace_conditioner(z, kind, geo._t(noise_conditioner)), t_img, t_txt, kind)
    return v_c + guidance_scale * (v_c - v_u)


def sample(field, mask, conditioner=None, n_samples: int = 1, solver: SolverConfig = SolverConfig(),
           geometry=None, rng=None, base=None, guidance_scale=None, noise=None) -> Tensor:
    """Forward Euler from uniform noise to t=1, reprojecting after every step.

    With guidance, the unconditional branch sees ``noise`` (one uniform block
    per sample, fixed along the trajectory) in place of the conditioner.
    """
    field = as_field(field, geometry)
    geometry = field.geometry
    kind = _kind(mask)
    if kind.is_conditional != (conditioner is not None):
        raise DataError("a conditioner is required exactly when the mask is conditional")
    lam = solver.guidance_scale if guidance_scale is None else guidance_scale
    rng = rng if rng is not None else np.random.default_rng([solver.seed, SAMPLE_SALT])
    if base is None:
        d = getattr(field.source, "embed_dim", None)
        if d is None:
            if conditioner is None:
                raise DataError("pass ``base`` when the field does not expose embed_dim")
            d = geo._t(conditioner).shape[-1]
        base = geo.uniform_product(n_samples, d, rng)
    z = geo._t(base).clone()
    d = z.shape[-1] // 2
    if kind.is_conditional:
        z = _embed_conditioner(z, kind, conditioner)
        if lam > 0 and noise is None:
            noise = geo.uniform_sphere(z.shape[0], d, rng)
    if lam == 0 or not kind.is_conditional:
        noise = None
    z_ref = z.clone()
    h = 1.0 / solver.n_steps
    with torch.no_grad():
        for k in range(solver.n_steps):
            ti, tt = _stream_times(kind, k * h)
            if noise is not None:
                v = guided_velocity(field, z, ti, tt, kind, noise, lam)
            else:
                v = field(z, ti, tt, kind)
            z = geometry.retract(z + h * v, kind, z_ref if kind.is_conditional else None)
            if not torch.isfinite(z).all():
                raise NumericalError(f"non-finite sampler state at step {k}")
    return z


def _draw_probes(shape, kind: str, rng) -> np.ndarray:
    if kind == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal(shape)


def divergence_estimate(field, z, t_img, t_txt, mask, n_probes: int = 1, probe_kind: str = "rademacher",
                        rng=None, geometry=None, probes=None) -> Tensor:
    """Per-row tangent-projected Hutchinson estimate of the divergence of the field.

    ``probes`` may supply raw draws of shape (K, batch, 2d); otherwise they are
    drawn from ``rng``. For conditional masks the probes live on the
    transported block only.
    """
    field = as_field(field, geometry)
    z = geo._t(z)
    kind = _kind(mask)
    if probes is None:
        probes = _draw_probes((n_probes,) + tuple(z.shape), probe_kind, rng)
    probes = geo._t(probes)
    m = geo.mask_vector(kind, z)
    total = torch.zeros(z.shape[:-1], dtype=z.dtype)
    for eps in probes:
        e = field.geometry.project(z, m * eps)
        g = field.vjp(z, t_img, t_txt, kind, e)
        total = total + (e * g).sum(-1)
    return total / probes.shape[0]


def base_log_density(mask, d: int) -> float:
    n_spheres = 2 if _kind(mask) == geo.MaskKind.JOINT else 1
    return -n_spheres * geo.log_sphere_volume(d)


@dataclass
class DensityEstimate:
    log_density: np.ndarray
    divergence_integral: np.ndarray
    base_log_density: float
    solver: SolverConfig


def probe_stream(solver: SolverConfig, mask, index: int, d: int) -> np.ndarray:
    """All raw probes for one sample: (n_steps, K, 2d), seeded by (seed, mask, sample index, probe slot).

    Each probe slot has its own stream, so the probes of a K-probe solve are
    the first K slots of any larger solve with the same seed.
    """
    slots = [_draw_probes((solver.n_steps, 2 * d), solver.probe_kind,
                          np.random.default_rng([solver.seed, MASK_SALT[_kind(mask)], int(index), k]))
             for k in range(solver.n_probes)]
    return np.stack(slots, axis=1)


def log_density(field, z1, mask, solver: SolverConfig = SolverConfig(), geometry=None,
                index_offset: int = 0) -> DensityEstimate:
    """Reverse-time Euler on the augmented system (z, s); log p = base + s0.

    Conditioned blocks of ``z1`` are held fixed; transported blocks are
    reprojected after every step. Guidance is never applied here.
    """
    field = as_field(field, geometry)
    kind = _kind(mask)
    z1 = geo._t(z1)
    if z1.ndim == 1:
        z1 = z1.unsqueeze(0)
    if z1.shape[-1] % 2:
        raise DataError("product points need an even ambient dimension")
    n, d = z1.shape[0], z1.shape[-1] // 2
    probes = np.stack([probe_stream(solver, kind, index_offset + i, d) for i in range(n)], axis=2)
    probes = torch.from_numpy(probes)  # (n_steps, K, n, 2d)
    h = 1.0 / solver.n_steps
    z, s = z1.clone(), torch.zeros(n, dtype=z1.dtype)
    for k in range(solver.n_steps, 0, -1):
        ti, tt = _stream_times(kind, k * h)
        div = divergence_estimate(field, z, ti, tt, kind, probes=probes[solver.n_steps - k])
        with torch.no_grad():
            v = field(z, ti, tt, kind)
        z = field.geometry.retract(z - h * v, kind, z1 if kind.is_conditional else None)
        s = s - h * div
        if not (torch.isfinite(z).all() and torch.isfinite(s).all()):
            raise NumericalError(f"non-finite density state at step {k}")
    base = base_log_density(kind, d)
    s = s.numpy()
    return DensityEstimate(base + s, s, base, solver)


@dataclass
class DecompositionReport:
    joint_logp: np.ndarray
    cond_t_given_i: np.ndarray
    cond_i_given_t: np.ndarray
    marg_i: np.ndarray
    marg_t: np.ndarray
    pmi: np.ndarray
    epistemic_sum: np.ndarray

    @property
    def joint_nll(self) -> np.ndarray:
        return -self.joint_logp

    def chain_rule_residual(self) -> np.ndarray:
        return (self.marg_i + self.cond_t_given_i) - (self.marg_t + self.cond_i_given_t)


def decompose(field, pairs, solver: SolverConfig = SolverConfig(), geometry=None, index_offset: int = 0) -> DecompositionReport:
    """Joint and both conditional solves, marginals by subtraction, then PMI and typicality."""
    field = as_field(field, geometry)
    solver = solver.replace(guidance_scale=0.0)
    joint = log_density(field, pairs, geo.MaskKind.JOINT, solver, index_offset=index_offset).log_density
    c_ti = log_density(field, pairs, geo.MaskKind.IMAGE_TO_TEXT, solver, index_offset=index_offset).log_density
    c_it = log_density(field, pairs, geo.MaskKind.TEXT_TO_IMAGE, solver, index_offset=index_offset).log_density
    marg_i, marg_t = joint - c_ti, joint - c_it
    return DecompositionReport(joint, c_ti, c_it, marg_i, marg_t, joint - marg_i - marg_t, -marg_i - marg_t)


def unconditional_marginals(field, pairs, solver: SolverConfig = SolverConfig(), geometry=None,
                            index_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Direct marginal estimates from the guidance-free branch.

    Each block is scored by a conditional solve whose conditioner is replaced
    by a uniform noise block, the same substitution used for CFG dropout in
    training, so no subtraction is involved.
    """
    field = as_field(field, geometry)
    solver = solver.replace(guidance_scale=0.0)
    z = geo._t(pairs)
    if z.ndim == 1:
        z = z.unsqueeze(0)
    n, d = z.shape[0], z.shape[-1] // 2
    noise = torch.cat([geo.uniform_sphere(1, d, np.random.default_rng([solver.seed, NOISE_SALT, index_offset + i]))
                       for i in range(n)])
    img_only = torch.cat([z[:, :d], noise], -1)
    txt_only = torch.cat([noise, z[:, d:]], -1)
    marg_i = log_density(field, img_only, geo.MaskKind.TEXT_TO_IMAGE, solver, index_offset=index_offset).log_density
    marg_t = log_density(field, txt_only, geo.MaskKind.IMAGE_TO_TEXT, solver, index_offset=index_offset).log_density
    return marg_i, marg_t


def cross_direction_residual(field, pairs, solver: SolverConfig = SolverConfig(), geometry=None,
                             report: DecompositionReport | None = None, index_offset: int = 0) -> np.ndarray:
    """(marg_i + cond_t|i) - (marg_t + cond_i|t) with directly estimated marginals.

    With subtraction-defined marginals this quantity is zero by construction;
    here both marginals come from :func:`unconditional_marginals`, so the
    residual measures how well the two factorisations of the joint agree.
    """
    report = report or decompose(field, pairs, solver, geometry, index_offset)
    marg_i, marg_t = unconditional_marginals(field, pairs, solver, geometry, index_offset)
    return (marg_i + report.cond_t_given_i) - (marg_t + report.cond_i_given_t)


def scores_csv(report: DecompositionReport, solver: SolverConfig, ids=None, header_comment=None) -> str:
    n = report.joint_logp.shape[0]
    ids = range(n) if ids is None else ids
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for i, row_id in enumerate(ids):
        w.writerow([row_id] + [repr(float(x[i])) for x in (
            report.joint_nll, report.cond_t_given_i, report.cond_i_given_t, report.marg_i,
            report.marg_t, report.pmi, report.epistemic_sum)] + [solver.n_steps, solver.n_probes, solver.seed])
    return buf.getvalue()
