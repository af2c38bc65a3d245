"""Closed-form Riemannian primitives on the sphere and on the product S^{d-1} x S^{d-1}.

All batched functions operate on the trailing axis and accept anything
``torch.as_tensor`` understands; results are float64 tensors. Product points
are stored as concatenated ``[image; text]`` vectors of length ``2d``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import AntipodalError, DataError

DTYPE = torch.float64


@dataclass(frozen=True)
class Tolerances:
    unit_norm: float = 1e-9
    tangent: float = 1e-7
    small_angle: float = 1e-8
    antipodal: float = 1e-6


TOL = Tolerances()


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def normalize(x) -> Tensor:
    x = _t(x)
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True)


class MaskKind(enum.IntEnum):
    """Flow direction; the integer value is the direction id fed to the network."""

    JOINT = 0
    IMAGE_TO_TEXT = 1
    TEXT_TO_IMAGE = 2

    @property
    def transports_image(self) -> bool:
        return self is not MaskKind.IMAGE_TO_TEXT

    @property
    def transports_text(self) -> bool:
        return self is not MaskKind.TEXT_TO_IMAGE

    @property
    def is_conditional(self) -> bool:
        return self is not MaskKind.JOINT

    @classmethod
    def parse(cls, value) -> "MaskKind":
        if isinstance(value, cls):
            return value
        aliases = {"joint": cls.JOINT, "i2t": cls.IMAGE_TO_TEXT, "t2i": cls.TEXT_TO_IMAGE}
        if isinstance(value, str):
            key = value.lower().replace("->", "2").replace("_to_", "2")
            if key in aliases:
                return aliases[key]
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class FlowMask:
    kind: MaskKind = MaskKind.JOINT
    cfg_unconditional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind.parse(self.kind))
        if self.cfg_unconditional and not self.kind.is_conditional:
            raise ValueError("unconditional substitution needs a conditional mask")

    @property
    def direction_id(self) -> int:
        return int(self.kind)

    def vector(self, d: int) -> Tensor:
        """The binary 2d mask: 1 on transported dimensions."""
        img = torch.full((d,), float(self.kind.transports_image), dtype=DTYPE)
        txt = torch.full((d,), float(self.kind.transports_text), dtype=DTYPE)
        return torch.cat([img, txt])


JOINT = FlowMask(MaskKind.JOINT)
I2T = FlowMask(MaskKind.IMAGE_TO_TEXT)
T2I = FlowMask(MaskKind.TEXT_TO_IMAGE)


@dataclass
class UnitVector:
    coords: Tensor

    def __post_init__(self):
        c = _t(self.coords)
        if c.shape[-1] < 2:
            raise DataError(f"unit vectors need dimension >= 2, got {c.shape[-1]}")
        norm = torch.linalg.vector_norm(c, dim=-1, keepdim=True)
        if torch.any(norm == 0):
            raise DataError("cannot normalise a zero vector")
        self.coords = c / norm

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]


@dataclass
class ProductPoint:
    image: UnitVector
    text: UnitVector

    def __post_init__(self):
        if not isinstance(self.image, UnitVector):
            self.image = UnitVector(self.image)
        if not isinstance(self.text, UnitVector):
            self.text = UnitVector(self.text)
        if self.image.dim != self.text.dim:
            raise DataError(f"block dimensions differ: {self.image.dim} vs {self.text.dim}")

    @property
    def dim(self) -> int:
        return self.image.dim

    def as_tensor(self) -> Tensor:
        return torch.cat([self.image.coords, self.text.coords], dim=-1)

    @classmethod
    def from_tensor(cls, z) -> "ProductPoint":
        img, txt = split(z)
        return cls(UnitVector(img), UnitVector(txt))


@dataclass
class TangentVector:
    base: ProductPoint
    image_component: Tensor
    text_component: Tensor
    tol: float = field(default=TOL.tangent, repr=False)

    def __post_init__(self):
        self.image_component = _t(self.image_component)
        self.text_component = _t(self.text_component)
        for name, v, x in (("image", self.image_component, self.base.image.coords),
                           ("text", self.text_component, self.base.text.coords)):
            if torch.any(torch.abs((v * x).sum(-1)) > self.tol):
                raise DataError(f"{name} component is not tangent at the base point")

    def as_tensor(self) -> Tensor:
        return torch.cat([self.image_component, self.text_component], dim=-1)

    def norm(self) -> Tensor:
        # The product metric restricts to the round metric on each factor.
        return torch.linalg.vector_norm(self.as_tensor(), dim=-1)


def split(z) -> tuple[Tensor, Tensor]:
    z = _t(z)
    if z.shape[-1] % 2:
        raise DataError(f"product vectors need even length, got {z.shape[-1]}")
    d = z.shape[-1] // 2
    return z[..., :d], z[..., d:]


def _check_same_dim(x: Tensor, y: Tensor):
    if x.shape[-1] != y.shape[-1]:
        raise DataError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def _cos_angle(x: Tensor, y: Tensor) -> Tensor:
    return torch.clamp((x * y).sum(-1), -1.0, 1.0)


def _angle(x: Tensor, y: Tensor) -> Tensor:
    """Angle between unit vectors via 2 atan2(|x - y|, |x + y|).

    Unlike arccos of the clamped inner product this stays accurate near 0 and
    pi, so identical inputs give exactly 0.
    """
    return 2.0 * torch.atan2(torch.linalg.vector_norm(x - y, dim=-1), torch.linalg.vector_norm(x + y, dim=-1))


def _check_antipodal(omega: Tensor, tol: Tolerances, active=None):
    bad = omega > math.pi - tol.antipodal
    if active is not None:
        bad = bad & active
    if torch.any(bad):
        idx = torch.nonzero(bad.reshape(-1)).flatten().tolist()
        raise AntipodalError(f"antipodal pair(s) at flat indices {idx[:10]}: geodesic not unique", idx)


def geodesic_distance(x, y) -> Tensor:
    x, y = _t(x), _t(y)
    _check_same_dim(x, y)
    return _angle(x, y)


def exp_map(x, v, tol: Tolerances = TOL) -> Tensor:
    x, v = _t(x), _t(v)
    _check_same_dim(x, v)
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    radial = torch.abs((x * v).sum(-1, keepdim=True))
    if torch.any(radial > tol.tangent * torch.clamp(n, min=1.0)):
        raise DataError("exp_map: v is not tangent at x")
    small = n < tol.small_angle
    safe_n = torch.where(small, torch.ones_like(n), n)
    out = torch.cos(n) * x + torch.sin(n) * v / safe_n
    out = torch.where(small, x + v, out)
    return normalize(out)


def log_map(x, y, tol: Tolerances = TOL) -> Tensor:
    x, y = _t(x), _t(y)
    _check_same_dim(x, y)
    cos = _cos_angle(x, y)
    theta = _angle(x, y)
    _check_antipodal(theta, tol)
    theta, cos = theta.unsqueeze(-1), cos.unsqueeze(-1)
    small = theta < tol.small_angle
    coef = torch.where(small, torch.ones_like(theta), theta / torch.sin(torch.where(small, torch.ones_like(theta), theta)))
    return coef * (y - cos * x)


def geodesic_interpolate(a, b, t, tol: Tolerances = TOL, active=None) -> Tensor:
    """Constant-speed geodesic from ``a`` (t=0) to ``b`` (t=1).

    ``active`` optionally restricts the antipodal check to the rows that are
    actually used by the caller.
    """
    a, b = _t(a), _t(b)
    _check_same_dim(a, b)
    t = _t(t)
    omega = _angle(a, b)
    _check_antipodal(omega, tol, active)
    omega = omega.unsqueeze(-1)
    t = t.unsqueeze(-1) if t.dim() > 0 else t
    small = omega < tol.small_angle
    safe = torch.where(small, torch.ones_like(omega), omega)
    sin_w = torch.sin(safe)
    out = torch.sin((1 - t) * safe) / sin_w * a + torch.sin(t * safe) / sin_w * b
    out = torch.where(small, a + t * (b - a), out)
    return normalize(out)


def target_velocity(z0, z1, t, tol: Tolerances = TOL, active=None) -> Tensor:
    """Time derivative of ``geodesic_interpolate(z0, z1, t)``; its norm is the arc length."""
    z0, z1 = _t(z0), _t(z1)
    _check_same_dim(z0, z1)
    t = _t(t)
    omega = _angle(z0, z1)
    _check_antipodal(omega, tol, active)
    omega = omega.unsqueeze(-1)
    t = t.unsqueeze(-1) if t.dim() > 0 else t
    small = omega < tol.small_angle
    safe = torch.where(small, torch.ones_like(omega), omega)
    out = safe / torch.sin(safe) * (torch.cos(t * safe) * z1 - torch.cos((1 - t) * safe) * z0)
    return torch.where(small, z1 - z0, out)


def project_sphere(x, v) -> Tensor:
    x, v = _t(x), _t(v)
    return v - (v * x).sum(-1, keepdim=True) * x


def tangent_project(z, v) -> Tensor:
    """Blockwise projection of an ambient 2d vector onto T_z M."""
    zi, zt = split(z)
    vi, vt = split(v)
    return torch.cat([project_sphere(zi, vi), project_sphere(zt, vt)], dim=-1)


def _kind_flags(kind, batch_shape) -> tuple[Tensor, Tensor]:
    """Per-row (transports_image, transports_text) booleans."""
    if isinstance(kind, (FlowMask, MaskKind, int, str)):
        k = kind.kind if isinstance(kind, FlowMask) else MaskKind.parse(kind)
        img = torch.full(batch_shape, k.transports_image, dtype=torch.bool)
        txt = torch.full(batch_shape, k.transports_text, dtype=torch.bool)
        return img, txt
    k = torch.as_tensor(kind, dtype=torch.long)
    return k != MaskKind.IMAGE_TO_TEXT, k != MaskKind.TEXT_TO_IMAGE


def mask_vector(kind, z) -> Tensor:
    """Per-row 2d binary mask matching ``z``'s batch shape."""
    z = _t(z)
    d = z.shape[-1] // 2
    img, txt = _kind_flags(kind, z.shape[:-1])
    return torch.cat([img.unsqueeze(-1).expand(*z.shape[:-1], d),
                      txt.unsqueeze(-1).expand(*z.shape[:-1], d)], dim=-1).to(DTYPE)


def masked_interpolate(z0, z1, kind, t_img, t_txt, tol: Tolerances = TOL) -> Tensor:
    z0, z1 = _t(z0), _t(z1)
    _check_same_dim(z0, z1)
    img_on, txt_on = _kind_flags(kind, z1.shape[:-1])
    a0, b0 = split(z0)
    a1, b1 = split(z1)
    img = geodesic_interpolate(a0, a1, t_img, tol, active=img_on)
    txt = geodesic_interpolate(b0, b1, t_txt, tol, active=txt_on)
    img = torch.where(img_on.unsqueeze(-1), img, a1)
    txt = torch.where(txt_on.unsqueeze(-1), txt, b1)
    return torch.cat([img, txt], dim=-1)


def masked_target(z0, z1, kind, t_img, t_txt, tol: Tolerances = TOL) -> Tensor:
    z0, z1 = _t(z0), _t(z1)
    img_on, txt_on = _kind_flags(kind, z1.shape[:-1])
    a0, b0 = split(z0)
    a1, b1 = split(z1)
    img = target_velocity(a0, a1, t_img, tol, active=img_on)
    txt = target_velocity(b0, b1, t_txt, tol, active=txt_on)
    img = torch.where(img_on.unsqueeze(-1), img, torch.zeros_like(img))
    txt = torch.where(txt_on.unsqueeze(-1), txt, torch.zeros_like(txt))
    return torch.cat([img, txt], dim=-1)


def log_sphere_volume(d: int) -> float:
    """log of the surface area of S^{d-1} in R^d."""
    return math.log(2.0) + 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d)


def uniform_sphere(shape, d: int, rng) -> Tensor:
    """Gaussian draws renormalised to the sphere, from a numpy Generator."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return normalize(torch.from_numpy(rng.standard_normal(shape + (d,))))


def uniform_product(n: int, d: int, rng) -> Tensor:
    return torch.cat([uniform_sphere(n, d, rng), uniform_sphere(n, d, rng)], dim=-1)


class SphereGeometry:
    """Riemannian bindings used by training and the ODE runtime."""

    name = "riemannian"

    def interpolate(self, z0, z1, kind, t_img, t_txt):
        return masked_interpolate(z0, z1, kind, t_img, t_txt)

    def target(self, z0, z1, kind, t_img, t_txt):
        return masked_target(z0, z1, kind, t_img, t_txt)

    def project(self, z, v):
        return tangent_project(z, v)

    def retract(self, z, kind, z_ref=None):
        """Renormalise transported blocks; conditioned blocks are restored from ``z_ref``."""
        zi, zt = split(z)
        out = torch.cat([normalize(zi), normalize(zt)], dim=-1)
        if z_ref is not None:
            m = mask_vector(kind, z)
            out = m * out + (1 - m) * _t(z_ref)
        return out


class EuclideanGeometry(SphereGeometry):
    """Ablation bindings: straight-line paths, no projection or renormalisation."""

    name = "euclidean"

    def interpolate(self, z0, z1, kind, t_img, t_txt):
        z0, z1 = _t(z0), _t(z1)
        d = z1.shape[-1] // 2
        batch = z1.shape[:-1]
        ti = torch.broadcast_to(_t(t_img), batch).unsqueeze(-1).expand(*batch, d)
        tt = torch.broadcast_to(_t(t_txt), batch).unsqueeze(-1).expand(*batch, d)
        t = torch.cat([ti, tt], dim=-1)
        m = mask_vector(kind, z1)
        return m * ((1 - t) * z0 + t * z1) + (1 - m) * z1

    def target(self, z0, z1, kind, t_img, t_txt):
        z0, z1 = _t(z0), _t(z1)
        return mask_vector(kind, z1) * (z1 - z0)

    def project(self, z, v):
        return _t(v)

    def retract(self, z, kind, z_ref=None):
        z = _t(z)
        if z_ref is not None:
            m = mask_vector(kind, z)
            z = m * z + (1 - m) * _t(z_ref)
        return z


def euclidean_mode(flag: bool) -> SphereGeometry:
    return EuclideanGeometry() if flag else SphereGeometry()


def geometry_by_name(name: str) -> SphereGeometry:
    if name == "riemannian":
        return SphereGeometry()
    if name == "euclidean":
        return EuclideanGeometry()
    raise ValueError(f"unknown geometry {name!r}")
