"""Dual-stream masked velocity field and its checkpoint format.

Checkpoint layout (all integers little-endian)::

    bytes 0-3    magic b"GFVC"
    bytes 4-7    u32 format version (currently 1)
    bytes 8-15   u64 header length L
    bytes 16..   L bytes of UTF-8 JSON: {"config", "seed", "geometry",
                 "extra", "tensors": [{"name", "shape"}, ...]}
    then         every tensor listed in the header, in order, as row-major
                 float64 little-endian
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import geometry as geo
from .errors import ConfigError, DataError, NumericalError

CKPT_MAGIC = b"GFVC"
CKPT_VERSION = 1
LAYERSCALE_INIT = 1e-4


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 3
    hidden_dim: int = 64
    depth: int = 2
    gate_heads: int = 2
    dropout_rate: float = 0.05
    rff_features: int = 128
    rff_scale: float = 10.0
    ffn_mult: int = 2

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "depth", "gate_heads", "rff_features", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2")
        if self.hidden_dim % self.gate_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by gate_heads {self.gate_heads}")
        if self.rff_features % 2:
            raise ConfigError("rff_features must be even (cos and sin halves)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.rff_scale <= 0:
            raise ConfigError("rff_scale must be positive")


DESK_CONFIG = NetConfig()
FULL_SCALE_CONFIG = NetConfig(embed_dim=1024, hidden_dim=512, depth=8, gate_heads=4, dropout_rate=0.05)


def _dropout(x: Tensor, rate: float, train: bool, generator) -> Tensor:
    if not train or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def _modulate(x: Tensor, shift_scale: Tensor) -> Tensor:
    shift, scale = shift_scale.chunk(2, dim=-1)
    return x * (1 + scale) + shift


class HeadLinear(nn.Module):
    """Block-diagonal linear map: one independent square block per head."""

    def __init__(self, dim: int, heads: int, zero: bool = False):
        super().__init__()
        self.heads, self.head_dim = heads, dim // heads
        self.weight = nn.Parameter(torch.empty(heads, self.head_dim, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        if zero:
            nn.init.zeros_(self.weight)
        else:
            nn.init.uniform_(self.weight, -1 / math.sqrt(self.head_dim), 1 / math.sqrt(self.head_dim))

    def forward(self, x: Tensor) -> Tensor:
        xh = x.reshape(*x.shape[:-1], self.heads, self.head_dim)
        return torch.einsum("...hi,hoi->...ho", xh, self.weight).reshape(x.shape) + self.bias


class CrossGate(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.gate = HeadLinear(dim, heads)
        self.val = HeadLinear(dim, heads, zero=True)

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        return torch.sigmoid(self.gate(x)) * self.val(s)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, inner: int, dropout: float):
        super().__init__()
        self.w_gate = nn.Linear(dim, inner)
        self.w_val = nn.Linear(dim, inner)
        self.w_out = nn.Linear(inner, dim)
        self.dropout = dropout

    def forward(self, x: Tensor, train: bool = False, generator=None) -> Tensor:
        h = F.silu(self.w_gate(x)) * self.w_val(x)
        return self.w_out(_dropout(h, self.dropout, train, generator))


def _zero_linear(i: int, o: int) -> nn.Linear:
    lin = nn.Linear(i, o)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


class StreamLayers(nn.Module):
    """One stream's share of a DualStreamBlock."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.mod_gate = _zero_linear(H, 2 * H)
        self.cross = CrossGate(H, cfg.gate_heads)
        self.scale_gate = nn.Parameter(torch.full((H,), LAYERSCALE_INIT))
        self.mod_ffn = _zero_linear(H, 2 * H)
        self.ffn = SwiGLU(H, cfg.ffn_mult * H, cfg.dropout_rate)
        self.scale_ffn = nn.Parameter(torch.full((H,), LAYERSCALE_INIT))


class DualStreamBlock(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.img = StreamLayers(cfg)
        self.txt = StreamLayers(cfg)

    def forward(self, h_i, h_t, c_i, c_t, train=False, generator=None):
        H = h_i.shape[-1]
        si, st = F.silu(c_i), F.silu(c_t)
        x_i = _modulate(F.layer_norm(h_i, (H,)), self.img.mod_gate(si))
        x_t = _modulate(F.layer_norm(h_t, (H,)), self.txt.mod_gate(st))
        h_i = h_i + self.img.scale_gate * self.img.cross(x_i, x_t)
        h_t = h_t + self.txt.scale_gate * self.txt.cross(x_t, x_i)
        y_i = _modulate(F.layer_norm(h_i, (H,)), self.img.mod_ffn(si))
        y_t = _modulate(F.layer_norm(h_t, (H,)), self.txt.mod_ffn(st))
        h_i = h_i + self.img.scale_ffn * self.img.ffn(y_i, train, generator)
        h_t = h_t + self.txt.scale_ffn * self.txt.ffn(y_t, train, generator)
        return h_i, h_t


class CondMLP(nn.Module):
    """Per-stream conditioning vectors from flow times and the direction id."""

    def __init__(self, cfg: NetConfig, generator: torch.Generator):
        super().__init__()
        Fdim, H = cfg.rff_features, cfg.hidden_dim
        freqs = torch.randn(Fdim // 2, generator=generator, dtype=torch.float64) * cfg.rff_scale
        self.register_buffer("rff_freqs", freqs)
        self.direction = nn.Embedding(3, Fdim)
        self.mlp_img = nn.Sequential(nn.Linear(Fdim, H), nn.SiLU(), nn.Linear(H, H))
        self.mlp_txt = nn.Sequential(nn.Linear(Fdim, H), nn.SiLU(), nn.Linear(H, H))

    def features(self, t: Tensor) -> Tensor:
        arg = t.unsqueeze(-1) * self.rff_freqs
        return torch.cat([torch.cos(arg), torch.sin(arg)], dim=-1)

    def forward(self, t_img, t_txt, direction):
        e = self.direction(direction)
        return self.mlp_img(self.features(t_img) + e), self.mlp_txt(self.features(t_txt) + e)


class VelocityNet(nn.Module):
    """v(z_t, mask): raw ambient output of length 2d; callers tangent-project it."""

    def __init__(self, cfg: NetConfig = DESK_CONFIG, seed: int = 0):
        super().__init__()
        self.cfg, self.seed = cfg, seed
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            d, H = cfg.embed_dim, cfg.hidden_dim
            self.proj_img = nn.Sequential(nn.Linear(d, H), nn.LayerNorm(H))
            self.proj_txt = nn.Sequential(nn.Linear(d, H), nn.LayerNorm(H))
            self.cond = CondMLP(cfg, gen)
            self.blocks = nn.ModuleList(DualStreamBlock(cfg) for _ in range(cfg.depth))
            self.dec_norm_img, self.dec_norm_txt = nn.LayerNorm(H), nn.LayerNorm(H)
            self.dec_img, self.dec_txt = _zero_linear(H, d), _zero_linear(H, d)
        self.double()

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def forward(self, z, t_img, t_txt, direction, train: bool = False, generator=None) -> Tensor:
        z = geo._t(z)
        d = self.cfg.embed_dim
        if z.shape[-1] != 2 * d:
            raise DataError(f"expected inputs of length {2 * d}, got {z.shape[-1]}")
        batch = z.shape[:-1]
        t_img = torch.broadcast_to(geo._t(t_img), batch)
        t_txt = torch.broadcast_to(geo._t(t_txt), batch)
        direction = torch.broadcast_to(torch.as_tensor(direction, dtype=torch.long), batch)
        c_i, c_t = self.cond(t_img, t_txt, direction)
        h_i, h_t = self.proj_img(z[..., :d]), self.proj_txt(z[..., d:])
        for block in self.blocks:
            h_i, h_t = block(h_i, h_t, c_i, c_t, train, generator)
        return torch.cat([self.dec_img(self.dec_norm_img(h_i)), self.dec_txt(self.dec_norm_txt(h_t))], dim=-1)

    def parameter_groups(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def _directions(mask, batch) -> Tensor:
    if isinstance(mask, geo.FlowMask):
        return torch.full(batch, mask.direction_id, dtype=torch.long)
    if isinstance(mask, (geo.MaskKind, int, str)):
        return torch.full(batch, int(geo.MaskKind.parse(mask)), dtype=torch.long)
    return torch.as_tensor(mask, dtype=torch.long)


def predict(net: VelocityNet, z, t_img, t_txt, mask, geometry=None, train=False, generator=None) -> Tensor:
    """Tangent-projected velocity under ``mask`` (a FlowMask/MaskKind or per-row kinds)."""
    geometry = geometry or geo.SphereGeometry()
    z = geo._t(z)
    out = net(z, t_img, t_txt, _directions(mask, z.shape[:-1]), train, generator)
    return geometry.project(z, out)


def masked_loss(net, z_t, kinds, t_img, t_txt, targets, geometry=None, train=False, generator=None) -> Tensor:
    """Mean over the batch of the masked squared residual against the geodesic target."""
    v = predict(net, z_t, t_img, t_txt, kinds, geometry, train, generator)
    m = geo.mask_vector(kinds, z_t)
    per_sample = ((m * (v - geo._t(targets))) ** 2).sum(-1)
    bad = ~torch.isfinite(per_sample)
    if torch.any(bad):
        idx = torch.nonzero(bad).flatten().tolist()
        raise NumericalError(f"non-finite loss at sample(s) {idx[:10]}")
    return per_sample.mean()


def loss_and_gradients(net, z_t, kinds, t_img, t_txt, targets, geometry=None,
                       train=False, generator=None) -> tuple[float, dict[str, Tensor]]:
    params = [p for p in net.parameters()]
    loss = masked_loss(net, z_t, kinds, t_img, t_txt, targets, geometry, train, generator)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    names = [n for n, _ in net.named_parameters()]
    out = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}
    return loss.item(), out


def input_vjp(net, z, t_img, t_txt, mask, cotangent, project: bool = False, geometry=None) -> Tensor:
    """cotangent^T d(forward)/dz in eval mode; with ``project`` the output is tangent-projected first."""
    z = geo._t(z).detach().requires_grad_(True)
    with torch.enable_grad():
        if project:
            out = predict(net, z, t_img, t_txt, mask, geometry)
        else:
            out = net(z, t_img, t_txt, _directions(mask, z.shape[:-1]))
        (g,) = torch.autograd.grad(out, z, grad_outputs=geo._t(cotangent), allow_unused=True)
    return torch.zeros_like(z) if g is None else g.detach()


def save_checkpoint(path, net: VelocityNet, geometry: str = "riemannian", extra: dict | None = None):
    state = net.state_dict()
    tensors = [(name, t.detach().to(torch.float64).contiguous()) for name, t in state.items()]
    header = {
        "config": asdict(net.cfg),
        "seed": net.seed,
        "geometry": geometry,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(blob)) + blob)
            for _, t in tensors:
                fh.write(t.numpy().astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[VelocityNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    net = VelocityNet(NetConfig(**header["config"]), seed=header["seed"])
    offset = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * n
        if end > len(raw):
            raise DataError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    net.load_state_dict(state)
    return net, header
