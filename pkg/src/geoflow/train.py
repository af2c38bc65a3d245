"""Masked flow-matching training loop with curriculum, CFG dropout and early stopping."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
import torch

from . import geometry as geo
from .errors import ConfigError, DataError, NumericalError
from .net import VelocityNet, masked_loss, save_checkpoint
from .ot import DEFAULT_EPSILON, couple

log = logging.getLogger(__name__)

VAL_SALT = 7919
METRIC_COLUMNS = ("step", "loss", "lr", "grad_norm", "p_joint", "val_loss")


@dataclass
class CurriculumConfig:
    phase1_frac: float = 0.15
    phase2_frac: float = 0.15
    p_joint_target: float = 0.40


@dataclass
class ValidationConfig:
    every: int = 2000
    batches: int = 5
    patience: int = 100
    min_abs_improve: float = 1e-6
    min_rel_improve: float = 0.005


@dataclass
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 1e-3
    grad_clip: float = 1.0
    warmup_steps: int = 4000
    total_steps: int = 120_000
    batch_size: int = 8192
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    p_uncond: float = 0.10
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ot_epsilon: float = DEFAULT_EPSILON
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.curriculum, dict):
            self.curriculum = _build(CurriculumConfig, self.curriculum, "curriculum")
        if isinstance(self.validation, dict):
            self.validation = _build(ValidationConfig, self.validation, "validation")
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        c, v = self.curriculum, self.validation
        checks = [
            (self.lr > 0, "lr must be positive"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (self.grad_clip > 0, "grad_clip must be positive"),
            (self.total_steps >= 1, "total_steps must be at least 1"),
            (0 <= self.warmup_steps <= self.total_steps, "warmup_steps must lie in [0, total_steps]"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (c.phase1_frac >= 0 and c.phase2_frac >= 0, "phase fractions must be non-negative"),
            (c.phase1_frac + c.phase2_frac <= 1, "phase fractions must sum to at most 1"),
            (0 <= c.p_joint_target <= 1, "p_joint_target must lie in [0, 1]"),
            (0 <= self.p_uncond < 1, "p_uncond must lie in [0, 1)"),
            (v.every >= 1 and v.batches >= 1 and v.patience >= 1, "validation cadence values must be positive"),
            (v.min_abs_improve >= 0 and v.min_rel_improve >= 0, "improvement thresholds must be non-negative"),
            (len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "betas must be two values in [0, 1)"),
            (self.ot_epsilon > 0, "ot_epsilon must be positive"),
            (self.log_every >= 1, "log_every must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "train")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-CPU preset: batch 256 and a short schedule."""
        base = dict(lr=2e-3, warmup_steps=300, total_steps=8000, batch_size=256,
                    validation=ValidationConfig(every=500, batches=4, patience=100))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


def _build(cls, data, where):
    if is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def mask_probability(step: int, config: TrainConfig) -> tuple[float, float, float]:
    """(p_joint, p_i2t, p_t2i) for the curriculum at ``step``."""
    c = config.curriculum
    T = config.total_steps
    end1 = c.phase1_frac * T
    end2 = end1 + c.phase2_frac * T
    if step < end1:
        pj = 0.0
    elif step < end2:
        pj = c.p_joint_target * (step - end1) / (end2 - end1)
    else:
        pj = c.p_joint_target
    rest = 0.5 * (1.0 - pj)
    return pj, rest, rest


def sample_kinds(n: int, probs, uniforms=None, rng=None) -> torch.Tensor:
    """Per-row mask kinds from the probability triple; ``uniforms`` makes the draw replayable."""
    u = rng.random(n) if uniforms is None else np.asarray(uniforms)
    edges = np.cumsum(probs)[:2]
    return torch.from_numpy(np.searchsorted(edges, u, side="right").astype(np.int64))


def sample_times(mask, rng, n: int | None = None, uniforms=None):
    """Per-stream flow times; conditioned streams sit at t=0, joint streams share one t."""
    scalar = n is None and uniforms is None
    if uniforms is None:
        u = rng.random(1 if scalar else n)
    else:
        u = np.atleast_1d(np.asarray(uniforms, dtype=np.float64))
    img_on, txt_on = geo._kind_flags(mask, (u.shape[0],))
    u = torch.from_numpy(u)
    t_img = torch.where(img_on, u, torch.zeros_like(u))
    t_txt = torch.where(txt_on, u, torch.zeros_like(u))
    if scalar:
        return float(t_img[0]), float(t_txt[0])
    return t_img, t_txt


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps."""
    w, T = config.warmup_steps, config.total_steps
    if step < w:
        return config.lr * step / w
    if T == w:
        return config.lr
    frac = min(1.0, (step - w) / (T - w))
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_optimizer(net: VelocityNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(net.parameters(), lr=0.0, betas=config.betas,
                             eps=config.adam_eps, weight_decay=config.weight_decay)


def apply_cfg_dropout(z0, z1, kinds, p_uncond, rng=None, uniforms=None):
    """Swap the conditioner block of conditional rows for its coupled noise block with prob p_uncond."""
    n = z1.shape[0]
    u = rng.random(n) if uniforms is None else np.asarray(uniforms)
    drop = torch.from_numpy(u < p_uncond) & (kinds != geo.MaskKind.JOINT)
    cond_block = 1.0 - geo.mask_vector(kinds, z1)
    swap = drop.unsqueeze(-1).to(z1.dtype) * cond_block
    return swap * z0 + (1 - swap) * z1, drop


def _batch_from(data, n, rng) -> torch.Tensor:
    if callable(data):
        out = geo._t(data(rng, n))
    else:
        idx = rng.integers(0, data.shape[0], size=n)
        out = data[torch.from_numpy(idx)]
    return out


def couple_joint_rows(z0, z1, kinds, config) -> torch.Tensor:
    """OT-pair the joint rows among themselves; conditional rows keep their independent noise.

    Coupling a conditional row would make its transported noise block depend
    on the conditioner through the cost, while inference starts that block
    from conditioner-independent uniform noise.
    """
    joint = torch.nonzero(kinds == geo.MaskKind.JOINT).squeeze(-1)
    if joint.numel() < 2:
        return z1
    assign = couple(z0[joint].numpy(), z1[joint].numpy(), epsilon=config.ot_epsilon)
    z1 = z1.clone()
    z1[joint] = z1[joint][torch.from_numpy(assign.target_index)]
    return z1


def training_step(net, optimizer, batch, step, config: TrainConfig, rng, geometry=None, dropout_gen=None):
    """One optimizer update; returns (loss, lr, grad_norm, p_joint) metrics."""
    geometry = geometry or geo.SphereGeometry()
    z1 = geo._t(batch)
    d = z1.shape[-1] // 2
    z0 = geo.uniform_product(z1.shape[0], d, rng)
    probs = mask_probability(step, config)
    kinds = sample_kinds(z1.shape[0], probs, rng=rng)
    t_img, t_txt = sample_times(kinds, rng, n=z1.shape[0])
    z1 = couple_joint_rows(z0, z1, kinds, config)
    z1, _ = apply_cfg_dropout(z0, z1, kinds, config.p_uncond, rng=rng)
    z_t = geometry.interpolate(z0, z1, kinds, t_img, t_txt)
    target = geometry.target(z0, z1, kinds, t_img, t_txt)

    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    net.train()
    loss = masked_loss(net, z_t, kinds, t_img, t_txt, target, geometry, train=True, generator=dropout_gen)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
    if not torch.isfinite(grad_norm):
        bad = [n for n, p in net.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
        raise NumericalError(f"non-finite gradient at step {step} in {bad[:5]}")
    optimizer.step()
    net.eval()
    return {"loss": loss.item(), "lr": lr, "grad_norm": grad_norm.item(), "p_joint": probs[0]}


@dataclass
class ValidationSet:
    """Validation draws fixed once by the validation seed; only the mask distribution follows the step.

    The joint-row coupling is recomputed (deterministically) at each
    evaluation because which rows are joint depends on the step's mask mixture.
    """

    z0: torch.Tensor
    z1: torch.Tensor
    mask_uniforms: np.ndarray
    time_uniforms: np.ndarray

    @classmethod
    def build(cls, data, config: TrainConfig, d: int) -> "ValidationSet":
        rng = np.random.default_rng([config.seed, VAL_SALT])
        n_batches, B = config.validation.batches, config.batch_size
        z0s, z1s = [], []
        for _ in range(n_batches):
            z1s.append(_batch_from(data, B, rng))
            z0s.append(geo.uniform_product(B, d, rng))
        n = n_batches * B
        return cls(torch.stack(z0s), torch.stack(z1s), rng.random(n).reshape(n_batches, B),
                   rng.random(n).reshape(n_batches, B))

    def loss(self, net, step, config: TrainConfig, geometry=None) -> float:
        geometry = geometry or geo.SphereGeometry()
        probs = mask_probability(step, config)
        total = 0.0
        net.eval()
        with torch.no_grad():
            for b in range(self.z0.shape[0]):
                kinds = sample_kinds(self.z0.shape[1], probs, uniforms=self.mask_uniforms[b])
                t_img, t_txt = sample_times(kinds, None, uniforms=self.time_uniforms[b])
                z0 = self.z0[b]
                z1 = couple_joint_rows(z0, self.z1[b], kinds, config)
                z_t = geometry.interpolate(z0, z1, kinds, t_img, t_txt)
                target = geometry.target(z0, z1, kinds, t_img, t_txt)
                total += masked_loss(net, z_t, kinds, t_img, t_txt, target, geometry).item()
        return total / self.z0.shape[0]


@dataclass
class EarlyStopping:
    patience: int
    min_abs_improve: float
    min_rel_improve: float
    best: float = math.inf
    bad_count: int = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Return (improved, stop). Either threshold suffices to count as an improvement."""
        gain = self.best - value
        improved = math.isinf(self.best) or gain > self.min_abs_improve or gain > self.min_rel_improve * abs(self.best)
        if improved:
            self.best = value
            self.bad_count = 0
        else:
            self.bad_count += 1
        return improved, self.bad_count >= self.patience

    def reset(self):
        self.best, self.bad_count = math.inf, 0


def validate_and_checkpoint(net, val_set: ValidationSet, state: EarlyStopping, step, config,
                            geometry=None, checkpoint_path=None, extra=None) -> tuple[str, float, bool]:
    """Evaluate the fixed validation set, keep the best checkpoint, and decide whether to stop."""
    geometry = geometry or geo.SphereGeometry()
    value = val_set.loss(net, step, config, geometry)
    improved, stop = state.update(value)
    if improved and checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, geometry.name, extra={"step": step, "val_loss": value, **(extra or {})})
    return ("stop" if stop else "continue"), value, improved


@dataclass
class TrainResult:
    net: VelocityNet
    history: list
    val_history: list
    best_val: float
    best_step: int
    steps_run: int
    stopped_early: bool


def format_metrics(rows, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def train(net: VelocityNet, data: Union[torch.Tensor, np.ndarray, Callable], config: TrainConfig,
          geometry=None, checkpoint_path=None, metrics_path=None, header_comment=None,
          val_data=None) -> TrainResult:
    """Train ``net`` in place and restore the best-validation parameters at the end.

    ``data`` is either an (n, 2d) array of paired unit vectors, sampled with
    replacement, or a callable ``(rng, n) -> (n, 2d)`` generator.
    """
    geometry = geometry or geo.SphereGeometry()
    if not callable(data):
        data = geo._t(data)
        if data.ndim != 2 or data.shape[1] != 2 * net.embed_dim:
            raise DataError(f"training data must be (n, {2 * net.embed_dim}), got {tuple(data.shape)}")
    d = net.embed_dim
    rng = np.random.default_rng(config.seed)
    dropout_gen = torch.Generator().manual_seed(config.seed)
    optimizer = make_optimizer(net, config)
    val_set = ValidationSet.build(val_data if val_data is not None else data, config, d)
    v = config.validation
    stopper = EarlyStopping(v.patience, v.min_abs_improve, v.min_rel_improve)
    history, val_history = [], []
    best_state, best_step = copy.deepcopy(net.state_dict()), 0
    stopped, step = False, 0
    val_probs = None
    for step in range(config.total_steps):
        batch = _batch_from(data, config.batch_size, rng)
        m = training_step(net, optimizer, batch, step, config, rng, geometry, dropout_gen)
        m["step"] = step
        done = step + 1
        if done % v.every == 0 or done == config.total_steps:
            probs = mask_probability(done, config)
            if probs != val_probs:
                # losses under a different mask mixture are not comparable
                stopper.reset()
                val_probs = probs
            decision, value, improved = validate_and_checkpoint(net, val_set, stopper, done, config,
                                                                geometry, checkpoint_path)
            m["val_loss"] = value
            val_history.append((done, value))
            if improved:
                best_state, best_step = copy.deepcopy(net.state_dict()), done
            log.info("step %d loss %.5f val %.5f", done, m["loss"], value)
            if decision == "stop":
                stopped = True
        if step % config.log_every == 0 or "val_loss" in m:
            history.append(m)
        if stopped:
            break
    net.load_state_dict(best_state)
    net.eval()
    if metrics_path is not None:
        _atomic_write_text(metrics_path, format_metrics(history, header_comment))
    return TrainResult(net, history, val_history, stopper.best, best_step, step + 1, stopped)


def _atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
