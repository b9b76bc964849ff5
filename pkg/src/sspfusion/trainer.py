"""Two-stage training: structure-head pretraining, then joint fusion training.

Batches are a pure function of ``(seed, step)``, so a run restored from a
:class:`TrainState` archive replays exactly the batches an uninterrupted run
would have seen.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .imagedata import DatasetSplit, ImagePair, random_crop_pair
from .network import (
    ModelConfig,
    SSPFusionNet,
    _atomic_savez,
    load_checkpoint,
    model_arrays,
    save_checkpoint,
    structure_batch,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "total", "rec", "ssim", "smooth", "grad", "fus")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf; training stops instead of skipping."""


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    epochs_main: int = 300
    epochs_pretrain: int = 50
    crop: int = 256
    alpha: float = 0.01
    epsilon: float = 1.0
    n_levels: int = 3
    batch_size: int = 8
    seed: int = 0
    sfe_enabled: bool = True
    spf_enabled: bool = True
    base_channels: int = 16
    residual_blocks_per_level: int = 2
    merge: str = "sum"
    polarity: str = "edge"
    # explicit step budgets override the epoch-derived ones
    max_steps: int | None = None
    pretrain_steps: int | None = None
    max_pairs: int | None = None
    checkpoint_every: int = 100

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("lr_init", "epochs_main", "epochs_pretrain", "crop", "n_levels", "batch_size", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized profile: 64x64 crops, at most 300 steps and 8 pairs."""
        base = dict(crop=64, batch_size=4, max_steps=300, pretrain_steps=50, max_pairs=8, base_channels=8, lr_init=1e-3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        unknown = set(d) - cls.field_names()
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        merged = asdict(base) if base is not None else {}
        merged.update(d)
        return cls(**merged)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_levels=self.n_levels,
            base_channels=self.base_channels,
            residual_blocks_per_level=self.residual_blocks_per_level,
            seed=self.seed,
            merge=self.merge,
            polarity=self.polarity,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    step: int
    epoch: int
    weights: dict[str, torch.Tensor]
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def fresh(cls, weights: dict[str, torch.Tensor], seed: int = 0) -> "TrainState":
        return cls(
            step=0,
            epoch=0,
            weights=weights,
            m={k: torch.zeros_like(w) for k, w in weights.items()},
            v={k: torch.zeros_like(w) for k, w in weights.items()},
            seed=seed,
        )


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@torch.no_grad()
def adam_step(
    state: TrainState,
    gradients: dict[str, torch.Tensor],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps_opt: float = 1e-8,
) -> TrainState:
    """Bias-corrected Adam, applied in place to ``state.weights``; increments ``state.step``.

    Parameters without an entry in ``gradients`` are left untouched (frozen).
    """
    b1, b2 = betas
    for name, g in gradients.items():
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} ({bad} entries) at step {state.step}")
        if g.shape != state.weights[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, expected {tuple(state.weights[name].shape)}")
    t = state.step + 1
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, g in gradients.items():
        m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
        state.weights[name].sub_(lr * (m / c1) / ((v / c2).sqrt() + eps_opt))
    state.step = t
    return state


def save_state(path, model: SSPFusionNet, state: TrainState, config: TrainConfig) -> Path:
    arrays = model_arrays(model)
    for k in state.m:
        arrays[f"adam_m/{k}"] = state.m[k].numpy()
        arrays[f"adam_v/{k}"] = state.v[k].numpy()
    arrays["step"] = np.array(state.step)
    arrays["epoch"] = np.array(state.epoch)
    arrays["seed"] = np.array(state.seed)
    arrays["train_config"] = np.array(config.to_json())
    path = Path(path)
    _atomic_savez(path, arrays)
    return path


def load_state(path) -> tuple[SSPFusionNet, TrainState, TrainConfig]:
    model, extra = load_checkpoint(path)
    weights = dict(model.named_parameters())
    state = TrainState(
        step=int(extra["step"]),
        epoch=int(extra["epoch"]),
        weights={k: p.data for k, p in weights.items()},
        m={k[len("adam_m/"):]: torch.from_numpy(v.copy()) for k, v in extra.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: torch.from_numpy(v.copy()) for k, v in extra.items() if k.startswith("adam_v/")},
        seed=int(extra["seed"]),
    )
    config = TrainConfig.from_dict(json.loads(str(extra["train_config"])))
    return model, state, config


def load_pairs(dataset: DatasetSplit | Sequence[ImagePair], max_pairs: int | None = None) -> list[ImagePair]:
    pairs = list(dataset)
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    if not pairs:
        raise ValueError("dataset is empty")
    return pairs


def make_batch(pairs: list[ImagePair], config: TrainConfig, step: int, dtype=torch.float32):
    """Deterministic batch for ``step``: (ir, vi, struct_ir, struct_vi)."""
    rng = np.random.default_rng([config.seed, step])
    n = len(pairs)
    size = min(config.batch_size, n)
    idx = rng.permutation(n)[:size] if size < n else np.arange(n)
    crops = []
    for i in idx:
        p = pairs[int(i)]
        if config.crop > min(p.shape):
            raise ValueError(f"crop {config.crop} larger than pair {p.pair_id!r} of shape {p.shape}")
        crops.append(random_crop_pair(p, config.crop, int(rng.integers(2**31))))
    ir_np = np.stack([c.ir_y for c in crops])
    vi_np = np.stack([c.vi_y for c in crops])
    ir = torch.from_numpy(ir_np).to(dtype)[:, None]
    vi = torch.from_numpy(vi_np).to(dtype)[:, None]
    s_ir = structure_batch(ir_np, config.n_levels, config.polarity, dtype)
    s_vi = structure_batch(vi_np, config.n_levels, config.polarity, dtype)
    return ir, vi, s_ir, s_vi


def steps_for(config: TrainConfig, n_pairs: int, pretrain: bool = False) -> int:
    explicit = config.pretrain_steps if pretrain else config.max_steps
    if explicit is not None:
        return explicit
    per_epoch = math.ceil(n_pairs / config.batch_size)
    return per_epoch * (config.epochs_pretrain if pretrain else config.epochs_main)


class LossLog:
    """Append-only CSV loss log; reopening at step s drops rows at or after s."""

    def __init__(self, path, resume_from: int | None = None):
        self.path = Path(path)
        rows = []
        if resume_from is not None and self.path.exists():
            with self.path.open(newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) < resume_from]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(rows)

    def append(self, step: int, lr: float, parts: dict[str, float]) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([step, repr(lr)] + [repr(parts[c]) for c in LOG_COLUMNS[2:]])


def read_loss_log(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in LOG_COLUMNS}


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    run_dir: Path
    final: dict[str, float]
    steps: int


def default_run_dir(out_root, config: TrainConfig, tag: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(out_root) / f"{stamp}_seed{config.seed}_{tag}"


def _check_finite(parts: dict[str, float], step: int, run_dir: Path) -> None:
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteError(
            f"non-finite loss ({', '.join(bad)}) at step {step}; last good checkpoint kept in {run_dir}"
        )


def pretrain_sfe(
    config: TrainConfig,
    dataset: DatasetSplit | Sequence[ImagePair],
    run_dir,
) -> TrainResult:
    """Fit both encoders and their structure heads to the classical structure maps.

    Only encoder parameters move; the decoder keeps its initial weights.
    """
    run_dir = Path(run_dir)
    pairs = load_pairs(dataset, config.max_pairs)
    torch.manual_seed(config.seed)
    model = SSPFusionNet(config.model_config())
    trainable = set(model.parameter_groups()["encoder"])
    params = dict(model.named_parameters())
    state = TrainState.fresh({k: params[k].data for k in trainable}, config.seed)
    total = steps_for(config, len(pairs), pretrain=True)
    loss_log = LossLog(run_dir / "pretrain_loss.csv")
    per_epoch = math.ceil(len(pairs) / config.batch_size)
    parts = {}
    for step in range(total):
        ir, vi, s_ir, s_vi = make_batch(pairs, config, step)
        _, soft_ir = model.encode(ir, "ir")
        _, soft_vi = model.encode(vi, "vi")
        rec = losses.charbonnier_rec(soft_ir + soft_vi, s_ir + s_vi, config.epsilon)
        model.zero_grad(set_to_none=True)
        rec.backward()
        r = float(rec.detach())
        parts = {"total": r, "rec": r, "ssim": 0.0, "smooth": 0.0, "grad": 0.0, "fus": 0.0}
        _check_finite(parts, step, run_dir)
        lr = cosine_lr(step, total, config.lr_init)
        loss_log.append(step, lr, parts)
        grads = {k: params[k].grad if params[k].grad is not None else torch.zeros_like(params[k]) for k in trainable}
        adam_step(state, grads, lr, config.betas, config.eps_opt)
        state.epoch = (step + 1) // per_epoch
    ckpt = save_checkpoint(run_dir / "pretrained.npz", model, {"train_config": np.array(config.to_json())})
    log.info("pretraining done after %d steps, L_rec=%.6f", total, parts.get("rec", float("nan")))
    return TrainResult(ckpt, loss_log.path, run_dir, parts, total)


def train_fusion(
    config: TrainConfig,
    dataset: DatasetSplit | Sequence[ImagePair],
    run_dir,
    init=None,
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainResult:
    """Optimise the full objective. ``init`` warm-starts from a checkpoint;
    ``resume`` continues from ``run_dir/state.npz``. ``stop_after`` ends the run
    early (after saving state) at that step, which is how interrupted runs are
    simulated.
    """
    run_dir = Path(run_dir)
    pairs = load_pairs(dataset, config.max_pairs)
    total = steps_for(config, len(pairs))
    state_path = run_dir / "state.npz"
    if resume:
        model, state, saved_cfg = load_state(state_path)
        if saved_cfg.to_json() != config.to_json():
            log.warning("resuming with a config that differs from the saved one; using the saved config")
            config = saved_cfg
        loss_log = LossLog(run_dir / "loss.csv", resume_from=state.step)
    else:
        torch.manual_seed(config.seed)
        if init is not None:
            model, _ = load_checkpoint(init)
        else:
            model = SSPFusionNet(config.model_config())
        state = TrainState.fresh({k: p.data for k, p in model.named_parameters()}, config.seed)
        loss_log = LossLog(run_dir / "loss.csv")
    params = dict(model.named_parameters())
    dtype = next(model.parameters()).dtype
    per_epoch = math.ceil(len(pairs) / config.batch_size)
    parts: dict[str, float] = {}
    end = total if stop_after is None else min(total, stop_after)
    for step in range(state.step, end):
        ir, vi, s_ir, s_vi = make_batch(pairs, config, step, dtype)
        res = model(ir, vi, s_ir, s_vi, config.spf_enabled, config.sfe_enabled)
        breakdown = losses.fusion_objective(
            res.fused, ir, vi, res.soft_ir, res.soft_vi, s_ir, s_vi, config.alpha, config.epsilon
        )
        model.zero_grad(set_to_none=True)
        breakdown.total.backward()
        parts = breakdown.as_floats()
        parts["fus"] = float(breakdown.fus.detach())
        _check_finite({k: parts[k] for k in LOG_COLUMNS[2:]}, step, run_dir)
        lr = cosine_lr(step, total, config.lr_init)
        loss_log.append(step, lr, parts)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(state, grads, lr, config.betas, config.eps_opt)
        state.epoch = (step + 1) // per_epoch
        if state.step % config.checkpoint_every == 0 and state.step < end:
            save_state(state_path, model, state, config)
    save_state(state_path, model, state, config)
    ckpt = save_checkpoint(run_dir / "model.npz", model, {"train_config": np.array(config.to_json())})
    return TrainResult(ckpt, loss_log.path, run_dir, parts, state.step)
