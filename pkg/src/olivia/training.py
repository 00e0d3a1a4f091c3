"""Losses, AdamW, finite-difference gradient checks, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .attention import DTYPE
from .checkpoint import Checkpoint
from .data import Corpus
from .errors import ValidationError
from .model import ModelConfig, Olivia, Stage, init_params, param_group, set_stage
from .rng import CounterRNG

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    per_horizon: dict[int, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {"total": float(self.total), "recon": float(self.recon),
                "per_horizon": {h: float(v) for h, v in self.per_horizon.items()}}


def _sq(residual: torch.Tensor, normalize: bool) -> torch.Tensor:
    per_item = (residual * residual).sum(dim=-1)
    if normalize:
        per_item = per_item / residual.shape[-1]
    return per_item.mean() if per_item.dim() else per_item


def loss(outputs: Mapping, targets: Mapping, stage: Stage | str, paper_exact: bool = False) -> LossBreakdown:
    """Reconstruction loss, plus per-horizon forecast losses outside pretraining.

    ``targets`` holds ``"x"`` and, for tuning, ``"futures"`` (``{tau: tensor}``
    or one tensor at least ``max(tau)`` long). By default each term is a mean
    over its length; ``paper_exact`` sums the forecast terms instead, keeping
    the 1/T reconstruction term.
    """
    stage = Stage(stage)
    x = torch.as_tensor(targets["x"], dtype=DTYPE)
    x_hat = outputs["x_hat"]
    if x_hat.shape != x.shape:
        raise ValidationError(f"reconstruction shape {tuple(x_hat.shape)} != target {tuple(x.shape)}")
    recon = _sq(x - x_hat, normalize=True)
    total = recon
    per_horizon: dict[int, torch.Tensor] = {}
    if stage is not Stage.PRETRAIN:
        forecasts = outputs.get("forecasts") or {}
        futures = targets.get("futures")
        if futures is None:
            raise ValidationError("tuning loss needs future targets")
        for h, pred in forecasts.items():
            if isinstance(futures, Mapping):
                if h not in futures:
                    raise ValidationError(f"missing targets for horizon {h}")
                y = torch.as_tensor(futures[h], dtype=DTYPE)
            else:
                y = torch.as_tensor(futures, dtype=DTYPE)
                if y.shape[-1] < h:
                    raise ValidationError(f"future targets shorter than horizon {h}")
                y = y[..., :h]
            if y.shape != pred.shape:
                raise ValidationError(f"horizon {h}: target shape {tuple(y.shape)} != {tuple(pred.shape)}")
            per_horizon[h] = _sq(y - pred, normalize=not paper_exact)
        for h in sorted(per_horizon):
            total = total + per_horizon[h]
    return LossBreakdown(total, recon, per_horizon)


# -- optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
                   state: OptimizerState) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """One AdamW step in place: decay ``p *= 1 - lr*wd``, then the bias-corrected Adam update.

    Tensors with ``requires_grad=False`` or without a gradient are untouched.
    """
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.shape:
                raise ValidationError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


# -- gradient check --------------------------------------------------------

GRADCHECK_FLOOR = 1e-6


def tiny_config(**overrides) -> ModelConfig:
    base = dict(T=8, patch_len=4, d=4, H=2, P=2, M=2, enc_layers=1, dec_layers=1, K=2,
                horizons=[2, 3], seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def _check_batch(config: ModelConfig, seed: int, batch: int = 3) -> dict:
    rng = CounterRNG(seed, "gradcheck/batch")
    span = config.T + max(config.horizons)
    t = np.arange(span)
    rows = np.sin(2 * np.pi * t / 5.0)[None, :] + 0.5 * rng.normal(batch * span).reshape(batch, span)
    rows = torch.from_numpy(rows)
    return {"x": rows[:, : config.T], "futures": rows[:, config.T :]}


def grad_check(config: ModelConfig, tolerance: float = 1e-4, stage: Stage | str = Stage.TUNE,
               h: float = 1e-6, corrupt: str | None = None, seed: int = 0,
               all_params: bool = True) -> dict:
    """Compare autograd gradients with central differences on every trainable scalar.

    ``all_params`` makes every tensor trainable while ``stage`` still picks the
    loss; ``corrupt`` names a tensor whose analytic gradient gets its sign
    flipped (negative control). Relative error is
    ``|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)``.
    """
    stage = Stage(stage)
    model = init_params(config)
    set_stage(model, Stage.PRETRAIN if all_params else stage)
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    if not params:
        raise ValidationError("configuration has no trainable parameters to check")
    batch = _check_batch(config, seed)
    loss_stage = Stage.TUNE if stage is Stage.INFER else stage

    def f() -> torch.Tensor:
        return loss(model(batch["x"], loss_stage), batch, loss_stage).total

    model.zero_grad()
    f().backward()
    analytic = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise ValidationError(f"unknown parameter {corrupt!r}")
        analytic[corrupt] = -analytic[corrupt]
    worst, worst_name, count = 0.0, None, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            a_flat = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = float(a_flat[i])
                err = abs(a - num) / max(abs(a), abs(num), GRADCHECK_FLOOR)
                count += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    return {"max_rel_err": worst, "worst": worst_name, "n_scalars": count, "tolerance": tolerance,
            "stage": stage.value, "pass": bool(worst < tolerance)}


# -- training --------------------------------------------------------------


@dataclass
class TrainSchedule:
    pretrain_epochs: int = 10
    tune_epochs: int = 2
    batch_size: int = 64
    lr_pretrain: float = 1e-3
    lr_tune: float = 8e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss_paper_exact: bool = False
    seed: int = 0
    log_path: str | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    history: list[dict]


def _split_targets(windows, T: int) -> dict:
    arr = torch.from_numpy(np.stack([w.values for w in windows]))
    out = {"x": arr[:, :T]}
    if arr.shape[1] > T:
        out["futures"] = arr[:, T:]
    return out


def _mean_loss(model: Olivia, data: dict, stage: Stage, paper_exact: bool, batch_size: int) -> float:
    n = data["x"].shape[0]
    if n == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for s in range(0, n, batch_size):
            part = {k: v[s : s + batch_size] for k, v in data.items()}
            total += float(loss(model(part["x"], stage), part, stage, paper_exact).total) * part["x"].shape[0]
    return total / n


def run_stage(model: Olivia, stage: Stage, epochs: int, train_data: dict, val_data: dict,
              schedule: TrainSchedule, history: list[dict], log_fh=None) -> Checkpoint:
    """Train ``model`` in place for one stage; returns the best-validation snapshot."""
    set_stage(model, stage)
    lr = schedule.lr_pretrain if stage is Stage.PRETRAIN else schedule.lr_tune
    opt = OptimizerState(lr=lr, betas=schedule.betas, eps=schedule.eps, weight_decay=schedule.weight_decay)
    params = {n: p for n, p in model.named_parameters()}
    n = train_data["x"].shape[0]

    def record(epoch: int, train_loss: float, seconds: float) -> float:
        val = _mean_loss(model, val_data, stage, schedule.loss_paper_exact, schedule.batch_size)
        entry = {"epoch": epoch, "stage": stage.value, "train_loss": train_loss, "val_loss": val, "seconds": seconds}
        history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
        log.info("%s epoch %d train %.6g val %.6g", stage.value, epoch, train_loss, val)
        return val

    initial = _mean_loss(model, train_data, stage, schedule.loss_paper_exact, schedule.batch_size)
    best_val = record(0, initial, 0.0)
    best = Checkpoint.from_model(model)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = CounterRNG(schedule.seed, f"shuffle/{stage.value}/{epoch}").permutation(n)
        running = 0.0
        for s in range(0, n, schedule.batch_size):
            idx = torch.from_numpy(order[s : s + schedule.batch_size])
            part = {k: v[idx] for k, v in train_data.items()}
            model.zero_grad(set_to_none=True)
            out = loss(model(part["x"], stage), part, stage, schedule.loss_paper_exact)
            out.total.backward()
            optimizer_step(params, {k: p.grad for k, p in params.items()}, opt)
            running += float(out.total.detach()) * len(idx)
        val = record(epoch, running / n, time.perf_counter() - t0)
        if val < best_val or not math.isfinite(best_val):
            best_val, best = val, Checkpoint.from_model(model)
    return best


def train(config: ModelConfig, corpus: Corpus, schedule: TrainSchedule | None = None,
          model: Olivia | None = None) -> TrainResult:
    """Pretrain then tune (either may have zero epochs).

    Windows must be ``config.T`` long, or ``config.T + max(horizons)`` long when
    tuning. Passing ``model`` continues from existing weights.
    """
    schedule = schedule or TrainSchedule()
    windows_train = corpus.train_windows()
    windows_val = corpus.val_windows()
    if not windows_train:
        raise ValidationError("empty training corpus")
    length = windows_train[0].T
    if length < config.T:
        raise ValidationError(f"windows of length {length} are shorter than T={config.T}")
    if schedule.tune_epochs > 0 and length < config.T + max(config.horizons):
        raise ValidationError(f"tuning needs windows of length T + max(horizons) = {config.T + max(config.horizons)}")
    if schedule.tune_epochs == 0 and length != config.T:
        raise ValidationError(f"pretraining windows must have length T={config.T}, got {length}")
    model = model if model is not None else init_params(config)
    train_data = _split_targets(windows_train, config.T)
    val_data = _split_targets(windows_val, config.T)
    history: list[dict] = []
    log_fh = open(schedule.log_path, "a") if schedule.log_path else None
    try:
        best = None
        if schedule.pretrain_epochs > 0:
            pre = {"x": train_data["x"]}
            best = run_stage(model, Stage.PRETRAIN, schedule.pretrain_epochs, pre, {"x": val_data["x"]},
                             schedule, history, log_fh)
        if schedule.tune_epochs > 0:
            best = run_stage(model, Stage.TUNE, schedule.tune_epochs, train_data, val_data, schedule, history, log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    final = Checkpoint.from_model(model)
    return TrainResult(final, best or final, history)


# -- evaluation ------------------------------------------------------------


def _items_array(items, T: int, horizons: Sequence[int]) -> np.ndarray:
    need = T + max(horizons)
    rows = []
    for it in items:
        v = np.asarray(getattr(it, "values", it), dtype=np.float64)
        if v.shape[0] < need:
            raise ValidationError(f"evaluation item of length {v.shape[0]} shorter than T + max(horizons) = {need}")
        rows.append(v[:need])
    if not rows:
        raise ValidationError("no evaluation items")
    return np.stack(rows)


def forecast_metrics(predictions: Mapping[int, np.ndarray], truth: np.ndarray) -> dict:
    """MSE/MAE per horizon over all points, and their cross-horizon mean."""
    per = {}
    for h in sorted(predictions):
        err = np.asarray(predictions[h]) - truth[:, :h]
        per[h] = {"mse": float(np.mean(err**2)), "mae": float(np.mean(np.abs(err)))}
    avg = {k: float(np.mean([v[k] for v in per.values()])) for k in ("mse", "mae")}
    return {"per_horizon": per, "avg": avg}


def evaluate(checkpoint: Checkpoint | Olivia, items, horizons: Sequence[int] | None = None) -> dict:
    model = checkpoint if isinstance(checkpoint, Olivia) else checkpoint.to_model()
    T = model.config.T
    horizons = list(horizons or model.config.horizons)
    missing = set(horizons) - {int(h) for h in model.pred_heads}
    if missing:
        raise ValidationError(f"model has no prediction head for horizons {sorted(missing)}")
    arr = _items_array(items, T, horizons)
    with torch.no_grad():
        out = model(torch.from_numpy(arr[:, :T]), Stage.INFER)
    preds = {h: out["forecasts"][h].numpy() for h in horizons}
    return forecast_metrics(preds, arr[:, T:])


def persistence_baseline(items, T: int, horizons: Sequence[int]) -> dict:
    """Metrics for repeating the last observed value."""
    arr = _items_array(items, T, horizons)
    last = arr[:, T - 1 : T]
    preds = {h: np.repeat(last, h, axis=1) for h in horizons}
    return forecast_metrics(preds, arr[:, T:])


def frozen_groups_identical(before: Checkpoint, after: Checkpoint, groups=("patch_embed", "pos_embed", "encoder",
                                                                           "decoder", "recon_head", "gammas")) -> list[str]:
    """Names of tensors in ``groups`` whose bytes differ between checkpoints."""
    changed = []
    for name, arr in before.tensors.items():
        if param_group(name) in groups and arr.tobytes() != after.tensors[name].tobytes():
            changed.append(name)
    return changed
