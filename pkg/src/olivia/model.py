"""Encoder-decoder forecaster around the Householder harmonizer.

Pipeline per window: optional instance standardization -> align -> patch
embedding (+ learned positions) -> encoder blocks -> decoder blocks ->
linear unpatchify to length T -> restore -> reconstruction, and per horizon a
linear head on the restored sequence. Outputs are de-standardized.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .attention import DTYPE, FullAttention, HarmonicAttention, default_resonators
from .errors import ValidationError
from .harmonizer import HouseholderStack, align_backward, restore_backward
from .harmonizer import align as np_align
from .harmonizer import restore as np_restore
from .rng import CounterRNG
from .spectral import STANDARDIZE_EPS

GROUPS = ("harmonizer", "patch_embed", "pos_embed", "encoder", "decoder", "recon_head", "pred_heads", "gammas")
TUNE_GROUPS = frozenset({"harmonizer", "pred_heads"})


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    TUNE = "tune"
    INFER = "infer"


@dataclass
class ModelConfig:
    T: int = 512
    patch_len: int = 64
    d: int = 256
    H: int = 16
    P: int = 16
    M: int | None = None
    enc_layers: int = 4
    dec_layers: int = 2
    K: int = 256
    horizons: list[int] = field(default_factory=lambda: [96, 192, 336, 720])
    gamma_init: float = 0.1
    instance_norm: bool = True
    literal_resonators: bool = False
    seed: int = 0
    householder_init: str = "paired"
    attention: str = "harmonic"

    def __post_init__(self) -> None:
        self.horizons = [int(h) for h in self.horizons]
        self.validate()

    @property
    def L(self) -> int:
        return self.T // self.patch_len

    @property
    def resonators(self) -> int:
        return default_resonators(self.L) if self.M is None else self.M

    def validate(self) -> None:
        if self.T < 2 or self.patch_len < 1:
            raise ValidationError("T must be >= 2 and patch_len >= 1")
        if self.T % self.patch_len:
            raise ValidationError(f"T={self.T} is not divisible by patch_len={self.patch_len}")
        if self.d != self.H * self.P:
            raise ValidationError(f"d={self.d} must equal H*P={self.H * self.P}")
        if self.K < 0:
            raise ValidationError("K must be >= 0")
        if self.householder_init == "paired" and self.K % 2:
            raise ValidationError("paired Householder initialization needs an even K")
        if self.householder_init not in ("paired", "random"):
            raise ValidationError(f"unknown householder_init {self.householder_init!r}")
        if self.attention not in ("harmonic", "full"):
            raise ValidationError(f"unknown attention {self.attention!r}")
        if self.M is not None and not 1 <= self.M <= self.L:
            raise ValidationError(f"M={self.M} must lie in [1, L={self.L}]")
        if any(h < 1 for h in self.horizons):
            raise ValidationError("horizons must be positive")
        if len(set(self.horizons)) != len(self.horizons):
            raise ValidationError("horizons must be distinct")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValidationError("layer counts must be >= 0")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_json(obj)


class _HouseholderApply(torch.autograd.Function):
    """Implicit Householder application with the hand-derived backward."""

    @staticmethod
    def forward(ctx, x, vectors, inverse: bool):
        stack = HouseholderStack(vectors.detach().numpy())
        xs = x.detach().numpy()
        out = np_restore(stack, xs) if inverse else np_align(stack, xs)
        ctx.save_for_backward(x, vectors)
        ctx.inverse = inverse
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        x, vectors = ctx.saved_tensors
        stack = HouseholderStack(vectors.detach().numpy())
        back = restore_backward if ctx.inverse else align_backward
        grad_v, grad_x = back(stack, x.detach().numpy(), grad_out.detach().numpy())
        return torch.from_numpy(grad_x), torch.from_numpy(grad_v), None


class Harmonizer(nn.Module):
    def __init__(self, T: int, K: int, seed: int = 0, mode: str = "paired") -> None:
        super().__init__()
        stack = HouseholderStack.initialize(K, T, seed, mode)
        self.vectors = nn.Parameter(torch.from_numpy(stack.vectors.copy()))

    def stack(self) -> HouseholderStack:
        return HouseholderStack(self.vectors.detach().numpy().copy())

    def align(self, x: torch.Tensor) -> torch.Tensor:
        return _HouseholderApply.apply(x, self.vectors, False)

    def restore(self, y: torch.Tensor) -> torch.Tensor:
        return _HouseholderApply.apply(y, self.vectors, True)


def _linear(n_in: int, n_out: int, seed: int, tag: str) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=DTYPE)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        w = CounterRNG(seed, f"{tag}.weight").uniform(n_in * n_out) * 2.0 - 1.0
        b = CounterRNG(seed, f"{tag}.bias").uniform(n_out) * 2.0 - 1.0
        layer.weight.copy_(torch.from_numpy(w.reshape(n_out, n_in) * bound))
        layer.bias.copy_(torch.from_numpy(b * bound))
    return layer


class Block(nn.Module):
    """Pre-norm block: attention sub-block then a 4x GELU MLP, both residual."""

    def __init__(self, cfg: ModelConfig, tag: str) -> None:
        super().__init__()
        d = cfg.d
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        if cfg.attention == "harmonic":
            self.attn = HarmonicAttention(d, cfg.H, cfg.P, cfg.resonators, cfg.gamma_init,
                                          cfg.literal_resonators, cfg.seed, f"{tag}.attn")
        else:
            self.attn = FullAttention(d, cfg.H, cfg.P, cfg.gamma_init, cfg.seed, f"{tag}.attn")
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc1 = _linear(d, 4 * d, cfg.seed, f"{tag}.fc1")
        self.fc2 = _linear(4 * d, d, cfg.seed, f"{tag}.fc2")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # the attention op carries its own gamma-scaled residual
        n = self.norm1(z)
        z = z + (self.attn(n) - n)
        return z + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm2(z))))


def param_group(name: str) -> str:
    if name.endswith(".gamma"):
        return "gammas"
    head = name.split(".", 1)[0]
    if head not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no group")
    return head


class Olivia(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        cfg = config
        self.config = cfg
        self.stage = Stage.PRETRAIN
        self.harmonizer = Harmonizer(cfg.T, cfg.K, cfg.seed, cfg.householder_init)
        self.patch_embed = _linear(cfg.patch_len, cfg.d, cfg.seed, "patch_embed")
        pos = CounterRNG(cfg.seed, "pos_embed").normal(cfg.L * cfg.d, std=0.02)
        self.pos_embed = nn.Parameter(torch.from_numpy(pos.reshape(cfg.L, cfg.d)))
        self.encoder = nn.ModuleList(Block(cfg, f"encoder.{i}") for i in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(Block(cfg, f"decoder.{i}") for i in range(cfg.dec_layers))
        self.recon_head = _linear(cfg.L * cfg.d, cfg.T, cfg.seed, "recon_head")
        self.pred_heads = nn.ModuleDict()
        self.set_horizons(cfg.horizons)

    def set_horizons(self, horizons) -> None:
        """Replace the prediction heads with fresh ones for ``horizons``."""
        horizons = [int(h) for h in horizons]
        self.config = dataclasses.replace(self.config, horizons=horizons)
        self.pred_heads = nn.ModuleDict(
            {str(h): _linear(self.config.T, h, self.config.seed, f"pred_heads.{h}") for h in horizons}
        )
        set_stage(self, self.stage)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name, _ in self.named_parameters():
            out[param_group(name)].append(name)
        return out

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def embed(self, aligned: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if aligned.shape[-1] % cfg.patch_len:
            raise ValidationError(f"length {aligned.shape[-1]} not divisible by patch_len={cfg.patch_len}")
        patches = aligned.reshape(*aligned.shape[:-1], -1, cfg.patch_len)
        return self.patch_embed(patches) + self.pos_embed[: patches.shape[-2]]

    def forward(self, x: torch.Tensor, stage: Stage | str | None = None) -> dict:
        cfg = self.config
        stage = Stage(stage) if stage is not None else self.stage
        x = torch.as_tensor(x, dtype=DTYPE)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != cfg.T:
            raise ValidationError(f"input length {x.shape[-1]} != T={cfg.T}")
        if stage is not Stage.PRETRAIN and not self.pred_heads:
            raise ValidationError(f"stage {stage.value} needs at least one forecast horizon")
        if cfg.instance_norm:
            mu = x.mean(dim=-1, keepdim=True)
            scale = x.std(dim=-1, unbiased=False, keepdim=True) + STANDARDIZE_EPS
            xn = (x - mu) / scale
        else:
            xn = x
        z = self.embed(self.harmonizer.align(xn))
        for block in self.encoder:
            z = block(z)
        for block in self.decoder:
            z = block(z)
        restored = self.harmonizer.restore(self.recon_head(z.flatten(-2)))
        outputs = {"x_hat": restored}
        if stage is not Stage.PRETRAIN:
            outputs["forecasts"] = {int(h): head(restored) for h, head in self.pred_heads.items()}
        if cfg.instance_norm:
            outputs["x_hat"] = outputs["x_hat"] * scale + mu
            if "forecasts" in outputs:
                outputs["forecasts"] = {h: f * scale + mu for h, f in outputs["forecasts"].items()}
        if squeeze:
            outputs["x_hat"] = outputs["x_hat"][0]
            if "forecasts" in outputs:
                outputs["forecasts"] = {h: f[0] for h, f in outputs["forecasts"].items()}
        return outputs


def init_params(config: ModelConfig) -> Olivia:
    return Olivia(config)


def patchify_embed(aligned, model: Olivia) -> torch.Tensor:
    return model.embed(torch.as_tensor(aligned, dtype=DTYPE))


def forward(x, model: Olivia, stage: Stage | str) -> dict:
    return model(x, stage)


def set_stage(model: Olivia, stage: Stage | str) -> Olivia:
    stage = Stage(stage)
    for name, p in model.named_parameters():
        group = param_group(name)
        if stage is Stage.PRETRAIN:
            p.requires_grad_(True)
        elif stage is Stage.TUNE:
            p.requires_grad_(group in TUNE_GROUPS)
        else:
            p.requires_grad_(False)
    model.stage = stage
    return model


def state_arrays(model: Olivia) -> dict[str, np.ndarray]:
    return {n: p.detach().numpy().copy() for n, p in model.named_parameters()}
