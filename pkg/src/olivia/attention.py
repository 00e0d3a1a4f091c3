"""HarmonicAttention (token -> resonator -> token) and a dense baseline.

Tensors are float64 torch tensors shaped ``(..., L, d)``; leading dims are
independent sequences.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .rng import CounterRNG

DTYPE = torch.float64


def default_resonators(L: int) -> int:
    return max(1, math.ceil(L / 4))


@dataclass
class HarmonicAttentionParams:
    W: torch.Tensor  # (H, d, P) head projections, tied for the output map
    offsets: torch.Tensor  # (H, M, P) per-resonator offsets
    gamma: torch.Tensor  # scalar
    literal: bool = False

    @property
    def H(self) -> int:
        return self.W.shape[0]

    @property
    def P(self) -> int:
        return self.W.shape[2]

    @property
    def M(self) -> int:
        return self.offsets.shape[1]


@dataclass
class FullAttentionParams:
    Wq: torch.Tensor  # (H, d, P)
    Wk: torch.Tensor
    Wv: torch.Tensor
    Wo: torch.Tensor  # (H, P, d)
    gamma: torch.Tensor


def _check_tokens(Z: torch.Tensor, d: int) -> None:
    if Z.dim() < 2 or Z.shape[-1] != d:
        raise ValidationError(f"tokens must be (..., L, {d}), got {tuple(Z.shape)}")
    if Z.shape[-2] < 1:
        raise ValidationError("need at least one token")


def _logits(Z: torch.Tensor, params: HarmonicAttentionParams) -> tuple[torch.Tensor, torch.Tensor]:
    _check_tokens(Z, params.W.shape[1])
    L = Z.shape[-2]
    if params.M > L:
        raise ValidationError(f"M={params.M} resonators exceeds L={L} tokens")
    Zt = torch.einsum("...ld,hdp->...hlp", Z, params.W)
    g = Z.mean(dim=-2)
    r = torch.einsum("...d,hdp->...hp", g, params.W)
    template = r.unsqueeze(-2).expand(*r.shape[:-1], params.M, params.P)
    if not params.literal:
        template = template + params.offsets
    logits = torch.einsum("...hlp,...hmp->...hlm", Zt, template) / math.sqrt(params.P)
    if not torch.isfinite(logits).all():
        raise ValidationError("non-finite aggregation logits")
    return Zt, logits


def aggregation_weights(Z: torch.Tensor, params: HarmonicAttentionParams, head: int | None = None) -> torch.Tensor:
    """Token-to-resonator weights ``(..., [H,] L, M)``; columns sum to one."""
    _, logits = _logits(Z, params)
    A = torch.softmax(logits, dim=-2)
    return A if head is None else A[..., head, :, :]


def harmonic_attention(Z: torch.Tensor, params: HarmonicAttentionParams, return_parts: bool = False):
    Zt, logits = _logits(Z, params)
    A = torch.softmax(logits, dim=-2)  # over tokens
    R = A.transpose(-1, -2) @ Zt
    S = torch.softmax(R @ R.transpose(-1, -2) / math.sqrt(params.P), dim=-1)  # over key resonators
    head = A @ (S @ R)
    update = torch.einsum("...hlp,hdp->...ld", head, params.W)
    out = Z + params.gamma * update
    if return_parts:
        return out, {"A": A, "R": R, "S": S, "head": head}
    return out


def full_attention(Z: torch.Tensor, params: FullAttentionParams, return_weights: bool = False):
    _check_tokens(Z, params.Wq.shape[1])
    P = params.Wq.shape[2]
    q = torch.einsum("...ld,hdp->...hlp", Z, params.Wq)
    k = torch.einsum("...ld,hdp->...hlp", Z, params.Wk)
    v = torch.einsum("...ld,hdp->...hlp", Z, params.Wv)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(P), dim=-1)
    update = torch.einsum("...hlp,hpd->...ld", weights @ v, params.Wo)
    out = Z + params.gamma * update
    return (out, weights) if return_weights else out


def _uniform(rng: CounterRNG, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    n = int(np.prod(shape))
    return torch.from_numpy((rng.uniform(n) * 2.0 - 1.0).reshape(shape) * bound)


class HarmonicAttention(nn.Module):
    def __init__(self, d: int, H: int, P: int, M: int, gamma_init: float = 0.1,
                 literal: bool = False, seed: int = 0, tag: str = "attn") -> None:
        super().__init__()
        self.literal = literal
        self.W = nn.Parameter(_uniform(CounterRNG(seed, f"{tag}.W"), (H, d, P), d))
        offsets = CounterRNG(seed, f"{tag}.offsets").normal(H * M * P, std=0.02)
        self.offsets = nn.Parameter(torch.from_numpy(offsets.reshape(H, M, P)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init), dtype=DTYPE))

    def params(self) -> HarmonicAttentionParams:
        return HarmonicAttentionParams(self.W, self.offsets, self.gamma, self.literal)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return harmonic_attention(Z, self.params())


class FullAttention(nn.Module):
    def __init__(self, d: int, H: int, P: int, gamma_init: float = 0.1, seed: int = 0,
                 tag: str = "attn") -> None:
        super().__init__()
        for name in ("Wq", "Wk", "Wv"):
            setattr(self, name, nn.Parameter(_uniform(CounterRNG(seed, f"{tag}.{name}"), (H, d, P), d)))
        self.Wo = nn.Parameter(_uniform(CounterRNG(seed, f"{tag}.Wo"), (H, P, d), H * P))
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init), dtype=DTYPE))

    def params(self) -> FullAttentionParams:
        return FullAttentionParams(self.Wq, self.Wk, self.Wv, self.Wo, self.gamma)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return full_attention(Z, self.params())


# -- instrumented multiply counting ---------------------------------------


class MulCounter:
    """numpy evaluator that tallies scalar multiplications."""

    def __init__(self) -> None:
        self.count = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a @ b
        self.count += int(np.prod(out.shape)) * a.shape[-1]
        return out

    def scale(self, a: np.ndarray, c: float) -> np.ndarray:
        self.count += a.size
        return a * c


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def harmonic_attention_counted(Z, W, offsets, gamma, literal: bool = False) -> tuple[np.ndarray, int]:
    """Single-sequence harmonic attention in numpy with a multiply count."""
    c = MulCounter()
    L = Z.shape[0]
    H, _, P = W.shape
    M = offsets.shape[1]
    update = np.zeros_like(Z)
    g = c.scale(Z.sum(axis=0, keepdims=True), 1.0 / L)
    for h in range(H):
        Zt = c.matmul(Z, W[h])
        r = c.matmul(g, W[h])
        template = np.repeat(r, M, axis=0) + (0.0 if literal else offsets[h])
        A = _softmax(c.scale(c.matmul(Zt, template.T), 1.0 / math.sqrt(P)), axis=0)
        R = c.matmul(A.T, Zt)
        S = _softmax(c.scale(c.matmul(R, R.T), 1.0 / math.sqrt(P)), axis=1)
        update = update + c.matmul(c.matmul(A, c.matmul(S, R)), W[h].T)
    return Z + c.scale(update, gamma), c.count


def full_attention_counted(Z, Wq, Wk, Wv, Wo, gamma) -> tuple[np.ndarray, int]:
    c = MulCounter()
    H, _, P = Wq.shape
    update = np.zeros_like(Z)
    for h in range(H):
        q, k, v = c.matmul(Z, Wq[h]), c.matmul(Z, Wk[h]), c.matmul(Z, Wv[h])
        weights = _softmax(c.scale(c.matmul(q, k.T), 1.0 / math.sqrt(P)), axis=1)
        update = update + c.matmul(c.matmul(weights, v), Wo[h])
    return Z + c.scale(update, gamma), c.count


def complexity_fit(Ls: Sequence[int], counts: Sequence[int], M: int, P: int, d: int) -> dict:
    """Least-squares fit of counts against linear and quadratic cost models.

    Each model is ``counts ~ a * feature + b``; returns residual norms and the
    fitted coefficients.
    """
    Ls_arr = np.asarray(Ls, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    features = {
        "linear": Ls_arr * M * P + M * M * P + Ls_arr * d * P,
        "quadratic": Ls_arr**2 * P,
    }
    out = {}
    for name, f in features.items():
        X = np.stack([f, np.ones_like(f)], axis=1)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = float(np.linalg.norm(X @ coef - y) / np.linalg.norm(y))
        out[name] = {"coef": float(coef[0]), "intercept": float(coef[1]), "relative_residual": resid}
    out["ratio_bound"] = float(np.max(y / features["linear"]))
    out["prefers_linear"] = out["linear"]["relative_residual"] < out["quadratic"]["relative_residual"]
    return out


# -- wall-clock scaling benchmark -----------------------------------------

BENCH_HEADER = ["mechanism", "L", "M", "P", "H", "median_seconds", "repeats"]


def _calls_per_sample(fn, target: float = 0.05) -> int:
    """Calls needed for one timing sample to last at least ``target`` seconds."""
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= target or n >= 1024:
            return n
        n *= 2


def bench_scaling(Ls: Sequence[int], M: int = 16, P: int = 16, H: int = 4, repeats: int = 5,
                  seed: int = 0, mechanisms: Sequence[str] = ("harmonic", "full")) -> list[dict]:
    """Median forward wall time per (mechanism, L), single-threaded.

    Repeats are interleaved round-robin across all cases so slow drifts in
    machine load hit every size alike; fast cases batch several calls per
    sample to stay above timer noise.
    """
    if repeats < 3:
        raise ValidationError("repeats must be >= 3")
    if any(L < M for L in Ls):
        raise ValidationError("every L must be >= M")
    d = H * P
    harm = HarmonicAttention(d, H, P, M, seed=seed, tag="bench.harmonic")
    full = FullAttention(d, H, P, seed=seed, tag="bench.full")
    modules = {"harmonic": harm, "full": full}
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            cases = []
            for L in Ls:
                Z = torch.from_numpy(CounterRNG(seed, f"bench.tokens.{L}").normal(L * d).reshape(L, d))
                for name in mechanisms:
                    fn = (lambda m, z: lambda: m(z))(modules[name], Z)
                    fn()  # warm-up
                    cases.append((name, L, fn, _calls_per_sample(fn)))
            samples: list[list[float]] = [[] for _ in cases]
            for _ in range(repeats):
                for i, (_, _, fn, n) in enumerate(cases):
                    t0 = time.perf_counter()
                    for _ in range(n):
                        fn()
                    samples[i].append((time.perf_counter() - t0) / n)
    finally:
        torch.set_num_threads(threads)
    return [{"mechanism": name, "L": L, "M": M, "P": P, "H": H,
             "median_seconds": statistics.median(times), "repeats": repeats}
            for (name, L, _, _), times in zip(cases, samples)]


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.9f}" if k == "median_seconds" else row[k]) for k in BENCH_HEADER})
    return buf.getvalue()


def doubling_ratios(rows: Sequence[dict], mechanism: str) -> list[float]:
    pts = sorted((r["L"], r["median_seconds"]) for r in rows if r["mechanism"] == mechanism)
    return [t2 / t1 for (L1, t1), (L2, t2) in zip(pts, pts[1:]) if L2 == 2 * L1]
