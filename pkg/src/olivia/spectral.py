"""Periodogram PSDs, dataset-level spectra, divergences and moment matrices."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSpectrumError, ValidationError
from .rng import CounterRNG

if TYPE_CHECKING:
    from .harmonizer import HouseholderStack

STANDARDIZE_EPS = 1e-8
_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Window:
    values: np.ndarray
    domain_id: str = ""

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] < 2:
            raise ValidationError(f"window must be 1-D with length >= 2, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("window contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class Psd:
    power: np.ndarray
    normalized: bool = False

    @property
    def F(self) -> int:
        return int(self.power.shape[0])


@dataclass
class DivergenceReport:
    labels: list[str]
    matrix: np.ndarray
    T: int
    psd: dict[str, np.ndarray] = field(default_factory=dict)

    def mean_offdiagonal(self) -> float:
        n = len(self.labels)
        if n < 2:
            return 0.0
        iu = np.triu_indices(n, k=1)
        return float(np.mean(self.matrix[iu]))

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "labels": list(self.labels),
            "psd": {k: [float(x) for x in v] for k, v in self.psd.items()},
            "js_matrix": [[float(x) for x in row] for row in self.matrix],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


@dataclass(frozen=True)
class MomentMatrix:
    sigma: np.ndarray
    sample_count: int

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(x)) for x in row) for row in self.sigma) + "\n"


def _as_values(x: Window | np.ndarray | Sequence[float]) -> np.ndarray:
    if isinstance(x, Window):
        return x.values
    v = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("input contains non-finite values")
    return v


@lru_cache(maxsize=16)
def _dft_basis(T: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(T // 2 + 1)[:, None]
    t = np.arange(T)[None, :]
    # reduce k*t mod T in integers before scaling keeps the phase exact
    phase = 2.0 * np.pi * ((k * t) % T) / T
    return np.cos(phase), np.sin(phase)


def dft_direct(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of the one-sided DFT by direct summation.

    Works on the last axis; ``x`` may be batched.
    """
    T = x.shape[-1]
    cos, sin = _dft_basis(T)
    return x @ cos.T, -(x @ sin.T)


def periodogram(window: Window | np.ndarray, method: str = "direct") -> Psd:
    """Unnormalized one-sided periodogram ``|DFT|^2 / T`` on bins 0..T//2."""
    x = _as_values(window)
    return Psd(_periodogram_values(x, method), normalized=False)


def _periodogram_values(x: np.ndarray, method: str) -> np.ndarray:
    T = x.shape[-1]
    if T < 2:
        raise ValidationError("periodogram needs T >= 2")
    if method == "direct":
        re, im = dft_direct(x)
    elif method == "fft":
        c = np.fft.rfft(x, axis=-1)
        re, im = c.real, c.imag
    else:
        raise ValidationError(f"unknown DFT method {method!r}")
    return (re * re + im * im) / T


def _stack(windows: Sequence[Window | np.ndarray]) -> np.ndarray:
    if len(windows) == 0:
        raise ValidationError("need at least one window")
    rows = [_as_values(w) for w in windows]
    T = rows[0].shape[0]
    if any(r.ndim != 1 or r.shape[0] != T for r in rows):
        raise ValidationError("all windows must share the same length")
    return np.stack(rows)


def dataset_psd(windows: Sequence[Window | np.ndarray], method: str = "direct") -> Psd:
    """Mean periodogram over ``windows``, divided by its own total."""
    X = _stack(windows)
    S = _periodogram_values(X, method)
    mean = np.zeros(S.shape[1])
    for row in S:  # fixed reduction order
        mean += row
    mean /= S.shape[0]
    total = float(mean.sum())
    if total <= 0.0:
        raise DegenerateSpectrumError("aggregate spectrum has zero energy")
    return Psd(mean / total, normalized=True)


def _check_pair(p: Psd | np.ndarray, q: Psd | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pa = p.power if isinstance(p, Psd) else np.asarray(p, dtype=np.float64)
    qa = q.power if isinstance(q, Psd) else np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ValidationError(f"length mismatch: {pa.shape} vs {qa.shape}")
    for a in (pa, qa):
        if np.any(a < 0) or abs(float(a.sum()) - 1.0) > _NORM_TOL:
            raise ValidationError("divergence requires normalized, nonnegative distributions")
    return pa, qa


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def divergence(p: Psd | np.ndarray, q: Psd | np.ndarray, kind: str = "js") -> float:
    """KL(p||q) or JS(p, q) in nats."""
    pa, qa = _check_pair(p, q)
    if kind == "kl":
        return max(_kl(pa, qa), 0.0)
    if kind == "js":
        m = 0.5 * (pa + qa)
        js = 0.5 * _kl(pa, m) + 0.5 * _kl(qa, m)
        return min(max(js, 0.0), math.log(2.0))
    raise ValidationError(f"unknown divergence kind {kind!r}")


def standardize_window(window: Window | np.ndarray, eps: float = STANDARDIZE_EPS):
    """Instance standardization ``(x - mean) / (std + eps)``, population std.

    Returns the same type it was given.
    """
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    x = _as_values(window)
    mu = x.mean()
    sigma = x.std()
    if sigma + eps == 0.0:
        out = np.zeros_like(x)
    else:
        out = (x - mu) / (sigma + eps)
    if isinstance(window, Window):
        return Window(out, window.domain_id)
    return out


def sample_windows(
    series: Sequence[float] | np.ndarray,
    T: int = 512,
    N: int = 2000,
    seed: int = 0,
    standardize: bool = True,
    domain_id: str = "",
    tag: str = "windows",
) -> list[Window]:
    """Draw ``N`` length-``T`` windows at uniform random start indices."""
    s = np.asarray(series, dtype=np.float64)
    if T < 2:
        raise ValidationError("T must be >= 2")
    if N < 1:
        raise ValidationError("N must be >= 1")
    if s.shape[0] < T:
        raise ValidationError(f"series of length {s.shape[0]} is shorter than T={T}")
    starts = window_starts(s.shape[0], T, N, seed, tag=f"{tag}/{domain_id}")
    out = []
    for start in starts:
        w = Window(s[start : start + T].copy(), domain_id)
        out.append(standardize_window(w) if standardize else w)
    return out


def window_starts(length: int, T: int, N: int, seed: int, tag: str = "windows/") -> np.ndarray:
    return CounterRNG(seed, tag).integers(0, length - T, N)


def moment_matrix(windows: Sequence[Window | np.ndarray]) -> MomentMatrix:
    """Empirical second-order moment matrix ``(1/N) sum x^T x``."""
    X = _stack(windows)
    sigma = (X.T @ X) / X.shape[0]
    sigma = 0.5 * (sigma + sigma.T)
    return MomentMatrix(sigma, X.shape[0])


def domain_psds(
    corpora: Mapping[str, Sequence[Window | np.ndarray]],
    transform: "HouseholderStack | None" = None,
    method: str = "direct",
) -> tuple[int, dict[str, np.ndarray]]:
    """Dataset PSD per domain, optionally after the Aligner."""
    from .harmonizer import align

    psds: dict[str, np.ndarray] = {}
    T = None
    for label, windows in corpora.items():
        X = _stack(windows)
        if T is None:
            T = X.shape[1]
        elif X.shape[1] != T:
            raise ValidationError("all windows must share the same length across domains")
        if transform is not None:
            if transform.T != T:
                raise ValidationError(f"transform dimension {transform.T} != window length {T}")
            X = align(transform, X)
        psds[label] = dataset_psd(list(X), method=method).power
    if T is None:
        raise ValidationError("no domains given")
    return int(T), psds


def harmonization_gap(
    corpora: Mapping[str, Sequence[Window | np.ndarray]],
    transform: "HouseholderStack | None" = None,
    method: str = "direct",
) -> DivergenceReport:
    """Pairwise JS divergence between per-domain dataset PSDs.

    With ``transform`` the windows are first mapped by the Aligner.
    """
    if len(corpora) < 2:
        raise ValidationError("need at least two domains")
    T, psds = domain_psds(corpora, transform, method)
    labels = list(psds)
    n = len(labels)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = divergence(psds[labels[i]], psds[labels[j]], "js")
    return DivergenceReport(labels, mat, T, psds)
