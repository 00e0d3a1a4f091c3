"""Numerical oracles for the shared-subspace block-diagonalization and the
low-rank token Gram decomposition."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .harmonizer import HouseholderStack, build_q
from .rng import CounterRNG

OFFDIAG_TOL = 1e-9
NEG_CONTROL_MIN = 1e-2
TRACE_TOL = 1e-11
RANK_RTOL = 1e-9
BOUND_SLACK = 1e-10
PSD_RTOL = 1e-9


def random_psd(n: int, rng: CounterRNG) -> np.ndarray:
    """``G^T G`` for Gaussian ``G``, scaled to unit trace."""
    if n == 0:
        return np.zeros((0, 0))
    G = rng.normal(n * n).reshape(n, n)
    A = G.T @ G
    return A / np.trace(A)


def random_orthogonal(T: int, seed: int, tag: str) -> np.ndarray:
    """Dense Q from T random Householder reflections."""
    return build_q(HouseholderStack.initialize(T, T, seed, "random", tag=tag))


def block_diag(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r, s = a.shape[0], b.shape[0]
    out = np.zeros((r + s, r + s))
    out[:r, :r] = a
    out[r:, r:] = b
    return out


def offdiag_frob(S: np.ndarray, r: int) -> float:
    """Frobenius norm of the two off-diagonal blocks of an (r, T-r) partition."""
    return float(np.sqrt(np.sum(S[:r, r:] ** 2) + np.sum(S[r:, :r] ** 2)))


@dataclass
class InvariantSubspaceInstance:
    T: int
    r: int
    q_true: np.ndarray
    sigmas: list[np.ndarray]
    lambdas: list[np.ndarray]
    phis: list[np.ndarray]


def make_prop1_instance(T: int, r: int, n_datasets: int, seed: int, q: np.ndarray | None = None,
                        diagonal_blocks: bool = False) -> InvariantSubspaceInstance:
    if not 1 <= r < T:
        raise ValidationError(f"need 1 <= r < T, got r={r}, T={T}")
    if n_datasets < 1:
        raise ValidationError("need at least one dataset")
    q_true = random_orthogonal(T, seed, "prop1/q") if q is None else np.asarray(q, dtype=np.float64)
    lambdas, phis, sigmas = [], [], []
    for i in range(n_datasets):
        rng = CounterRNG(seed, f"prop1/blocks/{i}")
        if diagonal_blocks:
            lam = np.diag(rng.uniform(r) + 0.1)
            phi = np.diag(rng.uniform(T - r) + 0.1)
        else:
            lam, phi = random_psd(r, rng), random_psd(T - r, rng)
        lambdas.append(lam)
        phis.append(phi)
        sigmas.append(q_true.T @ block_diag(lam, phi) @ q_true)
    return InvariantSubspaceInstance(T, r, q_true, sigmas, lambdas, phis)


def check_prop1(T: int = 12, r: int = 3, n_datasets: int = 4, seed: int = 0, q: np.ndarray | None = None,
                diagonal_blocks: bool = False) -> dict:
    """Planted shared invariant subspace: ``Q Sigma_i Q^T`` must be block diagonal.

    The negative control rotates with an unrelated orthogonal matrix.
    """
    inst = make_prop1_instance(T, r, n_datasets, seed, q, diagonal_blocks)
    Q = inst.q_true
    defects = [offdiag_frob(Q @ S @ Q.T, r) for S in inst.sigmas]
    recovered = max(
        float(np.max(np.abs((Q @ S @ Q.T)[:r, :r] - lam))) for S, lam in zip(inst.sigmas, inst.lambdas)
    )
    # the span of the first r rows of Q is invariant under every Sigma_i
    U = Q[:r].T
    proj = U @ U.T
    invariance = max(float(np.linalg.norm((np.eye(T) - proj) @ S @ U)) for S in inst.sigmas)
    wrong = random_orthogonal(T, seed, "prop1/negative")
    control = min(offdiag_frob(wrong @ S @ wrong.T, r) for S in inst.sigmas)
    max_defect = max(defects)
    orth = float(np.max(np.abs(Q.T @ Q - np.eye(T))))
    ok = max_defect < OFFDIAG_TOL and control > NEG_CONTROL_MIN and invariance < OFFDIAG_TOL
    return {
        "proposition": 1,
        "params": {"T": T, "r": r, "n_datasets": n_datasets, "seed": seed},
        "metrics": {"max_offdiag_frob": max_defect, "negative_control_defect": control,
                    "invariance_residual": invariance, "block_recovery_err": recovered,
                    "orthogonality_err": orth},
        "pass": bool(ok),
    }


@dataclass
class GramInstance:
    T: int
    r: int
    d: int
    L: int
    lambda_block: np.ndarray
    phi_block: np.ndarray
    operators: np.ndarray  # (L, d, T)


def make_prop2_instance(T: int, r: int, d: int, L: int, seed: int, phi_zero: bool = False) -> GramInstance:
    if not 1 <= r < T:
        raise ValidationError(f"need 1 <= r < T, got r={r}, T={T}")
    if d < 1 or L < 1:
        raise ValidationError("d and L must be positive")
    rng = CounterRNG(seed, "prop2")
    lam = random_psd(r, rng)
    phi = np.zeros((T - r, T - r)) if phi_zero else random_psd(T - r, rng)
    ops = rng.normal(L * d * T).reshape(L, d, T)
    return GramInstance(T, r, d, L, lam, phi, ops)


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gram_blockwise(inst: GramInstance) -> tuple[np.ndarray, np.ndarray]:
    """Principal and residual Gram parts from per-block traces."""
    A = inst.operators[:, :, : inst.r]
    B = inst.operators[:, :, inst.r :]
    principal = np.einsum("ldr,rs,mds->lm", A, inst.lambda_block, A)
    residual = np.einsum("ldr,rs,mds->lm", B, inst.phi_block, B)
    return principal, residual


def gram_dense(inst: GramInstance) -> np.ndarray:
    """``tr(M_l Sigma M_l'^T)`` with the full block-diagonal Sigma."""
    sigma = block_diag(inst.lambda_block, inst.phi_block)
    C = np.zeros((inst.L, inst.L))
    for i in range(inst.L):
        for j in range(inst.L):
            C[i, j] = np.trace(inst.operators[i] @ sigma @ inst.operators[j].T)
    return C


def numerical_rank(C: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(C, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def check_prop2(T: int = 16, r: int = 2, d: int = 2, L: int = 10, seed: int = 0, phi_zero: bool = False) -> dict:
    """Gram decomposition, rank bound, PSD-ness and entrywise error bound."""
    inst = make_prop2_instance(T, r, d, L, seed, phi_zero)
    principal, residual = gram_blockwise(inst)
    C = gram_dense(inst)
    decomposition_err = float(np.max(np.abs(C - (principal + residual))))
    rank = numerical_rank(principal)
    B = inst.operators[:, :, r:]
    b_norms = np.linalg.norm(B.reshape(L, -1), axis=1)
    phi_norm = float(np.linalg.norm(inst.phi_block, 2)) if T - r else 0.0
    bound = phi_norm * np.outer(b_norms, b_norms)
    violation = float(np.max(np.abs(C - principal) - bound))
    eig = np.linalg.eigvalsh(0.5 * (principal + principal.T))
    lam_max = max(float(eig[-1]), 0.0)
    root = psd_sqrt(inst.lambda_block)
    G = (inst.operators[:, :, :r] @ root).reshape(L, -1)
    factor_err = float(np.max(np.abs(G @ G.T - principal)))
    checks = {
        "decomposition": decomposition_err < TRACE_TOL,
        "rank": rank <= d * r,
        "bound": violation <= BOUND_SLACK,
        "psd": float(eig[0]) >= -PSD_RTOL * lam_max and factor_err < TRACE_TOL,
    }
    return {
        "proposition": 2,
        "params": {"T": T, "r": r, "d": d, "L": L, "seed": seed},
        "metrics": {"decomposition_err": decomposition_err, "numerical_rank": rank, "rank_bound": d * r,
                    "max_bound_violation": violation, "min_eigenvalue": float(eig[0]),
                    "factorization_err": factor_err, "checks": checks},
        "pass": bool(all(checks.values())),
    }


def bound_tightness(T: int = 16, r: int = 2, d: int = 2, c: float = 0.7, seed: int = 0) -> float:
    """Gap-to-bound ratio for ``Phi = c I`` and a shared rank-1 ``B``."""
    rng = CounterRNG(seed, "prop2/tight")
    u = rng.normal(d)
    w = rng.normal(T - r)
    Bm = np.outer(u, w)
    gap = abs(np.trace(Bm @ (c * np.eye(T - r)) @ Bm.T))
    bound = c * np.linalg.norm(Bm) ** 2
    return float(gap / bound)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
