"""Reference optimal-transport solvers for desk-scale instances.

These exist to cross-check the stochastic dual estimator from an
independent direction: a log-domain Sinkhorn iteration for the
entropy-regularized problem, and brute-force permutation enumeration for
the unregularized one. Both are pure, deterministic, and deliberately
naive — correctness over speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np


class ConvergenceError(RuntimeError):
    """Sinkhorn failed to reach the marginal tolerance; carries the residual."""

    def __init__(self, residual: float, max_iter: int):
        super().__init__(
            f"marginal residual {residual:.3e} after {max_iter} iterations"
        )
        self.residual = residual


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure: rows of `atoms`, one weight each."""

    atoms: np.ndarray  # (n, dim)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=np.float64)
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("one weight per atom required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.atoms.shape[0]

    @staticmethod
    def uniform(atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=np.float64)
        n = atoms.shape[0]
        return DiscreteMeasure(atoms, np.full(n, 1.0 / n))


def squared_cost(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """C[i, j] = ||xs_i - ys_j||^2, the cost used everywhere in this package."""
    diff = xs[:, None, :] - ys[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def sinkhorn_distance(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    epsilon: float,
    max_iter: int = 500_000,
    tol: float = 1e-9,
) -> tuple[float, np.ndarray]:
    """Entropy-regularized OT between P and Q under squared Euclidean cost.

    Minimizes E_coupling[cost] + epsilon * KL(coupling || product of marginals)
    and returns (objective value, coupling). The coupling has shape
    (len(P), len(Q)); its column sums match Q.weights exactly by construction
    (the column potential is refreshed last) and its row sums match P.weights
    within `tol` at convergence.

    Scaling updates run in the log domain so epsilon = 0.01 stays finite at
    float64 even for well-separated atoms, and the potentials are warm-started
    along a geometric epsilon schedule — plain iteration stalls when the
    optimal coupling is near-degenerate (cost gaps much larger than epsilon).
    The returned value is always computed at the requested epsilon.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    C = squared_cost(P.atoms, Q.atoms)
    # zero-weight atoms contribute log 0 = -inf, which log-domain updates absorb
    with np.errstate(divide="ignore"):
        log_p = np.log(P.weights)
        log_q = np.log(Q.weights)

    f = np.zeros(len(P))
    g = np.zeros(len(Q))

    level = max(1.0, float(C.max()) / 2.0)
    while level > epsilon * 1.0001:
        for _ in range(100):
            f = -level * _lse_rows(log_q[None, :] + (g[None, :] - C) / level)
            g = -level * _lse_rows(log_p[None, :] + (f[None, :] - C.T) / level)
        level = max(level * 0.5, epsilon)

    residual = np.inf
    for _ in range(max_iter):
        # exact row-marginal fit given g, then column fit given f
        with np.errstate(invalid="ignore"):
            f = -epsilon * _lse_rows(log_q[None, :] + (g[None, :] - C) / epsilon)
            g = -epsilon * _lse_rows((log_p[None, :] + (f[None, :] - C.T) / epsilon))
        coupling = _coupling_from(log_p, log_q, f, g, C, epsilon)
        residual = float(np.abs(coupling.sum(axis=1) - P.weights).max())
        if residual <= tol:
            break
    else:
        raise ConvergenceError(residual, max_iter)

    exponent = (f[:, None] + g[None, :] - C) / epsilon
    value = float((coupling * C).sum() + epsilon * (coupling * exponent).sum())
    return value, coupling


def _lse_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp that tolerates -inf entries (zero-weight atoms)."""
    mx = np.max(m, axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return (mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True)))[:, 0]


def _coupling_from(log_p, log_q, f, g, C, epsilon) -> np.ndarray:
    log_coupling = (
        log_p[:, None] + log_q[None, :] + (f[:, None] + g[None, :] - C) / epsilon
    )
    return np.exp(log_coupling)


def entropic_primal_value(
    coupling: np.ndarray, P: DiscreteMeasure, Q: DiscreteMeasure, epsilon: float
) -> float:
    """Evaluate E[cost] + epsilon * KL(coupling || P x Q) for any given coupling."""
    C = squared_cost(P.atoms, Q.atoms)
    ref = P.weights[:, None] * Q.weights[None, :]
    mask = coupling > 0
    kl = float(
        np.where(mask, coupling * np.log(np.where(mask, coupling / ref, 1.0)), 0.0).sum()
    )
    return float((coupling * C).sum() + epsilon * kl)


def exact_ot_uniform(P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """Unregularized OT value for equal-size uniform measures, n <= 8.

    By Birkhoff's theorem the optimum sits on a permutation coupling, so the
    value is min over permutations s of (1/n) sum_i cost(p_i, q_{s(i)}) —
    enumerated outright, which is what makes this an independent oracle.
    """
    n = len(P)
    if len(Q) != n:
        raise ValueError("measures must have equal support size")
    if n > 8:
        raise ValueError("enumeration oracle is limited to n <= 8")
    if not (
        np.allclose(P.weights, 1.0 / n, atol=1e-12)
        and np.allclose(Q.weights, 1.0 / n, atol=1e-12)
    ):
        raise ValueError("uniform weights required")

    C = squared_cost(P.atoms, Q.atoms)
    idx = np.arange(n)
    best = np.inf
    for perm in permutations(range(n)):
        best = min(best, C[idx, list(perm)].sum())
    return float(best / n)
