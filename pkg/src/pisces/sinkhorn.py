"""Log-domain entropic Sinkhorn solver with relaxed (partial-mass) marginals.

The solver iterates on log-scaling vectors only; the plan is exponentiated
once at the end, so kernel entries down to exp(-C/epsilon) ~ 1e-90 never
underflow mid-iteration. Marginals are uniform. A target transported
fraction m in (0, 1] is mapped to a marginal-relaxation exponent
tau = rho / (rho + epsilon) with rho = epsilon * m / (1 - m); m >= 0.999 is
treated as the balanced problem (tau = 1). Convergence is declared on the
max-norm change of the log-scaling vectors, never on marginal residuals,
which are reported for diagnostics only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PartialOTConfig",
    "Relaxation",
    "TransportPlan",
    "mass_to_relaxation",
    "solve_partial_ot",
    "plan_cost",
]

# Defaults shared with the cost pipeline: entropic temperature 0.05 and
# transported fraction 0.9 on costs normalized to [0, 1].
DEFAULT_EPSILON = 0.05
DEFAULT_MASS = 0.9
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class PartialOTConfig:
    """Solver knobs: temperature, transported fraction, budget, tolerance."""

    epsilon: float = DEFAULT_EPSILON
    mass: float = DEFAULT_MASS
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0.0 < self.mass <= 1.0:
            raise ValueError(f"invalid-mass: mass must lie in (0, 1], got {self.mass}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.tol > 0 and math.isfinite(self.tol)):
            raise ValueError(f"tol must be positive and finite, got {self.tol}")


@dataclass(frozen=True)
class Relaxation:
    """Unbalanced strength rho and the marginal exponents it induces."""

    rho: float  # math.inf in the balanced case
    tau_a: float
    tau_b: float


@dataclass(frozen=True)
class TransportPlan:
    """Solver output: the plan plus convergence diagnostics."""

    plan: np.ndarray
    iters_used: int
    marginal_residual: float
    transported_mass: float


def mass_to_relaxation(m: float, epsilon: float) -> Relaxation:
    """Map a target transported fraction to marginal-relaxation exponents.

    m >= 0.999 yields the balanced solver (rho = inf, tau = 1); otherwise
    rho = epsilon * m / (1 - m) and tau_a = tau_b = rho / (rho + epsilon).
    """
    if not 0.0 < m <= 1.0:
        raise ValueError(f"invalid-mass: m must lie in (0, 1], got {m}")
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise ValueError(f"epsilon must be positive and finite, got {epsilon}")
    if m >= 0.999:
        return Relaxation(math.inf, 1.0, 1.0)
    rho = epsilon * m / (1.0 - m)
    tau = rho / (rho + epsilon)
    return Relaxation(rho, tau, tau)


def _lse(m: np.ndarray, axis: int) -> np.ndarray:
    """Row/column log-sum-exp with max-subtraction."""
    mx = np.max(m, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.exp(m - mx).sum(axis=axis))


def solve_partial_ot(cost, cfg: PartialOTConfig | None = None) -> TransportPlan:
    """Solve entropic (possibly unbalanced) OT with uniform marginals.

    `cost` is an N x M array, or any object with a `.C` attribute holding
    one; entries are expected in [0, 1] (the cost-matrix builder enforces
    this). Non-convergence within max_iters is not an error: the current
    plan is returned with iters_used == max_iters.
    """
    if cfg is None:
        cfg = PartialOTConfig()
    c = np.asarray(getattr(cost, "C", cost), dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError(f"bad-cost: expected a nonempty 2-D cost matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("bad-cost: cost matrix contains non-finite entries")
    if np.any(c < 0):
        raise ValueError("bad-cost: cost matrix contains negative entries")

    n, m_cols = c.shape
    relax = mass_to_relaxation(cfg.mass, cfg.epsilon)
    log_mu = np.full(n, -math.log(n))
    log_nu = np.full(m_cols, -math.log(m_cols))
    # Kernel carries the marginal weights (entropy measured against mu x nu).
    # With costs in [0, 1] this pins transported mass into (0, 1]: relaxing
    # the marginals can only drop mass, never inflate it past the balanced 1.
    log_k = log_mu[:, None] + log_nu[None, :] - c / cfg.epsilon

    log_u = np.zeros(n)
    log_v = np.zeros(m_cols)
    iters_used = cfg.max_iters
    for it in range(1, cfg.max_iters + 1):
        log_kv = _lse(log_k + log_v[None, :], axis=1)
        log_u_new = relax.tau_a * (log_mu - log_kv)
        log_ktu = _lse(log_k + log_u_new[:, None], axis=0)
        log_v_new = relax.tau_b * (log_nu - log_ktu)
        change = max(
            float(np.max(np.abs(log_u_new - log_u))),
            float(np.max(np.abs(log_v_new - log_v))),
        )
        log_u, log_v = log_u_new, log_v_new
        if change < cfg.tol:
            iters_used = it
            break

    plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
    residual = max(
        float(np.max(np.abs(plan.sum(axis=1) - relax.tau_a * np.exp(log_mu)))),
        float(np.max(np.abs(plan.sum(axis=0) - relax.tau_b * np.exp(log_nu)))),
    )
    return TransportPlan(
        plan=plan,
        iters_used=iters_used,
        marginal_residual=residual,
        transported_mass=float(plan.sum()),
    )


def plan_cost(plan, cost) -> float:
    """Transport objective <P, C> = sum_ij P_ij * C_ij."""
    p = np.asarray(getattr(plan, "plan", plan), dtype=np.float64)
    c = np.asarray(getattr(cost, "C", cost), dtype=np.float64)
    if p.shape != c.shape:
        raise ValueError(f"shape mismatch: plan {p.shape} vs cost {c.shape}")
    return float(np.sum(p * c))
