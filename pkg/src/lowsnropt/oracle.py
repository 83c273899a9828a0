"""Exact LP reference solver with optimality certification.

Wraps the HiGHS dual simplex (via :func:`scipy.optimize.linprog`) behind a
contract: an ``optimal`` solution carries row duals and bound duals whose
dual objective matches the primal objective to 1e-7 relative, with primal
and dual residuals at most 1e-8 on normalized rows and per-row
complementarity at most 1e-7.  The solve is deterministic: identical
programs produce identical solutions.

Dual sign conventions used throughout the package, for the problem

    min c'v  s.t.  A v <= b (dual u >= 0),  E v = f (dual w free),
                   lo <= v <= up (duals l >= 0, m >= 0):

stationarity ``c + A'u + E'w - l + m = 0`` and dual objective
``-b'u - f'w + lo'l - up'm``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

if TYPE_CHECKING:  # pragma: no cover
    from .formulation import FeasibilityResult, FlowProgram


class OracleError(RuntimeError):
    """The exact solver failed its own certification contract."""


PRIMAL_RESIDUAL_TOL = 1e-8
DUAL_RESIDUAL_TOL = 1e-8
RELATIVE_GAP_TOL = 1e-7
COMPLEMENTARITY_TOL = 1e-7

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def solve_lp(c, A_ub, b_ub, A_eq, b_eq, lower, upper):
    """Deterministic HiGHS dual-simplex solve; returns the raw scipy result."""
    bounds = np.column_stack([lower, upper])
    if A_ub is not None and A_ub.shape[0] == 0:
        A_ub, b_ub = None, None
    if A_eq is not None and A_eq.shape[0] == 0:
        A_eq, b_eq = None, None
    return linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs-ds",
        options=dict(_HIGHS_OPTIONS),
    )


@dataclass(frozen=True)
class OracleSolution:
    """Certified solve outcome.

    When ``status == "optimal"`` all arrays are populated; duals refer to the
    normalized rows (raw-row duals are the normalized ones divided by the
    row scale).  When ``status == "infeasible"``, ``certificate`` carries the
    phase-1 outcome with its Farkas-style row weights.
    """

    status: str  # "optimal" | "infeasible"
    objective: float | None = None
    x: np.ndarray | None = None
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    duals_lower: np.ndarray | None = None
    duals_upper: np.ndarray | None = None
    dual_objective: float | None = None
    max_primal_residual: float = 0.0
    max_dual_residual: float = 0.0
    max_complementarity: float = 0.0
    certificate: "FeasibilityResult | None" = None


def solve_exact(program: "FlowProgram") -> OracleSolution:
    """Solve the flow program exactly and certify the solution.

    Unboundedness cannot occur (the objective is bounded below by zero), so
    it is escalated as :class:`OracleError`; infeasibility is a regular
    return value with a certificate.
    """
    from .formulation import check_feasibility

    A_n, b_n = program.normalized_ub()
    E_n, f_n = program.normalized_eq()
    res = solve_lp(program.c, A_n, b_n, E_n, f_n, program.lower, program.upper)
    if res.status == 2:
        return OracleSolution(status="infeasible", certificate=check_feasibility(program))
    if res.status != 0:  # pragma: no cover - contract violation
        raise OracleError(f"unexpected solver status {res.status}: {res.message}")

    v = np.asarray(res.x)
    u = -np.asarray(res.ineqlin.marginals) if A_n.shape[0] else np.zeros(0)
    w = -np.asarray(res.eqlin.marginals) if E_n.shape[0] else np.zeros(0)
    dual_lo = np.asarray(res.lower.marginals)
    dual_up = -np.asarray(res.upper.marginals)

    objective = float(program.c @ v)
    slack = b_n - A_n @ v if A_n.shape[0] else np.zeros(0)
    primal_residual = max(
        float(np.max(-slack, initial=0.0)),
        float(np.max(np.abs(E_n @ v - f_n), initial=0.0)) if E_n.shape[0] else 0.0,
        float(np.max(program.lower - v, initial=0.0)),
        float(np.max(v - program.upper, initial=0.0)),
    )
    stationarity = program.c.copy()
    if A_n.shape[0]:
        stationarity += A_n.T @ u
    if E_n.shape[0]:
        stationarity += E_n.T @ w
    stationarity += dual_up - dual_lo
    dual_residual = max(
        float(np.max(np.abs(stationarity), initial=0.0)),
        float(np.max(-u, initial=0.0)),
        float(np.max(-dual_lo, initial=0.0)),
        float(np.max(-dual_up, initial=0.0)),
    )
    finite_up = np.where(np.isfinite(program.upper), program.upper, 0.0)
    dual_objective = float(
        -(b_n @ u if A_n.shape[0] else 0.0)
        - (f_n @ w if E_n.shape[0] else 0.0)
        + program.lower @ dual_lo
        - finite_up @ dual_up
    )
    complementarity = max(
        float(np.max(np.abs(u * slack), initial=0.0)),
        float(np.max(np.abs(dual_lo * (v - program.lower)), initial=0.0)),
        float(np.max(np.abs(dual_up * (program.upper - v)), initial=0.0)),
    )

    solution = OracleSolution(
        status="optimal",
        objective=objective,
        x=v,
        duals_ub=u,
        duals_eq=w,
        duals_lower=dual_lo,
        duals_upper=dual_up,
        dual_objective=dual_objective,
        max_primal_residual=primal_residual,
        max_dual_residual=dual_residual,
        max_complementarity=complementarity,
    )
    _certify(solution)
    return solution


def _certify(sol: OracleSolution) -> None:
    scale = max(1.0, abs(sol.objective))
    if sol.max_primal_residual > PRIMAL_RESIDUAL_TOL * max(1.0, scale):
        raise OracleError(f"primal residual {sol.max_primal_residual:.3e} out of tolerance")
    if sol.max_dual_residual > DUAL_RESIDUAL_TOL * max(1.0, scale):
        raise OracleError(f"dual residual {sol.max_dual_residual:.3e} out of tolerance")
    gap = abs(sol.objective - sol.dual_objective) / scale
    if gap > RELATIVE_GAP_TOL:
        raise OracleError(f"primal-dual gap {gap:.3e} out of tolerance")
    if sol.max_complementarity > COMPLEMENTARITY_TOL * scale:
        raise OracleError(f"complementarity {sol.max_complementarity:.3e} out of tolerance")
