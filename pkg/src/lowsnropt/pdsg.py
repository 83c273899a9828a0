"""Decentralized primal-dual subgradient solver for the flow program.

The coding, aggregation, capacity and budget rows are dualized; the flows
stay inside their per-commodity conservation polytopes.  At a multiplier
point the dualized Lagrangian separates: each hyperarc's (y, z, P) block is
linear over its boxes and minimizes in closed form at box endpoints
(:func:`eval_subproblem`), and each commodity's flow block is a small
min-cost flow over its conservation polytope.  Summing the block minima
gives the concave dual function exactly, together with a supergradient (the
constraint residuals at the minimizers) and a certificate (the flow blocks
are bounded through their LP potentials, valid for any potentials).

The iteration is weighted dual averaging in standard form: supergradients
accumulate into ``s`` with weights ``sigma_k = 1`` and the next multiplier
point is the prox-regularized best response

    d_{k+1} = argmax_{d in caps} <s_{k+1}, d> - theta_k * V(d),

with ``V`` a diagonally scaled half squared distance and
``theta_k = theta0 * sqrt(k + 1)`` nondecreasing; ``theta0`` is auto-tuned
from the first supergradient norm.  Primal candidates come for free: the
flow minimizers and their running weighted averages are conservation
feasible, and :func:`repair_primal` lifts any flow pattern to a fully
feasible point (coded rate = max per-sink flow, aggregate = session sum,
power = aggregate/gamma), blending toward a strictly budget-slack anchor
when a budget overflows.  The reported duality gap therefore pairs an
exactly feasible objective with a certified lower bound and never
increases.  When the dual-averaging bound stalls, a cutting-plane polish
re-uses the stored dual evaluations to propose better multiplier points;
all bounds still come from direct dual-function evaluations.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .formulation import FlowProgram, RowTag
from .oracle import solve_lp


class ProjectionError(RuntimeError):
    """The flow projection failed to converge (empty or ill-posed polytope)."""


# -- points and state -------------------------------------------------------


@dataclass
class DualPoint:
    """Multipliers: lam (coding rows, >=0), nu (aggregate rows, free),
    mu (capacity rows, >=0), zeta (budget rows, >=0)."""

    lam: np.ndarray  # (H, C)
    nu: np.ndarray  # (H,)
    mu: np.ndarray  # (H,)
    zeta: np.ndarray  # (N,)

    def copy(self) -> "DualPoint":
        return DualPoint(self.lam.copy(), self.nu.copy(), self.mu.copy(), self.zeta.copy())


@dataclass
class PrimalPoint:
    """Primal blocks: per-commodity hyperarc flows x, per-session coded rates y,
    aggregate rates z, transmit powers P."""

    x: np.ndarray  # (H, C)
    y: np.ndarray  # (H, M)
    z: np.ndarray  # (H,)
    P: np.ndarray  # (H,)

    def copy(self) -> "PrimalPoint":
        return PrimalPoint(self.x.copy(), self.y.copy(), self.z.copy(), self.P.copy())


@dataclass
class TraceRow:
    iter: int
    dual_value: float
    primal_value: float
    gap: float
    max_residual: float
    wallclock_ns: int


@dataclass
class IterationState:
    """Mutable dual-averaging state: iteration counter, aggregated
    supergradients ``s`` with total weight ``S``, current prox scale, the
    current pair, running weighted averages, and best-so-far bounds."""

    k: int
    primal: PrimalPoint  # block minimizers at the current multipliers
    dual: DualPoint
    s: DualPoint  # aggregated supergradients
    S: float
    theta: float
    avg_primal: PrimalPoint  # weighted sums; divide by S for the average
    avg_dual: DualPoint
    recent_primal: PrimalPoint  # restarted accumulator (tail average)
    recent_dual: DualPoint
    recent_S: float
    best_primal_value: float
    best_dual_value: float
    best_point: PrimalPoint | None
    best_residual: float
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def best_gap(self) -> float:
        return self.best_primal_value - self.best_dual_value


@dataclass(frozen=True)
class PdsgOptions:
    """Stopping and tuning knobs.

    ``gap_tol`` is relative: the solve stops once the best duality gap is at
    most ``gap_tol * max(|best primal|, 1e-12)``.  ``seed`` is recorded for
    reproducibility bookkeeping; the iteration itself is deterministic.

    ``step_rule`` selects the prox growth: "adagrad" scales each multiplier
    coordinate by its own accumulated squared supergradients (faster on
    instances whose multipliers span orders of magnitude), "sqrt" is the
    scalar schedule ``theta0 * sqrt(k + 1)`` with ``theta0`` tuned from the
    first supergradient norm.  ``theta_scale`` multiplies either prox;
    ``None`` picks the rule's calibrated default.
    """

    max_iter: int = 4000
    gap_tol: float = 1e-2
    seed: int = 0
    check_every: int = 50
    step_rule: str = "adagrad"
    theta_scale: float | None = None
    cap_mult: float = 10.0
    bundle_rounds: int = 10
    max_cuts: int = 80

    def effective_theta_scale(self) -> float:
        if self.theta_scale is not None:
            return self.theta_scale
        return 3.0 if self.step_rule == "adagrad" else 0.1


@dataclass
class SolveReport:
    """Best feasible point found, its certified bounds, and traces."""

    status: str  # "converged" | "max_iter" | "infeasible" | "no_feasible_point"
    objective: float
    dual_bound: float
    gap: float
    relative_gap: float
    iterations: int
    powers: np.ndarray | None
    rates: np.ndarray | None
    point: PrimalPoint | None
    max_conservation_residual: float
    max_budget_violation: float
    max_capacity_violation: float
    trace: list[TraceRow]
    wallclock_s: float
    certificate: object | None = None


# -- context ----------------------------------------------------------------


@dataclass
class SaddleContext:
    """Precomputed arrays shared by every iteration."""

    program: FlowProgram
    H: int
    M: int
    C: int
    N: int
    gammas: np.ndarray  # (H,)
    ncap: np.ndarray  # (H,) capacity row normalizers 1/max(1, gamma)
    sender_of: np.ndarray  # (H,) node index of each hyperarc's sender
    session_of: np.ndarray  # (C,) session index of each commodity
    node_budgets: np.ndarray  # (N,)
    x_cap: np.ndarray  # (H, C)
    y_cap: np.ndarray  # (H, M)
    z_cap: np.ndarray  # (H,)
    p_cap: np.ndarray  # (H,)
    cons: np.ndarray  # (N, H) divergence matrix
    cons_rhs: np.ndarray  # (N, C)
    base: np.ndarray  # (H,) natural multiplier scale, max(1, 1/gamma)
    lam_cap: float
    nu_cap: float
    mu_cap: float
    zeta_cap: float
    grad_lipschitz: float  # ||cons||_2^2, projection fallback step
    shortest_path_cost: np.ndarray  # (C,) power-per-rate of cheapest route
    rho: dict = field(default_factory=dict)  # per-block prox scales
    flow_eq: sp.csr_matrix | None = None  # block-diagonal conservation matrix
    flow_rhs: np.ndarray | None = None
    flow_ub: np.ndarray | None = None

    def session_columns(self, m: int) -> np.ndarray:
        return np.nonzero(self.session_of == m)[0]


def _shortest_path_costs(program: FlowProgram) -> np.ndarray:
    """Cheapest power-per-rate route cost per commodity (Dijkstra).

    Arc cost is the inverse gamma of the smallest hyperarc covering the arc;
    used only for magnitude estimates (multiplier caps, prox tuning).
    """
    inst = program.instance
    ids = inst.node_ids()
    pos = {nid: i for i, nid in enumerate(ids)}
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(ids))}
    for (tail, head), owners in program.arc_graph.owners.items():
        best = max(program.hyperarcs[h].gamma for h in owners)
        adj[pos[tail]].append((pos[head], 1.0 / best))
    costs = np.zeros(program.vidx.n_commodities)
    dist_cache: dict[int, np.ndarray] = {}
    for ci, (m, sink) in enumerate(program.vidx.commodities):
        src = pos[inst.sessions[m].source]
        if src not in dist_cache:
            dist = np.full(len(ids), np.inf)
            dist[src] = 0.0
            heap = [(0.0, src)]
            while heap:
                d, u = heapq.heappop(heap)
                if d > dist[u]:
                    continue
                for v, c in adj[u]:
                    nd = d + c
                    if nd < dist[v]:
                        dist[v] = nd
                        heapq.heappush(heap, (nd, v))
            dist_cache[src] = dist
        costs[ci] = dist_cache[src][pos[sink]] * inst.sessions[m].demand
    return costs


def build_saddle_context(program: FlowProgram, cap_mult: float = 10.0) -> SaddleContext:
    """Assemble the iteration context; multiplier caps are ``cap_mult`` times
    the largest oracle-free magnitude estimate (objective-to-row-norm ratio
    and cheapest-route power per unit demand)."""
    vidx = program.vidx
    H, M, C = vidx.n_hyperarcs, vidx.n_sessions, vidx.n_commodities
    inst = program.instance
    ids = inst.node_ids()
    pos = {nid: i for i, nid in enumerate(ids)}
    N = len(ids)

    gammas = program.gammas
    ncap = 1.0 / np.maximum(1.0, gammas)
    sender_of = np.array([pos[h.sender] for h in program.hyperarcs], dtype=int)
    session_of = np.array([m for m, _ in vidx.commodities], dtype=int)
    node_budgets = np.array([n.power_budget for n in inst.nodes])

    upper = program.upper
    x_cap = upper[: H * C].reshape(H, C).copy() if H else np.zeros((H, C))
    y_cap = upper[vidx.y_offset : vidx.z_offset].reshape(H, M).copy() if H else np.zeros((H, M))
    z_cap = upper[vidx.z_offset : vidx.p_offset].copy()
    p_cap = upper[vidx.p_offset :].copy()

    cons = program.conservation_matrix()
    cons_rhs = np.zeros((N, C))
    for ci in range(C):
        cons_rhs[:, ci] = program.commodity_rhs(ci)

    sp_cost = _shortest_path_costs(program)
    base = np.maximum(1.0, 1.0 / gammas) if H else np.ones(0)
    norm_c = math.sqrt(H) if H else 1.0
    min_demand = min((s.demand for s in inst.sessions), default=1.0)
    est = max(
        norm_c,
        float(sp_cost.sum()) / max(min_demand, 1e-30),
        float(base.max(initial=1.0)),
        1.0,
    )
    cap = cap_mult * est

    lip = float(np.linalg.norm(cons, 2) ** 2) if H else 1.0

    ctx = SaddleContext(
        program=program,
        H=H,
        M=M,
        C=C,
        N=N,
        gammas=gammas,
        ncap=ncap,
        sender_of=sender_of,
        session_of=session_of,
        node_budgets=node_budgets,
        x_cap=x_cap,
        y_cap=y_cap,
        z_cap=z_cap,
        p_cap=p_cap,
        cons=cons,
        cons_rhs=cons_rhs,
        base=base,
        lam_cap=cap,
        nu_cap=cap,
        mu_cap=cap,
        zeta_cap=cap,
        grad_lipschitz=max(lip, 1e-12),
        shortest_path_cost=sp_cost,
    )
    # Prox scales: multipliers move on the natural per-hyperarc magnitude
    # (power per unit rate); primal boxes on their widths (used by the
    # projection tests and candidate bookkeeping).
    zeta_rho = np.ones(N)
    for i in range(N):
        mine = base[sender_of == i]
        if mine.size:
            zeta_rho[i] = float(np.median(mine))
    ctx.rho = {
        "x": np.maximum(x_cap, 1e-12),
        "y": np.maximum(y_cap, 1e-12),
        "z": np.maximum(z_cap, 1e-12),
        "P": np.maximum(p_cap, 1e-12),
        "lam": base[:, None],
        "nu": base,
        "mu": base,
        "zeta": zeta_rho,
    }
    if C:
        ctx.flow_eq = sp.block_diag([cons] * C, format="csr")
        ctx.flow_rhs = cons_rhs.T.ravel()
        ctx.flow_ub = x_cap.T.ravel()
    return ctx


# -- Lagrangian pieces --------------------------------------------------------


def primal_coefficients(ctx: SaddleContext, d: DualPoint):
    """Linear coefficients of the dualized Lagrangian on each primal block."""
    lam_per_session = np.zeros((ctx.H, ctx.M))
    for m in range(ctx.M):
        cols = ctx.session_columns(m)
        if cols.size:
            lam_per_session[:, m] = d.lam[:, cols].sum(axis=1)
    c_x = d.lam
    c_y = d.nu[:, None] - lam_per_session
    c_z = d.mu * ctx.ncap - d.nu
    c_p = 1.0 + d.zeta[ctx.sender_of] - d.mu * ctx.gammas * ctx.ncap
    return c_x, c_y, c_z, c_p


def dual_residuals(ctx: SaddleContext, p: PrimalPoint):
    """Residuals of the dualized rows at ``p`` (the dual supergradient)."""
    r_lam = p.x - p.y[:, ctx.session_of] if ctx.C else np.zeros((ctx.H, 0))
    r_nu = p.y.sum(axis=1) - p.z if ctx.M else -p.z
    r_mu = (p.z - ctx.gammas * p.P) * ctx.ncap
    r_zeta = np.bincount(ctx.sender_of, weights=p.P, minlength=ctx.N) - ctx.node_budgets
    return r_lam, r_nu, r_mu, r_zeta


def lagrangian_value(ctx: SaddleContext, p: PrimalPoint, d: DualPoint) -> float:
    """Dualized Lagrangian at the pair (p, d)."""
    r_lam, r_nu, r_mu, r_zeta = dual_residuals(ctx, p)
    return float(
        p.P.sum()
        + (d.lam * r_lam).sum()
        + d.nu @ r_nu
        + d.mu @ r_mu
        + d.zeta @ r_zeta
    )


def eval_subproblem(ctx: SaddleContext, h: int, d: DualPoint):
    """Exact minimizer of hyperarc ``h``'s Lagrangian block over its boxes.

    Every coordinate is linear, so it minimizes at a box endpoint: the upper
    endpoint when its coefficient is negative, the lower (zero) otherwise,
    with exact-zero coefficients tied to the lower endpoint.  Returns the
    block value and the minimizing block.
    """
    c_x, c_y, c_z, c_p = primal_coefficients(ctx, d)
    x = np.where(c_x[h] < 0, ctx.x_cap[h], 0.0)
    y = np.where(c_y[h] < 0, ctx.y_cap[h], 0.0)
    z = ctx.z_cap[h] if c_z[h] < 0 else 0.0
    P = ctx.p_cap[h] if c_p[h] < 0 else 0.0
    q = float(c_x[h] @ x + c_y[h] @ y + c_z[h] * z + c_p[h] * P)
    return q, {"x": x, "y": y, "z": float(z), "P": float(P)}


def box_dual_value(ctx: SaddleContext, d: DualPoint) -> float:
    """Hyperarc-separable dual value: block minima plus the budget constant.

    Equals ``sum_h q_h - sum_i zeta_i P_i``; a valid lower bound on the
    optimum, ignoring flow coupling (the x block is relaxed to its box).
    """
    c_x, c_y, c_z, c_p = primal_coefficients(ctx, d)
    total = (
        float(np.minimum(c_x, 0.0).ravel() @ ctx.x_cap.ravel())
        + float(np.minimum(c_y, 0.0).ravel() @ ctx.y_cap.ravel())
        + float(np.minimum(c_z, 0.0) @ ctx.z_cap)
        + float(np.minimum(c_p, 0.0) @ ctx.p_cap)
    )
    return total - float(d.zeta @ ctx.node_budgets)


def direct_box_dual_value(program: FlowProgram, ctx: SaddleContext, d: DualPoint) -> float:
    """Same dual value computed from the assembled sparse rows, without the
    per-hyperarc decomposition; used to cross-check the closed forms."""
    n_ub = program.A_ub.shape[0]
    n_eq = program.A_eq.shape[0]
    dual_ub = np.zeros(n_ub)
    dual_eq = np.zeros(n_eq)
    for i, t in enumerate(program.ub_tags):
        if t.kind == "coding":
            ci = program.vidx.commodities.index((t.session, t.sink))
            dual_ub[i] = d.lam[t.hyperarc, ci]
        elif t.kind == "capacity":
            dual_ub[i] = d.mu[t.hyperarc] * ctx.ncap[t.hyperarc]
    ids = program.instance.node_ids()
    for i, t in enumerate(program.ub_tags):
        if t.kind == "budget":
            dual_ub[i] = d.zeta[ids.index(t.node)]
    for i, t in enumerate(program.eq_tags):
        if t.kind == "aggregate":
            dual_eq[i] = d.nu[t.hyperarc]

    coef = program.c + program.A_ub.T @ dual_ub + program.A_eq.T @ dual_eq
    const = -float(program.b_ub @ dual_ub) - float(program.b_eq @ dual_eq)
    best = np.where(coef < 0, program.upper, program.lower)
    return float(coef @ best) + const


def flow_dual_bound(ctx: SaddleContext, lam: np.ndarray):
    """Exact flow part of the dual function: per commodity, the minimum of
    ``lam . x`` over the conservation polytope intersected with the flow box.

    All commodities solve as one block-diagonal LP on scale-normalized
    costs; each value is certified from the returned potentials (valid for
    any potentials), so the result is a true lower bound up to roundoff.
    Returns per-commodity bounds and the minimizing flows (a routing
    candidate); ``(None, None)`` if the solver fails.
    """
    if ctx.C == 0:
        return np.zeros(0), np.zeros((ctx.H, 0))
    cost = lam.T.ravel()
    scale = max(float(np.abs(cost).max(initial=0.0)), 1.0)
    res = solve_lp(
        cost / scale,
        None,
        None,
        ctx.flow_eq,
        ctx.flow_rhs,
        np.zeros(ctx.H * ctx.C),
        ctx.flow_ub,
    )
    if res.status != 0:
        return None, None
    w = -scale * np.asarray(res.eqlin.marginals).reshape(ctx.C, ctx.N)  # potentials
    flows = res.x.reshape(ctx.C, ctx.H).T
    reduced = lam + ctx.cons.T @ w.T
    bounds = -(w * ctx.cons_rhs.T).sum(axis=1) + (
        np.minimum(reduced, 0.0) * ctx.x_cap
    ).sum(axis=0)
    return bounds, flows


def route_flows(ctx: SaddleContext, lam: np.ndarray | None):
    """Routing candidate: per-commodity min-cost flows under the multiplier
    prices, tie-broken toward power-cheap hyperarcs.

    With zero multipliers this degenerates to pure cheapest-power routing,
    which seeds the solve with a strong feasible candidate.
    """
    if ctx.C == 0:
        return np.zeros((ctx.H, 0))
    tie = ctx.base / max(float(ctx.base.max(initial=1.0)), 1.0)
    cost = lam.T.ravel().copy() if lam is not None else np.zeros(ctx.H * ctx.C)
    scale = max(float(np.abs(cost).max(initial=0.0)), 1.0)
    cost = cost / scale + 1e-6 * np.tile(tie, ctx.C)
    res = solve_lp(
        cost,
        None,
        None,
        ctx.flow_eq,
        ctx.flow_rhs,
        np.zeros(ctx.H * ctx.C),
        ctx.flow_ub,
    )
    if res.status != 0:
        return None
    return res.x.reshape(ctx.C, ctx.H).T


@dataclass
class DualEvaluation:
    """One exact dual-function evaluation: value, supergradient, minimizers."""

    value: float
    supergradient: DualPoint
    primal: PrimalPoint  # block minimizers (flows from the flow LP)


def evaluate_dual(ctx: SaddleContext, d: DualPoint) -> DualEvaluation | None:
    """Exact dual function value with supergradient and block minimizers.

    The value combines the certified flow bounds with the closed-form box
    minima and the budget constant; the supergradient is the residual vector
    at the minimizers.  ``None`` if the flow subproblem solver fails.
    """
    c_x, c_y, c_z, c_p = primal_coefficients(ctx, d)
    y_hat = np.where(c_y < 0.0, ctx.y_cap, 0.0)
    z_hat = np.where(c_z < 0.0, ctx.z_cap, 0.0)
    p_hat = np.where(c_p < 0.0, ctx.p_cap, 0.0)
    bounds, flows = flow_dual_bound(ctx, d.lam)
    if bounds is None:
        return None
    value = (
        float(bounds.sum())
        + float((np.minimum(c_y, 0.0) * ctx.y_cap).sum())
        + float((np.minimum(c_z, 0.0) * ctx.z_cap).sum())
        + float((np.minimum(c_p, 0.0) * ctx.p_cap).sum())
        - float(d.zeta @ ctx.node_budgets)
    )
    primal = PrimalPoint(x=flows, y=y_hat, z=z_hat, P=p_hat)
    r_lam, r_nu, r_mu, r_zeta = dual_residuals(ctx, primal)
    return DualEvaluation(
        value=value,
        supergradient=DualPoint(lam=r_lam, nu=r_nu, mu=r_mu, zeta=r_zeta),
        primal=primal,
    )


def dual_value(ctx: SaddleContext, d: DualPoint):
    """Full dual function value (flow coupling included) and routing flows."""
    ev = evaluate_dual(ctx, d)
    if ev is None:
        return -np.inf, None
    return ev.value, ev.primal.x


# -- flow projection -----------------------------------------------------------


def project_flow_batch(
    ctx: SaddleContext,
    raw: np.ndarray,
    warm: np.ndarray | None = None,
    tol: float = 1e-11,
    max_newton: int = 200,
):
    """Euclidean projection of each commodity column of ``raw`` onto its flow
    polytope {conservation, 0 <= x <= cap}.

    Solves the projection dual (concave, piecewise quadratic, C1) by a
    semismooth Newton method batched over commodities, warm-started from the
    previous multipliers.  The step length maximizes the dual exactly along
    the Newton direction (bisection on the monotone directional slope), so
    every step ascends and no line-search constants are involved.
    Returns (x, multipliers).
    """
    A = ctx.cons
    H, C = ctx.H, ctx.C
    if C == 0:
        return np.zeros((H, 0)), np.zeros((ctx.N, 0))
    u = ctx.x_cap
    b = ctx.cons_rhs
    w = np.zeros((ctx.N, C)) if warm is None else warm.copy()
    scale = np.maximum(1.0, np.abs(b).max(axis=0))
    eye = np.eye(ctx.N)

    def gradient(wm):
        x = np.clip(raw - A.T @ wm, 0.0, u)
        return x, A @ x - b

    x, grad = gradient(w)
    active = np.abs(grad).max(axis=0) > tol * scale
    for _ in range(max_newton):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        t = raw[:, idx] - A.T @ w[:, idx]
        free = ((t > 0.0) & (t < u[:, idx])).astype(float)  # (H, k)
        # Per-commodity generalized Hessians A_F A_F^T, batched.
        AF = A[None, :, :] * free.T[:, None, :]  # (k, N, H)
        hess = AF @ A.T
        reg = 1e-10 * np.maximum(1.0, np.trace(hess, axis1=1, axis2=2) / ctx.N)
        hess = hess + reg[:, None, None] * eye[None, :, :]
        dirs = np.linalg.solve(hess, grad[:, idx].T[:, :, None])[..., 0]  # (k, N)
        s = A.T @ dirs.T  # (H, k), change of t per unit step

        def slope(tau):  # directional derivative, nonincreasing in tau
            xt = np.clip(t - s * tau, 0.0, u[:, idx])
            gt = A @ xt - b[:, idx]
            return np.einsum("kn,nk->k", dirs, gt)

        hi = np.ones(idx.size)
        for _ in range(80):
            positive = slope(hi) > 0.0
            if not positive.any():
                break
            hi = np.where(positive, hi * 2.0, hi)
        else:
            raise ProjectionError(
                "projection dual is unbounded; the flow polytope is empty "
                f"for commodities {list(idx)}"
            )
        lo = np.zeros(idx.size)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            pos = slope(mid) > 0.0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
        tau = 0.5 * (lo + hi)
        w[:, idx] = w[:, idx] + dirs.T * tau
        x, grad = gradient(w)
        active = np.abs(grad).max(axis=0) > tol * scale
    else:
        bad = np.nonzero(active)[0]
        x, w = _project_fallback(ctx, raw, w, bad, tol, scale)
        grad = A @ np.clip(raw - A.T @ w, 0.0, u) - b
        if (np.abs(grad).max(axis=0) > 100 * tol * scale).any():
            raise ProjectionError(
                f"projection did not converge for commodities {list(bad)}"
            )
    return np.clip(raw - A.T @ w, 0.0, u), w


def _project_fallback(ctx, raw, w, bad, tol, scale):
    """Slow-path refinement via L-BFGS-B on the projection dual."""
    from scipy.optimize import minimize

    A, u, b = ctx.cons, ctx.x_cap, ctx.cons_rhs
    for ci in bad:
        def neg_dual(wv, ci=ci):
            x = np.clip(raw[:, ci] - A.T @ wv, 0.0, u[:, ci])
            g = A @ x - b[:, ci]
            val = 0.5 * ((x - raw[:, ci]) ** 2).sum() + wv @ g
            return -val, -g

        res = minimize(
            neg_dual,
            w[:, ci],
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 20000, "ftol": 0.0, "gtol": tol * scale[ci] * 0.5},
        )
        w[:, ci] = res.x
    return np.clip(raw - A.T @ w, 0.0, u), w


def project_flows(
    ctx: SaddleContext, commodity: int, raw: np.ndarray, warm: np.ndarray | None = None
) -> np.ndarray:
    """Project one commodity's raw flow vector onto its polytope."""
    view = _CommodityView(ctx, commodity)
    x, _ = project_flow_batch(view, raw[:, None], None if warm is None else warm[:, None])
    return x[:, 0]


class _CommodityView:
    """A SaddleContext facade restricted to one commodity column."""

    def __init__(self, ctx: SaddleContext, ci: int):
        self.H = ctx.H
        self.C = 1
        self.N = ctx.N
        self.cons = ctx.cons
        self.cons_rhs = ctx.cons_rhs[:, ci : ci + 1]
        self.x_cap = ctx.x_cap[:, ci : ci + 1]
        self.grad_lipschitz = ctx.grad_lipschitz


# -- primal repair -------------------------------------------------------------


@dataclass
class RepairResult:
    point: PrimalPoint
    feasible: bool
    objective: float
    conservation_residual: float
    budget_violation: float
    node_power: np.ndarray | None = None


def repair_primal(
    ctx: SaddleContext, x: np.ndarray, interior: RepairResult | None = None
) -> RepairResult:
    """Cheapest fully consistent point over given flows: coded rate = largest
    per-sink flow, aggregate = session sum, power = aggregate / gamma.

    The point satisfies coding, aggregation and capacity rows by
    construction; it is feasible when every node budget holds.  When a budget
    is exceeded and a strictly budget-slack feasible point is available, the
    two are blended (a convex combination stays conservation feasible and the
    max is convex, so the blend is fully feasible); otherwise the flows are
    scaled down uniformly, trading demand satisfaction for budget
    satisfaction, and the scaled point is returned flagged infeasible.
    """
    y = np.zeros((ctx.H, ctx.M))
    for m in range(ctx.M):
        cols = ctx.session_columns(m)
        if cols.size:
            y[:, m] = x[:, cols].max(axis=1)
    z = y.sum(axis=1) if ctx.M else np.zeros(ctx.H)
    P = z / ctx.gammas if ctx.H else np.zeros(0)
    node_power = np.bincount(ctx.sender_of, weights=P, minlength=ctx.N)
    violation = float(np.max(node_power - ctx.node_budgets, initial=0.0))
    feasible = violation <= 1e-10 * max(1.0, float(ctx.node_budgets.max(initial=1.0)))
    if not feasible and interior is not None:
        ref = interior.point
        ref_power = interior.node_power
        over = node_power > ctx.node_budgets
        denom = node_power[over] - ref_power[over]
        with np.errstate(divide="ignore", invalid="ignore"):
            taus = (ctx.node_budgets[over] - ref_power[over]) / denom
        tau = float(np.clip(taus, 0.0, 1.0).min(initial=1.0)) * (1.0 - 1e-12)
        x = tau * x + (1.0 - tau) * ref.x
        y = tau * y + (1.0 - tau) * ref.y
        z = tau * z + (1.0 - tau) * ref.z
        P = tau * P + (1.0 - tau) * ref.P
        node_power = tau * node_power + (1.0 - tau) * ref_power
        violation = float(np.max(node_power - ctx.node_budgets, initial=0.0))
        feasible = violation <= 1e-10 * max(1.0, float(ctx.node_budgets.max(initial=1.0)))
    if not feasible:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(node_power > 0, ctx.node_budgets / node_power, np.inf)
        beta = min(1.0, float(ratios.min()))
        x, y, z, P = beta * x, beta * y, beta * z, beta * P
        node_power = beta * node_power
    cons_res = float(
        np.abs(ctx.cons @ x - ctx.cons_rhs).max(initial=0.0)
    ) if ctx.C else 0.0
    point = PrimalPoint(x=np.array(x), y=y, z=z, P=P)
    return RepairResult(
        point=point,
        feasible=feasible,
        objective=float(P.sum()),
        conservation_residual=cons_res,
        budget_violation=0.0 if feasible else violation,
        node_power=node_power,
    )


# -- the iteration ------------------------------------------------------------


def _clip_dual(ctx: SaddleContext, d: DualPoint) -> DualPoint:
    np.clip(d.lam, 0.0, ctx.lam_cap, out=d.lam)
    np.clip(d.nu, -ctx.nu_cap, ctx.nu_cap, out=d.nu)
    np.clip(d.mu, 0.0, ctx.mu_cap, out=d.mu)
    np.clip(d.zeta, 0.0, ctx.zeta_cap, out=d.zeta)
    return d


def _zero_primal(ctx) -> PrimalPoint:
    return PrimalPoint(
        x=np.zeros((ctx.H, ctx.C)),
        y=np.zeros((ctx.H, ctx.M)),
        z=np.zeros(ctx.H),
        P=np.zeros(ctx.H),
    )


def _zero_dual(ctx) -> DualPoint:
    return DualPoint(
        lam=np.zeros((ctx.H, ctx.C)),
        nu=np.zeros(ctx.H),
        mu=np.zeros(ctx.H),
        zeta=np.zeros(ctx.N),
    )


def _axpy(acc: PrimalPoint, point: PrimalPoint, sigma: float) -> None:
    acc.x += sigma * point.x
    acc.y += sigma * point.y
    acc.z += sigma * point.z
    acc.P += sigma * point.P


def _axpy_dual(acc: DualPoint, point: DualPoint, sigma: float) -> None:
    acc.lam += sigma * point.lam
    acc.nu += sigma * point.nu
    acc.mu += sigma * point.mu
    acc.zeta += sigma * point.zeta


def _flatten_dual(d: DualPoint) -> np.ndarray:
    return np.concatenate([d.lam.ravel(), d.nu, d.mu, d.zeta])


def _unflatten_dual(ctx: SaddleContext, v: np.ndarray) -> DualPoint:
    hc = ctx.H * ctx.C
    return DualPoint(
        lam=v[:hc].reshape(ctx.H, ctx.C).copy(),
        nu=v[hc : hc + ctx.H].copy(),
        mu=v[hc + ctx.H : hc + 2 * ctx.H].copy(),
        zeta=v[hc + 2 * ctx.H :].copy(),
    )


def _next_restart(k: int) -> int:
    """Power-of-two restart points for the tail average."""
    p = 1
    while p < k:
        p *= 2
    return p


class PdsgSolver:
    """Driver object owning the context, state, and candidate bookkeeping."""

    def __init__(self, program: FlowProgram, options: PdsgOptions = PdsgOptions()):
        self.program = program
        self.options = options
        self.ctx = build_saddle_context(program, options.cap_mult)
        self.theta0: float | None = None
        self.sigma = 1.0
        self.t_start_ns = time.perf_counter_ns()
        self.best_interior: RepairResult | None = None
        self._interior_slack = -np.inf
        self.best_dual_point: DualPoint | None = None
        self.cuts: list[tuple[np.ndarray, float, np.ndarray]] = []  # (d, g, r) flat
        self._trust = 2.0
        self._stagnation = 0
        self._cap_raises = 0
        self._last_best_dual = -np.inf
        self._last_flows: np.ndarray | None = None
        # Per-commodity pools of flow columns generated by the subproblems,
        # reweighted at checkpoints by the restricted recovery program.
        self.columns: list[list[np.ndarray]] = [[] for _ in range(self.ctx.C)]
        self._column_keys: list[set[bytes]] = [set() for _ in range(self.ctx.C)]
        self._columns_dirty = False
        self.state = self._initial_state()
        self._gsq = _zero_dual(self.ctx)

    def _initial_state(self) -> IterationState:
        ctx = self.ctx
        x0, _ = project_flow_batch(ctx, np.zeros((ctx.H, ctx.C)))
        rep = repair_primal(ctx, x0)
        p0 = PrimalPoint(
            x=x0,
            y=np.minimum(rep.point.y, ctx.y_cap),
            z=np.minimum(rep.point.z, ctx.z_cap),
            P=np.minimum(rep.point.P, ctx.p_cap),
        )
        return IterationState(
            k=0,
            primal=p0,
            dual=_zero_dual(ctx),
            s=_zero_dual(ctx),
            S=0.0,
            theta=0.0,
            avg_primal=_zero_primal(ctx),
            avg_dual=_zero_dual(ctx),
            recent_primal=_zero_primal(ctx),
            recent_dual=_zero_dual(ctx),
            recent_S=0.0,
            best_primal_value=np.inf,
            best_dual_value=-np.inf,
            best_point=None,
            best_residual=np.inf,
        )

    def seed_interior_anchor(self) -> None:
        """Seed the feasible-blend anchor from the slack-maximizing point.

        The Slater maximizer keeps every inequality row strictly slack, so
        its flow repair is feasible with strict budget slack; blending any
        later budget-violating candidate toward it yields feasible points.
        """
        ctx = self.ctx
        if ctx.C == 0:
            return
        result = slater_check(self.program)
        if result.x is None:
            return
        flows = result.x[: ctx.H * ctx.C].reshape(ctx.H, ctx.C)
        self._offer_flows(flows)

    # -- candidate bookkeeping ------------------------------------------

    def _offer_primal(self, rep: RepairResult) -> None:
        st = self.state
        if not rep.feasible:
            return
        if rep.objective < st.best_primal_value - 1e-15:
            st.best_primal_value = rep.objective
            st.best_point = rep.point
            st.best_residual = rep.conservation_residual
        slack = float(
            ((self.ctx.node_budgets - rep.node_power) / self.ctx.node_budgets).min(
                initial=1.0
            )
        )
        if slack > self._interior_slack:
            self._interior_slack = slack
            self.best_interior = rep

    def _offer_flows(self, flows: np.ndarray, line_search: bool = False) -> None:
        """Repair a flow candidate, tightening conservation first if needed.

        With ``line_search`` the candidate is also blended against the
        incumbent flows on a grid: convex combinations of conservation
        feasible flows stay conservation feasible, and the optimal solution
        typically splits sessions across routes, which single minimizers
        never do on their own.
        """
        ctx = self.ctx
        resid = float(np.abs(ctx.cons @ flows - ctx.cons_rhs).max(initial=0.0))
        if resid > 1e-9 * max(1.0, float(np.abs(ctx.cons_rhs).max(initial=1.0))):
            flows, _ = project_flow_batch(ctx, flows)
        self._offer_primal(repair_primal(ctx, flows, self.best_interior))
        if line_search and self.state.best_point is not None:
            incumbent = self.state.best_point.x
            for alpha in (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875):
                mix = alpha * flows + (1.0 - alpha) * incumbent
                self._offer_primal(repair_primal(ctx, mix, self.best_interior))

    def _offer_dual_eval(self, d: DualPoint, ev: DualEvaluation | None) -> None:
        if ev is None:
            return
        st = self.state
        if ev.value > st.best_dual_value:
            st.best_dual_value = ev.value
            self.best_dual_point = d.copy()
        self._remember_cut(d, ev)
        if self.ctx.C:
            self._remember_columns(ev.primal.x)
            self._offer_flows(ev.primal.x)

    def _remember_columns(self, flows: np.ndarray, cap: int = 48) -> None:
        """Pool distinct per-commodity flow columns for the recovery program."""
        for ci in range(self.ctx.C):
            col = flows[:, ci]
            key = np.round(col, 9).tobytes()
            if key in self._column_keys[ci]:
                continue
            self._column_keys[ci].add(key)
            self.columns[ci].append(col.copy())
            self._columns_dirty = True
            if len(self.columns[ci]) > cap:
                old = self.columns[ci].pop(0)
                self._column_keys[ci].discard(np.round(old, 9).tobytes())

    def _remember_cut(self, d: DualPoint, ev: DualEvaluation) -> None:
        self.cuts.append(
            (_flatten_dual(d), ev.value, _flatten_dual(ev.supergradient))
        )
        if len(self.cuts) > self.options.max_cuts:
            self.cuts.pop(0)

    # -- one dual-averaging step -----------------------------------------

    def step(self) -> None:
        """One weighted dual-averaging step on the dual function."""
        st, ctx = self.state, self.ctx
        ev = evaluate_dual(ctx, st.dual)
        if ev is None:
            st.k += 1
            return
        st.primal = ev.primal
        self._last_flows = ev.primal.x
        self._offer_dual_eval(st.dual, ev)
        g = ev.supergradient

        if self.theta0 is None:
            self.theta0 = self._tune_theta(g)

        sig = self.sigma
        _axpy_dual(st.s, g, sig)
        st.S += sig

        _axpy(st.avg_primal, ev.primal, sig)
        _axpy_dual(st.avg_dual, st.dual, sig)
        _axpy(st.recent_primal, ev.primal, sig)
        _axpy_dual(st.recent_dual, st.dual, sig)
        st.recent_S += sig
        if st.k + 1 == _next_restart(st.k + 1):
            st.recent_primal = _zero_primal(ctx)
            st.recent_dual = _zero_dual(ctx)
            st.recent_S = 0.0

        rho = self.ctx.rho
        ts = self.options.effective_theta_scale()
        if self.options.step_rule == "adagrad":
            gs = self._gsq
            gs.lam += (rho["lam"] * g.lam) ** 2
            gs.nu += (rho["nu"] * g.nu) ** 2
            gs.mu += (rho["mu"] * g.mu) ** 2
            gs.zeta += (rho["zeta"] * g.zeta) ** 2
            eps = 1e-30
            st.dual = _clip_dual(
                ctx,
                DualPoint(
                    lam=(rho["lam"] ** 2) * st.s.lam / (ts * np.sqrt(gs.lam) + eps),
                    nu=(rho["nu"] ** 2) * st.s.nu / (ts * np.sqrt(gs.nu) + eps),
                    mu=(rho["mu"] ** 2) * st.s.mu / (ts * np.sqrt(gs.mu) + eps),
                    zeta=(rho["zeta"] ** 2) * st.s.zeta / (ts * np.sqrt(gs.zeta) + eps),
                ),
            )
            total = (
                gs.lam.sum() + gs.nu.sum() + gs.mu.sum() + gs.zeta.sum()
            )
            n_coords = max(ctx.H * (ctx.C + 2) + ctx.N, 1)
            st.theta = ts * math.sqrt(total / n_coords)
        else:
            st.theta = self.theta0 * math.sqrt(st.k + 1)
            inv_t = 1.0 / st.theta
            st.dual = _clip_dual(
                ctx,
                DualPoint(
                    lam=(rho["lam"] ** 2) * st.s.lam * inv_t,
                    nu=(rho["nu"] ** 2) * st.s.nu * inv_t,
                    mu=(rho["mu"] ** 2) * st.s.mu * inv_t,
                    zeta=(rho["zeta"] ** 2) * st.s.zeta * inv_t,
                ),
            )
        st.k += 1

    def _tune_theta(self, g: DualPoint) -> float:
        """Scale the prox from the first supergradient norm (metric-weighted)."""
        rho = self.ctx.rho
        gsq = (
            ((rho["lam"] * g.lam) ** 2).sum()
            + ((rho["nu"] * g.nu) ** 2).sum()
            + ((rho["mu"] * g.mu) ** 2).sum()
            + ((rho["zeta"] * g.zeta) ** 2).sum()
        )
        n_coords = self.ctx.H * (self.ctx.C + 2) + self.ctx.N
        theta = math.sqrt(gsq / max(n_coords, 1)) * self.options.effective_theta_scale()
        return max(theta, 1e-12)

    # -- checkpoint work ----------------------------------------------------

    def _checkpoint(self) -> None:
        """Evaluate the averaged multipliers, harvest routing candidates, and
        polish the bound with the cutting-plane model if progress stalls."""
        st, ctx = self.state, self.ctx
        candidates = []
        if st.S > 0:
            candidates.append(self._scaled_dual(st.avg_dual, 1.0 / st.S))
        if st.recent_S > 0:
            candidates.append(self._scaled_dual(st.recent_dual, 1.0 / st.recent_S))
        if not candidates:
            candidates = [st.dual]
        best_lam = None
        best_val = -np.inf
        for d in candidates:
            ev = evaluate_dual(ctx, d)
            self._offer_dual_eval(d, ev)
            if ev is not None and ev.value > best_val:
                best_val, best_lam = ev.value, d.lam
            if ev is not None and ctx.C:
                self._offer_flows(ev.primal.x, line_search=True)
        routed = route_flows(ctx, best_lam)
        if routed is not None and ctx.C:
            self._offer_flows(routed, line_search=True)
        if st.recent_S > 0 and ctx.C:
            tail = self._scaled_primal(st.recent_primal, 1.0 / st.recent_S)
            self._offer_flows(tail.x, line_search=True)

        self._recover_primal()
        improved = st.best_dual_value > self._last_best_dual + 1e-12 + 1e-4 * abs(
            self._last_best_dual
        )
        gap_target = self.options.gap_tol * max(abs(st.best_primal_value), 1e-12)
        if not improved and np.isfinite(st.best_primal_value) and st.best_gap > gap_target:
            self._bundle_polish(gap_target)
        self._last_best_dual = st.best_dual_value
        self._maybe_raise_caps(improved)

    def _recover_primal(self) -> None:
        """Reweight the pooled flow columns by the restricted recovery LP.

        The min-power program restricted to convex combinations of each
        commodity's pooled columns is a small LP whose solution is feasible
        for the true program (combinations of conservation-feasible flows
        stay conservation feasible).  The subgradient trajectory supplies the
        columns; the reweighting recovers the route splitting that single
        minimizers cannot express.
        """
        ctx = self.ctx
        if not self._columns_dirty or ctx.C == 0:
            return
        self._columns_dirty = False
        sizes = [len(cols) for cols in self.columns]
        if min(sizes) == 0:
            return
        H, M, C, N = ctx.H, ctx.M, ctx.C, ctx.N
        nw = sum(sizes)
        woff = np.concatenate([[0], np.cumsum(sizes)])
        off_y = nw
        off_z = off_y + H * M
        off_p = off_z + H
        nv = off_p + H

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=int).ravel())
            cols.append(np.asarray(c, dtype=int).ravel())
            vals.append(np.asarray(v, dtype=float).ravel())

        # coding rows r = h*C + ci: sum_j w_cj X[h, j] - y[h, m(ci)] <= 0
        for ci in range(C):
            X = np.column_stack(self.columns[ci])  # (H, J)
            hh, jj = np.nonzero(X)
            add(hh * C + ci, woff[ci] + jj, X[hh, jj])
            add(np.arange(H) * C + ci, off_y + np.arange(H) * M + ctx.session_of[ci], -np.ones(H))
        # capacity rows r = H*C + h
        add(H * C + np.arange(H), off_z + np.arange(H), np.ones(H))
        add(H * C + np.arange(H), off_p + np.arange(H), -ctx.gammas)
        # budget rows r = H*C + H + node
        add(H * C + H + ctx.sender_of, off_p + np.arange(H), np.ones(H))
        n_ub = H * C + H + N
        A_ub = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_ub, nv),
        )
        b_ub = np.concatenate([np.zeros(H * C + H), ctx.node_budgets])

        rows, cols, vals = [], [], []
        # aggregate rows: sum_m y - z = 0 per h
        for m in range(M):
            add(np.arange(H), off_y + np.arange(H) * M + m, np.ones(H))
        add(np.arange(H), off_z + np.arange(H), -np.ones(H))
        # convexity rows: sum_j w_cj = 1 per commodity
        for ci in range(C):
            add(np.full(sizes[ci], H + ci), woff[ci] + np.arange(sizes[ci]), np.ones(sizes[ci]))
        A_eq = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(H + C, nv),
        )
        b_eq = np.concatenate([np.zeros(H), np.ones(C)])

        c = np.zeros(nv)
        c[off_p:] = 1.0
        lo = np.zeros(nv)
        hi = np.concatenate(
            [np.ones(nw), ctx.y_cap.ravel(), ctx.z_cap, ctx.p_cap]
        )
        res = solve_lp(c, A_ub, b_ub, A_eq, b_eq, lo, hi)
        if res.status != 0:
            return
        flows = np.zeros((H, C))
        for ci in range(C):
            X = np.column_stack(self.columns[ci])
            flows[:, ci] = X @ res.x[woff[ci] : woff[ci + 1]]
        self._offer_flows(flows)

    def _scaled_dual(self, acc: DualPoint, inv: float) -> DualPoint:
        return DualPoint(acc.lam * inv, acc.nu * inv, acc.mu * inv, acc.zeta * inv)

    def _scaled_primal(self, acc: PrimalPoint, inv: float) -> PrimalPoint:
        return PrimalPoint(acc.x * inv, acc.y * inv, acc.z * inv, acc.P * inv)

    def _bundle_polish(self, gap_target: float) -> None:
        """Cutting-plane ascent on the dual using stored evaluations.

        The dual function is concave and every stored (point, value,
        supergradient) triple yields a globally valid cut, so maximizing the
        cut model inside a trust box around the incumbent proposes a
        candidate; its exact evaluation either improves the bound (serious
        step, box grows) or sharpens the model (null step, box shrinks).
        """
        st, ctx = self.state, self.ctx
        if not self.cuts or self.best_dual_point is None:
            return
        rho_flat = np.concatenate(
            [
                np.broadcast_to(ctx.rho["lam"], (ctx.H, ctx.C)).ravel(),
                ctx.rho["nu"],
                ctx.rho["mu"],
                np.atleast_1d(ctx.rho["zeta"]),
            ]
        )
        dim = rho_flat.size
        lo_glob = np.concatenate(
            [
                np.zeros(ctx.H * ctx.C),
                np.full(ctx.H, -ctx.nu_cap),
                np.zeros(ctx.H),
                np.zeros(ctx.N),
            ]
        )
        hi_glob = np.concatenate(
            [
                np.full(ctx.H * ctx.C, ctx.lam_cap),
                np.full(ctx.H, ctx.nu_cap),
                np.full(ctx.H, ctx.mu_cap),
                np.full(ctx.N, ctx.zeta_cap),
            ]
        )
        for _ in range(self.options.bundle_rounds):
            if st.best_gap <= gap_target:
                break
            inc = _flatten_dual(self.best_dual_point)
            lo = np.maximum(lo_glob, inc - self._trust * rho_flat)
            hi = np.minimum(hi_glob, inc + self._trust * rho_flat)
            k = len(self.cuts)
            rows = sp.lil_matrix((k, dim + 1))
            rhs = np.empty(k)
            for i, (di, gi, ri) in enumerate(self.cuts):
                rows[i, :dim] = -ri
                rows[i, dim] = 1.0
                rhs[i] = gi - ri @ di
            c = np.zeros(dim + 1)
            c[dim] = -1.0
            bounds_lo = np.concatenate([lo, [-np.inf]])
            bounds_hi = np.concatenate([hi, [np.inf]])
            res = solve_lp(c, rows.tocsr(), rhs, None, None, bounds_lo, bounds_hi)
            if res.status != 0:
                break
            model_val = float(res.x[dim])
            if model_val <= st.best_dual_value + 1e-12:
                break
            d_try = _unflatten_dual(ctx, res.x[:dim])
            ev = evaluate_dual(ctx, d_try)
            if ev is None:
                break
            before = st.best_dual_value
            self._offer_dual_eval(d_try, ev)
            achieved = ev.value - before
            predicted = model_val - before
            if achieved >= 0.1 * predicted:
                self._trust = min(self._trust * 1.5, 100.0)
            else:
                self._trust = max(self._trust * 0.5, 1e-4)

    def _maybe_raise_caps(self, improved: bool) -> None:
        """Multiplier caps are estimates; if the bound stalls while some
        multiplier sits at its cap, the cap was too small: raise it."""
        st, ctx = self.state, self.ctx
        if improved:
            self._stagnation = 0
            return
        self._stagnation += 1
        at_cap = (
            (st.dual.lam.max(initial=0.0) >= 0.999 * ctx.lam_cap)
            or (np.abs(st.dual.nu).max(initial=0.0) >= 0.999 * ctx.nu_cap)
            or (st.dual.mu.max(initial=0.0) >= 0.999 * ctx.mu_cap)
            or (st.dual.zeta.max(initial=0.0) >= 0.999 * ctx.zeta_cap)
        )
        if self._stagnation >= 8 and at_cap and self._cap_raises < 3:
            ctx.lam_cap *= 10.0
            ctx.nu_cap *= 10.0
            ctx.mu_cap *= 10.0
            ctx.zeta_cap *= 10.0
            self._cap_raises += 1
            self._stagnation = 0

    # -- per-iteration bookkeeping ----------------------------------------

    def observe(self) -> None:
        """Repair the averaged flows and log a trace row."""
        st, ctx = self.state, self.ctx
        if st.S > 0:
            avg_p = self._scaled_primal(st.avg_primal, 1.0 / st.S)
            self._offer_primal(repair_primal(ctx, avg_p.x, self.best_interior))
        if st.recent_S > 0:
            tail_p = self._scaled_primal(st.recent_primal, 1.0 / st.recent_S)
            self._offer_primal(repair_primal(ctx, tail_p.x, self.best_interior))
        if self._last_flows is not None:
            self._offer_primal(
                repair_primal(ctx, self._last_flows, self.best_interior)
            )
        st.trace.append(
            TraceRow(
                iter=st.k,
                dual_value=st.best_dual_value,
                primal_value=st.best_primal_value,
                gap=st.best_gap,
                max_residual=st.best_residual if st.best_point is not None else np.inf,
                wallclock_ns=time.perf_counter_ns() - self.t_start_ns,
            )
        )

    def converged(self) -> bool:
        st = self.state
        if st.best_point is None:
            return False
        return st.best_gap <= self.options.gap_tol * max(abs(st.best_primal_value), 1e-12)


def iterate(solver: PdsgSolver) -> IterationState:
    """One full iteration: dual-averaging step, candidates, bookkeeping."""
    solver.step()
    if solver.state.k % solver.options.check_every == 0:
        solver._checkpoint()
    solver.observe()
    return solver.state


def solve_pdsg(program: FlowProgram, options: PdsgOptions = PdsgOptions()) -> SolveReport:
    """Run the primal-dual subgradient method on a feasibility-checked program."""
    from .formulation import check_feasibility

    t0 = time.perf_counter()
    feas = check_feasibility(program)
    if not feas.feasible:
        return SolveReport(
            status="infeasible",
            objective=np.nan,
            dual_bound=np.nan,
            gap=np.nan,
            relative_gap=np.nan,
            iterations=0,
            powers=None,
            rates=None,
            point=None,
            max_conservation_residual=np.nan,
            max_budget_violation=np.nan,
            max_capacity_violation=np.nan,
            trace=[],
            wallclock_s=time.perf_counter() - t0,
            certificate=feas,
        )

    solver = PdsgSolver(program, options)
    st = solver.state
    solver.seed_interior_anchor()
    ev0 = evaluate_dual(solver.ctx, st.dual)
    solver._offer_dual_eval(st.dual, ev0)
    solver.observe()
    while not solver.converged() and st.k < options.max_iter:
        iterate(solver)
    if not solver.converged() and st.k % options.check_every != 0:
        solver._checkpoint()  # final bound refresh
        st.trace.pop()
        solver.observe()
    status = "converged" if solver.converged() else "max_iter"

    if st.best_point is None:
        status = "no_feasible_point"
        powers = rates = None
        objective = np.nan
        budget_violation = np.nan
        capacity_violation = np.nan
    else:
        powers = st.best_point.P
        rates = solver.ctx.gammas * powers
        objective = st.best_primal_value
        node_power = np.bincount(
            solver.ctx.sender_of, weights=powers, minlength=solver.ctx.N
        )
        budget_violation = float(
            np.max(node_power - solver.ctx.node_budgets, initial=0.0)
        )
        capacity_violation = float(
            np.max(st.best_point.z - solver.ctx.gammas * powers, initial=0.0)
        )
    gap = st.best_gap
    return SolveReport(
        status=status,
        objective=objective,
        dual_bound=st.best_dual_value,
        gap=gap,
        relative_gap=gap / max(abs(objective), 1e-12) if np.isfinite(gap) else np.nan,
        iterations=st.k + 1,
        powers=powers,
        rates=rates,
        point=st.best_point,
        max_conservation_residual=st.best_residual if st.best_point is not None else np.nan,
        max_budget_violation=budget_violation,
        max_capacity_violation=capacity_violation,
        trace=st.trace,
        wallclock_s=time.perf_counter() - t0,
    )


def write_trace_csv(trace: list[TraceRow], path) -> None:
    """Trace rows as CSV: iter, dual_value, primal_value, gap, max_residual,
    wallclock_ns.  All but the wallclock column are deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,dual_value,primal_value,gap,max_residual,wallclock_ns\n")
        for row in trace:
            fh.write(
                f"{row.iter},{row.dual_value!r},{row.primal_value!r},"
                f"{row.gap!r},{row.max_residual!r},{row.wallclock_ns}\n"
            )


# -- Slater qualification check -------------------------------------------------


@dataclass(frozen=True)
class SlaterResult:
    """Outcome of the strict-feasibility check; ``x`` is the slack-maximizing
    variable vector (every inequality row slack by ``min_slack`` at it)."""

    holds: bool
    min_slack: float
    tight_rows: tuple[RowTag, ...] = ()
    x: np.ndarray | None = None


SLATER_TOL = 1e-9


def slater_check(program: FlowProgram) -> SlaterResult:
    """Strict feasibility of the inequality rows via a max-min-slack LP.

    Maximizes a common slack ``delta`` subtracted from every normalized
    inequality row; the qualification holds iff the optimum is strictly
    positive.  Ties to the equality rows and variable boxes are kept hard.
    """
    A_n, b_n = program.normalized_ub()
    E_n, f_n = program.normalized_eq()
    n = program.vidx.n_vars
    ones = sp.csr_matrix(np.ones((A_n.shape[0], 1)))
    A1 = sp.hstack([A_n, ones], format="csr")
    E1 = sp.hstack([E_n, sp.csr_matrix((E_n.shape[0], 1))], format="csr")
    c = np.zeros(n + 1)
    c[-1] = -1.0  # maximize delta
    big = 1e9
    lo = np.concatenate([program.lower, [-big]])
    hi = np.concatenate([program.upper, [big]])
    res = solve_lp(c, A1, b_n, E1, f_n, lo, hi)
    if res.status != 0:  # pragma: no cover
        raise RuntimeError(f"slater LP failed with status {res.status}: {res.message}")
    delta = float(res.x[-1])
    if delta > SLATER_TOL:
        return SlaterResult(holds=True, min_slack=delta, x=res.x[:n])
    slack = b_n - A_n @ res.x[:n]
    tight = tuple(
        program.ub_tags[i] for i in np.nonzero(slack <= delta + SLATER_TOL)[0]
    )
    return SlaterResult(holds=False, min_slack=delta, tight_rows=tight, x=res.x[:n])
