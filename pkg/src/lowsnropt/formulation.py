"""Arc-graph expansion and assembly of the min-power flow program.

The optimization variables, indexed densely by :class:`VariableIndex`:

* ``x[h, c]``  flow of commodity ``c`` (one commodity per (session, sink)
  pair) on hyperarc ``h``,
* ``y[h, m]``  coded rate of session ``m`` on hyperarc ``h``,
* ``z[h]``     total injected rate on hyperarc ``h``,
* ``P[h]``     transmit power of hyperarc ``h``.

The program minimizes total power ``sum(P)`` subject to

* coding rows      ``x[h, c] - y[h, m(c)] <= 0``      (coded rate covers the
  largest per-sink flow of the session, not their sum),
* aggregate rows   ``sum_m y[h, m] - z[h] = 0``,
* capacity rows    ``z[h] - gamma[h] * P[h] <= 0``,
* budget rows      ``sum_{h at node i} P[h] <= P_i``,
* conservation rows, one per (commodity, node): the per-arc flow is the sum
  of the flows of all hyperarcs owning that arc, so a hyperarc's flow counts
  once toward every receiver it covers; net divergence is ``+R`` at the
  commodity source, ``-R`` at its sink and ``0`` elsewhere.

Row counts as closed-form functions of H = #hyperarcs, M = #sessions,
C = sum of receiver-set sizes, N = #nodes (see :func:`program_counts`):
coding ``H*C``, aggregate ``H``, capacity ``H``, budget ``N``, conservation
``N*C``; variables ``H*C + H*M + 2*H``.  Nonzeros use S = sum of hyperarc
receiver-set sizes (equal to the total arc-ownership count over the arc set
A'): conservation rows hold ``C*(H + S)`` nonzeros.

All variable upper bounds are implied caps that never cut an optimum:
``x <= min(R(m), gamma*P_i)``, ``y, z <= min(2*sum_m R(m), gamma*P_i)``,
``P <= P_i`` (any feasible point satisfies ``x <= y <= z <= gamma*P``
hyperarc-wise and ``P <= P_i`` node-wise, and an optimal flow never exceeds
its own commodity demand on a single hyperarc).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .model import Hyperarc, NetworkInstance, decompose_broadcast


class UnreachableSinkError(ValueError):
    """A session sink cannot be reached from its source in the arc graph."""


@dataclass(frozen=True)
class ArcGraph:
    """Directed pairwise graph equivalent of the hyperarc set.

    ``arcs`` holds every distinct (tail, head) pair covered by at least one
    hyperarc; ``owners[(tail, head)]`` lists the indices of the hyperarcs
    containing the head.  By nestedness each owner list is a suffix of the
    tail's hyperarc chain.
    """

    arcs: tuple[tuple[str, str], ...]
    owners: dict[tuple[str, str], tuple[int, ...]]

    def out_neighbors(self, node: str) -> list[str]:
        return [head for (tail, head) in self.arcs if tail == node]

    def reachable_from(self, source: str) -> set[str]:
        adjacency: dict[str, list[str]] = {}
        for tail, head in self.arcs:
            adjacency.setdefault(tail, []).append(head)
        seen = {source}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in adjacency.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen


def build_arc_graph(hyperarcs: list[Hyperarc]) -> ArcGraph:
    """Expand hyperarcs into the arc graph with the arc-to-hyperarc ownership map."""
    owners: dict[tuple[str, str], list[int]] = {}
    for idx, h in enumerate(hyperarcs):
        for receiver in h.receivers:
            owners.setdefault((h.sender, receiver), []).append(idx)
    arcs = tuple(sorted(owners))
    return ArcGraph(arcs=arcs, owners={a: tuple(owners[a]) for a in arcs})


@dataclass(frozen=True)
class VariableIndex:
    """Dense, bijective index maps for the (x, y, z, P) variable blocks."""

    n_hyperarcs: int
    n_sessions: int
    commodities: tuple[tuple[int, str], ...]  # (session index, sink node id)

    @property
    def n_commodities(self) -> int:
        return len(self.commodities)

    @property
    def n_vars(self) -> int:
        h, m, c = self.n_hyperarcs, self.n_sessions, self.n_commodities
        return h * c + h * m + 2 * h

    # Block offsets: x | y | z | P.
    @property
    def y_offset(self) -> int:
        return self.n_hyperarcs * self.n_commodities

    @property
    def z_offset(self) -> int:
        return self.y_offset + self.n_hyperarcs * self.n_sessions

    @property
    def p_offset(self) -> int:
        return self.z_offset + self.n_hyperarcs

    def x_index(self, h: int, c: int) -> int:
        return h * self.n_commodities + c

    def y_index(self, h: int, m: int) -> int:
        return self.y_offset + h * self.n_sessions + m

    def z_index(self, h: int) -> int:
        return self.z_offset + h

    def p_index(self, h: int) -> int:
        return self.p_offset + h


@dataclass(frozen=True)
class RowTag:
    """Identifies a constraint row: its kind plus the objects it couples."""

    kind: Literal["coding", "aggregate", "capacity", "budget", "conservation"]
    hyperarc: int | None = None
    session: int | None = None
    sink: str | None = None
    node: str | None = None


@dataclass
class FlowProgram:
    """The assembled sparse LP in solver-neutral form.

    Rows are stored raw (as written above); ``ub_scale`` / ``eq_scale`` hold
    per-row max-abs coefficients so solvers can work on normalized rows with
    O(1) coefficients.  Objective: 1 on each P variable, 0 elsewhere.
    """

    instance: NetworkInstance
    hyperarcs: tuple[Hyperarc, ...]
    arc_graph: ArcGraph
    vidx: VariableIndex
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    ub_tags: tuple[RowTag, ...]
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_tags: tuple[RowTag, ...]
    lower: np.ndarray
    upper: np.ndarray
    coding: Literal["max", "sum"] = "max"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def ub_scale(self) -> np.ndarray:
        if "ub_scale" not in self._cache:
            self._cache["ub_scale"] = _row_maxabs(self.A_ub)
        return self._cache["ub_scale"]

    @property
    def eq_scale(self) -> np.ndarray:
        if "eq_scale" not in self._cache:
            self._cache["eq_scale"] = _row_maxabs(self.A_eq)
        return self._cache["eq_scale"]

    def normalized_ub(self) -> tuple[sp.csr_matrix, np.ndarray]:
        if "norm_ub" not in self._cache:
            d = sp.diags(1.0 / self.ub_scale)
            self._cache["norm_ub"] = (d @ self.A_ub).tocsr(), self.b_ub / self.ub_scale
        return self._cache["norm_ub"]

    def normalized_eq(self) -> tuple[sp.csr_matrix, np.ndarray]:
        if "norm_eq" not in self._cache:
            d = sp.diags(1.0 / self.eq_scale)
            self._cache["norm_eq"] = (d @ self.A_eq).tocsr(), self.b_eq / self.eq_scale
        return self._cache["norm_eq"]

    def rows_of_kind(self, kind: str) -> list[int]:
        tags = self.ub_tags if kind in ("coding", "capacity", "budget") else self.eq_tags
        return [i for i, t in enumerate(tags) if t.kind == kind]

    # Gammas and sender budgets as arrays, in hyperarc index order.
    @property
    def gammas(self) -> np.ndarray:
        if "gammas" not in self._cache:
            self._cache["gammas"] = np.array([h.gamma for h in self.hyperarcs])
        return self._cache["gammas"]

    @property
    def sender_budgets(self) -> np.ndarray:
        if "sender_budgets" not in self._cache:
            budgets = {n.id: n.power_budget for n in self.instance.nodes}
            self._cache["sender_budgets"] = np.array(
                [budgets[h.sender] for h in self.hyperarcs]
            )
        return self._cache["sender_budgets"]

    @property
    def demands(self) -> np.ndarray:
        if "demands" not in self._cache:
            self._cache["demands"] = np.array([s.demand for s in self.instance.sessions])
        return self._cache["demands"]

    def conservation_matrix(self) -> np.ndarray:
        """Dense (node x hyperarc) divergence matrix shared by all commodities.

        Entry for node i, hyperarc h: ``len(receivers)`` when i sends h (the
        flow appears once on every member arc), ``-1`` when i is a receiver
        of h, 0 otherwise.
        """
        if "cons_matrix" not in self._cache:
            ids = self.instance.node_ids()
            pos = {nid: r for r, nid in enumerate(ids)}
            a = np.zeros((len(ids), len(self.hyperarcs)))
            for hi, h in enumerate(self.hyperarcs):
                a[pos[h.sender], hi] = float(len(h.receivers))
                for r in h.receivers:
                    a[pos[r], hi] = -1.0
            self._cache["cons_matrix"] = a
        return self._cache["cons_matrix"]

    def commodity_rhs(self, c: int) -> np.ndarray:
        m, sink = self.vidx.commodities[c]
        session = self.instance.sessions[m]
        ids = self.instance.node_ids()
        b = np.zeros(len(ids))
        b[ids.index(session.source)] = session.demand
        b[ids.index(sink)] = -session.demand
        return b

    def x_caps(self) -> np.ndarray:
        """Upper bounds of the x block as an (H x C) array."""
        h, cnum = self.vidx.n_hyperarcs, self.vidx.n_commodities
        return self.upper[: h * cnum].reshape(h, cnum)


def _row_maxabs(a: sp.csr_matrix) -> np.ndarray:
    if a.shape[0] == 0:
        return np.ones(0)
    out = np.ones(a.shape[0])
    absa = abs(a)
    maxes = absa.max(axis=1).toarray().ravel()
    nonzero = maxes > 0
    out[nonzero] = maxes[nonzero]
    return out


def assemble_program(
    instance: NetworkInstance,
    hyperarcs: list[Hyperarc],
    arc_graph: ArcGraph,
    coding: Literal["max", "sum"] = "max",
) -> FlowProgram:
    """Assemble the min-power LP for the given decomposition.

    ``coding="max"`` produces the network-coded program (one coding row per
    hyperarc, session and sink).  ``coding="sum"`` replaces them with plain
    flow addition, ``sum_t x - y <= 0`` per hyperarc and session, for
    comparing against routing without coding.

    Raises :class:`UnreachableSinkError` when a session sink has no directed
    path from its source, since no conservation-feasible flow would exist.
    """
    hyperarcs = tuple(hyperarcs)
    ids = instance.node_ids()
    node_pos = {nid: r for r, nid in enumerate(ids)}
    commodities = tuple(
        (m, sink) for m, s in enumerate(instance.sessions) for sink in s.receivers
    )
    vidx = VariableIndex(len(hyperarcs), len(instance.sessions), commodities)
    H, M, C, N = len(hyperarcs), len(instance.sessions), len(commodities), len(ids)

    for m, s in enumerate(instance.sessions):
        reachable = arc_graph.reachable_from(s.source)
        for sink in s.receivers:
            if sink not in reachable:
                raise UnreachableSinkError(
                    f"session {s.id!r}: sink {sink!r} unreachable from {s.source!r}"
                )

    budgets = np.array([n.power_budget for n in instance.nodes])
    gammas = np.array([h.gamma for h in hyperarcs])
    sender_budget = np.array([budgets[node_pos[h.sender]] for h in hyperarcs])
    demands = np.array([s.demand for s in instance.sessions])
    total_demand = float(demands.sum()) if M else 0.0

    c = np.zeros(vidx.n_vars)
    c[vidx.p_offset :] = 1.0

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    b_ub: list[float] = []
    ub_tags: list[RowTag] = []

    def add(row: int, col: int, val: float) -> None:
        rows.append(row)
        cols.append(col)
        vals.append(val)

    r = 0
    if coding == "max":
        for h in range(H):
            for ci, (m, sink) in enumerate(commodities):
                add(r, vidx.x_index(h, ci), 1.0)
                add(r, vidx.y_index(h, m), -1.0)
                b_ub.append(0.0)
                ub_tags.append(RowTag("coding", hyperarc=h, session=m, sink=sink))
                r += 1
    else:
        for h in range(H):
            for m in range(M):
                for ci, (mc, _) in enumerate(commodities):
                    if mc == m:
                        add(r, vidx.x_index(h, ci), 1.0)
                add(r, vidx.y_index(h, m), -1.0)
                b_ub.append(0.0)
                ub_tags.append(RowTag("coding", hyperarc=h, session=m))
                r += 1
    for h in range(H):
        add(r, vidx.z_index(h), 1.0)
        add(r, vidx.p_index(h), -gammas[h])
        b_ub.append(0.0)
        ub_tags.append(RowTag("capacity", hyperarc=h))
        r += 1
    for ni, nid in enumerate(ids):
        for h, arc in enumerate(hyperarcs):
            if arc.sender == nid:
                add(r, vidx.p_index(h), 1.0)
        b_ub.append(budgets[ni])
        ub_tags.append(RowTag("budget", node=nid))
        r += 1
    A_ub = sp.csr_matrix(
        (vals, (rows, cols)), shape=(r, vidx.n_vars), dtype=float
    )

    rows, cols, vals = [], [], []
    b_eq: list[float] = []
    eq_tags: list[RowTag] = []
    r = 0
    for h in range(H):
        for m in range(M):
            add(r, vidx.y_index(h, m), 1.0)
        add(r, vidx.z_index(h), -1.0)
        b_eq.append(0.0)
        eq_tags.append(RowTag("aggregate", hyperarc=h))
        r += 1
    cons = np.zeros((N, H))
    for hi, h in enumerate(hyperarcs):
        cons[node_pos[h.sender], hi] = float(len(h.receivers))
        for rec in h.receivers:
            cons[node_pos[rec], hi] = -1.0
    for ci, (m, sink) in enumerate(commodities):
        session = instance.sessions[m]
        for ni, nid in enumerate(ids):
            for hi in range(H):
                if cons[ni, hi] != 0.0:
                    add(r, vidx.x_index(hi, ci), cons[ni, hi])
            if nid == session.source:
                b_eq.append(session.demand)
            elif nid == sink:
                b_eq.append(-session.demand)
            else:
                b_eq.append(0.0)
            eq_tags.append(RowTag("conservation", session=m, sink=sink, node=nid))
            r += 1
    A_eq = sp.csr_matrix(
        (vals, (rows, cols)), shape=(r, vidx.n_vars), dtype=float
    )

    # Upper boxes: implied caps plus headroom.  No optimum exceeds the
    # session demand on a y coordinate or the total demand on a z
    # coordinate, so doubling them keeps the caps valid while leaving
    # strict slack representable inside the box set.
    lower = np.zeros(vidx.n_vars)
    upper = np.empty(vidx.n_vars)
    for h in range(H):
        cap_h = gammas[h] * sender_budget[h]
        for ci, (m, _) in enumerate(commodities):
            upper[vidx.x_index(h, ci)] = min(demands[m], cap_h)
        for m in range(M):
            upper[vidx.y_index(h, m)] = min(2.0 * demands[m], cap_h)
        upper[vidx.z_index(h)] = min(2.0 * total_demand, cap_h) if M else 0.0
        upper[vidx.p_index(h)] = sender_budget[h]

    return FlowProgram(
        instance=instance,
        hyperarcs=hyperarcs,
        arc_graph=arc_graph,
        vidx=vidx,
        c=c,
        A_ub=A_ub,
        b_ub=np.array(b_ub),
        ub_tags=tuple(ub_tags),
        A_eq=A_eq,
        b_eq=np.array(b_eq),
        eq_tags=tuple(eq_tags),
        lower=lower,
        upper=upper,
        coding=coding,
    )


def assemble_instance_program(
    instance: NetworkInstance, coding: Literal["max", "sum"] = "max"
) -> FlowProgram:
    """Decompose, expand and assemble in one step."""
    hyperarcs = decompose_broadcast(instance)
    return assemble_program(instance, hyperarcs, build_arc_graph(hyperarcs), coding)


def program_counts(program: FlowProgram) -> dict[str, int]:
    """Closed-form row/variable/nonzero counts implied by the instance shape."""
    H = program.vidx.n_hyperarcs
    M = program.vidx.n_sessions
    C = program.vidx.n_commodities
    N = len(program.instance.nodes)
    S = sum(len(h.receivers) for h in program.hyperarcs)
    coding_rows = H * C if program.coding == "max" else H * M
    coding_nnz = 2 * H * C if program.coding == "max" else H * (C + M)
    return {
        "coding_rows": coding_rows,
        "capacity_rows": H,
        "budget_rows": N,
        "aggregate_rows": H,
        "conservation_rows": N * C,
        "ub_rows": coding_rows + H + N,
        "eq_rows": H + N * C,
        "variables": H * C + H * M + 2 * H,
        "nnz_ub": coding_nnz + 2 * H + H,
        "nnz_eq": H * (M + 1) + C * (H + S),
        "arc_count": len(program.arc_graph.arcs),
        "ownership_count": S,
    }


# -- feasibility screening -------------------------------------------------


@dataclass(frozen=True)
class FeasibilityResult:
    """Outcome of the phase-1 screen.

    ``violation`` is the minimum total slack needed on capacity and budget
    rows (normalized); zero within tolerance means the demands fit.  When
    infeasible, ``offending_sessions`` names the sessions whose traffic rides
    the slacked rows and ``slacked_rows`` the row tags themselves.
    """

    feasible: bool
    violation: float
    offending_sessions: tuple[str, ...] = ()
    slacked_rows: tuple[RowTag, ...] = ()
    # Phase-1 optimal row duals (normalized rows); a Farkas-style weighting
    # certifying the violation when infeasible.
    row_weights_ub: np.ndarray | None = None
    row_weights_eq: np.ndarray | None = None


FEASIBILITY_TOL = 1e-9


def check_feasibility(program: FlowProgram) -> FeasibilityResult:
    """Phase-1 screen: minimize total violation of capacity and budget rows.

    Flow conservation, coding and aggregation rows are kept hard (they are
    always satisfiable once sinks are reachable); elastic slack is added to
    capacity and budget rows only.  Feasible iff the optimal total slack on
    normalized rows is zero within ``FEASIBILITY_TOL``.
    """
    from .oracle import solve_lp

    A_n, b_n = program.normalized_ub()
    n = program.vidx.n_vars
    soft = [i for i, t in enumerate(program.ub_tags) if t.kind in ("capacity", "budget")]
    n_slack = len(soft)
    slack_cols = sp.csr_matrix(
        (-np.ones(n_slack), (soft, range(n_slack))), shape=(A_n.shape[0], n_slack)
    )
    A1 = sp.hstack([A_n, slack_cols], format="csr")
    c1 = np.concatenate([np.zeros(n), np.ones(n_slack)])
    # With capacity and budget rows elastic, the variable caps must not
    # re-impose them: the phase-1 boxes keep only the demand-derived part.
    # Any zero-violation point satisfies the implied caps on its own.
    vidx = program.vidx
    hi_vars = program.upper.copy()
    demands = program.demands
    total = 2.0 * float(demands.sum()) if vidx.n_sessions else 0.0
    for ci, (m, _) in enumerate(vidx.commodities):
        for h in range(vidx.n_hyperarcs):
            hi_vars[vidx.x_index(h, ci)] = demands[m]
    hi_vars[vidx.y_offset : vidx.p_offset] = total
    lo = np.concatenate([program.lower, np.zeros(n_slack)])
    hi = np.concatenate([hi_vars, np.full(n_slack, np.inf)])
    eq_n, beq_n = program.normalized_eq()
    A1_eq = sp.hstack([eq_n, sp.csr_matrix((eq_n.shape[0], n_slack))], format="csr")

    res = solve_lp(c1, A1, b_n, A1_eq, beq_n, lo, hi)
    if res.status == 2:
        # Even elastic rows cannot absorb the demands: no conservation
        # feasible flow fits the demand boxes at all.
        return FeasibilityResult(
            feasible=False,
            violation=np.inf,
            offending_sessions=tuple(s.id for s in program.instance.sessions),
        )
    if res.status != 0:  # pragma: no cover - elastic program is bounded
        raise RuntimeError(f"phase-1 solve failed with status {res.status}: {res.message}")
    violation = float(res.fun)
    if violation <= FEASIBILITY_TOL:
        return FeasibilityResult(feasible=True, violation=violation)

    slack = res.x[n:]
    bad_rows = [program.ub_tags[soft[j]] for j in np.nonzero(slack > FEASIBILITY_TOL)[0]]
    v = res.x[:n]
    vidx = program.vidx
    sessions = program.instance.sessions
    blamed: set[str] = set()
    for tag in bad_rows:
        if tag.kind == "capacity":
            touched = [tag.hyperarc]
        else:
            touched = [
                h for h, arc in enumerate(program.hyperarcs) if arc.sender == tag.node
            ]
        for h in touched:
            for m, s in enumerate(sessions):
                if v[vidx.y_index(h, m)] > FEASIBILITY_TOL:
                    blamed.add(s.id)
    if not blamed:
        blamed = {s.id for s in sessions}
    return FeasibilityResult(
        feasible=False,
        violation=violation,
        offending_sessions=tuple(sorted(blamed)),
        slacked_rows=tuple(bad_rows),
        row_weights_ub=-np.asarray(res.ineqlin.marginals),
        row_weights_eq=-np.asarray(res.eqlin.marginals),
    )


# -- LP text export ----------------------------------------------------------


def _mangle(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in str(s))


def variable_names(program: FlowProgram) -> list[str]:
    """Deterministic names: P_<node>_<k>, x_<session>_<sink>_<node>_<k>, etc."""
    inst = program.instance
    vidx = program.vidx
    names = [""] * vidx.n_vars
    ranks: dict[int, int] = {}
    seen: dict[str, int] = {}
    for h, arc in enumerate(program.hyperarcs):
        seen[arc.sender] = seen.get(arc.sender, 0) + 1
        ranks[h] = seen[arc.sender]
    for h, arc in enumerate(program.hyperarcs):
        hk = f"{_mangle(arc.sender)}_{ranks[h]}"
        for ci, (m,sink) in enumerate(vidx.commodities):
            names[vidx.x_index(h, ci)] = f"x_{_mangle(inst.sessions[m].id)}_{_mangle(sink)}_{hk}"
        for m in range(vidx.n_sessions):
            names[vidx.y_index(h, m)] = f"y_{_mangle(inst.sessions[m].id)}_{hk}"
        names[vidx.z_index(h)] = f"z_{hk}"
        names[vidx.p_index(h)] = f"P_{hk}"
    return names


def export_lp(program: FlowProgram) -> str:
    """Render the program in LP text format for third-party cross-checking."""
    names = variable_names(program)

    def term(coef: float, col: int, first: bool) -> str:
        sign = "-" if coef < 0 else ("" if first else "+")
        mag = float(abs(coef))
        body = names[col] if mag == 1.0 else f"{mag!r} {names[col]}"
        return f"{sign} {body}" if not first or coef < 0 else f"{sign}{body}"

    def render_row(a: sp.csr_matrix, i: int) -> str:
        start, end = a.indptr[i], a.indptr[i + 1]
        parts = []
        for k in range(start, end):
            parts.append(term(a.data[k], a.indices[k], first=not parts))
        return " ".join(parts) if parts else "0 " + names[0]

    lines = ["\\ minimum total transmit power", "Minimize", " obj: " + " + ".join(
        names[program.vidx.p_index(h)] for h in range(program.vidx.n_hyperarcs)
    ), "Subject To"]
    counters: dict[str, int] = {}
    for i, tag in enumerate(program.ub_tags):
        counters[tag.kind] = counters.get(tag.kind, 0) + 1
        lines.append(
            f" {tag.kind}_{counters[tag.kind]}: {render_row(program.A_ub, i)} <= {float(program.b_ub[i])!r}"
        )
    for i, tag in enumerate(program.eq_tags):
        counters[tag.kind] = counters.get(tag.kind, 0) + 1
        lines.append(
            f" {tag.kind}_{counters[tag.kind]}: {render_row(program.A_eq, i)} = {float(program.b_eq[i])!r}"
        )
    lines.append("Bounds")
    for j, name in enumerate(names):
        lines.append(
            f" {float(program.lower[j])!r} <= {name} <= {float(program.upper[j])!r}"
        )
    lines.append("End")
    return "\n".join(lines) + "\n"
