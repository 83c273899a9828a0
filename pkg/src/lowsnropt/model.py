"""Network model: geometry, channel constants, broadcast decomposition, instances.

A network instance is a set of nodes on the plane with per-node transmit
power budgets, a common path-loss exponent and noise density, and a set of
traffic sessions (unicast or multicast).  Every sender's broadcast channel
is decomposed into nested hyperarcs: the k-th hyperarc reaches the sender's
k closest receivers and carries a single common rate, proportional to the
power spent on it with coefficient ``gamma = 1 / (d_worst**alpha * N0)``
where ``d_worst`` is the distance to the farthest receiver in the set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class InstanceError(ValueError):
    """Raised when an instance (or an instance file) violates an invariant."""


class GeneratorError(RuntimeError):
    """Raised when the random generator cannot produce a feasible instance."""


@dataclass(frozen=True)
class NodeSpec:
    """A node: identifier, planar location in meters, transmit power budget in watts."""

    id: str
    x: float
    y: float
    power_budget: float

    @property
    def location(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Session:
    """One traffic session: a source multicasting ``demand`` nats/s to ``receivers``.

    Unicast is the special case of a single receiver.
    """

    id: str
    source: str
    receivers: tuple[str, ...]
    demand: float

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(self.receivers))


@dataclass(frozen=True)
class Hyperarc:
    """A broadcast connection from ``sender`` to an ordered receiver set.

    ``receivers`` is ordered best to worst (nondecreasing distance from the
    sender, ties broken by ascending node id).  ``gamma`` is the rate earned
    per watt of transmit power, set by the worst receiver:
    ``gamma = 1 / (d_worst**alpha * noise_density)``.
    """

    sender: str
    receivers: tuple[str, ...]
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(self.receivers))

    @property
    def worst(self) -> str:
        return self.receivers[-1]

    def rate(self, power: float) -> float:
        return hyperarc_rate(power, self.gamma)


@dataclass(frozen=True)
class NetworkInstance:
    """Full problem input: nodes, channel constants, sessions, reach limit.

    ``reach_limit`` caps how many receivers a sender may include in its
    largest hyperarc; ``None`` means every other node is reachable.
    ``bandwidth`` is only used by the approximation-analysis operations; the
    optimizer works in the wideband linear-capacity regime.
    """

    nodes: tuple[NodeSpec, ...]
    alpha: float
    noise_density: float
    sessions: tuple[Session, ...]
    bandwidth: float = 1.0
    reach_limit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "sessions", tuple(self.sessions))
        self.validate()

    def validate(self) -> None:
        if self.alpha <= 0:
            raise InstanceError(f"alpha must be > 0, got {self.alpha}")
        if self.noise_density <= 0:
            raise InstanceError(f"noise_density must be > 0, got {self.noise_density}")
        if self.bandwidth <= 0:
            raise InstanceError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.reach_limit is not None and self.reach_limit < 1:
            raise InstanceError(f"reach_limit must be >= 1 or None, got {self.reach_limit}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InstanceError(f"duplicate node id(s): {dup}")
        for n in self.nodes:
            if not (n.power_budget > 0):
                raise InstanceError(f"node {n.id!r}: power_budget must be > 0, got {n.power_budget}")
        locs = {}
        for n in self.nodes:
            key = (n.x, n.y)
            if key in locs:
                raise InstanceError(
                    f"nodes {locs[key]!r} and {n.id!r} share location {key}; "
                    "coincident nodes make gamma infinite"
                )
            locs[key] = n.id
        known = set(ids)
        sids = [s.id for s in self.sessions]
        if len(set(sids)) != len(sids):
            dup = sorted({i for i in sids if sids.count(i) > 1})
            raise InstanceError(f"duplicate session id(s): {dup}")
        for s in self.sessions:
            if s.source not in known:
                raise InstanceError(f"session {s.id!r}: unknown source {s.source!r}")
            if not s.receivers:
                raise InstanceError(f"session {s.id!r}: receiver set is empty")
            unknown = [r for r in s.receivers if r not in known]
            if unknown:
                raise InstanceError(f"session {s.id!r}: unknown receiver(s) {unknown}")
            if len(set(s.receivers)) != len(s.receivers):
                raise InstanceError(f"session {s.id!r}: repeated receivers")
            if s.source in s.receivers:
                raise InstanceError(f"session {s.id!r}: source {s.source!r} is also a receiver")
            if not (s.demand > 0):
                raise InstanceError(f"session {s.id!r}: demand must be > 0, got {s.demand}")

    # -- convenience accessors -------------------------------------------

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def distance(self, a: str, b: str) -> float:
        na, nb = self.node(a), self.node(b)
        return math.dist(na.location, nb.location)

    def total_demand(self) -> float:
        return sum(s.demand for s in self.sessions)

    def with_demands(self, demands: dict[str, float]) -> "NetworkInstance":
        sessions = tuple(replace(s, demand=demands[s.id]) for s in self.sessions)
        return replace(self, sessions=sessions)


def hyperarc_rate(power: float, gamma: float) -> float:
    """Common rate (nats/s) supported by a hyperarc at the given transmit power."""
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return gamma * power


def decompose_broadcast(instance: NetworkInstance) -> list[Hyperarc]:
    """Decompose every sender's broadcast channel into nested hyperarcs.

    For sender ``i`` the receivers are ordered by nondecreasing distance
    (ties by ascending id) and the k-th hyperarc covers the first k of them,
    up to ``reach_limit``.  The receiver sets of one sender therefore form a
    strict chain under inclusion, and gamma is nonincreasing along the chain.
    """
    arcs: list[Hyperarc] = []
    n0 = instance.noise_density
    for sender in instance.nodes:
        others = sorted(
            (n for n in instance.nodes if n.id != sender.id),
            key=lambda n: (math.dist(sender.location, n.location), n.id),
        )
        limit = len(others)
        if instance.reach_limit is not None:
            limit = min(limit, instance.reach_limit)
        for k in range(1, limit + 1):
            worst = others[k - 1]
            d = math.dist(sender.location, worst.location)
            if d == 0.0:
                raise InstanceError(
                    f"nodes {sender.id!r} and {worst.id!r} are coincident; gamma is infinite"
                )
            gamma = 1.0 / (d**instance.alpha * n0)
            arcs.append(Hyperarc(sender.id, tuple(n.id for n in others[:k]), gamma))
    return arcs


# -- random instance generation -----------------------------------------


@dataclass(frozen=True)
class DemandPolicy:
    """How session demands are drawn and rescaled to a feasible level.

    Demands are drawn i.i.d. uniform on ``(low, high]`` and, while the
    instance fails the feasibility screen, all demands are multiplied by
    ``shrink``.  Gives up after ``max_attempts`` shrink steps.
    """

    low: float = 0.0
    high: float = 1.0
    shrink: float = 0.5
    max_attempts: int = 30


def generate_instance(
    seed: int,
    node_count: int,
    area_side: float,
    session_count: int,
    demand_policy: DemandPolicy = DemandPolicy(),
    *,
    max_sinks: int | None = None,
    alpha: float = 2.0,
    noise_density: float = 1.0,
    bandwidth: float = 1.0,
    power_budget: float = 1.0,
    reach_limit: int | None = None,
) -> NetworkInstance:
    """Generate a feasible random instance, deterministically from ``seed``.

    Nodes are placed i.i.d. uniform on an ``area_side`` x ``area_side``
    square.  Each session picks a uniform source and a uniform nonempty
    receiver subset (at most ``max_sinks`` receivers).  Demands follow
    ``demand_policy``: drawn uniform, then all halved until the instance
    passes the phase-1 feasibility screen, so every emitted instance
    supports its demands within the node power budgets.

    All randomness flows from the single seed through spawned child
    streams (one for geometry, one for sessions, one for demands), so the
    result is a pure function of the arguments.
    """
    if node_count < 2:
        raise ValueError(f"node_count must be >= 2, got {node_count}")
    if area_side <= 0:
        raise ValueError(f"area_side must be > 0, got {area_side}")
    if session_count < 0:
        raise ValueError(f"session_count must be >= 0, got {session_count}")

    geom_ss, sess_ss, dem_ss = np.random.SeedSequence(seed).spawn(3)
    geom = np.random.Generator(np.random.PCG64(geom_ss))
    sess = np.random.Generator(np.random.PCG64(sess_ss))
    dem = np.random.Generator(np.random.PCG64(dem_ss))

    # Coincident draws have probability zero but a retry keeps the invariant hard.
    for _ in range(100):
        xy = geom.uniform(0.0, area_side, size=(node_count, 2))
        if len({(float(x), float(y)) for x, y in xy}) == node_count:
            break
    else:  # pragma: no cover
        raise GeneratorError("could not place distinct node locations")

    width = len(str(node_count - 1))
    nodes = tuple(
        NodeSpec(f"n{i:0{width}d}", float(xy[i, 0]), float(xy[i, 1]), power_budget)
        for i in range(node_count)
    )
    ids = [n.id for n in nodes]

    sink_cap = node_count - 1 if max_sinks is None else min(max_sinks, node_count - 1)
    sessions = []
    for m in range(session_count):
        src = int(sess.integers(0, node_count))
        size = int(sess.integers(1, sink_cap + 1))
        others = [i for i in range(node_count) if i != src]
        chosen = sess.choice(len(others), size=size, replace=False)
        receivers = tuple(sorted(ids[others[j]] for j in chosen))
        demand = 1.0 - float(dem.random())  # uniform on (0, 1]
        sessions.append(Session(f"s{m}", ids[src], receivers, demand))

    base = NetworkInstance(
        nodes=nodes,
        alpha=alpha,
        noise_density=noise_density,
        sessions=tuple(sessions),
        bandwidth=bandwidth,
        reach_limit=reach_limit,
    )
    if session_count == 0:
        return base

    from .formulation import assemble_instance_program, check_feasibility
    from .pdsg import slater_check

    # Shrink until the demands are not only supportable but strictly inside
    # the feasible region, so every inequality row keeps positive slack.
    scale = 1.0
    for _ in range(demand_policy.max_attempts + 1):
        candidate = base.with_demands(
            {s.id: s.demand * scale for s in base.sessions}
        )
        program = assemble_instance_program(candidate)
        if check_feasibility(program).feasible and slater_check(program).holds:
            return candidate
        scale *= demand_policy.shrink
    raise GeneratorError(
        f"no feasible demand scaling found after {demand_policy.max_attempts} attempts "
        f"(seed={seed}, nodes={node_count}, sessions={session_count})"
    )


# -- instance file format ------------------------------------------------
#
# A single JSON document:
#   {
#     "alpha": 2.0, "noise_density": 1.0, "bandwidth": 1.0,
#     "reach_limit": null,
#     "nodes": [{"id": "n0", "x": 0.0, "y": 0.0, "power_budget": 1.0}, ...],
#     "sessions": [{"id": "s0", "source": "n0", "receivers": ["n1"], "demand": 0.5}, ...]
#   }
# Floats round-trip losslessly (serialized with repr, 17 significant digits).


def instance_to_json(instance: NetworkInstance) -> str:
    doc = {
        "alpha": instance.alpha,
        "noise_density": instance.noise_density,
        "bandwidth": instance.bandwidth,
        "reach_limit": instance.reach_limit,
        "nodes": [
            {"id": n.id, "x": n.x, "y": n.y, "power_budget": n.power_budget}
            for n in instance.nodes
        ],
        "sessions": [
            {
                "id": s.id,
                "source": s.source,
                "receivers": list(s.receivers),
                "demand": s.demand,
            }
            for s in instance.sessions
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def _require(doc: dict, key: str, kinds, where: str):
    if key not in doc:
        raise InstanceError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise InstanceError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def instance_from_json(text: str) -> NetworkInstance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InstanceError("top level must be a JSON object")

    alpha = float(_require(doc, "alpha", (int, float), "instance"))
    noise = float(_require(doc, "noise_density", (int, float), "instance"))
    bandwidth = float(_require(doc, "bandwidth", (int, float), "instance"))
    reach = doc.get("reach_limit")
    if reach is not None:
        if not isinstance(reach, int) or isinstance(reach, bool):
            raise InstanceError("instance: field 'reach_limit' must be an integer or null")
    nodes_doc = _require(doc, "nodes", list, "instance")
    sessions_doc = _require(doc, "sessions", list, "instance")

    nodes = []
    for i, nd in enumerate(nodes_doc):
        if not isinstance(nd, dict):
            raise InstanceError(f"nodes[{i}]: must be an object")
        where = f"nodes[{i}]"
        nodes.append(
            NodeSpec(
                id=str(_require(nd, "id", (str,), where)),
                x=float(_require(nd, "x", (int, float), where)),
                y=float(_require(nd, "y", (int, float), where)),
                power_budget=float(_require(nd, "power_budget", (int, float), where)),
            )
        )
    sessions = []
    for i, sd in enumerate(sessions_doc):
        if not isinstance(sd, dict):
            raise InstanceError(f"sessions[{i}]: must be an object")
        where = f"sessions[{i}]"
        receivers = _require(sd, "receivers", list, where)
        sessions.append(
            Session(
                id=str(_require(sd, "id", (str,), where)),
                source=str(_require(sd, "source", (str,), where)),
                receivers=tuple(str(r) for r in receivers),
                demand=float(_require(sd, "demand", (int, float), where)),
            )
        )
    return NetworkInstance(
        nodes=tuple(nodes),
        alpha=alpha,
        noise_density=noise,
        sessions=tuple(sessions),
        bandwidth=bandwidth,
        reach_limit=reach,
    )


def write_instance(instance: NetworkInstance, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(instance_to_json(instance))


def read_instance(path) -> NetworkInstance:
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_json(fh.read())
