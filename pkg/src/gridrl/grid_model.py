"""Static network description: case documents, validation and graph matrices."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import IO, Any

import numpy as np

GEN_KINDS = ("thermal", "wind", "solar")


class CaseError(ValueError):
    """Raised when a case document cannot be turned into a valid network."""


@dataclass(frozen=True)
class Bus:
    id: int
    load_p: float  # p.u.
    load_q: float  # p.u.
    v_min: float = 0.95
    v_max: float = 1.05


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float  # p.u.
    x: float  # p.u.
    s_max: float  # p.u.

    @property
    def g(self) -> float:
        return self.r / (self.r**2 + self.x**2)

    @property
    def b(self) -> float:
        return self.x / (self.r**2 + self.x**2)


@dataclass(frozen=True)
class CostParams:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    reserve: float = 0.0
    penalty: float = 0.0


@dataclass(frozen=True)
class Generator:
    kind: str
    bus: int
    p_min: float  # p.u.
    p_max: float
    q_min: float
    q_max: float
    v_min: float
    v_max: float
    rated_p: float
    ramp_fraction: float = 1.0
    cost: CostParams = field(default_factory=CostParams)


@dataclass(frozen=True)
class WindParams:
    weibull_k: float = 2.0
    weibull_c: float = 9.0
    v_cut_in: float = 3.0
    v_rated: float = 12.0
    v_cut_out: float = 25.0


@dataclass(frozen=True)
class SolarParams:
    ln_mu: float = 6.0
    ln_sigma: float = 0.6
    g_std: float = 1000.0


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    base_kv: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    slack_bus: int | tuple[int, ...]
    wind: WindParams = field(default_factory=WindParams)
    solar: SolarParams = field(default_factory=SolarParams)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        if isinstance(self.slack_bus, tuple):
            if len(self.slack_bus) != 1:
                raise CaseError("case does not have exactly one slack bus")
            return self.slack_bus[0]
        return self.slack_bus

    @property
    def z_base(self) -> float:
        return self.base_kv**2 / self.base_mva

    def to_pu(self, mw: float | np.ndarray) -> float | np.ndarray:
        return mw / self.base_mva

    def to_mw(self, pu: float | np.ndarray) -> float | np.ndarray:
        return pu * self.base_mva

    @cached_property
    def load_p(self) -> np.ndarray:
        return _frozen([b.load_p for b in self.buses])

    @cached_property
    def load_q(self) -> np.ndarray:
        return _frozen([b.load_q for b in self.buses])

    @cached_property
    def bus_v_min(self) -> np.ndarray:
        return _frozen([b.v_min for b in self.buses])

    @cached_property
    def bus_v_max(self) -> np.ndarray:
        return _frozen([b.v_max for b in self.buses])

    @cached_property
    def branch_from(self) -> np.ndarray:
        return _frozen([br.from_bus for br in self.branches], dtype=int)

    @cached_property
    def branch_to(self) -> np.ndarray:
        return _frozen([br.to_bus for br in self.branches], dtype=int)

    @cached_property
    def branch_y(self) -> np.ndarray:
        """Series admittance of every branch."""
        z = np.array([complex(br.r, br.x) for br in self.branches])
        out = 1.0 / z
        out.flags.writeable = False
        return out

    @cached_property
    def ybus(self) -> np.ndarray:
        n = self.n_bus
        y = np.zeros((n, n), dtype=complex)
        f, t, ys = self.branch_from, self.branch_to, self.branch_y
        np.add.at(y, (f, f), ys)
        np.add.at(y, (t, t), ys)
        np.add.at(y, (f, t), -ys)
        np.add.at(y, (t, f), -ys)
        y.flags.writeable = False
        return y

    def gen_indices(self, kind: str) -> list[int]:
        return [i for i, g in enumerate(self.generators) if g.kind == kind]

    @property
    def fleet(self) -> tuple[int, int, int]:
        return tuple(len(self.gen_indices(k)) for k in GEN_KINDS)  # type: ignore[return-value]

    @cached_property
    def incident_branches(self) -> tuple[tuple[int, ...], ...]:
        inc: list[list[int]] = [[] for _ in range(self.n_bus)]
        for br in self.branches:
            inc[br.from_bus].append(br.id)
            inc[br.to_bus].append(br.id)
        return tuple(tuple(x) for x in inc)

    def totals(self) -> dict[str, Any]:
        n_t, n_w, n_s = self.fleet
        return {
            "name": self.name,
            "buses": self.n_bus,
            "branches": len(self.branches),
            "thermal": n_t,
            "wind": n_w,
            "solar": n_s,
            "base_kv": self.base_kv,
            "base_mva": self.base_mva,
            "load_p_mw": float(self.to_mw(self.load_p.sum())),
            "load_q_mvar": float(self.to_mw(self.load_q.sum())),
        }


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Violation:
    kind: str
    entity: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def add(self, kind: str, entity: str, message: str) -> None:
        self.violations.append(Violation(kind, entity, message))

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        return "; ".join(f"{v.kind} [{v.entity}]: {v.message}" for v in self.violations)


def validate_case(case: NetworkCase) -> ValidationReport:
    """Collect every invariant violation; an empty report means the case is valid."""
    rep = ValidationReport()
    n = case.n_bus

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        rep.add("duplicate id", f"buses {dupes}", "bus ids must be unique")
    if sorted(ids) != list(range(n)):
        rep.add("bus ids", "buses", "bus ids must be contiguous from 0 and listed in order")
    for b in case.buses:
        if not (np.isfinite(b.load_p) and np.isfinite(b.load_q)):
            rep.add("load", f"bus {b.id}", "non-finite load")
        if not b.v_min < b.v_max:
            rep.add("voltage bounds", f"bus {b.id}", f"v_min {b.v_min} >= v_max {b.v_max}")

    slack = case.slack_bus if isinstance(case.slack_bus, tuple) else (case.slack_bus,)
    if len(slack) == 0:
        rep.add("missing slack", "case", "no slack bus given")
    elif len(slack) > 1:
        rep.add("multiple slack", f"buses {list(slack)}", "exactly one slack bus is allowed")
    for s in slack:
        if not 0 <= s < n:
            rep.add("missing slack", f"bus {s}", "slack bus does not exist")

    for br in case.branches:
        ent = f"branch {br.id}"
        if br.from_bus == br.to_bus:
            rep.add("self loop", ent, f"from == to == {br.from_bus}")
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                rep.add("dangling branch", ent, f"bus {end} does not exist")
        if br.r < 0:
            rep.add("impedance", ent, "negative resistance")
        if not (br.x > 0 or br.r > 0):
            rep.add("impedance", ent, "zero impedance")
        if not br.s_max > 0:
            rep.add("rating", ent, "s_max must be positive")

    if len(case.branches) != n - 1:
        rep.add("radiality", "branches", f"{len(case.branches)} branches for {n} buses (need {n - 1})")
    elif not _connected(case):
        rep.add("disconnected", "branches", "branch set does not connect every bus")

    gen_buses: dict[int, int] = {}
    for i, g in enumerate(case.generators):
        ent = f"generator {i}"
        if g.kind not in GEN_KINDS:
            rep.add("generator kind", ent, f"unknown kind {g.kind!r}")
        if not 0 <= g.bus < n:
            rep.add("generator bus", ent, f"bus {g.bus} does not exist")
        elif g.bus in slack:
            rep.add("generator bus", ent, "generator placed on the slack bus")
        if g.bus in gen_buses:
            rep.add("generator bus", ent, f"bus {g.bus} already hosts generator {gen_buses[g.bus]}")
        gen_buses.setdefault(g.bus, i)
        if g.p_min > g.p_max:
            rep.add("generator limits", ent, "p_min > p_max")
        if g.q_min > g.q_max:
            rep.add("generator limits", ent, "q_min > q_max")
        if not g.v_min < g.v_max:
            rep.add("generator limits", ent, "v_min >= v_max")
        if not 0 < g.ramp_fraction <= 1:
            rep.add("generator limits", ent, "ramp_fraction outside (0, 1]")
        if g.cost.a < 0 or g.cost.reserve < 0 or g.cost.penalty < 0:
            rep.add("cost", ent, "negative cost coefficient")
    return rep


def _connected(case: NetworkCase) -> bool:
    n = case.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in case.branches:
        if 0 <= br.from_bus < n and 0 <= br.to_bus < n:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def case_from_dict(doc: dict[str, Any], validate: bool = True) -> NetworkCase:
    try:
        base_mva = float(doc["base_mva"])
        base_kv = float(doc["base_kv"])
        z_base = base_kv**2 / base_mva
        buses = tuple(
            Bus(int(b["id"]), float(b["load_p_mw"]) / base_mva, float(b["load_q_mvar"]) / base_mva,
                float(b.get("v_min", 0.95)), float(b.get("v_max", 1.05)))
            for b in doc["buses"]
        )
        branches = tuple(
            Branch(i, int(br["from"]), int(br["to"]), float(br["r_ohm"]) / z_base,
                   float(br["x_ohm"]) / z_base, float(br["s_max_mva"]) / base_mva)
            for i, br in enumerate(doc["branches"])
        )
        gens = []
        for g in doc.get("generators", []):
            cost = g.get("cost", {})
            gens.append(Generator(
                kind=str(g["kind"]), bus=int(g["bus"]),
                p_min=float(g["p_min"]) / base_mva, p_max=float(g["p_max"]) / base_mva,
                q_min=float(g["q_min"]) / base_mva, q_max=float(g["q_max"]) / base_mva,
                v_min=float(g.get("v_min", 0.95)), v_max=float(g.get("v_max", 1.05)),
                rated_p=float(g.get("rated_p", g["p_max"])) / base_mva,
                ramp_fraction=float(g.get("ramp_fraction", 1.0)),
                cost=CostParams(**{k: float(v) for k, v in cost.items()}),
            ))
        if "slack_bus" not in doc:
            raise CaseError("missing slack: no slack_bus key")
        slack = doc["slack_bus"]
        slack = tuple(int(s) for s in slack) if isinstance(slack, list) else int(slack)
        case = NetworkCase(
            name=str(doc["name"]), base_mva=base_mva, base_kv=base_kv, buses=buses,
            branches=branches, generators=tuple(gens), slack_bus=slack,
            wind=WindParams(**doc.get("wind", {})), solar=SolarParams(**doc.get("solar", {})),
        )
    except CaseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case document: {exc!r}") from exc
    if validate:
        report = validate_case(case)
        if report:
            raise CaseError(str(report))
    return case


def load_case(source: str | Path | IO[str] | IO[bytes]) -> NetworkCase:
    """Load a case from a path, a bundled case name (``ieee33``) or an open stream."""
    if hasattr(source, "read"):
        raw = source.read()  # type: ignore[union-attr]
    else:
        path = Path(source)
        if not path.exists() and str(source) in bundled_cases():
            raw = resources.files("gridrl.cases").joinpath(f"{source}.json").read_text()
        else:
            try:
                raw = path.read_text()
            except OSError as exc:
                raise CaseError(f"cannot read case {source}: {exc}") from exc
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CaseError(f"malformed case document: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError("malformed case document: top level must be an object")
    return case_from_dict(doc)


def bundled_cases() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("gridrl.cases").iterdir()
                  if p.name.endswith(".json"))


@dataclass(frozen=True)
class GraphMatrices:
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    laplacian_scaled: np.ndarray
    lambda_max: float


def largest_eigenvalue(mat: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Power iteration with a Rayleigh-quotient estimate; stops on the eigen-residual."""
    n = mat.shape[0]
    v = np.cos(np.arange(1, n + 1) * 1.3) + 0.1
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) < tol:
            break
        v = w / np.linalg.norm(w)
    return lam


def build_matrices(case: NetworkCase) -> GraphMatrices:
    n = case.n_bus
    a = np.zeros((n, n))
    a[case.branch_from, case.branch_to] = 1.0
    a[case.branch_to, case.branch_from] = 1.0
    deg = a.sum(axis=1)
    lap = np.diag(deg) - a
    lam = largest_eigenvalue(lap)
    scaled = (2.0 / lam) * lap - np.eye(n)
    for arr in (a, deg, lap, scaled):
        arr.flags.writeable = False
    return GraphMatrices(a, deg, lap, scaled, lam)
