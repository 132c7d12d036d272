"""Newton-Raphson AC power flow, network losses and constraint auditing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridrl.grid_model import NetworkCase

PQ, PV, REF = 0, 1, 2


@dataclass
class DispatchAction:
    """Per-generator setpoints in case generator order (thermal, wind, solar).

    ``v`` holds voltage-magnitude setpoints in ``pv`` mode and reactive power
    setpoints (p.u.) in ``pq`` mode.  Offline generators inject nothing.
    """

    p: np.ndarray
    v: np.ndarray
    online: np.ndarray | None = None
    mode: str = "pv"

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.online is None:
            self.online = np.ones(self.p.shape, dtype=bool)
        else:
            self.online = np.asarray(self.online, dtype=bool)

    def copy(self) -> "DispatchAction":
        return DispatchAction(self.p.copy(), self.v.copy(), self.online.copy(), self.mode)

    def to_vector(self) -> np.ndarray:
        return np.stack([self.p, self.v], axis=1).ravel()

    @classmethod
    def from_vector(cls, vec, online=None, mode: str = "pv") -> "DispatchAction":
        vec = np.asarray(vec, dtype=float).reshape(-1, 2)
        return cls(vec[:, 0].copy(), vec[:, 1].copy(), online, mode)


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    branch_p: np.ndarray  # from-end injection into each branch
    branch_q: np.ndarray
    branch_p_to: np.ndarray  # to-end injection into each branch
    branch_q_to: np.ndarray
    loss_p: float
    loss_q: float
    slack_p: float
    slack_q: float
    gen_p: np.ndarray  # realised per-generator output, 0 when offline
    gen_q: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    converged: bool
    iterations: int
    mismatch: float
    bus_type: np.ndarray = field(repr=False)

    @property
    def branch_s(self) -> np.ndarray:
        """Apparent power at the sending (larger-magnitude) end."""
        return np.maximum(np.hypot(self.branch_p, self.branch_q),
                          np.hypot(self.branch_p_to, self.branch_q_to))


class PowerFlowError(RuntimeError):
    pass


def _ds_dv(ybus: np.ndarray, v: np.ndarray):
    """Partial derivatives of complex bus injections w.r.t. |V| and angle."""
    ibus = ybus @ v
    vn = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * vn[None, :])
    ds_dvm.flat[:: len(v) + 1] += np.conj(ibus) * vn
    ds_dva = -v[:, None] * np.conj(ybus * v[None, :])
    ds_dva.flat[:: len(v) + 1] += v * np.conj(ibus)
    return ds_dvm, 1j * ds_dva


def _newton(ybus, v, s_spec, pv, pq, tol, max_iter):
    pvpq = np.concatenate([pv, pq])
    n_pvpq, n_pq = len(pvpq), len(pq)
    rows_p, rows_q = np.ix_(pvpq, pvpq), np.ix_(pq, pvpq)
    rows_pm, rows_qm = np.ix_(pvpq, pq), np.ix_(pq, pq)
    vm, va = np.abs(v), np.angle(v)
    jac = np.empty((n_pvpq + n_pq, n_pvpq + n_pq))

    def mismatch(v):
        mis = v * np.conj(ybus @ v) - s_spec
        return np.concatenate([mis.real[pvpq], mis.imag[pq]])

    f = mismatch(v)
    norm = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while norm >= tol and it < max_iter:
        it += 1
        ds_dvm, ds_dva = _ds_dv(ybus, v)
        jac[:n_pvpq, :n_pvpq] = ds_dva[rows_p].real
        jac[:n_pvpq, n_pvpq:] = ds_dvm[rows_pm].real
        jac[n_pvpq:, :n_pvpq] = ds_dva[rows_q].imag
        jac[n_pvpq:, n_pvpq:] = ds_dvm[rows_qm].imag
        try:
            dx = -np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            return v, False, it, np.inf
        va[pvpq] += dx[:n_pvpq]
        vm[pq] += dx[n_pvpq:n_pvpq + n_pq]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0.05) or np.any(vm > 5.0):
            return v, False, it, np.inf
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = np.max(np.abs(f)) if f.size else 0.0
    return v, bool(norm < tol), it, float(norm)


def solve_power_flow(
    case: NetworkCase,
    dispatch: DispatchAction,
    availability=None,
    *,
    load_p: np.ndarray | None = None,
    load_q: np.ndarray | None = None,
    slack_v: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 50,
    enforce_q_limits: bool = True,
) -> PowerFlowSolution:
    """Polar Newton-Raphson from a flat start.

    Online generators in ``pv`` mode regulate their bus voltage; a generator
    whose reactive output leaves its limits is switched to a PQ injection at
    the violated limit and the flow is re-solved.  Switched units whose bus
    voltage then overshoots the setpoint are handed back to voltage control
    (see ``_refine_limits``).  When ``availability`` is given, renewable
    output is capped at the available power.
    """
    n = case.n_bus
    n_gen = len(case.generators)
    if dispatch.p.shape != (n_gen,) or dispatch.v.shape != (n_gen,):
        raise ValueError(f"dispatch has {dispatch.p.shape} setpoints for {n_gen} generators")
    ld_p = case.load_p if load_p is None else np.asarray(load_p, dtype=float)
    ld_q = case.load_q if load_q is None else np.asarray(load_q, dtype=float)

    gen_bus = np.array([g.bus for g in case.generators], dtype=int)
    online = dispatch.online.copy()
    gen_p = np.where(online, dispatch.p, 0.0)
    if availability is not None:
        gen_p = np.minimum(gen_p, availability.cap)
    q_min = np.array([g.q_min for g in case.generators])
    q_max = np.array([g.q_max for g in case.generators])

    bus_type = np.full(n, PQ)
    bus_type[case.slack] = REF
    p_inj = -ld_p.copy()
    q_inj = -ld_q.copy()
    np.add.at(p_inj, gen_bus[online], gen_p[online])
    vm0 = np.ones(n)
    vm0[case.slack] = slack_v
    gen_is_pv = online & (dispatch.mode == "pv")
    gen_q_fixed = np.where(online & ~gen_is_pv, dispatch.v, 0.0)
    np.add.at(q_inj, gen_bus, gen_q_fixed)
    bus_type[gen_bus[gen_is_pv]] = PV
    vm0[gen_bus[gen_is_pv]] = dispatch.v[gen_is_pv]

    ybus = case.ybus
    init = (bus_type.copy(), q_inj.copy(), gen_q_fixed.copy(), gen_is_pv.copy())
    v = vm0.astype(complex)
    total_it = 0
    switches = 0
    while True:
        pv = np.flatnonzero(bus_type == PV)
        pq = np.flatnonzero(bus_type == PQ)
        s_spec = p_inj + 1j * q_inj
        v, ok, it, norm = _newton(ybus, v, s_spec, pv, pq, tol, max_iter)
        total_it += it
        if not ok:
            break
        if not enforce_q_limits:
            break
        s_calc = v * np.conj(ybus @ v)
        q_gen_bus = s_calc.imag + ld_q
        violated = []
        for i in np.flatnonzero(gen_is_pv):
            b = gen_bus[i]
            if bus_type[b] != PV:
                continue
            q = q_gen_bus[b]
            if q > q_max[i] + tol or q < q_min[i] - tol:
                violated.append((i, float(np.clip(q, q_min[i], q_max[i]))))
        if not violated:
            break
        if switches + len(violated) > n:
            ok = False
            break
        for i, q_lim in violated:
            b = gen_bus[i]
            bus_type[b] = PQ
            q_inj[b] += q_lim
            gen_q_fixed[i] = q_lim
            gen_is_pv[i] = False
            switches += 1

    units = np.flatnonzero(init[3])
    if enforce_q_limits and len(units):
        v_set = dispatch.v
        if ok:
            regulating = {int(i) for i in units if gen_is_pv[i]}
            q_at = {int(i): float(gen_q_fixed[i]) for i in units if not gen_is_pv[i]}
        else:
            # setpoints far outside the reachable range can make the plain solve
            # diverge; restart with every unit at the limit on its setpoint's side
            flat = np.where(init[0] == REF, vm0, 1.0)
            v, ok, it, norm = _solve_fixed_q(ybus, flat, p_inj, init, gen_bus, units, set(), {}, v_set, tol,
                                             max_iter)
            total_it += it
            regulating = set()
            q_at = {int(i): float(q_max[i] if v_set[i] > abs(v[gen_bus[i]]) else q_min[i]) for i in units}
        if ok:
            v, ok, it, norm, regulating, q_at = _refine_limits(
                ybus, v, p_inj, init, gen_bus, units, regulating, q_at, v_set, q_min, q_max, ld_q, tol, max_iter)
            total_it += it
            bus_type = init[0].copy()
            bus_type[gen_bus[units]] = PQ
            bus_type[[gen_bus[i] for i in regulating]] = PV
            gen_is_pv = np.zeros_like(init[3])
            gen_is_pv[list(regulating)] = True
            gen_q_fixed = init[2].copy()
            for i, q in q_at.items():
                if i not in regulating:
                    gen_q_fixed[i] = q

    return _assemble(case, v, ok, total_it, norm, bus_type, gen_bus, online, gen_p,
                     gen_is_pv, gen_q_fixed, ld_p, ld_q)


def _solve_fixed_q(ybus, v, p_inj, init, gen_bus, units, regulating, q_at, v_set, tol, max_iter):
    """Newton solve with ``regulating`` units holding their setpoints and the rest at ``q_at``."""
    q_inj = init[1].copy()
    bus_type = init[0].copy()
    bus_type[gen_bus[units]] = PQ
    for i in units:
        if i not in regulating:
            q_inj[gen_bus[i]] += q_at.get(i, 0.0)
    pv = np.array(sorted(gen_bus[i] for i in regulating), dtype=int)
    bus_type[pv] = PV
    vm = np.abs(v).astype(float)
    for i in regulating:
        vm[gen_bus[i]] = v_set[i]
    v = vm * np.exp(1j * np.angle(v))
    return _newton(ybus, v, p_inj + 1j * q_inj, pv, np.flatnonzero(bus_type == PQ), tol, max_iter)


def _refine_limits(ybus, v, p_inj, init, gen_bus, units, regulating, q_at, v_set, q_min, q_max, ld_q, tol,
                   max_iter, max_releases: int = 3):
    """Clamp and release voltage-controlling units until the limits are consistent.

    Starting from a solved state, a regulating unit whose reactive output is
    outside its limits is clamped to the violated limit, and a clamped unit
    whose bus voltage overshoots its setpoint is released back to voltage
    control, one at a time with the largest overshoot first.  Each round
    warm-starts from the previous solution.  A release that makes the solve
    diverge is undone and that unit stays at its limit, as does a unit that
    has been released ``max_releases`` times.  The end state satisfies the
    usual complementarity: each unit either holds its setpoint within limits
    or sits at a limit with its voltage on the matching side.
    """
    regulating = set(regulating)
    q_at = dict(q_at)
    releases = {int(i): 0 for i in units}
    total_it = 0
    norm = 0.0
    ok = True
    for _ in range(max_releases * len(units) * 2 + 4):
        q_bus = (v * np.conj(ybus @ v)).imag + ld_q
        clamp = [i for i in regulating if not q_min[i] - tol <= q_bus[gen_bus[i]] <= q_max[i] + tol]
        for i in clamp:
            q_at[i] = float(np.clip(q_bus[gen_bus[i]], q_min[i], q_max[i]))
            regulating.discard(i)
        release = None
        if not clamp:
            over = {}
            for i in units:
                if i in regulating or releases[i] >= max_releases:
                    continue
                vb = abs(v[gen_bus[i]])
                d = vb - v_set[i] if q_at[i] >= q_max[i] - tol else v_set[i] - vb if q_at[i] <= q_min[i] + tol \
                    else abs(vb - v_set[i])
                if d > tol:
                    over[i] = d
            if not over:
                return v, ok, total_it, norm, regulating, q_at
            release = max(over, key=over.get)
            regulating.add(release)
            releases[release] += 1
        v_new, ok_new, it, norm_new = _solve_fixed_q(ybus, v, p_inj, init, gen_bus, units, regulating, q_at,
                                                     v_set, tol, max_iter)
        total_it += it
        if ok_new:
            v, norm = v_new, norm_new
        elif release is not None:
            regulating.discard(release)
            releases[release] = max_releases
        else:
            return v_new, False, total_it, norm_new, regulating, q_at
    return v, False, total_it, norm, regulating, q_at


def _assemble(case, v, ok, iterations, norm, bus_type, gen_bus, online, gen_p, gen_is_pv,
              gen_q_fixed, ld_p, ld_q) -> PowerFlowSolution:
    s_calc = v * np.conj(case.ybus @ v)
    f, t, y = case.branch_from, case.branch_to, case.branch_y
    i_ft = (v[f] - v[t]) * y
    s_from = v[f] * np.conj(i_ft)
    s_to = v[t] * np.conj(-i_ft)
    loss = s_from + s_to
    gen_q = np.where(gen_is_pv, s_calc.imag[gen_bus] + ld_q[gen_bus], gen_q_fixed)
    gen_q = np.where(online, gen_q, 0.0)
    sl = case.slack
    return PowerFlowSolution(
        v_mag=np.abs(v), v_ang=np.angle(v),
        branch_p=s_from.real, branch_q=s_from.imag,
        branch_p_to=s_to.real, branch_q_to=s_to.imag,
        loss_p=float(loss.real.sum()), loss_q=float(loss.imag.sum()),
        slack_p=float(s_calc[sl].real + ld_p[sl]), slack_q=float(s_calc[sl].imag + ld_q[sl]),
        gen_p=np.where(online, gen_p, 0.0), gen_q=gen_q,
        load_p=np.asarray(ld_p, dtype=float), load_q=np.asarray(ld_q, dtype=float),
        converged=ok, iterations=iterations, mismatch=norm, bus_type=bus_type,
    )


def system_losses(sol: PowerFlowSolution, case: NetworkCase) -> tuple[float, float]:
    """Branch losses from terminal voltages through conductance and susceptance."""
    if not sol.converged:
        raise PowerFlowError("losses requested for an unconverged power flow")
    f, t = case.branch_from, case.branch_to
    g = np.array([br.g for br in case.branches])
    b = np.array([br.b for br in case.branches])
    vm, va = sol.v_mag, sol.v_ang
    term = vm[f] ** 2 + vm[t] ** 2 - 2 * vm[f] * vm[t] * np.cos(va[f] - va[t])
    return float(g @ term), float(b @ term)


@dataclass(frozen=True)
class ConstraintViolation:
    kind: str  # load_voltage | gen_voltage | gen_p | gen_q | branch_flow | balance
    entity: int
    magnitude: float  # positive above an upper limit, negative below a lower one


@dataclass
class ConstraintReport:
    violations: list[ConstraintViolation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.violations)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def count(self, *kinds: str) -> int:
        return sum(1 for v in self.violations if v.kind in kinds)

    def of_kind(self, kind: str) -> list[ConstraintViolation]:
        return [v for v in self.violations if v.kind == kind]


def _bound_excess(x, lo, hi, tol):
    if x > hi + tol:
        return x - hi
    if x < lo - tol:
        return x - lo
    return None


def check_constraints(sol: PowerFlowSolution, case: NetworkCase, dispatch: DispatchAction,
                      tol: float = 1e-9) -> ConstraintReport:
    rep = ConstraintReport()
    if not sol.converged:
        rep.violations.append(ConstraintViolation("balance", -1, float(sol.mismatch)))
        return rep
    add = rep.violations.append
    for bus in range(case.n_bus):
        if bus == case.slack:
            continue
        e = _bound_excess(sol.v_mag[bus], case.bus_v_min[bus], case.bus_v_max[bus], tol)
        if e is not None:
            add(ConstraintViolation("load_voltage", bus, float(e)))
    for i, g in enumerate(case.generators):
        if not dispatch.online[i]:
            continue
        e = _bound_excess(sol.v_mag[g.bus], g.v_min, g.v_max, tol)
        if e is not None:
            add(ConstraintViolation("gen_voltage", i, float(e)))
        e = _bound_excess(sol.gen_p[i], g.p_min if g.kind == "thermal" else 0.0, g.p_max, tol)
        if e is not None:
            add(ConstraintViolation("gen_p", i, float(e)))
        e = _bound_excess(sol.gen_q[i], g.q_min, g.q_max, tol)
        if e is not None:
            add(ConstraintViolation("gen_q", i, float(e)))
    s = sol.branch_s
    for k, br in enumerate(case.branches):
        if s[k] > br.s_max + tol:
            add(ConstraintViolation("branch_flow", k, float(s[k] - br.s_max)))
    return rep
