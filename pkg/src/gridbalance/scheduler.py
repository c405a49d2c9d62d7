"""Stochastic dispatch window: build, solve and verify the MILP.

One window couples a shared battery schedule to every demand scenario.
Storage dynamics with asymmetric efficiencies are linearized through a
charge indicator and a big-M product reformulation; the convex imbalance
tariff is linearized into per-segment energies whose fill order is pinned
by saturation indicators.  Every solved window can be checked against the
scalar tariff evaluator in :mod:`gridbalance.core`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import milp as mp
from ._simplex import AT_LO, AT_UP, BASIC
from .core import BatterySpec, ImbalanceTariff, imbalance_cost
from .scengen import ScenarioSet


class SchedulerError(RuntimeError):
    """Window could not be solved; carries the offending problem."""

    def __init__(self, message, problem=None):
        super().__init__(message)
        self.problem = problem


@dataclass(frozen=True)
class WindowInput:
    """Everything the optimizer needs for one sliding window."""

    t: int
    contracted_supply: np.ndarray
    scenarios: ScenarioSet
    battery: BatterySpec
    soc_now: float
    tariff: ImbalanceTariff
    c0: float = 0.1
    c1: float = 1.0
    granularity_minutes: int = 30

    def __post_init__(self):
        sp = np.asarray(self.contracted_supply, dtype=float).copy()
        if sp.ndim != 1 or sp.size == 0:
            raise ValueError("contracted_supply must be a non-empty vector")
        sp.flags.writeable = False
        object.__setattr__(self, "contracted_supply", sp)
        if self.scenarios.window != sp.size:
            raise ValueError("scenario window does not match contracted supply")
        if self.c0 < 0 or self.c1 < 0:
            raise ValueError("objective weights must be >= 0")
        bat = self.battery.aggregate()
        object.__setattr__(self, "battery", bat)
        tol = 1e-9 * max(1.0, bat.soc_max_kwh)
        if not (bat.soc_min_kwh - tol <= self.soc_now <= bat.soc_max_kwh + tol):
            raise ValueError(
                f"initial SOC {self.soc_now} outside "
                f"[{bat.soc_min_kwh}, {bat.soc_max_kwh}]")

    @property
    def w(self) -> int:
        return self.contracted_supply.size


@dataclass(frozen=True)
class DispatchDecision:
    """First-period control extracted from a solved window."""

    p_first: float
    soc_next: float
    expected_objective: float
    per_scenario_imbalance: np.ndarray


class TariffSegments:
    """Segment geometry of a tariff, bounded by an effective big-M.

    Segments follow the sign convention of the imbalance axis: index
    ``k = 0 .. nps-1`` runs from the outermost shortage segment to the
    outermost surplus segment.  All inner segments are one threshold
    wide; the two outermost absorb the remaining range up to ``m_eff``.
    """

    def __init__(self, tariff: ImbalanceTariff, m_eff: float):
        self.tariff = tariff
        self.nps = tariff.n_segments
        self.half = self.nps // 2
        th = tariff.threshold_kwh
        if m_eff <= (self.half - 1) * th:
            raise ValueError("effective big-M does not cover the inner segments")
        self.m_eff = float(m_eff)
        outer = self.m_eff - (self.half - 1) * th
        widths = [outer] + [th] * (self.half - 1)          # neg side, outer first
        self.widths = np.array(widths + widths[::-1])       # mirrored for surplus
        self.signs = np.array([-1.0] * self.half + [1.0] * self.half)
        self.prices = np.array(tariff.prices)

    def bounds(self, k: int) -> tuple:
        if self.signs[k] < 0:
            return -self.widths[k], 0.0
        return 0.0, self.widths[k]

    def fill(self, im: float) -> np.ndarray:
        """Unique segment decomposition of one imbalance value."""
        z = np.zeros(self.nps)
        if im < 0:
            ks = range(self.half - 1, -1, -1)     # inner shortage outward
        else:
            ks = range(self.half, self.nps)       # inner surplus outward
        remaining = abs(im)
        for k in ks:
            take = min(remaining, self.widths[k])
            z[k] = self.signs[k] * take
            remaining -= take
            if remaining <= 0:
                break
        if remaining > 1e-9:
            raise ValueError(f"imbalance {im} exceeds representable range")
        return z

    def partial_segment(self, im: float) -> int:
        """First unsaturated segment walking outward; hosts the basic var."""
        if im < 0:
            ks = range(self.half - 1, -1, -1)
        else:
            ks = range(self.half, self.nps)
        remaining = abs(im)
        for k in ks:
            if remaining < self.widths[k]:
                return k
            remaining -= self.widths[k]
        raise ValueError(f"imbalance {im} exceeds representable range")

    def indicator_values(self, im: float) -> np.ndarray:
        """Integral saturation/side indicators consistent with fill(im)."""
        th = self.tariff.threshold_kwh
        y = np.zeros(self.nps - 1)
        for j in range(1, self.half):             # j-th inner shortage saturated
            y[j - 1] = 1.0 if -im > j * th else 0.0
        y[self.half - 1] = 1.0 if im > 0 else 0.0  # side selector
        for j in range(1, self.half):
            y[self.half - 1 + j] = 1.0 if im > j * th else 0.0
        return y


def effective_big_m(win: WindowInput) -> float:
    """Tight big-M covering every reachable imbalance with ample margin."""
    tariff = win.tariff
    th = tariff.threshold_kwh
    half = tariff.n_segments // 2
    pce, pde = win.battery.energy_per_period(win.granularity_minutes)
    dm = win.scenarios.demands()
    gap = float(np.max(np.abs(win.contracted_supply[None, :] - dm)))
    reach = gap + max(pce, pde)
    m_eff = (half - 1) * th + 2.0 * reach + max(th, 1.0)
    if m_eff > tariff.big_m:
        if tariff.big_m - (half - 1) * th < reach:
            raise ValueError(
                f"tariff big_m {tariff.big_m} cannot encode imbalances up to {reach}")
        m_eff = tariff.big_m
    return m_eff


def add_tariff_block(pb: mp.ProblemBuilder, seg: TariffSegments, im_var: int,
                     cost_weight: float, suffix: str = "",
                     crash_rows=None, crash_status=None, im0: float = None):
    """Add the Z/Y linearization of one imbalance variable.

    Returns ``(z_vars, y_vars)``.  ``cost_weight`` multiplies the
    segment revenue/cost terms in the objective (typically
    ``c1 * Pr(s)``).  When ``crash_rows``/``crash_status`` dicts are
    given along with the no-dispatch imbalance ``im0``, the entries for a
    feasible starting basis are recorded into them.
    """
    nps, half, th = seg.nps, seg.half, seg.tariff.threshold_kwh
    z_vars = []
    for k in range(nps):
        lo, hi = seg.bounds(k)
        z_vars.append(pb.add_var(lo=lo, hi=hi,
                                 obj=-cost_weight * seg.prices[k],
                                 name=f"Z{suffix}_{k + 1}"))
    y_vars = [pb.add_var(binary=True, name=f"Y{suffix}_{j + 1}")
              for j in range(nps - 1)]
    y_side = y_vars[half - 1]

    crash = crash_rows is not None
    if crash:
        z0 = seg.fill(im0)
        y0 = seg.indicator_values(im0)
        kb = seg.partial_segment(im0)
        crash_rows[pb.n_rows] = z_vars[kb]
        for k in range(nps):
            if k == kb:
                continue
            lo, hi = seg.bounds(k)
            crash_status[z_vars[k]] = AT_LO if z0[k] == lo else AT_UP
        for j in range(nps - 1):
            crash_status[y_vars[j]] = AT_UP if y0[j] == 1.0 else AT_LO

    pb.add_eq([(im_var, 1.0)] + [(z, -1.0) for z in z_vars], 0.0)

    for j in range(1, half):               # shortage side saturation chain
        inner, outer = half - j, half - j - 1
        pb.add_ge([(z_vars[outer], 1.0),
                   (y_vars[j - 1], seg.widths[outer])], 0.0)
        pb.add_le([(z_vars[inner], 1.0),
                   (y_vars[j - 1], seg.widths[inner])], 0.0)
        if j >= 2:
            pb.add_le([(y_vars[j - 1], 1.0), (y_vars[j - 2], -1.0)], 0.0)
    for j in range(1, half):               # surplus side saturation chain
        inner, outer = half + j - 1, half + j
        yj = y_vars[half - 1 + j]
        pb.add_le([(z_vars[outer], 1.0), (yj, -seg.widths[outer])], 0.0)
        pb.add_ge([(z_vars[inner], 1.0), (yj, -seg.widths[inner])], 0.0)
        if j >= 2:
            pb.add_le([(yj, 1.0), (y_vars[half - 2 + j], -1.0)], 0.0)
    for k in range(half):                  # side selector quiets one half
        pb.add_ge([(z_vars[k], 1.0), (y_side, -seg.widths[k])],
                  -seg.widths[k])
    for k in range(half, nps):
        pb.add_le([(z_vars[k], 1.0), (y_side, -seg.widths[k])], 0.0)
    if half >= 2:                          # order-strengthening inequalities
        pb.add_le([(y_vars[0], 1.0), (y_side, 1.0)], 1.0)
        pb.add_le([(y_vars[half], 1.0), (y_side, -1.0)], 0.0)
    return z_vars, y_vars


class WindowEncoding:
    """MILP encoding of one window plus a feasible starting basis."""

    def __init__(self, win: WindowInput):
        self.win = win
        w, ns = win.w, win.scenarios.n_scenarios
        bat = win.battery
        pce, pde = bat.energy_per_period(win.granularity_minutes)
        eta_c, eta_d = bat.eta_charge, bat.eta_discharge
        xmin, xmax = bat.soc_min_kwh, bat.soc_max_kwh
        prob = win.scenarios.probability
        dm = win.scenarios.demands()
        self.seg = TariffSegments(win.tariff, effective_big_m(win))

        pb = mp.ProblemBuilder()
        crash_rows: dict = {}
        crash_status: dict = {}

        self.P = [pb.add_var(lo=-pde, hi=pce, name=f"P_{i}") for i in range(w)]
        self.S = [pb.add_var(binary=True, name=f"S_{i}") for i in range(w)]
        self.Ax = [pb.add_var(lo=0.0, hi=pce, name=f"Ax_{i}") for i in range(w)]
        self.X = [pb.add_var(lo=xmin, hi=xmax, name=f"X_{i}") for i in range(w)]
        self.Im = [[pb.add_var(lo=-np.inf, hi=np.inf, name=f"Im_{i}_{s}")
                    for s in range(ns)] for i in range(w)]
        self.U = [[pb.add_var(lo=0.0, obj=win.c0 * prob, name=f"U_{i}_{s}")
                   for s in range(ns)] for i in range(w)]
        self.Z = [[None] * ns for _ in range(w)]
        self.Y = [[None] * ns for _ in range(w)]

        im0 = win.contracted_supply[None, :] - dm  # dispatch-free imbalance

        for i in range(w):
            # imbalance definition per scenario, battery shared across them
            for s in range(ns):
                crash_rows[pb.n_rows] = self.Im[i][s]
                pb.add_eq([(self.Im[i][s], 1.0), (self.P[i], 1.0)],
                          win.contracted_supply[i] - dm[s, i])

            # SOC recursion (charge-indicator product already linearized)
            crash_rows[pb.n_rows] = self.X[i]
            coeffs = [(self.X[i], 1.0),
                      (self.Ax[i], -(eta_c - 1.0 / eta_d)),
                      (self.P[i], -1.0 / eta_d)]
            rhs = win.soc_now if i == 0 else 0.0
            if i > 0:
                coeffs.append((self.X[i - 1], -1.0))
            pb.add_eq(coeffs, rhs)

            # big-M linearization of Ax = S * P with the power limits
            P_i, S_i, Ax_i = self.P[i], self.S[i], self.Ax[i]
            pb.add_le([(S_i, pde), (P_i, -1.0)], pde)
            crash_rows[pb.n_rows] = P_i
            pb.add_le([(S_i, -pde), (P_i, 1.0)], 0.0)
            pb.add_le([(S_i, pde), (Ax_i, 1.0), (P_i, -1.0)], pde)
            pb.add_le([(S_i, pde), (Ax_i, -1.0), (P_i, 1.0)], pde)
            pb.add_le([(S_i, -pce), (Ax_i, 1.0)], 0.0)
            pb.add_le([(S_i, -pce), (Ax_i, -1.0)], 0.0)
            # hull facet of the product block, implied at integral S; keeps
            # the relaxation from claiming better-than-physical efficiency
            pb.add_ge([(Ax_i, 1.0), (P_i, -1.0)], 0.0)

            # tariff segments and absolute-value lift per scenario
            for s in range(ns):
                self.Z[i][s], self.Y[i][s] = add_tariff_block(
                    pb, self.seg, self.Im[i][s], win.c1 * prob,
                    suffix=f"_{i}_{s}", crash_rows=crash_rows,
                    crash_status=crash_status, im0=im0[s, i])
                u = self.U[i][s]
                if im0[s, i] >= 0:
                    crash_rows[pb.n_rows] = u
                pb.add_le([(u, -1.0), (self.Im[i][s], 1.0)], 0.0)
                if im0[s, i] < 0:
                    crash_rows[pb.n_rows] = u
                pb.add_le([(u, -1.0), (self.Im[i][s], -1.0)], 0.0)

        self.problem = pb.build_milp()
        n, m = pb.n_vars, pb.n_rows
        basis = np.array([crash_rows.get(r, n + r) for r in range(m)],
                         dtype=np.int64)
        vstatus = np.full(n + m, AT_LO, dtype=np.int8)
        for var, st in crash_status.items():
            vstatus[var] = st
        vstatus[basis] = BASIC
        self.crash = (basis, vstatus)
        # branch on charge indicators before tariff-fill indicators
        s_set = set(self.S)
        self.branch_priority = [0.0 if v in s_set else 1.0
                                for v in self.problem.binary_vars]

    def extract(self, sol: mp.MilpSolution) -> DispatchDecision:
        win = self.win
        bat = win.battery
        pce, pde = bat.energy_per_period(win.granularity_minutes)
        x = sol.x
        p_first = float(np.clip(x[self.P[0]], -pde, pce))
        soc_next = float(np.clip(x[self.X[0]], bat.soc_min_kwh, bat.soc_max_kwh))
        ims = np.array([x[self.Im[0][s]]
                        for s in range(win.scenarios.n_scenarios)])
        return DispatchDecision(p_first, soc_next, float(sol.objective), ims)


def build_problem(win: WindowInput) -> mp.MilpProblem:
    """Spec surface: the MILP for one window (see WindowEncoding)."""
    return WindowEncoding(win).problem


def solve_window_full(win: WindowInput, warm_start=None, gap_tol=1e-6,
                      node_limit=None):
    """Build and solve one window; returns (decision, solution, encoding).

    ``warm_start`` may carry the basis of a previous, same-shaped window;
    otherwise the built-in feasible starting basis is used.
    """
    enc = WindowEncoding(win)
    lp = enc.problem.base
    warm = enc.crash
    if warm_start is not None:
        basis, vstatus = warm_start
        if len(basis) == lp.n_rows and len(vstatus) == lp.n_rows + lp.n_vars:
            warm = warm_start
    sol = mp.solve_milp(enc.problem, gap_tol=gap_tol, node_limit=node_limit,
                        warm_start=warm, branch_priority=enc.branch_priority)
    if sol.status not in ("optimal", "node_limit") or sol.x is None:
        raise SchedulerError(
            f"window at t={win.t} came back {sol.status}; the problem always "
            f"admits P=0, so this is an internal error", problem=enc.problem)
    return enc.extract(sol), sol, enc


def solve_window(win: WindowInput, warm_start=None, gap_tol=1e-6,
                 node_limit=None) -> DispatchDecision:
    decision, _, _ = solve_window_full(win, warm_start, gap_tol, node_limit)
    return decision


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    issues: tuple
    max_cost_error: float

    def __str__(self):
        if self.ok:
            return f"clean (max tariff deviation {self.max_cost_error:.2e} JPY)"
        head = "\n  ".join(self.issues[:10])
        return f"{len(self.issues)} issue(s):\n  {head}"


def verify_solution(win: WindowInput, decision: DispatchDecision,
                    sol: mp.MilpSolution, cost_tol=1e-4,
                    encoding: WindowEncoding = None) -> VerificationReport:
    """Check a solved window against the scalar tariff evaluator.

    Confirms that the segment decomposition reproduces the reference
    imbalance cost for every (period, scenario), that no outer segment is
    active while its inner neighbour is unsaturated (where that changes
    cost), and that the charge-product identity holds at the integral
    charge indicators.
    """
    enc = encoding if encoding is not None else WindowEncoding(win)
    seg = enc.seg
    x = sol.x
    tariff = win.tariff
    issues = []
    max_dev = 0.0
    w, ns = win.w, win.scenarios.n_scenarios
    for i in range(w):
        p_val = x[enc.P[i]]
        s_val = round(float(x[enc.S[i]]))
        ax_val = x[enc.Ax[i]]
        if abs(ax_val - s_val * p_val) > 1e-6 * max(1.0, abs(p_val)):
            issues.append(f"period {i}: product identity Ax={ax_val:.6f} "
                          f"!= S*P={s_val * p_val:.6f}")
        for s in range(ns):
            im = x[enc.Im[i][s]]
            z = np.array([x[j] for j in enc.Z[i][s]])
            enc_cost = -float(seg.prices @ z)
            oracle = imbalance_cost(im, tariff)
            dev = abs(enc_cost - oracle)
            max_dev = max(max_dev, dev)
            if dev > cost_tol:
                issues.append(
                    f"period {i} scenario {s}: segment cost {enc_cost:.6f} "
                    f"vs tariff {oracle:.6f} (|Im|={abs(im):.3f})")
            issues.extend(_fill_order_issues(seg, z, i, s))
    return VerificationReport(not issues, tuple(issues), max_dev)


def _fill_order_issues(seg: TariffSegments, z, i, s, tol=1e-6):
    issues = []
    half = seg.half
    sides = [(range(half - 1, -1, -1), "shortage"),
             (range(half, seg.nps), "surplus")]
    for ks, label in sides:
        ks = list(ks)
        for inner, outer in zip(ks, ks[1:]):
            outer_active = abs(z[outer]) > tol
            inner_unsat = abs(z[inner]) < seg.widths[inner] - tol
            costlier = seg.prices[outer] != seg.prices[inner]
            if outer_active and inner_unsat and costlier:
                issues.append(
                    f"period {i} scenario {s}: {label} segment {outer + 1} "
                    f"active ({z[outer]:.4f}) while segment {inner + 1} "
                    f"unsaturated ({z[inner]:.4f})")
    return issues
