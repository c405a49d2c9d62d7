"""Sparse linear programs, a revised-simplex solver and branch-and-bound.

The LP engine lives in :mod:`gridbalance._simplex`; this module owns the
problem containers, the MILP search and a small algebraic text format
(`write_lp_text` / `parse_lp_text`) for dumping problems so they can be
cross-checked with external solvers.
"""

from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._simplex import AT_LO, AT_UP, BASIC, BoundedSimplex, SimplexError

LE, EQ, GE = -1, 0, 1

_REL_TEXT = {LE: "<=", EQ: "=", GE: ">="}


@dataclass(frozen=True)
class LinearProgram:
    """min c.x  s.t.  A x (<=,=,>=) b,  lo <= x <= hi (inf allowed)."""

    c: np.ndarray
    A: sp.csr_matrix
    rel: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
        object.__setattr__(self, "rel", np.asarray(self.rel, dtype=np.int8))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        m, n = self.A.shape
        if not (self.c.size == self.lo.size == self.hi.size == n):
            raise ValueError("objective/bounds size mismatch with A")
        if not (self.rel.size == self.b.size == m):
            raise ValueError("relation/rhs size mismatch with A")
        if self.A.nnz and not np.all(np.isfinite(self.A.data)):
            raise ValueError("constraint coefficients must be finite")
        if not np.all(np.isfinite(self.c)) or not np.all(np.isfinite(self.b)):
            raise ValueError("objective and rhs must be finite")
        if np.any(self.lo > self.hi):
            raise ValueError("variable with lo > hi")

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def var_name(self, j: int) -> str:
        return self.names[j] if self.names else f"x{j}"


@dataclass(frozen=True)
class MilpProblem:
    base: LinearProgram
    binary_vars: tuple = ()

    def __post_init__(self):
        idx = tuple(sorted(int(j) for j in set(self.binary_vars)))
        object.__setattr__(self, "binary_vars", idx)
        for j in idx:
            if not 0 <= j < self.base.n_vars:
                raise ValueError(f"binary index {j} out of range")
            if self.base.lo[j] != 0.0 or self.base.hi[j] != 1.0:
                raise ValueError(f"binary variable {j} must have bounds [0, 1]")


@dataclass
class MilpSolution:
    status: str                 # optimal | infeasible | unbounded | node_limit
    objective: float | None
    x: np.ndarray | None
    node_count: int = 1
    lp_iterations: int = 0
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    basis: tuple | None = field(default=None, repr=False)

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


class ProblemBuilder:
    """Incremental construction of a sparse LP / MILP."""

    def __init__(self):
        self._lo, self._hi, self._obj, self._names = [], [], [], []
        self._rows_i, self._rows_j, self._rows_v = [], [], []
        self._rel, self._rhs = [], []
        self._binary = []

    def add_var(self, lo=0.0, hi=np.inf, obj=0.0, name=None, binary=False) -> int:
        j = len(self._lo)
        if binary:
            lo, hi = 0.0, 1.0
            self._binary.append(j)
        self._lo.append(float(lo))
        self._hi.append(float(hi))
        self._obj.append(float(obj))
        self._names.append(name if name is not None else f"x{j}")
        return j

    def add_row(self, coeffs, rel, rhs):
        i = len(self._rel)
        for j, v in coeffs:
            if v != 0.0:
                self._rows_i.append(i)
                self._rows_j.append(j)
                self._rows_v.append(float(v))
        self._rel.append(rel)
        self._rhs.append(float(rhs))

    def add_le(self, coeffs, rhs):
        self.add_row(coeffs, LE, rhs)

    def add_ge(self, coeffs, rhs):
        self.add_row(coeffs, GE, rhs)

    def add_eq(self, coeffs, rhs):
        self.add_row(coeffs, EQ, rhs)

    @property
    def n_vars(self) -> int:
        return len(self._lo)

    @property
    def n_rows(self) -> int:
        return len(self._rel)

    def build_lp(self) -> LinearProgram:
        n, m = len(self._lo), len(self._rel)
        A = sp.csr_matrix(
            (self._rows_v, (self._rows_i, self._rows_j)), shape=(m, n))
        return LinearProgram(self._obj, A, self._rel, self._rhs,
                             self._lo, self._hi, tuple(self._names))

    def build_milp(self) -> MilpProblem:
        return MilpProblem(self.build_lp(), tuple(self._binary))


def _make_solver(lp: LinearProgram) -> BoundedSimplex:
    return BoundedSimplex(lp.A, lp.rel, lp.b, lp.c, lp.lo, lp.hi)


def _lp_solution(res, node_count=1) -> MilpSolution:
    ok = res["status"] == "optimal"
    return MilpSolution(
        status=res["status"],
        objective=res["objective"] if ok else None,
        x=res["x"] if ok else None,
        node_count=node_count,
        lp_iterations=res["iters"],
        duals=res["y"] if ok else None,
        reduced_costs=res["dj"] if ok else None,
        basis=(res["basis"], res["vstatus"]) if ok else None,
    )


def solve_lp(lp: LinearProgram, warm_start=None) -> MilpSolution:
    """Solve the continuous LP; deterministic for identical inputs.

    ``warm_start`` is an optional ``(basis, vstatus)`` pair as returned in
    ``MilpSolution.basis``; an unusable warm start silently falls back to
    the slack basis.
    """
    solver = _make_solver(lp)
    basis = vstatus = None
    if warm_start is not None:
        basis, vstatus = warm_start
    res = solver.solve(basis, vstatus)
    return _lp_solution(res)


_INT_TOL = 1e-6


def _fractional(x, binaries):
    vals = x[binaries]
    frac = np.minimum(np.abs(vals), np.abs(vals - 1.0))
    return frac > _INT_TOL


def solve_milp(problem: MilpProblem, gap_tol=1e-6, node_limit=None,
               warm_start=None, branch_priority=None) -> MilpSolution:
    """Best-first branch and bound over the binary variables.

    Branches on the binary closest to 0.5 (ties to the lowest index),
    prunes by bound, and terminates once the best open bound is within
    ``gap_tol`` (relative) of the incumbent.  Hitting ``node_limit``
    returns the best incumbent with status ``node_limit``.

    ``branch_priority`` optionally ranks the binaries (aligned with
    ``problem.binary_vars``, lower branches first); the 0.5 rule breaks
    ties within a rank.
    """
    lp = problem.base
    binaries = np.array(problem.binary_vars, dtype=np.int64)
    if branch_priority is None:
        priority = np.zeros(binaries.size)
    else:
        priority = np.asarray(branch_priority, dtype=float)
        if priority.size != binaries.size:
            raise ValueError("branch_priority must align with binary_vars")
    solver = _make_solver(lp)
    root_lo = solver.lo.copy()
    root_hi = solver.hi.copy()

    total_iters = 0
    node_count = 0

    def solve_node(diffs, basis_pair):
        nonlocal total_iters, node_count
        solver.lo[:] = root_lo
        solver.hi[:] = root_hi
        for j, lo_j, hi_j in diffs:
            solver.lo[j] = lo_j
            solver.hi[j] = hi_j
        basis = vstatus = None
        if basis_pair is not None:
            basis, vstatus = basis_pair
        res = solver.solve(basis, vstatus)
        total_iters += res["iters"]
        node_count += 1
        return res

    warm = warm_start
    root = solve_node((), warm)
    if root["status"] == "unbounded":
        return MilpSolution("unbounded", None, None, node_count, total_iters)
    if root["status"] == "infeasible":
        return MilpSolution("infeasible", None, None, node_count, total_iters)
    if binaries.size == 0:
        sol = _lp_solution(root, node_count)
        return sol

    incumbent = None
    incumbent_obj = np.inf
    A_csc = lp.A.tocsc()
    row_scale = np.abs(lp.A).max(axis=1).toarray().ravel() if lp.n_rows else np.zeros(0)
    row_scale[row_scale <= 0] = 1.0

    def complete_zero_cost(res):
        """Snap fractional zero-objective binaries to row-feasible integers.

        With every other variable held at its LP value each binary's rows
        imply an interval; choosing an integer inside it cannot change the
        objective, so a successful completion is an incumbent at the
        node's own bound.  Returns the completed x or None.
        """
        frac = binaries[_fractional(res["x"], binaries)]
        if frac.size == 0 or np.any(lp.c[frac] != 0.0):
            return None
        x = res["x"].copy()
        r = lp.A @ x
        for j in frac:
            lo_j, hi_j = 0.0, 1.0
            start, end = A_csc.indptr[j], A_csc.indptr[j + 1]
            for i, a in zip(A_csc.indices[start:end], A_csc.data[start:end]):
                slack_tol = 1e-7 * row_scale[i]
                other = r[i] - a * x[j]
                if lp.rel[i] == LE:
                    limit = lp.b[i] - other + slack_tol
                    if a > 0:
                        hi_j = min(hi_j, limit / a)
                    else:
                        lo_j = max(lo_j, limit / a)
                elif lp.rel[i] == GE:
                    limit = lp.b[i] - other - slack_tol
                    if a > 0:
                        lo_j = max(lo_j, limit / a)
                    else:
                        hi_j = min(hi_j, limit / a)
                else:
                    forced = (lp.b[i] - other) / a
                    lo_j = max(lo_j, forced - slack_tol / abs(a))
                    hi_j = min(hi_j, forced + slack_tol / abs(a))
            preferred = 1.0 if x[j] >= 0.5 else 0.0
            if lo_j - _INT_TOL <= preferred <= hi_j + _INT_TOL:
                target = preferred
            elif lo_j - _INT_TOL <= 1.0 - preferred <= hi_j + _INT_TOL:
                target = 1.0 - preferred
            else:
                return None
            if target != x[j]:
                rows = A_csc.indices[start:end]
                r[rows] += A_csc.data[start:end] * (target - x[j])
                x[j] = target
        resid = (r - lp.b) / row_scale
        if (np.any(resid[lp.rel == LE] > 1e-6) or np.any(resid[lp.rel == GE] < -1e-6)
                or np.any(np.abs(resid[lp.rel == EQ]) > 1e-6)):
            return None
        return x

    def gap_ok(bound):
        return bound >= incumbent_obj - gap_tol * max(1.0, abs(incumbent_obj))

    def try_incumbent(res):
        nonlocal incumbent, incumbent_obj
        if res["status"] != "optimal":
            return False
        if _fractional(res["x"], binaries).any():
            completed = complete_zero_cost(res)
            if completed is None:
                return False
            if res["objective"] < incumbent_obj:
                incumbent = dict(res, x=completed)
                incumbent_obj = res["objective"]
            return True
        if res["objective"] < incumbent_obj:
            incumbent = res
            incumbent_obj = res["objective"]
        return True

    def pick_branch(bin_vals):
        """Fractional binary of best priority rank, then closest to 0.5."""
        frac_mask = np.minimum(np.abs(bin_vals), np.abs(bin_vals - 1.0)) > _INT_TOL
        cand = np.flatnonzero(frac_mask)
        best_rank = priority[cand].min()
        cand = cand[priority[cand] == best_rank]
        pick = cand[int(np.argmin(np.abs(bin_vals[cand] - 0.5)))]
        return int(binaries[pick]), float(bin_vals[pick])

    def pick_dive(bin_vals):
        """Fractional binary of best priority rank, most decided first."""
        frac_mask = np.minimum(np.abs(bin_vals), np.abs(bin_vals - 1.0)) > _INT_TOL
        cand = np.flatnonzero(frac_mask)
        best_rank = priority[cand].min()
        cand = cand[priority[cand] == best_rank]
        pick = cand[int(np.argmax(np.abs(bin_vals[cand] - 0.5)))]
        return int(binaries[pick]), float(bin_vals[pick])

    def dive(diffs, res):
        """Round-and-fix descent used to find incumbents early.

        Fixes the most decided fractional binary first and retries the
        opposite value once when a fix turns out infeasible.
        """
        diffs = list(diffs)
        for _ in range(binaries.size):
            if res["status"] != "optimal" or gap_ok(res["objective"]):
                return
            if try_incumbent(res):
                return
            j, val = pick_dive(res["x"][binaries])
            target = 1.0 if val >= 0.5 else 0.0
            basis_pair = (res["basis"], res["vstatus"])
            step = solve_node(tuple(diffs) + ((j, target, target),), basis_pair)
            if step["status"] != "optimal":
                target = 1.0 - target
                step = solve_node(tuple(diffs) + ((j, target, target),), basis_pair)
            diffs.append((j, target, target))
            res = step

    counter = 0
    heap = []

    def push(diffs, res):
        nonlocal counter
        if res["status"] != "optimal":
            return  # infeasible subtree
        if try_incumbent(res):
            return
        if gap_ok(res["objective"]):
            return
        counter += 1
        heapq.heappush(heap, (res["objective"], counter, tuple(diffs),
                              (res["basis"], res["vstatus"]), res["x"][binaries]))

    dive((), root)
    push((), root)

    processed = 0
    status = "optimal"
    while heap:
        bound, _, diffs, basis_pair, bin_vals = heapq.heappop(heap)
        if gap_ok(bound):
            break
        if node_limit is not None and node_count >= node_limit:
            status = "node_limit"
            break
        processed += 1
        j, _val = pick_branch(bin_vals)

        for lo_j, hi_j in ((0.0, 0.0), (1.0, 1.0)):
            child_diffs = diffs + ((j, lo_j, hi_j),)
            res = solve_node(child_diffs, basis_pair)
            if res["status"] == "optimal" and incumbent is None and processed % 16 == 0:
                dive(child_diffs, res)
            push(child_diffs, res)

    if incumbent is None:
        if status == "node_limit":
            return MilpSolution("node_limit", None, None, node_count, total_iters)
        return MilpSolution("infeasible", None, None, node_count, total_iters)
    sol = _lp_solution(incumbent, node_count)
    sol.lp_iterations = total_iters
    sol.status = status
    return sol


def check_solution(lp: LinearProgram, x, tol=1e-6) -> bool:
    """Row and bound feasibility at ``tol`` (absolute, on unit-scaled rows)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < lp.lo - tol) or np.any(x > lp.hi + tol):
        return False
    if lp.n_rows == 0:
        return True
    scale = np.abs(lp.A).max(axis=1).toarray().ravel()
    scale[scale <= 0] = 1.0
    resid = (lp.A @ x - lp.b) / scale
    if np.any(resid[lp.rel == LE] > tol):
        return False
    if np.any(resid[lp.rel == GE] < -tol):
        return False
    return not np.any(np.abs(resid[lp.rel == EQ]) > tol)


# ---------------------------------------------------------------------------
# algebraic text format
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_lp_text(problem) -> str:
    """Serialize a LinearProgram or MilpProblem to LP-style text."""
    if isinstance(problem, MilpProblem):
        lp, binaries = problem.base, problem.binary_vars
    else:
        lp, binaries = problem, ()
    names = [lp.var_name(j) for j in range(lp.n_vars)]

    def terms(idx, vals):
        if len(idx) == 0:
            return "0 " + (names[0] if names else "x0")
        parts = []
        for j, v in zip(idx, vals):
            sign = "-" if v < 0 else ("+" if parts else "")
            parts.append(f"{sign} {_fmt(abs(v))} {names[j]}".strip())
        return " ".join(parts)

    lines = ["Minimize"]
    nz = np.flatnonzero(lp.c)
    lines.append(" obj: " + terms(nz, lp.c[nz]))
    lines.append("Subject To")
    csr = lp.A.tocsr()
    for i in range(lp.n_rows):
        lo_p, hi_p = csr.indptr[i], csr.indptr[i + 1]
        lines.append(
            f" r{i}: " + terms(csr.indices[lo_p:hi_p], csr.data[lo_p:hi_p])
            + f" {_REL_TEXT[int(lp.rel[i])]} {_fmt(lp.b[i])}")
    lines.append("Bounds")
    for j in range(lp.n_vars):
        lo_j, hi_j = lp.lo[j], lp.hi[j]
        if lo_j == hi_j:
            lines.append(f" {names[j]} = {_fmt(lo_j)}")
        elif np.isinf(lo_j) and np.isinf(hi_j):
            lines.append(f" {names[j]} free")
        else:
            lo_t = "-inf" if np.isinf(lo_j) else _fmt(lo_j)
            hi_t = "+inf" if np.isinf(hi_j) else _fmt(hi_j)
            lines.append(f" {lo_t} <= {names[j]} <= {hi_t}")
    if binaries:
        lines.append("Binary")
        lines.append(" " + " ".join(names[j] for j in binaries))
    lines.append("End")
    return "\n".join(lines) + "\n"


_TERM_RE = re.compile(r"([+-]?)\s*(\d+\.?\d*(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][A-Za-z0-9_]*)")
_NUM_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+|inf)(?:[eE][+-]?\d+)?", re.IGNORECASE)


def _parse_terms(text, var_index, builder):
    coeffs = {}
    pos = 0
    text = text.strip()
    while pos < len(text):
        mobj = _TERM_RE.match(text, pos)
        if not mobj:
            raise ValueError(f"cannot parse term at: {text[pos:]!r}")
        sign, num, name = mobj.groups()
        coef = float(num) if num else 1.0
        if sign == "-":
            coef = -coef
        if name not in var_index:
            var_index[name] = builder.add_var(lo=0.0, hi=np.inf, name=name)
        j = var_index[name]
        coeffs[j] = coeffs.get(j, 0.0) + coef
        pos = mobj.end()
        while pos < len(text) and text[pos] in " \t":
            pos += 1
    return list(coeffs.items())


def parse_lp_text(text: str) -> MilpProblem:
    """Parse the subset of LP-format text produced by :func:`write_lp_text`."""
    lines = []
    for raw in text.splitlines():
        line = raw.split("\\")[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise ValueError("empty problem text")

    builder = ProblemBuilder()
    var_index: dict = {}
    objective: list = []
    rows = []
    bounds = []
    binaries = []
    section = None
    for line in lines:
        low = line.lower()
        if low in ("minimize", "min"):
            section = "obj"
            continue
        if low in ("subject to", "st", "s.t."):
            section = "rows"
            continue
        if low == "bounds":
            section = "bounds"
            continue
        if low in ("binary", "binaries", "bin"):
            section = "bin"
            continue
        if low == "end":
            break
        if section == "obj":
            body = line.split(":", 1)[-1]
            objective.extend(_parse_terms(body, var_index, builder))
        elif section == "rows":
            body = line.split(":", 1)[-1]
            mrel = re.search(r"(<=|>=|=)", body)
            if not mrel:
                raise ValueError(f"row without relation: {line!r}")
            lhs, rhs = body[:mrel.start()], body[mrel.end():]
            rel = {"<=": LE, ">=": GE, "=": EQ}[mrel.group(1)]
            rows.append((_parse_terms(lhs, var_index, builder), rel, float(rhs)))
        elif section == "bounds":
            bounds.append(line)
        elif section == "bin":
            binaries.extend(line.split())
        else:
            raise ValueError(f"unexpected line outside any section: {line!r}")

    if not var_index:
        raise ValueError("problem declares no variables")

    lo = np.zeros(builder.n_vars)
    hi = np.full(builder.n_vars, np.inf)

    def vid(name):
        if name not in var_index:
            var_index[name] = builder.add_var(lo=0.0, hi=np.inf, name=name)
            return var_index[name]
        return var_index[name]

    extra_lo, extra_hi = {}, {}
    for line in bounds:
        if line.lower().endswith(" free"):
            j = vid(line[:-5].strip())
            extra_lo[j], extra_hi[j] = -np.inf, np.inf
            continue
        parts = re.split(r"(<=|>=|=)", line)
        parts = [p.strip() for p in parts if p.strip()]
        if len(parts) == 5 and parts[1] == "<=" and parts[3] == "<=":
            j = vid(parts[2])
            extra_lo[j] = float(parts[0].replace("-inf", "-inf"))
            extra_hi[j] = float(parts[4].replace("+", ""))
        elif len(parts) == 3 and _NUM_RE.fullmatch(parts[2]):
            j = vid(parts[0])
            val = float(parts[2])
            if parts[1] == "<=":
                extra_hi[j] = val
            elif parts[1] == ">=":
                extra_lo[j] = val
            else:
                extra_lo[j] = extra_hi[j] = val
        else:
            raise ValueError(f"cannot parse bound line: {line!r}")

    n = builder.n_vars
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    for j, v in extra_lo.items():
        lo[j] = v
    for j, v in extra_hi.items():
        hi[j] = v

    c = np.zeros(n)
    for j, v in objective:
        c[j] += v
    bin_idx = []
    for name in binaries:
        j = vid(name)
        lo[j], hi[j] = 0.0, 1.0
        bin_idx.append(j)

    rows_i, rows_j, rows_v, rels, rhs = [], [], [], [], []
    for i, (coeffs, rel, b_i) in enumerate(rows):
        for j, v in coeffs:
            rows_i.append(i)
            rows_j.append(j)
            rows_v.append(v)
        rels.append(rel)
        rhs.append(b_i)
    A = sp.csr_matrix((rows_v, (rows_i, rows_j)), shape=(len(rows), n))
    names = [None] * n
    for name, j in var_index.items():
        names[j] = name
    lp = LinearProgram(c, A, rels, rhs, lo, hi, tuple(names))
    return MilpProblem(lp, tuple(bin_idx))


__all__ = [
    "LE", "EQ", "GE", "LinearProgram", "MilpProblem", "MilpSolution",
    "ProblemBuilder", "solve_lp", "solve_milp", "check_solution",
    "write_lp_text", "parse_lp_text", "SimplexError",
    "BASIC", "AT_LO", "AT_UP",
]
