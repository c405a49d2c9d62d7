"""Bounded-variable revised simplex with product-form basis updates.

The solver works on rows scaled to unit max coefficient and appends one
slack per row (``a.x + s = b``); feasibility is restored by a composite
phase 1 that minimises the total bound violation of the basic variables,
so any basis (e.g. one carried over from a related problem) can be used
as a warm start.  Pricing is Dantzig with a Bland fallback engaged after
a run of degenerate steps.  All tie-breaks are by lowest index, so runs
are bit-reproducible.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

BASIC, AT_LO, AT_UP, FREE, FIXED = 0, 1, 2, 3, 4

_PIVOT_TOL = 1e-9
_RATIO_TIE = 1e-9
_STALL_LIMIT = 120


class SimplexError(RuntimeError):
    """Numerical breakdown or iteration cap hit."""


class BoundedSimplex:
    """min c.x  s.t.  A x (<=,=,>=) b,  lo <= x <= hi."""

    def __init__(self, A, rel, b, c, lo, hi, feas_tol=1e-8, opt_tol=None,
                 max_iter=2_000_000, refactor_every=64):
        A = sp.csr_matrix(A, dtype=float)
        m, n = A.shape
        self.m, self.n = m, n
        rel = np.asarray(rel, dtype=np.int8)
        b = np.asarray(b, dtype=float)
        c = np.asarray(c, dtype=float)

        if m:
            row_max = np.abs(A).max(axis=1).toarray().ravel()
        else:
            row_max = np.zeros(0)
        row_max[row_max <= 0] = 1.0
        self.row_scale = 1.0 / row_max
        A_s = sp.diags(self.row_scale) @ A if m else A
        self.b = b * self.row_scale

        eye = sp.eye(m, format="csr")
        full = sp.hstack([A_s, eye], format="csc") if n else eye.tocsc()
        full.sort_indices()
        self.Acsc = full
        self.AT = full.T.tocsr()
        self.N = n + m
        self._colbuf = np.zeros(m)

        self.c = np.concatenate([c, np.zeros(m)])
        slack_lo = np.where(rel == 1, -np.inf, 0.0)   # >= rows: s <= 0
        slack_hi = np.where(rel == -1, np.inf, 0.0)   # <= rows: s >= 0
        self.lo = np.concatenate([np.asarray(lo, dtype=float), slack_lo])
        self.hi = np.concatenate([np.asarray(hi, dtype=float), slack_hi])
        if np.any(self.lo > self.hi):
            raise ValueError("variable with lo > hi")

        self.feas_tol = feas_tol
        cmax = max(1.0, float(np.max(np.abs(c))) if n else 1.0)
        self.opt_tol = opt_tol if opt_tol is not None else 1e-9 * cmax
        self.max_iter = max_iter
        self.refactor_every = refactor_every

        self._lu = None
        self._etas = []
        self.basis = None
        self.vstatus = None
        self.xB = None

    # -- bound edits between solves (used by branch and bound) ------------

    def set_var_bounds(self, j, lo, hi):
        self.lo[j] = lo
        self.hi[j] = hi

    def get_var_bounds(self, j):
        return self.lo[j], self.hi[j]

    # -- basis linear algebra ---------------------------------------------

    def _factorize(self):
        self._etas = []
        if self.m == 0:
            self._lu = None
            return
        B = self.Acsc[:, self.basis]
        try:
            self._lu = splu(B.tocsc())
        except RuntimeError as exc:
            raise SimplexError(f"singular basis: {exc}") from exc

    def _ftran(self, v):
        if self.m == 0:
            return np.zeros(0)
        x = self._lu.solve(v)
        for r, w, wr in self._etas:
            xr = x[r] / wr
            x -= w * xr
            x[r] = xr
        return x

    def _btran(self, v):
        if self.m == 0:
            return np.zeros(0)
        y = v.copy()
        for r, w, wr in reversed(self._etas):
            yr = (y[r] - (w @ y - w[r] * y[r])) / wr
            y[r] = yr
        return self._lu.solve(y, trans="T")

    def _column(self, j):
        """Dense copy of one column; avoids scipy slicing overhead."""
        start, end = self.Acsc.indptr[j], self.Acsc.indptr[j + 1]
        col = self._colbuf
        col[:] = 0.0
        col[self.Acsc.indices[start:end]] = self.Acsc.data[start:end]
        return col

    def _nonbasic_values(self):
        x = np.zeros(self.N)
        st = self.vstatus
        lo_mask = (st == AT_LO) | (st == FIXED)
        x[lo_mask] = self.lo[lo_mask]
        up = st == AT_UP
        x[up] = self.hi[up]
        return x

    def _recompute_xB(self):
        x = self._nonbasic_values()
        x[self.basis] = 0.0
        resid = self.b - self.Acsc @ x
        self.xB = self._ftran(resid)

    # -- warm start sanitation ---------------------------------------------

    def _init_state(self, basis, vstatus):
        cold = basis is None or vstatus is None
        if not cold:
            basis = np.asarray(basis, dtype=np.int64).copy()
            vstatus = np.asarray(vstatus, dtype=np.int8).copy()
            if (basis.size != self.m or vstatus.size != self.N
                    or np.unique(basis).size != self.m
                    or (self.m and (basis.min() < 0 or basis.max() >= self.N))):
                cold = True
        if cold:
            basis = np.arange(self.n, self.n + self.m, dtype=np.int64)
            vstatus = np.full(self.N, AT_LO, dtype=np.int8)
            vstatus[np.isinf(self.lo)] = FREE
            up_only = np.isinf(self.lo) & np.isfinite(self.hi)
            vstatus[up_only] = AT_UP
            vstatus[basis] = BASIC

        # reconcile statuses with current bounds
        nb = vstatus != BASIC
        fixed = nb & (self.lo == self.hi)
        vstatus[fixed] = FIXED
        bad_lo = nb & ~fixed & (vstatus != AT_UP) & np.isinf(self.lo)
        vstatus[bad_lo] = np.where(np.isfinite(self.hi[bad_lo]), AT_UP, FREE)
        bad_up = nb & ~fixed & (vstatus == AT_UP) & np.isinf(self.hi)
        vstatus[bad_up] = np.where(np.isfinite(self.lo[bad_up]), AT_LO, FREE)
        unfixed = nb & ~fixed & (vstatus == FIXED)
        vstatus[unfixed] = np.where(np.isfinite(self.lo[unfixed]), AT_LO,
                                    np.where(np.isfinite(self.hi[unfixed]), AT_UP, FREE))
        vstatus[basis] = BASIC
        self.basis, self.vstatus = basis, vstatus

    # -- main loop -----------------------------------------------------------

    def solve(self, basis=None, vstatus=None):
        """Returns dict with status, x, objective, basis, vstatus, iters, y, dj."""
        self._init_state(basis, vstatus)
        try:
            self._factorize()
        except SimplexError:
            self._init_state(None, None)
            self._factorize()
        self._recompute_xB()

        iters = 0
        degenerate_run = 0
        bland = False
        status = None
        while True:
            if iters >= self.max_iter:
                raise SimplexError(f"iteration limit {self.max_iter} reached")
            if len(self._etas) >= self.refactor_every:
                self._factorize()
                self._recompute_xB()

            loB = self.lo[self.basis]
            hiB = self.hi[self.basis]
            below = self.xB < loB - self.feas_tol
            above = self.xB > hiB + self.feas_tol
            phase1 = bool(below.any() or above.any())

            if phase1:
                d = np.where(below, -1.0, 0.0) + np.where(above, 1.0, 0.0)
                y = self._btran(d)
                r = -(self.AT @ y)
                tol = 1e-9
            else:
                y = self._btran(self.c[self.basis])
                r = self.c - self.AT @ y
                tol = self.opt_tol

            st = self.vstatus
            viol = np.full(self.N, -np.inf)
            at_lo = st == AT_LO
            viol[at_lo] = -r[at_lo]
            at_up = st == AT_UP
            viol[at_up] = r[at_up]
            free = st == FREE
            viol[free] = np.abs(r[free])

            if bland:
                elig = viol > tol
                if not elig.any():
                    enter = -1
                else:
                    enter = int(np.argmax(elig))
            else:
                enter = int(np.argmax(viol))
                if viol[enter] <= tol:
                    enter = -1

            if enter < 0:
                if phase1:
                    status = "infeasible"
                else:
                    status = "optimal"
                break

            if st[enter] == AT_UP or (st[enter] == FREE and r[enter] > 0):
                direction = -1.0
            else:
                direction = 1.0

            a_col = self._column(enter)
            w = self._ftran(a_col)
            rate = -direction * w

            t, leave_pos, leave_to = self._ratio_test(rate, below, above,
                                                      loB, hiB, phase1)
            t_own = self.hi[enter] - self.lo[enter]
            flip = False
            if st[enter] != FREE and np.isfinite(t_own) and t_own <= t:
                t, flip = t_own, True

            if not flip and leave_pos < 0:
                if phase1:
                    # slope was negative so an event must exist; numerical guard
                    raise SimplexError("phase-1 ratio test found no blocking event")
                status = "unbounded"
                break

            if flip:
                self.xB = self.xB - direction * t * w
                self.vstatus[enter] = AT_UP if st[enter] == AT_LO else AT_LO
            else:
                wp = w[leave_pos]
                if abs(wp) < _PIVOT_TOL:
                    self._factorize()
                    self._recompute_xB()
                    wp_chk = self._ftran(a_col)[leave_pos]
                    if abs(wp_chk) < _PIVOT_TOL:
                        raise SimplexError(
                            f"numerical breakdown: pivot magnitude {wp_chk:.3e}")
                    iters += 1
                    continue
                if st[enter] == AT_LO:
                    enter_val = self.lo[enter]
                elif st[enter] == AT_UP:
                    enter_val = self.hi[enter]
                else:
                    enter_val = 0.0
                leave_var = self.basis[leave_pos]
                self.xB = self.xB - direction * t * w
                self.xB[leave_pos] = enter_val + direction * t
                self.vstatus[leave_var] = leave_to
                self.vstatus[enter] = BASIC
                self.basis[leave_pos] = enter
                self._etas.append((leave_pos, w, wp))

            iters += 1
            if t <= 1e-10:
                degenerate_run += 1
                if degenerate_run >= _STALL_LIMIT:
                    bland = True
            else:
                degenerate_run = 0
                bland = False

        x = self._nonbasic_values()
        x[self.basis] = self.xB
        xs = x[:self.n]
        if self.m:
            y_final = self._btran(self.c[self.basis])
            dj = self.c - self.AT @ y_final
        else:
            y_final = np.zeros(0)
            dj = self.c.copy()
        return {
            "status": status,
            "x": xs,
            "objective": float(self.c[:self.n] @ xs) if self.n else 0.0,
            "basis": self.basis.copy(),
            "vstatus": self.vstatus.copy(),
            "iters": iters,
            "y": y_final * self.row_scale,
            "dj": dj[:self.n],
        }

    def _ratio_test(self, rate, below, above, loB, hiB, phase1):
        """First blocking event; returns (t, basis position, leaving status)."""
        m = self.m
        if m == 0:
            return np.inf, -1, AT_LO
        cand = np.full(m, np.inf)
        to_up = np.zeros(m, dtype=bool)

        feas = ~(below | above)
        pos = feas & (rate > _PIVOT_TOL) & np.isfinite(hiB)
        cand[pos] = (hiB[pos] - self.xB[pos]) / rate[pos]
        to_up[pos] = True
        neg = feas & (rate < -_PIVOT_TOL) & np.isfinite(loB)
        cand[neg] = (loB[neg] - self.xB[neg]) / rate[neg]

        if phase1:
            bl = below & (rate > _PIVOT_TOL)
            cand[bl] = (loB[bl] - self.xB[bl]) / rate[bl]
            to_up[bl] = False
            ab = above & (rate < -_PIVOT_TOL)
            cand[ab] = (hiB[ab] - self.xB[ab]) / rate[ab]
            to_up[ab] = True

        np.maximum(cand, 0.0, out=cand)
        t = cand.min() if m else np.inf
        if not np.isfinite(t):
            return np.inf, -1, AT_LO
        near = cand <= t + _RATIO_TIE
        idx = np.flatnonzero(near)
        # stability: largest pivot among the tied blockers, then lowest var index
        best = idx[np.lexsort((self.basis[idx], -np.abs(rate[idx])))[0]]
        return float(t), int(best), (AT_UP if to_up[best] else AT_LO)
