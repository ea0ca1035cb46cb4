"""First-order operator-splitting solver for box/cone constrained programs.

The continuous solve works on a canonical form

    minimize    c @ v
    subject to  A v = b,   v in C

where C is a product of per-variable intervals, second-order cones and
rotated second-order cones.  Inequality rows get nonnegative slacks, and a
diagonal quadratic objective is lowered to its epigraph cone, so every
problem lands in this shape.

The iteration alternates an equality-constrained step (one cached sparse LU
solve of a KKT system) with a Euclidean projection onto C: ADMM with
over-relaxation, Ruiz equilibration and a doubling penalty-adaptation
schedule.  A short Newton polish on the detected active set finishes the
solve far below the requested tolerance whenever its verification passes;
otherwise the plain iterate is returned with honest residuals.  Divergence
certificates classify infeasible and unbounded problems after a warm-up.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import ConicProblem, Solution

INF = float("inf")

_CHECK_EVERY = 25
_WARMUP = 500
_RUIZ_ITERS = 10
_ALPHA = 1.6            # over-relaxation
_KKT_REG = 1e-10
_POLISH_ROUNDS = 5


# ---------------------------------------------------------------------------
# projections


def project_box(w, lb, ub):
    return np.minimum(np.maximum(w, lb), ub)


def _soc_batch_project(W):
    """Project rows of W (k x d) onto the second-order cone, in place."""
    t = W[:, 0]
    X = W[:, 1:]
    nx = np.linalg.norm(X, axis=1)
    inside = nx <= t
    zero = nx <= -t
    boundary = ~(inside | zero)
    if np.any(zero):
        W[zero] = 0.0
    if np.any(boundary):
        a = 0.5 * (t[boundary] + nx[boundary])
        X[boundary] *= (a / nx[boundary])[:, None]
        t[boundary] = a
    return W


_SQ2 = np.sqrt(2.0)


def _rsoc_to_soc(W):
    """Orthogonal change of coordinates mapping the rotated cone to the SOC."""
    out = W.copy()
    out[:, 0] = (W[:, 0] + W[:, 1]) / _SQ2
    out[:, 1] = (W[:, 0] - W[:, 1]) / _SQ2
    return out


_soc_to_rsoc = _rsoc_to_soc  # the map is an involution


def project_soc(block):
    """Project one vector (t, x) onto t >= ||x||."""
    W = np.asarray(block, dtype=float).reshape(1, -1).copy()
    return _soc_batch_project(W)[0]


def project_rsoc(block):
    """Project one vector (u, v, x) onto 2uv >= ||x||^2, u, v >= 0."""
    W = np.asarray(block, dtype=float).reshape(1, -1)
    return _soc_to_rsoc(_soc_batch_project(_rsoc_to_soc(W)))[0]


def soc_violation(block):
    t = block[0]
    return max(0.0, float(np.linalg.norm(block[1:])) - t)


def rsoc_violation(block):
    u, v = float(block[0]), float(block[1])
    viol = max(0.0, -u) + max(0.0, -v)
    s = float(block[2:] @ block[2:]) - 2.0 * u * v
    if s > 0.0:
        viol += np.sqrt(s) - np.sqrt(max(2.0 * u * v, 0.0))
    return viol


def _batch(cones):
    by_dim = {}
    for s in cones:
        by_dim.setdefault(len(s), []).append(np.asarray(s, dtype=int))
    return {d: np.asarray(lst, dtype=int) for d, lst in by_dim.items()}


def _soc_batch_violation(V, idx):
    W = V[idx]
    nx = np.linalg.norm(W[:, 1:], axis=1)
    return float(np.max(np.maximum(nx - W[:, 0], 0.0), initial=0.0))


def _rsoc_batch_violation(V, idx):
    W = V[idx]
    u, v = W[:, 0], W[:, 1]
    viol = np.maximum(-u, 0.0) + np.maximum(-v, 0.0)
    s = np.einsum("ij,ij->i", W[:, 2:], W[:, 2:]) - 2.0 * u * v
    pos = s > 0.0
    if np.any(pos):
        viol[pos] += np.sqrt(s[pos]) - np.sqrt(np.maximum(2 * u[pos] * v[pos], 0.0))
    return float(np.max(viol, initial=0.0))


# ---------------------------------------------------------------------------
# canonical form


class _Canon:
    """Canonical equality/cone form plus the mapping back to the user problem."""

    def __init__(self, problem: ConicProblem):
        n0 = problem.n
        self.n_user = n0
        names = list(problem.names)
        lb = problem.lb.copy().tolist()
        ub = problem.ub.copy().tolist()
        c = problem.c.copy().tolist()
        socs = [np.asarray(s, dtype=int) for s in problem.socs]
        rsocs = [np.asarray(s, dtype=int) for s in problem.rsocs]

        self.m_eq_user = problem.A_eq.shape[0]
        self.m_ub = problem.A_ub.shape[0]

        ncols = n0

        def new_var(name, lo=-INF, hi=INF, cost=0.0):
            nonlocal ncols
            names.append(name)
            lb.append(lo)
            ub.append(hi)
            c.append(cost)
            ncols += 1
            return ncols - 1

        rows = [problem.A_eq]
        rhs = [problem.b_eq]

        self.slack_start = ncols
        if self.m_ub:
            for j in range(self.m_ub):
                new_var(f"_s{j}", 0.0, INF)
            rows.append(sp.hstack([problem.A_ub, sp.eye(self.m_ub, format="csr")],
                                  format="csr"))
            rhs.append(problem.b_ub)

        # diagonal quadratic objective -> epigraph of one rotated cone
        qidx = np.flatnonzero(problem.q > 0.0)
        self.quad_idx = qidx
        extra = []
        if qidx.size:
            t = new_var("_qt", cost=1.0)
            h = new_var("_qh")
            ys = [new_var(f"_qy{j}") for j in range(qidx.size)]
            # h pinned to 1/2 so 2*t*h >= ||y||^2 reads t >= sum q x^2
            extra.append(({h: 1.0}, 0.5))
            for xi, yi in zip(qidx, ys):
                extra.append(({int(yi): 1.0,
                               int(xi): -float(np.sqrt(problem.q[xi]))}, 0.0))
            rsocs.append(np.asarray([t, h] + ys, dtype=int))

        if extra:
            ri, ci, vals, erhs = [], [], [], []
            for r, (coeffs, brhs) in enumerate(extra):
                erhs.append(brhs)
                for jj, vv in coeffs.items():
                    ri.append(r)
                    ci.append(jj)
                    vals.append(vv)
            rows.append(sp.csr_matrix((vals, (ri, ci)), shape=(len(extra), ncols)))
            rhs.append(np.asarray(erhs, dtype=float))

        stacked = []
        for blk in rows:
            if blk.shape[1] < ncols:
                blk = sp.hstack(
                    [blk, sp.csr_matrix((blk.shape[0], ncols - blk.shape[1]))],
                    format="csr")
            stacked.append(blk)
        self.A = sp.vstack(stacked, format="csr") if stacked else sp.csr_matrix((0, ncols))
        self.b = np.concatenate([np.asarray(r, dtype=float) for r in rhs]) \
            if rhs else np.zeros(0)
        self.c = np.asarray(c, dtype=float)
        self.lb = np.asarray(lb, dtype=float)
        self.ub = np.asarray(ub, dtype=float)
        self.names = names
        self.n = ncols
        self.m = self.A.shape[0]
        self.socs = socs
        self.rsocs = rsocs

        cone_vars = []
        for s in socs:
            cone_vars.extend(s.tolist())
        for s in rsocs:
            cone_vars.extend(s.tolist())
        self.cone_vars = np.asarray(sorted(cone_vars), dtype=int)
        self.box_mask = np.ones(self.n, dtype=bool)
        self.box_mask[self.cone_vars] = False
        self.soc_batches = _batch(socs)
        self.rsoc_batches = _batch(rsocs)

    def project(self, w, lb, ub):
        z = project_box(w, lb, ub)
        for idx in self.soc_batches.values():
            z[idx] = _soc_batch_project(w[idx].copy())
        for idx in self.rsoc_batches.values():
            z[idx] = _soc_to_rsoc(_soc_batch_project(_rsoc_to_soc(w[idx])))
        return z

    def cone_violation(self, v):
        worst = 0.0
        for idx in self.soc_batches.values():
            worst = max(worst, _soc_batch_violation(v, idx))
        for idx in self.rsoc_batches.values():
            worst = max(worst, _rsoc_batch_violation(v, idx))
        return worst

    def box_violation(self, v, lb, ub):
        bm = self.box_mask
        if not np.any(bm):
            return 0.0
        lo = np.max(np.maximum(lb[bm] - v[bm], 0.0), initial=0.0)
        hi = np.max(np.maximum(v[bm] - ub[bm], 0.0), initial=0.0)
        return float(max(lo, hi))

    def recession_ok(self, d, tol):
        """Is d approximately in the recession cone of C?"""
        bm = self.box_mask
        finite_lb = np.isfinite(self.lb) & bm
        finite_ub = np.isfinite(self.ub) & bm
        if np.any(d[finite_lb] < -tol) or np.any(d[finite_ub] > tol):
            return False
        return self.cone_violation(d) <= tol

    def support(self, v, lb, ub, tol):
        """Support function of C at v; +inf when that direction is unbounded.

        The tolerance only decides which directions count as unbounded;
        contributions of finite bounds are summed exactly, since dropping
        them scales with the bound magnitudes and can flip the sign of the
        infeasibility certificate built on top of this value.
        """
        bm = self.box_mask
        vb = v[bm]
        lob, upb = lb[bm], ub[bm]
        if np.any((vb > tol) & ~np.isfinite(upb)) \
                or np.any((vb < -tol) & ~np.isfinite(lob)):
            return INF
        pos = (vb > 0.0) & np.isfinite(upb)
        neg = (vb < 0.0) & np.isfinite(lob)
        s = float(np.sum(upb[pos] * vb[pos]) + np.sum(lob[neg] * vb[neg]))
        for idx in self.soc_batches.values():
            W = -v[idx]
            nx = np.linalg.norm(W[:, 1:], axis=1)
            scale = 1.0 + np.abs(W[:, 0]) + nx
            if np.any(nx - W[:, 0] > tol * scale):
                return INF
        for idx in self.rsoc_batches.values():
            W = v[idx]
            for row in W:
                if rsoc_violation(-row) > tol * (1.0 + float(np.linalg.norm(row))):
                    return INF
        return s


# ---------------------------------------------------------------------------
# scaling


class _Scaling:
    def __init__(self, canon: _Canon):
        m, n = canon.m, canon.n
        dr = np.ones(m)
        dc = np.ones(n)
        A = canon.A
        blocks = canon.socs + canon.rsocs
        for _ in range(_RUIZ_ITERS):
            if m:
                As = sp.diags(dr) @ A @ sp.diags(dc)
                Aabs = abs(As)
                rmax = np.asarray(Aabs.max(axis=1).todense()).ravel()
                rmax[rmax <= 0] = 1.0
                dr /= np.sqrt(rmax)
                cmax = np.asarray(Aabs.max(axis=0).todense()).ravel()
            else:
                cmax = np.ones(n)
            cmax[cmax <= 0] = 1.0
            fac = 1.0 / np.sqrt(cmax)
            for blk in blocks:
                fac[blk] = np.exp(np.mean(np.log(fac[blk])))
            dc *= fac
        self.dr = dr
        self.dc = dc
        cs = dc * canon.c
        self.sigma = 1.0 / max(1.0, float(np.max(np.abs(cs), initial=0.0)))

    def apply(self, canon: _Canon):
        A = (sp.diags(self.dr) @ canon.A @ sp.diags(self.dc)).tocsr() \
            if canon.m else canon.A
        b = self.dr * canon.b
        c = self.sigma * (self.dc * canon.c)
        lb = canon.lb / self.dc
        ub = canon.ub / self.dc
        return A, b, c, lb, ub


# ---------------------------------------------------------------------------
# cone calculus used by the polish step


def _cone_val(kind, blk, v):
    if kind == "soc":
        return float(v[blk[0]] - np.linalg.norm(v[blk[1:]]))
    u0, v0 = v[blk[0]], v[blk[1]]
    x = v[blk[2:]]
    return float(2.0 * u0 * v0 - x @ x)


def _cone_grad_block(kind, blk, v):
    if kind == "soc":
        x = v[blk[1:]]
        nx = float(np.linalg.norm(x))
        g = np.empty(len(blk))
        g[0] = 1.0
        g[1:] = -x / nx if nx > 0 else 0.0
        return g
    g = np.empty(len(blk))
    g[0] = 2.0 * v[blk[1]]
    g[1] = 2.0 * v[blk[0]]
    g[2:] = -2.0 * v[blk[2:]]
    return g


def _cone_hess(cone_active, th, v, n):
    rows, cols, vals = [], [], []
    for k, (kind, blk) in enumerate(cone_active):
        w = th[k]
        if w == 0.0:
            continue
        if kind == "soc":
            x = v[blk[1:]]
            nx = float(np.linalg.norm(x))
            if nx <= 0:
                continue
            xhat = x / nx
            d = len(blk) - 1
            for a in range(d):
                for bidx in range(d):
                    hv = -((1.0 if a == bidx else 0.0) - xhat[a] * xhat[bidx]) / nx
                    if hv != 0.0:
                        rows.append(int(blk[1 + a]))
                        cols.append(int(blk[1 + bidx]))
                        vals.append(w * hv)
        else:
            rows += [int(blk[0]), int(blk[1])]
            cols += [int(blk[1]), int(blk[0])]
            vals += [2.0 * w, 2.0 * w]
            for i in blk[2:]:
                rows.append(int(i))
                cols.append(int(i))
                vals.append(-2.0 * w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# ---------------------------------------------------------------------------
# main solver


def _residual_ratio(sol):
    return max(sol.residuals["primal"], sol.residuals["dual"])


class SplitSolver:
    """Reusable splitting solver.

    The KKT factorization only depends on the constraint matrix and the
    penalty parameter, not on variable bounds, so a single instance can
    resolve many bound variations cheaply; the branch-and-bound layer
    leans on that.
    """

    def __init__(self, problem: ConicProblem, tol=1e-6, max_iters=100000,
                 polish=True):
        problem.validate()
        self.problem = problem
        self.tol = float(tol)
        self.max_iters = int(max_iters)
        self.polish = bool(polish)
        self.canon = _Canon(problem)
        self.scaling = _Scaling(self.canon)
        self.As, self.bs, self.cs, self.lbs, self.ubs = self.scaling.apply(self.canon)
        # binaries enter the continuous relaxation as [0, 1] intervals
        for i in problem.binary_indices():
            self.lbs[i] = max(self.lbs[i], 0.0)
            self.ubs[i] = min(self.ubs[i], 1.0 / self.scaling.dc[i])
            self.canon.lb[i] = max(self.canon.lb[i], 0.0)
            self.canon.ub[i] = min(self.canon.ub[i], 1.0)
        self.rho = 1.0
        self._factor = None
        self._factor_rho = None

    # -- linear algebra -----------------------------------------------------

    def _ensure_factor(self):
        if self._factor is not None and self._factor_rho == self.rho:
            return
        n, m = self.canon.n, self.canon.m
        if m == 0:
            self._factor = None
        else:
            K = sp.bmat([[self.rho * sp.eye(n), self.As.T],
                         [self.As, -_KKT_REG * sp.eye(m)]], format="csc")
            self._factor = spla.splu(K)
        self._factor_rho = self.rho

    def _xstep(self, z, u):
        n, m = self.canon.n, self.canon.m
        rhs_top = self.rho * (z - u) - self.cs
        if m == 0:
            return rhs_top / self.rho, np.zeros(0)
        sol = self._factor.solve(np.concatenate([rhs_top, self.bs]))
        return sol[:n], sol[n:]

    # -- residual bookkeeping -------------------------------------------------

    def _unscaled(self, x, z, u, nu):
        dc, dr, sig = self.scaling.dc, self.scaling.dr, self.scaling.sigma
        zu = dc * z
        xu = dc * x
        nuu = (dr * nu) / sig if nu.size else nu
        lamu = (self.rho * u / dc) / sig
        return xu, zu, nuu, lamu

    def _residuals(self, zu, nuu, lamu, lb_u, ub_u):
        canon = self.canon
        Az = canon.A @ zu if canon.m else np.zeros(0)
        rp = float(np.max(np.abs(Az - canon.b))) if canon.m else 0.0
        rp = max(rp, canon.box_violation(zu, lb_u, ub_u), canon.cone_violation(zu))
        rp_scale = 1.0 + max(
            float(np.max(np.abs(Az), initial=0.0)),
            float(np.max(np.abs(canon.b), initial=0.0)))
        Atn = canon.A.T @ nuu if canon.m else np.zeros(canon.n)
        stat = canon.c + Atn + lamu
        rd = float(np.max(np.abs(stat), initial=0.0))
        rd_scale = 1.0 + max(float(np.max(np.abs(canon.c), initial=0.0)),
                             float(np.max(np.abs(Atn), initial=0.0)),
                             float(np.max(np.abs(lamu), initial=0.0)))
        pobj = float(canon.c @ zu)
        sup = canon.support(lamu, lb_u, ub_u, self.tol * rd_scale)
        if np.isfinite(sup):
            dobj = -(float(canon.b @ nuu) if canon.m else 0.0) - sup
            gap = abs(pobj - dobj)
        else:
            gap = INF
        gap_scale = 1.0 + abs(pobj)
        return rp, rp_scale, rd, rd_scale, gap, gap_scale

    # -- divergence certificates ----------------------------------------------

    def _certify(self, d_nu_u, d_x_u, lb_u, ub_u, tol):
        """Farkas-style checks on the iterate drift directions.

        Membership tests run at a much stricter tolerance than the firing
        margin: a genuine divergence ray settles onto its cone facets
        geometrically, while a transient direction that merely brushes them
        would otherwise produce a finite support value and a false verdict.
        """
        canon = self.canon
        strict = tol * tol
        if canon.m and d_nu_u.size:
            nrm = float(np.linalg.norm(d_nu_u))
            if nrm > 1e-12:
                y = d_nu_u / nrm
                v = -(canon.A.T @ y)
                sup = canon.support(v, lb_u, ub_u, strict)
                if np.isfinite(sup) and sup + float(canon.b @ y) < -tol:
                    return "infeasible"
        nrm = float(np.linalg.norm(d_x_u))
        if nrm > 1e-12:
            d = d_x_u / nrm
            ad = float(np.max(np.abs(canon.A @ d), initial=0.0)) if canon.m else 0.0
            bm = canon.box_mask
            lb_block = np.isfinite(lb_u) & bm
            ub_block = np.isfinite(ub_u) & bm
            ok = not (np.any(d[lb_block] < -strict)
                      or np.any(d[ub_block] > strict))
            if ad <= strict and ok and canon.cone_violation(d) <= strict \
                    and float(canon.c @ d) < -tol:
                return "unbounded"
        return None

    # -- polish -----------------------------------------------------------------

    def _polish(self, zu, nuu, lamu, lb_u, ub_u):
        """Newton refinement onto the guessed active set.

        The guess is retried with progressively looser activity thresholds:
        far from convergence a vanishing cone block (say Q -> 0) can still sit
        well above sqrt(tol), and only the looser pass pins it.  The first
        classification whose Newton point stays feasible wins.
        """
        seen = None
        for scale in (1.0, 30.0, 1000.0):
            act_tol = min(np.sqrt(self.tol) * scale, 0.5)
            fixed, cone_active = self._classify(zu, lamu, lb_u, ub_u, act_tol)
            sig = (tuple(sorted(fixed.items())),
                   tuple((kind, id(blk)) for kind, blk in cone_active))
            if sig == seen:
                continue
            seen = sig
            res = self._newton_polish(zu, nuu, lamu, lb_u, ub_u, fixed,
                                      cone_active)
            if res is not None:
                return res
        return None

    def _classify(self, zu, lamu, lb_u, ub_u, act_tol):
        canon = self.canon
        bm = canon.box_mask
        # a bound counts as active when the iterate sits near it or when its
        # multiplier estimate is decisively nonzero; the latter catches rows
        # whose slack is still large at modest accuracy
        mthr = act_tol * (1.0 + (float(np.max(np.abs(lamu))) if lamu.size else 0.0))
        lo_act = bm & np.isfinite(lb_u) \
            & ((zu - lb_u <= act_tol * (1 + np.abs(lb_u))) | (lamu < -mthr))
        hi_act = bm & np.isfinite(ub_u) \
            & ((ub_u - zu <= act_tol * (1 + np.abs(ub_u))) | (lamu > mthr)) \
            & ~lo_act
        fixed = {int(i): float(lb_u[i]) for i in np.flatnonzero(lo_act)}
        fixed.update({int(i): float(ub_u[i]) for i in np.flatnonzero(hi_act)})

        cone_active = []
        for blk in canon.socs:
            t = zu[blk[0]]
            nx = float(np.linalg.norm(zu[blk[1:]]))
            if t - nx <= act_tol * (1 + nx):
                if nx <= act_tol * (1 + abs(t)):
                    for i in blk:
                        fixed[int(i)] = 0.0
                else:
                    cone_active.append(("soc", blk))
        for blk in canon.rsocs:
            u0, v0 = zu[blk[0]], zu[blk[1]]
            x = zu[blk[2:]]
            margin = 2 * u0 * v0 - float(x @ x)
            scale = 1 + abs(u0) + abs(v0) + float(x @ x)
            if margin <= act_tol * scale:
                blk_scale = 1 + max(abs(u0), abs(v0))
                if u0 <= act_tol * (1 + abs(v0)) and v0 <= act_tol * (1 + abs(u0)):
                    for i in blk:
                        fixed[int(i)] = 0.0
                elif u0 <= act_tol * blk_scale:
                    fixed[int(blk[0])] = 0.0
                    for i in blk[2:]:
                        fixed[int(i)] = 0.0
                elif v0 <= act_tol * blk_scale:
                    fixed[int(blk[1])] = 0.0
                    for i in blk[2:]:
                        fixed[int(i)] = 0.0
                else:
                    cone_active.append(("rsoc", blk))
        return fixed, cone_active

    def _newton_polish(self, zu, nuu, lamu, lb_u, ub_u, fixed, cone_active):
        canon = self.canon
        tol = self.tol
        fixed = dict(fixed)
        cone_active = list(cone_active)

        # active-set refinement in both directions.  The Newton point is only
        # feasible for the constraints in the working set, so bounds and cones
        # it steps across must be added; conversely a fix whose converged
        # multiplier carries the wrong sign provably does not bind at the
        # optimum, and keeping it both biases the point and corrupts the dual
        # certificate through the support function.  Additions run before
        # drops so a sloppy starting guess grows to feasibility first.
        for _ in range(_POLISH_ROUNDS):
            res = self._newton_system(zu, nuu, lamu, lb_u, ub_u, fixed,
                                      cone_active)
            if res is None:
                return None
            v, nu, mu_map, th = res

            bm = canon.box_mask
            free = bm.copy()
            if fixed:
                free[np.asarray(sorted(fixed), dtype=int)] = False
            lo_bad = free & np.isfinite(lb_u) \
                & (v < lb_u - tol * (1.0 + np.abs(lb_u)))
            hi_bad = free & np.isfinite(ub_u) \
                & (v > ub_u + tol * (1.0 + np.abs(ub_u)))
            adds = {int(i): float(lb_u[i]) for i in np.flatnonzero(lo_bad)}
            adds.update({int(i): float(ub_u[i])
                         for i in np.flatnonzero(hi_bad)})
            active_keys = {(kind, int(blk[0])) for kind, blk in cone_active}
            cone_adds = []
            for kind, blks in (("soc", canon.socs), ("rsoc", canon.rsocs)):
                for blk in blks:
                    if (kind, int(blk[0])) in active_keys:
                        continue
                    val = _cone_val(kind, blk, v)
                    scale = 1.0 + float(np.max(np.abs(v[blk])))
                    if val < -tol * scale:
                        cone_adds.append((kind, blk))
            if adds or cone_adds:
                fixed.update(adds)
                cone_active.extend(cone_adds)
                continue

            # wrong-sign multipliers: box fixes follow the normal-cone
            # convention (nonpositive at a lower bound, nonnegative at an
            # upper bound) while the inward cone gradients make a correctly
            # active cone multiplier nonpositive
            eps = tol * (1.0 + max(
                (abs(m) for m in mu_map.values()), default=0.0))
            drops = []
            for i, mu in mu_map.items():
                at_lb = np.isfinite(lb_u[i]) and fixed[i] == lb_u[i]
                at_ub = np.isfinite(ub_u[i]) and fixed[i] == ub_u[i]
                if at_lb and at_ub:
                    continue
                if not at_lb and not at_ub:
                    continue
                if (at_lb and mu > eps) or (at_ub and mu < -eps):
                    drops.append(i)
            ceps = tol * (1.0 + (float(np.max(np.abs(th)))
                                 if th.size else 0.0))
            cone_drops = [k for k in range(len(cone_active)) if th[k] > ceps]
            if not drops and not cone_drops:
                break
            for i in drops:
                del fixed[i]
            for k in reversed(cone_drops):
                del cone_active[k]
        else:
            return None

        lam = np.zeros(canon.n)
        for i, mu in mu_map.items():
            lam[i] = mu
        for k, (kind, blk) in enumerate(cone_active):
            lam[blk] += th[k] * _cone_grad_block(kind, blk, v)
        # feasibility gates scaled consistently with the add thresholds
        for kind, blks in (("soc", canon.socs), ("rsoc", canon.rsocs)):
            for blk in blks:
                scale = 1.0 + float(np.max(np.abs(v[blk])))
                if _cone_val(kind, blk, v) < -tol * scale:
                    return None
        bm = canon.box_mask
        if np.any(bm & np.isfinite(lb_u)
                  & (v < lb_u - tol * (1.0 + np.abs(lb_u)))) \
                or np.any(bm & np.isfinite(ub_u)
                          & (v > ub_u + tol * (1.0 + np.abs(ub_u)))):
            return None
        return v, nu, lam

    def _newton_system(self, zu, nuu, lamu, lb_u, ub_u, fixed, cone_active):
        canon = self.canon
        n, m = canon.n, canon.m

        fix_idx = np.asarray(sorted(fixed), dtype=int)
        fix_val = np.asarray([fixed[i] for i in fix_idx.tolist()])
        na = fix_idx.size
        nc = len(cone_active)

        v = zu.copy()
        nu = nuu.copy()
        mu = lamu[fix_idx].copy()
        th = np.zeros(nc)
        for k, (kind, blk) in enumerate(cone_active):
            g = _cone_grad_block(kind, blk, v)
            denom = float(g @ g)
            th[k] = float(lamu[blk] @ g) / denom if denom > 0 else 0.0

        E = sp.csr_matrix((np.ones(na), (np.arange(na), fix_idx)), shape=(na, n))

        def cone_jac():
            rows, cols, vals = [], [], []
            for k, (kind, blk) in enumerate(cone_active):
                g = _cone_grad_block(kind, blk, v)
                rows.extend([k] * len(blk))
                cols.extend(int(i) for i in blk)
                vals.extend(g.tolist())
            return sp.csr_matrix((vals, (rows, cols)), shape=(nc, n))

        for _ in range(3):
            G = cone_jac()
            F1 = canon.c.copy()
            if m:
                F1 += canon.A.T @ nu
            if na:
                F1 += E.T @ mu
            if nc:
                F1 += G.T @ th
            F2 = (canon.A @ v - canon.b) if m else np.zeros(0)
            F3 = v[fix_idx] - fix_val if na else np.zeros(0)
            F4 = np.asarray([_cone_val(kind, blk, v) for kind, blk in cone_active])
            Fmax = max(float(np.max(np.abs(f))) if f.size else 0.0
                       for f in (F1, F2, F3, F4))
            if Fmax < 1e-13:
                break
            H = _cone_hess(cone_active, th, v, n)
            reg = 1e-12
            Zmn = sp.csr_matrix
            K = sp.vstack([
                sp.hstack([H + reg * sp.eye(n), canon.A.T, E.T, G.T]),
                sp.hstack([canon.A, -reg * sp.eye(m), Zmn((m, na)), Zmn((m, nc))]),
                sp.hstack([E, Zmn((na, m)), -reg * sp.eye(na), Zmn((na, nc))]),
                sp.hstack([G, Zmn((nc, m)), Zmn((nc, na)), -reg * sp.eye(nc)]),
            ], format="csc")
            rhs = -np.concatenate([F1, F2, F3, F4])
            try:
                delta = spla.splu(K).solve(rhs)
            except (RuntimeError, ValueError):
                return None
            v = v + delta[:n]
            nu = nu + delta[n:n + m]
            mu = mu + delta[n + m:n + m + na]
            th = th + delta[n + m + na:]

        if not np.all(np.isfinite(v)):
            return None
        mu_map = {int(i): float(mu[j]) for j, i in enumerate(fix_idx.tolist())}
        return v, nu, mu_map, th

    # -- drive --------------------------------------------------------------

    def solve(self, bounds_override=None) -> Solution:
        canon = self.canon
        n, m = canon.n, canon.m
        lbs, ubs = self.lbs, self.ubs
        lb_u, ub_u = canon.lb, canon.ub
        if bounds_override:
            lbs, ubs = lbs.copy(), ubs.copy()
            lb_u, ub_u = lb_u.copy(), ub_u.copy()
            for i, (lo, hi) in bounds_override.items():
                lb_u[i], ub_u[i] = lo, hi
                lbs[i] = lo / self.scaling.dc[i]
                ubs[i] = hi / self.scaling.dc[i]

        self.rho = 1.0
        self._ensure_factor()
        z = canon.project(np.zeros(n), lbs, ubs)
        u = np.zeros(n)
        nu = np.zeros(m)
        x = z.copy()

        tol = self.tol
        # entry band for the Newton polish: a failed attempt costs a KKT
        # factorization, so large systems wait for a closer iterate while
        # small ones try almost as soon as the residuals start to settle
        band = tol ** (0.5 if n + m <= 400 else 0.75)
        status = "iteration-limit"
        iters = 0
        next_polish = 0
        polish_backoff = 100
        nu_snap = nu.copy()
        x_snap = x.copy()
        rho_schedule = 100

        while iters < self.max_iters:
            x, nu = self._xstep(z, u)
            xh = _ALPHA * x + (1.0 - _ALPHA) * z
            w = xh + u
            z = canon.project(w, lbs, ubs)
            u = w - z
            iters += 1

            if iters % _CHECK_EVERY:
                continue

            xu, zu, nuu, lamu = self._unscaled(x, z, u, nu)
            rp, rps, rd, rds, gap, gaps = self._residuals(zu, nuu, lamu, lb_u, ub_u)
            if rp <= tol * rps and rd <= tol * rds and gap <= tol * gaps:
                status = "candidate"
                break

            # once inside the sqrt(tol) band, one Newton polish usually lands
            # on the exact active set; exit early when it certifies optimal.
            # the gap is deliberately not part of this gate: the splitting
            # dual can lag the primal by orders of magnitude on strongly
            # curved problems, while the polished KKT point carries its own
            # exact multipliers and is re-tested in full before returning
            if self.polish and iters >= next_polish and rp <= band * rps \
                    and rd <= band * rds:
                res = self._polish(zu, nuu, lamu, lb_u, ub_u)
                if res is not None:
                    sol = self._finish(res[0], res[1], res[2], lb_u, ub_u,
                                       iters, True)
                    if sol.status == "optimal":
                        return sol
                next_polish = iters + polish_backoff
                polish_backoff = min(polish_backoff * 2, 5000)

            if iters >= _WARMUP and iters % 100 == 0:
                dnu_u = (self.scaling.dr * (nu - nu_snap)) if m else np.zeros(0)
                dx_u = self.scaling.dc * (x - x_snap)
                cert = self._certify(dnu_u, dx_u, lb_u, ub_u, np.sqrt(tol))
                if cert:
                    return Solution(
                        x=np.full(self.problem.n, np.nan),
                        objective=INF if cert == "infeasible" else -INF,
                        status=cert,
                        residuals={"primal": rp, "dual": rd, "gap": gap},
                        info={"iterations": iters})
                nu_snap = nu.copy()
                x_snap = x.copy()

            if iters >= rho_schedule:
                # exponential early, then a capped interval: the balance of
                # the residuals keeps drifting long after warmup, and parking
                # rho between widely spaced updates stalls convergence
                rho_schedule = iters + min(rho_schedule, 100)
                num = rp / max(rps, 1.0)
                den = max(rd / max(rds, 1.0), 1e-14)
                fac = float(np.clip(np.sqrt(num / den), 0.2, 5.0))
                if abs(np.log(fac)) > 0.1:
                    self.rho = float(np.clip(self.rho * fac, 1e-6, 1e6))
                    self._ensure_factor()
                    u = u / fac

        xu, zu, nuu, lamu = self._unscaled(x, z, u, nu)
        raw = self._finish(zu, nuu, lamu, lb_u, ub_u, iters, False)
        if self.polish:
            res = self._polish(zu, nuu, lamu, lb_u, ub_u)
            if res is not None:
                pol = self._finish(res[0], res[1], res[2], lb_u, ub_u, iters,
                                   True)
                # prefer whichever point certifies; on a tie keep the one
                # with the smaller worst residual ratio
                if pol.status == "optimal" or raw.status != "optimal" \
                        and _residual_ratio(pol) <= _residual_ratio(raw):
                    return pol
        return raw

    def _finish(self, zu, nuu, lamu, lb_u, ub_u, iters, polished) -> Solution:
        tol = self.tol
        canon = self.canon
        rp, rps, rd, rds, gap, gaps = self._residuals(zu, nuu, lamu, lb_u, ub_u)
        ok = rp <= tol * rps and rd <= tol * rds and gap <= tol * gaps
        status = "optimal" if ok else "iteration-limit"

        x_user = zu[:canon.n_user]
        return Solution(
            x=x_user,
            objective=self.problem.objective_value(x_user),
            status=status,
            residuals={"primal": rp, "dual": rd, "gap": gap},
            duals=self._map_duals(nuu, lamu),
            info={"iterations": iters, "rho": self.rho, "polished": polished,
                  "canon_objective": float(canon.c @ zu)},
        )

    def _map_duals(self, nuu, lamu):
        canon = self.canon
        m_eq = canon.m_eq_user
        m_ub = canon.m_ub
        return {
            "eq": nuu[:m_eq].copy(),
            "ub": nuu[m_eq:m_eq + m_ub].copy(),
            "lam": lamu[:canon.n_user].copy(),
        }


# ---------------------------------------------------------------------------
# public entry points


def solve_continuous(problem: ConicProblem, tol=1e-6, max_iters=100000,
                     polish=True) -> Solution:
    """Solve the continuous relaxation (binaries relaxed into [0, 1])."""
    solver = SplitSolver(problem, tol=tol, max_iters=max_iters, polish=polish)
    return solver.solve()


def kkt_residuals(problem: ConicProblem, x, duals=None):
    """Stationarity/feasibility/complementarity residuals at a given point.

    Operates on the problem exactly as given (no canonicalization), so the
    reported numbers are directly interpretable: ``primal`` is the worst
    constraint violation; with ``duals`` (the Solution.duals dict) it also
    reports ``stationarity``, multiplier admissibility (``dual_sign``,
    ``cone_dual``), complementarity ``comp`` and their ``max``.
    """
    x = np.asarray(x, dtype=float)
    out = {}
    eq_res = problem.A_eq @ x - problem.b_eq if problem.A_eq.shape[0] else np.zeros(0)
    ub_res = problem.A_ub @ x - problem.b_ub if problem.A_ub.shape[0] else np.zeros(0)
    prim = 0.0
    if eq_res.size:
        prim = max(prim, float(np.max(np.abs(eq_res))))
    if ub_res.size:
        prim = max(prim, float(np.max(ub_res)))
    prim = max(prim, float(np.max(np.maximum(problem.lb - x, 0.0), initial=0.0)))
    prim = max(prim, float(np.max(np.maximum(x - problem.ub, 0.0), initial=0.0)))
    for s in problem.socs:
        prim = max(prim, soc_violation(x[s]))
    for s in problem.rsocs:
        prim = max(prim, rsoc_violation(x[s]))
    out["primal"] = prim

    if duals is None:
        return out
    y_eq = np.asarray(duals.get("eq", np.zeros(problem.A_eq.shape[0])), dtype=float)
    y_ub = np.asarray(duals.get("ub", np.zeros(problem.A_ub.shape[0])), dtype=float)
    lam = np.asarray(duals.get("lam", np.zeros(problem.n)), dtype=float)
    grad = problem.c + 2.0 * problem.q * x
    if y_eq.size:
        grad = grad + problem.A_eq.T @ y_eq
    if y_ub.size:
        grad = grad + problem.A_ub.T @ y_ub
    grad = grad + lam
    out["stationarity"] = float(np.max(np.abs(grad), initial=0.0))

    sign = float(np.max(-y_ub, initial=0.0)) if y_ub.size else 0.0
    comp = float(np.max(np.abs(y_ub * ub_res), initial=0.0)) if y_ub.size else 0.0
    cone_members = set(problem.cone_members())
    for i in range(problem.n):
        if i in cone_members or abs(lam[i]) <= 1e-14:
            continue
        # a bound multiplier must point at an active bound: negative at the
        # lower bound, positive at the upper bound
        if lam[i] < 0:
            if np.isfinite(problem.lb[i]):
                comp = max(comp, abs(lam[i]) * abs(x[i] - problem.lb[i]))
            else:
                sign = max(sign, abs(lam[i]))
        else:
            if np.isfinite(problem.ub[i]):
                comp = max(comp, abs(lam[i]) * abs(problem.ub[i] - x[i]))
            else:
                sign = max(sign, abs(lam[i]))
    out["dual_sign"] = sign
    out["comp"] = comp

    cone_dual = 0.0
    for s in problem.socs:
        cone_dual = max(cone_dual, soc_violation(-lam[s]))
        cone_dual = max(cone_dual, abs(float(lam[s] @ x[s])))
    for s in problem.rsocs:
        cone_dual = max(cone_dual, rsoc_violation(-lam[s]))
        cone_dual = max(cone_dual, abs(float(lam[s] @ x[s])))
    out["cone_dual"] = cone_dual
    out["max"] = max(out["primal"], out["stationarity"], out["dual_sign"],
                     out["comp"], out["cone_dual"])
    return out
