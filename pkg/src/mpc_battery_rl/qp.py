"""Convex QP solver with full primal-dual output.

Solves::

    minimize    1/2 x'Hx + g'x
    subject to  Ax = b
                Cx <= d

with a Mehrotra predictor-corrector interior-point method. A small Tikhonov
term ``eps_reg * I`` is added to ``H`` so that problems with linear cost
directions still have a unique optimum. After the interior-point phase the
solution is polished on the identified active set, which brings the KKT
residual down to round-off and makes finite-difference checks of the
solution map meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

EPS_REG = 1e-9
ACT_TOL = 1e-7


class QpError(RuntimeError):
    pass


class NonConvexError(QpError):
    """Raised when H is not positive semidefinite."""


def _as_csc(M, shape):
    if M is None:
        return sp.csc_matrix(shape)
    if sp.issparse(M):
        return sp.csc_matrix(M, dtype=float)
    return sp.csc_matrix(np.atleast_2d(np.asarray(M, dtype=float)).reshape(shape))


@dataclass
class QpProblem:
    """Data of a convex QP. Matrices are stored as scipy CSC matrices."""

    H: sp.csc_matrix
    g: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    C: sp.csc_matrix
    d: np.ndarray
    var_names: list[str] | None = None
    eq_names: list[str] | None = None
    ineq_names: list[str] | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        self.b = np.asarray(self.b if self.b is not None else [], dtype=float).ravel()
        self.d = np.asarray(self.d if self.d is not None else [], dtype=float).ravel()
        self.H = _as_csc(self.H, (n, n))
        self.A = _as_csc(self.A, (self.b.size, n))
        self.C = _as_csc(self.C, (self.d.size, n))
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if self.A.shape != (self.b.size, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(self.b.size, n)}")
        if self.C.shape != (self.d.size, n):
            raise ValueError(f"C has shape {self.C.shape}, expected {(self.d.size, n)}")

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def m_eq(self) -> int:
        return self.b.size

    @property
    def m_ineq(self) -> int:
        return self.d.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.g @ x)

    def check_convex(self, tol: float = 1e-10) -> None:
        """Raise NonConvexError unless H is symmetric PSD within ``tol``."""
        asym = abs(self.H - self.H.T)
        if asym.nnz and asym.max() > tol * max(1.0, abs(self.H).max()):
            raise NonConvexError("H is not symmetric")
        off = self.H - sp.diags(self.H.diagonal())
        if off.nnz == 0 or abs(off).max() == 0.0:
            lo = self.H.diagonal().min(initial=0.0)
        else:
            lo = np.linalg.eigvalsh(self.H.toarray()).min()
        if lo < -tol * max(1.0, abs(self.H).max()):
            raise NonConvexError(f"H has negative eigenvalue {lo:.3e}")

    def dump(self, path) -> None:
        """Write the problem in sparse triplet text format.

        Layout: a header line ``n m_eq m_ineq``, then one section per block
        introduced by ``# H``, ``# g``, ``# A``, ``# b``, ``# C``, ``# d``.
        Matrix sections hold ``row col value`` lines, vector sections
        ``index value`` lines; zero entries are omitted.
        """
        lines = [f"{self.n} {self.m_eq} {self.m_ineq}"]
        for name in ("H", "g", "A", "b", "C", "d"):
            lines.append(f"# {name}")
            val = getattr(self, name)
            if sp.issparse(val):
                coo = val.tocoo()
                order = np.lexsort((coo.col, coo.row))
                for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                    if v != 0.0:
                        lines.append(f"{r} {c} {float(v)!r}")
            else:
                for i in np.flatnonzero(val):
                    lines.append(f"{i} {float(val[i])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "QpProblem":
        text = Path(path).read_text().splitlines()
        n, m_eq, m_ineq = (int(t) for t in text[0].split())
        shapes = {"H": (n, n), "A": (m_eq, n), "C": (m_ineq, n)}
        sizes = {"g": n, "b": m_eq, "d": m_ineq}
        blocks: dict[str, list[list[str]]] = {}
        current = None
        for line in text[1:]:
            if line.startswith("#"):
                current = line[1:].strip()
                blocks[current] = []
            elif line.strip():
                blocks[current].append(line.split())
        data = {}
        for name, shape in shapes.items():
            rows = blocks.get(name, [])
            r = [int(t[0]) for t in rows]
            c = [int(t[1]) for t in rows]
            v = [float(t[2]) for t in rows]
            data[name] = sp.csc_matrix((v, (r, c)), shape=shape)
        for name, size in sizes.items():
            vec = np.zeros(size)
            for t in blocks.get(name, []):
                vec[int(t[0])] = float(t[1])
            data[name] = vec
        return cls(**data)


@dataclass
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    status: str
    iterations: int
    kkt_residual_norm: float
    active_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    polished: bool = False
    # LU of the final polishing KKT matrix, the active mask it used and the
    # active rows left out because they were implied by the others
    kkt_lu: object = field(default=None, repr=False)
    kkt_active: np.ndarray | None = field(default=None, repr=False)
    kkt_implied: np.ndarray | None = field(default=None, repr=False)
    kkt_assembler: object = field(default=None, repr=False)

    def active_set_lu(self, active):
        """LU of the active-set KKT matrix for another mask (None if singular)."""
        if self.kkt_assembler is None:
            return None
        try:
            with np.errstate(all="raise"):
                return spla.splu(self.kkt_assembler.polish_matrix(active))
        except (RuntimeError, FloatingPointError):
            return None

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def kkt_residual(problem: QpProblem, x, lam, mu, H=None) -> np.ndarray:
    """Stacked KKT residual [grad_x L; Ax - b; diag(mu)(Cx - d)].

    ``L = 1/2 x'Hx + g'x + lam'(Ax - b) + mu'(Cx - d)``.
    """
    H = problem.H if H is None else H
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    stat = H @ x + problem.g + problem.A.T @ lam + problem.C.T @ mu
    prim = problem.A @ x - problem.b
    comp = mu * (problem.C @ x - problem.d)
    return np.concatenate([stat, prim, comp])


def kkt_jacobian(problem: QpProblem, x, lam, mu, H=None) -> sp.csc_matrix:
    """Jacobian of :func:`kkt_residual` with respect to y = (x, lam, mu)."""
    H = problem.H if H is None else H
    slack = problem.C @ x - problem.d
    m = problem.m_ineq
    return sp.bmat(
        [
            [H, problem.A.T, problem.C.T],
            [problem.A, None, None],
            [sp.diags(mu) @ problem.C, None, sp.diags(slack, shape=(m, m))],
        ],
        format="csc",
    )


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _residual_norms(problem, H, x, lam, mu):
    stat = H @ x + problem.g + problem.A.T @ lam + problem.C.T @ mu
    prim = problem.A @ x - problem.b
    viol = problem.C @ x - problem.d
    comp = mu * viol
    return (
        np.abs(stat).max(initial=0.0),
        np.abs(prim).max(initial=0.0),
        max(viol.max(initial=0.0), 0.0),
        np.abs(comp).max(initial=0.0),
        max(-mu.min(initial=0.0), 0.0),
    )


def _within(norms, tol, scale) -> bool:
    """Stationarity, complementarity and dual sign are judged relative to the
    cost scale; primal residuals absolutely."""
    stat, prim, viol, comp, dual = norms
    return (stat <= tol * scale and prim <= tol and viol <= tol
            and comp <= tol * scale and dual <= tol * scale)


def _slots(pattern: sp.csc_matrix, rows, cols):
    """Positions of (row, col) entries inside ``pattern.data``."""
    counts = np.diff(pattern.indptr)
    keys = np.repeat(np.arange(pattern.shape[1]), counts) * pattern.shape[0] + pattern.indices
    return np.searchsorted(keys, np.asarray(cols) * pattern.shape[0] + np.asarray(rows))


def _pattern(shape, rows, cols):
    P = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)
    P.sum_duplicates()
    P.sort_indices()
    return P


class _KktAssembler:
    """Fixed-pattern assembly of the two KKT matrices used by the solver.

    Interior-point step matrix ``[[H + C'WC, A'], [A, -delta I]]`` and the
    polishing matrix ``[[H, A', C_a'], [A, 0, 0], [C_a, 0, -I_i]]`` in which
    inactive constraints keep their rows but only carry ``-mu_i = 0``.
    Only the data arrays change between factorizations.
    """

    def __init__(self, problem: QpProblem, H: sp.csc_matrix, delta: float):
        n, me, mi = problem.n, problem.m_eq, problem.m_ineq
        self.n, self.me, self.mi = n, me, mi
        Hc = H.tocoo()
        Ac = problem.A.tocoo()
        Cc = problem.C.tocoo()

        # pairs (j, k, c_rj * c_rk, r) of C'WC
        Cr = problem.C.tocsr()
        Cr.sort_indices()
        counts = np.diff(Cr.indptr)
        pj, pk, pv, pr = [], [], [], []
        for c in np.unique(counts[counts > 0]):
            rs = np.flatnonzero(counts == c)
            idx = Cr.indptr[rs][:, None] + np.arange(c)
            cl, vl = Cr.indices[idx], Cr.data[idx]
            pj.append(np.repeat(cl[:, :, None], c, axis=2).ravel())
            pk.append(np.repeat(cl[:, None, :], c, axis=1).ravel())
            pv.append((vl[:, :, None] * vl[:, None, :]).ravel())
            pr.append(np.repeat(rs, c * c))
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=int))
        pj, pk, pr = cat(pj).astype(int), cat(pk).astype(int), cat(pr).astype(int)
        pv = np.concatenate(pv) if len(pv) else np.zeros(0)

        eye_me = np.arange(me)
        rows = np.concatenate([Hc.row, pj, n + Ac.row, Ac.col, n + eye_me])
        cols = np.concatenate([Hc.col, pk, Ac.col, n + Ac.row, n + eye_me])
        N1 = n + me
        self.ip = _pattern((N1, N1), rows, cols)
        base = np.zeros(self.ip.nnz)
        np.add.at(base, _slots(self.ip, Hc.row, Hc.col), Hc.data)
        np.add.at(base, _slots(self.ip, n + Ac.row, Ac.col), Ac.data)
        np.add.at(base, _slots(self.ip, Ac.col, n + Ac.row), Ac.data)
        np.add.at(base, _slots(self.ip, n + eye_me, n + eye_me), -delta)
        self.ip_base = base
        self.ip_map = sp.csr_matrix((pv, (_slots(self.ip, pj, pk), pr)),
                                    shape=(self.ip.nnz, mi))

        N2 = n + me + mi
        eye_mi = np.arange(mi)
        rows = np.concatenate([Hc.row, n + Ac.row, Ac.col, n + me + Cc.row, Cc.col,
                               n + me + eye_mi])
        cols = np.concatenate([Hc.col, Ac.col, n + Ac.row, Cc.col, n + me + Cc.row,
                               n + me + eye_mi])
        self.pol = _pattern((N2, N2), rows, cols)
        base = np.zeros(self.pol.nnz)
        np.add.at(base, _slots(self.pol, Hc.row, Hc.col), Hc.data)
        np.add.at(base, _slots(self.pol, n + Ac.row, Ac.col), Ac.data)
        np.add.at(base, _slots(self.pol, Ac.col, n + Ac.row), Ac.data)
        self.pol_base = base
        self.pol_c_slots = np.concatenate([_slots(self.pol, n + me + Cc.row, Cc.col),
                                           _slots(self.pol, Cc.col, n + me + Cc.row)])
        self.pol_c_rows = np.concatenate([Cc.row, Cc.row])
        self.pol_c_vals = np.concatenate([Cc.data, Cc.data])
        self.pol_d_slots = _slots(self.pol, n + me + eye_mi, n + me + eye_mi)

    def ip_matrix(self, w) -> sp.csc_matrix:
        data = self.ip_base + self.ip_map @ w
        return sp.csc_matrix((data, self.ip.indices, self.ip.indptr), shape=self.ip.shape)

    def polish_matrix(self, active, reg: float = 0.0) -> sp.csc_matrix:
        """Active-set KKT matrix; ``reg > 0`` puts ``-reg`` on the dual diagonal."""
        act = active.astype(float)
        data = self.pol_base.copy()
        data[self.pol_c_slots] = self.pol_c_vals * act[self.pol_c_rows]
        data[self.pol_d_slots] = act - 1.0 - reg * act
        K = sp.csc_matrix((data, self.pol.indices, self.pol.indptr), shape=self.pol.shape)
        if reg:
            n, me = self.n, self.me
            K = K - reg * sp.diags(np.r_[np.zeros(n), np.ones(me), np.zeros(self.mi)], format="csc")
        return K


def _independent_rows(problem, active, mu, rtol=1e-9):
    """Remove linearly dependent rows from the active set.

    ``mu`` is a nonnegative multiplier estimate. Each dependency among the
    active rows gives a direction along which the multipliers can move
    without changing stationarity; moving until a multiplier hits zero and
    dropping that row keeps the remaining multipliers nonnegative (the
    usual purification step towards a basic solution).
    """
    active = active.copy()
    mu = np.where(active, np.maximum(mu, 0.0), 0.0)
    me = problem.m_eq
    rows = np.flatnonzero(active)
    if rows.size == 0:
        return active
    rows = rows[np.argsort(-mu[rows], kind="stable")]
    Gt = np.vstack([problem.A.toarray(), problem.C[rows].toarray()]).T
    r = np.abs(np.diag(sla.qr(Gt, mode="r", check_finite=False)[0]))
    r = np.concatenate([r, np.zeros(Gt.shape[1] - r.size)])
    indep = r > rtol * np.maximum(np.linalg.norm(Gt, axis=0), 1.0)
    keep = np.ones(Gt.shape[1], dtype=bool)
    m = mu[rows]
    # Dropping a row that a dependent column p can replace leaves the span of
    # every prefix through p unchanged, so one factorization classifies all.
    basis = np.flatnonzero(indep)
    Q, R = sla.qr(Gt[:, basis], check_finite=False)
    for p in np.flatnonzero(~indep[me:]) + me:
        j = int(np.searchsorted(basis, p))
        prev = basis[:j]
        c = sla.solve_triangular(R[:j, :j], Q[:, :j].T @ Gt[:, p], check_finite=False)
        # null direction: +1 on row p, -c on the earlier independent rows
        v = np.zeros(Gt.shape[1])
        v[p] = 1.0
        v[prev] = -c
        v = v[me:]
        pos = (v > 0) & keep[me:]
        ratio = np.where(pos, m / np.where(pos, v, 1.0), np.inf)
        k = int(np.argmin(ratio))
        m = np.where(keep[me:], m - ratio[k] * v, 0.0)
        m[k] = 0.0
        keep[me + k] = False
        active[rows[k]] = False
        if me + k != p:
            # p replaces k in the basis
            pos_k = int(np.searchsorted(basis, me + k))
            Q, R = sla.qr_delete(Q, R, pos_k, which="col", check_finite=False)
            basis = np.delete(basis, pos_k)
            j = int(np.searchsorted(basis, p))
            Q, R = sla.qr_insert(Q, R, Gt[:, p], j, which="col", check_finite=False)
            basis = np.insert(basis, j, p)
    return active


def _factor_solve(kkt, active, rhs):
    """Solve the active-set KKT system.

    Returns ``(solution, lu, exact)``. When the matrix is singular a
    quasi-definite regularized factor with iterative refinement is used
    instead and ``exact`` is False.
    """
    K = kkt.polish_matrix(active)
    try:
        with np.errstate(all="raise"):
            lu = spla.splu(K)
            sol = lu.solve(rhs)
        if np.all(np.isfinite(sol)):
            return sol, lu, True
    except (RuntimeError, FloatingPointError):
        pass
    lu = spla.splu(kkt.polish_matrix(active, reg=1e-10))
    sol = lu.solve(rhs)
    for _ in range(5):
        sol = sol + lu.solve(rhs - K @ sol)
    return sol, lu, False


def _polish(problem, H, kkt: _KktAssembler, active, tol, scale=1.0, priority=None,
            rounds=6):
    """Re-solve the equality-constrained KKT system on the active set.

    The active set is corrected for a few rounds: violated inactive
    constraints are added, negative multipliers dropped, and linearly
    dependent rows removed when the system turns out singular. Returns
    ``(x, lam, mu, lu, active, implied)`` or None, where ``implied`` marks
    rows that were removed as dependent.
    """
    n, me = problem.n, problem.m_eq
    active = active.copy()
    implied = np.zeros_like(active)
    priority = np.ones(problem.m_ineq) if priority is None else priority
    for _ in range(rounds):
        rhs = np.concatenate([-problem.g, problem.b, np.where(active, problem.d, 0.0)])
        sol, lu, exact = _factor_solve(kkt, active, rhs)
        if not exact:
            reduced = _independent_rows(problem, active, priority)
            implied |= active & ~reduced
            active = reduced
            rhs = np.concatenate([-problem.g, problem.b, np.where(active, problem.d, 0.0)])
            sol, lu, exact = _factor_solve(kkt, active, rhs)
            if not exact:
                return None
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        lp = sol[n:n + me]
        mp = np.where(active, sol[n + me:], 0.0)
        norms = _residual_norms(problem, H, xp, lp, mp)
        if _within(norms, tol, scale):
            viol = problem.C @ xp - problem.d
            return xp, lp, mp, lu, active, implied & (viol > -tol)
        viol = problem.C @ xp - problem.d
        add = ~active & (viol > tol)
        drop = active & (mp < -tol * scale)
        if not add.any() and not drop.any():
            return None
        active = (active | add) & ~drop
        implied &= ~add
        priority = np.where(active, np.maximum(mp, 0.0), priority)
    return None


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100,
          eps_reg: float = EPS_REG, act_tol: float = ACT_TOL,
          check_convex: bool = True, verbose: bool = False) -> QpSolution:
    """Solve a convex QP with a primal-dual interior-point method.

    Returns a :class:`QpSolution` whose ``status`` is ``"solved"``,
    ``"max_iter"`` or ``"infeasible"``. Raises :class:`NonConvexError` if
    H is not PSD. Residuals are measured against the regularized problem
    ``H + eps_reg * I``.
    """
    if check_convex:
        problem.check_convex()
    n, me, mi = problem.n, problem.m_eq, problem.m_ineq
    H = (problem.H + eps_reg * sp.identity(n, format="csc")).tocsc()
    A, C = problem.A, problem.C
    AT, CT = A.T.tocsc(), C.T.tocsc()
    delta = 1e-12
    kkt = _KktAssembler(problem, H, delta)

    x = np.zeros(n)
    lam = np.zeros(me)
    s = np.maximum(problem.d - C @ x, 1.0)
    # starting duals scaled to the cost magnitude
    gscale = max(1.0, np.abs(problem.g).max(initial=0.0))
    z = np.full(mi, gscale)

    status = "max_iter"
    polished = None
    # best iterate by scaled residual; used if later iterations stall or blow up
    best, best_merit = None, np.inf
    last_polish_gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ x + problem.g + AT @ lam + CT @ z
        rp = A @ x - problem.b
        ri = C @ x + s - problem.d
        gap = float(s @ z) / mi if mi else 0.0
        if verbose:
            print(f"{it:3d} rd={np.abs(rd).max():.2e} rp={np.abs(rp).max(initial=0):.2e} "
                  f"ri={np.abs(ri).max(initial=0):.2e} gap={gap:.2e}")
        if mi and np.abs(z).max() > 1e12 * gscale:
            status = "infeasible"
            break
        if mi and gap < 1e-6 * gscale and gap < 0.1 * last_polish_gap and max(
                np.abs(rp).max(initial=0.0), np.abs(ri).max(initial=0.0)) < 1e-6:
            last_polish_gap = gap
            polished = _polish(problem, H, kkt, s < z, tol, gscale, z)
            if polished is not None:
                break
        merit = max(np.abs(rd).max(initial=0.0) / gscale, np.abs(rp).max(initial=0.0),
                    np.abs(ri).max(initial=0.0), np.max(s * z, initial=0.0) / gscale)
        if merit <= tol:
            status = "solved"
            break
        if merit < best_merit:
            best, best_merit = (x, lam, s, z), merit
        elif merit > 1e3 * best_merit and best_merit < 1e-3:
            break

        K = kkt.ip_matrix(np.minimum(z / s, 1e20))
        try:
            lu = spla.splu(K)
        except RuntimeError:
            # near-converged weights can swamp the regularization in floating
            # point; retry with a diagonal shift scaled to the matrix
            r = 1e-14 * np.abs(K.data).max()
            shift = sp.diags(np.r_[np.full(n, r), np.full(me, -r)], format="csc")
            try:
                lu = spla.splu((K + shift).tocsc())
            except RuntimeError as exc:
                raise QpError(f"KKT factorization failed at iteration {it}: {exc}") from exc

        def newton(rc):
            rhs = np.concatenate([-rd + CT @ ((rc - z * ri) / s), -rp])
            sol = lu.solve(rhs)
            dx = sol[:n]
            ds = -ri - C @ dx
            dz = (-rc - z * ds) / s
            return dx, sol[n:], ds, dz

        dx, dl, ds, dz = newton(s * z)
        if mi:
            a_aff = min(_max_step(s, ds), _max_step(z, dz))
            gap_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / mi
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
            dx, dl, ds, dz = newton(s * z + ds * dz - sigma * gap)
            tau = max(0.99, 1.0 - gap)
            alpha = min(1.0, tau * _max_step(s, ds), tau * _max_step(z, dz))
        else:
            alpha = 1.0
        x = x + alpha * dx
        lam = lam + alpha * dl
        s = np.maximum(s + alpha * ds, 1e-30)
        z = np.maximum(z + alpha * dz, 1e-30)

    if status != "solved" and best is not None and status != "infeasible":
        x, lam, s, z = best
        status = "solved"
    mu = z.copy()
    if polished is None and status != "infeasible" and mi:
        polished = _polish(problem, H, kkt, s < z, tol, gscale, z)
    sol_lu, sol_active, implied = None, None, None
    if polished is not None:
        x, lam, mu, sol_lu, sol_active, implied = polished
        status = "solved"

    norms = _residual_norms(problem, H, x, lam, mu)
    if status == "solved" and not _within(norms, tol, gscale):
        status = "max_iter"
    res = kkt_residual(problem, x, lam, mu, H=H)
    slack = problem.d - C @ x
    out = QpSolution(
        x=x,
        lam=lam,
        mu=mu,
        status=status,
        iterations=it,
        kkt_residual_norm=float(np.abs(res).max(initial=0.0)),
        active_set=np.flatnonzero(slack <= act_tol),
        polished=polished is not None,
    )
    out.kkt_lu = sol_lu
    out.kkt_active = sol_active
    out.kkt_implied = implied
    out.kkt_assembler = kkt
    return out
