"""Primal-dual interior-point solver for convex QPs.

Solves::

    minimize    0.5 z'Pz + c'z
    subject to  A_eq z = b_eq,   A_ineq z <= b_ineq

with Mehrotra's predictor-corrector method. Each iteration factors the
quasi-definite KKT matrix

    [ P + eps I    A_eq'     A_ineq'      ]
    [ A_eq        -eps I     0            ]
    [ A_ineq       0        -(S/L + eps I)]

with a sparse LDL^T whose symbolic analysis (ordering, elimination tree,
column counts) is cached per sparsity pattern. Iterative refinement against
the unregularized matrix removes the bias of the static regularization.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from ._kernels import (
    STATUS_INFEASIBLE,
    STATUS_MAX_ITERS,
    STATUS_OPTIMAL,
    ipm_solve,
    ldl_etree,
    ldl_factor,
    ldl_solve_refined,
)


class DimensionMismatch(ValueError):
    pass


class FactorizationFailure(RuntimeError):
    pass


class SolverStatus(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


def _as_csr(M, rows: int, cols: int) -> sp.csr_matrix:
    if M is None:
        return sp.csr_matrix((rows, cols))
    M = sp.csr_matrix(M, dtype=float)
    M.sum_duplicates()
    return M


@dataclass
class QpProblem:
    P: sp.spmatrix
    c: np.ndarray
    A_ineq: sp.spmatrix | None = None
    b_ineq: np.ndarray | None = None
    A_eq: sp.spmatrix | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.P = _as_csr(self.P, n, n)
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P is {self.P.shape}, expected {(n, n)}")
        self.b_ineq = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, float).ravel()
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        self.A_ineq = _as_csr(self.A_ineq, self.b_ineq.size, n)
        self.A_eq = _as_csr(self.A_eq, self.b_eq.size, n)
        if self.A_ineq.shape != (self.b_ineq.size, n):
            raise DimensionMismatch(f"A_ineq is {self.A_ineq.shape}, b_ineq has {self.b_ineq.size}")
        if self.A_eq.shape != (self.b_eq.size, n):
            raise DimensionMismatch(f"A_eq is {self.A_eq.shape}, b_eq has {self.b_eq.size}")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m_eq(self) -> int:
        return self.b_eq.size

    @property
    def m_ineq(self) -> int:
        return self.b_ineq.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.c @ z)


@dataclass
class SolverSettings:
    max_iters: int = 50
    abs_tol: float = 1e-7
    rel_gap: float = 1e-8
    eps: float = 1e-9
    step_fraction: float = 0.99
    refine_iters: int = 3
    pivot_floor: float = 1e-13

    def __post_init__(self):
        if min(self.abs_tol, self.rel_gap, self.eps) <= 0 or self.max_iters < 1:
            raise ValueError("tolerances must be positive and max_iters >= 1")


@dataclass
class Residuals:
    eq: float
    ineq: float
    dual: float
    gap: float


@dataclass
class SolverResult:
    z: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    status: SolverStatus
    iterations: int
    residuals: Residuals
    objective: float
    solve_time: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status is SolverStatus.OPTIMAL


# ---------------------------------------------------------------------------
# KKT assembly and factorization


@dataclass
class _Symbolic:
    key: str
    dim: int
    order: np.ndarray  # COO entry -> CSC slot
    perm: np.ndarray
    Ap: np.ndarray
    Ai: np.ndarray
    Lp: np.ndarray
    etree: np.ndarray
    signs: np.ndarray
    w_slots: np.ndarray  # CSC slots of the inequality diagonal
    nnz_L: int


def _csr_rows(M: sp.csr_matrix) -> np.ndarray:
    return np.repeat(np.arange(M.shape[0], dtype=np.int64), np.diff(M.indptr))


def _kkt_coo(qp: QpProblem):
    """Upper-triangular KKT pattern (rows, cols) and the matching value blocks."""
    n, p, m = qp.n, qp.m_eq, qp.m_ineq
    P = qp.P
    pr = _csr_rows(P)
    pc = P.indices.astype(np.int64)
    upper = pc > pr
    diag = np.arange(n + p + m, dtype=np.int64)
    ar, ac = _csr_rows(qp.A_eq), qp.A_eq.indices.astype(np.int64)
    gr, gc = _csr_rows(qp.A_ineq), qp.A_ineq.indices.astype(np.int64)
    rows = np.concatenate([pr[upper], diag, ac, gc])
    cols = np.concatenate([pc[upper], diag, n + ar, n + p + gr])
    return rows, cols, (P.data[upper], qp.A_eq.data, qp.A_ineq.data)


def _pattern_key(qp: QpProblem, rows, cols) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.array([qp.n, qp.m_eq, qp.m_ineq], dtype=np.int64).tobytes())
    h.update(rows.tobytes())
    h.update(cols.tobytes())
    return h.hexdigest()


def _upper_csc(rows, cols, pinv, dim):
    r, c = pinv[rows], pinv[cols]
    lo, hi = np.minimum(r, c), np.maximum(r, c)
    order = np.lexsort((lo, hi))
    Ai = lo[order]
    Ap = np.zeros(dim + 1, dtype=np.int64)
    np.add.at(Ap, hi + 1, 1)
    return np.cumsum(Ap), Ai, order


def _analyse(qp: QpProblem, rows, cols, key) -> _Symbolic:
    dim = qp.n + qp.m_eq + qp.m_ineq
    sym = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(dim, dim)).tocsr()
    sym = (sym + sym.T).tocsr()
    candidates = [np.arange(dim), np.asarray(reverse_cuthill_mckee(sym, symmetric_mode=True))]
    best = None
    for perm in candidates:
        perm = perm.astype(np.int64)
        pinv = np.empty(dim, dtype=np.int64)
        pinv[perm] = np.arange(dim)
        Ap, Ai, order = _upper_csc(rows, cols, pinv, dim)
        etree, Lnz, ok = ldl_etree(dim, Ap, Ai)
        if not ok:
            raise FactorizationFailure("KKT pattern is not upper triangular")
        nnz = int(Lnz.sum())
        if best is None or nnz < best[0]:
            best = (nnz, perm, pinv, Ap, Ai, order, etree, Lnz)
    nnz, perm, pinv, Ap, Ai, order, etree, Lnz = best
    Lp = np.zeros(dim + 1, dtype=np.int64)
    Lp[1:] = np.cumsum(Lnz)
    signs = np.where(perm < qp.n, 1.0, -1.0)
    slot = np.empty_like(order)
    slot[order] = np.arange(order.size)
    n_pu = rows.size - dim - qp.A_eq.nnz - qp.A_ineq.nnz
    w_slots = slot[n_pu + qp.n + qp.m_eq : n_pu + dim]
    return _Symbolic(key, dim, order, perm, Ap, Ai, Lp, etree, signs, w_slots, nnz)


@dataclass
class KktFactorization:
    """Numeric LDL^T of the (permuted) KKT matrix with a reusable symbolic part."""

    symbolic: _Symbolic
    Ax_reg: np.ndarray
    Ax_true: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    D: np.ndarray
    refine_iters: int = 3
    pivot_floor: float = 1e-13
    bumped: int = 0

    @property
    def pattern_hash(self) -> str:
        return self.symbolic.key

    def refactor(self, w: np.ndarray, eps: float):
        s = self.symbolic
        self.Ax_true[s.w_slots] = -w
        self.Ax_reg[s.w_slots] = -(w + eps)
        self.bumped = ldl_factor(
            s.dim, s.Ap, s.Ai, self.Ax_reg, s.Lp, self.Li, self.Lx, self.D,
            s.etree, s.signs, self.pivot_floor,
        )
        if not np.all(np.isfinite(self.D)):
            raise FactorizationFailure("non-finite pivot in LDL^T")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        s = self.symbolic
        b = rhs[s.perm]
        tol = 1e-14 * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
        x = ldl_solve_refined(
            s.dim, s.Ap, s.Ai, self.Ax_true, s.Lp, self.Li, self.Lx, self.D, b,
            self.refine_iters, tol,
        )
        out = np.empty_like(x)
        out[s.perm] = x
        return out

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        """Max-norm residual of the unregularized system (diagnostics)."""
        s = self.symbolic
        K = sp.csc_matrix((self.Ax_true, s.Ai, s.Ap), shape=(s.dim, s.dim))
        K = K + sp.triu(K, 1).T
        return float(np.max(np.abs(K @ x[s.perm] - rhs[s.perm])))


class QpSolver:
    """Interior-point solver; caches symbolic KKT analyses by sparsity pattern."""

    def __init__(self, settings: SolverSettings | None = None, cache_size: int = 32):
        self.settings = settings or SolverSettings()
        self._cache: dict[str, _Symbolic] = {}
        self._cache_size = cache_size
        self.symbolic_analyses = 0

    def factor_kkt(self, qp: QpProblem, w: np.ndarray | None = None, numeric: bool = True) -> KktFactorization:
        """Assemble and factor the KKT matrix for inequality weights ``w = s/lambda``."""
        eps = self.settings.eps
        rows, cols, (pu, av, gv) = _kkt_coo(qp)
        key = _pattern_key(qp, rows, cols)
        sym = self._cache.get(key)
        if sym is None:
            sym = _analyse(qp, rows, cols, key)
            self.symbolic_analyses += 1
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = sym
        diag_P = qp.P.diagonal()
        zeros_eq = np.zeros(qp.m_eq)
        w = np.ones(qp.m_ineq) if w is None else np.asarray(w, dtype=float)
        vals_true = np.concatenate([pu, diag_P, zeros_eq, -w, av, gv])
        vals_reg = np.concatenate([pu, diag_P + eps, zeros_eq - eps, -(w + eps), av, gv])
        # COO order is [Pu, diag(z, y, lambda), A_eq', A_ineq'] as built in _kkt_coo.
        fact = KktFactorization(
            sym,
            np.ascontiguousarray(vals_reg[sym.order]),
            np.ascontiguousarray(vals_true[sym.order]),
            np.zeros(sym.nnz_L, dtype=np.int64),
            np.zeros(sym.nnz_L),
            np.zeros(sym.dim),
            self.settings.refine_iters,
            self.settings.pivot_floor,
        )
        if numeric:
            fact.refactor(w, eps)
        return fact

    # -- main loop ---------------------------------------------------------

    def solve(self, qp: QpProblem) -> SolverResult:
        t0 = time.perf_counter()
        st = self.settings
        fact = self.factor_kkt(qp, numeric=False)
        s = fact.symbolic
        P, A, G = qp.P, qp.A_eq, qp.A_ineq
        z, y, lam, _, code, it = ipm_solve(
            qp.n, qp.m_eq, qp.m_ineq,
            P.indptr.astype(np.int64), P.indices.astype(np.int64), P.data,
            A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data,
            G.indptr.astype(np.int64), G.indices.astype(np.int64), G.data,
            qp.c, qp.b_eq, qp.b_ineq,
            s.dim, s.perm, s.Ap, s.Ai, fact.Ax_reg, fact.Ax_true, s.w_slots,
            s.Lp, s.etree, s.signs, s.nnz_L,
            st.max_iters, st.abs_tol, st.rel_gap, st.eps, st.step_fraction,
            st.refine_iters, st.pivot_floor,
        )
        status = _STATUS[code]
        res = self._residuals(qp, z, y, lam)
        if qp.m_ineq == 0:
            z, y, res = self._refine_equality_only(qp, fact, z, y, res)
            ok = max(res.eq, res.dual) <= st.abs_tol
            status = SolverStatus.OPTIMAL if ok else SolverStatus.MAX_ITERS
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
            raise FactorizationFailure("non-finite iterate")
        return SolverResult(z, y, lam, status, int(it), res, qp.objective(z), time.perf_counter() - t0)

    def _refine_equality_only(self, qp, fact, z, y, res, max_steps: int = 5):
        """Newton corrections on the exact KKT system; badly scaled costs leave
        the regularized solve short of the absolute tolerance."""
        tol = self.settings.abs_tol
        if max(res.eq, res.dual) <= tol:
            return z, y, res
        fact.refactor(np.zeros(0), self.settings.eps)
        lam = np.zeros(0)
        for _ in range(max_steps):
            r_d = qp.P @ z + qp.c + qp.A_eq.T @ y
            r_p = qp.A_eq @ z - qp.b_eq
            step = fact.solve(-np.concatenate([r_d, r_p]))
            z, y = z + step[: qp.n], y + step[qp.n :]
            res = self._residuals(qp, z, y, lam)
            if max(res.eq, res.dual) <= tol:
                break
        return z, y, res

    @staticmethod
    def _residuals(qp, z, y, lam) -> Residuals:
        r_d = qp.P @ z + qp.c + qp.A_eq.T @ y + qp.A_ineq.T @ lam
        eq = _inf(qp.A_eq @ z - qp.b_eq)
        ineq = max(0.0, float(np.max(qp.A_ineq @ z - qp.b_ineq))) if qp.m_ineq else 0.0
        gap = float(lam @ (qp.b_ineq - qp.A_ineq @ z)) if qp.m_ineq else 0.0
        return Residuals(eq, ineq, _inf(r_d), gap)


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


_STATUS = {
    STATUS_OPTIMAL: SolverStatus.OPTIMAL,
    STATUS_MAX_ITERS: SolverStatus.MAX_ITERS,
    STATUS_INFEASIBLE: SolverStatus.INFEASIBLE,
}

_DEFAULT = QpSolver()


def solve(qp: QpProblem, settings: SolverSettings | None = None) -> SolverResult:
    """Solve with a shared solver instance (or a fresh one for custom settings)."""
    solver = _DEFAULT if settings is None else QpSolver(settings)
    return solver.solve(qp)


# ---------------------------------------------------------------------------
# Plain-text dump in a matrix-market-like layout:
#
#   %%QP n m_eq m_ineq
#   %%matrix <name> <rows> <cols> <nnz>      followed by "i j value" (1-based)
#   %%vector <name> <len>                    followed by one value per line


def dump_problem(qp: QpProblem, path) -> None:
    with open(path, "w") as f:
        f.write(f"%%QP {qp.n} {qp.m_eq} {qp.m_ineq}\n")
        for name in ("P", "A_eq", "A_ineq"):
            M = getattr(qp, name).tocoo()
            f.write(f"%%matrix {name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
            for i, j, v in zip(M.row, M.col, M.data):
                f.write(f"{i + 1} {j + 1} {float(v)!r}\n")
        for name in ("c", "b_eq", "b_ineq"):
            v = getattr(qp, name)
            f.write(f"%%vector {name} {v.size}\n")
            f.writelines(f"{float(x)!r}\n" for x in v)


def load_problem(path) -> QpProblem:
    with open(path) as f:
        lines = [ln.split() for ln in f if ln.strip()]
    head = lines[0]
    if head[0] != "%%QP":
        raise ValueError("not a QP dump")
    items: dict = {}
    i = 1
    while i < len(lines):
        kind, name = lines[i][0], lines[i][1]
        if kind == "%%matrix":
            r, c, nnz = map(int, lines[i][2:5])
            data = np.array(lines[i + 1 : i + 1 + nnz], dtype=float).reshape(nnz, 3)
            items[name] = sp.coo_matrix(
                (data[:, 2], (data[:, 0].astype(int) - 1, data[:, 1].astype(int) - 1)), shape=(r, c)
            )
            i += 1 + nnz
        else:
            k = int(lines[i][2])
            items[name] = np.array([ln[0] for ln in lines[i + 1 : i + 1 + k]], dtype=float)
            i += 1 + k
    return QpProblem(items["P"], items["c"], items["A_ineq"], items["b_ineq"], items["A_eq"], items["b_eq"])
