"""Block semidefinite programs over Gram coordinates.

Decision vector ``x = [g_1, ..., g_K, f]`` where ``g_k`` holds the lower
triangle (column-major) of symmetric block ``k`` and ``f`` are free scalars.
Problem::

    minimize    c'x
    subject to  A x = b,   Mat(g_k) PSD for every block.

Solved with cvxopt's homogeneous self-dual cone solver and a custom KKT
routine that exploits the block-coordinate structure: the Nesterov-Todd
scaling reduces the KKT system to a dense Schur complement in the equality
multipliers (augmented with the free variables).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from ..errors import PcroaError, SolverNumericalError

log = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, UNBOUNDED, MAX_ITER, NUMERICAL = (
    "optimal", "infeasible", "unbounded", "max_iter", "numerical_trouble")


def tril_indices(m: int):
    """Column-major lower-triangle coordinates ``(ia, ib)`` with ``ia >= ib``."""
    ia, ib = [], []
    for b in range(m):
        for a in range(b, m):
            ia.append(a)
            ib.append(b)
    return np.array(ia, dtype=int), np.array(ib, dtype=int)


def coord_count(m: int) -> int:
    return m * (m + 1) // 2


def coord_index(m: int, a: int, b: int) -> int:
    """Position of entry ``(a, b)`` (either order) in the block's coordinate vector."""
    if a < b:
        a, b = b, a
    return b * m - b * (b - 1) // 2 + (a - b)


def sym_from_coords(g, m: int) -> np.ndarray:
    ia, ib = tril_indices(m)
    X = np.zeros((m, m))
    X[ia, ib] = g
    X[ib, ia] = g
    return X


@dataclass
class SdpOptions:
    abstol: float = 1e-8
    reltol: float = 1e-8
    feastol: float = 1e-8
    max_iter: int = 120
    verbose: bool = False
    chunk: int = 256
    kkt: str = "schur"  # or a cvxopt built-in name ("chol", "qr", "ldl")


@dataclass
class SdpSolution:
    status: str
    x: np.ndarray
    blocks: list
    free: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    min_eigs: list
    solver_status: str = ""
    certificate: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "status": self.status,
            "objective": self.objective,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "gap": self.gap,
            "iterations": self.iterations,
            "min_eigs": [float(v) for v in self.min_eigs],
            "solver_status": self.solver_status,
        }


class SdpProblem:
    """Incrementally assembled block SDP (see module docstring)."""

    def __init__(self):
        self.block_sizes: list[int] = []
        self.block_names: list[str] = []
        self.free_names: list[str] = []
        self._rows: list[int] = []
        self._cols: list[int] = []  # ("b", blk, coord) or ("f", k) encoded later
        self._vals: list[float] = []
        self.b: list[float] = []
        self.row_names: list[str] = []
        self.c: dict = {}

    # -- variables -----------------------------------------------------------

    def add_block(self, m: int, name: str = "") -> int:
        if m < 1:
            raise ValueError("block size must be positive")
        self.block_sizes.append(int(m))
        self.block_names.append(name or f"block{len(self.block_sizes) - 1}")
        return len(self.block_sizes) - 1

    def add_free(self, name: str = "") -> int:
        self.free_names.append(name or f"free{len(self.free_names)}")
        return len(self.free_names) - 1

    @property
    def nblocks(self):
        return len(self.block_sizes)

    @property
    def nfree(self):
        return len(self.free_names)

    def block_offsets(self):
        off = np.cumsum([0] + [coord_count(m) for m in self.block_sizes])
        return off

    @property
    def nvars(self):
        return int(self.block_offsets()[-1]) + self.nfree

    def var_block(self, blk: int, a: int, b: int) -> int:
        """Variable key of block entry ``(a, b)``; keys stay valid as more blocks are added."""
        return ("b", blk, coord_index(self.block_sizes[blk], a, b))

    def var_free(self, k: int):
        return ("f", k)

    def _resolve(self, key) -> int:
        off = self._offsets_cache
        if key[0] == "b":
            return int(off[key[1]] + key[2])
        return int(off[-1] + key[1])

    # -- constraints and objective --------------------------------------------

    def add_row(self, coeffs: dict, rhs: float, name: str = "") -> int:
        """``sum coeffs[var] * var = rhs`` with ``var`` from :meth:`var_block` / :meth:`var_free`."""
        r = len(self.b)
        for k, v in coeffs.items():
            if v != 0.0:
                self._rows.append(r)
                self._cols.append(k)
                self._vals.append(float(v))
        self.b.append(float(rhs))
        self.row_names.append(name)
        return r

    def set_objective(self, coeffs: dict):
        """Minimise ``sum coeffs[var] * var``."""
        self.c = {k: float(v) for k, v in coeffs.items()}

    # -- assembly ----------------------------------------------------------------

    def assemble(self):
        self._offsets_cache = self.block_offsets()
        n = self.nvars
        cols = np.array([self._resolve(k) for k in self._cols], dtype=int)
        A = sp.csr_matrix((np.array(self._vals), (np.array(self._rows, dtype=int), cols)),
                          shape=(len(self.b), n))
        A.sum_duplicates()
        c = np.zeros(n)
        for k, v in self.c.items():
            c[self._resolve(k)] += v
        return A, np.array(self.b), c

    def dump(self, path):
        """Sparse text dump: ``row kind block i j value`` per nonzero, then ``rhs`` lines."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# sdp blocks={self.block_sizes} free={self.nfree} rows={len(self.b)}\n")
            for r, k, v in zip(self._rows, self._cols, self._vals):
                if k[0] == "b":
                    m = self.block_sizes[k[1]]
                    ia, ib = tril_indices(m)
                    fh.write(f"{r} b {k[1]} {ia[k[2]]} {ib[k[2]]} {v:.17g}\n")
                else:
                    fh.write(f"{r} f {k[1]} 0 0 {v:.17g}\n")
            for r, v in enumerate(self.b):
                fh.write(f"{r} rhs - - - {v:.17g}\n")
            for k, v in self.c.items():
                if k[0] == "b":
                    ia, ib = tril_indices(self.block_sizes[k[1]])
                    fh.write(f"obj b {k[1]} {ia[k[2]]} {ib[k[2]]} {v:.17g}\n")
                else:
                    fh.write(f"obj f {k[1]} 0 0 {v:.17g}\n")


# -- KKT solver ------------------------------------------------------------------------


class _BlockKkt:
    """Factory for cvxopt ``kktsolver`` callbacks specialised to Gram-coordinate problems."""

    def __init__(self, A: sp.csr_matrix, sizes, nfree, chunk=256):
        self.sizes = list(sizes)
        self.nfree = nfree
        self.p = A.shape[0]
        off = np.cumsum([0] + [coord_count(m) for m in sizes])
        self.off = off
        A = A.tocsc()
        self.Ablk = [A[:, off[k]:off[k + 1]].tocsr() for k in range(len(sizes))]
        self.AblkT = [a.T.tocsr() for a in self.Ablk]
        self.Af = A[:, off[-1]:].toarray() if nfree else np.zeros((self.p, 0))
        self.tri = [tril_indices(m) for m in sizes]
        self.chunk = chunk
        self._row_plans = [self._plan(k) for k in range(len(sizes))]

    def _plan(self, k):
        """Per-row sparse data for large blocks (``None`` means dense-kernel path)."""
        m = self.sizes[k]
        C = coord_count(m)
        if C <= 1500:
            return None
        ia, ib = self.tri[k]
        At = self.Ablk[k]
        plan = []
        for j in range(self.p):
            lo, hi = At.indptr[j], At.indptr[j + 1]
            if lo == hi:
                continue
            cols = At.indices[lo:hi]
            vals = At.data[lo:hi]
            a, b = ia[cols], ib[cols]
            T, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
            pa, pb = inv[: len(a)], inv[len(a):]
            diag = a == b
            w = np.where(diag, vals, 0.5 * vals)
            plan.append((j, T, pa, pb, a, b, w, diag))
        return plan

    # block helpers
    def _ymat(self, k, w):
        """Symmetric matrix ``Y`` with ``<Y, Mat(g)> = w . g`` (off-diagonals halved)."""
        ia, ib = self.tri[k]
        m = self.sizes[k]
        Y = np.zeros((m, m))
        off = ia != ib
        Y[ia, ib] = np.where(off, 0.5 * w, w)
        Y[ib[off], ia[off]] = 0.5 * w[off]
        return Y

    def _hinv(self, k, w, R):
        ia, ib = self.tri[k]
        return (R @ self._ymat(k, w) @ R)[ia, ib]

    def _schur(self, Rs):
        p = self.p
        M = np.zeros((p, p))
        for k, R in enumerate(Rs):
            Ak = self.Ablk[k]
            if Ak.nnz == 0:
                continue
            ia, ib = self.tri[k]
            plan = self._row_plans[k]
            if plan is None:
                Ra, Rb = R[ia][:, ia], R[ib][:, ib]
                Rab, Rba = R[ia][:, ib], R[ib][:, ia]
                K = 0.5 * (Ra * Rb + Rab * Rba)
                AK = (Ak @ K)  # dense p x C
                M += (Ak @ AK.T).T if sp.issparse(Ak) else Ak @ AK.T
                continue
            m = self.sizes[k]
            buf_cols, buf = [], []
            for (j, T, pa, pb, a, b, w, diag) in plan:
                Ysub = np.zeros((len(T), m))
                np.add.at(Ysub, (pa, b), w)
                nd = ~diag
                np.add.at(Ysub, (pb[nd], a[nd]), w[nd])
                X = R[:, T] @ (Ysub @ R)
                buf_cols.append(j)
                buf.append(X[ia, ib])
                if len(buf) >= self.chunk:
                    M[:, buf_cols] += Ak @ np.array(buf).T
                    buf_cols, buf = [], []
            if buf:
                M[:, buf_cols] += Ak @ np.array(buf).T
        return 0.5 * (M + M.T)

    def __call__(self, W):
        from cvxopt import matrix

        rs = [np.array(r) for r in W["r"]]
        Rs = [r @ r.T for r in rs]
        M = self._schur(Rs)
        nf = self.nfree
        if nf:
            KKT = np.block([[M, -self.Af], [-self.Af.T, np.zeros((nf, nf))]])
            lu = sla.lu_factor(KKT, check_finite=False)
            solve = lambda r: sla.lu_solve(lu, r, check_finite=False)  # noqa: E731
        else:
            try:
                cf = sla.cho_factor(M, lower=True, check_finite=False)
                solve = lambda r: sla.cho_solve(cf, r, check_finite=False)  # noqa: E731
            except np.linalg.LinAlgError:
                solve = _lu_or_pinv(M)
        sizes, off = self.sizes, self.off

        # Everything below stays in the scaled space: with Gs = W^{-T} G the
        # block part of the solution is ug = H^{-1}(bx - A'uy) - Bz and the
        # returned scaled multiplier is W uz = -r' Ymat(bx - A'uy) r, so no
        # inverse scaling is ever formed.
        def f(x, y, z):
            bx = np.array(x).ravel()
            by = np.array(y).ravel()
            bz = np.array(z).ravel()
            Bz, t = [], np.zeros(self.p)
            zoff = 0
            for k, m in enumerate(sizes):
                Z = bz[zoff:zoff + m * m].reshape((m, m), order="F")
                zoff += m * m
                ia, ib = self.tri[k]
                bzc = Z[ia, ib]
                Bz.append(bzc)
                if self.Ablk[k].nnz:
                    t += self.Ablk[k] @ (self._hinv(k, bx[off[k]:off[k + 1]], Rs[k]) - bzc)
            if nf:
                sol = solve(np.concatenate([t - by, -bx[off[-1]:]]))
                uy, uf = sol[: self.p], sol[self.p:]
            else:
                uy, uf = solve(t - by), np.zeros(0)
            ug, zout = [], []
            for k, m in enumerate(sizes):
                w = bx[off[k]:off[k + 1]] - self.AblkT[k] @ uy
                ug.append(self._hinv(k, w, Rs[k]) - Bz[k])
                zout.append((-rs[k].T @ self._ymat(k, w) @ rs[k]).ravel(order="F"))
            x[:] = matrix(np.concatenate(ug + [uf]))
            y[:] = matrix(uy)
            z[:] = matrix(np.concatenate(zout))

        return f


def _lu_or_pinv(M):
    """LU solve for an ill-conditioned M; minimum-norm solve when a pivot is exactly zero
    (redundant equality rows with consistent right-hand sides)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu = sla.lu_factor(M, check_finite=False)
    if np.all(np.diag(lu[0]) != 0.0):
        return lambda r: sla.lu_solve(lu, r, check_finite=False)
    Mp = sla.pinvh(M)
    return lambda r: Mp @ r


def solve_conic(prob: SdpProblem, opts: SdpOptions | None = None) -> SdpSolution:
    """Solve an :class:`SdpProblem`; residuals are recomputed from the returned point."""
    from cvxopt import matrix, spmatrix, solvers

    opts = opts or SdpOptions()
    A, b, c = prob.assemble()
    sizes = prob.block_sizes
    if not sizes:
        raise PcroaError("SDP without PSD blocks", module="sosdp", operation="solve_conic",
                         code="empty")
    nx = A.shape[1]
    # G = -E : block coordinates into unpacked 'L' storage
    gi, gj, gv = [], [], []
    zoff, xoff = 0, 0
    for m in sizes:
        ia, ib = tril_indices(m)
        gi.extend((zoff + ia + ib * m).tolist())
        gj.extend((xoff + np.arange(len(ia))).tolist())
        gv.extend([-1.0] * len(ia))
        zoff += m * m
        xoff += len(ia)
    G = spmatrix(gv, gi, gj, (zoff, nx))
    h = matrix(0.0, (zoff, 1))
    Acoo = A.tocoo()
    Acv = spmatrix(Acoo.data.tolist(), Acoo.row.tolist(), Acoo.col.tolist(), A.shape)
    kkt = _BlockKkt(A, sizes, prob.nfree, chunk=opts.chunk) if opts.kkt == "schur" else opts.kkt
    options = {"abstol": opts.abstol, "reltol": opts.reltol, "feastol": opts.feastol,
               "maxiters": opts.max_iter, "show_progress": opts.verbose}
    try:
        res = solvers.conelp(matrix(c), G, h, {"l": 0, "q": [], "s": list(sizes)},
                             Acv, matrix(b), kktsolver=kkt, options=options)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise SolverNumericalError(f"conic solver failed: {exc}", module="sosdp",
                                   operation="solve_conic", code="numerical_trouble") from exc
    return _wrap(prob, res, A, b, c, opts.max_iter)


def _polish(A, b, x):
    """Minimum-norm correction onto ``A x = b``, kept only if it lowers the residual.

    Interior-point iterates meet the equalities to roughly ``feastol``; this
    pushes the Gram identities to near machine precision while moving ``x`` by
    about the same amount, far below any eigenvalue margin that matters.
    """
    r = b - A @ x
    r0 = float(np.max(np.abs(r), initial=0.0))
    if r0 == 0.0:
        return x
    dx = lsqr(A, r, atol=1e-15, btol=1e-15, iter_lim=500)[0]
    xn = x + dx
    if float(np.max(np.abs(b - A @ xn), initial=0.0)) < r0:
        return xn
    return x


def _wrap(prob, res, A, b, c, max_iter):
    sizes = prob.block_sizes
    off = np.cumsum([0] + [coord_count(m) for m in sizes])
    st = res["status"]
    if st == "optimal":
        status = OPTIMAL
    elif st == "primal infeasible":
        status = INFEASIBLE
    elif st == "dual infeasible":
        status = UNBOUNDED
    else:
        status = MAX_ITER if int(res.get("iterations") or 0) >= max_iter else NUMERICAL
    x = np.array(res["x"]).ravel() if res["x"] is not None else np.full(A.shape[1], np.nan)
    if status in (OPTIMAL, MAX_ITER) and np.all(np.isfinite(x)):
        x = _polish(A, b, x)
    blocks = [sym_from_coords(x[off[k]:off[k + 1]], m) for k, m in enumerate(sizes)]
    free = x[off[-1]:]
    mins = [float(np.linalg.eigvalsh(B)[0]) if np.all(np.isfinite(B)) else -math.inf for B in blocks]
    scale_b = 1.0 + np.max(np.abs(b), initial=0.0)
    pres = float(np.max(np.abs(A @ x - b), initial=0.0) / scale_b) if np.all(np.isfinite(x)) else math.inf
    cert = {}
    dres, gap = math.nan, math.nan
    if res["y"] is not None and res["z"] is not None:
        y = np.array(res["y"]).ravel()
        z = np.array(res["z"]).ravel()
        zc = []
        zoff = 0
        for m in sizes:
            Z = z[zoff:zoff + m * m].reshape((m, m), order="F")
            Z = np.tril(Z) + np.tril(Z, -1).T
            ia, ib = tril_indices(m)
            zc.append(np.where(ia != ib, 2.0, 1.0) * Z[ia, ib])
            zoff += m * m
        gz = np.concatenate(zc + [np.zeros(prob.nfree)])
        # stationarity: c + A'y - E'z = 0
        r = c + A.T @ y - gz
        dres = float(np.max(np.abs(r), initial=0.0) / (1.0 + np.max(np.abs(c), initial=0.0)))
        if status == OPTIMAL:
            pobj, dobj = float(c @ x), float(-b @ y)
            gap = abs(pobj - dobj)
        cert = {"y": y, "z": z}
    if status == INFEASIBLE and res["y"] is not None:
        y = np.array(res["y"]).ravel()
        cert["farkas_b_dot_y"] = float(b @ y)
    obj = float(c @ x) if np.all(np.isfinite(x)) else math.nan
    return SdpSolution(status, x, blocks, free, obj, pres, dres, gap,
                       int(res.get("iterations", -1) or -1), mins, st, cert)
