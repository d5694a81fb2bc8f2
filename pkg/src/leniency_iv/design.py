"""Dummy designs, projections and the G-matrix family.

Every estimator in this package has the form ``y'Gx / x'Gx`` for an n x n
matrix ``G`` built from three projections:

* ``M``  annihilator of the controls ``W``,
* ``H``  projection onto the residualized instruments ``Zt = M Z``,
* ``H_Q = H + (I - M)`` the hat matrix of the full design ``(Z, W)``.

None of these is ever formed explicitly (except for FEJIV, whose weights
require a dense n x n solve). Gram matrices of dummy designs are block
diagonal once the column graph is split into connected components, so their
inverses are assembled block by block from dense Cholesky factors.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (
    CapacityError,
    DegenerateDesignError,
    DegenerateLeverageError,
    FEJIVUnavailableError,
    InsufficientDFError,
)

LEVERAGE_TOL = 1e-10
PIVOT_TOL = 1e-9
FEJIV_CAP = 5000
FEJIV_MAX_CONDITION = 1e12


class Kind(str, Enum):
    OLS = "ols"
    TSLS = "tsls"
    JIVE = "jive"
    IJIVE = "ijive"
    UJIVE = "ujive"
    B2SLS = "b2sls"
    FEJIV = "fejiv"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        key = str(value).strip().lower()
        key = {"2sls": "tsls", "bias_corrected_2sls": "b2sls", "bc2sls": "b2sls"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown estimator {value!r}; expected one of "
                             f"{', '.join(k.value for k in cls)}") from None


# --------------------------------------------------------------------------
# block-diagonal Gram inverses


def _block_gram_inverse(X: sp.spmatrix, what: str) -> sp.csr_matrix:
    """(X'X)^{-1} as a sparse block-diagonal matrix."""
    gram = (X.T @ X).tocsr()
    p = gram.shape[0]
    if p == 0:
        return sp.csr_matrix((0, 0))
    pattern = gram.copy()
    pattern.data = np.ones_like(pattern.data)
    n_comp, labels = connected_components(pattern, directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    order = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(sizes)])

    rows, cols, vals = [], [], []
    diag = gram.diagonal()
    singles = order[np.isin(labels[order], np.flatnonzero(sizes == 1))]
    if singles.size:
        d = diag[singles]
        if np.any(d <= 0):
            raise DegenerateDesignError(f"{what} design has an all-zero column")
        rows.append(singles)
        cols.append(singles)
        vals.append(1.0 / d)
    for c in np.flatnonzero(sizes > 1):
        idx = order[starts[c]:starts[c + 1]]
        block = gram[idx][:, idx].toarray()
        try:
            factor = sla.cho_factor(block, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise DegenerateDesignError(
                f"{what} Gram matrix is not positive definite; the design is rank deficient "
                "(prune the dataset first)") from None
        inv = sla.cho_solve(factor, np.eye(len(idx)), check_finite=False)
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(inv.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(p, p))


def _as_sparse(A, n) -> sp.csc_matrix:
    if A is None:
        return sp.csc_matrix((n, 0))
    if sp.issparse(A):
        return sp.csc_matrix(A, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    return sp.csc_matrix(A)


class DesignContext:
    """Encoded design with cached leverage diagonals.

    Parameters
    ----------
    Z : (n, K) instrument matrix, full column rank after residualizing on W.
    W : (n, L) control matrix of full column rank, or None for no controls.
    dataset : the pruned Dataset the matrices were encoded from, if any.
    check_leverage : raise if some ``M_ii - H_ii`` is below ``leverage_tol``.
    """

    def __init__(self, Z, W=None, *, dataset=None, instrument_labels=None, control_labels=None,
                 check_leverage=True, leverage_tol=LEVERAGE_TOL):
        n = Z.shape[0]
        self.n = n
        self.Z = _as_sparse(Z, n)
        self.W = _as_sparse(W, n)
        if self.W.shape[0] != n:
            raise ValueError("Z and W must have the same number of rows")
        self.K = self.Z.shape[1]
        self.L = self.W.shape[1]
        if self.K == 0:
            raise DegenerateDesignError("design has no instruments")
        self.dataset = dataset
        self.instrument_labels = instrument_labels
        self.control_labels = control_labels
        self.leverage_tol = leverage_tol

        if self.L:
            self._wtw_inv = _block_gram_inverse(self.W, "control")
            w_rows = (self.W @ self._wtw_inv).tocsr()
            self.M_diag = 1.0 - np.asarray(w_rows.multiply(self.W).sum(axis=1)).ravel()
            Zt = self.Z - self.W @ (self._wtw_inv @ (self.W.T @ self.Z))
        else:
            self._wtw_inv = sp.csr_matrix((0, 0))
            self.M_diag = np.ones(n)
            Zt = self.Z.copy()
        Zt = sp.csr_matrix(Zt)
        Zt.eliminate_zeros()
        self.Zt = Zt
        self._ztz_inv = _block_gram_inverse(Zt, "residualized instrument")
        z_rows = (Zt @ self._ztz_inv).tocsr()
        self.H_diag = np.asarray(z_rows.multiply(Zt).sum(axis=1)).ravel()
        self.gap = self.M_diag - self.H_diag
        for a in (self.M_diag, self.H_diag, self.gap):
            a.flags.writeable = False
        if check_leverage:
            bad = np.flatnonzero(self.gap < leverage_tol)
            if bad.size:
                i = int(bad[0])
                label = self.row_label(i)
                raise DegenerateLeverageError(
                    f"observation {label} has leverage one under (Z, W) (M_ii - H_ii = {self.gap[i]:.3g}); "
                    "prune the dataset first", observation=i)

    @property
    def DQ_diag(self) -> np.ndarray:
        return self.H_diag + 1.0 - self.M_diag

    @property
    def df(self) -> int:
        return self.n - self.K - self.L

    def row_label(self, i: int) -> str:
        if self.dataset is not None:
            return f"row {int(self.dataset.row_ids[i]) + 1}"
        return f"index {i}"

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"vector has length {v.shape[0]}, design has n={self.n}")
        return v

    def project_controls(self, v):
        v = self._check(v)
        if not self.L:
            return np.zeros_like(v)
        return self.W @ (self._wtw_inv @ (self.W.T @ v))

    def annihilate(self, v):
        v = self._check(v)
        return v - self.project_controls(v)

    def project(self, v):
        v = self._check(v)
        return self.Zt @ (self._ztz_inv @ (self.Zt.T @ v))

    def dense_M(self) -> np.ndarray:
        return np.eye(self.n) - self.project_controls(np.eye(self.n))

    def dense_H(self) -> np.ndarray:
        return self.project(np.eye(self.n))

    @classmethod
    def from_matrices(cls, Z, W=None, **kwargs) -> "DesignContext":
        return cls(Z, W, **kwargs)


def residualize_controls(ctx: DesignContext, v):
    """``Mv``: residual from regressing ``v`` on the controls."""
    return ctx.annihilate(v)


def project_instruments(ctx: DesignContext, v):
    """``Hv``: projection onto the control-residualized instruments."""
    return ctx.project(v)


# --------------------------------------------------------------------------
# G matrices


@dataclass(frozen=True, eq=False)
class GMatrixSpec:
    kind: Kind
    context: DesignContext
    fejiv_lambda: np.ndarray | None = None
    fejiv_condition: float | None = None
    _fejiv_diag: np.ndarray | None = field(default=None, repr=False)

    def _ujive_weights(self):
        ctx = self.context
        return ctx.H_diag / ctx.gap

    def _jive_parts(self):
        ctx = self.context
        dq = ctx.DQ_diag
        return dq, 1.0 - dq

    def apply(self, v):
        ctx = self.context
        v = ctx._check(v)
        k = self.kind
        if k is Kind.OLS:
            return ctx.annihilate(v)
        if k is Kind.TSLS:
            return ctx.project(v)
        if k is Kind.UJIVE:
            d = _col(self._ujive_weights(), v)
            Hv = ctx.project(v)
            return Hv - d * (ctx.annihilate(v) - Hv)
        if k is Kind.B2SLS:
            c = _b2sls_factor(ctx)
            Hv = ctx.project(v)
            return Hv - c * (ctx.annihilate(v) - Hv)
        if k is Kind.JIVE:
            dq, one_minus = self._jive_parts()
            _nonzero_denominators(ctx, one_minus, "JIVE")
            HQv = ctx.project(v) + ctx.project_controls(v)
            return ctx.annihilate((HQv - _col(dq, v) * v) / _col(one_minus, v))
        if k is Kind.IJIVE:
            h = _col(ctx.H_diag, v)
            Mv = ctx.annihilate(v)
            return ctx.annihilate((ctx.project(Mv) - h * Mv) / (1.0 - h))
        if k is Kind.FEJIV:
            lam = _col(self.fejiv_lambda, v)
            Hv = ctx.project(v)
            Pv = ctx.annihilate(v) - Hv
            Plv = lam * Pv
            return Hv - (ctx.annihilate(Plv) - ctx.project(Plv))
        raise ValueError(k)

    def apply_transpose(self, v):
        """``G'v``."""
        ctx = self.context
        v = ctx._check(v)
        k = self.kind
        if k in (Kind.OLS, Kind.TSLS, Kind.B2SLS, Kind.FEJIV):
            return self.apply(v)
        if k is Kind.UJIVE:
            dv = _col(self._ujive_weights(), v) * v
            return ctx.project(v) - (ctx.annihilate(dv) - ctx.project(dv))
        if k is Kind.JIVE:
            dq, one_minus = self._jive_parts()
            u = ctx.annihilate(v) / _col(one_minus, v)
            return ctx.project(u) + ctx.project_controls(u) - _col(dq, v) * u
        if k is Kind.IJIVE:
            h = _col(ctx.H_diag, v)
            u = ctx.annihilate(v) / (1.0 - h)
            return ctx.annihilate(ctx.project(u) - h * u)
        raise ValueError(k)

    def trace(self) -> float:
        ctx = self.context
        H, M, gap = ctx.H_diag, ctx.M_diag, ctx.gap
        k = self.kind
        if k is Kind.OLS:
            return float(M.sum())
        if k is Kind.TSLS:
            return float(H.sum())
        if k is Kind.UJIVE:
            return float(np.sum(H - self._ujive_weights() * gap))
        if k is Kind.B2SLS:
            return float(H.sum() - _b2sls_factor(ctx) * gap.sum())
        if k is Kind.JIVE:
            dq, one_minus = self._jive_parts()
            return float(np.sum((H - dq * M) / one_minus))
        if k is Kind.IJIVE:
            return float(np.sum(H * (1.0 - M) / (1.0 - H)))
        if k is Kind.FEJIV:
            return float(self._fejiv_diag.sum())
        raise ValueError(k)

    def dense(self, cap: int = FEJIV_CAP) -> np.ndarray:
        """Materialize G column by column (desk scale only)."""
        if self.context.n > cap:
            raise CapacityError(f"dense G requested for n={self.context.n} > cap {cap}")
        return self.apply(np.eye(self.context.n))


def _col(d, v):
    return d[:, None] if np.ndim(v) == 2 else d


def _b2sls_factor(ctx: DesignContext) -> float:
    if ctx.df <= 0:
        raise InsufficientDFError(f"B2SLS needs n - K - L > 0 (n={ctx.n}, K={ctx.K}, L={ctx.L})")
    return ctx.K / ctx.df


def _nonzero_denominators(ctx, denom, name):
    bad = np.flatnonzero(denom <= 0)
    if bad.size:
        raise DegenerateLeverageError(f"{name} denominator vanishes at {ctx.row_label(int(bad[0]))}",
                                      observation=int(bad[0]))


def fejiv_lambda(ctx: DesignContext, cap: int = FEJIV_CAP, max_condition: float = FEJIV_MAX_CONDITION,
                 return_condition: bool = False):
    """Solve ``((M-H) o (M-H)) lam = diag(H)`` densely.

    Raises CapacityError when ``n > cap`` and FEJIVUnavailableError when the
    Hadamard system is singular or its condition number exceeds
    ``max_condition``.
    """
    if ctx.n > cap:
        raise CapacityError(f"FEJIV needs a dense {ctx.n}x{ctx.n} solve; n exceeds the cap of {cap}")
    P = ctx.dense_M() - ctx.dense_H()
    A = P * P
    anorm = np.linalg.norm(A, 1)
    try:
        with warnings.catch_warnings():
            # singularity is judged below from the condition estimate
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(A, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        raise FEJIVUnavailableError("FEJIV Hadamard system is singular", condition_number=np.inf) from None
    rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 or not np.isfinite(rcond) else 1.0 / rcond
    if not np.isfinite(cond) or cond > max_condition:
        raise FEJIVUnavailableError(
            f"FEJIV Hadamard system is ill-conditioned (condition number {cond:.3g}); the estimator "
            "may not exist with high-leverage observations", condition_number=cond)
    lam = sla.lu_solve((lu, piv), ctx.H_diag, check_finite=False)
    if return_condition:
        return lam, cond
    return lam


def make_spec(ctx: DesignContext, kind, fejiv_cap: int = FEJIV_CAP) -> GMatrixSpec:
    kind = Kind.parse(kind)
    if kind is Kind.FEJIV:
        lam, cond = fejiv_lambda(ctx, cap=fejiv_cap, return_condition=True)
        P = ctx.dense_M() - ctx.dense_H()
        diag = ctx.H_diag - (P * P) @ lam
        return GMatrixSpec(kind, ctx, lam, cond, diag)
    if kind is Kind.B2SLS:
        _b2sls_factor(ctx)
    return GMatrixSpec(kind, ctx)


def row_components(ctx: DesignContext) -> np.ndarray:
    """Label of each observation's connected component, rows being linked
    through shared instrument or control columns. Every G in the family is
    block diagonal over these components."""
    B = sp.hstack([ctx.Z, ctx.W]).tocsr()
    B.data = (B.data != 0).astype(float)
    adj = sp.bmat([[None, B], [B.T, None]])
    _, labels = connected_components(adj, directed=False)
    return labels[:ctx.n]


def dense_blocks(spec: GMatrixSpec, cap: int = FEJIV_CAP):
    """Yield ``(rows, G[rows][:, rows])`` per component; components larger than
    ``cap`` yield ``(rows, None)``."""
    ctx = spec.context
    labels = row_components(ctx)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    for rows in np.split(order, bounds):
        if len(rows) > cap:
            yield rows, None
            continue
        if len(rows) == ctx.n:
            yield rows, spec.dense(cap)
            continue
        Z, W = ctx.Z[rows], ctx.W[rows]
        zc = np.flatnonzero(np.asarray(abs(Z).sum(axis=0)).ravel())
        wc = np.flatnonzero(np.asarray(abs(W).sum(axis=0)).ravel())
        sub = DesignContext(Z[:, zc], W[:, wc] if wc.size else None, check_leverage=False)
        if spec.kind is Kind.B2SLS:
            # the degrees-of-freedom factor is global, not per component
            M, H = sub.dense_M(), sub.dense_H()
            yield rows, H - _b2sls_factor(ctx) * (M - H)
        else:
            yield rows, make_spec(sub, spec.kind, fejiv_cap=cap).dense(cap)


def g_apply(spec: GMatrixSpec, v):
    return spec.apply(v)


def g_trace(spec: GMatrixSpec) -> float:
    return spec.trace()


def probe_checksum(spec: GMatrixSpec) -> str:
    """Fingerprint of the G action on a fixed probe vector."""
    probe = np.sin(np.arange(1, spec.context.n + 1, dtype=float))
    g = np.round(spec.apply(probe), 10) + 0.0
    return hashlib.sha256(g.tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# encoding datasets into (Z, W)


@dataclass(frozen=True)
class EncodedDesign:
    Z: sp.csc_matrix
    W: sp.csc_matrix
    instrument_labels: tuple[str, ...]
    control_labels: tuple[str, ...]
    n_reference_omitted: int
    n_collinear_instruments: int
    n_collinear_controls: int


def _dummies(codes, m) -> sp.csc_matrix:
    n = len(codes)
    return sp.csc_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, m))


def reference_examiners(ds) -> np.ndarray:
    """Lexicographically smallest examiner in each connected component of the
    examiner / primary-cell graph."""
    n_ex = len(ds.examiner_levels)
    n_cell = len(ds.fe_levels[0])
    adj = sp.coo_matrix((np.ones(ds.n), (ds.examiner, n_ex + ds.fe[:, 0])), shape=(n_ex + n_cell,) * 2)
    _, labels = connected_components(adj, directed=False)
    _, first = np.unique(labels[:n_ex], return_index=True)
    return np.sort(first)


def _row_patterns(Q: sp.csr_matrix):
    keys = {}
    pattern_of_row = np.empty(Q.shape[0], dtype=np.int64)
    for i in range(Q.shape[0]):
        lo, hi = Q.indptr[i], Q.indptr[i + 1]
        key = Q.indices[lo:hi].tobytes() + Q.data[lo:hi].tobytes()
        pattern_of_row[i] = keys.setdefault(key, len(keys))
    _, first, counts = np.unique(pattern_of_row, return_index=True, return_counts=True)
    return first, counts


def _rank_prefix(R: np.ndarray, tol: float) -> int:
    d = np.abs(np.diag(R)) if R.size else np.zeros(0)
    bad = np.flatnonzero(d <= tol)
    return int(bad[0]) if bad.size else len(d)


def independent_columns(W, Z, pivot_tol: float = PIVOT_TOL):
    """Indices of W columns, then Z columns, forming a basis of span(W, Z).

    W columns are retained first; Z columns are screened against the retained
    controls. Dependencies are detected by column-pivoted QR on the distinct
    rows of each connected column block, each weighted by the square root of
    its multiplicity, which leaves the Gram matrix (hence R) unchanged.
    """
    W = sp.csc_matrix(W, dtype=float)
    Z = sp.csc_matrix(Z, dtype=float)
    Lw = W.shape[1]
    Q = sp.hstack([W, Z], format="csr")
    p = Q.shape[1]
    if p == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    first, counts = _row_patterns(Q)
    U = Q[first].toarray() * np.sqrt(counts)[:, None]
    pattern = (abs(Q.T) @ abs(Q)).tocsr()
    _, comp = connected_components(pattern, directed=False)
    keep_w, keep_z = [], []
    for c in np.unique(comp):
        cols = np.flatnonzero(comp == c)
        rows = np.flatnonzero(np.any(U[:, cols] != 0, axis=1))
        A = U[np.ix_(rows, cols)]
        if not rows.size:
            continue
        scale = max(np.max(np.linalg.norm(A, axis=0)), 1e-300)
        tol = pivot_tol * scale
        wc = cols[cols < Lw]
        zc = cols[cols >= Lw]
        Aw = A[:, cols < Lw]
        Az = A[:, cols >= Lw]
        basis = np.zeros((len(rows), 0))
        if wc.size:
            R, piv = sla.qr(Aw, mode="r", pivoting=True)
            r = _rank_prefix(R, tol)
            kept = np.sort(piv[:r])
            keep_w.extend(wc[kept])
            basis, _ = np.linalg.qr(Aw[:, kept])
        if zc.size:
            resid = Az - basis @ (basis.T @ Az)
            R, piv = sla.qr(resid, mode="r", pivoting=True)
            r = _rank_prefix(R, tol)
            keep_z.extend(zc[np.sort(piv[:r])] - Lw)
    return np.sort(np.array(keep_w, dtype=int)), np.sort(np.array(keep_z, dtype=int))


def encode_design(ds, pivot_tol: float = PIVOT_TOL) -> EncodedDesign:
    blocks, w_labels = [], []
    for j, name in enumerate(ds.fe_names):
        levels = ds.fe_levels[j]
        blocks.append(_dummies(ds.fe[:, j], len(levels)))
        w_labels.extend(f"{name}={lv}" for lv in levels)
    W_all = sp.hstack(blocks, format="csc")
    n_ex = len(ds.examiner_levels)
    refs = reference_examiners(ds)
    non_ref = np.setdiff1d(np.arange(n_ex), refs)
    Z_all = _dummies(ds.examiner, n_ex)[:, non_ref]
    kw, kz = independent_columns(W_all, Z_all, pivot_tol)
    return EncodedDesign(
        Z=Z_all[:, kz],
        W=W_all[:, kw],
        instrument_labels=tuple(ds.examiner_levels[non_ref[j]] for j in kz),
        control_labels=tuple(w_labels[j] for j in kw),
        n_reference_omitted=len(refs),
        n_collinear_instruments=len(non_ref) - len(kz),
        n_collinear_controls=W_all.shape[1] - len(kw),
    )


def build_design(ds, check_leverage: bool = True) -> DesignContext:
    """Encode a (pruned) dataset and cache its leverage diagonals."""
    enc = encode_design(ds)
    if enc.Z.shape[1] == 0:
        raise DegenerateDesignError("no instrument columns survive encoding")
    return DesignContext(enc.Z, enc.W, dataset=ds, instrument_labels=enc.instrument_labels,
                         control_labels=enc.control_labels, check_leverage=check_leverage)
