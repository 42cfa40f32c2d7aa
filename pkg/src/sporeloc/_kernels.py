"""Hot inner loops of the ADMM layer.

Every kernel exists twice: a numba ``@njit`` version working on raw CSR
triplets and a pure numpy/scipy version.  The numba path is used by default;
set ``SPORELOC_DISABLE_NUMBA=1`` to force the numpy path (useful when numba is
unavailable or for debugging).  :class:`SparseOps` binds one constraint
topology to one backend so callers never branch on the backend themselves.

Dense arrays are column-batched: a batch of ``B`` vectors of length ``n`` is
an ``(n, B)`` C-contiguous array.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

DISABLE_ENV = "SPORELOC_DISABLE_NUMBA"

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    """True when the numba kernels are available and not disabled by env."""
    flag = os.environ.get(DISABLE_ENV, "").strip().lower()
    return HAVE_NUMBA and flag not in ("1", "true", "yes", "on")


def default_backend() -> str:
    return "numba" if numba_enabled() else "numpy"


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_primal_rhs(gt_ptr, gt_idx, gt_val, Q, S, H, MU, rho, out):
        # out = -(Q + G^T (rho (S - H) + MU))
        n, B = Q.shape
        for r in range(n):
            for b in range(B):
                out[r, b] = -Q[r, b]
            for p in range(gt_ptr[r], gt_ptr[r + 1]):
                c = gt_idx[p]
                v = gt_val[p]
                for b in range(B):
                    out[r, b] -= v * (rho * (S[c, b] - H[c, b]) + MU[c, b])

    @njit(cache=True)
    def _nb_slack_dual(g_ptr, g_idx, g_val, Y, H, S, MU, rho, mask):
        m, B = S.shape
        gy = np.empty(B)
        for r in range(m):
            for b in range(B):
                gy[b] = 0.0
            for p in range(g_ptr[r], g_ptr[r + 1]):
                c = g_idx[p]
                v = g_val[p]
                for b in range(B):
                    gy[b] += v * Y[c, b]
            for b in range(B):
                resid = gy[b] - H[r, b]
                pre = -MU[r, b] / rho - resid
                s_new = pre if pre > 0.0 else 0.0
                S[r, b] = s_new
                mask[r, b] = s_new > 0.0
                MU[r, b] += rho * (resid + s_new)

    @njit(cache=True)
    def _nb_objective(p_ptr, p_idx, p_val, Q, Y, out):
        n, B = Y.shape
        acc = np.empty(B)
        for b in range(B):
            out[b] = 0.0
        for r in range(n):
            for b in range(B):
                acc[b] = 0.0
            for p in range(p_ptr[r], p_ptr[r + 1]):
                c = p_idx[p]
                v = p_val[p]
                for b in range(B):
                    acc[b] += v * Y[c, b]
            for b in range(B):
                out[b] += Y[r, b] * (0.5 * acc[b] + Q[r, b])

    @njit(cache=True)
    def _nb_jac_slack_dual(g_ptr, g_idx, g_val, JY, mask, JS, JMU, rho):
        m, k = JS.shape
        gj = np.empty(k)
        for r in range(m):
            for j in range(k):
                gj[j] = 0.0
            for p in range(g_ptr[r], g_ptr[r + 1]):
                c = g_idx[p]
                v = g_val[p]
                for j in range(k):
                    gj[j] += v * JY[c, j]
            on = mask[r]
            for j in range(k):
                js = -(JMU[r, j] + rho * gj[j]) / rho if on else 0.0
                JS[r, j] = js
                JMU[r, j] += rho * (gj[j] + js)

    @njit(cache=True)
    def _nb_adjoint_ytot(gt_ptr, gt_idx, gt_val, YBAR, SBAR, MUBAR, mask, rho, out):
        # out = ybar + G^T (rho mubar - D (sbar + rho mubar))
        n, B = YBAR.shape
        for r in range(n):
            for b in range(B):
                out[r, b] = YBAR[r, b]
            for p in range(gt_ptr[r], gt_ptr[r + 1]):
                c = gt_idx[p]
                v = gt_val[p]
                for b in range(B):
                    w = rho * MUBAR[c, b]
                    if mask[c, b]:
                        w -= SBAR[c, b] + rho * MUBAR[c, b]
                    out[r, b] += v * w

    @njit(cache=True)
    def _nb_adjoint_update(g_ptr, g_idx, g_val, Z, mask, SBAR, MUBAR, rho):
        m, B = SBAR.shape
        gz = np.empty(B)
        for r in range(m):
            for b in range(B):
                gz[b] = 0.0
            for p in range(g_ptr[r], g_ptr[r + 1]):
                c = g_idx[p]
                v = g_val[p]
                for b in range(B):
                    gz[b] += v * Z[c, b]
            for b in range(B):
                st = SBAR[r, b] + rho * MUBAR[r, b]
                mu = MUBAR[r, b] + gz[b]
                if mask[r, b]:
                    mu -= st / rho
                MUBAR[r, b] = mu
                SBAR[r, b] = rho * gz[b]


# ---------------------------------------------------------------------------
# backend binding
# ---------------------------------------------------------------------------


def _csr(mat) -> sp.csr_matrix:
    out = sp.csr_matrix(mat, dtype=np.float64)
    out.sum_duplicates()
    out.sort_indices()
    return out


class SparseOps:
    """Fused ADMM sweep kernels bound to one ``(G, P)`` topology.

    ``G`` is the stacked constraint matrix (m x n) and ``P`` the quadratic
    cost (n x n).  Methods mutate their state arguments in place where noted.
    """

    def __init__(self, G, P, backend: str | None = None):
        self.backend = backend or default_backend()
        if self.backend not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "numba" and not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        self.G = _csr(G)
        self.Gt = _csr(self.G.T)
        self.P = _csr(P)
        self.m, self.n = self.G.shape

    def _g(self):
        return self.G.indptr, self.G.indices, self.G.data

    def _gt(self):
        return self.Gt.indptr, self.Gt.indices, self.Gt.data

    def primal_rhs(self, Q, S, H, MU, rho):
        """Right-hand side ``-(Q + G^T(rho (S - H) + MU))`` of the primal solve."""
        if self.backend == "numba":
            out = np.empty(Q.shape)
            _nb_primal_rhs(*self._gt(), Q, S, H, MU, float(rho), out)
            return out
        return -(Q + self.Gt @ (rho * (S - H) + MU))

    def slack_dual(self, Y, H, S, MU, rho, mask):
        """ReLU slack update then dual ascent, in place on ``S``, ``MU``, ``mask``."""
        if self.backend == "numba":
            _nb_slack_dual(*self._g(), Y, H, S, MU, float(rho), mask)
            return
        resid = self.G @ Y - H
        np.maximum(-MU / rho - resid, 0.0, out=S)
        np.greater(S, 0.0, out=mask)
        MU += rho * (resid + S)

    def objective(self, Q, Y):
        """Per-column ``0.5 y'Py + q'y``."""
        if self.backend == "numba":
            out = np.empty(Y.shape[1])
            _nb_objective(self.P.indptr, self.P.indices, self.P.data, Q, Y, out)
            return out
        return np.einsum("ij,ij->j", Y, 0.5 * (self.P @ Y) + Q)

    def jac_slack_dual(self, JY, mask, JS, JMU, rho):
        """Forward-mode slack/dual Jacobian update for one sample (``mask`` is 1-D)."""
        if self.backend == "numba":
            _nb_jac_slack_dual(*self._g(), JY, mask, JS, JMU, float(rho))
            return
        gj = self.G @ JY
        JS[...] = np.where(mask[:, None], -(JMU + rho * gj) / rho, 0.0)
        JMU += rho * (gj + JS)

    def adjoint_ytot(self, YBAR, SBAR, MUBAR, mask, rho):
        if self.backend == "numba":
            out = np.empty(YBAR.shape)
            _nb_adjoint_ytot(*self._gt(), YBAR, SBAR, MUBAR, mask, float(rho), out)
            return out
        w = rho * MUBAR - np.where(mask, SBAR + rho * MUBAR, 0.0)
        return YBAR + self.Gt @ w

    def adjoint_update(self, Z, mask, SBAR, MUBAR, rho):
        if self.backend == "numba":
            _nb_adjoint_update(*self._g(), Z, mask, SBAR, MUBAR, float(rho))
            return
        gz = self.G @ Z
        st = SBAR + rho * MUBAR
        MUBAR[...] = MUBAR + gz - np.where(mask, st / rho, 0.0)
        SBAR[...] = rho * gz
