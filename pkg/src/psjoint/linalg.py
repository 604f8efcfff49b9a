"""Sparse symmetric factorizations and conditioning on linear constraints."""

import logging

import numpy as np
import scipy.linalg
from scipy import sparse

from .exceptions import FactorizationError

log = logging.getLogger(__name__)

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    from sksparse.cholmod import cholesky as cholmod_cholesky

    HAS_CHOLMOD = True
except ImportError:  # pragma: no cover - depends on the environment
    HAS_CHOLMOD = False


class Factor:
    """Cholesky factor of a sparse SPD matrix.

    CHOLMOD with approximate minimum degree ordering is used when scikit-sparse is
    installed; otherwise the matrix is factorized densely with scipy, which is only
    practical for a few thousand latent dimensions.
    """

    def __init__(self, Q, theta=None):
        Q = sparse.csc_matrix(Q)
        self.n = Q.shape[0]
        self.sparse = HAS_CHOLMOD
        if self.n == 0:
            self._L = np.zeros((0, 0))
            self.sparse = False
            return
        if HAS_CHOLMOD:
            try:
                self._factor = cholmod_cholesky(Q, ordering_method="amd")
            except CholmodNotPositiveDefiniteError as err:
                raise FactorizationError(f"matrix not positive definite at theta={theta}: {err}", theta=theta) from err
        else:
            try:
                self._L = scipy.linalg.cholesky(Q.toarray(), lower=True)
            except np.linalg.LinAlgError as err:
                raise FactorizationError(f"matrix not positive definite at theta={theta}: {err}", theta=theta) from err

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        if self.sparse:
            return np.asarray(self._factor(b))
        return scipy.linalg.cho_solve((self._L, True), b)

    def logdet(self):
        if self.sparse:
            return float(self._factor.logdet())
        return float(2.0 * np.log(np.diag(self._L)).sum())

    def whiten(self, z):
        """Map standard normal ``z`` to draws with precision Q (returns P' L^-T z)."""
        z = np.asarray(z, dtype=float)
        if self.n == 0:
            return z.copy()
        if self.sparse:
            return np.asarray(self._factor.apply_Pt(self._factor.solve_Lt(z, use_LDLt_decomposition=False)))
        return scipy.linalg.solve_triangular(self._L.T, z, lower=False)


class Conditioner:
    """Conditioning by kriging on C x = 0 for a Gaussian with precision Q."""

    def __init__(self, factor, C):
        self.C = sparse.csr_matrix(C)
        self.k = self.C.shape[0]
        if self.k == 0:
            return
        self.V = factor.solve(self.C.T.toarray())
        W = self.C @ self.V
        W = 0.5 * (W + W.T)
        try:
            self._W = scipy.linalg.cho_factor(W, lower=True)
        except np.linalg.LinAlgError as err:
            raise FactorizationError(f"constraints are linearly dependent: {err}") from err

    def correct(self, x):
        """Return x - Q^-1 C' (C Q^-1 C')^-1 C x, column-wise for 2-D input."""
        if self.k == 0:
            return np.array(x, dtype=float, copy=True)
        x = np.asarray(x, dtype=float)
        return x - self.V @ scipy.linalg.cho_solve(self._W, self.C @ x)

    def logdet(self):
        """log det(C Q^-1 C')."""
        if self.k == 0:
            return 0.0
        return float(2.0 * np.log(np.diag(self._W[0])).sum())

    def covariance_correction(self, rows):
        """Subtract from Q^-1[rows, rows] to obtain the constrained covariance."""
        if self.k == 0:
            return np.zeros((len(rows), len(rows)))
        Vr = self.V[rows]
        return Vr @ scipy.linalg.cho_solve(self._W, Vr.T)
