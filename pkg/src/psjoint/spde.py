"""SPDE representation of Matern fields with smoothness nu = 1 on a triangulation."""

from dataclasses import dataclass
from functools import cached_property
import math

import numpy as np
from scipy import sparse, special

from .exceptions import FemAssemblyError, ParameterError

SQRT8 = math.sqrt(8.0)
SQRT4PI = math.sqrt(4.0 * math.pi)


@dataclass(frozen=True)
class FemMatrices:
    """Mass-lumped FEM matrices of a mesh: ``C`` diagonal, ``G`` stiffness."""

    C: sparse.csr_matrix
    G: sparse.csr_matrix
    mesh: object = None

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def c_diag(self):
        return self.C.diagonal()

    @property
    def area(self):
        return float(self.c_diag.sum())

    @cached_property
    def G2(self):
        """G C^-1 G, the fourth-order term of the alpha = 2 operator."""
        c_inv = sparse.diags(1.0 / self.c_diag)
        return (self.G @ c_inv @ self.G).tocsr()


def fem_matrices(mesh):
    p = mesh.vertices[mesh.triangles]
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = 0.5 * (e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
    scale = max(np.ptp(mesh.vertices, axis=0).max(), 1e-300) ** 2
    degenerate = np.flatnonzero(area <= 1e-14 * scale)
    if len(degenerate):
        t = int(degenerate[0])
        raise FemAssemblyError(f"degenerate triangle {t} with vertices {mesh.triangles[t].tolist()} (area {area[t]:.3g})")

    local = np.einsum("mad,mbd->mab", e, e) / (4.0 * area)[:, None, None]
    tri = mesh.triangles
    rows = tri[:, [0, 0, 0, 1, 1, 1, 2, 2, 2]].ravel()
    cols = tri[:, [0, 1, 2, 0, 1, 2, 0, 1, 2]].ravel()
    n = mesh.n_vertices
    G = sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    c = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    if np.any(c <= 0):
        raise FemAssemblyError(f"{int((c <= 0).sum())} vertices belong to no triangle")
    return FemMatrices(C=sparse.diags(c).tocsr(), G=G, mesh=mesh)


@dataclass(frozen=True)
class MaternParams:
    """Matern field parameters; ``range`` is where the correlation drops to about 0.13."""

    range: float
    sd: float

    def __post_init__(self):
        for name in ("range", "sd"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"Matern {name} must be positive and finite, got {value}")

    @property
    def kappa(self):
        return SQRT8 / self.range

    @property
    def tau(self):
        return 1.0 / (SQRT4PI * self.kappa * self.sd)

    @classmethod
    def from_kappa_tau(cls, kappa, tau):
        if not (np.isfinite(kappa) and np.isfinite(tau)) or kappa <= 0 or tau <= 0:
            raise ParameterError(f"kappa and tau must be positive, got {kappa}, {tau}")
        return cls(range=SQRT8 / kappa, sd=1.0 / (SQRT4PI * kappa * tau))


def matern_precision(fem, params, tau=None):
    """Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G); ``tau`` overrides the value implied by ``params``."""
    kappa = params.kappa
    tau = params.tau if tau is None else tau
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    K = kappa**4 * fem.C + 2.0 * kappa**2 * fem.G + fem.G2
    return (tau**2 * K).tocsr()


def matern_correlation(distance, range_):
    """Closed-form nu = 1 Matern correlation (kappa h) K_1(kappa h)."""
    x = SQRT8 / range_ * np.asarray(distance, dtype=float)
    with np.errstate(invalid="ignore"):
        corr = x * special.kv(1, x)
    return np.where(x == 0, 1.0, corr)


def matern_covariance(distance, range_, sd):
    return sd**2 * matern_correlation(distance, range_)


def pc_rates(range0, alpha_r, sd0, alpha_s):
    if not (0 < alpha_r < 1 and 0 < alpha_s < 1):
        raise ParameterError(f"tail probabilities must lie in (0, 1), got {alpha_r}, {alpha_s}")
    if range0 <= 0 or sd0 <= 0:
        raise ParameterError(f"range0 and sd0 must be positive, got {range0}, {sd0}")
    return -math.log(alpha_r) * range0, -math.log(alpha_s) / sd0


def pc_prior_logdensity(params, range0, alpha_r, sd0, alpha_s):
    """Joint PC prior with P(range < range0) = alpha_r and P(sd > sd0) = alpha_s."""
    lam_r, lam_s = pc_rates(range0, alpha_r, sd0, alpha_s)
    return (
        math.log(lam_r)
        + math.log(lam_s)
        - 2.0 * math.log(params.range)
        - lam_r / params.range
        - lam_s * params.sd
    )
