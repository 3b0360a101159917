"""Per-line run-off model: Tweedie double GLM with lag-correlated innovations.

Each observed loss ratio Y_{i,j} (accident semester i, development lag j) is
Tweedie with log-linear mean ``mu_{i,j} = exp(iota + alpha_i + delta_j)`` and
log-linear dispersion ``phi_j = exp(iota_d + gamma_j)``; scaled innovations
``(Y - mu)/sqrt(phi mu^p)`` follow an AR(1) across lags within a semester with
coefficient rho.  Estimation alternates three steps until the parameters
settle: a moment update of rho, one damped Fisher-scoring step on the mean
GEE, and one leverage-adjusted REML step on the dispersion regression.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize

from . import tweedie
from .exceptions import (
    AccuracyError,
    DegenerateDispersionError,
    DomainError,
    FitError,
    NonConvergenceError,
    SingularModelError,
)
from .triangles import LossTriangle, TriangleIndex

logger = logging.getLogger(__name__)

RHO_CLIP = 0.999
# Linear predictors are clamped before exponentiation so that all-zero lags
# (eta -> -inf under the log link) cannot overflow or produce mu = 0.
ETA_MIN = -30.0
ETA_MAX = 10.0
# Dispersion lag effects are bounded: a lag whose few cells happen to sit
# close to the fitted surface can otherwise drift into a self-reinforcing
# collapse (smaller phi -> larger GEE weight -> closer interpolation ->
# smaller deviance).  Realistic fits stay well inside the bound; a fit that
# reaches it is flagged in the diagnostics.
GAMMA_BOUND = 10.0
# Cells whose mean-model leverage is 1 by design (leverage 1 is a rank
# property of the design rows, independent of the weighting) carry no
# dispersion information: the REML weight (1 - h)/2 vanishes and d/(1 - h)
# is 0/0.  They are excluded from the dispersion regression.  For included
# cells the ratio d/(1 - h) must stay exact: when a lag's phi shrinks, its
# deviances and 1 - h both scale like phi, and only their uncapped ratio
# keeps the working response anchored at a finite dispersion level.  The
# floor below guards purely against roundoff.
LEVERAGE_TOL = 1e-8
ONE_MINUS_H_FLOOR = 1e-12

DEFAULT_P_GRID_STEP = 0.005


def default_p_grid():
    """The power-parameter search grid {1.105, 1.110, ..., 1.900}."""
    n = int(round((tweedie.P_MAX - tweedie.P_MIN) / DEFAULT_P_GRID_STEP))
    return np.round(tweedie.P_MIN + DEFAULT_P_GRID_STEP * np.arange(n + 1), 10)


@lru_cache(maxsize=32)
def _design(index):
    """Design matrices and cell bookkeeping for one triangle shape.

    Returns (X, Z, sem, lag, blocks): X is n x q with columns
    [1, alpha_2..alpha_I, delta_2..delta_J]; Z is n x J with columns
    [1, gamma_2..gamma_J]; sem/lag are 0-based accident-semester and lag
    indices per row; blocks[i] is the row slice of accident semester i+1.
    Rows follow row-major upper-triangle order.
    """
    I, J = index.I, index.J
    cells = index.upper_cells()
    n = len(cells)
    q = 2 * J - 1
    X = np.zeros((n, q))
    Z = np.zeros((n, J))
    sem = np.empty(n, dtype=np.intp)
    lag = np.empty(n, dtype=np.intp)
    for r, (i, j) in enumerate(cells):
        sem[r] = i - 1
        lag[r] = j - 1
        X[r, 0] = 1.0
        if i > 1:
            X[r, i - 1] = 1.0
        if j > 1:
            X[r, I - 1 + j - 1] = 1.0
        Z[r, 0] = 1.0
        if j > 1:
            Z[r, j - 1] = 1.0
    blocks = []
    start = 0
    for i in range(1, I + 1):
        width = index.n_observed(i)
        blocks.append(slice(start, start + width))
        start += width
    return X, Z, sem, lag, tuple(blocks)


@lru_cache(maxsize=32)
def _structural_saturation(index):
    """Cells whose mean-model leverage is 1 for every weighting.

    A row of X has leverage 1 exactly when it is not in the span of the
    other rows, which does not depend on the weights, so the unweighted hat
    matrix identifies the saturated cells once per triangle shape.  On a
    square triangle these are the corners (1, J) and (I, 1), whose effects
    delta_J and alpha_I each load a single observed cell.
    """
    X = _design(index)[0]
    h0 = np.einsum("ij,ji->i", X, np.linalg.pinv(X))
    return h0 >= 1.0 - LEVERAGE_TOL


def _ar1_inverse(rho, n):
    """Closed-form inverse of the AR(1) correlation matrix of size n."""
    if n == 1:
        return np.array([[1.0]])
    inv = np.zeros((n, n))
    scale = 1.0 / (1.0 - rho * rho)
    idx = np.arange(n)
    inv[idx, idx] = (1.0 + rho * rho) * scale
    inv[0, 0] = inv[n - 1, n - 1] = scale
    off = -rho * scale
    inv[idx[:-1], idx[:-1] + 1] = off
    inv[idx[:-1] + 1, idx[:-1]] = off
    return inv


@dataclass(frozen=True)
class MeanParams:
    """Log-linear mean structure: intercept plus semester and lag effects."""

    iota: float
    alpha: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, float))
        object.__setattr__(self, "delta", np.asarray(self.delta, float))
        if self.alpha[0] != 0.0 or self.delta[0] != 0.0:
            raise DomainError("identifiability requires alpha[1] = delta[1] = 0")

    @property
    def I(self):
        return self.alpha.shape[0]

    @property
    def J(self):
        return self.delta.shape[0]

    def as_vector(self):
        """Pack as [iota, alpha_2.., delta_2..] matching the design columns."""
        return np.concatenate(([self.iota], self.alpha[1:], self.delta[1:]))

    @classmethod
    def from_vector(cls, beta, I, J):
        alpha = np.zeros(I)
        delta = np.zeros(J)
        alpha[1:] = beta[1:I]
        delta[1:] = beta[I : I + J - 1]
        return cls(float(beta[0]), alpha, delta)

    def eta_matrix(self):
        """Linear predictors over the full I x J grid (clamped)."""
        eta = self.iota + self.alpha[:, None] + self.delta[None, :]
        return np.clip(eta, ETA_MIN, ETA_MAX)

    def mu_matrix(self):
        """Fitted means over the full I x J grid, lower triangle included."""
        return np.exp(self.eta_matrix())


@dataclass(frozen=True)
class DispersionParams:
    """Log-linear dispersion structure: intercept plus lag effects.

    ``tied_lags`` lists 1-based lags whose effect could not be estimated
    (every cell at that lag is saturated by the mean model) and was tied to
    the nearest earlier estimable lag.
    """

    iota_d: float
    gamma: np.ndarray
    tied_lags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, float))
        if self.gamma[0] != 0.0:
            raise DomainError("identifiability requires gamma[1] = 0")

    @property
    def J(self):
        return self.gamma.shape[0]

    def phi_vector(self):
        """Dispersion phi_j = exp(iota_d + gamma_j) by development lag."""
        return np.exp(self.iota_d + self.gamma)


@dataclass(frozen=True)
class MarginalModel:
    """Fitted per-line model: mean, dispersion, lag correlation and power."""

    mean: MeanParams
    dispersion: DispersionParams
    rho: float
    p: float
    line_id: str = ""
    region: str = ""
    coverage: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise DomainError("lag correlation must satisfy |rho| < 1")
        object.__setattr__(self, "p", tweedie._validate_p(self.p))
        if self.mean.J != self.dispersion.J:
            raise DomainError("mean and dispersion lag dimensions differ")

    @property
    def index(self):
        return TriangleIndex(self.mean.I, self.mean.J)

    def mu(self, i, j):
        """Fitted mean loss ratio of cell (i, j), 1-based."""
        return float(self.mean.mu_matrix()[i - 1, j - 1])

    def mu_matrix(self):
        return self.mean.mu_matrix()

    def phi(self, j):
        """Fitted dispersion at development lag j, 1-based."""
        return float(self.dispersion.phi_vector()[j - 1])

    def phi_vector(self):
        return self.dispersion.phi_vector()

    def cell_params(self, i, j):
        """Tweedie parameters of cell (i, j)."""
        return tweedie.TweedieParams(self.mu(i, j), self.phi(j), self.p)

    def scaled_innovations(self, triangle):
        """Scaled innovations (Y - mu)/sqrt(phi mu^p) over the upper triangle.

        Returns an I x J array with NaN on unobserved (lower-triangle) cells.
        """
        index = triangle.index
        if index != self.index:
            raise DomainError("triangle shape does not match the fitted model")
        mu = self.mu_matrix()
        phi = self.phi_vector()
        out = np.full((index.I, index.J), np.nan)
        for (i, j) in index.upper_cells():
            sd = np.sqrt(phi[j - 1] * mu[i - 1, j - 1] ** self.p)
            out[i - 1, j - 1] = (triangle.ratios[(i, j)] - mu[i - 1, j - 1]) / sd
        return out

    def log_pseudo_likelihood(self, triangle):
        """Independence Tweedie log likelihood of the observed ratios."""
        index = triangle.index
        y = triangle.ratio_vector()
        _, _, sem, lag, _ = _design(index)
        mu = self.mu_matrix()[sem, lag]
        phi = self.phi_vector()[lag]
        return float(np.sum(tweedie.log_density_multi(y, mu, phi, self.p)))

    def log_joint_pseudo_likelihood(self, triangle):
        """Independence log likelihood plus a Gaussian lag-correlation term.

        Adds, for each accident semester, the log density ratio of an AR(1)
        Gaussian vector to an independent one evaluated at the scaled
        innovations: -0.5 log det R - 0.5 u'(R^-1 - I)u.  At rho = 0 the
        adjustment vanishes, so the score extends the independence
        likelihood continuously.  Used to rank candidate fits that converged
        from different lag-correlation starting points.
        """
        total = self.log_pseudo_likelihood(triangle)
        rho = self.rho
        if rho == 0.0:
            return total
        index = triangle.index
        innov = self.scaled_innovations(triangle)
        one_m = 1.0 - rho * rho
        for i in range(1, index.I + 1):
            n_i = index.n_observed(i)
            if n_i < 2:
                continue
            u = innov[i - 1, :n_i]
            rinv = _ar1_inverse(rho, n_i)
            # det R_n = (1 - rho^2)^(n-1) for the AR(1) correlation matrix.
            total += -0.5 * (n_i - 1) * np.log(one_m)
            total += -0.5 * float(u @ rinv @ u - u @ u)
        return float(total)

    def to_dict(self):
        d = {
            "line_id": self.line_id,
            "region": self.region,
            "coverage": self.coverage,
            "index_p": self.p,
            "lag_correlation_rho": self.rho,
            "mean": {
                "intercept": self.mean.iota,
                "accident_semester_effects": self.mean.alpha.tolist(),
                "development_lag_effects": self.mean.delta.tolist(),
            },
            "dispersion": {
                "intercept": self.dispersion.iota_d,
                "development_lag_effects": self.dispersion.gamma.tolist(),
            },
        }
        if self.dispersion.tied_lags:
            d["dispersion"]["tied_lags"] = list(self.dispersion.tied_lags)
        if self.diagnostics:
            d["fit"] = dict(self.diagnostics)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            mean = MeanParams(
                float(d["mean"]["intercept"]),
                d["mean"]["accident_semester_effects"],
                d["mean"]["development_lag_effects"],
            )
            dispersion = DispersionParams(
                float(d["dispersion"]["intercept"]),
                d["dispersion"]["development_lag_effects"],
                tuple(d["dispersion"].get("tied_lags", ())),
            )
            return cls(
                mean=mean,
                dispersion=dispersion,
                rho=float(d["lag_correlation_rho"]),
                p=float(d["index_p"]),
                line_id=str(d.get("line_id", "")),
                region=str(d.get("region", "")),
                coverage=str(d.get("coverage", "")),
                diagnostics=dict(d.get("fit", {})),
            )
        except KeyError as exc:
            raise DomainError("model document missing field %s" % exc) from exc

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def update_rho(model, triangle):
    """Moment estimate of the lag-1 innovation correlation.

    Ratio of sum(Y~_{i,j} Y~_{i,j-1}) over sum(Y~_{i,j-1}^2) across accident
    semesters i = 1..I-1 and observed lags j = 2..n_i, clipped to
    [-0.999, 0.999].
    """
    innov = model.scaled_innovations(triangle)
    index = triangle.index
    num = 0.0
    den = 0.0
    for i in range(1, index.I):
        n_i = index.n_observed(i)
        row = innov[i - 1, :n_i]
        num += float(np.dot(row[1:], row[:-1]))
        den += float(np.dot(row[:-1], row[:-1]))
    if den == 0.0:
        raise FitError(
            "lag correlation undefined: all scaled innovations at earlier lags are zero"
        )
    return float(np.clip(num / den, -RHO_CLIP, RHO_CLIP))


def qic(model, triangle):
    """Quasi-likelihood information criterion of the fitted working correlation.

    -2 Q + 2 trace(Omega V_r): Q is the independence Tweedie quasi likelihood
    at the fitted parameters, Omega the independence model information and
    V_r the sandwich covariance of the mean parameters under the fitted
    lag correlation.  Smaller is better; the trace term grows when the
    working correlation disagrees with the empirical residual covariance,
    which penalises fits that absorbed lag correlation into cell-level
    parameters.  Used to rank converged candidates from different
    lag-correlation starting points.
    """
    index = triangle.index
    if index != model.index:
        raise DomainError("triangle shape does not match the fitted model")
    X, _, sem, lag, blocks = _design(index)
    y = triangle.ratio_vector()
    mu = model.mu_matrix()[sem, lag]
    phi_cell = model.phi_vector()[lag]
    a = phi_cell * mu ** model.p
    sqrt_a = np.sqrt(a)
    D = X * mu[:, None]
    q = X.shape[1]
    info = np.zeros((q, q))
    meat = np.zeros((q, q))
    indep_info = np.zeros((q, q))
    rinv_cache = {}
    for sl in blocks:
        n_i = sl.stop - sl.start
        rinv = rinv_cache.get(n_i)
        if rinv is None:
            rinv = _ar1_inverse(model.rho, n_i)
            rinv_cache[n_i] = rinv
        Ds = D[sl] / sqrt_a[sl, None]
        r = (y[sl] - mu[sl]) / sqrt_a[sl]
        G = Ds.T @ rinv
        info += G @ Ds
        gr = G @ r
        meat += np.outer(gr, gr)
        indep_info += Ds.T @ Ds
    try:
        t1 = np.linalg.solve(info, meat)
        sandwich = np.linalg.solve(info, t1.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularModelError(
            "correlation criterion: GEE working information matrix is singular"
        ) from exc
    cic = float(np.trace(indep_info @ sandwich))
    qlik = -0.5 * float(np.sum(tweedie.unit_deviance(y, mu, model.p) / phi_cell))
    return -2.0 * qlik + 2.0 * cic


def _mu_cells(beta, X):
    return np.exp(np.clip(X @ beta, ETA_MIN, ETA_MAX))


def _gee_score_info(beta, y, X, lag, blocks, phi_by_lag, rho, p, want_info):
    """GEE score (and optionally Fisher information) at beta."""
    mu = _mu_cells(beta, X)
    a = phi_by_lag[lag] * mu ** p
    sqrt_a = np.sqrt(a)
    u = mu / sqrt_a
    r = (y - mu) / sqrt_a
    q = X.shape[1]
    score = np.zeros(q)
    info = np.zeros((q, q)) if want_info else None
    rinv_cache = {}
    for blk in blocks:
        n_i = blk.stop - blk.start
        rinv = rinv_cache.get(n_i)
        if rinv is None:
            rinv = _ar1_inverse(rho, n_i)
            rinv_cache[n_i] = rinv
        Xu = X[blk] * u[blk][:, None]
        score += Xu.T @ (rinv @ r[blk])
        if want_info:
            info += Xu.T @ rinv @ Xu
    return score, info


def gee_step(model, triangle):
    """One damped Fisher-scoring update of the mean parameters.

    Solves the estimating equation sum_i D_i^T V_i^{-1} (Y_i - mu_i) = 0 with
    V_i = A_i^{1/2} R_{n_i}(rho) A_i^{1/2}, A_i = diag(phi_j mu^p) and
    D_i = diag(mu_i) X_i; the step is halved until the score norm decreases.
    """
    if not abs(model.rho) < 1.0:
        raise DomainError(
            "working correlation not positive definite: |rho| >= 1"
        )
    index = triangle.index
    X, _, _, lag, blocks = _design(index)
    y = triangle.ratio_vector()
    phi_by_lag = model.phi_vector()
    rho, p = model.rho, model.p
    beta = model.mean.as_vector()

    score, info = _gee_score_info(beta, y, X, lag, blocks, phi_by_lag, rho, p, True)
    norm0 = float(np.linalg.norm(score))
    if norm0 < 1e-13:
        return model.mean
    try:
        step = np.linalg.solve(info, score)
    except np.linalg.LinAlgError as exc:
        raise SingularModelError(
            "mean step: GEE working information matrix is singular"
        ) from exc

    lam = 1.0
    for _ in range(40):
        cand = beta + lam * step
        norm1 = float(
            np.linalg.norm(
                _gee_score_info(cand, y, X, lag, blocks, phi_by_lag, rho, p, False)[0]
            )
        )
        if norm1 < norm0:
            return MeanParams.from_vector(cand, index.I, index.J)
        if lam * float(np.max(np.abs(step))) < 1e-14:
            # At the fixed point the score norm is dominated by roundoff;
            # a vanishing step cannot improve it, so keep the current beta.
            return model.mean
        lam /= 2.0
    raise NonConvergenceError(
        "mean step: damped Fisher scoring could not reduce the GEE score norm",
        last_change=float(np.max(np.abs(step))),
    )


def _leverages(mu, X, lag, phi_by_lag, p):
    """Leverages of the weighted mean-model projection, all cells."""
    w = mu ** (2.0 - p) / phi_by_lag[lag]
    Xw = X * np.sqrt(w)[:, None]
    S = Xw.T @ Xw
    try:
        T = np.linalg.solve(S, Xw.T)
    except np.linalg.LinAlgError as exc:
        raise SingularModelError(
            "dispersion step: X^T W X is singular"
        ) from exc
    h = np.einsum("ij,ji->i", Xw, T)
    return np.clip(h, 0.0, 1.0 - ONE_MINUS_H_FLOOR)


def _box_constrained_wls(G, wd, z, bound):
    """Weighted least squares with |coef| <= bound on all but the intercept.

    Active-set iteration: solve unconstrained on the free coordinates, pin
    violators at the bound and re-solve with their contribution as an
    offset.  Pinning is monotone, so the loop ends after at most one pass
    per column.
    """
    k = G.shape[1]
    free = np.ones(k, bool)
    pinned = np.zeros(k)
    for _ in range(k):
        offset = G[:, ~free] @ pinned[~free] if not free.all() else 0.0
        Gf = G[:, free]
        Gfw = Gf * wd[:, None]
        try:
            sol_f = np.linalg.solve(Gfw.T @ Gf, Gfw.T @ (z - offset))
        except np.linalg.LinAlgError as exc:
            raise SingularModelError(
                "dispersion step: weighted lag regression is singular"
            ) from exc
        sol = pinned.copy()
        sol[free] = sol_f
        viol = free & (np.abs(sol) > bound)
        viol[0] = False
        if not viol.any():
            return sol
        pinned[viol] = np.sign(sol[viol]) * bound
        free &= ~viol
    return pinned


def reml_dispersion_step(model, triangle, bound=None):
    """One REML update of the dispersion parameters.

    Regresses leverage-adjusted unit deviances d/(1-h) on the lag design with
    weights (1-h)/2 and working response (d* - phi)/phi + log phi.  Cells that
    are saturated by the mean model (leverage 1 by design, e.g. the corners of
    a square triangle) carry no dispersion information and are excluded.  A
    lag whose every cell is saturated has its effect tied to the nearest
    earlier estimable lag and is reported in ``tied_lags``.

    ``bound``, when given, solves the lag regression subject to
    |gamma_j| <= bound (the intercept stays free) so that a lag whose few
    cells sit arbitrarily close to the fitted mean cannot drive its
    dispersion to zero.
    """
    index = triangle.index
    X, Z, sem, lag, _ = _design(index)
    y = triangle.ratio_vector()
    mu = model.mu_matrix()[sem, lag]
    phi_by_lag = model.phi_vector()
    p = model.p

    surv = ~_structural_saturation(index)
    if not np.any(surv):
        i, j = index.upper_cells()[0]
        raise DegenerateDispersionError(
            "saturated dispersion cell at accident semester %d, development lag %d: "
            "mean-model leverage is 1 on every cell, leaving no dispersion "
            "information" % (i, j)
        )

    h = _leverages(mu, X, lag, phi_by_lag, p)
    d = tweedie.unit_deviance(y, mu, p)
    phi_cell = phi_by_lag[lag]
    d_star = d[surv] / (1.0 - h[surv])
    phi_s = phi_cell[surv]
    z = (d_star - phi_s) / phi_s + np.log(phi_s)
    wd = (1.0 - h[surv]) / 2.0

    Zs = Z[surv]
    J = index.J
    supported = Zs.sum(axis=0) > 0.0
    cols = np.flatnonzero(supported)
    G = Zs[:, cols]
    if bound is None:
        Gw = G * wd[:, None]
        try:
            sol = np.linalg.solve(Gw.T @ G, Gw.T @ z)
        except np.linalg.LinAlgError as exc:
            raise SingularModelError(
                "dispersion step: weighted lag regression is singular"
            ) from exc
    else:
        sol = _box_constrained_wls(G, wd, z, float(bound))

    iota_d = float(sol[cols.tolist().index(0)])
    gamma = np.zeros(J)
    for k, c in enumerate(cols):
        if c > 0:
            gamma[c] = sol[k]
    tied = []
    for j in range(1, J):
        if not supported[j]:
            gamma[j] = gamma[j - 1]
            tied.append(j + 1)
    return DispersionParams(iota_d, gamma, tuple(tied))


@dataclass(frozen=True)
class FitOptions:
    """Solver controls for :func:`fit`."""

    rho_fixed: float = None
    max_iter: int = 200
    tol: float = 1e-8
    warm_start_iter: int = 8
    # Inner REML passes per outer iteration and the largest move allowed in
    # log dispersion per pass.  The dispersion update linearizes around the
    # current phi, so large traversals need several damped passes; the fixed
    # point is unchanged (at it, one pass moves nothing).
    dispersion_inner_iter: int = 5
    dispersion_step_clip: float = 3.0
    # Free-rho fits alternate from several lag-correlation starting points.
    # On short triangles the alternation admits more than one stable point,
    # and paths started near zero settle below the others; converged
    # candidates are therefore ranked by the correlation information
    # criterion (see :func:`qic`).  Each start first alternates mean and
    # dispersion with rho held (up to ``rho_burn_iter`` iterations) so that
    # the released path begins from a state consistent with its starting
    # correlation.
    rho_starts: tuple = (0.0, 0.45, 0.75, -0.45, -0.75)
    rho_burn_iter: int = 60


def _moment_dispersion_init(y, mu, p, q):
    """Pearson moment estimate of a common dispersion level."""
    r2 = (y - mu) ** 2 / mu ** p
    dof = max(len(y) - q, 1)
    return float(np.log(max(float(np.sum(r2)) / dof, 1e-12)))


def _damped_dispersion_update(model, triangle, opts):
    """Inner REML passes with a trust region on the log-dispersion move."""
    clip = opts.dispersion_step_clip
    dispersion = model.dispersion
    for _ in range(max(opts.dispersion_inner_iter, 1)):
        proposal = reml_dispersion_step(
            replace(model, dispersion=dispersion), triangle, bound=GAMMA_BOUND
        )
        new_iota = dispersion.iota_d + float(
            np.clip(proposal.iota_d - dispersion.iota_d, -clip, clip)
        )
        new_gamma = dispersion.gamma + np.clip(
            proposal.gamma - dispersion.gamma, -clip, clip
        )
        new_gamma = np.clip(new_gamma, -GAMMA_BOUND, GAMMA_BOUND)
        moved = max(
            abs(new_iota - dispersion.iota_d),
            float(np.max(np.abs(new_gamma - dispersion.gamma))),
        )
        dispersion = DispersionParams(new_iota, new_gamma, proposal.tied_lags)
        if moved < 1e-10:
            break
    return dispersion


def _pack(model):
    return np.concatenate(
        (
            model.mean.as_vector(),
            [model.dispersion.iota_d],
            model.dispersion.gamma[1:],
            [model.rho],
        )
    )


def _initial_model(triangle, p, opts):
    """Warm-started model at rho 0: GEE mean steps at phi 1, moment phi."""
    index = triangle.index
    y = triangle.ratio_vector()
    mean = MeanParams(
        float(np.log(max(float(np.mean(y)), 1e-12))),
        np.zeros(index.I),
        np.zeros(index.J),
    )
    model = MarginalModel(
        mean=mean,
        dispersion=DispersionParams(0.0, np.zeros(index.J)),
        rho=0.0,
        p=p,
        line_id=triangle.line_id,
        region=triangle.region,
        coverage=triangle.coverage,
    )
    for _ in range(opts.warm_start_iter):
        model = replace(model, mean=gee_step(model, triangle))
    X, _, sem, lag, _ = _design(index)
    mu0 = model.mean.mu_matrix()[sem, lag]
    iota_d0 = _moment_dispersion_init(y, mu0, p, X.shape[1])
    return replace(model, dispersion=DispersionParams(iota_d0, np.zeros(index.J)))


def _alternate(model, triangle, opts, rho_free):
    """Alternate rho, mean and dispersion updates until the change is small.

    Returns (model, converged, iterations, last_change, metric_increases);
    the last entry counts outer iterations past the fifth on which the
    max-change metric increased (a diagnostic, not an error).
    """
    change = np.inf
    increases = 0
    for it in range(1, opts.max_iter + 1):
        prev_change = change
        prev = _pack(model)
        if rho_free:
            model = replace(model, rho=update_rho(model, triangle))
        model = replace(model, mean=gee_step(model, triangle))
        model = replace(model, dispersion=_damped_dispersion_update(model, triangle, opts))
        change = float(np.max(np.abs(_pack(model) - prev)))
        if it > 5 and change > prev_change * (1.0 + 1e-12):
            increases += 1
        if change < opts.tol:
            return model, True, it, change, increases
    return model, False, opts.max_iter, change, increases


def _finalize(model, triangle, iterations, change, rho_start=None, criterion=None,
              metric_increases=None):
    """Attach convergence diagnostics to a fitted model."""
    try:
        loglik = model.log_pseudo_likelihood(triangle)
    except AccuracyError:
        # Extreme fitted dispersions can push the density series past its
        # term cap; the fit itself is still valid.
        loglik = None
    diagnostics = {
        "iterations": iterations,
        "converged": True,
        "final_change": change,
        "log_pseudo_likelihood": loglik,
    }
    if metric_increases is not None:
        diagnostics["metric_increases"] = int(metric_increases)
        if metric_increases:
            logger.info(
                "fit of line %r: convergence metric increased on %d outer "
                "iterations after the burn-in",
                triangle.line_id,
                metric_increases,
            )
    if criterion is not None and np.isfinite(criterion):
        diagnostics["correlation_criterion"] = float(criterion)
    if rho_start is not None:
        diagnostics["rho_start"] = float(rho_start)
    if model.dispersion.tied_lags:
        diagnostics["tied_dispersion_lags"] = list(model.dispersion.tied_lags)
    bounded = [
        j + 1
        for j in range(len(model.dispersion.gamma))
        if abs(float(model.dispersion.gamma[j])) >= GAMMA_BOUND - 1e-9
    ]
    if bounded:
        diagnostics["bounded_dispersion_lags"] = bounded
    return replace(model, diagnostics=diagnostics)


def fit(triangle, p, options=None):
    """Fit the double GLM with AR(1) innovations to one loss triangle.

    Alternates a moment update of rho, one GEE mean step and one REML
    dispersion step until the largest absolute parameter change drops below
    ``options.tol`` (default 1e-8), up to ``options.max_iter`` outer
    iterations.  ``options.rho_fixed`` pins the lag correlation (0 gives the
    independence fit).  With rho free, the alternation is run once per value
    in ``options.rho_starts`` and the converged candidate with the smallest
    quasi-likelihood information criterion is returned.
    """
    opts = options or FitOptions()
    p = tweedie._validate_p(p)
    y = triangle.ratio_vector()
    if float(np.max(y) - np.min(y)) <= 1e-14 * max(1.0, float(np.max(np.abs(y)))):
        raise DegenerateDispersionError(
            "constant triangle: all ratios equal, dispersion degenerates at zero"
        )
    init = _initial_model(triangle, p, opts)

    if opts.rho_fixed is not None:
        rho0 = float(np.clip(opts.rho_fixed, -RHO_CLIP, RHO_CLIP))
        model, converged, it, change, inc = _alternate(
            replace(init, rho=rho0), triangle, opts, rho_free=False
        )
        if not converged:
            raise NonConvergenceError(
                "fit of line %r did not converge after %d outer iterations "
                "(last max parameter change %.3e)"
                % (triangle.line_id, opts.max_iter, change),
                last_change=change,
                iterations=opts.max_iter,
                last_iterate=model,
            )
        return _finalize(model, triangle, it, change, metric_increases=inc)

    scored = []
    unscored = []
    first_error = None
    last_state = None
    for start in opts.rho_starts:
        s = float(np.clip(start, -RHO_CLIP, RHO_CLIP))
        model = replace(init, rho=s)
        try:
            if opts.rho_burn_iter > 0:
                burn_opts = replace(opts, max_iter=opts.rho_burn_iter)
                model, _, _, _, _ = _alternate(model, triangle, burn_opts, rho_free=False)
            model, converged, it, change, inc = _alternate(
                model, triangle, opts, rho_free=True
            )
        except FitError as exc:
            if first_error is None:
                first_error = exc
            continue
        last_state = (model, change)
        if not converged:
            continue
        try:
            score = qic(model, triangle)
        except SingularModelError:
            score = np.inf
        if not np.isfinite(score):
            unscored.append((s, model, it, change, inc))
            continue
        # A candidate whose fitted dispersion is so extreme that its own
        # density series is not computable cannot be simulated from; prefer
        # candidates that can evaluate themselves at the data.
        try:
            model.log_pseudo_likelihood(triangle)
            usable = True
        except AccuracyError:
            usable = False
        scored.append((not usable, score, s, model, it, change, inc))

    if scored:
        best = scored[0]
        for cand in scored[1:]:
            if cand[0] < best[0] or (cand[0] == best[0] and cand[1] < best[1] - 1e-9):
                best = cand
        _, score, s, model, it, change, inc = best
        return _finalize(model, triangle, it, change, rho_start=s, criterion=score,
                         metric_increases=inc)
    if unscored:
        s, model, it, change, inc = unscored[0]
        return _finalize(model, triangle, it, change, rho_start=s,
                         metric_increases=inc)
    if last_state is not None:
        model, change = last_state
        raise NonConvergenceError(
            "fit of line %r did not converge from any lag-correlation start "
            "after %d outer iterations (last max parameter change %.3e)"
            % (triangle.line_id, opts.max_iter, change),
            last_change=change,
            iterations=opts.max_iter,
            last_iterate=model,
        )
    raise first_error


def _profile_log_likelihood(triangle, p, options):
    """Max independence log likelihood over a constant dispersion, at power p.

    The mean structure is fitted by scoring steps with unit dispersion (a
    constant dispersion scales out of the mean normal equations), then the
    exact density log likelihood is maximized over the shared log dispersion.
    Powers whose density series is not computable anywhere on the search
    interval are reported as -inf.
    """
    index = triangle.index
    J = index.J
    model = MarginalModel(
        mean=MeanParams(0.0, np.zeros(J), np.zeros(J)),
        dispersion=DispersionParams(0.0, np.zeros(J)),
        rho=0.0,
        p=p,
    )
    for _ in range(options.max_iter):
        try:
            mean_new = gee_step(model, triangle)
        except NonConvergenceError:
            # An all-zero lag pins its effect at the linear-predictor clamp,
            # leaving a flat direction no damping can improve; the remaining
            # coordinates are already as converged as the data allows.
            break
        change = max(
            abs(mean_new.iota - model.mean.iota),
            float(np.max(np.abs(mean_new.alpha - model.mean.alpha))),
            float(np.max(np.abs(mean_new.delta - model.mean.delta))),
        )
        model = replace(model, mean=mean_new)
        if change < options.tol:
            break

    cells = index.upper_cells()
    y = triangle.ratio_vector()
    mu_mat = model.mu_matrix()
    mu = np.array([mu_mat[i - 1, j - 1] for (i, j) in cells])

    def neg_ll(log_phi):
        try:
            phi = np.full_like(y, math.exp(log_phi))
            return -float(np.sum(tweedie.log_density_multi(y, mu, phi, p)))
        except AccuracyError:
            return np.inf

    result = optimize.minimize_scalar(
        neg_ll, bounds=(-14.0, 4.0), method="bounded", options={"xatol": 1e-7}
    )
    return -float(result.fun)


def select_p(triangle, grid=None, options=None):
    """Choose the Tweedie power from a grid by profile log likelihood.

    Each candidate p is fitted from scratch with rho pinned to 0 and a
    constant dispersion, whose value is profiled out by exact maximum
    likelihood; the p with the largest profile likelihood wins, ties broken
    toward smaller p.  Ranking uses the constant-dispersion profile because
    the per-lag dispersion submodel can sit on its stabilization boundary on
    sparse triangles, where its likelihood value reflects the constraint
    rather than the model and cannot be compared across the grid.
    """
    if grid is None:
        grid = default_p_grid()
    grid = np.asarray(grid, float)
    if grid.size == 0:
        raise DomainError("empty power-parameter grid")
    for g in grid:
        tweedie._validate_p(float(g))
    opts = options or FitOptions()

    best_p = None
    best_ll = -np.inf
    failures = []
    for g in np.sort(grid):
        try:
            ll = _profile_log_likelihood(triangle, float(g), opts)
        except FitError as exc:
            failures.append((float(g), str(exc)))
            continue
        if not np.isfinite(ll):
            failures.append((float(g), "log likelihood not computable"))
            continue
        if ll > best_ll + 1e-12:
            best_ll = ll
            best_p = float(g)
    if best_p is None:
        raise FitError(
            "power selection failed for every grid point; first failure: %s"
            % (failures[0][1] if failures else "empty grid")
        )
    return best_p
