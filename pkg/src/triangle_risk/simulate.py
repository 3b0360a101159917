"""Joint completion of the unobserved lower triangles by simulation.

For every future cell the generator draws a cross-line vector of
decorrelated innovations whose joint ranks follow the fitted dependence
tree (rank reordering of oversampled standard-normal columns), restores
each line's development-lag correlation through the conditional law of
the unobserved lags given the observed ones, and maps the resulting
scaled innovations to loss ratios with the exact Tweedie quantile.

Randomness is organised for reproducibility: one master seed spawns an
independent substream per future cell, keyed by the cell's row-major
position, so results are byte-identical across runs and thread counts.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.special import ndtr

from triangle_risk import dependence, tweedie
from triangle_risk.exceptions import DomainError, SimulationError

__all__ = [
    "ScenarioConfig",
    "ScenarioSet",
    "DiscountedLosses",
    "reorder_pair",
    "simulate_innovation_matrix",
    "conditional_innovation_params",
    "complete_triangles",
    "discount_losses",
    "losses_by_period",
]

_MAGIC = b"TRISCN01"

# Levels this close to 1 are kept strictly inside the quantile domain.
_U_MAX = 1.0 - 1e-16


@dataclass(frozen=True)
class ScenarioConfig:
    """Size, seeding, and economic assumptions of one simulation run.

    ``oversample_factor`` controls the pool size m = factor * n_scenarios
    used by the rank reordering before subsampling down to n_scenarios.
    ``premiums`` optionally overrides the portfolio's earned premiums per
    line (mapping line_id -> length-I sequence); lines not listed keep
    the premiums carried by their triangle.
    """

    n_scenarios: int
    seed: int
    oversample_factor: int = 10
    discount_rate: float = 0.02
    premiums: dict = None

    def __post_init__(self):
        if int(self.n_scenarios) != self.n_scenarios or self.n_scenarios < 1:
            raise DomainError("n_scenarios must be a positive integer")
        object.__setattr__(self, "n_scenarios", int(self.n_scenarios))
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise DomainError("seed must be an integer in [0, 2**64)")
        object.__setattr__(self, "seed", int(self.seed))
        if int(self.oversample_factor) != self.oversample_factor or self.oversample_factor < 2:
            raise DomainError("oversample_factor must be an integer >= 2")
        object.__setattr__(self, "oversample_factor", int(self.oversample_factor))
        rate = float(self.discount_rate)
        if not np.isfinite(rate) or rate <= -1.0:
            raise DomainError("discount_rate must be finite and > -1")
        object.__setattr__(self, "discount_rate", rate)
        if self.premiums is not None:
            clean = {}
            for key, values in self.premiums.items():
                arr = np.asarray(values, dtype=float)
                if arr.ndim != 1 or arr.size == 0:
                    raise DomainError(
                        "premium override for line %r must be a one-dimensional sequence" % (key,)
                    )
                if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0):
                    raise DomainError(
                        "premium override for line %r must be finite and > 0" % (key,)
                    )
                clean[str(key)] = arr
            object.__setattr__(self, "premiums", clean)

    @property
    def pool_size(self):
        """Rows in the reordering pool: oversample_factor * n_scenarios."""
        return self.oversample_factor * self.n_scenarios


def _inverse_permutation(order):
    inv = np.empty(order.size, dtype=np.intp)
    inv[order] = np.arange(order.size, dtype=np.intp)
    return inv


def _rank_permutations(agg_first, agg_second, score_first, score_second):
    """Row permutations giving two samples the joint ranks of two scores.

    Returns (p1, p2) such that agg_first[p1] paired with agg_second[p2]
    has, row by row, the same rank pair as (score_first, score_second).
    """
    perms = []
    for agg, score in ((agg_first, score_first), (agg_second, score_second)):
        rank_index = _inverse_permutation(np.argsort(score, kind="stable"))
        perms.append(np.argsort(agg, kind="stable")[rank_index])
    return perms[0], perms[1]


def reorder_pair(first, second, copula_sample):
    """Re-pair two marginal samples to match a copula sample's rank pairs.

    Row t of the output takes, from each marginal, the value whose rank
    equals the copula sample's rank in that row; each output column is a
    permutation of its input, so the marginals are preserved exactly
    while the joint ranks become those of the copula sample.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    sample = np.asarray(copula_sample, dtype=float)
    if first.ndim != 1 or second.ndim != 1 or first.size != second.size:
        raise DomainError("marginal samples must be one-dimensional with equal length")
    if sample.ndim != 2 or sample.shape != (first.size, 2):
        raise DomainError("copula sample must have shape (n, 2) matching the marginals")
    p1, p2 = _rank_permutations(first, second, sample[:, 0], sample[:, 1])
    return first[p1], second[p2]


def _copula_scores(spec, n, rng):
    """Two score vectors whose joint ranks follow the node's copula.

    Only ranks enter the reordering, so the probability transform of the
    copula sampler is skipped: for a Student t node the scores are the
    underlying bivariate t pair, for independence two independent
    normals.  Their ranks have exactly the copula's distribution.
    """
    if spec.family == dependence.STUDENT_T:
        z = rng.standard_normal((n, 2))
        w = np.sqrt(rng.chisquare(spec.nu, n) / spec.nu)
        x = z[:, 0] / w
        y = (spec.rho * z[:, 0] + np.sqrt(1.0 - spec.rho ** 2) * z[:, 1]) / w
        return x, y
    z = rng.standard_normal((n, 2))
    return z[:, 0], z[:, 1]


def simulate_innovation_matrix(tree, m, rng=None):
    """One pool of m cross-line innovation rows following the tree.

    Columns are standard-normal samples in ``tree.leaf_ids`` order; their
    joint ranks follow the hierarchical copula.  The base columns are
    drawn first as one m x K block, then each node (children before
    parents, left to right) draws its bivariate copula scores and both
    child blocks are row-permuted so the child aggregates' rank pairs
    match the scores; aggregates are summed up the tree.  Permuting whole
    child blocks propagates every reordering down to the leaf columns.
    """
    m = int(m)
    if m < 1:
        raise DomainError("pool size m must be a positive integer")
    if not isinstance(tree, dependence.CopulaTree):
        raise DomainError("tree must be a fitted CopulaTree")
    rng = np.random.default_rng(rng)
    leaf_col = {lid: k for k, lid in enumerate(tree.leaf_ids)}
    base = rng.standard_normal((m, tree.n_leaves))

    def walk(node):
        if isinstance(node, dependence.CopulaLeaf):
            values = base[:, leaf_col[node.line_id]]
            return values[:, None], values
        block_l, agg_l = walk(node.left)
        block_r, agg_r = walk(node.right)
        s1, s2 = _copula_scores(node.spec, m, rng)
        p1, p2 = _rank_permutations(agg_l, agg_r, s1, s2)
        block = np.hstack([block_l[p1], block_r[p2]])
        return block, agg_l[p1] + agg_r[p2]

    block, _ = walk(tree.root)
    return block


def conditional_innovation_params(rho, i, I, observed_scaled_innovations):
    """Conditional law of a row's unobserved innovations given observed.

    For accident semester i of an I x I grid, the scaled innovations over
    lags 1..I are jointly normal with lag correlation rho^|j1-j2|.  The
    first I+1-i lags are observed; this returns the mean vector and
    covariance matrix of the remaining i-1 lags given the observed ones.
    An empty observed vector yields the unconditional law (zero mean,
    plain lag-correlation matrix).
    """
    rho = float(rho)
    if not np.isfinite(rho) or abs(rho) >= 1.0:
        raise DomainError("lag correlation must satisfy |rho| < 1")
    if int(I) != I or I < 2:
        raise DomainError("I must be an integer >= 2")
    if int(i) != i or not 2 <= i <= I:
        raise DomainError("accident semester must satisfy 2 <= i <= I, got i=%s" % (i,))
    i, I = int(i), int(I)
    n_obs = I + 1 - i
    n_new = i - 1
    obs = (
        np.zeros(0)
        if observed_scaled_innovations is None
        else np.asarray(observed_scaled_innovations, dtype=float).ravel()
    )
    lags = np.arange(I)
    full = rho ** np.abs(lags[:, None] - lags[None, :])
    if obs.size == 0:
        return np.zeros(n_new), full[n_obs:, n_obs:].copy()
    if obs.size != n_obs:
        raise DomainError(
            "expected %d observed scaled innovations for semester i=%d of I=%d, got %d"
            % (n_obs, i, I, obs.size)
        )
    if np.any(~np.isfinite(obs)):
        raise DomainError("observed scaled innovations must be finite")
    r11 = full[:n_obs, :n_obs]
    r12 = full[:n_obs, n_obs:]
    r22 = full[n_obs:, n_obs:]
    cho = sla.cho_factor(r11, lower=True)
    weights = sla.cho_solve(cho, r12)
    mean = weights.T @ obs
    cov = r22 - r12.T @ weights
    cov = 0.5 * (cov + cov.T)
    return mean, cov


@dataclass
class DiscountedLosses:
    """Per-line and aggregate discounted losses per scenario."""

    line_ids: tuple
    per_line: np.ndarray
    aggregate: np.ndarray

    def __post_init__(self):
        self.line_ids = tuple(self.line_ids)
        self.per_line = np.asarray(self.per_line, dtype=float)
        self.aggregate = np.asarray(self.aggregate, dtype=float)
        if self.per_line.ndim != 2 or self.per_line.shape[1] != len(self.line_ids):
            raise DomainError("per_line must be an N x K matrix matching line_ids")
        if self.aggregate.shape != (self.per_line.shape[0],):
            raise DomainError("aggregate must hold one value per scenario")


@dataclass
class ScenarioSet:
    """Simulated lower-triangle ratios plus derived discounted losses.

    ``ratios`` maps each line to an (N, n_lower) matrix whose columns
    follow the row-major order of the future cells; ``premiums`` is the
    resolved K x I premium matrix actually used for currency conversion.
    """

    line_ids: tuple
    I: int
    J: int
    seed: int
    config: ScenarioConfig
    premiums: np.ndarray
    ratios: dict
    per_line_losses: np.ndarray = None
    aggregate_losses: np.ndarray = None
    scaled_innovations: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.line_ids = tuple(self.line_ids)
        self.premiums = np.asarray(self.premiums, dtype=float)
        if self.I != self.J:
            raise DomainError("scenario sets require a square grid (I = J)")
        n_lower = self.n_lower
        if self.premiums.shape != (len(self.line_ids), self.I):
            raise DomainError("premiums must be a K x I matrix")
        if set(self.ratios) != set(self.line_ids):
            raise DomainError("ratios must cover exactly the portfolio's lines")
        n = None
        for lid in self.line_ids:
            arr = np.asarray(self.ratios[lid], dtype=float)
            if arr.ndim != 2 or arr.shape[1] != n_lower:
                raise DomainError(
                    "line %s: ratios must be N x %d (one column per future cell)"
                    % (lid, n_lower)
                )
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise DomainError("all lines must hold the same number of scenarios")
            if arr.size and float(arr.min()) < 0.0:
                raise SimulationError("line %s: simulated ratios must be >= 0" % lid)
            self.ratios[lid] = arr
        if self.per_line_losses is None:
            derived = discount_losses(self, self.config)
            self.per_line_losses = derived.per_line
            self.aggregate_losses = derived.aggregate
        else:
            self.per_line_losses = np.asarray(self.per_line_losses, dtype=float)
            self.aggregate_losses = np.asarray(self.aggregate_losses, dtype=float)

    @property
    def n_scenarios(self):
        return self.ratios[self.line_ids[0]].shape[0]

    @property
    def n_lower(self):
        return self.J * (self.J - 1) // 2

    def lower_cells(self):
        """Row-major (i, j) pairs of the future cells, 1-based."""
        return [
            (i, j)
            for i in range(1, self.I + 1)
            for j in range(self.J + 2 - i, self.J + 1)
        ]

    # ------------------------------------------------------------------
    # Persistence: a little-endian binary columnar layout plus CSV summary.
    #
    #   magic            8 bytes  b"TRISCN01"
    #   N, K, I, J, seed, oversample_factor   6x uint64
    #   discount_rate    float64
    #   K line ids       each uint32 byte length + UTF-8 bytes
    #   premiums         K*I float64 (line-major)
    #   ratios           per line, per future cell: N float64 (columnar)
    #   per-line losses  per line: N float64
    #   aggregate losses N float64
    # ------------------------------------------------------------------

    def save(self, path):
        """Write the binary columnar file; layout documented on the class."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(
                struct.pack(
                    "<6Qd",
                    self.n_scenarios,
                    len(self.line_ids),
                    self.I,
                    self.J,
                    self.seed,
                    self.config.oversample_factor,
                    self.config.discount_rate,
                )
            )
            for lid in self.line_ids:
                raw = lid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self.premiums.astype("<f8").tobytes())
            for lid in self.line_ids:
                fh.write(np.ascontiguousarray(self.ratios[lid].T).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.per_line_losses.T).astype("<f8").tobytes())
            fh.write(self.aggregate_losses.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        """Read a file written by :meth:`save`."""
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise SimulationError("not a scenario file (bad magic %r)" % magic)
            n, k, big_i, big_j, seed, factor, rate = struct.unpack("<6Qd", fh.read(56))
            line_ids = []
            for _ in range(k):
                (ln,) = struct.unpack("<I", fh.read(4))
                line_ids.append(fh.read(ln).decode("utf-8"))
            n_lower = big_j * (big_j - 1) // 2

            def read_block(count):
                data = np.frombuffer(fh.read(8 * count), dtype="<f8")
                if data.size != count:
                    raise SimulationError("scenario file truncated")
                return data.astype(float)

            premiums = read_block(k * big_i).reshape(k, big_i)
            ratios = {}
            for lid in line_ids:
                ratios[lid] = read_block(n * n_lower).reshape(n_lower, n).T.copy()
            per_line = read_block(n * k).reshape(k, n).T.copy()
            aggregate = read_block(n)
            if fh.read(1):
                raise SimulationError("scenario file has trailing bytes")
        config = ScenarioConfig(
            n_scenarios=n,
            seed=seed,
            oversample_factor=factor,
            discount_rate=rate,
            premiums={lid: premiums[idx] for idx, lid in enumerate(line_ids)},
        )
        return cls(
            line_ids=tuple(line_ids),
            I=big_i,
            J=big_j,
            seed=seed,
            config=config,
            premiums=premiums,
            ratios=ratios,
            per_line_losses=per_line,
            aggregate_losses=aggregate,
        )

    def save_csv(self, path):
        """CSV summary: one row per scenario of per-line discounted losses."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario"] + list(self.line_ids) + ["aggregate"])
            for s in range(self.n_scenarios):
                writer.writerow(
                    [s + 1]
                    + ["%.17g" % v for v in self.per_line_losses[s]]
                    + ["%.17g" % self.aggregate_losses[s]]
                )


def _cell_periods(big_i, big_j):
    """Payment period t = i + j - (I + 1) per future cell, row-major."""
    return np.array(
        [
            i + j - (big_i + 1)
            for i in range(1, big_i + 1)
            for j in range(big_j + 2 - i, big_j + 1)
        ],
        dtype=int,
    )


def _resolve_premiums(scenario_set, config):
    premiums = scenario_set.premiums.copy()
    if config is not None and config.premiums:
        for lid, values in config.premiums.items():
            if lid not in scenario_set.line_ids:
                raise DomainError("premium override references unknown line %r" % (lid,))
            if values.shape != (scenario_set.I,):
                raise DomainError(
                    "premium override for line %r needs %d values" % (lid, scenario_set.I)
                )
            premiums[scenario_set.line_ids.index(lid)] = values
    return premiums


def discount_losses(scenario_set, config=None):
    """Discounted per-line and aggregate losses for each scenario.

    Each future cell pays ratio x premium at the end of period
    t = i + j - (I + 1) (semesters after the valuation date) and is
    discounted by (1 + d)^-t.  The aggregate is the per-line row sum, so
    aggregate = sum of per-line losses exactly.
    """
    config = scenario_set.config if config is None else config
    premiums = _resolve_premiums(scenario_set, config)
    periods = _cell_periods(scenario_set.I, scenario_set.J)
    rows = np.array([i for i in range(1, scenario_set.I + 1) for _ in range(i - 1)])
    factors = (1.0 + config.discount_rate) ** (-periods.astype(float))
    n = scenario_set.n_scenarios
    per_line = np.empty((n, len(scenario_set.line_ids)))
    for k, lid in enumerate(scenario_set.line_ids):
        weights = premiums[k, rows - 1] * factors
        per_line[:, k] = scenario_set.ratios[lid] @ weights
    aggregate = per_line.sum(axis=1)
    return DiscountedLosses(scenario_set.line_ids, per_line, aggregate)


def losses_by_period(scenario_set, config=None, line_id=None):
    """Undiscounted payments per future period, per scenario.

    Returns (periods, matrix): periods are 1..J-1 and column t-1 holds the
    sum over cells paying at period t of ratio x premium, aggregated over
    every line by default or restricted to ``line_id`` when given.
    """
    config = scenario_set.config if config is None else config
    premiums = _resolve_premiums(scenario_set, config)
    if line_id is None:
        selected = list(enumerate(scenario_set.line_ids))
    else:
        if line_id not in scenario_set.line_ids:
            raise DomainError("unknown line %r" % (line_id,))
        selected = [(scenario_set.line_ids.index(line_id), line_id)]
    periods = _cell_periods(scenario_set.I, scenario_set.J)
    rows = np.array([i for i in range(1, scenario_set.I + 1) for _ in range(i - 1)])
    horizon = scenario_set.J - 1
    n = scenario_set.n_scenarios
    out = np.zeros((n, horizon))
    for k, lid in selected:
        weights = premiums[k, rows - 1]
        ratios = scenario_set.ratios[lid]
        for t in range(1, horizon + 1):
            cols = periods == t
            if np.any(cols):
                out[:, t - 1] += ratios[:, cols] @ weights[cols]
    return np.arange(1, horizon + 1), out


def _validate_inputs(portfolio, models, tree, config):
    index = portfolio.index
    line_ids = list(portfolio.line_ids)
    if set(tree.leaf_ids) != set(line_ids):
        raise DomainError(
            "dependence tree lines %s do not match the portfolio lines %s"
            % (sorted(tree.leaf_ids), sorted(line_ids))
        )
    fitted = {}
    for lid in line_ids:
        if lid not in models:
            raise DomainError("no fitted model supplied for line %r" % (lid,))
        model = models[lid]
        if model.index != index:
            raise DomainError(
                "model for line %r was fitted on a different grid" % (lid,)
            )
        fitted[lid] = model
    if config.premiums:
        for lid, values in config.premiums.items():
            if lid not in line_ids:
                raise DomainError("premium override references unknown line %r" % (lid,))
            if values.shape != (index.I,):
                raise DomainError(
                    "premium override for line %r needs %d values" % (lid, index.I)
                )
    return fitted


class _LineEngine:
    """Per-line machinery: conditional laws and quantile tables.

    Quantile tables share one cached density-series interpolant per
    development lag (the series kernel does not depend on the accident
    semester), which makes the per-cell table builds cheap.
    """

    def __init__(self, model, triangle):
        self.model = model
        self.mu = model.mu_matrix()
        self.phi = model.phi_vector()
        self.p = model.p
        index = model.index
        scaled = model.scaled_innovations(triangle)
        self.row_params = {}
        for i in range(2, index.I + 1):
            observed = scaled[i - 1, : index.J + 1 - i]
            mean, cov = conditional_innovation_params(model.rho, i, index.I, observed)
            self.row_params[i] = (mean, np.linalg.cholesky(cov))
        self._series = {}
        self._tables = {}

    def table(self, i, j):
        key = (i, j)
        if key not in self._tables:
            interp = self._series.get(j)
            if interp is None:
                interp = tweedie.SeriesInterp(self.phi[j - 1], self.p)
                self._series[j] = interp
            params = tweedie.TweedieParams(self.mu[i - 1, j - 1], self.phi[j - 1], self.p)
            self._tables[key] = tweedie.CdfTable(params, log_a_fn=interp)
        return self._tables[key]


def complete_triangles(
    portfolio, models, tree, config, threads=1, keep_scaled_innovations=False
):
    """Simulate N joint completions of every line's lower triangle.

    For each future cell an oversampled pool of cross-line innovation
    rows is generated with :func:`simulate_innovation_matrix` from that
    cell's own seeded substream, shuffled, and its first N rows kept, so
    cells are independent and results do not depend on ``threads``.  Per
    line and accident semester the innovations are coloured with the
    lower Cholesky factor of the conditional covariance and shifted by
    the conditional mean, then mapped to ratios through the Tweedie
    quantile at the normal probability transform.
    """
    if not isinstance(config, ScenarioConfig):
        raise DomainError("config must be a ScenarioConfig")
    if int(threads) != threads or threads < 1:
        raise DomainError("threads must be a positive integer")
    threads = int(threads)
    fitted = _validate_inputs(portfolio, models, tree, config)
    index = portfolio.index
    line_ids = list(portfolio.line_ids)
    lower = index.lower_cells()
    cell_pos = {cell: idx for idx, cell in enumerate(lower)}
    leaf_col = {lid: c for c, lid in enumerate(tree.leaf_ids)}
    n = config.n_scenarios
    m = config.pool_size

    engines = {
        lid: _LineEngine(fitted[lid], portfolio.line(lid)) for lid in line_ids
    }
    # Build every quantile table up front (serial: the tables share
    # per-lag series caches) so the threaded phase only reads them.
    for lid in line_ids:
        for (i, j) in lower:
            engines[lid].table(i, j)

    streams = np.random.SeedSequence(config.seed).spawn(len(lower))
    ratios = {lid: np.empty((n, len(lower))) for lid in line_ids}
    scaled_out = {} if keep_scaled_innovations else None

    def run_row(i):
        lags = list(range(index.J + 2 - i, index.J + 1))
        draws = {}
        for j in lags:
            idx = cell_pos[(i, j)]
            rng = np.random.Generator(np.random.PCG64(streams[idx]))
            pool = simulate_innovation_matrix(tree, m, rng)
            keep = rng.permutation(m)[:n]
            draws[j] = pool[keep]
        for lid in line_ids:
            engine = engines[lid]
            mean, chol = engine.row_params[i]
            block = np.column_stack([draws[j][:, leaf_col[lid]] for j in lags])
            colored = mean[None, :] + block @ chol.T
            if scaled_out is not None:
                scaled_out[(lid, i)] = colored
            for c, j in enumerate(lags):
                levels = np.minimum(ndtr(colored[:, c]), _U_MAX)
                ratios[lid][:, cell_pos[(i, j)]] = engine.table(i, j).quantile_batch(
                    levels
                )

    rows = list(range(2, index.I + 1))
    if threads == 1:
        for i in rows:
            run_row(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            list(pool_exec.map(run_row, rows))

    premiums = np.vstack([portfolio.line(lid).premiums for lid in line_ids])
    if config.premiums:
        for lid, values in config.premiums.items():
            premiums[line_ids.index(lid)] = values
    return ScenarioSet(
        line_ids=tuple(line_ids),
        I=index.I,
        J=index.J,
        seed=config.seed,
        config=config,
        premiums=premiums,
        ratios=ratios,
        scaled_innovations=scaled_out,
    )
