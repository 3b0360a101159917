"""Risk measures and capital reporting on simulated loss samples.

Everything in this module operates on in-memory Monte Carlo samples: a
``LossSample`` holds per-line discounted losses together with their exact
row-wise aggregate, and the measure functions (``var``, ``tvar``,
``euler_allocation``, ``diversification_benefit``, ``coc_risk_adjustment``,
``equivalent_alpha``) are pure functions of such samples.  ``CapitalReport``
assembles the measures into the standard three-table layout: economic
capital with its allocation to lines, risk adjustments for non-financial
risks, and a cost-of-capital rate sensitivity grid.

All quantile-based quantities use the empirical generalized inverse: the
value-at-risk at level ``alpha`` is the ``ceil(alpha * N)``-th order
statistic, and the tail value-at-risk integrates that step function
exactly over ``(alpha, 1]`` (fractional weight on the boundary statistic),
which makes ``tvar`` continuous and nondecreasing in ``alpha`` and never
smaller than ``var``.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .exceptions import DomainError

__all__ = [
    "LossSample",
    "CoCAssumptions",
    "EulerAllocation",
    "CapitalReport",
    "var",
    "tvar",
    "euler_allocation",
    "diversification_benefit",
    "coc_risk_adjustment",
    "equivalent_alpha",
    "calibrate_tvar_alpha",
    "build_capital_report",
]


def _as_sample(values, name="sample"):
    """Validate and return a 1-D float sample array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise DomainError("%s must contain at least one value" % (name,))
    if not np.all(np.isfinite(arr)):
        raise DomainError("%s contains non-finite values" % (name,))
    return arr


def _check_alpha(alpha):
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0) or not math.isfinite(alpha):
        raise DomainError("alpha must lie strictly between 0 and 1, got %r" % (alpha,))
    return alpha


def _order_index(alpha, n):
    """1-based index of the ceil(alpha*n)-th order statistic.

    The product alpha*n is nudged down by an absolute 1e-9 before the
    ceiling so that levels whose true product is an exact integer (for
    example 0.95 * 100) are not pushed to the next order statistic by
    floating-point round-up of the product.
    """
    k = int(math.ceil(alpha * n - 1e-9))
    return min(max(k, 1), n)


def var(sample, alpha):
    """Empirical value-at-risk: the ceil(alpha*N)-th order statistic.

    This is the generalized inverse of the empirical distribution
    function, ``inf{x : P[X <= x] >= alpha}``.
    """
    xs = np.sort(_as_sample(sample))
    alpha = _check_alpha(alpha)
    return float(xs[_order_index(alpha, xs.size) - 1])


def tvar(sample, alpha):
    """Empirical tail value-at-risk, the exact quantile integral.

    Evaluates ``(1 / (1 - alpha)) * integral_alpha^1 VaR_u du`` exactly
    on the empirical distribution: the boundary order statistic receives
    the fractional weight ``k/N - alpha`` and each higher statistic a
    weight of ``1/N``.  The implementation accumulates the nonnegative
    excesses above the boundary statistic, which guarantees
    ``tvar >= var`` in floating point as well as in exact arithmetic.
    """
    xs = np.sort(_as_sample(sample))
    alpha = _check_alpha(alpha)
    n = xs.size
    k = _order_index(alpha, n)
    boundary = xs[k - 1]
    excess = float(np.sum(xs[k:] - boundary))
    return float(boundary + excess / (n * (1.0 - alpha)))


@dataclasses.dataclass(frozen=True)
class LossSample:
    """Per-line discounted losses with their exact per-scenario aggregate.

    ``per_line`` has one row per scenario and one column per line in
    ``line_ids`` order; ``aggregate`` equals ``per_line.sum(axis=1)``
    bitwise (supplied aggregates are checked against that reduction).
    """

    line_ids: tuple
    per_line: np.ndarray
    aggregate: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "line_ids", tuple(str(l) for l in self.line_ids))
        per_line = np.ascontiguousarray(np.asarray(self.per_line, dtype=np.float64))
        if per_line.ndim != 2:
            raise DomainError("per-line losses must be a scenarios x lines matrix")
        n, k = per_line.shape
        if n < 1 or k < 1:
            raise DomainError("loss sample needs at least one scenario and one line")
        if k != len(self.line_ids):
            raise DomainError(
                "loss matrix has %d columns but %d line ids were given"
                % (k, len(self.line_ids))
            )
        if len(set(self.line_ids)) != k:
            raise DomainError("line ids must be unique")
        if not np.all(np.isfinite(per_line)):
            raise DomainError("loss sample contains non-finite values")
        row_sums = per_line.sum(axis=1)
        if self.aggregate is None:
            aggregate = row_sums
        else:
            aggregate = np.asarray(self.aggregate, dtype=np.float64)
            if aggregate.shape != (n,):
                raise DomainError(
                    "aggregate losses must be a vector of length %d" % (n,)
                )
            if not np.array_equal(aggregate, row_sums):
                raise DomainError(
                    "aggregate losses do not equal the per-line row sums exactly"
                )
        object.__setattr__(self, "per_line", per_line)
        object.__setattr__(self, "aggregate", aggregate)

    @property
    def n_scenarios(self):
        return self.per_line.shape[0]

    @property
    def n_lines(self):
        return self.per_line.shape[1]

    def line(self, line_id):
        """Standalone loss vector for one line."""
        if line_id not in self.line_ids:
            raise DomainError("unknown line %r" % (line_id,))
        return self.per_line[:, self.line_ids.index(line_id)]

    @classmethod
    def from_scenario_set(cls, scenario_set, config=None):
        """Build a sample from a simulated scenario set's discounted losses."""
        from . import simulate

        if config is None and scenario_set.per_line_losses is not None:
            per_line = scenario_set.per_line_losses
            aggregate = scenario_set.aggregate_losses
        else:
            discounted = simulate.discount_losses(scenario_set, config)
            per_line = discounted.per_line
            aggregate = discounted.aggregate
        return cls(tuple(scenario_set.line_ids), per_line, aggregate)


@dataclasses.dataclass(frozen=True)
class CoCAssumptions:
    """Assumptions for the cost-of-capital risk adjustment.

    ``coc_rate`` (r_t) and ``discount_rate`` (d_t) may be scalars, applied
    to every period, or sequences with one value per period.  ``horizon``
    limits the calculation to the first T periods of the supplied
    per-period losses; ``None`` uses every period present.  The per-period
    capital C_t is the value-at-risk at ``capital_alpha`` of the period-t
    losses in excess of their mean.
    """

    horizon: int = None
    coc_rate: object = 0.05
    discount_rate: object = 0.02
    capital_alpha: float = 0.99

    def __post_init__(self):
        if self.horizon is not None:
            horizon = int(self.horizon)
            if horizon < 1:
                raise DomainError("horizon must be a positive number of periods")
            object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "capital_alpha", _check_alpha(self.capital_alpha))
        for label in ("coc_rate", "discount_rate"):
            rates = np.asarray(getattr(self, label), dtype=np.float64)
            if rates.ndim > 1 or not np.all(np.isfinite(rates)):
                raise DomainError("%s must be a finite scalar or vector" % (label,))
            if label == "discount_rate" and np.any(rates <= -1.0):
                raise DomainError("discount rates must exceed -1")

    def rate_vectors(self, n_periods):
        """Per-period (r_t, d_t) vectors broadcast from the assumptions."""
        out = []
        for label in ("coc_rate", "discount_rate"):
            rates = np.asarray(getattr(self, label), dtype=np.float64)
            if rates.ndim == 0:
                out.append(np.full(n_periods, float(rates)))
            elif rates.shape == (n_periods,):
                out.append(rates.astype(np.float64))
            else:
                raise DomainError(
                    "%s has %d entries but %d periods are in scope"
                    % (label, rates.size, n_periods)
                )
        return out[0], out[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class EulerAllocation:
    """Capital allocation by tail conditional expectation.

    ``allocations[k]`` is the mean of line k's losses over the scenarios
    whose aggregate strictly exceeds the aggregate value-at-risk;
    ``n_tail`` is the size of that conditioning set and ``threshold`` the
    value-at-risk itself.  ``total`` sums the allocations and therefore
    equals the tail conditional mean of the aggregate by construction.
    """

    line_ids: tuple
    alpha: float
    allocations: np.ndarray
    n_tail: int
    threshold: float

    @property
    def total(self):
        return float(np.sum(self.allocations))


def euler_allocation(losses, alpha):
    """Allocate aggregate tail capital to lines: E[X_k | S > VaR_alpha(S)].

    Conditioning is strict (scenarios exactly at the value-at-risk are
    excluded).  Raises when no scenario exceeds the value-at-risk, which
    signals that more scenarios are needed to resolve the tail.
    """
    if not isinstance(losses, LossSample):
        raise DomainError("euler_allocation expects a LossSample")
    alpha = _check_alpha(alpha)
    threshold = var(losses.aggregate, alpha)
    mask = losses.aggregate > threshold
    n_tail = int(np.count_nonzero(mask))
    if n_tail == 0:
        raise DomainError(
            "no scenario exceeds the aggregate value-at-risk at alpha=%g; "
            "the tail is unresolved at N=%d scenarios, increase N"
            % (alpha, losses.n_scenarios)
        )
    allocations = losses.per_line[mask].mean(axis=0)
    return EulerAllocation(
        line_ids=losses.line_ids,
        alpha=alpha,
        allocations=allocations,
        n_tail=n_tail,
        threshold=threshold,
    )


def diversification_benefit(losses, alpha):
    """Sum of standalone line TVaRs minus the aggregate TVaR.

    Nonnegative up to Monte Carlo error by subadditivity of the tail
    value-at-risk; zero for comonotone lines.
    """
    if not isinstance(losses, LossSample):
        raise DomainError("diversification_benefit expects a LossSample")
    alpha = _check_alpha(alpha)
    silo = sum(tvar(losses.per_line[:, k], alpha) for k in range(losses.n_lines))
    return float(silo - tvar(losses.aggregate, alpha))


def coc_risk_adjustment(period_losses, assumptions=None):
    """Cost-of-capital risk adjustment over the payment horizon.

    ``period_losses`` is a scenarios x periods matrix of undiscounted
    payments, column t-1 holding the payments falling due at period t.
    The adjustment is ``sum_t r_t * C_t / (1 + d_t)^t`` with per-period
    capital ``C_t = VaR_{capital_alpha}(X_t) - E(X_t)``.
    """
    if assumptions is None:
        assumptions = CoCAssumptions()
    matrix = np.asarray(period_losses, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.ndim != 2 or matrix.size == 0:
        raise DomainError("period losses must be a scenarios x periods matrix")
    if not np.all(np.isfinite(matrix)):
        raise DomainError("period losses contain non-finite values")
    n_periods = matrix.shape[1]
    if assumptions.horizon is not None:
        if assumptions.horizon > n_periods:
            raise DomainError(
                "horizon %d exceeds the %d periods available"
                % (assumptions.horizon, n_periods)
            )
        n_periods = assumptions.horizon
    r, d = assumptions.rate_vectors(n_periods)
    total = 0.0
    for t in range(1, n_periods + 1):
        column = matrix[:, t - 1]
        capital = var(column, assumptions.capital_alpha) - float(column.mean())
        total += r[t - 1] * capital / (1.0 + d[t - 1]) ** t
    return float(total)


def equivalent_alpha(sample, target):
    """Smallest alpha with ``var(sample, alpha) - mean(sample) >= target``.

    Resolved by binary search over the order statistics, so the result
    lies on the empirical ``1/N`` grid; the top order statistic maps to
    the midpoint of its open interval so the result stays inside (0, 1).
    The caller formats the level as a percentage (two decimals) when
    reporting.
    """
    xs = np.sort(_as_sample(sample))
    target = float(target)
    if not math.isfinite(target):
        raise DomainError("target must be finite")
    mean = float(xs.mean())
    excess = xs - mean
    if target < excess[0] or target > excess[-1]:
        raise DomainError(
            "target %g is outside the attainable excess-over-mean range "
            "[%g, %g]" % (target, excess[0], excess[-1])
        )
    n = xs.size
    k = int(np.searchsorted(excess, target, side="left")) + 1
    if k >= n:
        return 1.0 - 0.5 / n
    return k / n


def calibrate_tvar_alpha(sample, target_excess, tol=1e-10):
    """Experimental: level where ``tvar(sample, alpha) - mean == target``.

    Finds, by bisection on the continuous empirical tail value-at-risk,
    the confidence level whose excess over the mean matches a given risk
    adjustment (for example one produced by the cost-of-capital method).
    The calibrated level is dataset-specific; treat the result as a
    diagnostic, not a portable constant.
    """
    xs = _as_sample(sample)
    target = float(target_excess)
    mean = float(xs.mean())
    top = float(xs.max() - mean)
    if not (0.0 < target < top):
        raise DomainError(
            "target excess %g is outside the attainable range (0, %g)"
            % (target, top)
        )

    def gap(level):
        return tvar(xs, level) - mean - target

    lo, hi = 1e-12, 1.0 - 1e-12
    if gap(lo) >= 0.0:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _format_cell(value, width):
    if value is None:
        return "n/a".rjust(width)
    return ("%.2f" % value).rjust(width)


@dataclasses.dataclass(frozen=True)
class CapitalReport:
    """Assembled capital and risk-adjustment figures for a portfolio.

    Three tables mirror the standard reporting layout: economic capital
    at ``capital_alpha`` (aggregate allocation row, standalone silo row,
    Total column), risk adjustments for non-financial risks (expected
    losses, tail-value excesses at ``adjustment_alpha``, cost-of-capital
    values and their equivalent value-at-risk confidence levels), and the
    sensitivity of the cost-of-capital adjustment to the rate grid.
    """

    line_ids: tuple
    n_scenarios: int
    capital_alpha: float
    adjustment_alpha: float
    means: np.ndarray
    mean_total: float
    capital_allocations: np.ndarray
    capital_aggregate_total: float
    capital_tail_size: int
    silo_tvars: np.ndarray
    silo_total: float
    diversification: float
    adjustment_allocations: np.ndarray
    adjustment_aggregate_total: float
    adjustment_silo: np.ndarray
    adjustment_silo_total: float
    coc_by_line: np.ndarray
    coc_total: float
    equivalent_alphas: tuple
    rate_grid: tuple
    sensitivity_by_line: np.ndarray
    sensitivity_totals: np.ndarray
    assumptions: CoCAssumptions

    def to_dict(self):
        """JSON-serializable mapping with every reported figure."""
        r = np.asarray(self.assumptions.coc_rate, dtype=float)
        d = np.asarray(self.assumptions.discount_rate, dtype=float)
        return {
            "line_ids": list(self.line_ids),
            "n_scenarios": int(self.n_scenarios),
            "capital_alpha": self.capital_alpha,
            "adjustment_alpha": self.adjustment_alpha,
            "assumptions": {
                "coc_rate": r.tolist() if r.ndim else float(r),
                "discount_rate": d.tolist() if d.ndim else float(d),
                "capital_alpha": self.assumptions.capital_alpha,
                "horizon": self.assumptions.horizon,
            },
            "means": {
                "by_line": [float(v) for v in self.means],
                "total": float(self.mean_total),
            },
            "economic_capital": {
                "aggregate_allocations": [float(v) for v in self.capital_allocations],
                "aggregate_allocation_sum": float(np.sum(self.capital_allocations)),
                "aggregate_tvar": float(self.capital_aggregate_total),
                "tail_scenarios": int(self.capital_tail_size),
                "silo_tvars": [float(v) for v in self.silo_tvars],
                "silo_total": float(self.silo_total),
                "diversification_benefit": float(self.diversification),
            },
            "risk_adjustment": {
                "tvar_aggregate_by_line": [
                    float(v) for v in self.adjustment_allocations
                ],
                "tvar_aggregate_total": float(self.adjustment_aggregate_total),
                "tvar_silo_by_line": [float(v) for v in self.adjustment_silo],
                "tvar_silo_total": float(self.adjustment_silo_total),
                "coc_by_line": [float(v) for v in self.coc_by_line],
                "coc_total": float(self.coc_total),
                "equivalent_alpha_pct": [
                    None if v is None else round(100.0 * v, 2)
                    for v in self.equivalent_alphas
                ],
            },
            "coc_sensitivity": {
                "rates": [float(v) for v in self.rate_grid],
                "by_line": [[float(v) for v in row] for row in self.sensitivity_by_line],
                "totals": [float(v) for v in self.sensitivity_totals],
            },
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_text(self):
        """Aligned-text tables: capital, risk adjustments, rate sensitivity."""
        label_width = 34
        width = max(12, *(len(str(lid)) + 2 for lid in self.line_ids))
        headers = [str(lid) for lid in self.line_ids] + ["Total"]

        def row(label, cells, total):
            body = "".join(_format_cell(c, width) for c in cells)
            return label.ljust(label_width) + body + _format_cell(total, width)

        def header_row(title):
            return title.ljust(label_width) + "".join(
                h.rjust(width) for h in headers
            )

        lines = []
        lines.append("Economic capital and allocation to lines")
        lines.append(header_row("TVaR_%g%%" % (100.0 * self.capital_alpha)))
        lines.append(
            row("  Aggregate", list(self.capital_allocations), self.capital_aggregate_total)
        )
        lines.append(row("  Silo", list(self.silo_tvars), self.silo_total))
        lines.append(
            "Diversification benefit".ljust(label_width)
            + _format_cell(self.diversification, width)
        )
        lines.append("")
        lines.append("Risk adjustment for non-financial risks")
        lines.append(header_row(""))
        lines.append(row("E(X)", list(self.means), self.mean_total))
        lines.append(
            row(
                "TVaR_%g%%(X) - E(X) Aggregate" % (100.0 * self.adjustment_alpha),
                list(self.adjustment_allocations),
                self.adjustment_aggregate_total,
            )
        )
        lines.append(
            row(
                "TVaR_%g%%(X) - E(X) Silo" % (100.0 * self.adjustment_alpha),
                list(self.adjustment_silo),
                self.adjustment_silo_total,
            )
        )
        lines.append(row("CoC", list(self.coc_by_line), self.coc_total))
        eq_cells = [
            None if v is None else 100.0 * v for v in self.equivalent_alphas
        ]
        lines.append(
            "Equivalent alpha for VaR - E(X) %".ljust(label_width)
            + "".join(_format_cell(c, width) for c in eq_cells)
        )
        lines.append("")
        lines.append("Sensitivity of the CoC risk adjustment to the rate")
        lines.append(header_row("Cost of capital rate"))
        for g, rate in enumerate(self.rate_grid):
            lines.append(
                row(
                    "  %g%%" % (100.0 * rate),
                    list(self.sensitivity_by_line[g]),
                    self.sensitivity_totals[g],
                )
            )
        return "\n".join(lines) + "\n"


def build_capital_report(
    losses,
    period_losses=None,
    period_losses_by_line=None,
    *,
    capital_alpha=0.99,
    adjustment_alpha=0.87,
    assumptions=None,
    rate_grid=(0.04, 0.05, 0.06),
):
    """Assemble the full capital report from simulated losses.

    ``losses`` is the discounted ``LossSample``; ``period_losses`` is the
    scenarios x periods matrix of undiscounted aggregate payments used by
    the cost-of-capital method, and ``period_losses_by_line`` maps each
    line to its standalone per-period matrix.  When period matrices are
    omitted the cost-of-capital panels fall back to treating each line's
    total discounted loss as a single-period payment.
    """
    if not isinstance(losses, LossSample):
        raise DomainError("build_capital_report expects a LossSample")
    capital_alpha = _check_alpha(capital_alpha)
    adjustment_alpha = _check_alpha(adjustment_alpha)
    if assumptions is None:
        assumptions = CoCAssumptions()
    rate_grid = tuple(float(r) for r in rate_grid)
    if any(not math.isfinite(r) for r in rate_grid):
        raise DomainError("rate grid must contain finite rates")

    k = losses.n_lines
    if period_losses is None:
        period_losses = losses.aggregate[:, None]
    period_losses = np.asarray(period_losses, dtype=np.float64)
    if period_losses_by_line is None:
        period_losses_by_line = {
            lid: losses.per_line[:, i][:, None]
            for i, lid in enumerate(losses.line_ids)
        }
    for lid in losses.line_ids:
        if lid not in period_losses_by_line:
            raise DomainError("missing per-period losses for line %r" % (lid,))

    means = losses.per_line.mean(axis=0)
    mean_total = float(losses.aggregate.mean())

    capital = euler_allocation(losses, capital_alpha)
    silo_tvars = np.array(
        [tvar(losses.per_line[:, i], capital_alpha) for i in range(k)]
    )
    silo_total = float(np.sum(silo_tvars))
    aggregate_tvar = tvar(losses.aggregate, capital_alpha)

    adj = euler_allocation(losses, adjustment_alpha)
    adjustment_allocations = adj.allocations - means
    adjustment_aggregate_total = float(
        tvar(losses.aggregate, adjustment_alpha) - mean_total
    )
    adjustment_silo = np.array(
        [tvar(losses.per_line[:, i], adjustment_alpha) for i in range(k)]
    ) - means
    adjustment_silo_total = float(np.sum(adjustment_silo))

    coc_by_line = np.array(
        [
            coc_risk_adjustment(period_losses_by_line[lid], assumptions)
            for lid in losses.line_ids
        ]
    )
    coc_total = coc_risk_adjustment(period_losses, assumptions)

    equivalent = []
    for i, lid in enumerate(losses.line_ids):
        try:
            equivalent.append(equivalent_alpha(losses.per_line[:, i], coc_by_line[i]))
        except DomainError:
            equivalent.append(None)

    sensitivity = np.empty((len(rate_grid), k))
    sensitivity_totals = np.empty(len(rate_grid))
    for g, rate in enumerate(rate_grid):
        scenario_assumptions = assumptions.replace(coc_rate=rate)
        sensitivity[g] = [
            coc_risk_adjustment(period_losses_by_line[lid], scenario_assumptions)
            for lid in losses.line_ids
        ]
        sensitivity_totals[g] = coc_risk_adjustment(
            period_losses, scenario_assumptions
        )

    return CapitalReport(
        line_ids=losses.line_ids,
        n_scenarios=losses.n_scenarios,
        capital_alpha=capital_alpha,
        adjustment_alpha=adjustment_alpha,
        means=means,
        mean_total=mean_total,
        capital_allocations=capital.allocations,
        capital_aggregate_total=float(aggregate_tvar),
        capital_tail_size=capital.n_tail,
        silo_tvars=silo_tvars,
        silo_total=silo_total,
        diversification=float(silo_total - aggregate_tvar),
        adjustment_allocations=adjustment_allocations,
        adjustment_aggregate_total=adjustment_aggregate_total,
        adjustment_silo=adjustment_silo,
        adjustment_silo_total=adjustment_silo_total,
        coc_by_line=coc_by_line,
        coc_total=coc_total,
        equivalent_alphas=tuple(equivalent),
        rate_grid=rate_grid,
        sensitivity_by_line=sensitivity,
        sensitivity_totals=sensitivity_totals,
        assumptions=assumptions,
    )
