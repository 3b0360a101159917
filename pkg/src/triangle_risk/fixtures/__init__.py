"""Bundled six-line industry-auto parameter fixtures and synthetic data.

The ``industry_auto`` directory ships one fitted-model document per
business line (personal and commercial auto across three regions), the
fitted dependence tree over the six lines, and a synthetic portfolio CSV
drawn from exactly that joint model at a frozen seed.  Premium volumes
are stylized constants; the parameter tables drive all moments.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.special import ndtr

from triangle_risk import dependence, marginal, triangles, tweedie
from triangle_risk.exceptions import DomainError
from triangle_risk.simulate import simulate_innovation_matrix

__all__ = [
    "FIXTURE_LINE_IDS",
    "DEFAULT_PREMIUMS",
    "PORTFOLIO_SEED",
    "fixture_dir",
    "load_model",
    "load_models",
    "load_tree",
    "load_portfolio",
    "synthetic_portfolio",
    "write_portfolio_csv",
]

FIXTURE_LINE_IDS = ("ON_PA", "ON_CA", "AB_PA", "AB_CA", "ATL_PA", "ATL_CA")

# Stylized constant earned premium per semester and line (currency units).
DEFAULT_PREMIUMS = {
    "ON_PA": 11000.0,
    "ON_CA": 850.0,
    "AB_PA": 2600.0,
    "AB_CA": 300.0,
    "ATL_PA": 1100.0,
    "ATL_CA": 95.0,
}

# Seed of the bundled portfolio CSV.
PORTFOLIO_SEED = 2003


def fixture_dir():
    """Directory holding the bundled fixture files."""
    return Path(__file__).resolve().parent / "industry_auto"


def load_model(line_id):
    """The bundled fitted marginal model for one line."""
    if line_id not in FIXTURE_LINE_IDS:
        raise DomainError(
            "unknown fixture line %r; choose one of %s" % (line_id, FIXTURE_LINE_IDS)
        )
    return marginal.MarginalModel.load(fixture_dir() / ("%s.json" % line_id.lower()))


def load_models():
    """All six bundled marginal models keyed by line id."""
    return {lid: load_model(lid) for lid in FIXTURE_LINE_IDS}


def load_tree():
    """The bundled dependence tree over the six lines."""
    return dependence.CopulaTree.load(fixture_dir() / "copula_tree.json")


def load_portfolio():
    """The bundled synthetic portfolio (observed upper triangles)."""
    return triangles.load_csv(fixture_dir() / "portfolio.csv")


def synthetic_portfolio(seed=PORTFOLIO_SEED, premiums=None, models=None, tree=None):
    """Draw a fresh observed portfolio from the fixture joint model.

    One cross-line innovation vector is drawn per observed cell (rank
    reordering through the dependence tree, one seeded substream per
    cell), each line's rows are coloured with its lag-correlation
    Cholesky factor, and cells map to ratios through the Tweedie
    quantile.  This mirrors the simulation used to complete lower
    triangles, applied to the observed region unconditionally.
    """
    models = load_models() if models is None else models
    tree = load_tree() if tree is None else tree
    premiums = dict(DEFAULT_PREMIUMS) if premiums is None else dict(premiums)
    order = [lid for lid in FIXTURE_LINE_IDS if lid in models] or list(models)
    index = models[order[0]].index
    upper = index.upper_cells()
    leaf_col = {lid: c for c, lid in enumerate(tree.leaf_ids)}

    streams = np.random.SeedSequence(seed).spawn(len(upper))
    pool_size = 512
    innovations = np.empty((len(upper), len(order)))
    for c in range(len(upper)):
        rng = np.random.Generator(np.random.PCG64(streams[c]))
        pool = simulate_innovation_matrix(tree, pool_size, rng)
        innovations[c] = pool[rng.permutation(pool_size)[0]]

    cell_pos = {cell: c for c, cell in enumerate(upper)}
    lines = []
    for lid in order:
        model = models[lid]
        mu = model.mu_matrix()
        phi = model.phi_vector()
        corr = dependence.ARCorrelation(model.rho, index.J)
        series = {}
        ratios = {}
        for i in range(1, index.I + 1):
            n_i = index.n_observed(i)
            u = np.array(
                [innovations[cell_pos[(i, j)], leaf_col[lid]] for j in range(1, n_i + 1)]
            )
            scaled = corr.color(u)
            for j in range(1, n_i + 1):
                interp = series.get(j)
                if interp is None:
                    interp = tweedie.SeriesInterp(phi[j - 1], model.p)
                    series[j] = interp
                table = tweedie.CdfTable(
                    tweedie.TweedieParams(mu[i - 1, j - 1], phi[j - 1], model.p),
                    log_a_fn=interp,
                )
                level = min(float(ndtr(scaled[j - 1])), 1.0 - 1e-16)
                ratios[(i, j)] = float(table.quantile_batch(np.array([level]))[0])
        lines.append(
            triangles.LossTriangle(
                line_id=lid,
                index=index,
                premiums=np.full(index.I, float(premiums[lid])),
                ratios=ratios,
                region=model.region,
                coverage=model.coverage,
            )
        )
    labels = triangles.default_semester_labels(index.I)
    return triangles.Portfolio(lines, labels)


def write_portfolio_csv(path, seed=PORTFOLIO_SEED):
    """Regenerate the bundled portfolio CSV at the given path."""
    triangles.save_csv(synthetic_portfolio(seed=seed), path)
