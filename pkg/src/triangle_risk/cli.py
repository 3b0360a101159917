"""Command-line pipeline: fit marginals and copulas, simulate, report.

Three subcommands share one JSON configuration file:

``triangle-risk fit --config run.json``
    Fits the per-line double GLM marginals and the hierarchical copula
    tree from a portfolio CSV, writing one model JSON per line, a copula
    tree JSON and a plain-text fit report into the models directory.

``triangle-risk simulate --config run.json``
    Completes the lower triangles by Monte Carlo using the fitted models
    and writes the scenario set to a binary file.

``triangle-risk report --config run.json``
    Computes the capital report (value-at-risk, tail value-at-risk, Euler
    allocations, diversification benefit, cost-of-capital risk adjustments
    and their equivalent confidence levels) from a scenario file and
    writes it as JSON and aligned text.

Command-line flags override configuration-file values, which override the
built-in defaults.  The thread count falls back to the environment
variable ``TRIANGLE_RISK_THREADS`` when neither the flag nor the file
sets it.  Every failure prints a single line ``ERROR <code>: message`` to
stderr and exits nonzero (2 for configuration/input problems, 1 for
runtime failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dependence, marginal, risk, simulate, triangles
from .exceptions import (
    AccuracyError,
    ConfigError,
    DomainError,
    FitError,
    IngestionError,
    SimulationError,
    TriangleRiskError,
)

__all__ = ["RunConfig", "cmd_fit", "cmd_simulate", "cmd_report", "main"]

THREADS_ENV_VAR = "TRIANGLE_RISK_THREADS"

_TREE_FILE = "copula_tree.json"
_FIT_REPORT_FILE = "fit_report.txt"
_REPORT_JSON_FILE = "report.json"
_REPORT_TEXT_FILE = "report.txt"

_CONFIG_KEYS = {
    "portfolio_csv",
    "output_dir",
    "models_dir",
    "scenario_file",
    "p",
    "n_scenarios",
    "oversample_factor",
    "seed",
    "alpha",
    "adjustment_alpha",
    "discount_rate",
    "coc",
    "rate_grid",
    "premiums",
    "pairing",
    "threads",
    "gof",
    "gof_bootstrap",
}

_COC_KEYS = {"rate", "discount_rate", "capital_alpha", "horizon"}


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def _as_float(value, key):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError("config key %r must be a number, got %r" % (key, value))
    if not np.isfinite(out):
        raise ConfigError("config key %r must be finite" % (key,))
    return out


def _as_int(value, key):
    if isinstance(value, bool) or (
        not isinstance(value, int) and not float(value).is_integer()
    ):
        raise ConfigError("config key %r must be an integer, got %r" % (key, value))
    return int(value)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated run configuration shared by the three subcommands.

    Paths from the configuration file resolve relative to the file's own
    directory.  ``p`` selects the Tweedie power: the string ``"grid"``
    runs the profile-likelihood grid search per line, a number fixes one
    power for every line, and a mapping fixes it per line.
    """

    portfolio_csv: Path = None
    output_dir: Path = Path("out")
    models_dir: Path = None
    scenario_file: Path = None
    p: object = "grid"
    n_scenarios: int = 100000
    oversample_factor: int = 10
    seed: int = 0
    alpha: float = 0.99
    adjustment_alpha: float = 0.87
    discount_rate: float = 0.02
    coc_assumptions: risk.CoCAssumptions = None
    rate_grid: tuple = (0.04, 0.05, 0.06)
    premiums: dict = None
    pairing: tuple = None
    threads: int = 1
    gof: bool = False
    gof_bootstrap: int = 1000

    def __post_init__(self):
        _require(self.n_scenarios >= 1, "n_scenarios must be at least 1")
        _require(
            0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer"
        )
        _require(self.oversample_factor >= 2, "oversample_factor must be >= 2")
        _require(0.0 < self.alpha < 1.0, "alpha must lie strictly in (0, 1)")
        _require(
            0.0 < self.adjustment_alpha < 1.0,
            "adjustment_alpha must lie strictly in (0, 1)",
        )
        _require(self.threads >= 1, "threads must be at least 1")
        _require(self.gof_bootstrap >= 1, "gof_bootstrap must be at least 1")
        if self.coc_assumptions is None:
            object.__setattr__(self, "coc_assumptions", risk.CoCAssumptions())
        if self.models_dir is None:
            object.__setattr__(self, "models_dir", self.output_dir / "models")
        if self.scenario_file is None:
            object.__setattr__(
                self, "scenario_file", self.output_dir / "scenarios.bin"
            )
        if isinstance(self.p, str):
            _require(
                self.p == "grid",
                "p must be the string 'grid', a number, or a per-line mapping",
            )
        elif isinstance(self.p, dict):
            object.__setattr__(
                self,
                "p",
                {str(k): _as_float(v, "p[%s]" % k) for k, v in self.p.items()},
            )
        else:
            object.__setattr__(self, "p", _as_float(self.p, "p"))

    @classmethod
    def load(cls, path, overrides=None):
        """Parse a JSON configuration file and apply flag overrides."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config file %s does not exist" % (path,))
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config file %s is not valid JSON: %s" % (path, exc))
        if not isinstance(doc, dict):
            raise ConfigError("config file %s must hold a JSON object" % (path,))
        unknown = sorted(set(doc) - _CONFIG_KEYS)
        if unknown:
            raise ConfigError("unknown config keys: %s" % (", ".join(unknown),))
        base = path.parent

        def resolve(key):
            if doc.get(key) is None:
                return None
            return (base / str(doc[key])).resolve()

        kwargs = {}
        if doc.get("portfolio_csv") is not None:
            kwargs["portfolio_csv"] = resolve("portfolio_csv")
        kwargs["output_dir"] = resolve("output_dir") or (base / "out").resolve()
        for key in ("models_dir", "scenario_file"):
            if doc.get(key) is not None:
                kwargs[key] = resolve(key)
        if "p" in doc:
            kwargs["p"] = doc["p"]
        for key, caster in (
            ("n_scenarios", _as_int),
            ("oversample_factor", _as_int),
            ("seed", _as_int),
            ("gof_bootstrap", _as_int),
            ("alpha", _as_float),
            ("adjustment_alpha", _as_float),
            ("discount_rate", _as_float),
        ):
            if doc.get(key) is not None:
                kwargs[key] = caster(doc[key], key)
        if doc.get("coc") is not None:
            coc = doc["coc"]
            if not isinstance(coc, dict):
                raise ConfigError("config key 'coc' must be an object")
            unknown = sorted(set(coc) - _COC_KEYS)
            if unknown:
                raise ConfigError(
                    "unknown keys under 'coc': %s" % (", ".join(unknown),)
                )
            try:
                kwargs["coc_assumptions"] = risk.CoCAssumptions(
                    horizon=coc.get("horizon"),
                    coc_rate=coc.get("rate", 0.05),
                    discount_rate=coc.get("discount_rate", 0.02),
                    capital_alpha=coc.get("capital_alpha", 0.99),
                )
            except DomainError as exc:
                raise ConfigError("invalid 'coc' assumptions: %s" % (exc,))
        if doc.get("rate_grid") is not None:
            grid = doc["rate_grid"]
            if not isinstance(grid, (list, tuple)) or not grid:
                raise ConfigError("rate_grid must be a nonempty list of rates")
            kwargs["rate_grid"] = tuple(
                _as_float(v, "rate_grid") for v in grid
            )
        if doc.get("premiums") is not None:
            prem = doc["premiums"]
            if not isinstance(prem, dict):
                raise ConfigError("premiums must map line ids to value lists")
            kwargs["premiums"] = {
                str(k): np.asarray(v, dtype=np.float64) for k, v in prem.items()
            }
        if doc.get("pairing") is not None:
            pairing = doc["pairing"]
            if not isinstance(pairing, (list, tuple)):
                raise ConfigError("pairing must be a list of line-id groups")
            kwargs["pairing"] = tuple(
                tuple(str(lid) for lid in group) for group in pairing
            )
        if doc.get("gof") is not None:
            if not isinstance(doc["gof"], bool):
                raise ConfigError("config key 'gof' must be true or false")
            kwargs["gof"] = doc["gof"]

        overrides = dict(overrides or {})
        threads = overrides.pop("threads", None)
        if threads is None and doc.get("threads") is not None:
            threads = _as_int(doc["threads"], "threads")
        if threads is None:
            env = os.environ.get(THREADS_ENV_VAR)
            if env is not None:
                try:
                    threads = int(env)
                except ValueError:
                    raise ConfigError(
                        "%s must be an integer, got %r" % (THREADS_ENV_VAR, env)
                    )
        kwargs["threads"] = 1 if threads is None else threads
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
        return cls(**kwargs)

    def require_portfolio(self):
        _require(
            self.portfolio_csv is not None,
            "config key 'portfolio_csv' is required for this command",
        )
        _require(
            Path(self.portfolio_csv).is_file(),
            "portfolio CSV %s does not exist" % (self.portfolio_csv,),
        )

    def model_path(self, line_id):
        return self.models_dir / ("%s.json" % line_id)

    def tree_path(self):
        return self.models_dir / _TREE_FILE


def _derive_pairing(portfolio):
    """First-level copula clusters: lines grouped by region metadata.

    Falls back to one singleton cluster per line when region metadata is
    absent; groups of more than two lines require an explicit ``pairing``
    in the configuration.
    """
    groups = {}
    order = []
    for lid in portfolio.line_ids:
        region = (portfolio.line(lid).region or "").strip()
        key = region if region else "line:%s" % lid
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(lid)
    pairing = []
    for key in order:
        lines = groups[key]
        if len(lines) > 2:
            raise ConfigError(
                "region %r has %d lines; supply an explicit 'pairing' of one- "
                "or two-line clusters in the config" % (key, len(lines))
            )
        pairing.append(tuple(lines))
    return pairing


def _cluster_label(node, regions):
    """Human-readable node label: shared region name, else joined parts."""
    if isinstance(node, dependence.CopulaLeaf):
        return node.line_id
    leaves = []
    stack = [node]
    while stack:
        item = stack.pop()
        if isinstance(item, dependence.CopulaLeaf):
            leaves.append(item.line_id)
        else:
            stack.extend([item.right, item.left])
    shared = {regions.get(lid, "") for lid in leaves}
    if len(shared) == 1:
        label = shared.pop()
        if label:
            return label
    return "%s+%s" % (
        _cluster_label(node.left, regions),
        _cluster_label(node.right, regions),
    )


def _tree_rows(tree, regions):
    """(label, spec) per copula node, children before parents."""
    rows = []

    def walk(node):
        if isinstance(node, dependence.CopulaLeaf):
            return
        walk(node.left)
        walk(node.right)
        rows.append((_cluster_label(node, regions), node.spec))

    walk(tree.root)
    return rows


def _preorder_pvalues(tree, panels, n_bootstrap, seed):
    """Goodness-of-fit p-value per node, keyed by spec identity order."""
    entries = dependence.tree_node_inputs(tree, panels)
    streams = np.random.SeedSequence(seed).spawn(len(entries))
    out = []
    for spec, (_, _, pairs), stream in zip(tree.specs, entries, streams):
        out.append(
            dependence.gof_cvm(
                spec, pairs, n_bootstrap=n_bootstrap, rng=np.random.default_rng(stream)
            )
        )
    return {id(spec): p for spec, p in zip(tree.specs, out)}


def _fit_report_text(portfolio, models, tree, p_values, p_mode):
    lines = []
    lines.append("Marginal fits (%s)" % p_mode)
    header = "%-10s %-8s %-9s %7s %8s %6s %22s" % (
        "line", "region", "coverage", "p", "rho", "iters", "log_pseudo_likelihood"
    )
    lines.append(header)
    for lid in portfolio.line_ids:
        model = models[lid]
        diag = model.diagnostics or {}
        loglik = diag.get("log_pseudo_likelihood")
        lines.append(
            "%-10s %-8s %-9s %7.3f %8.4f %6d %22s"
            % (
                lid,
                model.region or "-",
                model.coverage or "-",
                model.p,
                model.rho,
                int(diag.get("iterations", 0)),
                "-" if loglik is None else "%.4f" % loglik,
            )
        )
    lines.append("")
    lines.append("Dependence tree (fitted bottom-up)")
    lines.append(
        "%-14s %-13s %4s %8s %8s %8s"
        % ("cluster", "family", "nu", "rho", "se(rho)", "p-value")
    )
    regions = {lid: (portfolio.line(lid).region or "") for lid in portfolio.line_ids}
    for label, spec in _tree_rows(tree, regions):
        p_value = None if p_values is None else p_values.get(id(spec))
        lines.append(
            "%-14s %-13s %4s %8s %8s %8s"
            % (
                label,
                spec.family,
                "-" if spec.nu is None else spec.nu,
                "-" if spec.rho is None else "%.3f" % spec.rho,
                "-" if spec.rho_se is None else "%.3f" % spec.rho_se,
                "-" if p_value is None else "%.3f" % p_value,
            )
        )
    return "\n".join(lines) + "\n"


def cmd_fit(config):
    """Fit every line and the dependence tree; write models and report."""
    config.require_portfolio()
    portfolio = triangles.load_csv(config.portfolio_csv)
    config.models_dir.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        models = {}
        for lid in portfolio.line_ids:
            triangle = portfolio.line(lid)
            if isinstance(config.p, str):
                p = marginal.select_p(triangle)
                p_mode = "p selected on the default grid"
            elif isinstance(config.p, dict):
                if lid not in config.p:
                    raise ConfigError("no p configured for line %r" % (lid,))
                p = config.p[lid]
                p_mode = "p fixed per line"
            else:
                p = config.p
                p_mode = "p fixed at %g for all lines" % config.p
            model = marginal.fit(triangle, p)
            models[lid] = model
            path = config.model_path(lid)
            model.save(path)
            written.append(path)
            print(
                "fitted %s: p=%.3f rho=%.4f iterations=%d"
                % (lid, model.p, model.rho, model.diagnostics.get("iterations", 0))
            )
        panels = [
            dependence.compute_innovations(models[lid], portfolio.line(lid))
            for lid in portfolio.line_ids
        ]
        pairing = config.pairing or _derive_pairing(portfolio)
        tree = dependence.build_tree(panels, pairing)
        tree_path = config.tree_path()
        tree.save(tree_path)
        written.append(tree_path)
        p_values = None
        if config.gof:
            p_values = _preorder_pvalues(
                tree, panels, config.gof_bootstrap, config.seed
            )
        report = _fit_report_text(portfolio, models, tree, p_values, p_mode)
        report_path = config.models_dir / _FIT_REPORT_FILE
        report_path.write_text(report)
        written.append(report_path)
    except BaseException:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise
    print(report, end="")
    print("wrote %d model files, %s and %s" % (len(models), _TREE_FILE, _FIT_REPORT_FILE))
    return 0


def _load_models(config, line_ids):
    models = {}
    for lid in line_ids:
        path = config.model_path(lid)
        if not path.is_file():
            raise ConfigError(
                "model file %s not found; run 'triangle-risk fit' first" % (path,)
            )
        models[lid] = marginal.MarginalModel.load(path)
    tree_path = config.tree_path()
    if not tree_path.is_file():
        raise ConfigError(
            "copula tree %s not found; run 'triangle-risk fit' first" % (tree_path,)
        )
    return models, dependence.CopulaTree.load(tree_path)


def cmd_simulate(config):
    """Complete the lower triangles by Monte Carlo and save the scenarios."""
    config.require_portfolio()
    portfolio = triangles.load_csv(config.portfolio_csv)
    models, tree = _load_models(config, portfolio.line_ids)
    scenario_config = simulate.ScenarioConfig(
        n_scenarios=config.n_scenarios,
        seed=config.seed,
        oversample_factor=config.oversample_factor,
        discount_rate=config.discount_rate,
        premiums=config.premiums,
    )
    started = time.perf_counter()
    scenario_set = simulate.complete_triangles(
        portfolio, models, tree, scenario_config, threads=config.threads
    )
    elapsed = time.perf_counter() - started
    config.scenario_file.parent.mkdir(parents=True, exist_ok=True)
    scenario_set.save(config.scenario_file)
    print(
        "simulated %d scenarios in %.1f s (%.0f scenarios/s, %d threads)"
        % (
            config.n_scenarios,
            elapsed,
            config.n_scenarios / max(elapsed, 1e-9),
            config.threads,
        )
    )
    print("wrote %s" % (config.scenario_file,))
    return 0


def cmd_report(config):
    """Compute and emit the capital report for a saved scenario set."""
    if not Path(config.scenario_file).is_file():
        raise ConfigError(
            "scenario file %s not found; run 'triangle-risk simulate' first"
            % (config.scenario_file,)
        )
    scenario_set = simulate.ScenarioSet.load(config.scenario_file)
    sample = risk.LossSample.from_scenario_set(scenario_set)
    _, aggregate_periods = simulate.losses_by_period(scenario_set)
    per_line_periods = {
        lid: simulate.losses_by_period(scenario_set, line_id=lid)[1]
        for lid in scenario_set.line_ids
    }
    report = risk.build_capital_report(
        sample,
        aggregate_periods,
        per_line_periods,
        capital_alpha=config.alpha,
        adjustment_alpha=config.adjustment_alpha,
        assumptions=config.coc_assumptions,
        rate_grid=config.rate_grid,
    )
    config.output_dir.mkdir(parents=True, exist_ok=True)
    json_path = config.output_dir / _REPORT_JSON_FILE
    text_path = config.output_dir / _REPORT_TEXT_FILE
    json_path.write_text(report.to_json() + "\n")
    text = report.to_text()
    text_path.write_text(text)
    print(text, end="")
    print("wrote %s and %s" % (json_path, text_path))
    return 0


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors match the ERROR-line contract."""

    def error(self, message):
        print("ERROR USAGE: %s" % " ".join(message.split()), file=sys.stderr)
        raise SystemExit(2)


def _build_parser():
    parser = _Parser(
        prog="triangle-risk",
        description="Reserve simulation and economic capital for loss triangles.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, func, text in (
        ("fit", cmd_fit, "fit per-line marginals and the dependence tree"),
        ("simulate", cmd_simulate, "complete lower triangles by Monte Carlo"),
        ("report", cmd_report, "compute the capital report from scenarios"),
    ):
        sub = commands.add_parser(name, help=text, description=text)
        sub.add_argument("--config", required=True, help="JSON configuration file")
        sub.add_argument("--seed", type=int, help="override the random seed")
        sub.add_argument(
            "--n", type=int, dest="n_scenarios", help="override the scenario count"
        )
        sub.add_argument(
            "--alpha", type=float, help="override the capital confidence level"
        )
        sub.add_argument("--threads", type=int, help="override the thread count")
        sub.add_argument(
            "--p",
            dest="index_p",
            help="Tweedie power: 'grid' or a number applied to every line",
        )
        sub.add_argument(
            "--gof",
            action="store_true",
            default=None,
            help="bootstrap copula goodness-of-fit p-values during fit",
        )
        sub.set_defaults(func=func)
    return parser


_ERROR_CODES = (
    (ConfigError, "CONFIG", 2),
    (IngestionError, "INGEST", 2),
    (SimulationError, "SCENARIO", 2),
    (FitError, "FIT", 1),
    (AccuracyError, "ACCURACY", 1),
    (DomainError, "DOMAIN", 2),
    (TriangleRiskError, "RUNTIME", 1),
    (OSError, "IO", 2),
)


def _emit_error(code, exc):
    print("ERROR %s: %s" % (code, " ".join(str(exc).split())), file=sys.stderr)


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "n_scenarios", "alpha", "threads")
        if getattr(args, key) is not None
    }
    if args.index_p is not None:
        if args.index_p == "grid":
            overrides["p"] = "grid"
        else:
            try:
                overrides["p"] = float(args.index_p)
            except ValueError:
                _emit_error(
                    "USAGE", "--p takes 'grid' or a number, got %r" % args.index_p
                )
                return 2
    if args.gof is not None:
        overrides["gof"] = True
    try:
        config = RunConfig.load(args.config, overrides)
        return args.func(config)
    except Exception as exc:  # noqa: BLE001 - single reporting funnel
        for exc_type, code, status in _ERROR_CODES:
            if isinstance(exc, exc_type):
                _emit_error(code, exc)
                return status
        _emit_error("INTERNAL", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
