"""Monte Carlo harness for coverage and precision studies.

A study fixes one finite population (drawn once from a data-generating
process, then frozen), computes the true g-scale effect from it, and
re-randomizes the treatment assignment R times.  Every configured estimator
runs on every assignment; per-row summaries are the usual sqrt(n)-scaled
bias, SD, RMSE, mean estimated SE, and CI coverage of the truth.

Reproducibility contract: the population uses the Philox stream
(seed, 0) and replication r uses stream (seed, r + 1), so identical
scenario + seed gives a bit-identical table regardless of execution order;
results are aggregated by replication index.
"""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ate import (
    AteResult,
    GScale,
    ImputationSpec,
    adjusted_imputation,
    fit_optimal_adjustment,
    fit_working_model,
    gscale,
    mean_adjustment,
    tau_model_assisted,
    tau_model_based,
    tau_model_imputed,
    tau_unadjusted,
)
from .errors import (
    ConvergenceError,
    DataError,
    NumericalError,
    RandzestError,
    SpecificationError,
)
from .estfun import (
    MeanSpec,
    binomial_family,
    gaussian_family,
    moment_kappa,
    negbin_family,
    poisson_family,
)
from .finitepop import Dataset, PotentialTable, draw_assignment, enumerate_assignments, make_rng, observe
from .zestim import ZFit

_FAMILY_DISPLAY = {
    "poisson": "Pois",
    "negbin": "NBin",
    "gaussian": "Linear",
    "binomial": "Logit",
}
_KIND_DISPLAY = {
    "b": "B",
    "i": "I",
    "ma": "A",
    "ai": "AI",
    "unadjusted": "",
}


@dataclass(frozen=True)
class EstimatorConfig:
    """One table row: which estimator, which working model, how fitted.

    ``kappa`` is a number, or "moment" for the per-arm method-of-moments
    dispersion recomputed on every replication (negbin only).  ``imputations``
    configures the first stage of the adjusted-imputation estimator as
    (family, method, kappa) triples.
    """

    kind: str  # b | i | ma | ai | unadjusted
    family: Optional[str] = None
    interaction: bool = False
    method: str = "mle"  # mle | squared-loss (for kind="ma")
    kappa: object = "moment"
    imputations: tuple = ()
    g: Optional[str] = None  # overrides the scenario scale
    model_label: Optional[str] = None
    interaction_label: Optional[str] = None
    estimation_label: Optional[str] = None

    def labels(self) -> tuple[str, str, str]:
        model = self.model_label
        if model is None:
            model = _FAMILY_DISPLAY.get(self.family or "", self.family or "")
            if self.kind == "unadjusted":
                model = "Unadjusted"
        inter = self.interaction_label
        if inter is None:
            inter = "" if self.kind == "unadjusted" else ("Yes" if self.interaction else "No")
        estimation = self.estimation_label
        if estimation is None:
            estimation = _KIND_DISPLAY.get(self.kind, self.kind)
            if self.kind == "ma" and self.method == "squared-loss":
                estimation = "A (squared loss)"
        return model, inter, estimation


@dataclass(frozen=True)
class Scenario:
    """A full study description; see the bundled *.scenario files."""

    dgp: str  # heterogeneous | null | custom
    n: int
    n1: int
    estimators: tuple[EstimatorConfig, ...]
    g: str = "log"
    seed: int = 0
    replications: int = 10_000
    alpha: float = 0.05
    custom_generator: Optional[Callable[[np.random.Generator], PotentialTable]] = None

    def __post_init__(self):
        if not 1 <= self.n1 <= self.n - 1:
            raise SpecificationError(f"need 1 <= n1 <= N-1, got n1={self.n1}, N={self.n}")
        if not self.estimators:
            raise SpecificationError("scenario needs a non-empty estimator roster")
        if self.dgp not in ("heterogeneous", "null", "custom"):
            raise SpecificationError(f"unknown dgp '{self.dgp}'")
        if self.dgp == "custom" and self.custom_generator is None:
            raise SpecificationError("custom dgp needs a generator callable")


def gen_population(s: Scenario, rng: np.random.Generator) -> PotentialTable:
    """Draw and freeze one finite population for the scenario.

    Heterogeneous-effects process:
        Y(0) = 6 + exp(1 + X1 + X2) + 3 e0
        Y(1) = 11 + exp(3 - X1^2 - X2) + 3 e1
    Null-effects process:
        Y(1) = Y(0) = 10 + exp(1 + X1 - 0.5 X2) + 3 e
    with X1, X2 and the noise terms independent standard normal.  Outcomes
    are rounded to the nearest integer and floored at zero, making them
    counts.  The estimators see only (X1, X2).
    """
    if s.dgp == "custom":
        return s.custom_generator(rng)
    x = rng.standard_normal((s.n, 2))
    x1, x2 = x[:, 0], x[:, 1]
    if s.dgp == "heterogeneous":
        e0 = rng.standard_normal(s.n)
        e1 = rng.standard_normal(s.n)
        y0 = 6.0 + np.exp(1.0 + x1 + x2) + 3.0 * e0
        y1 = 11.0 + np.exp(3.0 - x1**2 - x2) + 3.0 * e1
    else:  # null
        e = rng.standard_normal(s.n)
        y0 = 10.0 + np.exp(1.0 + x1 - 0.5 * x2) + 3.0 * e
        y1 = y0
    y0 = np.clip(np.rint(y0), 0.0, None)
    y1 = np.clip(np.rint(y1), 0.0, None)
    return PotentialTable(y1, y0, x)


# ---------------------------------------------------------------------------
# Estimator construction with a per-replication fit cache
# ---------------------------------------------------------------------------

_FAMILY_BUILDERS = {
    "poisson": poisson_family,
    "gaussian": gaussian_family,
    "linear": gaussian_family,
    "binomial": binomial_family,
    "logistic": binomial_family,
}


def _build_spec(d: Dataset, family: str, interaction: bool, kappa) -> MeanSpec:
    if family == "negbin":
        fam = negbin_family(moment_kappa(d) if kappa == "moment" else kappa)
    else:
        try:
            fam = _FAMILY_BUILDERS[family]()
        except KeyError:
            raise SpecificationError(f"unknown family '{family}'") from None
    return MeanSpec(fam, interaction, d.x.shape[1])


def _mle_fit(d: Dataset, family: str, interaction: bool, kappa, cache: dict):
    key = ("mle", family, interaction, str(kappa))
    if key not in cache:
        spec = _build_spec(d, family, interaction, kappa)
        fit = fit_working_model(d, spec)
        if not fit.converged:
            raise ConvergenceError(f"{family} fit did not converge: {fit.message}")
        cache[key] = (spec, fit)
    return cache[key]


def _sq_fit(d: Dataset, family: str, interaction: bool, cache: dict):
    # Poisson and negbin share the exponential mean form; normalize the key.
    mean_family = "poisson" if family in ("poisson", "negbin") else family
    key = ("sq", mean_family, interaction)
    if key not in cache:
        spec = _build_spec(d, mean_family, interaction, None)
        theta0 = None
        if mean_family != "gaussian":
            try:
                _, warm = _mle_fit(d, mean_family, interaction, None, cache)
                theta0 = warm.theta_hat
            except (RandzestError, np.linalg.LinAlgError):
                theta0 = None
        fit = fit_optimal_adjustment(d, spec, theta0)
        if not fit.converged:
            raise ConvergenceError(f"squared-loss fit did not converge: {fit.message}")
        cache[key] = (spec, fit)
    return cache[key]


def _check_family(name: Optional[str]) -> None:
    if name is not None and name not in _FAMILY_BUILDERS and name != "negbin":
        raise SpecificationError(f"unknown family '{name}'")


def build_estimator(
    config: EstimatorConfig, default_g: GScale
) -> Callable[[Dataset, dict], AteResult]:
    """Compile a config into an ``estimate(dataset, cache)`` callable."""
    g = gscale(config.g) if config.g else default_g
    kind = config.kind
    _check_family(config.family)
    for imp in config.imputations:
        _check_family(imp.get("family"))

    if kind == "unadjusted":
        return lambda d, cache: tau_unadjusted(d, g)

    if kind in ("b", "i"):
        if config.family is None:
            raise SpecificationError(f"estimator kind '{kind}' needs a family")

        def estimate(d: Dataset, cache: dict) -> AteResult:
            spec, fit = _mle_fit(d, config.family, config.interaction, config.kappa, cache)
            if kind == "b":
                return tau_model_based(d, spec, fit, g)
            return tau_model_imputed(d, spec, fit, g)

        return estimate

    if kind == "ma":
        if config.family is None:
            raise SpecificationError("estimator kind 'ma' needs a family")
        if config.method not in ("mle", "squared-loss"):
            raise SpecificationError(f"unknown ma method '{config.method}'")

        def estimate(d: Dataset, cache: dict) -> AteResult:
            if config.method == "mle":
                spec, fit = _mle_fit(d, config.family, config.interaction, config.kappa, cache)
            else:
                spec, fit = _sq_fit(d, config.family, config.interaction, cache)
            h1, h0 = mean_adjustment(spec)
            return tau_model_assisted(d, h1, h0, fit.theta_hat, g, fits=(fit,))

        return estimate

    if kind == "ai":
        if not config.imputations:
            raise SpecificationError("estimator kind 'ai' needs imputations")

        def estimate(d: Dataset, cache: dict) -> AteResult:
            specs: list[ImputationSpec] = []
            fitted: list[ZFit] = []
            for imp in config.imputations:
                family = imp.get("family")
                interaction = bool(imp.get("interaction", True))
                method = imp.get("method", "mle")
                kappa = imp.get("kappa", "moment")
                if method == "mle":
                    spec, fit = _mle_fit(d, family, interaction, kappa, cache)
                elif method == "squared-loss":
                    spec, fit = _sq_fit(d, family, interaction, cache)
                else:
                    raise SpecificationError(f"unknown imputation method '{method}'")
                specs.append(ImputationSpec(spec, method))
                fitted.append(fit)
            return adjusted_imputation(d, specs, g, fitted=fitted)

        return estimate

    raise SpecificationError(f"unknown estimator kind '{kind}'")


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyRow:
    model: str
    interaction: str
    estimation: str
    sqrt_n_bias: float
    sqrt_n_sd: float
    sqrt_n_rmse: float
    sqrt_n_ese: float
    coverage: float
    replications_used: int
    failures: int


@dataclass(frozen=True)
class StudyTable:
    rows: tuple[StudyRow, ...]
    truth: float
    n: int
    n1: int
    replications: int
    g: str
    seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["Model", "Interaction", "Estimation", "Bias", "SD", "RMSE", "ESE",
             "Coverage", "Used", "Failures"]
        )
        for row in self.rows:
            writer.writerow([
                row.model, row.interaction, row.estimation,
                f"{row.sqrt_n_bias:.4f}", f"{row.sqrt_n_sd:.4f}",
                f"{row.sqrt_n_rmse:.4f}", f"{row.sqrt_n_ese:.4f}",
                f"{row.coverage:.4f}", row.replications_used, row.failures,
            ])
        return buf.getvalue()

    def row(self, estimation: str, model: Optional[str] = None) -> StudyRow:
        for row in self.rows:
            if row.estimation == estimation and (model is None or row.model == model):
                return row
        raise KeyError(f"no row with estimation='{estimation}', model={model!r}")


_FAILURE_KINDS = (RandzestError, np.linalg.LinAlgError, FloatingPointError)


def _worker_count() -> int:
    raw = os.environ.get("RANDZEST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_study(
    s: Scenario,
    replications: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> StudyTable:
    """Run the full Monte Carlo study for one scenario.

    Failed replications (non-convergence, scale-domain violations, singular
    fits) are excluded from that estimator's aggregates and counted; a
    failure share above 1% triggers a study-level warning.
    """
    reps = s.replications if replications is None else int(replications)
    if reps < 2:
        raise SpecificationError("a study needs at least 2 replications")
    g = gscale(s.g)
    pop_rng = rng if rng is not None else make_rng(s.seed, stream=0)
    pot = gen_population(s, pop_rng)
    truth = float(g.g(np.mean(pot.y1)) - g.g(np.mean(pot.y0)))

    estimators = [build_estimator(cfg, g) for cfg in s.estimators]
    n_est = len(estimators)
    est = np.full((n_est, reps), np.nan)
    ses = np.full((n_est, reps), np.nan)
    covered = np.zeros((n_est, reps), dtype=bool)
    failed = np.zeros((n_est, reps), dtype=bool)

    def run_one(rep: int) -> None:
        rep_rng = make_rng(s.seed, stream=rep + 1)
        data = observe(pot, draw_assignment(rep_rng, s.n, s.n1))
        cache: dict = {}
        for j, estimate in enumerate(estimators):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    result = estimate(data, cache)
                lo, hi = result.ci(s.alpha)
            except _FAILURE_KINDS:
                failed[j, rep] = True
                continue
            est[j, rep] = result.tau_hat
            ses[j, rep] = np.sqrt(result.variance_hat)
            covered[j, rep] = lo <= truth <= hi

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, range(reps)))
    else:
        for rep in range(reps):
            run_one(rep)

    scale = np.sqrt(s.n)
    rows = []
    for j, cfg in enumerate(s.estimators):
        ok = ~failed[j]
        used = int(ok.sum())
        if used < 2:
            raise NumericalError(
                f"estimator {cfg.labels()} failed in {reps - used} of {reps} replications"
            )
        e = est[j, ok]
        bias = float(e.mean() - truth)
        sd = float(e.std(ddof=1))
        rmse = float(np.sqrt(np.mean((e - truth) ** 2)))
        ese = float(ses[j, ok].mean())
        model, inter, estimation = cfg.labels()
        rows.append(StudyRow(
            model=model, interaction=inter, estimation=estimation,
            sqrt_n_bias=scale * bias, sqrt_n_sd=scale * sd,
            sqrt_n_rmse=scale * rmse,
            sqrt_n_ese=ese,  # per-rep SE already scales by sqrt(variance_hat)
            coverage=float(covered[j, ok].mean()),
            replications_used=used, failures=reps - used,
        ))
        if (reps - used) > 0.01 * reps:
            warnings.warn(
                f"estimator {cfg.labels()} failed in {reps - used} of {reps} "
                "replications; aggregates use the remainder",
                RuntimeWarning,
            )
    return StudyTable(
        rows=tuple(rows), truth=truth, n=s.n, n1=s.n1,
        replications=reps, g=s.g, seed=s.seed,
    )


# ---------------------------------------------------------------------------
# Exact randomization distribution (small-N oracle)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactDistribution:
    mean: float
    variance: float  # exact second moment about the mean (divisor C)
    values: np.ndarray


def exact_randomization_distribution(
    pot: PotentialTable,
    n1: int,
    statistic: Callable[[Dataset], float],
    cap: int = 10**6,
) -> ExactDistribution:
    """Evaluate a statistic on every assignment and return its exact law."""
    values = np.array([
        statistic(observe(pot, a)) for a in enumerate_assignments(pot.n, n1, cap=cap)
    ])
    return ExactDistribution(
        mean=float(values.mean()),
        variance=float(values.var(ddof=0)),
        values=values,
    )


# ---------------------------------------------------------------------------
# Scenario files (JSON)
# ---------------------------------------------------------------------------

def scenario_from_dict(doc: dict) -> Scenario:
    try:
        raw_estimators = doc["estimators"]
        configs = tuple(
            EstimatorConfig(
                kind=e["kind"],
                family=e.get("family"),
                interaction=bool(e.get("interaction", False)),
                method=e.get("method", "mle"),
                kappa=e.get("kappa", "moment"),
                imputations=tuple(e.get("imputations", ())),
                g=e.get("g"),
                model_label=e.get("model"),
                interaction_label=e.get("interaction_label"),
                estimation_label=e.get("estimation"),
            )
            for e in raw_estimators
        )
        return Scenario(
            dgp=doc["dgp"],
            n=int(doc["N"]),
            n1=int(doc["n1"]),
            estimators=configs,
            g=doc.get("g", "log"),
            seed=int(doc.get("seed", 0)),
            replications=int(doc.get("replications", 10_000)),
            alpha=float(doc.get("alpha", 0.05)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad scenario document: {exc}") from exc


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scenario file {path}: {exc}") from exc
    return scenario_from_dict(doc)


def bundled_scenario_path(name: str) -> str:
    """Path of a scenario file shipped with the package (e.g. 'table_a1')."""
    here = os.path.dirname(__file__)
    path = os.path.join(here, "scenarios", f"{name}.scenario")
    if not os.path.exists(path):
        raise DataError(f"no bundled scenario named '{name}'")
    return path
