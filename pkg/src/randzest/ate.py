"""Average-treatment-effect estimation on a g-scale.

Three estimator families share the same fitted working models:

* model-based: average of per-unit fitted contrasts, biased in general;
* model-imputed: plug the averaged imputations into g, consistent only for
  canonical maximum-likelihood fits;
* model-assisted: compare arm averages of mean-preserving adjusted
  outcomes, consistent for any adjustment function and any parameter value.

All variances here scale sqrt(N) * (estimator - estimand); confidence
intervals divide by N.  Scale-domain violations raise rather than clamp, so
coverage studies cannot be silently corrupted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConvergenceError, DomainError, SpecificationError
from .estfun import (
    GAUSSIAN,
    MeanSpec,
    glm_mean,
    glm_score_estfun,
    poisson_family,
    squared_loss_estfun,
)
from .finitepop import Dataset, group_moments
from .zestim import ZFit, solve


@dataclass(frozen=True)
class GScale:
    """A scale function g with derivative, for effects g(Ybar1) - g(Ybar0)."""

    name: str
    g: Callable[[np.ndarray], np.ndarray]
    gdot: Callable[[np.ndarray], np.ndarray]
    in_domain: Callable[[np.ndarray], np.ndarray]


IDENTITY = GScale(
    "identity",
    g=lambda y: np.asarray(y, dtype=float),
    gdot=lambda y: np.ones_like(np.asarray(y, dtype=float)),
    in_domain=lambda y: np.isfinite(np.asarray(y, dtype=float)),
)
LOG = GScale(
    "log",
    g=np.log,
    gdot=lambda y: 1.0 / np.asarray(y, dtype=float),
    in_domain=lambda y: np.asarray(y, dtype=float) > 0,
)
LOGIT = GScale(
    "logit",
    g=lambda y: np.log(np.asarray(y, dtype=float) / (1.0 - np.asarray(y, dtype=float))),
    gdot=lambda y: 1.0 / (np.asarray(y, dtype=float) * (1.0 - np.asarray(y, dtype=float))),
    in_domain=lambda y: (np.asarray(y, dtype=float) > 0) & (np.asarray(y, dtype=float) < 1),
)

_SCALES = {s.name: s for s in (IDENTITY, LOG, LOGIT)}


def gscale(name: str) -> GScale:
    try:
        return _SCALES[name.lower()]
    except KeyError:
        raise SpecificationError(
            f"unknown g-scale '{name}'; expected one of {sorted(_SCALES)}"
        ) from None


def _require_domain(g: GScale, values: np.ndarray, what: str) -> None:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    ok = g.in_domain(values)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)
        preview = ", ".join(str(int(i)) for i in bad[:10])
        raise DomainError(
            f"{what} outside the domain of g={g.name} at "
            f"{bad.size} position(s): [{preview}]"
        )


@dataclass(eq=False)
class AteResult:
    """Point estimate plus the variance of its sqrt(N)-scaled version."""

    tau_hat: float
    variance_hat: float
    estimator_kind: str
    g_scale: str
    n_units: int
    fits: tuple[ZFit, ...] = ()

    def se(self) -> float:
        return float(np.sqrt(self.variance_hat / self.n_units))

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        if not 0.0 < alpha < 1.0:
            raise SpecificationError(f"alpha must be in (0, 1), got {alpha}")
        zq = float(stats.norm.ppf(1.0 - alpha / 2.0))
        half = zq * self.se()
        return self.tau_hat - half, self.tau_hat + half

    def to_document(self, alpha: float = 0.05) -> dict:
        lo, hi = self.ci(alpha)
        return {
            "tau_hat": float(self.tau_hat),
            "se": self.se(),
            "ci_low": float(lo),
            "ci_high": float(hi),
            "alpha": float(alpha),
            "estimator_kind": self.estimator_kind,
            "g_scale": self.g_scale,
        }


def ate_confidence_interval(r: AteResult, alpha: float = 0.05) -> tuple[float, float]:
    """Normal-quantile interval tau_hat +/- z * sqrt(variance_hat / N)."""
    return r.ci(alpha)


# ---------------------------------------------------------------------------
# Model-based and model-imputed estimators (delta-method variance)
# ---------------------------------------------------------------------------

def _fd_gradient(fun: Callable[[np.ndarray], float], theta: np.ndarray) -> np.ndarray:
    """Central differences with per-coordinate step 1e-6 * (1 + |theta_k|)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for k in range(len(theta)):
        h = 1e-6 * (1.0 + abs(theta[k]))
        up = theta.copy()
        dn = theta.copy()
        up[k] += h
        dn[k] -= h
        fu, fd = fun(up), fun(dn)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise DomainError(
                "scale function left its domain while differentiating the "
                f"effect map at coordinate {k}"
            )
        grad[k] = (fu - fd) / (2.0 * h)
    return grad


def _delta_variance(fun: Callable[[np.ndarray], float], fit: ZFit) -> float:
    if fit.sigma_hat is None:
        raise ConvergenceError("fit has no sandwich covariance for the delta method")
    grad = _fd_gradient(fun, fit.theta_hat)
    return max(float(grad @ fit.sigma_hat @ grad), 0.0)


def tau_model_based(d: Dataset, spec: MeanSpec, fit: ZFit, g: GScale) -> AteResult:
    """Average of per-unit fitted contrasts g(h1(x)) - g(h0(x))."""
    h1 = glm_mean(spec, 1, d.x, fit.theta_hat)
    h0 = glm_mean(spec, 0, d.x, fit.theta_hat)
    _require_domain(g, h1, "treated fitted means")
    _require_domain(g, h0, "control fitted means")

    def effect_map(theta: np.ndarray) -> float:
        return float(np.mean(
            g.g(glm_mean(spec, 1, d.x, theta)) - g.g(glm_mean(spec, 0, d.x, theta))
        ))

    return AteResult(
        tau_hat=effect_map(fit.theta_hat),
        variance_hat=_delta_variance(effect_map, fit),
        estimator_kind="B",
        g_scale=g.name,
        n_units=d.n,
        fits=(fit,),
    )


def tau_model_imputed(d: Dataset, spec: MeanSpec, fit: ZFit, g: GScale) -> AteResult:
    """Contrast of g applied to population-averaged imputations."""
    m1 = float(np.mean(glm_mean(spec, 1, d.x, fit.theta_hat)))
    m0 = float(np.mean(glm_mean(spec, 0, d.x, fit.theta_hat)))
    _require_domain(g, np.array([m1]), "treated imputation average")
    _require_domain(g, np.array([m0]), "control imputation average")

    def effect_map(theta: np.ndarray) -> float:
        a1 = float(np.mean(glm_mean(spec, 1, d.x, theta)))
        a0 = float(np.mean(glm_mean(spec, 0, d.x, theta)))
        if not (g.in_domain(np.array([a1]))[0] and g.in_domain(np.array([a0]))[0]):
            return np.nan
        return float(g.g(a1) - g.g(a0))

    return AteResult(
        tau_hat=float(g.g(m1) - g.g(m0)),
        variance_hat=_delta_variance(effect_map, fit),
        estimator_kind="I",
        g_scale=g.name,
        n_units=d.n,
    fits=(fit,),
    )


# ---------------------------------------------------------------------------
# Model-assisted estimator
# ---------------------------------------------------------------------------

def _ma_from_values(
    d: Dataset,
    adj1: np.ndarray,
    adj0: np.ndarray,
    g: GScale,
    kind: str,
    fits: tuple[ZFit, ...],
) -> AteResult:
    """Model-assisted estimate from per-unit adjustment values.

    The observed outcome of every unit is shifted by its own arm's
    adjustment, recentered by that adjustment's population average, so each
    arm average stays unbiased for the corresponding potential-outcome mean.
    """
    adj1 = np.asarray(adj1, dtype=float)
    adj0 = np.asarray(adj0, dtype=float)
    treated = d.arm_mask(1)
    adjusted = np.where(
        treated,
        d.y - adj1 + adj1.mean(),
        d.y - adj0 + adj0.mean(),
    )
    dummy = Dataset(d.assignment, adjusted, d.x)
    mean1, var1 = group_moments(dummy, 1)
    mean0, var0 = group_moments(dummy, 0)
    _require_domain(g, np.array([mean1]), "treated adjusted mean")
    _require_domain(g, np.array([mean0]), "control adjusted mean")
    tau = float(g.g(mean1) - g.g(mean0))
    variance = (
        float(g.gdot(mean1)) ** 2 * var1 / d.r1
        + float(g.gdot(mean0)) ** 2 * var0 / d.r0
    )
    return AteResult(
        tau_hat=tau,
        variance_hat=max(variance, 0.0),
        estimator_kind=kind,
        g_scale=g.name,
        n_units=d.n,
        fits=fits,
    )


def tau_model_assisted(
    d: Dataset,
    h1: Callable[[np.ndarray, np.ndarray], np.ndarray],
    h0: Callable[[np.ndarray, np.ndarray], np.ndarray],
    theta,
    g: GScale,
    *,
    kind: str = "A",
    fits: tuple[ZFit, ...] = (),
) -> AteResult:
    """Model-assisted estimator with adjustment functions h_z(x; theta).

    ``theta`` may be predetermined or fitted; consistency does not depend
    on it.  The conservative variance is the sample analogue that drops the
    unidentifiable potential-outcome cross term.
    """
    theta = np.asarray(theta, dtype=float)
    return _ma_from_values(
        d, np.asarray(h1(d.x, theta), dtype=float),
        np.asarray(h0(d.x, theta), dtype=float), g, kind, fits,
    )


def mean_adjustment(spec: MeanSpec):
    """Adjustment-function pair built from a working model's means."""

    def h1(x, theta):
        return glm_mean(spec, 1, x, theta)

    def h0(x, theta):
        return glm_mean(spec, 0, x, theta)

    return h1, h0


def tau_unadjusted(d: Dataset, g: GScale) -> AteResult:
    """Difference of g(arm means): model-assisted with zero adjustment."""

    def zero(x, theta):
        return np.zeros(x.shape[0])

    return tau_model_assisted(d, zero, zero, np.zeros(0), g, kind="unadjusted")


def fit_working_model(d: Dataset, spec: MeanSpec, theta0=None) -> ZFit:
    """Maximum-likelihood fit of a working GLM via Z-estimation."""
    return solve(d, glm_score_estfun(spec), theta0)


def fit_optimal_adjustment(d: Dataset, spec: MeanSpec, theta0=None) -> ZFit:
    """Per-arm squared-loss fit of the adjustment functions.

    Minimizing the empirical squared-error risk per arm minimizes the
    estimated model-assisted variance over all parameter values sharing the
    adjustment form.  Nonlinear mean forms get a warm start from the
    canonical fit with the same mean function, which keeps the Newton
    search inside the basin of the least-squares root.
    """
    estfun = squared_loss_estfun(spec)  # raises if parameters are shared
    if theta0 is None and spec.family.kind != GAUSSIAN:
        warm_family = poisson_family() if spec.family.kind != "binomial-logit" \
            else spec.family
        warm = MeanSpec(warm_family, True, spec.n_covariates)
        prefit = solve(d, glm_score_estfun(warm), compute_sandwich=False)
        if prefit.converged:
            theta0 = prefit.theta_hat
    return solve(d, estfun, theta0)


# ---------------------------------------------------------------------------
# Two-step adjustment on imputed potential outcomes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImputationSpec:
    """One first-stage imputation model and how to estimate its parameter."""

    spec: MeanSpec
    method: str = "mle"  # "mle" or "squared-loss"

    def fit(self, d: Dataset) -> ZFit:
        if self.method == "mle":
            return fit_working_model(d, self.spec)
        if self.method == "squared-loss":
            return fit_optimal_adjustment(d, self.spec)
        raise SpecificationError(
            f"unknown imputation method '{self.method}'; use 'mle' or 'squared-loss'"
        )


def _arm_least_squares(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS coefficients with a deterministic ridge fallback on collinearity."""
    gram = design.T @ design
    rhs = design.T @ y
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        lam = 1e-8 * np.trace(gram) / design.shape[1]
        warnings.warn(
            "imputed adjustment columns are collinear; ridge-regularizing "
            f"the second-stage least squares (lambda={lam:.3e})",
            RuntimeWarning,
            stacklevel=3,
        )
        gram = gram + lam * np.eye(design.shape[1])
    return np.linalg.solve(gram, rhs)


def adjusted_imputation(
    d: Dataset,
    imputations: Sequence[ImputationSpec],
    g: GScale,
    fitted: Optional[Sequence[ZFit]] = None,
) -> AteResult:
    """Model-assisted estimation on linearly combined imputations.

    Step 1 fits each imputation model by its own method; step 2 regresses
    the observed outcome, per arm, on an intercept plus all 2J imputed
    columns; step 3 runs the model-assisted estimator with the fitted
    linear adjustment and its conservative variance.  ``fitted`` can supply
    already-computed first-stage fits (matched by position) to skip step 1.
    """
    if not imputations:
        raise SpecificationError("adjusted imputation needs at least one model")
    if fitted is not None and len(fitted) != len(imputations):
        raise SpecificationError("fitted must match imputations one for one")
    fits: list[ZFit] = []
    columns: list[np.ndarray] = []
    for k, imp in enumerate(imputations):
        fit = fitted[k] if fitted is not None else imp.fit(d)
        if not fit.converged:
            raise ConvergenceError(
                f"first-stage imputation fit did not converge: {fit.message}"
            )
        fits.append(fit)
        columns.append(glm_mean(imp.spec, 0, d.x, fit.theta_hat))
        columns.append(glm_mean(imp.spec, 1, d.x, fit.theta_hat))
    full_design = np.column_stack([np.ones(d.n)] + columns)
    adj = {}
    for arm in (1, 0):
        mask = d.arm_mask(arm)
        coef = _arm_least_squares(full_design[mask], d.y[mask])
        adj[arm] = full_design @ coef
    return _ma_from_values(d, adj[1], adj[0], g, "AI", tuple(fits))
