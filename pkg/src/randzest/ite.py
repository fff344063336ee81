"""Working models for individual treatment effects.

No individual effect tau_i = Y_i(1) - Y_i(0) is ever observed, but each one
has the unbiased single-unit estimate

    tau_hat_i = Z_i Y_i / r1 - (1 - Z_i) Y_i / r0,

and any estimating equation that is linear in the tau_i's stays estimable
after substituting tau_hat_i.  That restricts the working models to an
exponential-dispersion shape with natural-parameter part v(x; theta) and
normalizer u(x; theta); the dispersion never enters the equation and is not
estimated.  The per-arm estimating functions are

    psi_1 =  y / r1 * vdot(x; theta) - udot(x; theta)
    psi_0 = -y / r0 * vdot(x; theta) - udot(x; theta),

solved with the generic Z-estimation machinery and covered by the same
conservative sandwich.  Model callables receive whatever covariate rows the
caller supplies and prepend their own intercept column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import SpecificationError
from .estfun import EstimatingFunction
from .finitepop import Dataset, fp_var
from .zestim import ZFit, empirical_jacobian, empirical_psi, sandwich, solve


def pseudo_effects(d: Dataset) -> np.ndarray:
    """Unbiased per-unit effect estimates Z*Y/r1 - (1-Z)*Y/r0."""
    z = d.z.astype(float)
    return z * d.y / d.r1 - (1.0 - z) * d.y / d.r0


def pseudo_effects_adjusted(
    d: Dataset,
    h1: Callable[[np.ndarray, np.ndarray], np.ndarray],
    h0: Callable[[np.ndarray, np.ndarray], np.ndarray],
    theta_fixed,
) -> np.ndarray:
    """Residualized pseudo effects around fixed imputation functions.

    Exactly unbiased only because ``theta_fixed`` is predetermined; fitting
    theta on the same data voids the guarantee, so no fitted variant is
    offered.
    """
    theta = np.asarray(theta_fixed, dtype=float)
    a1 = np.asarray(h1(d.x, theta), dtype=float)
    a0 = np.asarray(h0(d.x, theta), dtype=float)
    z = d.z.astype(float)
    return (a1 - a0) + z * (d.y - a1) / d.r1 - (1.0 - z) * (d.y - a0) / d.r0


@dataclass(frozen=True, eq=False)
class EdfTauModel:
    """Effect working model: v is the natural-parameter part, u the normalizer.

    ``v``/``u`` map (x, theta) to per-unit values; ``vdot``/``udot`` return
    (n, p) gradients and the optional Hessians (n, p, p) enable analytic
    Newton steps.
    """

    dim: int
    v: Callable[[np.ndarray, np.ndarray], np.ndarray]
    u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    vdot: Callable[[np.ndarray, np.ndarray], np.ndarray]
    udot: Callable[[np.ndarray, np.ndarray], np.ndarray]
    vhess: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    uhess: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    description: str = ""


def ite_estfun(model: EdfTauModel, r1: float) -> EstimatingFunction:
    """Estimating function whose empirical equation averages
    tau_hat_i * vdot - udot over all units."""
    if not 0.0 < r1 < 1.0:
        raise SpecificationError(f"r1 must be in (0, 1), got {r1}")
    r0 = 1.0 - r1

    def psi1(y, x, theta):
        y = np.asarray(y, dtype=float)
        return y[:, None] / r1 * model.vdot(x, theta) - model.udot(x, theta)

    def psi0(y, x, theta):
        y = np.asarray(y, dtype=float)
        return -y[:, None] / r0 * model.vdot(x, theta) - model.udot(x, theta)

    jac1 = jac0 = None
    if model.vhess is not None and model.uhess is not None:

        def jac1(y, x, theta):
            y = np.asarray(y, dtype=float)
            return y[:, None, None] / r1 * model.vhess(x, theta) - model.uhess(x, theta)

        def jac0(y, x, theta):
            y = np.asarray(y, dtype=float)
            return -y[:, None, None] / r0 * model.vhess(x, theta) - model.uhess(x, theta)

    def loss1(y, x, theta):
        y = np.asarray(y, dtype=float)
        return model.u(x, theta) - y / r1 * model.v(x, theta)

    def loss0(y, x, theta):
        y = np.asarray(y, dtype=float)
        return model.u(x, theta) + y / r0 * model.v(x, theta)

    return EstimatingFunction(
        dim=model.dim, psi1=psi1, psi0=psi0,
        jac1=jac1, jac0=jac0, loss1=loss1, loss0=loss0,
    )


def _intercepted(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return np.column_stack([np.ones(x.shape[0]), x])


def _with_columns(d: Dataset, columns) -> Dataset:
    """Swap in custom effect-model covariates, keeping outcome/assignment."""
    if columns is None:
        return d
    cols = np.asarray(columns, dtype=float)
    if cols.ndim == 1:
        cols = cols.reshape(-1, 1)
    if cols.shape[0] != d.n:
        raise SpecificationError(f"design has {cols.shape[0]} rows for {d.n} units")
    return Dataset(d.assignment, d.y, cols)


def normal_linear_model(n_columns: int) -> EdfTauModel:
    """Normal effect model with linear mean: v = x~'theta, u = v^2 / 2.

    ``n_columns`` counts the covariate columns; the intercept is prepended
    internally, so dim = n_columns + 1.
    """
    p = n_columns + 1

    def v(x, theta):
        return _intercepted(x) @ theta

    def u(x, theta):
        return 0.5 * (_intercepted(x) @ theta) ** 2

    def vdot(x, theta):
        return _intercepted(x)

    def udot(x, theta):
        design = _intercepted(x)
        return (design @ theta)[:, None] * design

    def vhess(x, theta):
        return np.zeros((np.asarray(x).shape[0], p, p))

    def uhess(x, theta):
        design = _intercepted(x)
        return design[:, :, None] * design[:, None, :]

    return EdfTauModel(
        dim=p, v=v, u=u, vdot=vdot, udot=udot, vhess=vhess, uhess=uhess,
        description="normal-linear",
    )


@dataclass(eq=False)
class NormalLinearFit:
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    fitted: np.ndarray  # per-unit linear approximations x~' theta_hat
    zfit: ZFit


def fit_normal_linear(d: Dataset, columns=None) -> NormalLinearFit:
    """Closed-form fit of the Normal-linear effect model.

    The root of the estimating equation is the least-squares projection of
    the pseudo effects on the intercept-augmented design (default design:
    the dataset covariates); the sandwich covariance comes from the generic
    machinery.
    """
    d_fit = _with_columns(d, columns)
    design = _intercepted(d_fit.x)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SpecificationError("effect-model design matrix is rank deficient")
    tau_hat = pseudo_effects(d_fit)
    theta = np.linalg.solve(design.T @ design / d.n, design.T @ tau_hat / d.n)

    estfun = ite_estfun(normal_linear_model(design.shape[1] - 1), d_fit.r1)
    psi = empirical_psi(d_fit, estfun, theta)
    zfit = ZFit(
        theta_hat=theta,
        converged=True,
        iterations=0,
        psi_norm=float(np.max(np.abs(psi))),
        jac_at_root=empirical_jacobian(d_fit, estfun, theta),
        n_units=d.n,
    )
    zfit.sigma_hat = sandwich(d_fit, estfun, zfit)
    return NormalLinearFit(
        theta_hat=theta,
        sigma_hat=zfit.sigma_hat,
        fitted=design @ theta,
        zfit=zfit,
    )


def ternary_model(n_columns: int, gamma: float) -> EdfTauModel:
    """Three-point effect model for binary outcomes (tau in {-1, 0, 1}).

    v = x~'beta and u = log(exp(v) + exp(-v) + gamma); gamma = 2 matches the
    modified-covariate likelihood, gamma = 1 the multinomial logit.  The
    predictor is clamped to +/-35 before exponentials.
    """
    p = n_columns + 1
    log_gamma = np.log(gamma)

    def _parts(x, theta):
        design = _intercepted(x)
        t = np.clip(design @ theta, -35.0, 35.0)
        ep, em = np.exp(t), np.exp(-t)
        return design, t, ep, em, ep + em + gamma

    def v(x, theta):
        return _intercepted(x) @ theta

    def u(x, theta):
        _, t, _, _, _ = _parts(x, theta)
        return np.logaddexp(np.logaddexp(t, -t), log_gamma)

    def vdot(x, theta):
        return _intercepted(x)

    def udot(x, theta):
        design, _, ep, em, denom = _parts(x, theta)
        return ((ep - em) / denom)[:, None] * design

    def vhess(x, theta):
        return np.zeros((np.asarray(x).shape[0], p, p))

    def uhess(x, theta):
        design, _, ep, em, denom = _parts(x, theta)
        sprime = (gamma * (ep + em) + 4.0) / denom**2
        return sprime[:, None, None] * design[:, :, None] * design[:, None, :]

    return EdfTauModel(
        dim=p, v=v, u=u, vdot=vdot, udot=udot, vhess=vhess, uhess=uhess,
        description=f"ternary(gamma={gamma})",
    )


@dataclass(eq=False)
class TernaryFit:
    beta_hat: np.ndarray
    sigma_hat: Optional[np.ndarray]
    zfit: ZFit


def fit_ternary(d: Dataset, gamma: float = 2.0, columns=None) -> TernaryFit:
    """Fit the ternary effect model to a binary-outcome experiment."""
    if not np.isin(d.y, (0.0, 1.0)).all():
        raise SpecificationError("ternary effect model needs outcomes in {0, 1}")
    if gamma <= 0:
        raise SpecificationError(f"gamma must be positive, got {gamma}")
    d_fit = _with_columns(d, columns)
    model = ternary_model(d_fit.x.shape[1], gamma)
    fit = solve(d_fit, ite_estfun(model, d_fit.r1))
    return TernaryFit(beta_hat=fit.theta_hat, sigma_hat=fit.sigma_hat, zfit=fit)


@dataclass(frozen=True)
class EffectDecomposition:
    """Split of effect variation into explained and residual parts.

    ``pseudo`` mode flags that the inputs were pseudo effects, whose
    variance overstates the variance of the true effects; treat those
    numbers as diagnostics only.
    """

    var_tau: float
    var_u: float
    var_resid: float
    r_squared: float
    mode: str

    @property
    def is_diagnostic_only(self) -> bool:
        return self.mode == "pseudo"


def effect_variance_decomposition(tau, u, mode: str = "oracle") -> EffectDecomposition:
    """Variance split Var(tau) ~ Var(u) + Var(tau - u) and uncentered R^2.

    R^2 = 1 - sum((tau - u)^2) / sum(tau^2); the additivity of the variance
    split is exact when u is the least-squares projection of tau on a
    design containing an intercept.
    """
    if mode not in ("oracle", "pseudo"):
        raise SpecificationError(f"mode must be 'oracle' or 'pseudo', got {mode}")
    tau = np.asarray(tau, dtype=float)
    u = np.asarray(u, dtype=float)
    if tau.shape != u.shape:
        raise SpecificationError(f"shapes differ: {tau.shape} vs {u.shape}")
    denom = float(np.sum(tau**2))
    rsq = 1.0 - float(np.sum((tau - u) ** 2)) / denom if denom > 0 else 0.0
    return EffectDecomposition(
        var_tau=fp_var(tau),
        var_u=fp_var(u),
        var_resid=fp_var(tau - u),
        r_squared=rsq,
        mode=mode,
    )
