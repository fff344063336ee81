"""Estimating functions and generalized-linear working models.

An :class:`EstimatingFunction` packages the pair of per-arm score functions
(psi_1, psi_0) that defines a Z-estimation problem, with optional analytic
Jacobians and loss functions.  All callables are vectorized over units:
``psi(y, x, theta)`` takes an outcome vector of length n and an (n, d)
covariate matrix and returns an (n, p) matrix of per-unit scores.

The concrete families here are the canonical-link GLMs (linear, logistic,
Poisson) plus negative binomial regression with a log link and fixed
dispersion.  Scores are normalized so the residual coefficient is one,
i.e. the dispersion factor is divided out; the root of the estimating
equation is unchanged and the dispersion never needs to be estimated.

Numerical guard: linear predictors are clamped to [-35, 35] before any
exponential/logistic evaluation.  Outside that range the clamped predictor
is treated as constant, so all derivatives vanish there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import SpecificationError

ETA_CLAMP = 35.0

GAUSSIAN = "gaussian-identity"
BINOMIAL = "binomial-logit"
POISSON = "poisson-log"
NEGBIN = "negbin-log"

CANONICAL_KINDS = (GAUSSIAN, BINOMIAL, POISSON)


@dataclass(frozen=True, eq=False)
class EstimatingFunction:
    """Vectorized per-arm estimating functions with optional extras.

    Attributes
    ----------
    dim : int
        Parameter dimension p.
    psi1, psi0 : callable(y, x, theta) -> (n, p)
        Per-unit scores for the treated / control arm.
    jac1, jac0 : callable(y, x, theta) -> (n, p, p), optional
        Analytic per-unit derivatives of psi with respect to theta.
    loss1, loss0 : callable(y, x, theta) -> (n,), optional
        Per-unit losses whose theta-gradients are psi1 / psi0.
    """

    dim: int
    psi1: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    psi0: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jac1: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    jac0: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    loss1: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    loss0: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None

    def psi(self, arm: int):
        return self.psi1 if arm == 1 else self.psi0

    def jac(self, arm: int):
        return self.jac1 if arm == 1 else self.jac0

    def loss(self, arm: int):
        return self.loss1 if arm == 1 else self.loss0

    @property
    def has_jacobian(self) -> bool:
        return self.jac1 is not None and self.jac0 is not None

    @property
    def has_loss(self) -> bool:
        return self.loss1 is not None and self.loss0 is not None


def _clamp(eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamped predictor and the 0/1 derivative factor of the clamp."""
    inside = (np.abs(eta) < ETA_CLAMP).astype(float)
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP), inside


@dataclass(frozen=True, eq=False)
class GlmFamily:
    """One exponential-dispersion family on the linear-predictor scale.

    ``mean``/``mean_deta``/``mean_deta2`` are the conditional-mean function
    and its first two predictor derivatives.  ``dloss_deta`` and
    ``d2loss_deta2`` are the derivatives of the (normalized) minus
    log-density, so the score in theta is ``dloss_deta * (1, x)``.
    ``kappa`` is the fixed negative-binomial dispersion (per arm); it is
    None for the canonical families.
    """

    kind: str
    kappa: Optional[tuple[float, float]] = None

    @property
    def is_canonical(self) -> bool:
        return self.kind in CANONICAL_KINDS

    def _kappa(self, arm: int) -> float:
        if self.kappa is None:
            raise SpecificationError("dispersion requested for a non-negbin family")
        return self.kappa[0] if arm == 1 else self.kappa[1]

    # -- mean function and derivatives (w.r.t. the linear predictor) --------

    def mean(self, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return np.asarray(eta, dtype=float)
        eta_c, _ = _clamp(np.asarray(eta, dtype=float))
        if self.kind == BINOMIAL:
            return 1.0 / (1.0 + np.exp(-eta_c))
        return np.exp(eta_c)  # poisson-log and negbin-log

    def mean_deta(self, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return np.ones_like(np.asarray(eta, dtype=float))
        eta_c, inside = _clamp(np.asarray(eta, dtype=float))
        if self.kind == BINOMIAL:
            mu = 1.0 / (1.0 + np.exp(-eta_c))
            return mu * (1.0 - mu) * inside
        return np.exp(eta_c) * inside

    def mean_deta2(self, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return np.zeros_like(np.asarray(eta, dtype=float))
        eta_c, inside = _clamp(np.asarray(eta, dtype=float))
        if self.kind == BINOMIAL:
            mu = 1.0 / (1.0 + np.exp(-eta_c))
            return mu * (1.0 - mu) * (1.0 - 2.0 * mu) * inside
        return np.exp(eta_c) * inside

    def link(self, mu: np.ndarray) -> np.ndarray:
        """Canonical link g = (mean)^-1 on the mean scale."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == GAUSSIAN:
            return mu
        if self.kind == BINOMIAL:
            return np.log(mu / (1.0 - mu))
        return np.log(mu)

    # -- normalized minus log-density and derivatives ------------------------

    def loss(self, y: np.ndarray, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eta_c, _ = _clamp(np.asarray(eta, dtype=float))
        if self.kind == GAUSSIAN:
            eta = np.asarray(eta, dtype=float)
            return 0.5 * eta**2 - y * eta
        if self.kind == BINOMIAL:
            return np.logaddexp(0.0, eta_c) - y * eta_c
        if self.kind == POISSON:
            return np.exp(eta_c) - y * eta_c
        # negbin, up to theta-free terms; log1p keeps large kappa stable
        kappa = self._kappa(arm)
        mu = np.exp(eta_c)
        return -y * eta_c + (y + kappa) * np.log1p(mu / kappa)

    def dloss_deta(self, y: np.ndarray, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.kind == GAUSSIAN:
            return np.asarray(eta, dtype=float) - y
        eta_c, inside = _clamp(np.asarray(eta, dtype=float))
        if self.kind in (BINOMIAL, POISSON):
            return (self.mean(eta) - y) * inside
        kappa = self._kappa(arm)
        mu = np.exp(eta_c)
        return -kappa * (y - mu) / (kappa + mu) * inside

    def d2loss_deta2(self, y: np.ndarray, eta: np.ndarray, arm: int = 1) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.kind == GAUSSIAN:
            return np.ones_like(y)
        eta_c, inside = _clamp(np.asarray(eta, dtype=float))
        if self.kind == BINOMIAL:
            mu = 1.0 / (1.0 + np.exp(-eta_c))
            return mu * (1.0 - mu) * inside
        if self.kind == POISSON:
            return np.exp(eta_c) * inside
        kappa = self._kappa(arm)
        mu = np.exp(eta_c)
        return kappa * mu * (kappa + y) / (kappa + mu) ** 2 * inside


def gaussian_family() -> GlmFamily:
    return GlmFamily(GAUSSIAN)


def binomial_family() -> GlmFamily:
    return GlmFamily(BINOMIAL)


def poisson_family() -> GlmFamily:
    return GlmFamily(POISSON)


def negbin_family(kappa) -> GlmFamily:
    """Negative binomial, log link, fixed dispersion.

    ``kappa`` is a positive scalar used for both arms, or a (treated,
    control) pair.  Larger kappa means closer to Poisson.
    """
    if np.isscalar(kappa):
        pair = (float(kappa), float(kappa))
    else:
        pair = (float(kappa[0]), float(kappa[1]))
    if pair[0] <= 0 or pair[1] <= 0:
        raise SpecificationError(f"negbin dispersion must be positive, got {pair}")
    return GlmFamily(NEGBIN, kappa=pair)


_FAMILY_BUILDERS = {
    "gaussian": gaussian_family,
    "linear": gaussian_family,
    "binomial": binomial_family,
    "logistic": binomial_family,
    "poisson": poisson_family,
}


@dataclass(frozen=True, eq=False)
class MeanSpec:
    """Arm-specific GLM mean functions h_z(x; theta) over a flat parameter.

    Layout with interaction (arm-specific slopes):
        theta = (alpha_1, alpha_0, beta_1[0..d-1], beta_0[0..d-1])
    Layout without interaction (one shared slope vector):
        theta = (alpha_1, alpha_0, beta[0..d-1])
    """

    family: GlmFamily
    interaction: bool
    n_covariates: int

    @property
    def dim(self) -> int:
        d = self.n_covariates
        return 2 + (2 * d if self.interaction else d)

    def indices(self, arm: int) -> np.ndarray:
        """Flat-theta positions of (alpha_arm, beta_arm)."""
        d = self.n_covariates
        alpha = 0 if arm == 1 else 1
        if self.interaction:
            start = 2 if arm == 1 else 2 + d
            beta = np.arange(start, start + d)
        else:
            beta = np.arange(2, 2 + d)
        return np.concatenate([[alpha], beta]).astype(int)

    def alpha_index(self, arm: int) -> int:
        return 0 if arm == 1 else 1

    def design(self, x: np.ndarray) -> np.ndarray:
        """Intercept-augmented covariate rows (n, d+1).

        Consumes the first ``n_covariates`` columns of x, so a narrower
        working model (intercept-only, say) can run on a wider dataset.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[1] < self.n_covariates:
            raise SpecificationError(
                f"model needs {self.n_covariates} covariates, data has {x.shape[1]}"
            )
        return np.column_stack([np.ones(x.shape[0]), x[:, : self.n_covariates]])

    def eta(self, arm: int, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise SpecificationError(
                f"theta has shape {theta.shape}, expected ({self.dim},)"
            )
        return self.design(x) @ theta[self.indices(arm)]


def glm_mean(spec: MeanSpec, arm: int, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Fitted conditional means h_arm(x; theta) for each covariate row."""
    return spec.family.mean(spec.eta(arm, x, theta), arm)


def _embed_scores(n: int, p: int, idx: np.ndarray, factor: np.ndarray,
                  design: np.ndarray) -> np.ndarray:
    out = np.zeros((n, p))
    out[:, idx] = factor[:, None] * design
    return out


def _embed_blocks(n: int, p: int, idx: np.ndarray, factor: np.ndarray,
                  design: np.ndarray) -> np.ndarray:
    out = np.zeros((n, p, p))
    block = factor[:, None, None] * design[:, :, None] * design[:, None, :]
    out[np.ix_(np.arange(n), idx, idx)] = block
    return out


def glm_score_estfun(spec: MeanSpec) -> EstimatingFunction:
    """Maximum-likelihood scores for the working GLM.

    psi_z has entries -(y - h_z(x; theta)) * (1, x) in the (alpha_z, beta_z)
    slots and zero in the other arm's slots (negative binomial replaces the
    raw residual with its dispersion-weighted form).  Analytic Jacobians and
    normalized minus log-density losses are attached.
    """
    fam = spec.family
    p = spec.dim

    def make_psi(arm: int):
        idx = spec.indices(arm)

        def psi(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            return _embed_scores(len(design), p, idx, fam.dloss_deta(y, eta, arm), design)

        return psi

    def make_jac(arm: int):
        idx = spec.indices(arm)

        def jac(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            return _embed_blocks(len(design), p, idx, fam.d2loss_deta2(y, eta, arm), design)

        return jac

    def make_loss(arm: int):
        idx = spec.indices(arm)

        def loss(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            return fam.loss(y, eta, arm)

        return loss

    return EstimatingFunction(
        dim=p,
        psi1=make_psi(1), psi0=make_psi(0),
        jac1=make_jac(1), jac0=make_jac(0),
        loss1=make_loss(1), loss0=make_loss(0),
    )


def squared_loss_estfun(spec: MeanSpec) -> EstimatingFunction:
    """Nonlinear-least-squares scores for the same mean functions.

    psi_z = -2 (y - h_z(x; theta)) dh_z/dtheta with loss (y - h_z)^2.  The
    two arms must not share parameters, so the spec needs interaction=True.
    """
    if not spec.interaction:
        raise SpecificationError(
            "squared-loss estimation needs disjoint per-arm parameters; "
            "use a spec with interaction=True"
        )
    fam = spec.family
    p = spec.dim

    def make_psi(arm: int):
        idx = spec.indices(arm)

        def psi(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            resid = np.asarray(y, dtype=float) - fam.mean(eta, arm)
            factor = -2.0 * resid * fam.mean_deta(eta, arm)
            return _embed_scores(len(design), p, idx, factor, design)

        return psi

    def make_jac(arm: int):
        idx = spec.indices(arm)

        def jac(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            resid = np.asarray(y, dtype=float) - fam.mean(eta, arm)
            factor = 2.0 * (
                fam.mean_deta(eta, arm) ** 2 - resid * fam.mean_deta2(eta, arm)
            )
            return _embed_blocks(len(design), p, idx, factor, design)

        return jac

    def make_loss(arm: int):
        idx = spec.indices(arm)

        def loss(y, x, theta):
            design = spec.design(x)
            eta = design @ np.asarray(theta, dtype=float)[idx]
            return (np.asarray(y, dtype=float) - fam.mean(eta, arm)) ** 2

        return loss

    return EstimatingFunction(
        dim=p,
        psi1=make_psi(1), psi0=make_psi(0),
        jac1=make_jac(1), jac0=make_jac(0),
        loss1=make_loss(1), loss0=make_loss(0),
    )


def canonical_q_vectors(spec: MeanSpec, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Contrast vectors turning the GLM score into the raw residual.

    For canonical families, q_z^T psi_z(y, x; theta) = y - h_z(x; theta) and
    q_z^T psi_(1-z) = 0 pointwise; this is the algebraic reason the
    model-imputed estimator is consistent for those fits.  Negative binomial
    has no such vectors (its score is not residual-linear), so it is
    rejected.
    """
    if not spec.family.is_canonical:
        raise SpecificationError(
            f"q-vectors exist only for canonical families, not {spec.family.kind}"
        )
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.dim,):
        raise SpecificationError(f"theta has shape {theta.shape}, expected ({spec.dim},)")
    q1 = np.zeros(spec.dim)
    q0 = np.zeros(spec.dim)
    q1[spec.alpha_index(1)] = -1.0
    q0[spec.alpha_index(0)] = -1.0
    return q1, q0


# ---------------------------------------------------------------------------
# Model spec strings (CLI surface): family[:interact][:kappa=<v>]
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Parsed model description, bound to data later via build()."""

    family_name: str
    interaction: bool = False
    kappa: Optional[float] = None

    def build(self, n_covariates: int, kappa=None) -> MeanSpec:
        if self.family_name == "negbin":
            k = kappa if kappa is not None else self.kappa
            if k is None:
                raise SpecificationError(
                    "negbin model needs kappa= in the spec string or a "
                    "dispersion estimated from data"
                )
            family = negbin_family(k)
        else:
            family = _FAMILY_BUILDERS[self.family_name]()
        return MeanSpec(family, self.interaction, n_covariates)


def parse_model_spec(text: str) -> ModelConfig:
    """Parse ``family[:interact][:kappa=<v>]``, e.g. ``poisson:interact``."""
    parts = [p.strip() for p in text.split(":") if p.strip()]
    if not parts:
        raise SpecificationError("empty model spec")
    family = parts[0].lower()
    if family not in _FAMILY_BUILDERS and family != "negbin":
        raise SpecificationError(
            f"unknown family '{family}'; expected one of "
            f"{sorted(set(_FAMILY_BUILDERS) | {'negbin'})}"
        )
    interaction = False
    kappa = None
    for part in parts[1:]:
        if part.lower() in ("interact", "interaction"):
            interaction = True
        elif part.lower().startswith("kappa="):
            try:
                kappa = float(part.split("=", 1)[1])
            except ValueError:
                raise SpecificationError(f"bad kappa value in '{part}'") from None
        else:
            raise SpecificationError(f"unknown model spec token '{part}'")
    return ModelConfig(family, interaction, kappa)


def moment_kappa(d) -> tuple[float, float]:
    """Per-arm method-of-moments negbin dispersion from observed outcomes.

    Matches arm mean and variance through Var = mu + mu^2/kappa.  Arms whose
    sample variance does not exceed the mean get a very large kappa, which
    makes the fit effectively Poisson.
    """
    out = []
    for arm in (1, 0):
        picked = d.y[d.arm_mask(arm)]
        mu = picked.mean()
        var = picked.var(ddof=1) if picked.size > 1 else 0.0
        if var > mu and mu > 0:
            out.append(float(mu**2 / (var - mu)))
        else:
            out.append(1e8)
    return out[0], out[1]
