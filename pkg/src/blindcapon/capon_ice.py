"""Single-parameter Newton-Raphson search over the steering parameter.

The search maximizes the orthogonally-constrained sample contrast over the
scalar ``lam``.  Each iteration rebuilds the steering vector, the
minimum-power distortionless weights, the extracted signal and its sample
statistics, then takes a safeguarded Newton step computed from the analytic
first derivative and the at-solution approximation of the second derivative.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import core
from .core import (
    ExtractionState,
    Nonlinearity,
    SnapshotMatrix,
    SteeringModel,
    background_covariance,
    c_constants,
    covariance_factor,
    sample_covariance,
    steering,
)
from .errors import Diverged, ScoreDegenerate

# runaway guard for non-periodic steering weights (see `run`)
_RUNAWAY_SPAN = 2.0 * np.pi ** 2


@dataclass(frozen=True)
class CaponConfig:
    """Settings of the Newton search.

    ``tol_w`` is the stopping threshold on the max-norm change of ``w``
    between iterations; ``step_cap`` bounds ``|delta lam|`` per iteration;
    ``damping`` scales every accepted step.
    """

    lambda_ini: float
    max_iters: int = 100
    tol_w: float = 1e-6
    step_cap: float = 0.5
    damping: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol_w <= 0.0:
            raise ValueError("tol_w must be positive")
        if self.step_cap <= 0.0:
            raise ValueError("step_cap must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass(frozen=True)
class CaponResult:
    state: ExtractionState
    iterations: int
    converged: bool
    contrast_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    gradient_fallbacks: int = 0


def wrap_angle(lam: float) -> float:
    """Wrap into the principal interval (-pi, pi]."""
    out = -((-lam + np.pi) % (2.0 * np.pi) - np.pi)
    return float(out)


def contrast(
    x: SnapshotMatrix,
    lam: float,
    phi: Nonlinearity,
    model: SteeringModel = None,
    *,
    nu: float = None,
    c_z: np.ndarray = None,
) -> float:
    """Sample contrast at ``lam``: model log-pdf, output power and background
    terms of the orthogonally-constrained likelihood.

    Two evaluation modes share this function:

    * Default (``nu=None, c_z=None``): the self-contained profile form.  The
      background covariance is concentrated out, contributing
      ``-log det C_z(lam) - (d-1)``, and the model-pdf term enters unscaled
      (exact-score convention).  This is the form whose grid maximum locates
      the source and which feeds ``CaponResult.contrast_trace``.
    * Frozen plug-ins: with ``nu`` and ``c_z`` fixed at a reference state,
      the model-pdf term is scaled by ``1/nu`` (the effective score used by
      the optimizer is ``phi/nu``) and the background term is the Mahalanobis
      form ``-tr(c_z^-1 C_z(lam))``.  The exact derivative of this function
      at the reference point is :func:`first_derivative`; finite-difference
      checks must use this mode.

    The ``(d-2) log|gamma|^2`` term is identically zero for phase-shift
    steering (``gamma = a[0] = 1``) and is included literally.
    """
    if phi.log_pdf is None:
        raise ValueError(f"nonlinearity {phi.name!r} has no log_pdf")
    if model is None:
        model = core.ula(x.d)
    a = steering(model, lam)
    factor = covariance_factor(sample_covariance(x))
    w, _ = core.mpdr_weights(None, a, factor=factor)
    s = w.conj() @ x.data
    sigma2 = float(np.mean(np.abs(s) ** 2))
    u = s / np.sqrt(sigma2)
    m = float(np.mean(phi.log_pdf(u)))
    cz_lam = background_covariance(x, a)
    if nu is not None:
        m = m / nu
    if c_z is not None:
        bg = -float(np.real(np.trace(scipy.linalg.solve(c_z, cz_lam, assume_a="her"))))
    else:
        sign, logdet = np.linalg.slogdet(cz_lam)
        bg = -logdet - (x.d - 1)
    gam2 = float(np.abs(a[0]) ** 2)
    return m - np.log(sigma2) + bg + (x.d - 2) * np.log(gam2)


def grad_w(x: SnapshotMatrix, state: ExtractionState, phi: Nonlinearity) -> np.ndarray:
    """Wirtinger gradient of the contrast with respect to ``conj(w)``:

        grad = a(w) - (1/nu) * mean(phi(u(n)) x(n) / sigma)

    with ``a(w) = C_x w / sigma^2``.  Vanishes at the exact solution.
    """
    if abs(state.stats.nu) < 1e-12:
        raise ScoreDegenerate("nu is numerically zero")
    sigma2 = state.stats.sigma2
    c_x = sample_covariance(x)
    a_w = (c_x @ state.w) / sigma2
    u = state.s / np.sqrt(sigma2)
    score_mean = (x.data * phi.phi(u)).mean(axis=1) / np.sqrt(sigma2)
    return a_w - score_mean / state.stats.nu


def first_derivative(x: SnapshotMatrix, state: ExtractionState, phi: Nonlinearity) -> float:
    """Analytic derivative of the contrast along ``lam``:

        dC/dlam = -2 sigma^2 Im{ grad_w^H C_x^-1 (a * v) }
    """
    av = state.a * state.model.v
    factor = covariance_factor(sample_covariance(x))
    gw = grad_w(x, state, phi)
    return float(
        -2.0
        * state.stats.sigma2
        * np.imag(np.vdot(gw, scipy.linalg.cho_solve(factor, av)))
    )


def first_derivative_via_grad_a(
    x: SnapshotMatrix, state: ExtractionState, phi: Nonlinearity
) -> float:
    """Equivalent form ``-2 Im{ grad_a^H (a * v) }`` with
    ``grad_a = sigma^2 C_x^-1 grad_w`` (used for cross-checks)."""
    av = state.a * state.model.v
    factor = covariance_factor(sample_covariance(x))
    grad_a = state.stats.sigma2 * scipy.linalg.cho_solve(
        factor, grad_w(x, state, phi)
    )
    return float(-2.0 * np.imag(np.vdot(grad_a, av)))


def second_derivative_approx(
    x: SnapshotMatrix, state: ExtractionState, phi: Nonlinearity
) -> float:
    """At-solution approximation of the second derivative:

        2 c1 sigma^2 ( sigma^2 (a*v)^H C_x^-1 (a*v) - |w^H (a*v)|^2 )

    The prefactor ``2 c1 sigma^2`` reduces to ``2 (nu - rho) / nu`` and uses
    the sample statistics; inside the bracket, ``sigma^2`` is taken
    solve-consistent (``1 / (a^H C^-1 a)`` on the loaded covariance) so the
    bracket is nonnegative by Cauchy-Schwarz exactly, making the sign the
    sign of ``c1`` (negative for super-Gaussian extracted signals).
    """
    c1, _, _ = c_constants(state.stats)
    prefactor = 2.0 * c1 * state.stats.sigma2
    av = state.a * state.model.v
    factor = covariance_factor(sample_covariance(x))
    sigma2_solve = 1.0 / float(
        np.real(np.vdot(state.a, scipy.linalg.cho_solve(factor, state.a)))
    )
    quad = float(np.real(np.vdot(av, scipy.linalg.cho_solve(factor, av))))
    proj = float(np.abs(np.vdot(state.w, av)) ** 2)
    return prefactor * (sigma2_solve * quad - proj)


def run(
    x: SnapshotMatrix,
    model: SteeringModel,
    phi: Nonlinearity,
    cfg: CaponConfig,
    keep_trace: bool = True,
) -> CaponResult:
    """Safeguarded Newton iteration over ``lam``.

    Each iteration: rebuild ``a(lam)``, ``w(lam)``, ``s`` and the sample
    statistics, evaluate the first derivative and the approximate second
    derivative, then update ``lam``.  The Newton step is taken only when the
    second derivative is negative (a maximum); otherwise a small gradient
    step of magnitude ``0.1 * step_cap`` in the ascent direction is used.
    Steps are clipped to ``step_cap`` and scaled by ``damping``.  For
    integer steering weights ``lam`` is wrapped into (-pi, pi] after every
    update; for non-periodic weights the iterate must stay within
    ``2 pi^2`` of the start or :class:`Diverged` is raised.

    Convergence is declared when the max-norm change of ``w`` between
    consecutive iterations falls to ``tol_w`` or below.
    """
    c_x = sample_covariance(x)
    factor = covariance_factor(c_x)
    data = x.data
    v = model.v
    periodic = model.is_integer

    def build(lam):
        a = steering(model, lam)
        w, _ = core.mpdr_weights(None, a, factor=factor)
        s = w.conj() @ data
        stats = core.soi_statistics(s, phi)
        return ExtractionState(lam=float(lam), a=a, w=w, s=s, stats=stats, model=model)

    def derivatives(st):
        sigma2 = st.stats.sigma2
        av = st.a * v
        ci_av = scipy.linalg.cho_solve(factor, av)
        a_w = (c_x @ st.w) / sigma2
        u = st.s / np.sqrt(sigma2)
        score_mean = (data * phi.phi(u)).mean(axis=1) / np.sqrt(sigma2)
        gw = a_w - score_mean / st.stats.nu
        d1 = -2.0 * sigma2 * np.imag(np.vdot(gw, ci_av))
        c1, _, _ = c_constants(st.stats)
        # solve-consistent sigma^2 in the bracket keeps it >= 0 exactly
        sigma2_solve = 1.0 / np.real(np.vdot(st.a, scipy.linalg.cho_solve(factor, st.a)))
        bracket = (
            sigma2_solve * np.real(np.vdot(av, ci_av)) - np.abs(np.vdot(st.w, av)) ** 2
        )
        d2 = 2.0 * c1 * sigma2 * bracket
        return float(d1), float(d2)

    lam = wrap_angle(cfg.lambda_ini) if periodic else float(cfg.lambda_ini)
    state = build(lam)
    trace = []
    converged = False
    fallbacks = 0
    iterations = 0

    for iterations in range(1, cfg.max_iters + 1):
        if keep_trace:
            trace.append(contrast(x, state.lam, phi, model))
        d1, d2 = derivatives(state)
        if not (np.isfinite(d1) and np.isfinite(d2)):
            raise Diverged(f"non-finite derivatives at lam={state.lam}")
        if d2 < 0.0:
            delta = -d1 / d2
        else:
            # wrong curvature (c1 >= 0 mid-iteration): safeguarded ascent step
            delta = np.sign(d1) * 0.1 * cfg.step_cap
            fallbacks += 1
        delta = float(np.clip(delta, -cfg.step_cap, cfg.step_cap)) * cfg.damping
        lam_new = state.lam + delta
        if periodic:
            lam_new = wrap_angle(lam_new)
        elif abs(lam_new - cfg.lambda_ini) > _RUNAWAY_SPAN:
            raise Diverged(
                f"lam={lam_new} left the admissible region around lambda_ini"
            )
        new_state = build(lam_new)
        dw = float(np.max(np.abs(new_state.w - state.w)))
        state = new_state
        if dw <= cfg.tol_w:
            converged = True
            break

    if keep_trace:
        trace.append(contrast(x, state.lam, phi, model))
    return CaponResult(
        state=state,
        iterations=iterations,
        converged=converged,
        contrast_trace=np.asarray(trace),
        gradient_fallbacks=fallbacks,
    )
