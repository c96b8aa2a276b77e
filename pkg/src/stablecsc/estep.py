"""Metropolis-Hastings sampling of the impulse variables and weight field.

The augmented noise model draws a positive impulse variable ``phi`` per
sample and observes ``x ~ Normal(xhat, phi / 2)``.  The weights consumed by
the weighted CSC step are posterior expectations ``E[1 / phi]``, estimated
by averaging ``1 / phi`` over Metropolis-Hastings sweeps whose proposal is
the positive-stable prior itself.  With the prior as proposal the
acceptance probability reduces to a two-term exponent in ``log phi`` and
the squared residual; it is computed in log space so tiny ``phi`` values
cannot overflow.

At ``alpha = 2`` the impulse prior concentrates on ``phi = 2`` and the
weights are exactly 1/2 everywhere; that case bypasses sampling entirely.

Within a sweep every (trial, time) site is independent; each trial consumes
its own keyed RNG sub-stream, so results do not depend on any execution
schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import HyperParams, TrialSet, WeightField
from .stable import RngState, positive_stable_params, sample_stable

__all__ = [
    "ImpulseState",
    "EStepDiagnostics",
    "acceptance_prob",
    "mh_sweep",
    "estimate_weights",
]


@dataclass(frozen=True)
class ImpulseState:
    """Strictly positive impulse variables, one per (trial, time) sample."""

    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError("phi must be a 2-d array (trials x samples)")
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise ValueError("phi entries must be finite and strictly positive")
        phi = phi.copy()
        phi.flags.writeable = False
        object.__setattr__(self, "phi", phi)


@dataclass
class EStepDiagnostics:
    """Acceptance bookkeeping and the final chain state."""

    acceptance_rate: float
    sweep_acceptance_rates: list[float] = field(default_factory=list)
    final_phi: np.ndarray | None = None


def _log_accept(phi_cur, phi_prop, residual):
    r2 = residual * residual
    return 0.5 * (np.log(phi_cur) - np.log(phi_prop)) + r2 * (
        1.0 / phi_cur - 1.0 / phi_prop
    )


def acceptance_prob(phi_cur: float, phi_prop: float, residual: float) -> float:
    """Probability of accepting ``phi_prop`` against ``phi_cur``.

    Equals ``min(1, exp((log phi_cur - log phi_prop) / 2
    + r^2 (1/phi_cur - 1/phi_prop)))``, which is exactly the Gaussian
    likelihood ratio ``min(1, N(x; xhat, phi_prop/2) / N(x; xhat, phi_cur/2))``
    with ``r = x - xhat``.
    """
    if phi_cur <= 0 or phi_prop <= 0:
        raise ValueError("impulse values must be strictly positive")
    return float(np.exp(min(0.0, _log_accept(phi_cur, phi_prop, residual))))


def _sweep_arrays(phi, residuals, alpha_model, rng: RngState):
    """One MH sweep over a (trials x samples) field.

    Per trial the generator draws, in order: the proposal uniforms and
    exponentials (consumed by the stable sampler) and then the acceptance
    uniforms.
    """
    n_trials, trial_len = phi.shape
    prior = positive_stable_params(alpha_model)
    out = np.empty_like(phi)
    accepted = 0
    with np.errstate(over="ignore", under="ignore"):
        for n in range(n_trials):
            gen = rng.substream(n).generator()
            prop = sample_stable(prior, gen, size=trial_len)
            log_a = _log_accept(phi[n], prop, residuals[n])
            take = np.log(gen.random(trial_len)) < log_a
            out[n] = np.where(take, prop, phi[n])
            accepted += int(take.sum())
    return out, accepted / phi.size


def mh_sweep(phi, residuals, alpha_model: float, rng: RngState):
    """Run one Metropolis-Hastings sweep; proposals come from the prior.

    Returns ``(ImpulseState, acceptance_rate)``.
    """
    state = phi if isinstance(phi, ImpulseState) else ImpulseState(np.asarray(phi))
    res = np.asarray(residuals, dtype=np.float64)
    if res.shape != state.phi.shape:
        raise ValueError("residuals shape must match phi shape")
    if not (0.0 < alpha_model < 2.0):
        raise ValueError("alpha_model must lie strictly inside (0, 2)")
    new_phi, rate = _sweep_arrays(state.phi, res, alpha_model, rng)
    return ImpulseState(new_phi), rate


def _init_phi(shape, alpha_model, rng: RngState):
    prior = positive_stable_params(alpha_model)
    n_trials, trial_len = shape
    phi = np.empty(shape)
    for n in range(n_trials):
        gen = rng.substream(n).generator()
        phi[n] = sample_stable(prior, gen, size=trial_len)
    return phi


def estimate_weights(x, x_hat, hp: HyperParams, rng, init_phi=None):
    """Monte Carlo estimate of the E-step weight field.

    Runs ``hp.mcmc_iters`` MH sweeps from a fresh prior initialization
    (or from ``init_phi`` when chains persist across EM iterations),
    discards the first ``hp.burn_in`` sweeps, and averages ``1 / phi`` over
    the rest.  ``hp.alpha == 2`` short-circuits to constant weights 1/2
    without touching the sampler.

    Returns ``(WeightField, EStepDiagnostics)``.
    """
    xd = x.data if isinstance(x, TrialSet) else np.asarray(x, dtype=np.float64)
    xh = np.asarray(x_hat, dtype=np.float64)
    if xh.shape != xd.shape:
        raise ValueError("x_hat shape must match the trial data")
    if hp.mcmc_iters <= hp.burn_in:
        raise ValueError("mcmc_iters must exceed burn_in")
    if hp.alpha == 2.0:
        # deterministic impulse (phi = 2): exact weights, no sampler calls
        w = np.full(xd.shape, 0.5)
        return WeightField(w), EStepDiagnostics(acceptance_rate=1.0, final_phi=None)

    if isinstance(rng, (int, np.integer)):
        rng = RngState(int(rng))
    residuals = xd - xh
    if init_phi is not None:
        phi = np.asarray(init_phi, dtype=np.float64).copy()
        if phi.shape != xd.shape or np.any(phi <= 0):
            raise ValueError("init_phi must be positive with the data's shape")
    else:
        phi = _init_phi(xd.shape, hp.alpha, rng.substream("init"))
    acc = np.zeros(xd.shape)
    kept = 0
    rates = []
    for j in range(hp.mcmc_iters):
        phi, rate = _sweep_arrays(phi, residuals, hp.alpha, rng.substream(j))
        rates.append(rate)
        if j >= hp.burn_in:
            acc += 1.0 / phi
            kept += 1
    w = acc / kept
    diag = EStepDiagnostics(
        acceptance_rate=float(np.mean(rates)),
        sweep_acceptance_rates=rates,
        final_phi=phi,
    )
    return WeightField(w), diag
