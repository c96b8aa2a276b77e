"""Monte Carlo EM outer loop: alternate weight estimation and weighted CSC.

Each outer iteration estimates the weight field from the current residuals
(Metropolis-Hastings at ``alpha < 2``, the constant 1/2 at ``alpha = 2``)
and then runs ``mstep_iters`` rounds of block coordinate descent, updating
activations for all trials and then the atoms, warm starting both from the
previous iterates.  The objective under the current weights and the wall
time are logged per inner iteration.

:func:`weighted_csc` exposes the fixed-weight inner loop on its own; a fit
at ``alpha = 2`` walks through exactly the same code path with weights 1/2,
so the two produce bit-identical iterate sequences given the same start.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    ActivationSet,
    Dictionary,
    FitHistory,
    FitRecord,
    HyperParams,
    TrialSet,
    WeightField,
    convolve_activations,
    weighted_objective,
)
from .estep import estimate_weights
from .mstep import update_activations, update_activations_batch, update_atoms, update_atoms_bcd
from .stable import RngState

__all__ = ["FitResult", "init_dictionary", "init_weights", "fit", "weighted_csc"]

VARIANCE_FLOOR = 1e-12


@dataclass
class FitResult:
    """Final model state plus the iteration log."""

    dictionary: Dictionary
    activations: ActivationSet
    weights: WeightField
    history: FitHistory
    objective: float
    iterates: list | None = None


def init_dictionary(n_atoms: int, atom_len: int, strategy: str = "gaussian-white", rng=0) -> Dictionary:
    """Random initial atoms.

    ``gaussian-white`` draws white noise per atom and normalizes to unit
    norm; deterministic under the seed.  (Loading atoms from a file is
    handled at the command-line layer.)
    """
    if n_atoms < 1 or atom_len < 1:
        raise ValueError("n_atoms and atom_len must be >= 1")
    if strategy != "gaussian-white":
        raise ValueError(f"unknown initialization strategy {strategy!r}")
    gen = rng.generator() if isinstance(rng, RngState) else RngState(int(rng)).generator()
    atoms = gen.standard_normal((n_atoms, atom_len))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    return Dictionary(atoms)


def init_weights(x, mode: str = "half") -> WeightField:
    """Initial weight field: constant 1/2, or one over each trial's variance.

    The inverse-variance mode floors the variance at 1e-12 so constant
    trials stay finite.
    """
    xd = x.data if isinstance(x, TrialSet) else np.asarray(x, dtype=np.float64)
    if mode == "half":
        return WeightField(np.full(xd.shape, 0.5))
    if mode == "inverse-variance":
        var = np.maximum(xd.var(axis=1), VARIANCE_FLOOR)
        return WeightField(np.broadcast_to((1.0 / var)[:, None], xd.shape).copy())
    raise ValueError(f"unknown weight init mode {mode!r}")


def _z_update_parallel(x, atoms, w, lam, z0, solver, tol, max_iter, jobs):
    n_trials = x.shape[0]
    z = np.empty_like(z0)
    iters = 0

    def solve(n):
        return update_activations(
            x[n], atoms, w[n], lam, z0[n], solver=solver, tol=tol, max_iter=max_iter
        )

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for n, (zn, rep) in enumerate(pool.map(solve, range(n_trials))):
            z[n] = zn
            iters += rep.iterations
    return z, iters


def _inner_iteration(x, w, lam, atoms, z, beta, *, z_solver, d_solver, bcd_passes,
                     tol, max_z_iter, max_d_iter, jobs):
    if jobs > 1:
        z, z_iters = _z_update_parallel(
            x, atoms, w, lam, z, z_solver, tol, max_z_iter, jobs
        )
    else:
        z, zreport = update_activations_batch(
            x, atoms, w, lam, z, solver=z_solver, tol=tol, max_iter=max_z_iter
        )
        z_iters = zreport.iterations
    if d_solver == "joint":
        dictionary, dual, dreport = update_atoms(
            x, z, w, atoms, tol=tol, max_iter=max_d_iter, beta0=beta
        )
    elif d_solver == "bcd":
        dictionary, dual, dreport = update_atoms_bcd(
            x, z, w, atoms, passes=bcd_passes, tol=tol, max_iter=max_d_iter, beta0=beta
        )
    else:
        raise ValueError(f"unknown atom solver {d_solver!r}")
    return dictionary.atoms, z, dual.beta, z_iters, dreport.iterations


def _unpack_init(init, x, hp_atoms, hp_len):
    n_trials, trial_len = x.shape
    n_times = trial_len - hp_len + 1
    if init is None:
        return None, np.zeros((n_trials, hp_atoms, n_times)), None
    parts = tuple(init)
    dictionary = parts[0]
    activations = parts[1]
    weights = parts[2] if len(parts) > 2 else None
    atoms = dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary, float)
    z = activations.values if isinstance(activations, ActivationSet) else np.asarray(activations, float)
    if atoms.shape != (hp_atoms, hp_len):
        raise ValueError(f"init dictionary shape {atoms.shape} != ({hp_atoms}, {hp_len})")
    if z.shape != (n_trials, hp_atoms, n_times):
        raise ValueError(f"init activations shape {z.shape} != {(n_trials, hp_atoms, n_times)}")
    w = None
    if weights is not None:
        w = weights.values if isinstance(weights, WeightField) else np.asarray(weights, float)
        if w.shape != x.shape:
            raise ValueError("init weights shape must match the trial data")
    return atoms.copy(), z.copy(), w


def fit(
    x,
    hp: HyperParams,
    init=None,
    weight_init: str = "half",
    z_solver: str = "lbfgsb",
    d_solver: str = "joint",
    bcd_passes: int = 1,
    persist_chains: bool = False,
    jobs: int = 1,
    callback=None,
    capture_iterates: bool = False,
) -> FitResult:
    """Run the full EM loop on a trial set.

    ``init`` may carry ``(Dictionary, ActivationSet)`` or
    ``(Dictionary, ActivationSet, WeightField)``; missing pieces default to
    seeded white-noise atoms, zero activations and ``weight_init`` weights.
    ``persist_chains`` carries the impulse sampler state across EM
    iterations instead of drawing fresh prior chains.  ``jobs`` > 1 solves
    the activation subproblems one trial at a time across threads (results
    are schedule independent; the default batched path is usually faster).
    ``callback`` receives ``(em_iter, inner_iter, objective,
    elapsed_seconds, acceptance_rate)`` after every inner iteration.

    Failures inside an inner solver are re-raised annotated with the
    ``(em_iter, inner_iter)`` location.
    """
    xd = x.data if isinstance(x, TrialSet) else np.asarray(x, dtype=np.float64)
    if xd.shape[1] < hp.atom_len:
        raise ValueError("atom length exceeds trial length")
    atoms, z, w0 = _unpack_init(init, xd, hp.n_atoms, hp.atom_len)
    root = RngState(hp.seed)
    if atoms is None:
        atoms = init_dictionary(hp.n_atoms, hp.atom_len, rng=root.substream("dict-init")).atoms
    weights = w0 if w0 is not None else init_weights(xd, weight_init).values

    history = FitHistory()
    iterates = [] if capture_iterates else None
    beta = None
    phi = None
    t0 = time.perf_counter()
    for i in range(1, hp.em_iters + 1):
        xhat = convolve_activations(atoms, z)
        wf, diag = estimate_weights(
            xd, xhat, hp, root.substream("estep", i),
            init_phi=phi if persist_chains else None,
        )
        weights = wf.values
        if persist_chains:
            phi = diag.final_phi
        for m in range(1, hp.mstep_iters + 1):
            try:
                atoms, z, beta, z_iters, d_iters = _inner_iteration(
                    xd, weights, hp.lam, atoms, z, beta,
                    z_solver=z_solver, d_solver=d_solver, bcd_passes=bcd_passes,
                    tol=hp.grad_tol, max_z_iter=hp.max_inner_iters,
                    max_d_iter=hp.max_inner_iters, jobs=jobs,
                )
            except Exception as exc:
                raise type(exc)(
                    f"{exc} (at em_iter={i}, inner_iter={m})"
                ).with_traceback(exc.__traceback__) from None
            objective = weighted_objective(xd, atoms, z, weights, hp.lam)
            record = FitRecord(
                em_iter=i, inner_iter=m, objective=objective,
                elapsed_seconds=time.perf_counter() - t0,
                mcmc_acceptance_rate=diag.acceptance_rate,
                z_iterations=z_iters, d_iterations=d_iters,
            )
            history.append(record)
            if capture_iterates:
                iterates.append((atoms.copy(), z.copy()))
            if callback is not None:
                callback(i, m, objective, record.elapsed_seconds, diag.acceptance_rate)
    final_objective = weighted_objective(xd, atoms, z, weights, hp.lam)
    return FitResult(
        dictionary=Dictionary(atoms),
        activations=ActivationSet(z),
        weights=WeightField(weights),
        history=history,
        objective=final_objective,
        iterates=iterates,
    )


def weighted_csc(
    x,
    weights,
    hp: HyperParams,
    n_iters=None,
    init=None,
    z_solver: str = "lbfgsb",
    d_solver: str = "joint",
    bcd_passes: int = 1,
    jobs: int = 1,
    callback=None,
    capture_iterates: bool = False,
) -> FitResult:
    """Fixed-weight CSC: the M-step loop alone, for ``n_iters`` iterations
    (default ``em_iters * mstep_iters``).

    With weights 1/2 this is the plain Gaussian-noise algorithm; running it
    is equivalent to a fit at ``alpha = 2``, which estimates exactly those
    weights at every outer iteration.
    """
    xd = x.data if isinstance(x, TrialSet) else np.asarray(x, dtype=np.float64)
    wd = weights.values if isinstance(weights, WeightField) else np.asarray(weights, dtype=np.float64)
    if wd.shape != xd.shape:
        raise ValueError("weights shape must match the trial data")
    if n_iters is None:
        n_iters = hp.em_iters * hp.mstep_iters
    atoms, z, _ = _unpack_init(init, xd, hp.n_atoms, hp.atom_len)
    root = RngState(hp.seed)
    if atoms is None:
        atoms = init_dictionary(hp.n_atoms, hp.atom_len, rng=root.substream("dict-init")).atoms

    history = FitHistory()
    iterates = [] if capture_iterates else None
    beta = None
    t0 = time.perf_counter()
    for m in range(1, n_iters + 1):
        atoms, z, beta, z_iters, d_iters = _inner_iteration(
            xd, wd, hp.lam, atoms, z, beta,
            z_solver=z_solver, d_solver=d_solver, bcd_passes=bcd_passes,
            tol=hp.grad_tol, max_z_iter=hp.max_inner_iters,
            max_d_iter=hp.max_inner_iters, jobs=jobs,
        )
        objective = weighted_objective(xd, atoms, z, wd, hp.lam)
        record = FitRecord(
            em_iter=1, inner_iter=m, objective=objective,
            elapsed_seconds=time.perf_counter() - t0,
            mcmc_acceptance_rate=1.0,
            z_iterations=z_iters, d_iterations=d_iters,
        )
        history.append(record)
        if capture_iterates:
            iterates.append((atoms.copy(), z.copy()))
        if callback is not None:
            callback(1, m, objective, record.elapsed_seconds, 1.0)
    final_objective = weighted_objective(xd, atoms, z, wd, hp.lam)
    return FitResult(
        dictionary=Dictionary(atoms),
        activations=ActivationSet(z),
        weights=WeightField(wd),
        history=history,
        objective=final_objective,
        iterates=iterates,
    )
