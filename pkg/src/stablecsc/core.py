"""Domain containers and the weighted convolutional sparse coding objective.

A model instance is a dictionary of ``K`` waveforms ("atoms") of length
``L``, each constrained to the unit l2 ball, together with nonnegative
activation vectors of length ``T - L + 1`` per trial and atom.  A trial of
length ``T`` is reconstructed as the sum over atoms of the (zero-padded,
time-domain) convolution ``atom * activation``.

All operations here are pure functions over immutable array wrappers and are
safe to call concurrently.  Convolutions are evaluated in the time domain
throughout; there is deliberately no frequency-domain path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TrialSet",
    "Dictionary",
    "ActivationSet",
    "WeightField",
    "HyperParams",
    "FitRecord",
    "FitHistory",
    "convolve_activations",
    "correlate_signal",
    "reconstruct",
    "reconstruct_all",
    "weighted_objective",
    "project_unit_ball",
]

ATOM_NORM_TOL = 1e-9


def _as_float_array(a, name, ndim):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TrialSet:
    """Observed signals, one row per trial (shape ``n_trials x trial_len``)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_float_array(self.data, "data", 2))
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("TrialSet needs at least one trial and one sample")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def trial_len(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Dictionary:
    """K atoms of length L, each inside the unit l2 ball (shape ``K x L``)."""

    atoms: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "atoms", _as_float_array(self.atoms, "atoms", 2))
        norms = np.linalg.norm(self.atoms, axis=1)
        if np.any(norms > 1.0 + ATOM_NORM_TOL):
            raise ValueError(
                f"atom norms must be <= 1 (max norm {norms.max():.12g})"
            )

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def atom_len(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class ActivationSet:
    """Nonnegative activations, shape ``n_trials x n_atoms x (T - L + 1)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float_array(self.values, "values", 3))
        if np.any(self.values < 0):
            raise ValueError("activations must be nonnegative")

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.values.shape[1]

    @property
    def n_times(self) -> int:
        return self.values.shape[2]

    def to_triplets(self) -> list[tuple[int, int, int, float]]:
        """Sparse (trial, atom, time, value) view of the nonzero entries.

        Intended for serialization only; numerical code works on the dense
        array.  Triplets are emitted in (trial, atom, time) order so the
        listing is deterministic.
        """
        ns, ks, ts = np.nonzero(self.values)
        vals = self.values[ns, ks, ts]
        return [
            (int(n), int(k), int(t), float(v))
            for n, k, t, v in zip(ns, ks, ts, vals)
        ]

    @classmethod
    def from_triplets(
        cls, shape: tuple[int, int, int], triplets: Sequence[Sequence]
    ) -> "ActivationSet":
        values = np.zeros(shape)
        for n, k, t, v in triplets:
            values[int(n), int(k), int(t)] = float(v)
        return cls(values)


@dataclass(frozen=True)
class WeightField:
    """Strictly positive per-sample weights, shape ``n_trials x trial_len``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float_array(self.values, "values", 2))
        if np.any(self.values <= 0):
            raise ValueError("weights must be strictly positive")


@dataclass(frozen=True)
class HyperParams:
    """Algorithm hyperparameters.

    ``alpha`` is the stability exponent of the noise model in (0, 2];
    ``alpha = 2`` is the Gaussian case and turns the outer loop into plain
    weighted CSC with constant weights 1/2.  ``lam`` is the l1 sparsity
    penalty.  ``em_iters``, ``mstep_iters`` and ``mcmc_iters`` are the outer,
    inner and sampling iteration counts; ``burn_in`` sweeps are discarded
    before averaging.
    """

    alpha: float
    lam: float
    n_atoms: int
    atom_len: int
    em_iters: int = 5
    mstep_iters: int = 50
    mcmc_iters: int = 10
    burn_in: int = 5
    seed: int = 0
    grad_tol: float = 1e-8
    max_inner_iters: int = 60

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0):
            raise ValueError("alpha must lie in (0, 2]")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.n_atoms < 1 or self.atom_len < 1:
            raise ValueError("n_atoms and atom_len must be >= 1")
        if self.em_iters < 0 or self.mstep_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.mcmc_iters < 1:
            raise ValueError("mcmc_iters must be >= 1")
        if not (0 <= self.burn_in < self.mcmc_iters):
            raise ValueError("burn_in must satisfy 0 <= burn_in < mcmc_iters")
        if self.grad_tol <= 0 or self.max_inner_iters < 1:
            raise ValueError("grad_tol must be > 0 and max_inner_iters >= 1")


@dataclass(frozen=True)
class FitRecord:
    """One inner-iteration log entry."""

    em_iter: int
    inner_iter: int
    objective: float
    elapsed_seconds: float
    mcmc_acceptance_rate: float
    z_iterations: int = 0
    d_iterations: int = 0


@dataclass
class FitHistory:
    """Per-iteration objective / timing / acceptance log."""

    records: list[FitRecord] = field(default_factory=list)

    def append(self, record: FitRecord) -> None:
        if self.records and record.elapsed_seconds < self.records[-1].elapsed_seconds:
            raise ValueError("elapsed_seconds must be nondecreasing")
        self.records.append(record)

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------

def _atoms_of(dictionary) -> np.ndarray:
    return dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary, dtype=np.float64)


def convolve_activations(atoms: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Sum of full convolutions, batched over trials.

    ``atoms`` has shape (K, L) and ``z`` shape (N, K, P) with P = T - L + 1;
    the result has shape (N, T).  Activations are implicitly zero outside
    [0, P), so the full convolution has length exactly T.
    """
    n_trials, n_atoms, n_times = z.shape
    length = atoms.shape[1]
    out = np.zeros((n_trials, n_times + length - 1))
    for n in range(n_trials):
        row = out[n]
        for k in range(n_atoms):
            row += np.convolve(atoms[k], z[n, k], mode="full")
    return out


def correlate_signal(atoms: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of each atom with each trial of ``v``.

    ``v`` has shape (N, T); the result (N, K, P) holds
    ``out[n, k, tau] = sum_j atoms[k, j] * v[n, tau + j]``, the adjoint of
    :func:`convolve_activations`.
    """
    n_trials, trial_len = v.shape
    n_atoms, length = atoms.shape
    out = np.empty((n_trials, n_atoms, trial_len - length + 1))
    for n in range(n_trials):
        for k in range(n_atoms):
            out[n, k] = np.correlate(v[n], atoms[k], mode="valid")
    return out


def reconstruct(dictionary: Dictionary, z_n: np.ndarray) -> np.ndarray:
    """Reconstruction of a single trial: ``sum_k atom_k * z_n[k]``."""
    atoms = _atoms_of(dictionary)
    z_n = np.asarray(z_n, dtype=np.float64)
    if z_n.ndim != 2 or z_n.shape[0] != atoms.shape[0]:
        raise ValueError(
            f"activations must have shape (n_atoms, n_times), got {z_n.shape}"
        )
    return convolve_activations(atoms, z_n[None])[0]


def reconstruct_all(dictionary, activations) -> np.ndarray:
    """Reconstruction of every trial; accepts wrappers or bare arrays."""
    atoms = _atoms_of(dictionary)
    z = activations.values if isinstance(activations, ActivationSet) else np.asarray(activations, dtype=np.float64)
    if z.ndim != 3 or z.shape[1] != atoms.shape[0]:
        raise ValueError(f"activations with shape {z.shape} do not match {atoms.shape[0]} atoms")
    return convolve_activations(atoms, z)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def weighted_objective(x, dictionary, z, w, lam: float) -> float:
    """Weighted CSC cost: ``0.5 * sum w * (x - xhat)^2 + lam * sum z``.

    The residual term carries the leading 1/2, so constant weights w = 1
    reproduce the plain CSC cost ``0.5 * ||x - xhat||^2 + lam * ||z||_1``
    exactly, and w = 1/2 scales the data term by one half relative to it.
    """
    xd = x.data if isinstance(x, TrialSet) else np.asarray(x, dtype=np.float64)
    zd = z.values if isinstance(z, ActivationSet) else np.asarray(z, dtype=np.float64)
    wd = w.values if isinstance(w, WeightField) else np.asarray(w, dtype=np.float64)
    atoms = _atoms_of(dictionary)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if wd.shape != xd.shape:
        raise ValueError(f"weights shape {wd.shape} != data shape {xd.shape}")
    if np.any(wd <= 0):
        raise ValueError("weights must be strictly positive")
    n_times = xd.shape[1] - atoms.shape[1] + 1
    if zd.shape != (xd.shape[0], atoms.shape[0], n_times):
        raise ValueError(
            f"activations shape {zd.shape} inconsistent with data {xd.shape} "
            f"and atoms {atoms.shape}"
        )
    residual = xd - convolve_activations(atoms, zd)
    return 0.5 * float(np.sum(wd * residual * residual)) + lam * float(zd.sum())


def project_unit_ball(dictionary: Dictionary | np.ndarray):
    """Project atoms onto the unit l2 ball.

    Atoms with norm > 1 are divided by their norm; the returned per-atom
    scale factors let callers multiply activations by the same factors so
    the reconstruction is unchanged.  Atoms already inside the ball (and the
    zero atom) are untouched with scale 1.
    """
    atoms = _atoms_of(dictionary).copy()
    norms = np.linalg.norm(atoms, axis=1)
    scales = np.maximum(norms, 1.0)
    atoms /= scales[:, None]
    return Dictionary(atoms), scales
