"""Weighted CSC block updates: activations per trial, atoms via the dual.

The activation subproblem per trial is

    min_z 0.5 * || sqrt(w) . (x - sum_k d_k * z_k) ||^2 + lam * sum(z),
    z >= 0,

smooth on the feasible set, solved by box-constrained quasi-Newton descent
or by the ISTA/FISTA baselines.  The atom subproblem

    min_d sum_n 0.5 * || sqrt(w_n) . (x_n - Z_n d) ||^2,  ||d_k|| <= 1

is solved through its dual: with multipliers beta_k >= 0 replicated over
each atom's coordinates (bbar), the inner minimizer is

    d*(beta) = (sum_n Z_n^T (w_n . Z_n) + bbar)^(-1) sum_n (w_n . Z_n)^T x_n

and the dual value g(beta) = sum_n ||sqrt(w_n) . x_n||^2 - rhs @ d*(beta)
- sum(beta) has gradient ||d*_k||^2 - 1 per coordinate, maximized with the
same quasi-Newton solver.  The delayed-signal matrices Z_n are never
materialized: the normal equations are assembled from weighted
cross-correlations, with a Toeplitz fast path when weights are constant
within each trial, a sparse path driven by the nonzero pattern of z, and a
dense blocked-matmul fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_factor, cho_solve, toeplitz

from .core import (
    Dictionary,
    convolve_activations,
    correlate_signal,
)
from .optim import (
    BoxProblem,
    NumericalError,
    SolverReport,
    fista_box,
    ista_box,
    minimize_box,
)

__all__ = [
    "DualVars",
    "AtomLinearSystem",
    "z_gradient",
    "update_activations",
    "update_activations_batch",
    "build_atom_system",
    "primal_from_dual",
    "dual_value_and_grad",
    "update_atoms",
    "update_atoms_bcd",
]

PAIR_BUDGET = 30_000          # max nonzero pairs before the dense fallback
DENSE_CHUNK_ELEMS = 30_000_000  # trial chunking for the dense gram path
FEAS_TOL = 1e-6


@dataclass(frozen=True)
class DualVars:
    """Nonnegative multipliers, one per atom's unit-ball constraint."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).ravel().copy()
        if np.any(beta < 0) or not np.all(np.isfinite(beta)):
            raise ValueError("dual variables must be finite and nonnegative")
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class AtomLinearSystem:
    """Normal equations of the atom subproblem.

    ``gram`` is the KL x KL matrix ``sum_n Z_n^T (w_n . Z_n)``, ``rhs`` the
    KL vector ``sum_n (w_n . Z_n)^T x_n`` and ``data_const`` the scalar
    ``sum_n ||sqrt(w_n) . x_n||^2`` completing the quadratic form.
    """

    gram: np.ndarray
    rhs: np.ndarray
    n_atoms: int
    atom_len: int
    data_const: float

    def __post_init__(self):
        gram = np.asarray(self.gram, dtype=np.float64)
        rhs = np.asarray(self.rhs, dtype=np.float64).ravel()
        kl = self.n_atoms * self.atom_len
        if gram.shape != (kl, kl) or rhs.shape != (kl,):
            raise ValueError("gram/rhs shapes inconsistent with K, L")
        scale = max(1.0, float(np.abs(gram).max()))
        if float(np.abs(gram - gram.T).max()) > 1e-10 * scale:
            raise ValueError("gram matrix must be symmetric")
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "rhs", rhs)

    def data_term(self, atoms: np.ndarray) -> float:
        """Weighted residual energy ``0.5 * sum_n ||sqrt(w_n).(x_n - Z_n d)||^2``
        evaluated through the normal equations."""
        d = np.asarray(atoms, dtype=np.float64).ravel()
        return 0.5 * float(self.data_const - 2.0 * (self.rhs @ d) + d @ (self.gram @ d))


# ---------------------------------------------------------------------------
# activation update
# ---------------------------------------------------------------------------

def z_gradient(x_n, dictionary, z_n, w_n, lam: float) -> np.ndarray:
    """Gradient of the weighted objective in one trial's activations.

    Equals ``-correlate(d, w . (x - xhat)) + lam`` per coordinate; the
    padded tail of the activations has no coordinates here, so it is never
    touched.
    """
    atoms = dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary, float)
    x_n = np.asarray(x_n, dtype=np.float64)
    z_n = np.asarray(z_n, dtype=np.float64)
    w_n = np.asarray(w_n, dtype=np.float64)
    if x_n.ndim != 1 or w_n.shape != x_n.shape:
        raise ValueError("x_n and w_n must be 1-d with equal length")
    n_times = x_n.size - atoms.shape[1] + 1
    if z_n.shape != (atoms.shape[0], n_times):
        raise ValueError(f"z_n must have shape ({atoms.shape[0]}, {n_times})")
    residual = x_n - convolve_activations(atoms, z_n[None])[0]
    return -correlate_signal(atoms, (w_n * residual)[None])[0] + lam


def _batch_problem(x, atoms, w, lam):
    """BoxProblem over the stacked activations of all trials (separable)."""
    n_trials, trial_len = x.shape
    n_atoms, length = atoms.shape
    n_times = trial_len - length + 1
    shape = (n_trials, n_atoms, n_times)
    dim = n_trials * n_atoms * n_times

    def smooth_fun(zf):
        r = x - convolve_activations(atoms, zf.reshape(shape))
        return 0.5 * float(np.sum(w * r * r))

    def smooth_grad(zf):
        r = x - convolve_activations(atoms, zf.reshape(shape))
        return -correlate_signal(atoms, w * r).ravel()

    def full_fg(zf):
        r = x - convolve_activations(atoms, zf.reshape(shape))
        f = 0.5 * float(np.sum(w * r * r)) + lam * float(zf.sum())
        g = -correlate_signal(atoms, w * r) + lam
        return f, g.ravel()

    smooth = BoxProblem(smooth_fun, smooth_grad, 0.0, np.inf, dim)
    full = BoxProblem(
        lambda zf: smooth_fun(zf) + lam * float(zf.sum()),
        lambda zf: smooth_grad(zf) + lam,
        0.0,
        np.inf,
        dim,
        fun_and_grad=full_fg,
    )
    return smooth, full, shape


def update_activations_batch(
    x,
    dictionary,
    w,
    lam: float,
    z0,
    solver: str = "lbfgsb",
    tol: float = 1e-8,
    max_iter: int = 60,
    record_trace: bool = False,
):
    """Solve the activation subproblem jointly for every trial.

    The problem is separable across trials, so the joint solution matches
    per-trial solves; one batched call keeps solver overhead off the inner
    loop.  Returns ``(z, SolverReport)`` with z of shape (N, K, T - L + 1).
    """
    atoms = dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary, float)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    smooth, full, shape = _batch_problem(x, atoms, w, lam)
    if z0.shape != shape:
        raise ValueError(f"z0 must have shape {shape}")
    if solver == "lbfgsb":
        zf, report = minimize_box(
            full, z0.ravel(), tol=tol, max_iter=max_iter, record_trace=record_trace
        )
    elif solver in ("ista", "fista"):
        run = ista_box if solver == "ista" else fista_box
        zf, report = run(
            smooth, lam, z0.ravel(), tol=tol, max_iter=max_iter,
            record_trace=record_trace,
        )
        report.objective = full.fun(zf)
    else:
        raise ValueError(f"unknown activation solver {solver!r}")
    return zf.reshape(shape), report


def update_activations(
    x_n,
    dictionary,
    w_n,
    lam: float,
    z0,
    solver: str = "lbfgsb",
    tol: float = 1e-8,
    max_iter: int = 200,
    record_trace: bool = False,
):
    """Per-trial activation update; see :func:`update_activations_batch`."""
    x_n = np.asarray(x_n, dtype=np.float64)
    w_n = np.asarray(w_n, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if np.any(z0 < 0):
        raise ValueError("z0 must be nonnegative")
    z, report = update_activations_batch(
        x_n[None], dictionary, w_n[None], lam, z0[None],
        solver=solver, tol=tol, max_iter=max_iter, record_trace=record_trace,
    )
    return z[0], report


# ---------------------------------------------------------------------------
# atom system assembly
# ---------------------------------------------------------------------------

def _zero_padded(z, trial_len):
    n_trials, n_atoms, n_times = z.shape
    zbar = np.zeros((n_trials, n_atoms, trial_len))
    zbar[:, :, :n_times] = z
    return zbar


def _rhs_and_const(x, z, w):
    n_trials, n_atoms = z.shape[:2]
    length = x.shape[1] - z.shape[2] + 1
    rhs = np.zeros(n_atoms * length)
    wx = w * x
    for k in range(n_atoms):
        block = rhs[k * length:(k + 1) * length]
        for n in range(n_trials):
            block += np.correlate(wx[n], z[n, k], mode="valid")
    return rhs, float(np.sum(w * x * x))


def _gram_toeplitz(z, w_scalars, length):
    """Per-trial-constant weights: every block is Toeplitz in the lag."""
    n_trials, n_atoms, n_times = z.shape
    kl = n_atoms * length
    gram = np.zeros((kl, kl))
    zp = np.zeros((n_trials, n_times + 2 * (length - 1)))
    for k in range(n_atoms):
        for kp in range(k, n_atoms):
            zp[:, length - 1:length - 1 + n_times] = z[:, kp]
            wins = sliding_window_view(zp, n_times, axis=-1)  # (N, 2L-1, P)
            lags = np.einsum("ndp,np->d", wins, w_scalars[:, None] * z[:, k])
            # lags[d] = sum_n c_n sum_u z_k[u] z_kp[u + d - (L-1)]
            block = toeplitz(lags[length - 1:], lags[length - 1::-1])
            gram[k * length:(k + 1) * length, kp * length:(kp + 1) * length] = block
            if kp != k:
                gram[kp * length:(kp + 1) * length, k * length:(k + 1) * length] = block.T
    return gram


def _gram_pairs(z, w, length):
    """Sparse path: iterate over pairs of nonzero activations per trial."""
    n_trials, n_atoms, n_times = z.shape
    kl = n_atoms * length
    gram = np.zeros((kl, kl))
    jj = np.arange(length)
    for n in range(n_trials):
        ks, ts = np.nonzero(z[n])
        vals = z[n][ks, ts]
        wn = w[n]
        m = len(ks)
        for a in range(m):
            va, ta, ka = vals[a], int(ts[a]), int(ks[a])
            row0 = ka * length
            for b in range(m):
                dt = ta - int(ts[b])
                jlo = max(0, -dt)
                jhi = min(length, length - dt)
                if jlo >= jhi:
                    continue
                sl = jj[jlo:jhi]
                gram[row0 + sl, int(ks[b]) * length + sl + dt] += (
                    va * vals[b] * wn[ta + sl]
                )
    return gram


def _gram_dense(z, w, length):
    """Blocked-matmul fallback for dense activations with general weights."""
    n_trials, n_atoms, n_times = z.shape
    trial_len = n_times + length - 1
    kl = n_atoms * length
    gram = np.zeros((kl, kl))
    chunk = max(1, int(DENSE_CHUNK_ELEMS / (n_atoms * length * trial_len)))
    for lo in range(0, n_trials, chunk):
        hi = min(n_trials, lo + chunk)
        nb = hi - lo
        shifted = np.zeros((nb, n_atoms, length, trial_len))
        zbar = _zero_padded(z[lo:hi], trial_len)
        for j in range(length):
            shifted[:, :, j, j:] = zbar[:, :, :trial_len - j]
        flat = shifted.reshape(nb, kl, trial_len)
        gram += np.matmul(flat * w[lo:hi, None, :], flat.transpose(0, 2, 1)).sum(axis=0)
    return 0.5 * (gram + gram.T)


def build_atom_system(x, z, w, method: str = "auto") -> AtomLinearSystem:
    """Assemble the atom-update normal equations without forming Z_n.

    ``method`` is one of ``auto`` (constant-weight Toeplitz fast path, then
    a sparse pair walk, then a dense blocked fallback), or an explicit
    ``toeplitz`` / ``pairs`` / ``dense`` override (``toeplitz`` requires
    weights constant within each trial).
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim != 3 or x.ndim != 2 or w.shape != x.shape:
        raise ValueError("inconsistent shapes for x, z, w")
    n_trials, n_atoms, n_times = z.shape
    length = x.shape[1] - n_times + 1
    if length < 1:
        raise ValueError("activation length exceeds trial length")

    per_trial_const = bool(np.all(w == w[:, :1]))
    if method == "auto":
        if per_trial_const:
            method = "toeplitz"
        else:
            n_per_trial = np.count_nonzero(z.reshape(n_trials, -1), axis=1)
            method = "pairs" if int(np.sum(n_per_trial ** 2)) <= PAIR_BUDGET else "dense"
    if method == "toeplitz":
        if not per_trial_const:
            raise ValueError("toeplitz path requires per-trial constant weights")
        gram = _gram_toeplitz(z, w[:, 0], length)
    elif method == "pairs":
        gram = _gram_pairs(z, w, length)
    elif method == "dense":
        gram = _gram_dense(z, w, length)
    else:
        raise ValueError(f"unknown assembly method {method!r}")
    rhs, const = _rhs_and_const(x, z, w)
    return AtomLinearSystem(gram, rhs, n_atoms, length, const)


# ---------------------------------------------------------------------------
# dual ascent for the atoms
# ---------------------------------------------------------------------------

def _solve_regularized(system: AtomLinearSystem, beta: np.ndarray) -> np.ndarray:
    mat = system.gram + np.diag(np.repeat(beta, system.atom_len))
    try:
        return cho_solve(cho_factor(mat, lower=True), system.rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericalError(
            "singular atom system; increase the beta floor (all multipliers "
            "zero with a rank-deficient gram)"
        ) from exc


def primal_from_dual(system: AtomLinearSystem, beta) -> np.ndarray:
    """Inner minimizer ``d*(beta)`` of the atom Lagrangian, shape (K, L).

    Solves ``(gram + bbar) d = rhs`` with ``bbar`` the block-diagonal
    replication of beta over each atom's coordinates.  The result is
    feasible only at the dual optimum; intermediate atoms may exceed the
    unit ball.
    """
    b = beta.beta if isinstance(beta, DualVars) else np.asarray(beta, dtype=np.float64).ravel()
    if b.shape != (system.n_atoms,):
        raise ValueError(f"beta must have {system.n_atoms} entries")
    if np.any(b < 0):
        raise ValueError("beta must be nonnegative")
    d = _solve_regularized(system, b)
    return d.reshape(system.n_atoms, system.atom_len)


def dual_value_and_grad(system: AtomLinearSystem, beta):
    """Dual objective ``g(beta) = const - rhs @ d*(beta) - sum(beta)`` and its
    gradient ``||d*_k||^2 - 1`` per atom."""
    b = beta.beta if isinstance(beta, DualVars) else np.asarray(beta, dtype=np.float64).ravel()
    d = _solve_regularized(system, b)
    value = system.data_const - float(system.rhs @ d) - float(b.sum())
    dk = d.reshape(system.n_atoms, system.atom_len)
    grad = np.einsum("kl,kl->k", dk, dk) - 1.0
    return value, grad


def _dual_ascent(system: AtomLinearSystem, beta0, tol, max_iter):
    def neg_fg(beta):
        try:
            value, grad = dual_value_and_grad(system, beta)
        except NumericalError:
            return np.inf, np.zeros_like(beta)
        return -value, -grad

    problem = BoxProblem(
        lambda b: neg_fg(b)[0], lambda b: neg_fg(b)[1], 0.0, np.inf,
        system.n_atoms, fun_and_grad=neg_fg,
    )
    beta, report = minimize_box(problem, beta0, tol=tol, max_iter=max_iter)
    return beta, report


def _conv_data_term(x, atoms, z, w) -> float:
    """Weighted residual energy evaluated with the same convolution
    arithmetic as the logged objective, so safeguard comparisons compose
    bitwise with the objective history."""
    r = x - convolve_activations(atoms, z)
    return 0.5 * float(np.sum(w * r * r))


def update_atoms(x, z, w, d0, tol: float = 1e-8, max_iter: int = 100, beta0=None):
    """Atom update by maximizing the dual over the multipliers.

    Returns ``(Dictionary, DualVars, SolverReport)``.  The result is
    feasible (norms within ``1 + 1e-6``, then normalized onto the ball) and
    satisfies complementary slackness ``|beta_k (||d_k||^2 - 1)| <= 1e-4``
    at convergence.  The update is also safeguarded: if the (rare) inexact
    dual solution would raise the weighted data term relative to ``d0``, the
    previous atoms are kept.  All-zero activations return ``d0`` unchanged
    with a ``degenerate`` status.
    """
    d0_atoms = d0.atoms if isinstance(d0, Dictionary) else np.asarray(d0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n_atoms = d0_atoms.shape[0]
    active = [k for k in range(n_atoms) if np.any(z[:, k, :] != 0)]
    if not active:
        report = SolverReport(0, 0.0, np.nan, "degenerate")
        beta = np.zeros(n_atoms) if beta0 is None else np.asarray(beta0, float).copy()
        return Dictionary(d0_atoms), DualVars(beta), report

    full_system = build_atom_system(x, z, w)
    beta_full = np.zeros(n_atoms) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    if len(active) < n_atoms:
        # atoms that never activate have zero gram blocks; solve the reduced
        # system and leave their previous waveforms untouched
        idx = np.concatenate([
            np.arange(k * full_system.atom_len, (k + 1) * full_system.atom_len)
            for k in active
        ])
        system = AtomLinearSystem(
            full_system.gram[np.ix_(idx, idx)], full_system.rhs[idx],
            len(active), full_system.atom_len, full_system.data_const,
        )
        beta_act = beta_full[active]
    else:
        system = full_system
        beta_act = beta_full

    beta_opt, report = _dual_ascent(system, beta_act, tol, max_iter)
    d_act = primal_from_dual(system, beta_opt)
    norms = np.linalg.norm(d_act, axis=1)
    if np.any(norms > 1.0 + FEAS_TOL):
        report.status = "max-iters" if report.status == "converged" else report.status
    d_act = d_act / np.maximum(norms, 1.0)[:, None]

    new_atoms = d0_atoms.copy()
    new_atoms[active] = d_act
    beta_out = beta_full.copy()
    beta_out[active] = beta_opt

    # safeguard: never let an inexact dual solve raise the M-step objective
    f_new = _conv_data_term(x, new_atoms, z, w)
    f_old = _conv_data_term(x, d0_atoms, z, w)
    if f_new > f_old:
        new_atoms = d0_atoms.copy()
        report = SolverReport(report.iterations, report.projected_grad_norm,
                              f_old, report.status, n_evals=report.n_evals)
    else:
        report.objective = f_new
    report.degenerate_atoms = tuple(k for k in range(n_atoms) if k not in active)
    return Dictionary(new_atoms), DualVars(beta_out), report


def update_atoms_bcd(
    x, z, w, d0, passes: int = 1, tol: float = 1e-8, max_iter: int = 100, beta0=None
):
    """Block coordinate descent over atoms.

    For each atom in turn the other atoms' contribution is removed from the
    signal (residual ``r_k = x - sum_{k' != k} d_k' * z_k'``) and the
    single-atom constrained problem is solved by the same dual ascent.  The
    M-step objective is nonincreasing after every single-atom solve.
    Returns ``(Dictionary, DualVars, SolverReport)`` for the last pass.
    """
    atoms = (d0.atoms if isinstance(d0, Dictionary) else np.asarray(d0, dtype=np.float64)).copy()
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n_atoms = atoms.shape[0]
    if passes < 1:
        raise ValueError("passes must be >= 1")
    if not np.any(z != 0):
        report = SolverReport(0, 0.0, np.nan, "degenerate")
        beta = np.zeros(n_atoms) if beta0 is None else np.asarray(beta0, float).copy()
        return Dictionary(atoms), DualVars(beta), report

    d_entry = atoms.copy()
    beta = np.zeros(n_atoms) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    xhat = convolve_activations(atoms, z)
    total_iters = 0
    last_report = None
    for _ in range(passes):
        for k in range(n_atoms):
            zk = z[:, k:k + 1, :]
            if not np.any(zk != 0):
                continue
            own = convolve_activations(atoms[k:k + 1], zk)
            residual = x - xhat + own
            system = build_atom_system(residual, zk, w)
            beta_k, report = _dual_ascent(system, beta[k:k + 1], tol, max_iter)
            d_k = primal_from_dual(system, beta_k)[0]
            nrm = float(np.linalg.norm(d_k))
            if nrm > 1.0:
                d_k = d_k / nrm
            if system.data_term(d_k[None]) <= system.data_term(atoms[k][None]):
                atoms[k] = d_k
                beta[k] = beta_k[0]
                # x - residual == xhat without atom k's contribution
                xhat = (x - residual) + convolve_activations(atoms[k:k + 1], zk)
            total_iters += report.iterations
            last_report = report
    # outer safeguard with fresh-convolution arithmetic, matching the
    # arithmetic of logged objectives
    f_new = _conv_data_term(x, atoms, z, w)
    f_old = _conv_data_term(x, d_entry, z, w)
    if f_new > f_old:
        atoms = d_entry
        f_new = f_old
    report = SolverReport(
        iterations=total_iters,
        projected_grad_norm=last_report.projected_grad_norm if last_report else 0.0,
        objective=f_new,
        status=last_report.status if last_report else "converged",
    )
    return Dictionary(atoms), DualVars(beta), report
