"""Monte Carlo backend: simulated Brownian paths and regression projections.

Conditional expectations are cross-sectional least-squares projections on a
user-chosen basis, in place of the lattice's exact child averages; the
reflection and penalty steps are identical to the lattice solvers and are
applied after the projection, so obstacle constraints hold path by path,
exactly.  This is the backend for dimensions above one and for
cross-checking the lattice at scale.

Reproducibility: path ``i`` draws from a counter-based bit generator keyed
by ``(seed, i)``, so bundles are bit-identical across runs and independent
of how many other paths are simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .generator import Generator

CONDITION_WARN = 1e8


class SingularRegressionError(RuntimeError):
    """The regression design matrix is numerically rank deficient."""


@dataclass(frozen=True)
class PathBundle:
    """Simulated Brownian increments and the state paths they drive."""

    d: int
    T: float
    N: int
    M: int
    seed: int
    increments: np.ndarray  # (M, N, d)
    states: np.ndarray      # (M, N + 1, d), cumulative sums from zero
    diagnostics: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def gate_ok(self) -> bool:
        return self.diagnostics.get("gate_ok", False)


def simulate_paths(d: int, T: float, N: int, M: int, seed: int) -> PathBundle:
    """Simulate ``M`` independent ``d``-dimensional Brownian paths."""
    if d < 1 or N < 1:
        raise ValueError("dimension and step count must be positive")
    if T <= 0:
        raise ValueError("horizon must be positive")
    if M < 100:
        raise ValueError("at least 100 paths are required")
    dt = T / N
    increments = np.empty((M, N, d))
    base = (int(seed) & ((1 << 64) - 1)) << 64  # 128-bit key: (seed, path)
    for i in range(M):
        gen = np.random.Generator(np.random.Philox(key=base + i))
        increments[i] = gen.standard_normal((N, d)) * math.sqrt(dt)
    states = np.zeros((M, N + 1, d))
    np.cumsum(increments, axis=1, out=states[:, 1:, :])

    flat = increments.reshape(-1, d)
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    mean_gate = bool(np.all(np.abs(mean) <= 3.0 / math.sqrt(M)))
    var_gate = bool(np.all(np.abs(var - dt) <= 0.1 * dt))
    diagnostics = {
        "increment_mean": mean.tolist(),
        "increment_var": var.tolist(),
        "mean_gate_ok": mean_gate,
        "var_gate_ok": var_gate,
        "gate_ok": mean_gate and var_gate,
    }
    if d > 1:
        cov = np.cov(flat, rowvar=False)
        off = cov[~np.eye(d, dtype=bool)]
        diagnostics["max_cross_covariance"] = float(np.max(np.abs(off)))
        diagnostics["cross_gate_ok"] = bool(
            np.max(np.abs(off)) <= 3.0 * dt / math.sqrt(M)
        )
    return PathBundle(d, float(T), int(N), int(M), int(seed), increments, states,
                      diagnostics)


# ----------------------------------------------------------------------
# regression bases
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Cross-sectional basis: total-degree polynomials or indicator bins."""

    family: str = "polynomial"
    degree: int = 3
    bins: int = 8

    def design(self, states: np.ndarray, edges: Optional[np.ndarray] = None):
        """Design matrix at one time slice; states has shape (M, d)."""
        if self.family == "polynomial":
            return self._poly(states), None
        if self.family == "indicator-bins":
            if states.shape[1] != 1:
                raise ValueError("indicator bins support one dimension")
            x = states[:, 0]
            if edges is None:
                qs = np.linspace(0.0, 1.0, self.bins + 1)[1:-1]
                edges = np.quantile(x, qs)
            idx = np.searchsorted(edges, x)
            mat = np.zeros((x.size, self.bins))
            mat[np.arange(x.size), idx] = 1.0
            keep = mat.sum(axis=0) > 0
            return mat[:, keep], edges
        raise ValueError(f"unknown basis family {self.family!r}")

    def _poly(self, states: np.ndarray) -> np.ndarray:
        m, d = states.shape
        cols = [np.ones(m)]
        powers = _total_degree_powers(d, self.degree)
        for p in powers:
            col = np.ones(m)
            for axis, e in enumerate(p):
                if e:
                    col = col * states[:, axis] ** e
            cols.append(col)
        return np.column_stack(cols)


def _total_degree_powers(d: int, degree: int):
    """Nonzero multi-indices with total degree <= degree, fixed order."""
    out = []

    def rec(prefix, remaining, axis):
        if axis == d:
            if any(prefix):
                out.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            rec(prefix + [e], remaining - e, axis + 1)

    rec([], degree, 0)
    out.sort(key=lambda p: (sum(p), p))
    return out


def _project(design: np.ndarray, targets: np.ndarray):
    """Least squares of each target column on the design; returns fitted
    values and the condition number."""
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    if s[0] <= 0 or s[-1] <= s[0] * 1e-13:
        raise SingularRegressionError(
            f"regression design is rank deficient: singular values "
            f"{s[0]:.3g} .. {s[-1]:.3g}"
        )
    cond = float(s[0] / s[-1])
    coeff = vt.T @ ((u.T @ targets) / s[:, None])
    return design @ coeff, cond


# ----------------------------------------------------------------------
# backward solve on paths
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class McProblem:
    """Problem datum for the path backend, given as state functions."""

    terminal: Callable                      # states (M, d) -> values (M,)
    lower: Optional[Callable] = None        # (t, states) -> values
    upper: Optional[Callable] = None


@dataclass(frozen=True)
class McResult:
    y0: float
    stderr: float
    max_condition: float
    condition_warning: bool
    flat_off_lower: float
    flat_off_upper: float
    seed: int
    basis: RegressionBasis
    scheme: str
    bootstrap_samples: int


def write_bundle_csv(path, bundle: PathBundle) -> None:
    """Path dump: one row per (path, step, coordinate)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "coord", "dB", "state"])
        for i in range(bundle.M):
            for k in range(bundle.N):
                for j in range(bundle.d):
                    w.writerow([
                        i, k, j,
                        f"{bundle.increments[i, k, j]:.17g}",
                        f"{bundle.states[i, k + 1, j]:.17g}",
                    ])


def write_mc_sidecar(path, result: "McResult") -> None:
    """Estimate sidecar: seed, basis spec and diagnostics."""
    import json

    payload = {
        "y0": result.y0,
        "stderr": result.stderr,
        "seed": result.seed,
        "scheme": result.scheme,
        "basis_family": result.basis.family,
        "basis_degree": result.basis.degree,
        "basis_bins": result.basis.bins,
        "max_condition": result.max_condition,
        "condition_warning": result.condition_warning,
        "flat_off_lower": result.flat_off_lower,
        "flat_off_upper": result.flat_off_upper,
        "bootstrap_samples": result.bootstrap_samples,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def solve_mc(
    paths: PathBundle,
    problem: McProblem,
    g: Generator,
    basis: RegressionBasis = RegressionBasis(),
    scheme: str = "explicit",
    penalty: Optional[tuple] = None,
    batches: int = 50,
    bootstrap_samples: int = 500,
) -> McResult:
    """Backward induction on simulated paths with regression projections.

    ``penalty`` is ``(side, level)`` to approximate a reflection by the
    closed-form implicit penalty instead of the clamp.  The standard error
    is bootstrapped from disjoint path batches re-solved end to end, so it
    sees the regression-stage noise, not just the final averaging.
    """
    from .rbsde import penalty_step

    M, N, d = paths.M, paths.N, paths.d
    dt = paths.dt
    term_all = np.asarray(problem.terminal(paths.states[:, N, :]), dtype=float)
    if term_all.shape != (M,):
        raise ValueError("terminal function must return one value per path")
    # terminal order checks mirror the lattice solvers
    if problem.lower is not None:
        low = problem.lower(paths.T, paths.states[:, N, :])
        if np.any(low > term_all + 1e-12):
            raise ValueError("terminal data below the lower obstacle on a path")
    if problem.upper is not None:
        up = problem.upper(paths.T, paths.states[:, N, :])
        if np.any(term_all > up + 1e-12):
            raise ValueError("terminal data above the upper obstacle on a path")

    max_cond = 1.0
    flat_lower = 0.0
    flat_upper = 0.0

    def clamp(y, t, states, record):
        nonlocal flat_lower, flat_upper
        out = y
        if problem.lower is not None:
            low = np.asarray(problem.lower(t, states), dtype=float)
            if penalty is not None and penalty[0] == "lower":
                out = penalty_step(out, low, penalty[1], dt, "lower")
            else:
                new = np.maximum(low, out)
                if record:
                    flat_lower = max(
                        flat_lower, float(np.max(np.abs((new - low) * (new - out))))
                    )
                out = new
        if problem.upper is not None:
            up = np.asarray(problem.upper(t, states), dtype=float)
            if penalty is not None and penalty[0] == "upper":
                out = penalty_step(out, up, penalty[1], dt, "upper")
            else:
                new = np.minimum(up, out)
                if record:
                    flat_upper = max(
                        flat_upper, float(np.max(np.abs((up - new) * (out - new))))
                    )
                out = new
        return out

    def driver_step(expectation, zhat, t, states):
        svar = states[:, 0] if d == 1 else states
        if scheme == "explicit":
            return expectation + dt * np.asarray(
                g.fn(t, svar, expectation, zhat), dtype=float
            )
        damp = 1.0 / (1.0 + dt * g.lam_plus)
        y = expectation + dt * np.asarray(g.fn(t, svar, expectation, zhat), dtype=float)
        for _ in range(100):
            target = expectation + dt * np.asarray(g.fn(t, svar, y, zhat), dtype=float)
            resid = float(np.max(np.abs(target - y)))
            if resid <= 1e-13 * (1.0 + float(np.max(np.abs(expectation)))):
                return target
            y = y + damp * (target - y)
        return target

    def backward(idx, record=False):
        nonlocal max_cond
        v = term_all[idx]
        for k in range(N - 1, 0, -1):
            states_k = paths.states[idx, k, :]
            db = paths.increments[idx, k, :]
            design, _ = basis.design(states_k)
            targets = np.column_stack([v] + [v * db[:, j] / dt for j in range(d)])
            fitted, cond = _project(design, targets)
            if record:
                max_cond = max(max_cond, cond)
            expectation = fitted[:, 0]
            zhat = fitted[:, 1] if d == 1 else fitted[:, 1:]
            y = driver_step(expectation, zhat, dt * k, states_k)
            v = clamp(y, dt * k, states_k, record)
        # root: every path shares the state, plain averages are exact
        e0 = float(v.mean())
        z0 = v @ paths.increments[idx, 0, :] / (dt * idx.size)
        y0 = driver_step(
            np.array([e0]),
            np.atleast_1d(float(z0[0])) if d == 1 else z0[None, :],
            0.0,
            paths.states[idx[:1], 0, :],
        )
        return float(clamp(y0, 0.0, paths.states[idx[:1], 0, :], record)[0])

    y0 = backward(np.arange(M), record=True)

    n_batches = max(2, min(batches, M // 100))
    size = M // n_batches
    batch_vals = np.array(
        [backward(np.arange(b * size, (b + 1) * size)) for b in range(n_batches)]
    )
    rng = np.random.default_rng(paths.seed ^ 0x5EED_B00F)
    resampled = rng.integers(0, n_batches, size=(bootstrap_samples, n_batches))
    boot_means = batch_vals[resampled].mean(axis=1)
    stderr = float(boot_means.std(ddof=1))

    return McResult(
        y0=y0,
        stderr=stderr,
        max_condition=max_cond,
        condition_warning=max_cond > CONDITION_WARN,
        flat_off_lower=flat_lower,
        flat_off_upper=flat_upper,
        seed=paths.seed,
        basis=basis,
        scheme=scheme,
        bootstrap_samples=bootstrap_samples,
    )
