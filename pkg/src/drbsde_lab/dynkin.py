"""Stopping games on full trees: payoffs, exhaustive oracles, saddle checks.

Rules are path based (a full-tree node is a path prefix), because the
optimizations below range over *all* adapted stopping decisions, not just
state-measurable ones.  The payoff of a rule pair hands the stopper of the
lower rail her rail when she is strictly first, the upper rail to the other
player when he is not later (ties included, before the horizon), and the
terminal data when both wait to the end:

    R(tau, gamma) = L at tau       if tau < gamma
                    U at gamma     if gamma <= tau and gamma < T
                    xi             if tau = gamma = T

The exhaustive oracle brute-forces the pair table, so its sup-inf/inf-sup
values are exact finite maxima, independent of any solver identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bsde import FixedPointError, IMPLICIT_CAP, IMPLICIT_TOL, _nan_sup, g_evaluate
from .drbsde import DynkinGame, solve_drbsde
from .lattice import FULL_TREE, Lattice, StoppingRule
from .rbsde import first_hitting

ORACLE_MAX_N = 4

__all__ = [
    "StoppingRule",
    "GameReport",
    "payoff_R",
    "strategy_value",
    "enumerate_stopping_rules",
    "game_value_oracle",
    "verify_saddle",
    "rule_count",
]


def rule_count(depth: int) -> int:
    """Number of canonical stopping rules on a depth-``depth`` binary tree."""
    s = 1
    for _ in range(depth):
        s = 1 + s * s
    return s


def _check_oracle_tree(tree: Lattice) -> None:
    if tree.mode != FULL_TREE:
        raise ValueError("rule enumeration works on the full-tree backend")
    if tree.N > ORACLE_MAX_N:
        raise ValueError(
            f"enumeration size guard: N <= {ORACLE_MAX_N} "
            f"({rule_count(tree.N)} rules at N = {tree.N})"
        )


_SHAPE_MEMO: dict[int, list] = {}


def _shapes(depth: int) -> list:
    """All canonical rule shapes on a depth-``depth`` subtree (memoized)."""
    cached = _SHAPE_MEMO.get(depth)
    if cached is not None:
        return cached
    if depth == 0:
        out = [(np.array([True]),)]
    else:
        stop_now = (
            (np.array([True]),)
            + tuple(np.zeros(1 << i, dtype=bool) for i in range(1, depth))
            + (np.ones(1 << depth, dtype=bool),)
        )
        out = [stop_now]
        sub = _shapes(depth - 1)
        for left in sub:
            for right in sub:
                out.append(
                    (np.array([False]),)
                    + tuple(
                        np.concatenate([left[i], right[i]]) for i in range(depth)
                    )
                )
    _SHAPE_MEMO[depth] = out
    return out


def enumerate_stopping_rules(tree: Lattice):
    """Every canonical stopping rule on the tree, once, in a fixed order."""
    _check_oracle_tree(tree)
    rules = [StoppingRule(tree, shape) for shape in _shapes(tree.N)]
    expected = rule_count(tree.N)
    if len(rules) != expected:
        raise RuntimeError(
            f"enumeration produced {len(rules)} rules, recurrence says {expected}"
        )
    return rules, expected


def _delay_rule(rule: StoppingRule, k: int) -> StoppingRule:
    """Forget flags strictly before step ``k``; the rule then starts at ``k``."""
    lat = rule.lattice
    flags = [
        np.zeros(lat.n_nodes(i), dtype=bool) if i < k else rule.flags[i]
        for i in range(lat.N + 1)
    ]
    return StoppingRule(lat, tuple(flags))


def _first_flag_step(rule: StoppingRule, terminal_index: int) -> int:
    lat = rule.lattice
    for k in range(lat.N + 1):
        if rule.flags[k][terminal_index >> (lat.N - k)]:
            return k
    return lat.N


def payoff_R(tau: StoppingRule, gamma: StoppingRule, path, game: DynkinGame) -> float:
    """Game payoff along one terminal path (index or bit word)."""
    lat = game.lattice
    if lat.mode != FULL_TREE:
        raise ValueError("per-path payoffs need the full-tree backend")
    if not (lat.same_grid(tau.lattice) and lat.same_grid(gamma.lattice)):
        raise ValueError("rules live on a different lattice")
    p = int(path, 2) if isinstance(path, str) else int(path)
    k_tau = _first_flag_step(tau, p)
    k_gamma = _first_flag_step(gamma, p)
    if k_tau < k_gamma:
        return float(game.L[k_tau][p >> (lat.N - k_tau)])
    if k_gamma <= k_tau and k_gamma < lat.N:
        return float(game.U[k_gamma][p >> (lat.N - k_gamma)])
    return float(game.xi.values[p])


def _pair_table_block(
    tree: Lattice,
    game: DynkinGame,
    tau_flags: list[np.ndarray],
    gamma_flags: list[np.ndarray],
    scheme: str,
):
    """Root game values for a block of rule pairs, one backward sweep.

    ``tau_flags[k]`` has shape ``(a, w_k)`` and ``gamma_flags[k]`` shape
    ``(b, w_k)``; the result has shape ``(a, b)``.  The pair stops at the
    first node either rule flags; the upper rail wins ties.
    """
    g = game.g
    dt = tree.dt
    a = tau_flags[0].shape[0]
    b = gamma_flags[0].shape[0]
    n = tree.N
    v = np.broadcast_to(game.xi.values, (a, b, 1 << n)).copy()
    for k in range(n - 1, -1, -1):
        down = v[..., 0::2]
        up = v[..., 1::2]
        expectation = 0.5 * (down + up)
        zval = (up - down) / (2.0 * tree.sqrt_dt)
        t = tree.time(k)
        states = tree.states(k)
        if scheme == "explicit":
            cand = expectation + dt * g.fn(t, states, expectation, zval)
        else:
            damp = 1.0 / (1.0 + dt * g.lam_plus)
            y = expectation + dt * g.fn(t, states, expectation, zval)
            scale = 1.0 + _nan_sup(expectation)
            residual = np.inf
            for _ in range(IMPLICIT_CAP):
                target = expectation + dt * g.fn(t, states, y, zval)
                residual = _nan_sup(target - y)
                if residual <= 1e-15 * scale:
                    break
                y = y + damp * (target - y)
            if residual > IMPLICIT_TOL * scale:
                raise FixedPointError(f"implicit step {k} stalled in pair table")
            cand = target
        stop_t = tau_flags[k][:, None, :]
        stop_g = gamma_flags[k][None, :, :]
        pay = np.where(stop_g, game.U[k], game.L[k])
        v = np.where(stop_t | stop_g, pay, cand)
    return v[..., 0]


def strategy_value(
    tree: Lattice,
    game: DynkinGame,
    tau: StoppingRule,
    gamma: StoppingRule,
    scheme: str = "explicit",
) -> float:
    """Evaluation of the pair payoff collected at the earlier stop, from the root."""
    if tree.mode != FULL_TREE:
        raise ValueError("strategy values need the full-tree backend")
    if not tree.same_grid(game.lattice):
        raise ValueError("game lives on a different lattice")
    val = _pair_table_block(
        tree,
        game,
        [f[None, :] for f in tau.flags],
        [f[None, :] for f in gamma.flags],
        scheme,
    )
    return float(val[0, 0])


@dataclass(frozen=True)
class GameReport:
    y0: float
    sup_inf: Optional[float] = None
    inf_sup: Optional[float] = None
    optimal_pair: Optional[tuple[int, int]] = None
    saddle_pair: Optional[tuple[StoppingRule, StoppingRule]] = None
    saddle_equality_gap: Optional[float] = None
    max_saddle_violation: Optional[float] = None
    sandwich_slack: Optional[float] = None
    n_rules: int = 0
    tol: float = 1e-10
    scale: float = 1.0

    @property
    def oracle_gap(self) -> float:
        if self.sup_inf is None or self.inf_sup is None:
            return 0.0
        return max(abs(self.sup_inf - self.y0), abs(self.inf_sup - self.y0))

    @property
    def effective_tol(self) -> float:
        # absolute tolerance on O(1) data; values are compared after
        # rescaling once the obstacle scale passes 1e3
        return self.tol * max(1.0, self.scale / 1e3)

    @property
    def passed(self) -> bool:
        tol = self.effective_tol
        checks = []
        if self.sup_inf is not None and self.inf_sup is not None:
            checks.append(self.sup_inf <= self.inf_sup + tol)
            checks.append(self.oracle_gap <= tol)
        if self.max_saddle_violation is not None:
            checks.append(self.max_saddle_violation <= tol)
        if self.saddle_equality_gap is not None:
            checks.append(self.saddle_equality_gap <= tol)
        if self.sandwich_slack is not None:
            checks.append(self.sandwich_slack <= tol)
        return all(checks)


def pair_value_table(
    tree: Lattice, game: DynkinGame, scheme: str = "explicit", block: int = 64
) -> np.ndarray:
    """Root values of every rule pair, rows indexed by the first player."""
    _check_oracle_tree(tree)
    rules, count = enumerate_stopping_rules(tree)
    stacked = [
        np.stack([r.flags[k] for r in rules]) for k in range(tree.N + 1)
    ]
    table = np.empty((count, count))
    for lo in range(0, count, block):
        hi = min(lo + block, count)
        table[lo:hi] = _pair_table_block(
            tree,
            game,
            [f[lo:hi] for f in stacked],
            stacked,
            scheme,
        )
    return table


def game_value_oracle(
    tree: Lattice,
    game: DynkinGame,
    scheme: str = "explicit",
    tol: float = 1e-10,
    block: int = 64,
) -> GameReport:
    """Brute-force the full pair table and compare both iterated optima
    against the backward solve."""
    table = pair_value_table(tree, game, scheme, block)
    count = table.shape[0]
    row_min = table.min(axis=1)
    col_max = table.max(axis=0)
    sup_inf = float(row_min.max())
    inf_sup = float(col_max.min())
    i_best = int(np.argmax(row_min))
    j_best = int(np.argmin(col_max))
    y0 = solve_drbsde(tree, game, scheme).root_value
    return GameReport(
        y0=y0,
        sup_inf=sup_inf,
        inf_sup=inf_sup,
        optimal_pair=(i_best, j_best),
        n_rules=count,
        tol=tol,
        scale=game.scale(),
    )


def write_game_report(path, report: GameReport) -> None:
    """Structured-text dump of a game report."""
    lines = [f"y0 {report.y0:.17g}"]
    for name in ("sup_inf", "inf_sup", "saddle_equality_gap",
                 "max_saddle_violation", "sandwich_slack"):
        value = getattr(report, name)
        if value is not None:
            lines.append(f"{name} {value:.17g}")
    if report.optimal_pair is not None:
        lines.append(f"optimal_pair {report.optimal_pair[0]} {report.optimal_pair[1]}")
    if report.saddle_pair is not None:
        lines.append(
            f"saddle_pair {report.saddle_pair[0].hash_hex()} "
            f"{report.saddle_pair[1].hash_hex()}"
        )
    lines.append(f"n_rules {report.n_rules}")
    lines.append(f"tolerance {report.effective_tol:.17g}")
    lines.append(f"passed {str(report.passed).lower()}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_pair_table_csv(path, tree: Lattice, game: DynkinGame,
                         scheme: str = "explicit") -> None:
    """On-demand dump of the full pair-value table (size-guarded)."""
    table = pair_value_table(tree, game, scheme)
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_index", "gamma_index", "value"])
        for i in range(table.shape[0]):
            for j in range(table.shape[1]):
                w.writerow([i, j, f"{table[i, j]:.17g}"])


def verify_saddle(
    tree: Lattice,
    game: DynkinGame,
    solution=None,
    scheme: str = "explicit",
    tol: float = 1e-10,
    seed: int = 0,
) -> GameReport:
    """Check that the two first contact rules beat every unilateral deviation.

    With the opponent pinned at her contact rule, every enumerated deviation
    of the other player lands on the wrong side of the backward value; the
    contact pair itself attains it, and evaluating the solution stopped at
    the capped rules sandwiches it from both sides.
    """
    _check_oracle_tree(tree)
    if solution is None:
        solution = solve_drbsde(tree, game, scheme)
    y0 = solution.root_value
    rules, count = enumerate_stopping_rules(tree)
    stacked = [
        np.stack([r.flags[k] for r in rules]) for k in range(tree.N + 1)
    ]
    tau_star = first_hitting(solution, None, "lower").canonicalize()
    gamma_star = first_hitting(solution, None, "upper").canonicalize()

    # every tau against gamma*; tau* against every gamma
    col = _pair_table_block(
        tree, game, stacked, [f[None, :] for f in gamma_star.flags], scheme
    )[:, 0]
    row = _pair_table_block(
        tree, game, [f[None, :] for f in tau_star.flags], stacked, scheme
    )[0, :]
    violation = max(float(np.max(col - y0)), float(np.max(y0 - row)))
    equality_gap = abs(strategy_value(tree, game, tau_star, gamma_star, scheme) - y0)

    # stopped-value sandwich at sampled start steps; deviations and contact
    # rules are delayed past the start so they range over rules after nu
    rng = np.random.default_rng(seed)
    sandwich = 0.0
    picks = rng.integers(0, count, size=min(6, count))
    for k in range(tree.N + 1):
        nu = StoppingRule.at_step(tree, k)
        tau_star_nu = first_hitting(solution, nu, "lower")
        gamma_star_nu = first_hitting(solution, nu, "upper")
        for idx in picks:
            dev = _delay_rule(rules[int(idx)], k)
            capped_up = dev.union(gamma_star_nu)
            low_side = g_evaluate(tree, nu, capped_up, solution.Y, game.g, scheme)
            sandwich = max(
                sandwich, float(np.max(low_side[k] - solution.Y[k]))
            )
            capped_down = dev.union(tau_star_nu)
            high_side = g_evaluate(tree, nu, capped_down, solution.Y, game.g, scheme)
            sandwich = max(
                sandwich, float(np.max(solution.Y[k] - high_side[k]))
            )
    return GameReport(
        y0=y0,
        saddle_pair=(tau_star, gamma_star),
        saddle_equality_gap=equality_gap,
        max_saddle_violation=violation,
        sandwich_slack=sandwich,
        n_rules=count,
        tol=tol,
        scale=game.scale(),
    )
