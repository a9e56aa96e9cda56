"""Two-obstacle solver and the three independent routes to the same solution.

Strict separation of the obstacles (``L < U`` everywhere) replaces any
between-obstacle regularity assumption and is what makes the alternating
pasting construction terminate: the value process cannot touch both rails
at one node, so contacts alternate and each full alternation advances time.

Routes cross-validated against the direct backward induction:

* increasing penalization -- upper-reflected solves whose driver is pushed
  up by ``n (y - L)^-``, values rising toward the solution;
* decreasing penalization -- lower-reflected solves pushed down by
  ``n (y - U)^+``, values falling toward it;
* pasting -- alternating one-obstacle segments between the contact
  frontiers of the solution, each segment fed by the continuation value
  already built past its end.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bsde import Solution, _base_meta, step_candidate
from .generator import Generator
from .lattice import (
    FULL_TREE,
    AdaptedProcess,
    Lattice,
    StoppingRule,
    TerminalPayoff,
)
from .rbsde import PenalizationReport, default_eps_hit, penalty_step

SEPARATION_FLOOR = 1e-9


class SeparationError(ValueError):
    """The obstacles touch or cross somewhere."""


@dataclass(frozen=True)
class DynkinGame:
    """Problem datum: terminal data between two strictly separated rails."""

    xi: TerminalPayoff
    g: Generator
    L: AdaptedProcess
    U: AdaptedProcess

    def __post_init__(self):
        lat = self.xi.lattice
        if not (lat.same_grid(self.L.lattice) and lat.same_grid(self.U.lattice)):
            raise ValueError("obstacles must live on the terminal data's lattice")
        scale = max(
            1.0, self.L.sup_norm(), self.U.sup_norm(), float(np.max(np.abs(self.xi.values)))
        )
        margin = self.separation_margin()
        if margin <= SEPARATION_FLOOR * scale:
            k, i = self._worst_node()
            raise SeparationError(
                f"obstacles are not strictly separated at node "
                f"(k={k}, id={lat.node_ids(k)[i]}): U - L = {margin:.3g} "
                f"(floor {SEPARATION_FLOOR * scale:.3g})"
            )
        low = self.L.terminal() > self.xi.values
        if low.any():
            i = int(np.argmax(low))
            raise ValueError(
                f"terminal data below the lower rail at node "
                f"(k={lat.N}, id={lat.node_ids(lat.N)[i]})"
            )
        high = self.xi.values > self.U.terminal()
        if high.any():
            i = int(np.argmax(high))
            raise ValueError(
                f"terminal data above the upper rail at node "
                f"(k={lat.N}, id={lat.node_ids(lat.N)[i]})"
            )

    @property
    def lattice(self) -> Lattice:
        return self.xi.lattice

    def separation_margin(self) -> float:
        return min(
            float(np.min(self.U[k] - self.L[k])) for k in range(self.lattice.N + 1)
        )

    def _worst_node(self):
        best = (0, 0, np.inf)
        for k in range(self.lattice.N + 1):
            diff = self.U[k] - self.L[k]
            i = int(np.argmin(diff))
            if diff[i] < best[2]:
                best = (k, i, float(diff[i]))
        return best[0], best[1]

    def scale(self) -> float:
        return max(
            1.0,
            self.L.sup_norm(),
            self.U.sup_norm(),
            float(np.max(np.abs(self.xi.values))),
        )


def solve_drbsde(lattice: Lattice, game: DynkinGame, scheme: str = "explicit") -> Solution:
    """Direct backward induction clamping each candidate between the rails.

    Strict separation makes the two clamps commute, and at most one of the
    compensators can act at a node, so ``dK * dJ = 0`` and both flat-off
    products vanish exactly.
    """
    if not lattice.same_grid(game.lattice):
        raise ValueError("game lives on a different lattice")
    g = game.g
    meta = _base_meta(lattice, g, scheme)
    stats: dict = {}
    yvals = [np.asarray(game.xi.values, dtype=float)]
    zvals = [np.zeros(lattice.n_nodes(lattice.N))]
    dk = [np.zeros(lattice.n_nodes(lattice.N))]
    dj = [np.zeros(lattice.n_nodes(lattice.N))]
    for k in range(lattice.N - 1, -1, -1):
        cand, z = step_candidate(lattice, g, k, yvals[-1], scheme, stats=stats)
        y = np.minimum(game.U[k], np.maximum(game.L[k], cand))
        yvals.append(y)
        zvals.append(z)
        dk.append(np.maximum(game.L[k] - cand, 0.0))
        dj.append(np.maximum(cand - game.U[k], 0.0))
    yvals.reverse(); zvals.reverse(); dk.reverse(); dj.reverse()
    meta.update(stats)
    return Solution(
        kind="doubly-reflected",
        Y=AdaptedProcess(lattice, tuple(yvals)),
        Z=AdaptedProcess(lattice, tuple(zvals)),
        dK=AdaptedProcess(lattice, tuple(dk)),
        dJ=AdaptedProcess(lattice, tuple(dj)),
        meta=meta,
        obstacle_lower=game.L,
        obstacle_upper=game.U,
    )


# ----------------------------------------------------------------------
# the two penalization schemes
# ----------------------------------------------------------------------


def _penalized_reflected(lattice, game, n, direction, scheme):
    """One penalty level of either scheme.

    increasing: keep the upper reflection, push up with the lower penalty;
    decreasing: keep the lower reflection, push down with the upper penalty.
    """
    g = game.g
    meta = _base_meta(lattice, g, scheme)
    meta["penalty_level"] = n
    meta["direction"] = direction
    stats: dict = {}
    yvals = [np.asarray(game.xi.values, dtype=float)]
    zvals = [np.zeros(lattice.n_nodes(lattice.N))]
    dk = [np.zeros(lattice.n_nodes(lattice.N))]
    dj = [np.zeros(lattice.n_nodes(lattice.N))]
    for k in range(lattice.N - 1, -1, -1):
        cand, z = step_candidate(lattice, g, k, yvals[-1], scheme, stats=stats)
        if direction == "increasing":
            pushed = penalty_step(cand, game.L[k], n, lattice.dt, "lower")
            y = np.minimum(game.U[k], pushed)
            dk.append(np.zeros_like(y))
            dj.append(pushed - y)
        else:
            pushed = penalty_step(cand, game.U[k], n, lattice.dt, "upper")
            y = np.maximum(game.L[k], pushed)
            dk.append(y - pushed)
            dj.append(np.zeros_like(y))
        yvals.append(y)
        zvals.append(z)
    yvals.reverse(); zvals.reverse(); dk.reverse(); dj.reverse()
    meta.update(stats)
    return Solution(
        kind="reflected-upper" if direction == "increasing" else "reflected-lower",
        Y=AdaptedProcess(lattice, tuple(yvals)),
        Z=AdaptedProcess(lattice, tuple(zvals)),
        dK=AdaptedProcess(lattice, tuple(dk)),
        dJ=AdaptedProcess(lattice, tuple(dj)),
        meta=meta,
        obstacle_lower=game.L if direction == "decreasing" else None,
        obstacle_upper=game.U if direction == "increasing" else None,
    )


def double_penalization(
    lattice: Lattice,
    game: DynkinGame,
    schedule=(1.0, 4.0, 16.0, 64.0, 256.0, 1024.0),
    direction: str = "increasing",
    scheme: str = "explicit",
    jobs: int = 1,
):
    """Run one penalization scheme along ``schedule`` against the direct solve."""
    if direction not in ("increasing", "decreasing"):
        raise ValueError(f"unknown direction {direction!r}")
    schedule = tuple(float(n) for n in schedule)
    if not schedule:
        raise ValueError("penalty schedule must be nonempty")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("penalty schedule must be strictly increasing")

    def level(n):
        return _penalized_reflected(lattice, game, n, direction, scheme)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            levels = list(pool.map(level, schedule))
    else:
        levels = [level(n) for n in schedule]

    direct = solve_drbsde(lattice, game, scheme)
    scale = 1.0 + direct.Y.sup_norm()
    sign = 1.0 if direction == "increasing" else -1.0
    # roundoff floor: sub-ulp true differences between levels can round
    # against the exact-arithmetic monotonicity
    floor = 64.0 * np.finfo(float).eps * scale

    gaps, violations, residuals = [], [], []
    prev = None
    for n, sol in zip(schedule, levels):
        gaps.append(max(
            float(np.max(np.abs(sol.Y[k] - direct.Y[k])))
            for k in range(lattice.N + 1)
        ))
        viol = 0
        if prev is not None:
            for k in range(lattice.N + 1):
                viol += int(np.count_nonzero(sign * (sol.Y[k] - prev.Y[k]) < -floor))
        violations.append(viol)
        # flat-off residual on the penalized side; the reflected side is
        # exact by construction
        resid = 0.0
        for k in range(lattice.N + 1):
            dist = (
                np.maximum(game.L[k] - sol.Y[k], 0.0)
                if direction == "increasing"
                else np.maximum(sol.Y[k] - game.U[k], 0.0)
            )
            resid = max(resid, float(np.max(dist * (lattice.dt * n * dist))))
        residuals.append(resid)
        prev = sol

    report = PenalizationReport(
        side="lower" if direction == "increasing" else "upper",
        schedule=schedule,
        sup_gaps=tuple(gaps),
        monotonicity_violations=tuple(violations),
        flat_off_residuals=tuple(residuals),
        converged=gaps[-1] <= 1e-6 * scale,
        final_gap=gaps[-1],
        gap_tolerance=1e-6 * scale,
    )
    return levels, report


# ----------------------------------------------------------------------
# pasting over alternating contact times
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PastingLedger:
    """Alternating contact frontiers and the segment structure they cut."""

    boundaries: tuple[StoppingRule, ...]  # after segment 1, 2, ...
    sides: tuple[str, ...]                # side of segment 1, 2, ...
    node_counts: tuple[int, ...]
    max_depth: int                        # per-path segment count, maximum
    depth_by_terminal: np.ndarray
    segments_by_terminal: np.ndarray      # nonempty segments along each path

    def rows(self):
        out = []
        for i, side in enumerate(self.sides):
            start = self.boundaries[i - 1].hash_hex() if i > 0 else "root"
            end = (
                self.boundaries[i].hash_hex()
                if i < len(self.boundaries)
                else "horizon"
            )
            out.append((i + 1, side, start, end, self.node_counts[i]))
        return out


def write_ledger_csv(path, ledger: PastingLedger) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "side", "start_rule", "end_rule", "node_count"])
        for row in ledger.rows():
            w.writerow(row)


def pasting_construct(
    lattice: Lattice,
    game: DynkinGame,
    scheme: str = "explicit",
    eps_hit: Optional[float] = None,
):
    """Rebuild the solution from alternating one-obstacle segments.

    Contact frontiers are read off the limit solution: walking forward from
    the root in lower mode, a node within ``eps`` of the upper rail flips
    the segment to upper mode, a later touch of the lower rail flips back,
    and so on.  Each node then takes a single one-obstacle step (its
    segment's side only), with terminal data flowing backward out of the
    continuation already built -- so agreement with the direct solve
    certifies that the solution really is an alternation of one-obstacle
    solutions between its own contact times.
    """
    if lattice.mode != FULL_TREE:
        raise ValueError("pasting tracks path-dependent segments: full tree only")
    if not lattice.same_grid(game.lattice):
        raise ValueError("game lives on a different lattice")
    direct = solve_drbsde(lattice, game, scheme)
    eps = default_eps_hit(direct) if eps_hit is None else float(eps_hit)

    margin = game.separation_margin()
    if margin <= 2.0 * eps:
        raise SeparationError(
            f"separation margin {margin:.3g} is inside the contact tolerance "
            f"band 2*eps = {2 * eps:.3g}; contacts would be ambiguous"
        )

    # forward sweep: segment side and index per node
    side = [np.zeros(lattice.n_nodes(k), dtype=np.int8) for k in range(lattice.N + 1)]
    seg = [np.zeros(lattice.n_nodes(k), dtype=np.int64) for k in range(lattice.N + 1)]
    LOWER, UPPER = 0, 1
    for k in range(lattice.N + 1):
        if k == 0:
            cur_side = np.zeros(1, dtype=np.int8)
            cur_seg = np.ones(1, dtype=np.int64)
        else:
            cur_side = np.empty(lattice.n_nodes(k), dtype=np.int8)
            cur_side[0::2] = side[k - 1]
            cur_side[1::2] = side[k - 1]
            cur_seg = np.empty(lattice.n_nodes(k), dtype=np.int64)
            cur_seg[0::2] = seg[k - 1]
            cur_seg[1::2] = seg[k - 1]
        if k < lattice.N:
            hit_up = direct.Y[k] >= game.U[k] - eps
            hit_low = direct.Y[k] <= game.L[k] + eps
            flip_to_upper = (cur_side == LOWER) & hit_up
            flip_to_lower = (cur_side == UPPER) & hit_low
            cur_side[flip_to_upper] = UPPER
            cur_side[flip_to_lower] = LOWER
            cur_seg[flip_to_upper | flip_to_lower] += 1
        side[k] = cur_side
        seg[k] = cur_seg

    depth_by_terminal = seg[lattice.N]
    max_depth = int(depth_by_terminal.max())
    # a flip at the root leaves segment 1 empty; every other flip starts a
    # nonempty segment, at most one flip per node, never two at one node
    segments_by_terminal = depth_by_terminal - int(seg[0][0]) + 1
    if int(segments_by_terminal.max()) > lattice.N + 1:
        raise RuntimeError(
            f"pasting did not terminate: {int(segments_by_terminal.max())} "
            f"nonempty segments on a path of {lattice.N} steps"
        )

    # backward sweep: one-obstacle step per node, side chosen by its segment
    stats: dict = {}
    yvals = [np.asarray(game.xi.values, dtype=float)]
    zvals = [np.zeros(lattice.n_nodes(lattice.N))]
    dk = [np.zeros(lattice.n_nodes(lattice.N))]
    dj = [np.zeros(lattice.n_nodes(lattice.N))]
    for k in range(lattice.N - 1, -1, -1):
        cand, z = step_candidate(lattice, game.g, k, yvals[-1], scheme, stats=stats)
        lower_mode = side[k] == LOWER
        y = np.where(
            lower_mode,
            np.maximum(game.L[k], cand),
            np.minimum(game.U[k], cand),
        )
        yvals.append(y)
        zvals.append(z)
        dk.append(np.where(lower_mode, np.maximum(game.L[k] - cand, 0.0), 0.0))
        dj.append(np.where(lower_mode, 0.0, np.maximum(cand - game.U[k], 0.0)))
    yvals.reverse(); zvals.reverse(); dk.reverse(); dj.reverse()

    meta = _base_meta(lattice, game.g, scheme)
    meta.update(stats)
    meta["route"] = "pasting"
    meta["eps_hit"] = eps
    pasted = Solution(
        kind="doubly-reflected",
        Y=AdaptedProcess(lattice, tuple(yvals)),
        Z=AdaptedProcess(lattice, tuple(zvals)),
        dK=AdaptedProcess(lattice, tuple(dk)),
        dJ=AdaptedProcess(lattice, tuple(dj)),
        meta=meta,
        obstacle_lower=game.L,
        obstacle_upper=game.U,
    )

    boundaries = []
    sides = []
    node_counts = []
    for depth in range(1, max_depth + 1):
        in_seg = [seg[k] == depth for k in range(lattice.N + 1)]
        node_counts.append(int(sum(int(m.sum()) for m in in_seg)))
        sides.append("lower" if depth % 2 == 1 else "upper")
        if depth < max_depth:
            flags = [
                (seg[k] == depth + 1)
                & ((seg[k - 1] == depth)[_parents(k)] if k > 0 else True)
                for k in range(lattice.N + 1)
            ]
            # boundary rule: first node of the next segment
            flags = [np.asarray(f, dtype=bool) for f in flags]
            flags[lattice.N] = np.ones(lattice.n_nodes(lattice.N), dtype=bool)
            boundaries.append(StoppingRule(lattice, tuple(flags)))

    ledger = PastingLedger(
        boundaries=tuple(boundaries),
        sides=tuple(sides),
        node_counts=tuple(node_counts),
        max_depth=max_depth,
        depth_by_terminal=depth_by_terminal,
        segments_by_terminal=segments_by_terminal,
    )
    return pasted, ledger


def _parents(k: int) -> slice:
    # child p at step k has parent p >> 1; as an index array for step k-1
    # values this is simply each parent repeated twice
    return np.repeat(np.arange(1 << (k - 1)), 2) if k > 0 else slice(None)


# ----------------------------------------------------------------------
# cross-validation of all routes
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CrossReport:
    gap_direct_pasting: float
    gap_direct_increasing: float
    gap_direct_decreasing: float
    squeeze_violation: float       # increasing above direct / direct above decreasing
    order_violation: float         # increasing above decreasing at shared levels
    flat_off_lower: float
    flat_off_upper: float
    separation_margin: float
    ledger_max_depth: int
    penalty_cap: float

    def max_route_gap(self) -> float:
        return max(self.gap_direct_pasting, self.gap_direct_increasing,
                   self.gap_direct_decreasing)


def cross_validate(
    lattice: Lattice,
    game: DynkinGame,
    scheme: str = "explicit",
    schedule=(1.0, 4.0, 16.0, 64.0, 256.0, 1024.0),
    jobs: int = 1,
) -> CrossReport:
    """Drive every route to the solution and report their disagreements."""

    def run_direct():
        return solve_drbsde(lattice, game, scheme)

    def run_pasting():
        return pasting_construct(lattice, game, scheme)

    def run_inc():
        return double_penalization(lattice, game, schedule, "increasing", scheme)

    def run_dec():
        return double_penalization(lattice, game, schedule, "decreasing", scheme)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, 4)) as pool:
            f_direct = pool.submit(run_direct)
            f_paste = pool.submit(run_pasting)
            f_inc = pool.submit(run_inc)
            f_dec = pool.submit(run_dec)
            direct = f_direct.result()
            pasted, ledger = f_paste.result()
            inc_levels, inc_report = f_inc.result()
            dec_levels, dec_report = f_dec.result()
    else:
        direct = run_direct()
        pasted, ledger = run_pasting()
        inc_levels, inc_report = run_inc()
        dec_levels, dec_report = run_dec()

    def sup_gap(a: Solution, b: Solution) -> float:
        return max(
            float(np.max(np.abs(a.Y[k] - b.Y[k]))) for k in range(lattice.N + 1)
        )

    squeeze = 0.0
    order = 0.0
    for inc, dec in zip(inc_levels, dec_levels):
        for k in range(lattice.N + 1):
            squeeze = max(squeeze, float(np.max(inc.Y[k] - direct.Y[k])))
            squeeze = max(squeeze, float(np.max(direct.Y[k] - dec.Y[k])))
            order = max(order, float(np.max(inc.Y[k] - dec.Y[k])))

    return CrossReport(
        gap_direct_pasting=sup_gap(direct, pasted),
        gap_direct_increasing=inc_report.final_gap,
        gap_direct_decreasing=dec_report.final_gap,
        squeeze_violation=squeeze,
        order_violation=order,
        flat_off_lower=direct.flat_off_lower(),
        flat_off_upper=direct.flat_off_upper(),
        separation_margin=game.separation_margin(),
        ledger_max_depth=ledger.max_depth,
        penalty_cap=schedule[-1],
    )
