"""Max-mean-max threshold and max-marginal filtering."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from spcascade.inference import LogMarginalTable, MaxMarginalTable
from spcascade.lattice import SparseLattice, expand_to, intersect


class PruneAllError(ValueError):
    """Threshold at or above the best score: every assignment would be pruned."""


@dataclass(frozen=True)
class ThresholdParams:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


def _alpha(params) -> float:
    return ThresholdParams(params).alpha if not isinstance(params, ThresholdParams) else params.alpha


def mean_max_threshold(table: MaxMarginalTable, params) -> float:
    """``alpha * max + (1 - alpha) * mean`` over every surviving max-marginal."""
    if len(table) == 0:
        raise ValueError("empty max-marginal table")
    a = _alpha(params)
    return a * table.global_max + (1.0 - a) * table.mean


def is_degenerate(table: MaxMarginalTable) -> bool:
    return bool(np.all(table.values == table.values[0]))


def survivors(table: MaxMarginalTable, tau: float) -> list[np.ndarray]:
    """Per-anchor keep masks: max-marginal strictly above ``tau``."""
    return [v > tau for v in table.per_anchor()]


def filter_lattice(lattice: SparseLattice, table: MaxMarginalTable, tau: float) -> SparseLattice:
    """Drop every assignment whose max-marginal is ``<= tau``.

    If all max-marginals are equal the lattice is returned unchanged, with a warning
    unless the lattice is already a single path.
    """
    if table.lattice is not lattice and table.lattice != lattice:
        raise ValueError("table was computed on a different lattice")
    if tau >= table.global_max:
        if is_degenerate(table):
            if lattice.n_assignments > lattice.n_anchors:
                warnings.warn("all max-marginals are equal; keeping every assignment", RuntimeWarning,
                              stacklevel=2)
            return lattice
        raise PruneAllError(f"threshold {tau!r} >= best score {table.global_max!r} would prune everything")
    return lattice.restrict(survivors(table, tau))


def crf_filter(lattice: SparseLattice, posteriors: LogMarginalTable, alpha: float) -> SparseLattice:
    """Keep assignments with posterior ``> alpha``; assignments left on no full path are dropped.

    Raises :class:`~spcascade.lattice.BrokenLatticeError` when a position empties;
    posterior thresholds carry no safe-lattice guarantee.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return lattice.restrict([p > alpha for p in posteriors.per_anchor()])


def project_table(table: MaxMarginalTable, order: int) -> MaxMarginalTable:
    """Max-marginals of the order-``order`` sub-cliques implied by ``table``.

    A sub-clique's max-marginal is the largest max-marginal of any assignment containing
    it; its witness is that assignment's witness (smallest row on ties).
    """
    lat = table.lattice
    d, K = lat.order, lat.K
    if not 1 <= order <= d:
        raise ValueError("projection order must be between 1 and the lattice order")
    if order == d:
        return table
    n_sub = lat.length - order + 1
    parts: list[list] = [[] for _ in range(n_sub)]
    for i, c in enumerate(lat.codes):
        rows = np.arange(lat.offsets[i], lat.offsets[i + 1])
        for shift in range(d - order + 1):
            parts[i + shift].append(((c // K ** (d - order - shift)) % K ** order, rows))
    codes, values, wit = [], [], []
    for group in parts:
        sub = np.concatenate([g[0] for g in group])
        rows = np.concatenate([g[1] for g in group])
        order_ = np.lexsort((rows, -table.values[rows], sub))
        s = sub[order_]
        first = np.r_[True, s[1:] != s[:-1]]
        best = rows[order_][first]
        codes.append(s[first])
        values.append(table.values[best])
        wit.append(table.witnesses[best])
    sub_lattice = SparseLattice(lat.length, order, K, codes)
    return MaxMarginalTable(sub_lattice, np.concatenate(values), np.concatenate(wit))


def filter_subcliques(lattice: SparseLattice, table: MaxMarginalTable, alpha: float) -> SparseLattice:
    """Threshold the order-(d-1) sub-clique max-marginals instead of the d-cliques.

    A d-gram survives iff it survived before and both of its (d-1)-grams clear the
    threshold computed on the sub-clique table.
    """
    if lattice.order < 2:
        return filter_lattice(lattice, table, mean_max_threshold(table, alpha))
    sub = project_table(table, lattice.order - 1)
    kept = filter_lattice(sub.lattice, sub, mean_max_threshold(sub, alpha))
    return intersect(expand_to(kept, lattice.order), lattice)

