"""Filtering, efficiency, hinge and ramp losses for one example."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spcascade.inference import MaxMarginalTable, max_marginals, score_labels
from spcascade.threshold import mean_max_threshold


@dataclass(frozen=True)
class LossReport:
    filter_loss: int
    efficiency_loss: float
    hinge: float
    ramp_filter: float
    ramp_efficiency: float


def ramp(z, gamma: float):
    """1 below 0, linear down to 0 at ``gamma``, 0 beyond."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    z = np.asarray(z, dtype=np.float64)
    return np.clip(1.0 - z / gamma, 0.0, 1.0)


def filtering_loss(model, x, truth, lattice, params, table: MaxMarginalTable | None = None) -> int:
    """``1[score(truth) <= tau]``; 1 when the truth already left the lattice."""
    if not lattice.contains_output(truth):
        return 1
    table = max_marginals(model, x, lattice) if table is None else table
    return int(score_labels(model, x, truth) <= mean_max_threshold(table, params))


def efficiency_loss(table: MaxMarginalTable, tau: float) -> float:
    """Fraction of assignments whose max-marginal is strictly above ``tau``."""
    if len(table) == 0:
        raise ValueError("empty max-marginal table")
    return float(np.count_nonzero(table.values > tau)) / len(table)


def default_margin(truth) -> float:
    return float(len(truth))


def hinge(model, x, truth, lattice, params, margin: float | None = None,
          table: MaxMarginalTable | None = None) -> float:
    """``max(0, margin + tau - score(truth))``; the margin defaults to the output length."""
    margin = default_margin(truth) if margin is None else float(margin)
    if margin <= 0:
        raise ValueError("margin must be positive")
    table = max_marginals(model, x, lattice) if table is None else table
    return max(0.0, margin + mean_max_threshold(table, params) - score_labels(model, x, truth))


def ramp_losses(model, x, truth, table: MaxMarginalTable, params, gamma: float = 1.0) -> tuple[float, float]:
    """Margin-augmented filtering and efficiency losses."""
    tau = mean_max_threshold(table, params)
    rf = float(ramp(score_labels(model, x, truth) - tau, gamma))
    re = float(np.mean(ramp(tau - table.values, gamma)))
    return rf, re


def loss_report(model, x, truth, lattice, params, margin=None, gamma: float = 1.0) -> LossReport:
    table = max_marginals(model, x, lattice)
    tau = mean_max_threshold(table, params)
    rf, re = ramp_losses(model, x, truth, table, params, gamma)
    return LossReport(filtering_loss(model, x, truth, lattice, params, table), efficiency_loss(table, tau),
                      hinge(model, x, truth, lattice, params, margin, table), rf, re)
