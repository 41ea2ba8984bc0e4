"""Subgradient cascade training, baselines, threshold tuning and the staged cascade.

Weights inside the trainers are stored as ``scale * v`` so the L2 shrinkage of every
step costs O(1); sparse feature updates are divided by the current scale. A running
correction vector gives the uniform average of post-update iterates without touching
the whole weight vector each step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from spcascade.inference import _sum_product, anchor_scores, map_from_scores, score_labels, table_from_scores
from spcascade.lattice import SparseLattice, StateHierarchy, expand_to, full_lattice, refine
from spcascade.model import NGRAM, Example, LinearModel, as_features, ngram_index_table
from spcascade.threshold import filter_lattice, mean_max_threshold


class DivergenceError(FloatingPointError):
    """Weights became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """``eta`` is a constant step size or ``"pegasos"`` for ``1/(lam * t)``."""

    lam: float = 1e-4
    eta: float | str = "pegasos"
    epochs: int = 5
    seed: int = 0
    averaging: bool = True
    margin_mode: str = "length"
    margin: float = 1.0
    dimension: int = 1 << 18

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.margin_mode not in ("length", "constant"):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.eta == "pegasos":
            if self.lam <= 0:
                raise ValueError("the pegasos schedule needs lam > 0")
        elif isinstance(self.eta, str) or not float(self.eta) > 0:
            raise ValueError(f"eta must be 'pegasos' or a positive number, got {self.eta!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    def step_size(self, t: int) -> float:
        if self.eta == "pegasos":
            return 1.0 / (self.lam * t)
        return float(self.eta)

    def margin_for(self, example: Example) -> float:
        return float(len(example)) if self.margin_mode == "length" else self.margin


PERCEPTRON = TrainConfig(lam=0.0, eta=1.0, epochs=5, averaging=True)


# -- sparse feature accumulation -------------------------------------------

def lattice_features(model: LinearModel, feats, lattice: SparseLattice, row_weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of the features of lattice rows, as (index, value) pairs.

    ``row_weights[i][r]`` multiplies the features that row r of anchor i contributes
    to an output score (positions ``0..d-1`` for anchor 0, the last position otherwise).
    Indices may repeat.
    """
    d, K = lattice.order, lattice.K
    tables = [(k, ngram_index_table(model.template(NGRAM, k), K, model.dimension))
              for k in model.ngram_orders if k <= d]
    idx, val = [], []

    def part(codes, w, j, t):
        shifted = codes // K ** (d - 1 - t)
        if model.has_unary and feats.index.shape[2]:
            st = shifted % K
            idx.append(feats.index[j, st].ravel())
            val.append((feats.value[j, st] * w[:, None]).ravel())
        for k, tab in tables:
            if k <= t + 1:
                idx.append(tab[shifted % K ** k])
                val.append(w)

    for i, codes in enumerate(lattice.codes):
        w = np.asarray(row_weights[i], dtype=np.float64)
        nz = w != 0
        if not nz.any():
            continue
        codes, w = codes[nz], w[nz]
        if i == 0:
            for t in range(d):
                part(codes, w, t, t)
        else:
            part(codes, w, i + d - 1, d - 1)
    if not idx:
        return np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(idx), np.concatenate(val)


def path_lattice(labels, order: int, K: int) -> SparseLattice:
    labels = np.asarray(labels, dtype=np.int64)
    d = min(order, len(labels))
    n = len(labels) - d + 1
    codes = np.zeros(n, dtype=np.int64)
    for t in range(d):
        codes = codes * K + labels[t:t + n]
    return SparseLattice(len(labels), d, K, codes[:, None])


def output_features(model: LinearModel, x, labels) -> tuple[np.ndarray, np.ndarray]:
    """Sparse features ``f(x, y)`` of a full output."""
    path = path_lattice(labels, model.order, model.K)
    return lattice_features(model, as_features(model, x), path, [np.ones(1)] * path.n_anchors)


def dense_features(model: LinearModel, x, labels) -> np.ndarray:
    idx, val = output_features(model, x, labels)
    out = np.zeros(model.dimension)
    np.add.at(out, idx, val)
    return out


def _scaled_scores(model, feats, lattice, scale):
    scores = anchor_scores(model, feats, lattice)
    return scores if scale == 1.0 else [a * scale for a in scores]


def _truth_score(model, feats, labels, scale):
    return scale * score_labels(model, feats, labels)


def sc_direction(model: LinearModel, example: Example, lattice: SparseLattice, alpha: float, margin: float,
                 scale: float = 1.0):
    """Hinge value and the sparse negative hinge subgradient at ``scale * model.weights``.

    The direction is ``f(y) - alpha f(y*) - (1 - alpha) mean_r f(witness_r)``; it is
    empty when the hinge is zero.
    """
    feats = as_features(model, example)
    table = table_from_scores(_scaled_scores(model, feats, lattice, scale), lattice)
    tau = mean_max_threshold(table, alpha)
    h = margin + tau - _truth_score(model, feats, example.labels, scale)
    if not h > 0:
        return 0.0, np.zeros(0, np.int64), np.zeros(0)
    W = table.rows
    best = int(np.argmax(table.values))
    coef = -(1.0 - alpha) / len(table)
    weights = []
    for i in range(lattice.n_anchors):
        w = np.bincount(W[:, i], minlength=lattice.sizes[i]) * coef
        w[W[best, i]] -= alpha
        weights.append(w)
    mi, mv = lattice_features(model, feats, lattice, weights)
    ti, tv = output_features(model, feats, example.labels)
    return float(h), np.concatenate([ti, mi]), np.concatenate([tv, mv])


def regularized_objective(model: LinearModel, example: Example, lattice: SparseLattice, alpha: float,
                          lam: float, margin: float) -> float:
    """``lam/2 |w|^2 + hinge`` for one example."""
    feats = as_features(model, example)
    table = table_from_scores(anchor_scores(model, feats, lattice), lattice)
    h = max(0.0, margin + mean_max_threshold(table, alpha) - score_labels(model, feats, example.labels))
    return 0.5 * lam * float(model.weights @ model.weights) + h


def _check_finite(w: np.ndarray, t: int):
    if not np.all(np.isfinite(w)):
        bad = int(np.count_nonzero(~np.isfinite(w)))
        raise DivergenceError(f"{bad} non-finite weights after step {t}; lower eta or raise lam")


def sc_step(model: LinearModel, example: Example, lattice: SparseLattice, alpha: float, config: TrainConfig,
            t: int) -> LinearModel:
    """One stochastic subgradient step on ``lam/2 |w|^2 + hinge``; returns a new model."""
    eta = config.step_size(t)
    h, idx, val = sc_direction(model, example, lattice, alpha, config.margin_for(example))
    w = (1.0 - eta * config.lam) * model.weights
    if h > 0:
        np.add.at(w, idx, eta * val)
    _check_finite(w, t)
    return model.copy(w)


class _Iterate:
    """Weights ``scale * v`` with a lazily maintained sum of post-update iterates."""

    def __init__(self, w: np.ndarray, averaging: bool):
        self.v = np.array(w, dtype=np.float64)
        self.scale = 1.0
        self.averaging = averaging
        self.S = 0.0
        self.B = np.zeros_like(self.v) if averaging else None
        self.T = 0

    def step(self, shrink: float, idx=None, val=None):
        s = self.scale * shrink
        if s < 1e-4:
            # fold the scale into v; the running sum restarts from the current total
            if self.averaging:
                self.B = self.B - self.S * self.v
                self.S = 0.0
            self.v *= s
            s = 1.0
        self.scale = s
        if idx is not None and len(idx):
            delta = val / s
            np.add.at(self.v, idx, delta)
            if self.averaging and self.S:
                np.add.at(self.B, idx, delta * self.S)
        if self.averaging:
            self.S += s
        self.T += 1

    def weights(self) -> np.ndarray:
        return self.scale * self.v

    def average(self) -> np.ndarray:
        if not self.averaging or self.T == 0:
            return self.weights()
        return (self.S * self.v - self.B) / self.T


def _check_data(data):
    for ex, lat in data:
        if ex.labels is None:
            raise ValueError("training examples need labels")
        if lat.length != len(ex):
            raise ValueError("lattice length differs from its example")


def _epochs(n: int, config: TrainConfig):
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        yield from rng.permutation(n).tolist()


def train_level(data: Sequence[tuple[Example, SparseLattice]], alpha: float, config: TrainConfig,
                K: int, order: int, init: LinearModel | None = None) -> LinearModel:
    """Shuffled passes of :func:`sc_step` over ``(example, lattice)`` pairs.

    Examples whose truth is not in their lattice are skipped.
    """
    _check_data(data)
    model = LinearModel.zeros(K, order, config.dimension) if init is None else init.copy()
    data = [(ex, lat) for ex, lat in data if lat.contains_output(ex.labels)]
    it = _Iterate(model.weights, config.averaging)
    view = model.copy(it.v)
    t = 0
    for k in _epochs(len(data), config):
        t += 1
        ex, lat = data[k]
        eta = config.step_size(t)
        h, idx, val = sc_direction(view, ex, lat, alpha, config.margin_for(ex), it.scale)
        if h > 0:
            it.step(1.0 - eta * config.lam, idx, eta * val)
        else:
            it.step(1.0 - eta * config.lam)
        view.weights = it.v
    w = it.average()
    _check_finite(w, t)
    return model.copy(w)


def perceptron_train(data: Sequence[tuple[Example, SparseLattice]], config: TrainConfig, K: int, order: int,
                     init: LinearModel | None = None) -> LinearModel:
    """Structured perceptron over sparse lattices: ``w += eta (f(y) - f(y_hat))`` on mistakes."""
    _check_data(data)
    model = LinearModel.zeros(K, order, config.dimension) if init is None else init.copy()
    data = [(ex, lat) for ex, lat in data if lat.contains_output(ex.labels)]
    it = _Iterate(model.weights, config.averaging)
    view = model.copy(it.v)
    t = 0
    for k in _epochs(len(data), config):
        t += 1
        ex, lat = data[k]
        eta = config.step_size(t)
        feats = as_features(view, ex)
        pred, _ = map_from_scores(_scaled_scores(view, feats, lat, it.scale), lat)
        if np.array_equal(pred, ex.labels):
            it.step(1.0 - eta * config.lam)
        else:
            ti, tv = output_features(view, feats, ex.labels)
            pi, pv = output_features(view, feats, pred)
            it.step(1.0 - eta * config.lam, np.concatenate([ti, pi]), eta * np.concatenate([tv, -pv]))
        view.weights = it.v
    w = it.average()
    _check_finite(w, t)
    return model.copy(w)


def crf_direction(model: LinearModel, example: Example, lattice: SparseLattice, scale: float = 1.0):
    """Negative log-likelihood and its sparse negative gradient ``f(y) - E[f]``."""
    feats = as_features(model, example)
    post = _sum_product(_scaled_scores(model, feats, lattice, scale), lattice)
    idx, val = lattice_features(model, feats, lattice, [-p for p in post.per_anchor()])
    ti, tv = output_features(model, feats, example.labels)
    nll = post.log_partition - _truth_score(model, feats, example.labels, scale)
    return nll, np.concatenate([ti, idx]), np.concatenate([tv, val])


def crf_train(data: Sequence[tuple[Example, SparseLattice]], config: TrainConfig, K: int, order: int) -> LinearModel:
    """L2-regularized log-likelihood by SGD (the marginal-pruning baseline)."""
    _check_data(data)
    model = LinearModel.zeros(K, order, config.dimension)
    data = [(ex, lat) for ex, lat in data if lat.contains_output(ex.labels)]
    it = _Iterate(model.weights, config.averaging)
    view = model.copy(it.v)
    t = 0
    for k in _epochs(len(data), config):
        t += 1
        ex, lat = data[k]
        eta = config.step_size(t)
        _, idx, val = crf_direction(view, ex, lat, it.scale)
        it.step(1.0 - eta * config.lam, idx, eta * val)
        view.weights = it.v
    w = it.average()
    _check_finite(w, t)
    return model.copy(w)


# -- threshold tuning --------------------------------------------------------

@dataclass(frozen=True)
class AlphaChoice:
    alpha: float
    filter_loss: float
    efficiency_loss: float
    feasible: bool


@dataclass
class _DevStats:
    top: np.ndarray     # global max per example
    mean: np.ndarray    # mean max-marginal per example
    truth: np.ndarray   # truth score, -inf when the truth left the lattice
    values: list


def _dev_stats(model: LinearModel, dev) -> _DevStats:
    top, mean, truth, values = [], [], [], []
    for ex, lat in dev:
        table = table_from_scores(anchor_scores(model, ex, lat), lat)
        top.append(table.global_max)
        mean.append(table.mean)
        truth.append(score_labels(model, ex, ex.labels) if lat.contains_output(ex.labels) else -np.inf)
        values.append(table.values)
    return _DevStats(np.array(top), np.array(mean), np.array(truth), values)


def critical_alphas(stats: _DevStats) -> np.ndarray:
    """Per example, the alpha at which ``score(truth) <= tau(alpha)`` starts to hold."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(stats.top > stats.mean, (stats.truth - stats.mean) / (stats.top - stats.mean), -np.inf)


def _losses_at(stats: _DevStats, alpha: float) -> tuple[float, float]:
    tau = alpha * stats.top + (1.0 - alpha) * stats.mean
    lf = float(np.mean(stats.truth <= tau))
    le = float(np.mean([np.count_nonzero(v > t) / len(v) for v, t in zip(stats.values, tau)]))
    return lf, le


def tune_alpha(model: LinearModel, dev: Sequence[tuple[Example, SparseLattice]], candidates, epsilon: float,
               gap: float = 1e-7) -> AlphaChoice:
    """Most aggressive alpha whose mean dev filtering loss is at most ``epsilon``.

    Searched alphas are the candidate grid plus, for each dev example, the point just
    below its critical alpha, all capped at the largest candidate. Filtering loss is
    nondecreasing and efficiency loss nonincreasing in alpha, so the largest feasible
    alpha minimizes efficiency loss. Falls back to alpha = 0.
    """
    if len(dev) == 0:
        raise ValueError("dev set is empty")
    candidates = np.asarray(sorted(set(float(a) for a in candidates)))
    if len(candidates) == 0 or candidates[0] < 0 or candidates[-1] >= 1:
        raise ValueError("candidates must be a nonempty subset of [0, 1)")
    stats = _dev_stats(model, dev)
    crit = critical_alphas(stats) - gap
    crit = crit[(crit >= 0) & (crit <= candidates[-1])]
    grid = np.unique(np.concatenate([candidates, crit]))[::-1]
    tau = grid[:, None] * stats.top[None, :] + (1.0 - grid[:, None]) * stats.mean[None, :]
    lf = np.mean(stats.truth[None, :] <= tau, axis=1)
    ok = np.flatnonzero(lf <= epsilon)
    if len(ok) == 0:
        lf0, le0 = _losses_at(stats, 0.0)
        return AlphaChoice(0.0, lf0, le0, False)
    alpha = float(grid[ok[0]])
    lf_a, le_a = _losses_at(stats, alpha)
    return AlphaChoice(alpha, lf_a, le_a, True)


# -- cascades ---------------------------------------------------------------

@dataclass(frozen=True)
class LevelConfig:
    """One cascade stage. ``refine`` maps the previous stage's states to this one's."""

    order: int
    alpha_candidates: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    epsilon: float = 0.01
    train: TrainConfig = TrainConfig()
    refine: StateHierarchy | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be positive")
        if not self.alpha_candidates:
            raise ValueError("alpha_candidates must be nonempty")
        if any(not 0 <= a < 1 for a in self.alpha_candidates):
            raise ValueError("alpha candidates must lie in [0, 1)")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class CascadeConfig:
    """Filtering levels, coarse to fine, then an optional final predictor."""

    levels: tuple
    final: LevelConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a cascade needs at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def stages(self) -> list[LevelConfig]:
        return list(self.levels) + ([self.final] if self.final is not None else [])


@dataclass
class MetricsRow:
    level: int
    alpha: float | None
    filter_loss: float | None
    efficiency_loss: float | None
    density: float
    token_accuracy: float
    sequence_accuracy: float
    wall_ms: float = 0.0

    FIELDS = ("level", "alpha", "filter_loss", "efficiency_loss", "density", "token_accuracy",
              "sequence_accuracy", "wall_ms")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass
class CascadeLevel:
    model: LinearModel
    alpha: float | None
    order: int
    label_map: np.ndarray
    refine: StateHierarchy | None = None
    metrics: MetricsRow | None = None

    @property
    def K(self) -> int:
        return self.model.K


@dataclass
class TrainedCascade:
    levels: list
    final: CascadeLevel | None
    K: int
    dropped: list = field(default_factory=list)

    @property
    def stages(self) -> list[CascadeLevel]:
        return list(self.levels) + ([self.final] if self.final is not None else [])


def stage_alphabets(stages, K: int) -> list[tuple[int, np.ndarray]]:
    """``(K_i, label_map_i)`` per stage, mapping finest labels to each stage's states.

    ``stages[i].refine`` (or None) maps stage i-1's states to stage i's.
    """
    if stages[0].refine is not None:
        raise ValueError("the first stage cannot refine")
    out = [None] * len(stages)
    Ki, mapping = K, np.arange(K)
    for i in range(len(stages) - 1, -1, -1):
        out[i] = (Ki, mapping)
        h = stages[i].refine
        if h is not None:
            if h.fine_size != Ki:
                raise ValueError(f"stage {i} refines {h.fine_size} states but has K={Ki}")
            Ki, mapping = h.coarse_size, h.parent[mapping]
    return out


def _relabel(ex: Example, mapping: np.ndarray) -> Example:
    out = Example(ex.tokens, None if ex.labels is None else mapping[ex.labels])
    out._cache = ex._cache
    return out


def _advance(lat: SparseLattice, stage) -> SparseLattice:
    if stage.refine is not None:
        lat = refine(lat, stage.refine)
    return expand_to(lat, stage.order)


def _level_seed(seed: int, level: int, candidate: int) -> int:
    return int(np.random.SeedSequence([seed, level, candidate]).generate_state(1)[0])


def train_cascade(train: Sequence[Example], dev: Sequence[Example], config: CascadeConfig, K: int) -> TrainedCascade:
    """Train each level on the lattices left by the previous ones, then the final predictor.

    Training examples whose truth was pruned by an earlier level are dropped; the
    per-stage counts are kept in ``dropped``. Dev metrics use the same pipeline.
    """
    alphabets = stage_alphabets(config.stages, K)
    train_lat = [full_lattice(len(ex), alphabets[0][0], min(config.levels[0].order, len(ex))) for ex in train]
    dev_lat = [full_lattice(len(ex), alphabets[0][0], min(config.levels[0].order, len(ex))) for ex in dev]
    train_ex, dev_ex = list(train), list(dev)
    levels, dropped = [], []
    for i, stage in enumerate(config.stages):
        Ki, mapping = alphabets[i]
        if i > 0:
            train_lat = [_advance(lat, stage) for lat in train_lat]
            dev_lat = [_advance(lat, stage) for lat in dev_lat]
        tr = [(_relabel(ex, mapping), lat) for ex, lat in zip(train_ex, train_lat)]
        keep = [j for j, (ex, lat) in enumerate(tr) if lat.contains_output(ex.labels)]
        dropped.append(len(tr) - len(keep))
        train_ex = [train_ex[j] for j in keep]
        train_lat = [train_lat[j] for j in keep]
        tr = [tr[j] for j in keep]
        dv = [(_relabel(ex, mapping), lat) for ex, lat in zip(dev_ex, dev_lat)]
        dv_keep = [p for p in dv if p[1].contains_output(p[0].labels)]
        if stage is config.final:
            tc = replace(stage.train, seed=_level_seed(config.seed, i, 0))
            model = perceptron_train(tr, tc, Ki, stage.order)
            levels.append(CascadeLevel(model, None, stage.order, mapping, stage.refine))
            continue
        best = None
        for c, a in enumerate(stage.alpha_candidates):
            tc = replace(stage.train, seed=_level_seed(config.seed, i, c))
            model = train_level(tr, a, tc, Ki, stage.order)
            choice = (tune_alpha(model, dv_keep, stage.alpha_candidates, stage.epsilon) if dv_keep
                      else AlphaChoice(0.0, 0.0, 1.0, False))
            key = (not choice.feasible, choice.efficiency_loss if choice.feasible else choice.filter_loss)
            if best is None or key < best[0]:
                best = (key, model, choice)
        _, model, choice = best
        levels.append(CascadeLevel(model, choice.alpha, stage.order, mapping, stage.refine))
        train_lat = [_filter(model, ex, lat, choice.alpha)[1] for (ex, lat) in tr]
        dev_lat = [_filter(model, _relabel(ex, mapping), lat, choice.alpha)[1] for ex, lat in zip(dev_ex, dev_lat)]
    final = levels.pop() if config.final is not None else None
    cascade = TrainedCascade(levels, final, K, dropped)
    if dev:
        for stage, row in zip(cascade.stages, evaluate_cascade(cascade, dev)):
            stage.metrics = row
    return cascade


def _filter(model, ex, lat, alpha):
    table = table_from_scores(anchor_scores(model, ex, lat), lat)
    tau = mean_max_threshold(table, alpha)
    return table, filter_lattice(lat, table, tau), tau


@dataclass
class CascadeTrace:
    """Lattice entering each stage, the filtered lattice of each level, and the prediction."""

    inputs: list
    filtered: list
    prediction: np.ndarray


def run_cascade(cascade: TrainedCascade, example: Example) -> CascadeTrace:
    stages = cascade.stages
    lat = full_lattice(len(example), stages[0].K, min(stages[0].order, len(example)))
    inputs, filtered = [], []
    for i, st in enumerate(stages):
        if i > 0:
            lat = _advance(lat, st)
        inputs.append(lat)
        if st.alpha is not None:
            lat = _filter(st.model, example, lat, st.alpha)[1]
            filtered.append(lat)
    last = stages[-1]
    pred, _ = map_from_scores(anchor_scores(last.model, example, lat), lat)
    return CascadeTrace(inputs, filtered, pred)


def predict(cascade: TrainedCascade, example: Example) -> np.ndarray:
    return run_cascade(cascade, example).prediction


def evaluate_cascade(cascade: TrainedCascade, data: Sequence[Example], timing: bool = False) -> list[MetricsRow]:
    """One row per stage.

    ``filter_loss`` counts ``score(truth) <= tau`` over examples whose truth reached the
    stage; ``efficiency_loss`` averages the surviving fraction; ``density`` is surviving
    over full-space assignments (after filtering for filter levels, entering lattice for
    the final predictor); accuracies come from MAP decoding each stage's model on the
    lattice entering that stage.
    """
    stages = cascade.stages
    n = len(data)
    lats = [full_lattice(len(ex), stages[0].K, min(stages[0].order, len(ex))) for ex in data]
    rows = []
    for i, st in enumerate(stages):
        start = time.perf_counter()
        if i > 0:
            lats = [_advance(lat, st) for lat in lats]
        lf, le, kept, full, correct, tokens, seq, reached = [], [], 0, 0, 0, 0, 0, 0
        out = []
        for ex, lat in zip(data, lats):
            ex = _relabel(ex, st.label_map)
            scores = anchor_scores(st.model, ex, lat)
            pred, _ = map_from_scores(scores, lat)
            correct += int(np.sum(pred == ex.labels))
            tokens += len(ex)
            seq += int(np.array_equal(pred, ex.labels))
            if st.alpha is None:
                kept += lat.n_assignments
                full += lat.full_count
                out.append(lat)
                continue
            table = table_from_scores(scores, lat)
            tau = mean_max_threshold(table, st.alpha)
            if lat.contains_output(ex.labels):
                reached += 1
                lf.append(score_labels(st.model, ex, ex.labels) <= tau)
            le.append(np.count_nonzero(table.values > tau) / len(table))
            new = filter_lattice(lat, table, tau)
            kept += new.n_assignments
            full += new.full_count
            out.append(new)
        lats = out
        wall = (time.perf_counter() - start) * 1e3 if timing else 0.0
        rows.append(MetricsRow(
            level=i + 1,
            alpha=st.alpha,
            filter_loss=None if st.alpha is None else (float(np.mean(lf)) if lf else 0.0),
            efficiency_loss=None if st.alpha is None else (float(np.mean(le)) if le else 0.0),
            density=kept / full if full else 0.0,
            token_accuracy=correct / tokens if tokens else 0.0,
            sequence_accuracy=seq / n if n else 0.0,
            wall_ms=wall))
    return rows
