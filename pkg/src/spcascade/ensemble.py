"""Ensemble cascades on 4-neighbor grids.

A grid is split into comb trees (all chains in one direction plus one perpendicular
spine). Each potential is divided by the number of combs containing it, so the comb
scores of an output add up to its grid score. Max-marginals are computed exactly in
every comb and summed; the sum upper-bounds the grid's max-marginal.

Node states live in a boolean mask of shape ``(rows, cols, K)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from spcascade.inference import BRUTE_FORCE_LIMIT
from spcascade.lattice import StateHierarchy
from spcascade.model import (GRID_PAIRWISE, GRID_UNARY, FeatureTemplate, _fold_array, fold_index,
                             pairwise_raw_hash, unary_raw_hash)
from spcascade.training import MetricsRow, TrainConfig, stage_alphabets

HORIZONTAL, VERTICAL = 0, 1


class CascadeBreakdown(RuntimeError):
    """Joint filtering removed every state of a node."""

    def __init__(self, node):
        super().__init__(f"cascade breakdown: node {tuple(int(v) for v in node)} lost every state")
        self.node = tuple(int(v) for v in node)


@dataclass
class GridModel:
    """Log-potentials: ``unary[i, j, s]``, ``horizontal[i, j, l, r]`` on edge (i,j)-(i,j+1),
    ``vertical[i, j, t, b]`` on edge (i,j)-(i+1,j)."""

    unary: np.ndarray
    horizontal: np.ndarray
    vertical: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        n, m, K = self.unary.shape
        self.horizontal = np.asarray(self.horizontal, dtype=np.float64).reshape(n, max(m - 1, 0), K, K)
        self.vertical = np.asarray(self.vertical, dtype=np.float64).reshape(max(n - 1, 0), m, K, K)

    @property
    def rows(self) -> int:
        return self.unary.shape[0]

    @property
    def cols(self) -> int:
        return self.unary.shape[1]

    @property
    def K(self) -> int:
        return self.unary.shape[2]

    @classmethod
    def zeros(cls, n: int, m: int, K: int) -> "GridModel":
        return cls(np.zeros((n, m, K)), np.zeros((n, m - 1, K, K)), np.zeros((n - 1, m, K, K)))

    def score(self, Y) -> np.ndarray:
        """Scores of outputs ``Y`` (shape ``(..., rows, cols)``).

        Summation order: nodes row-major, then horizontal edges, then vertical edges.
        """
        Y = np.asarray(Y, dtype=np.int64)
        n, m = self.rows, self.cols
        total = np.zeros(Y.shape[:-2])
        for i in range(n):
            for j in range(m):
                total = total + self.unary[i, j, Y[..., i, j]]
        for i in range(n):
            for j in range(m - 1):
                total = total + self.horizontal[i, j, Y[..., i, j], Y[..., i, j + 1]]
        for i in range(n - 1):
            for j in range(m):
                total = total + self.vertical[i, j, Y[..., i, j], Y[..., i + 1, j]]
        return total


@dataclass
class SubModel:
    """A spanning tree of the grid with per-potential coverage divisors."""

    name: str
    hmask: np.ndarray
    vmask: np.ndarray
    node_cov: int
    hcov: np.ndarray
    vcov: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.hmask.shape[0], self.vmask.shape[1]

    def restrict(self, grid: GridModel) -> GridModel:
        """This tree's share of the grid's potentials (zero off the tree)."""
        h = np.where(self.hmask[..., None, None], grid.horizontal / np.maximum(self.hcov, 1)[..., None, None], 0.0)
        v = np.where(self.vmask[..., None, None], grid.vertical / np.maximum(self.vcov, 1)[..., None, None], 0.0)
        return GridModel(grid.unary / self.node_cov, h, v)

    def edges(self) -> list[tuple[int, int, int, int]]:
        """Tree edges as ``(direction, i, j, node_a)``; the edge joins node_a and its right/lower neighbor."""
        n, m = self.shape
        out = [(HORIZONTAL, i, j, i * m + j) for i, j in zip(*np.nonzero(self.hmask))]
        out += [(VERTICAL, i, j, i * m + j) for i, j in zip(*np.nonzero(self.vmask))]
        return out

    @cached_property
    def tree(self) -> "_Tree":
        return _Tree.build(self)


def comb_decompose(n: int, m: int) -> list[SubModel]:
    """One comb per column spine (all rows + that column) and per row spine.

    Gives ``n + m`` combs; a single row or column is one chain.
    """
    if n < 1 or m < 1:
        raise ValueError("grid dimensions must be positive")
    H, V = np.ones((n, m - 1), bool), np.ones((n - 1, m), bool)
    if n == 1 or m == 1:
        masks = [("chain", H, V)]
    else:
        masks = []
        for j in range(m):
            v = np.zeros((n - 1, m), bool)
            v[:, j] = True
            masks.append((f"col{j}", H.copy(), v))
        for i in range(n):
            h = np.zeros((n, m - 1), bool)
            h[i, :] = True
            masks.append((f"row{i}", h, V.copy()))
    hcov = sum(h.astype(np.int64) for _, h, _ in masks)
    vcov = sum(v.astype(np.int64) for _, _, v in masks)
    if np.any(hcov == 0) or np.any(vcov == 0):
        raise AssertionError("combs must cover every edge")
    return [SubModel(name, h, v, len(masks), hcov, vcov) for name, h, v in masks]


# -- tree max-product -------------------------------------------------------

@dataclass
class _Tree:
    order: np.ndarray       # BFS order from node 0
    parent: np.ndarray      # -1 at the root
    edge: list              # edge[u] = (direction, i, j, u_is_first) joining u to its parent
    children: list

    @classmethod
    def build(cls, sub: SubModel) -> "_Tree":
        n, m = sub.shape
        N = n * m
        adj = [[] for _ in range(N)]
        for d, i, j, a in sub.edges():
            b = a + 1 if d == HORIZONTAL else a + m
            adj[a].append((b, (d, i, j, True)))
            adj[b].append((a, (d, i, j, False)))
        parent = np.full(N, -1)
        edge = [None] * N
        seen = np.zeros(N, bool)
        seen[0] = True
        order = [0]
        k = 0
        while k < len(order):
            u = order[k]
            k += 1
            for v, e in sorted(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    # e describes (u, v) from u's side; flip to v's side
                    edge[v] = (e[0], e[1], e[2], not e[3])
                    order.append(v)
        if len(order) != N:
            raise ValueError(f"sub-model {sub.name} is not a spanning tree")
        children = [[] for _ in range(N)]
        for v in order[1:]:
            children[parent[v]].append(v)
        return cls(np.array(order), parent, edge, children)


def _edge_matrix(pot: GridModel, e) -> np.ndarray:
    """Potential of the edge joining u to its parent, indexed ``[s_u, s_parent]``."""
    d, i, j, u_first = e
    M = pot.horizontal[i, j] if d == HORIZONTAL else pot.vertical[i, j]
    return M if u_first else M.T


@dataclass
class SubTable:
    """Max-marginals of one sub-model over the allowed node-states."""

    values: np.ndarray       # (rows, cols, K), -inf where not allowed
    witnesses: np.ndarray    # (n_allowed, rows, cols), in np.nonzero(mask) order
    top: float
    mean: float
    best: np.ndarray         # a highest-scoring output

    def tau(self, alpha: float) -> float:
        return alpha * self.top + (1.0 - alpha) * self.mean


def tree_max_marginals(pot: GridModel, sub: SubModel, mask=None) -> SubTable:
    """Exact max-marginals of ``pot`` restricted to ``sub``'s tree and the allowed states.

    Each value is the rescored witness, i.e. ``pot.score(witness)``.
    """
    n, m, K = pot.unary.shape
    mask = np.ones((n, m, K), bool) if mask is None else np.asarray(mask, bool)
    _check_mask(mask)
    tree = sub.tree
    N = n * m
    unary = np.where(mask, pot.unary, -np.inf).reshape(N, K)
    up_msg = np.zeros((N, K))
    up_ptr = np.zeros((N, K), dtype=np.int64)
    inside = unary.copy()
    for u in tree.order[::-1][:-1]:
        t = inside[u][:, None] + _edge_matrix(pot, tree.edge[u])
        up_ptr[u] = np.argmax(t, axis=0)
        up_msg[u] = np.max(t, axis=0)
        inside[tree.parent[u]] = inside[tree.parent[u]] + up_msg[u]
    outside = np.zeros((N, K))
    down_ptr = np.zeros((N, K), dtype=np.int64)
    for u in tree.order[1:]:
        p = tree.parent[u]
        excl = unary[p] + outside[p]
        for c in tree.children[p]:
            if c != u:
                excl = excl + up_msg[c]
        t = excl[:, None] + _edge_matrix(pot, tree.edge[u]).T
        down_ptr[u] = np.argmax(t, axis=0)
        outside[u] = np.max(t, axis=0)
    flat = mask.reshape(N, K)
    nodes, states = np.nonzero(flat)
    R = len(nodes)
    W = np.full((R, N), -1, dtype=np.int64)
    W[np.arange(R), nodes] = states
    for u in tree.order[::-1][:-1]:
        p = tree.parent[u]
        sel = (W[:, u] >= 0) & (W[:, p] < 0)
        W[sel, p] = down_ptr[u][W[sel, u]]
    for u in tree.order[1:]:
        sel = W[:, u] < 0
        W[sel, u] = up_ptr[u][W[sel, tree.parent[u]]]
    W = W.reshape(R, n, m)
    vals = pot.score(W)
    values = np.full((n, m, K), -np.inf)
    values.reshape(N, K)[nodes, states] = vals
    b = int(np.argmax(vals))
    return SubTable(values, W, float(vals[b]), float(np.mean(vals)), W[b].copy())


def _check_mask(mask: np.ndarray):
    empty = np.argwhere(~mask.any(axis=2))
    if len(empty):
        raise CascadeBreakdown(empty[0])


# -- ensembles --------------------------------------------------------------

@dataclass
class EnsembleTable:
    mask: np.ndarray
    summed: np.ndarray      # (rows, cols, K) sum of sub-model max-marginals, -inf where not allowed
    subs: list              # SubTable per sub-model, in order

    def tau(self, alpha: float) -> float:
        total = 0.0
        for st in self.subs:
            total = total + st.tau(alpha)
        return total

    def taus(self, alpha: float) -> list[float]:
        return [st.tau(alpha) for st in self.subs]

    @property
    def top(self) -> list[float]:
        return [st.top for st in self.subs]


def ensemble_max_marginals(potentials: Sequence[GridModel], subs: Sequence[SubModel], mask=None) -> EnsembleTable:
    """Per-sub-model tree inference, summed in sub-model order."""
    if len(potentials) != len(subs) or not subs:
        raise ValueError("need one potential set per sub-model")
    tables = [tree_max_marginals(pot, sub, mask) for pot, sub in zip(potentials, subs)]
    summed = np.zeros_like(tables[0].values)
    for t in tables:
        summed = summed + t.values
    mask = np.isfinite(summed)
    return EnsembleTable(mask, summed, tables)


def fixed_potentials(grid: GridModel, subs: Sequence[SubModel]) -> list[GridModel]:
    return [sub.restrict(grid) for sub in subs]


def joint_score(potentials: Sequence[GridModel], Y) -> np.ndarray:
    total = 0.0
    for pot in potentials:
        total = total + pot.score(Y)
    return total


def joint_filter(table: EnsembleTable, alpha: float) -> np.ndarray:
    """Keep node-states whose summed max-marginal is strictly above the summed threshold."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    keep = table.mask & (table.summed > table.tau(alpha))
    _check_mask(keep)
    return keep


def joint_loss(potentials: Sequence[GridModel], table: EnsembleTable, truth, alpha: float) -> int:
    """``1[sum_p score_p(truth) <= sum_p tau_p]``."""
    return int(joint_score(potentials, truth) <= table.tau(alpha))


def brute_force_joint(potentials: Sequence[GridModel], mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exhaustive joint max-marginals ``(rows, cols, K)`` plus all allowed outputs and their joint scores."""
    n, m, K = potentials[0].unary.shape
    total = K ** (n * m)
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{total} outputs exceed the brute-force limit")
    codes = np.arange(total, dtype=np.int64)
    Y = np.stack([(codes // K ** (n * m - 1 - t)) % K for t in range(n * m)], axis=1).reshape(total, n, m)
    if mask is not None:
        ok = np.ones(total, bool)
        for i in range(n):
            for j in range(m):
                ok &= mask[i, j, Y[:, i, j]]
        Y = Y[ok]
    s = joint_score(potentials, Y)
    out = np.full((n, m, K), -np.inf)
    for i in range(n):
        for j in range(m):
            np.maximum.at(out[i, j], Y[:, i, j], s)
    return out, Y, s


def decode_grid(table: EnsembleTable) -> np.ndarray:
    """Per-node argmax of the summed max-marginals (smallest state on ties)."""
    return np.argmax(table.summed, axis=2)


# -- learned grid models --------------------------------------------------------

@dataclass(eq=False)
class GridExample:
    keys: list                      # keys[i][j] = raw feature keys of node (i, j)
    labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.keys), len(self.keys[0])):
                raise ValueError("labels must match the key grid")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.keys), len(self.keys[0])


UNARY_T = FeatureTemplate(GRID_UNARY)
PAIR_T = FeatureTemplate(GRID_PAIRWISE)


@dataclass
class GridFeatures:
    index: np.ndarray   # (rows, cols, K, width)
    value: np.ndarray
    pair: np.ndarray    # (2, K, K) pairwise feature index per direction


def grid_features(ex: GridExample, K: int, dimension: int) -> GridFeatures:
    key = (K, dimension)
    if key in ex._cache:
        return ex._cache[key]
    n, m = ex.shape
    width = max([len(ex.keys[i][j]) for i in range(n) for j in range(m)], default=0)
    index = np.zeros((n, m, K, width), dtype=np.int64)
    value = np.zeros((n, m, K, width))
    for i in range(n):
        for j in range(m):
            for s in range(K):
                for t, k in enumerate(sorted(set(ex.keys[i][j]))):
                    index[i, j, s, t] = fold_index(UNARY_T, unary_raw_hash(k, s), dimension)
                    value[i, j, s, t] = 1.0
    raw = np.array([[[pairwise_raw_hash(d, a, b) for b in range(K)] for a in range(K)] for d in (0, 1)],
                   dtype=np.uint64)
    pair = _fold_array(PAIR_T, raw.ravel(), dimension).reshape(2, K, K)
    ex._cache[key] = GridFeatures(index, value, pair)
    return ex._cache[key]


def learned_potentials(theta: np.ndarray, sub: SubModel, gf: GridFeatures) -> GridModel:
    unary = np.sum(theta[gf.index] * gf.value, axis=3) / sub.node_cov
    n, m = sub.shape
    h = np.where(sub.hmask[..., None, None], theta[gf.pair[0]][None, None] / np.maximum(sub.hcov, 1)[..., None, None], 0.0)
    v = np.where(sub.vmask[..., None, None], theta[gf.pair[1]][None, None] / np.maximum(sub.vcov, 1)[..., None, None], 0.0)
    return GridModel(unary, h.reshape(n, m - 1, *h.shape[2:]), v.reshape(n - 1, m, *v.shape[2:]))


def sub_features(sub: SubModel, gf: GridFeatures, Y: np.ndarray, coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``sum_r coef[r] * grad_theta score_p(Y[r])`` as (index, value) pairs."""
    Y = np.asarray(Y, dtype=np.int64).reshape(-1, *sub.shape)
    coef = np.asarray(coef, dtype=np.float64)
    n, m = sub.shape
    K = gf.index.shape[2]
    C = np.zeros((n, m, K))
    ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    np.add.at(C, (np.broadcast_to(ii, Y.shape), np.broadcast_to(jj, Y.shape), Y),
              np.broadcast_to(coef[:, None, None], Y.shape))
    idx = [gf.index.ravel()]
    val = [(gf.value * (C / sub.node_cov)[..., None]).ravel()]
    for d, mask, cov, a, b in ((0, sub.hmask, sub.hcov, Y[:, :, :-1], Y[:, :, 1:]),
                               (1, sub.vmask, sub.vcov, Y[:, :-1, :], Y[:, 1:, :])):
        w = np.where(mask, 1.0 / np.maximum(cov, 1), 0.0)[None] * coef[:, None, None]
        idx.append(gf.pair[d][a, b].ravel())
        val.append(w.ravel())
    return np.concatenate(idx), np.concatenate(val)


def joint_hinge(thetas, subs, ex: GridExample, mask, alpha: float, margin: float, dimension: int):
    K = mask.shape[2]
    gf = grid_features(ex, K, dimension)
    pots = [learned_potentials(th, sub, gf) for th, sub in zip(thetas, subs)]
    table = ensemble_max_marginals(pots, subs, mask)
    return margin + table.tau(alpha) - float(joint_score(pots, ex.labels)), table, pots, gf


def joint_sc_step(thetas, subs, ex: GridExample, mask, alpha: float, config: TrainConfig, t: int,
                  margin: float | None = None):
    """One joint subgradient step; returns the new list of per-sub-model weights.

    All weights shrink by ``1 - eta*lam``; when the joint margin is violated each
    sub-model also moves along ``grad score_p(truth) - grad tau_p``.
    """
    eta = config.step_size(t)
    margin = float(ex.labels.size) if margin is None else margin
    h, table, _, gf = joint_hinge(thetas, subs, ex, mask, alpha, margin, len(thetas[0]))
    out = []
    for th, sub, st in zip(thetas, subs, table.subs):
        w = (1.0 - eta * config.lam) * th
        if h > 0:
            R = len(st.witnesses)
            Y = np.concatenate([ex.labels[None], st.best[None], st.witnesses])
            coef = np.concatenate([[1.0, -alpha], np.full(R, -(1.0 - alpha) / R)])
            idx, val = sub_features(sub, gf, Y, coef)
            np.add.at(w, idx, eta * val)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"non-finite weights in sub-model {sub.name} after step {t}")
        out.append(w)
    return out


def joint_objective(thetas, subs, ex: GridExample, mask, alpha: float, lam: float, margin: float) -> float:
    h = joint_hinge(thetas, subs, ex, mask, alpha, margin, len(thetas[0]))[0]
    return 0.5 * lam * sum(float(th @ th) for th in thetas) + max(0.0, h)


# -- grid coarse-to-fine cascades --------------------------------------------------

@dataclass(frozen=True)
class GridLevelConfig:
    alpha_candidates: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    epsilon: float = 0.01
    train: TrainConfig = TrainConfig(lam=1e-4, eta=0.1, epochs=8, dimension=1 << 12)
    refine: StateHierarchy | None = field(default=None, compare=False)


@dataclass
class GridLevel:
    thetas: list
    alpha: float
    label_map: np.ndarray
    K: int
    refine: StateHierarchy | None = None
    metrics: MetricsRow | None = None


@dataclass
class GridCascade:
    levels: list
    rows: int
    cols: int
    K: int
    dropped: list = field(default_factory=list)


def grid_train_level(data, subs, alpha: float, config: TrainConfig, K: int):
    """Shuffled joint SC passes over ``(example, mask)`` pairs whose truth survives."""
    data = [(ex, mk) for ex, mk in data if truth_survives(ex.labels, mk)]
    thetas = [np.zeros(config.dimension) for _ in subs]
    acc = [np.zeros(config.dimension) for _ in subs]
    rng = np.random.default_rng(config.seed)
    t = 0
    for _ in range(config.epochs):
        for k in rng.permutation(len(data)).tolist():
            t += 1
            ex, mk = data[k]
            thetas = joint_sc_step(thetas, subs, ex, mk, alpha, config, t)
            if config.averaging:
                acc = [a + th for a, th in zip(acc, thetas)]
    if config.averaging and t:
        return [a / t for a in acc]
    return thetas


def truth_survives(labels, mask) -> bool:
    n, m = labels.shape
    return bool(np.all(mask[np.arange(n)[:, None], np.arange(m)[None, :], labels]))


def _joint_stats(thetas, subs, data, dimension):
    out = []
    for ex, mk in data:
        gf = grid_features(ex, mk.shape[2], dimension)
        pots = [learned_potentials(th, sub, gf) for th, sub in zip(thetas, subs)]
        table = ensemble_max_marginals(pots, subs, mk)
        out.append((table, float(joint_score(pots, ex.labels))))
    return out


def tune_grid_alpha(stats, candidates, epsilon: float, gap: float = 1e-7):
    """Largest alpha (candidates plus points just below each critical alpha) with mean joint loss <= epsilon."""
    candidates = sorted(set(float(a) for a in candidates))
    top = np.array([sum(t.top) for t, _ in stats])
    mean = np.array([sum(st.mean for st in t.subs) for t, _ in stats])
    truth = np.array([s for _, s in stats])
    with np.errstate(divide="ignore", invalid="ignore"):
        crit = np.where(top > mean, (truth - mean) / (top - mean), -np.inf) - gap
    crit = crit[(crit >= 0) & (crit <= candidates[-1])]
    for a in sorted(set(candidates) | set(crit.tolist()), reverse=True):
        losses = [int(s <= t.tau(a)) for t, s in stats]
        if np.mean(losses) <= epsilon:
            return a, float(np.mean(losses))
    return 0.0, float(np.mean([int(s <= t.tau(0.0)) for t, s in stats]))


def _relabel_grid(ex: GridExample, mapping) -> GridExample:
    out = GridExample(ex.keys, None if ex.labels is None else mapping[ex.labels])
    out._cache = ex._cache
    return out


def _refine_mask(mask: np.ndarray, h: StateHierarchy | None) -> np.ndarray:
    return mask if h is None else mask[..., h.parent]


def grid_coarse_to_fine(train: Sequence[GridExample], dev: Sequence[GridExample], levels: Sequence[GridLevelConfig],
                        K: int, seed: int = 0) -> GridCascade:
    """Per level: joint training on surviving states, alpha tuning on dev, joint filtering, refinement."""
    if not levels:
        raise ValueError("need at least one level")
    n, m = train[0].shape if train else dev[0].shape
    subs = comb_decompose(n, m)
    alphabets = stage_alphabets(list(levels), K)
    tr_masks = [np.ones((n, m, alphabets[0][0]), bool) for _ in train]
    dv_masks = [np.ones((n, m, alphabets[0][0]), bool) for _ in dev]
    dev_all = list(dev)
    train, out, dropped = list(train), [], []
    for li, cfg in enumerate(levels):
        Kl, mapping = alphabets[li]
        if li > 0:
            tr_masks = [_refine_mask(mk, cfg.refine) for mk in tr_masks]
            dv_masks = [_refine_mask(mk, cfg.refine) for mk in dv_masks]
        tr = [(_relabel_grid(ex, mapping), mk) for ex, mk in zip(train, tr_masks)]
        keep = [k for k, (ex, mk) in enumerate(tr) if truth_survives(ex.labels, mk)]
        dropped.append(len(tr) - len(keep))
        train = [train[k] for k in keep]
        tr = [tr[k] for k in keep]
        tc = TrainConfig(**{**cfg.train.__dict__, "seed": int(np.random.SeedSequence([seed, li]).generate_state(1)[0])})
        dv = [(_relabel_grid(ex, mapping), mk) for ex, mk in zip(dev, dv_masks)]
        dv_live = [(ex, mk) for ex, mk in dv if truth_survives(ex.labels, mk)]
        best = None
        for a in cfg.alpha_candidates:
            thetas = grid_train_level(tr, subs, a, tc, Kl)
            if dv_live:
                alpha, lf = tune_grid_alpha(_joint_stats(thetas, subs, dv_live, tc.dimension),
                                            cfg.alpha_candidates, cfg.epsilon)
                feasible = lf <= cfg.epsilon
                le = _grid_efficiency(thetas, subs, dv_live, alpha)
            else:
                alpha, feasible, le, lf = 0.0, False, 1.0, 0.0
            key = (not feasible, le if feasible else lf)
            if best is None or key < best[0]:
                best = (key, thetas, alpha)
        _, thetas, alpha = best
        out.append(GridLevel(thetas, alpha, mapping, Kl, cfg.refine))
        # a breakdown drops the example from later levels
        tr_masks = [_grid_filter(thetas, subs, ex, mk, alpha) for ex, mk in tr]
        train = [ex for ex, mk in zip(train, tr_masks) if mk is not None]
        tr_masks = [mk for mk in tr_masks if mk is not None]
        dv_masks = [_grid_filter(thetas, subs, ex, mk, alpha) for ex, mk in dv]
        dev = [ex for ex, mk in zip(dev, dv_masks) if mk is not None]
        dv_masks = [mk for mk in dv_masks if mk is not None]
    cascade = GridCascade(out, n, m, K, dropped)
    if dev_all:
        for lvl, row in zip(cascade.levels, evaluate_grid_cascade(cascade, dev_all).rows):
            lvl.metrics = row
    return cascade


def _grid_table(thetas, subs, ex, mask):
    gf = grid_features(ex, mask.shape[2], len(thetas[0]))
    pots = [learned_potentials(th, sub, gf) for th, sub in zip(thetas, subs)]
    return ensemble_max_marginals(pots, subs, mask), pots


def _grid_filter(thetas, subs, ex, mask, alpha):
    try:
        return joint_filter(_grid_table(thetas, subs, ex, mask)[0], alpha)
    except CascadeBreakdown:
        return None


def _grid_efficiency(thetas, subs, data, alpha) -> float:
    out = []
    for ex, mk in data:
        table = _grid_table(thetas, subs, ex, mk)[0]
        out.append(np.count_nonzero(table.summed[table.mask] > table.tau(alpha)) / table.mask.sum())
    return float(np.mean(out))


@dataclass
class GridEvaluation:
    rows: list
    breakdowns: list    # per level, examples whose filtering emptied a node


def evaluate_grid_cascade(cascade: GridCascade, data: Sequence[GridExample]) -> GridEvaluation:
    """Per level: joint filtering loss (over examples whose truth reached it), surviving
    fraction, density after filtering, node and whole-grid accuracy of per-node decoding.

    An example whose filtering breaks down is counted and keeps its unfiltered states.
    """
    subs = comb_decompose(cascade.rows, cascade.cols)
    masks = [np.ones((cascade.rows, cascade.cols, cascade.levels[0].K), bool) for _ in data]
    rows, breakdowns = [], []
    for li, lvl in enumerate(cascade.levels):
        if li > 0:
            masks = [_refine_mask(mk, lvl.refine) for mk in masks]
        broken = 0
        lf, le, kept, full, correct, nodes, whole, new = [], [], 0, 0, 0, 0, 0, []
        for ex, mk in zip(data, masks):
            ex = _relabel_grid(ex, lvl.label_map)
            table, pots = _grid_table(lvl.thetas, subs, ex, mk)
            tau = table.tau(lvl.alpha)
            if truth_survives(ex.labels, mk):
                lf.append(float(joint_score(pots, ex.labels)) <= tau)
            le.append(np.count_nonzero(table.summed[table.mask] > tau) / table.mask.sum())
            pred = decode_grid(table)
            correct += int(np.sum(pred == ex.labels))
            nodes += ex.labels.size
            whole += int(np.array_equal(pred, ex.labels))
            try:
                f = joint_filter(table, lvl.alpha)
            except CascadeBreakdown:
                broken += 1
                f = table.mask
            kept += int(f.sum())
            full += f.size
            new.append(f)
        masks = new
        breakdowns.append(broken)
        rows.append(MetricsRow(li + 1, lvl.alpha, float(np.mean(lf)) if lf else 0.0,
                               float(np.mean(le)) if le else 0.0, kept / full if full else 0.0,
                               correct / nodes if nodes else 0.0, whole / len(data) if data else 0.0))
    return GridEvaluation(rows, breakdowns)


def grid_predict(cascade: GridCascade, ex: GridExample) -> np.ndarray:
    subs = comb_decompose(cascade.rows, cascade.cols)
    mask = np.ones((cascade.rows, cascade.cols, cascade.levels[0].K), bool)
    pred = None
    for li, lvl in enumerate(cascade.levels):
        if li > 0:
            mask = _refine_mask(mask, lvl.refine)
        table = _grid_table(lvl.thetas, subs, ex, mask)[0]
        pred = decode_grid(table)
        mask = joint_filter(table, lvl.alpha)
    return pred
