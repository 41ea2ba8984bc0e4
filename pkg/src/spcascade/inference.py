"""Max-marginals, MAP decoding and sum-product marginals over a sparse lattice.

Max-sum runs forward and backward over the overlap groups of the lattice. Ties go
to the lexicographically smallest assignment at every max. Each surviving
assignment gets a witness (a full output achieving its max-marginal) by following
backward pointers to the left and forward pointers to the right; the reported
max-marginal is the witness re-scored left to right, so it equals
``score_output(witness)`` bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spcascade.lattice import BrokenLatticeError, SparseLattice
from spcascade.model import (CliqueAssignment, LinearModel, ShapeError, as_features, decode,
                             ngram_tables, unary_table)

BRUTE_FORCE_LIMIT = 10 ** 6


class InvalidLatticeError(ValueError):
    """The lattice does not match the input or model."""


def anchor_scores(model: LinearModel, x, lattice: SparseLattice) -> list[np.ndarray]:
    """Score of every surviving assignment, aligned with ``lattice.codes``.

    Anchor 0 carries the position scores of positions ``0..d-1``; every later anchor
    carries the position score of its last position.
    """
    feats = as_features(model, x)
    if feats.length != lattice.length:
        raise InvalidLatticeError(f"lattice length {lattice.length} != input length {feats.length}")
    if model.K != lattice.K:
        raise InvalidLatticeError(f"model K={model.K} != lattice K={lattice.K}")
    d, K = lattice.order, lattice.K
    if model.order > d and d < lattice.length:
        raise ShapeError(f"an order-{model.order} model needs a lattice of order >= {model.order}")
    U = unary_table(model.weights, feats) if model.has_unary else np.zeros((feats.length, K))
    T = ngram_tables(model)
    orders = [k for k in sorted(T) if k <= d]

    def position_score(codes, j, t):
        # state at offset t of the d-gram, plus the k-grams ending there
        ps = U[j, (codes // K ** (d - 1 - t)) % K]
        for k in orders:
            if k <= t + 1:
                ps = ps + T[k][(codes // K ** (d - 1 - t)) % K ** k]
        return ps

    first = lattice.codes[0]
    s0 = position_score(first, np.zeros(len(first), np.int64), 0)
    for t in range(1, d):
        s0 = s0 + position_score(first, np.full(len(first), t), t)
    out = [s0]
    if lattice.n_anchors > 1:
        rest = np.concatenate(lattice.codes[1:])
        anchor = np.repeat(np.arange(1, lattice.n_anchors), lattice.sizes[1:])
        srest = position_score(rest, anchor + d - 1, d - 1)
        out.extend(np.split(srest, lattice.offsets[2:-1] - lattice.offsets[1]))
    return out


def _group_argmax(vals, order, starts, counts):
    """Per-group max of ``vals[order]`` and the smallest row attaining it."""
    v = vals[order]
    gmax = np.maximum.reduceat(v, starts)
    hit = v == np.repeat(gmax, counts)
    pos = np.where(hit, np.arange(len(v)), len(v))
    return gmax, order[np.minimum.reduceat(pos, starts)]


def _group_logsumexp(vals, order, starts, counts):
    v = vals[order]
    gmax = np.maximum.reduceat(v, starts)
    safe = np.where(np.isfinite(gmax), gmax, 0.0)
    return safe + np.log(np.add.reduceat(np.exp(v - np.repeat(safe, counts)), starts))


@dataclass
class ViterbiPasses:
    scores: list
    alpha: list     # best left-to-right prefix score ending in each assignment
    beta: list      # best suffix score after each assignment
    back: list      # back[i][b]: best left row for row b at anchor i (i >= 1)
    fwd: list       # fwd[i][a]: best right row for row a at anchor i (i < last)


def viterbi_passes(scores: list[np.ndarray], lattice: SparseLattice) -> ViterbiPasses:
    A = lattice.n_anchors
    alpha, back = [scores[0]], [None]
    for i in range(1, A):
        link = lattice.link(i - 1)
        if np.any(link.right_group < 0):
            raise BrokenLatticeError(i, f"anchor {i} has assignments with no predecessor")
        gmax, garg = _group_argmax(alpha[-1], link.left_order, link.left_starts, link.left_counts)
        alpha.append(gmax[link.right_group] + scores[i])
        back.append(garg[link.right_group])
    beta, fwd = [None] * A, [None] * A
    beta[A - 1] = np.zeros(len(scores[A - 1]))
    for i in range(A - 2, -1, -1):
        link = lattice.link(i)
        if np.any(link.left_group < 0):
            raise BrokenLatticeError(i, f"anchor {i} has assignments with no successor")
        gmax, garg = _group_argmax(scores[i + 1] + beta[i + 1], link.right_order, link.right_starts,
                                   link.right_counts)
        beta[i] = gmax[link.left_group]
        fwd[i] = garg[link.left_group]
    return ViterbiPasses(scores, alpha, beta, back, fwd)


def witness_rows(passes: ViterbiPasses, lattice: SparseLattice) -> np.ndarray:
    """``W[r, i]``: row chosen at anchor i by the witness of flat assignment r."""
    A = lattice.n_anchors
    N = lattice.n_assignments
    anchor = np.repeat(np.arange(A), lattice.sizes)
    W = np.zeros((N, A), dtype=np.int64)
    W[np.arange(N), anchor] = np.arange(N) - lattice.offsets[anchor]
    for i in range(A - 2, -1, -1):
        m = anchor > i
        W[m, i] = passes.back[i + 1][W[m, i + 1]]
    for i in range(1, A):
        m = anchor < i
        W[m, i] = passes.fwd[i - 1][W[m, i - 1]]
    return W


def rows_to_labels(W: np.ndarray, lattice: SparseLattice) -> np.ndarray:
    d, K = lattice.order, lattice.K
    Y = np.zeros((W.shape[0], lattice.length), dtype=np.int64)
    c0 = lattice.codes[0][W[:, 0]]
    for t in range(d):
        Y[:, t] = (c0 // K ** (d - 1 - t)) % K
    for i in range(1, lattice.n_anchors):
        Y[:, i + d - 1] = lattice.codes[i][W[:, i]] % K
    return Y


def rescore_rows(scores: list[np.ndarray], W: np.ndarray) -> np.ndarray:
    total = scores[0][W[:, 0]]
    for i in range(1, W.shape[1]):
        total = total + scores[i][W[:, i]]
    return total


class MaxMarginalTable:
    """Max-marginal and witness for every surviving assignment of a lattice.

    Rows are flat: anchor by anchor, in code order. ``values[r]`` is the
    max-marginal of row r, ``witnesses[r]`` a full output achieving it.
    """

    def __init__(self, lattice: SparseLattice, values, witnesses, scores=None, rows=None):
        self.lattice = lattice
        self.values = np.asarray(values, dtype=np.float64)
        self.witnesses = np.asarray(witnesses, dtype=np.int64)
        self.scores = scores
        self.rows = rows
        best = int(np.argmax(self.values))
        self.global_max = float(self.values[best])
        self.global_argmax = self.witnesses[best].copy()

    def __len__(self):
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def row(self, clique: CliqueAssignment) -> int:
        i = self.lattice.index_of(clique)
        if i < 0:
            raise KeyError(f"{clique} is not in the lattice")
        return int(self.lattice.offsets[clique.position] + i)

    def max_marginal(self, clique: CliqueAssignment) -> float:
        return float(self.values[self.row(clique)])

    def witness(self, clique: CliqueAssignment) -> np.ndarray:
        return self.witnesses[self.row(clique)]

    def per_anchor(self) -> list[np.ndarray]:
        o = self.lattice.offsets
        return [self.values[o[i]:o[i + 1]] for i in range(self.lattice.n_anchors)]

    def entries(self):
        """Yield ``(CliqueAssignment, max_marginal, witness)`` in row order."""
        lat = self.lattice
        r = 0
        for i, c in enumerate(lat.codes):
            for code in c.tolist():
                yield CliqueAssignment(i, decode(code, lat.K, lat.order)), float(self.values[r]), self.witnesses[r]
                r += 1


def max_marginals(model: LinearModel, x, lattice: SparseLattice) -> MaxMarginalTable:
    return table_from_scores(anchor_scores(model, x, lattice), lattice)


def table_from_scores(scores: list[np.ndarray], lattice: SparseLattice) -> MaxMarginalTable:
    passes = viterbi_passes(scores, lattice)
    W = witness_rows(passes, lattice)
    return MaxMarginalTable(lattice, rescore_rows(scores, W), rows_to_labels(W, lattice), scores, W)


def map_decode(model: LinearModel, x, lattice: SparseLattice) -> tuple[np.ndarray, float]:
    """Highest-scoring output consistent with the lattice, and its score."""
    return map_from_scores(anchor_scores(model, x, lattice), lattice)


def map_from_scores(scores: list[np.ndarray], lattice: SparseLattice) -> tuple[np.ndarray, float]:
    passes = viterbi_passes(scores, lattice)
    # witnesses of anchor-0 rows cover every full path; the first maximal one is the MAP
    A = lattice.n_anchors
    W = np.zeros((lattice.sizes[0], A), dtype=np.int64)
    W[:, 0] = np.arange(lattice.sizes[0])
    for i in range(1, A):
        W[:, i] = passes.fwd[i - 1][W[:, i - 1]]
    total = rescore_rows(scores, W)
    best = int(np.argmax(total))
    return rows_to_labels(W[best:best + 1], lattice)[0], float(total[best])


@dataclass
class LogMarginalTable:
    """Sum-product posteriors ``P(y_c | x)`` for every surviving assignment (flat rows)."""

    lattice: SparseLattice
    posteriors: np.ndarray
    log_partition: float

    def per_anchor(self) -> list[np.ndarray]:
        o = self.lattice.offsets
        return [self.posteriors[o[i]:o[i + 1]] for i in range(self.lattice.n_anchors)]

    def posterior(self, clique: CliqueAssignment) -> float:
        i = self.lattice.index_of(clique)
        if i < 0:
            raise KeyError(f"{clique} is not in the lattice")
        return float(self.posteriors[self.lattice.offsets[clique.position] + i])


def sum_product_marginals(model: LinearModel, x, lattice: SparseLattice) -> LogMarginalTable:
    scores = anchor_scores(model, x, lattice)
    return _sum_product(scores, lattice)


def _sum_product(scores, lattice: SparseLattice) -> LogMarginalTable:
    A = lattice.n_anchors
    la = [scores[0]]
    for i in range(1, A):
        link = lattice.link(i - 1)
        if np.any(link.right_group < 0):
            raise BrokenLatticeError(i)
        g = _group_logsumexp(la[-1], link.left_order, link.left_starts, link.left_counts)
        la.append(g[link.right_group] + scores[i])
    lb = [None] * A
    lb[A - 1] = np.zeros(len(scores[A - 1]))
    for i in range(A - 2, -1, -1):
        link = lattice.link(i)
        if np.any(link.left_group < 0):
            raise BrokenLatticeError(i)
        g = _group_logsumexp(scores[i + 1] + lb[i + 1], link.right_order, link.right_starts,
                             link.right_counts)
        lb[i] = g[link.left_group]
    last = la[-1]
    top = np.max(last)
    log_z = float(top + np.log(np.sum(np.exp(last - top))))
    post = np.exp(np.concatenate(la) + np.concatenate(lb) - log_z)
    return LogMarginalTable(lattice, post, log_z)


def enumerate_outputs(length: int, K: int) -> np.ndarray:
    """All K**length outputs in lexicographic order."""
    total = K ** length
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{total} outputs exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")
    codes = np.arange(total, dtype=np.int64)
    return np.stack([(codes // K ** (length - 1 - t)) % K for t in range(length)], axis=1)


def _consistent_rows(lattice: SparseLattice, Y: np.ndarray):
    """Per-anchor row index of each output's d-gram (-1 if pruned) and a consistency mask."""
    d, K, A = lattice.order, lattice.K, lattice.n_anchors
    R = np.zeros((len(Y), A), dtype=np.int64)
    for i in range(A):
        code = np.zeros(len(Y), dtype=np.int64)
        for t in range(d):
            code = code * K + Y[:, i + t]
        c = lattice.codes[i]
        pos = np.minimum(np.searchsorted(c, code), len(c) - 1)
        R[:, i] = np.where(c[pos] == code, pos, -1)
    return R, np.all(R >= 0, axis=1)


def brute_force_max_marginals(model: LinearModel, x, lattice: SparseLattice) -> MaxMarginalTable:
    """Exhaustive max-marginals: enumerate every output (test oracle)."""
    Y = enumerate_outputs(lattice.length, lattice.K)
    scores = anchor_scores(model, x, lattice)
    R, ok = _consistent_rows(lattice, Y)
    Y, R = Y[ok], R[ok]
    total = rescore_rows(scores, R)
    values = np.empty(lattice.n_assignments)
    wit = np.empty((lattice.n_assignments, lattice.length), dtype=np.int64)
    for i in range(lattice.n_anchors):
        # lexicographic outputs: first max per group is the lexicographically smallest witness
        order = np.lexsort((np.arange(len(Y)), -total, R[:, i]))
        grp = R[order, i]
        first = np.r_[True, grp[1:] != grp[:-1]]
        rows = order[first]
        base = lattice.offsets[i]
        if len(rows) != lattice.sizes[i]:
            raise BrokenLatticeError(i, f"anchor {i} has assignments on no full path")
        values[base:base + len(rows)] = total[rows]
        wit[base:base + len(rows)] = Y[rows]
    return MaxMarginalTable(lattice, values, wit, scores)


def brute_force_scores(model: LinearModel, x, lattice: SparseLattice):
    """Every lattice-consistent output with its score (lexicographic order)."""
    Y = enumerate_outputs(lattice.length, lattice.K)
    scores = anchor_scores(model, x, lattice)
    R, ok = _consistent_rows(lattice, Y)
    return Y[ok], rescore_rows(scores, R[ok])


def brute_force_posteriors(model: LinearModel, x, lattice: SparseLattice) -> np.ndarray:
    """Exhaustive softmax marginals aligned with the lattice's flat rows."""
    Y = enumerate_outputs(lattice.length, lattice.K)
    scores = anchor_scores(model, x, lattice)
    R, ok = _consistent_rows(lattice, Y)
    R = R[ok]
    s = rescore_rows(scores, R)
    p = np.exp(s - s.max())
    p /= p.sum()
    out = np.zeros(lattice.n_assignments)
    for i in range(lattice.n_anchors):
        np.add.at(out, lattice.offsets[i] + R[:, i], p)
    return out


def clique_of(lattice: SparseLattice, labels, anchor: int) -> CliqueAssignment:
    labels = [int(s) for s in labels]
    return CliqueAssignment(anchor, labels[anchor:anchor + lattice.order])



def score_labels(model: LinearModel, x, labels) -> float:
    """Table-path score of one output; bitwise equal to :func:`~spcascade.model.score_output`."""
    labels = np.asarray(labels, dtype=np.int64)
    d = min(model.order, len(labels))
    path = SparseLattice(len(labels), d, model.K, [[c] for c in _codes_of(labels, d, model.K)])
    scores = anchor_scores(model, x, path)
    total = scores[0][0]
    for s in scores[1:]:
        total = total + s[0]
    return float(total)


def _codes_of(labels: np.ndarray, d: int, K: int) -> list[int]:
    n = len(labels) - d + 1
    codes = np.zeros(n, dtype=np.int64)
    for t in range(d):
        codes = codes * K + labels[t:t + n]
    return codes.tolist()
