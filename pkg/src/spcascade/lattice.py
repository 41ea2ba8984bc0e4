"""Sparse lattices of surviving clique assignments.

A lattice of order ``d`` over a length-``L`` chain has anchors ``0 .. L-d``; anchor
``i`` holds the surviving d-grams covering positions ``i .. i+d-1``, stored as
sorted base-K codes (first state most significant, so numeric order equals
lexicographic order of state tuples). Two assignments at neighbouring anchors are
linked iff they overlap consistently, so the transitions are a function of the
valid sets; they are grouped by overlap key for the inference inner loop and
materialized on request.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from spcascade.model import CliqueAssignment, ShapeError, decode, encode


class BrokenLatticeError(RuntimeError):
    """A lattice position lost every assignment."""

    def __init__(self, position, message=None):
        self.position = position
        super().__init__(message or f"broken lattice: no valid assignment at anchor {position}")


@dataclass(frozen=True)
class _Link:
    """Overlap grouping between anchor i (left) and i+1 (right)."""

    left_order: np.ndarray
    left_starts: np.ndarray
    left_counts: np.ndarray
    right_group: np.ndarray     # group (by left key) of each right assignment
    right_order: np.ndarray
    right_starts: np.ndarray
    right_counts: np.ndarray
    left_group: np.ndarray      # group (by right key) of each left assignment


def _groups(keys: np.ndarray):
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if len(sk) == 0:
        return order, np.zeros(0, np.int64), np.zeros(0, np.int64), sk
    first = np.r_[True, sk[1:] != sk[:-1]]
    starts = np.flatnonzero(first)
    counts = np.diff(np.r_[starts, len(sk)])
    return order, starts, counts, sk[first]


def _lookup(sorted_keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_keys, queries)
    pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
    hit = len(sorted_keys) > 0
    ok = (sorted_keys[pos] == queries) if hit else np.zeros(len(queries), bool)
    return np.where(ok, pos, -1)


class SparseLattice:
    """Per-anchor sorted code arrays plus the alphabet size and clique order."""

    def __init__(self, length: int, order: int, K: int, codes, check: bool = True):
        if length < 1 or order < 1 or K < 1:
            raise ShapeError("length, order and K must be positive")
        if order > length:
            raise ShapeError(f"order {order} exceeds length {length}")
        self.length = int(length)
        self.order = int(order)
        self.K = int(K)
        self.codes = [np.asarray(c, dtype=np.int64) for c in codes]
        for c in self.codes:
            c.setflags(write=False)
        if check:
            self._check()

    def _check(self):
        if len(self.codes) != self.n_anchors:
            raise ShapeError(f"expected {self.n_anchors} anchors, got {len(self.codes)}")
        top = self.K ** self.order
        for i, c in enumerate(self.codes):
            if len(c) == 0:
                raise BrokenLatticeError(i)
            if np.any(np.diff(c) <= 0) or c[0] < 0 or c[-1] >= top:
                raise ValueError(f"anchor {i}: codes must be sorted, unique and < K**order")

    # -- shape -------------------------------------------------------------
    @property
    def n_anchors(self) -> int:
        return self.length - self.order + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.codes], dtype=np.int64)

    @property
    def n_assignments(self) -> int:
        return int(self.sizes.sum())

    @property
    def full_count(self) -> int:
        return self.n_anchors * self.K ** self.order

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.r_[0, np.cumsum(self.sizes)].astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, SparseLattice):
            return NotImplemented
        return (self.length, self.order, self.K) == (other.length, other.order, other.K) and all(
            np.array_equal(a, b) for a, b in zip(self.codes, other.codes))

    def __repr__(self):
        return (f"SparseLattice(length={self.length}, order={self.order}, K={self.K}, "
                f"survivors={self.n_assignments}/{self.full_count})")

    # -- assignments -------------------------------------------------------
    def valid(self, anchor: int) -> list[CliqueAssignment]:
        return [CliqueAssignment(anchor, decode(int(c), self.K, self.order)) for c in self.codes[anchor]]

    def index_of(self, clique: CliqueAssignment) -> int:
        """Row of ``clique`` within its anchor, or -1 when pruned."""
        if clique.order != self.order:
            raise ShapeError(f"clique order {clique.order} != lattice order {self.order}")
        if not 0 <= clique.position < self.n_anchors:
            raise IndexError(f"anchor {clique.position} out of range")
        c = self.codes[clique.position]
        code = encode(clique.states, self.K)
        i = int(np.searchsorted(c, code))
        return i if i < len(c) and c[i] == code else -1

    def __contains__(self, clique: CliqueAssignment) -> bool:
        return self.index_of(clique) >= 0

    def output_codes(self, labels) -> np.ndarray:
        """Code of the d-gram an output places at every anchor."""
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != self.length:
            raise ShapeError(f"output length {len(labels)} != lattice length {self.length}")
        codes = np.zeros(self.n_anchors, dtype=np.int64)
        for t in range(self.order):
            codes = codes * self.K + labels[t:t + self.n_anchors]
        return codes

    def output_indices(self, labels) -> np.ndarray:
        """Row of each of the output's d-grams within its anchor (-1 where pruned)."""
        codes = self.output_codes(labels)
        return np.array([_lookup(c, codes[i:i + 1])[0] for i, c in enumerate(self.codes)], dtype=np.int64)

    def contains_output(self, labels) -> bool:
        labels = np.asarray(labels)
        if np.any(labels < 0) or np.any(labels >= self.K):
            return False
        return bool(np.all(self.output_indices(labels) >= 0))

    # -- transitions -------------------------------------------------------
    @cached_property
    def _key_base(self) -> int:
        return self.K ** (self.order - 1)

    def link(self, i: int) -> _Link:
        return self._links[i]

    @cached_property
    def _links(self) -> list[_Link]:
        out = []
        for i in range(self.n_anchors - 1):
            left, right = self.codes[i], self.codes[i + 1]
            lkey = left % self._key_base
            rkey = right // self.K
            lorder, lstarts, lcounts, lkeys = _groups(lkey)
            rorder, rstarts, rcounts, rkeys = _groups(rkey)
            out.append(_Link(lorder, lstarts, lcounts, _lookup(lkeys, rkey),
                             rorder, rstarts, rcounts, _lookup(rkeys, lkey)))
        return out

    def transitions(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """All compatible ``(left_row, right_row)`` pairs between anchors i and i+1, sorted."""
        left, right = self.codes[i], self.codes[i + 1]
        lkey = left % self._key_base
        rkey = right // self.K
        pairs_l, pairs_r = [], []
        rorder, rstarts, rcounts, rkeys = _groups(rkey)
        grp = _lookup(rkeys, lkey)
        for a in range(len(left)):
            g = grp[a]
            if g < 0:
                continue
            rows = np.sort(rorder[rstarts[g]:rstarts[g] + rcounts[g]])
            pairs_l.append(np.full(len(rows), a))
            pairs_r.append(rows)
        if not pairs_l:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(pairs_l).astype(np.int64), np.concatenate(pairs_r).astype(np.int64)

    def n_transitions(self) -> int:
        total = 0
        for i in range(self.n_anchors - 1):
            link = self._links[i]
            ok = link.right_group >= 0
            total += int(link.left_counts[link.right_group[ok]].sum())
        return total

    # -- derived lattices --------------------------------------------------
    def restrict(self, keep) -> "SparseLattice":
        """Keep the flagged rows (one boolean array per anchor), then drop dead ends."""
        codes = [c[np.asarray(k, bool)] for c, k in zip(self.codes, keep)]
        return trim(self.length, self.order, self.K, codes)


def trim(length: int, order: int, K: int, codes) -> SparseLattice:
    """Build a lattice from candidate codes, dropping assignments on no full path."""
    codes = [np.unique(np.asarray(c, dtype=np.int64)) for c in codes]
    base = K ** (order - 1)
    for i, c in enumerate(codes):
        if len(c) == 0:
            raise BrokenLatticeError(i)
    for i in range(1, len(codes)):
        codes[i] = codes[i][np.isin(codes[i] // K, codes[i - 1] % base)]
        if len(codes[i]) == 0:
            raise BrokenLatticeError(i)
    for i in range(len(codes) - 2, -1, -1):
        codes[i] = codes[i][np.isin(codes[i] % base, codes[i + 1] // K)]
        if len(codes[i]) == 0:
            raise BrokenLatticeError(i)
    return SparseLattice(length, order, K, codes)


def full_lattice(length: int, K: int, order: int) -> SparseLattice:
    if order > length:
        raise ShapeError(f"order {order} exceeds length {length}")
    full = np.arange(K ** order, dtype=np.int64)
    return SparseLattice(length, order, K, [full] * (length - order + 1))


def expand(lattice: SparseLattice) -> SparseLattice:
    """Lift to order d+1: a (d+1)-gram survives iff both of its d-grams survived."""
    d, K = lattice.order, lattice.K
    if d + 1 > lattice.length:
        raise ShapeError(f"cannot expand an order-{d} lattice of length {lattice.length}")
    codes = []
    for i in range(lattice.n_anchors - 1):
        left_rows, right_rows = lattice.transitions(i)
        codes.append(lattice.codes[i][left_rows] * K + lattice.codes[i + 1][right_rows] % K)
    return trim(lattice.length, d + 1, K, codes)


def expand_to(lattice: SparseLattice, order: int) -> SparseLattice:
    """Expand repeatedly up to ``min(order, length)``."""
    order = min(order, lattice.length)
    if order < lattice.order:
        raise ShapeError(f"cannot shrink an order-{lattice.order} lattice to order {order}")
    while lattice.order < order:
        lattice = expand(lattice)
    return lattice


def intersect(a: SparseLattice, b: SparseLattice) -> SparseLattice:
    if (a.length, a.order, a.K) != (b.length, b.order, b.K):
        raise ShapeError("lattices differ in shape")
    return trim(a.length, a.order, a.K, [np.intersect1d(x, y) for x, y in zip(a.codes, b.codes)])


def density(lattice: SparseLattice) -> float:
    return lattice.n_assignments / lattice.full_count


def has_full_path(lattice: SparseLattice) -> bool:
    """True iff some complete output is consistent with every anchor."""
    try:
        trim(lattice.length, lattice.order, lattice.K, lattice.codes)
    except BrokenLatticeError:
        return False
    return True


class StateHierarchy:
    """Map from each coarse state to its ordered fine children.

    Children must be disjoint and together cover ``range(fine_size)``.
    """

    def __init__(self, children):
        self.children = [tuple(int(c) for c in ch) for ch in children]
        flat = [c for ch in self.children for c in ch]
        if any(len(ch) == 0 for ch in self.children):
            raise ValueError("every coarse state needs at least one child")
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("children must be disjoint and cover the fine alphabet")
        self.parent = np.empty(len(flat), dtype=np.int64)
        for p, ch in enumerate(self.children):
            self.parent[list(ch)] = p

    @property
    def coarse_size(self) -> int:
        return len(self.children)

    @property
    def fine_size(self) -> int:
        return len(self.parent)

    @classmethod
    def identity(cls, K: int) -> "StateHierarchy":
        return cls([(s,) for s in range(K)])

    @classmethod
    def split(cls, K: int, factor: int = 2) -> "StateHierarchy":
        """State s -> (factor*s, ..., factor*s + factor - 1)."""
        return cls([tuple(range(factor * s, factor * s + factor)) for s in range(K)])

    @classmethod
    def grid_split(cls, rows: int, cols: int, axis: int = 0) -> "StateHierarchy":
        """Location states on a rows x cols grid, doubling resolution along ``axis``.

        Coarse state ``r*cols + c``; the fine grid is (2*rows, cols) for axis 0 and
        (rows, 2*cols) for axis 1.
        """
        children = []
        for r in range(rows):
            for c in range(cols):
                if axis == 0:
                    children.append((2 * r * cols + c, (2 * r + 1) * cols + c))
                else:
                    children.append((r * 2 * cols + 2 * c, r * 2 * cols + 2 * c + 1))
        return cls(children)

    def refine_states(self, states) -> np.ndarray:
        if len(states) and (np.max(states) >= self.coarse_size or np.min(states) < 0):
            raise ValueError("hierarchy does not cover a surviving state")
        return np.array(sorted(c for s in states for c in self.children[int(s)]), dtype=np.int64)


def refine(lattice: SparseLattice, hierarchy: StateHierarchy) -> SparseLattice:
    """Replace every surviving assignment by all combinations of its states' children."""
    if hierarchy.coarse_size != lattice.K:
        raise ValueError(f"hierarchy covers {hierarchy.coarse_size} states, lattice has K={lattice.K}")
    K2, d = hierarchy.fine_size, lattice.order
    child_arrays = [np.asarray(ch, dtype=np.int64) for ch in hierarchy.children]
    codes = []
    for c in lattice.codes:
        out = []
        for code in c.tolist():
            acc = np.zeros(1, dtype=np.int64)
            for s in decode(code, lattice.K, d):
                acc = (acc[:, None] * K2 + child_arrays[s][None, :]).ravel()
            out.append(acc)
        codes.append(np.sort(np.concatenate(out)))
    return SparseLattice(lattice.length, d, K2, codes)

