"""Linear scoring model over sparse hashed clique features.

Feature indices come from a deterministic 64-bit hash of ``(template, raw key)``
folded into the model dimension. Collisions are allowed (hashing trick).

Two scoring paths exist and are kept bitwise identical:

* the reference path (:func:`featurize_clique`, :func:`score_clique`,
  :func:`score_output`) works one clique at a time;
* the table path (:class:`SequenceFeatures`, :func:`unary_table`,
  :func:`ngram_tables`) is what inference and training use.

A clique score is ``0.0 + w[i0]*v0 + w[i1]*v1 + ...`` over the sorted, merged
feature entries. An output's score sums the cliques ending at each position
(unary first, then bigram, trigram, ...) into a position score, and the
position scores are summed left to right.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1

UNARY = "unary"
NGRAM = "ngram"
GRID_UNARY = "grid-unary"
GRID_PAIRWISE = "grid-pairwise"
_KINDS = (UNARY, NGRAM, GRID_UNARY, GRID_PAIRWISE)


class ShapeError(ValueError):
    """Raised when lengths or orders are inconsistent."""


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorized :func:`splitmix64` on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=1 << 20)
def key_hash(key: str) -> int:
    """Stable 64-bit hash of a raw feature key (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class FeatureTemplate:
    """A family of indicator features.

    ``unary`` and ``grid-unary`` pair each input key with a state.
    ``ngram`` (order d >= 2) fires once per d-gram of labels and ignores the input.
    ``grid-pairwise`` fires once per (direction, state, state) on a grid edge.
    """

    kind: str
    order: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown template kind {self.kind!r}")
        if self.kind == NGRAM and self.order < 2:
            raise ValueError("ngram templates need order >= 2")
        if self.kind != NGRAM and self.order != 1:
            raise ValueError(f"{self.kind} templates have order 1")

    @property
    def template_hash(self) -> int:
        return key_hash(f"template/{self.kind}/{self.order}")


def unary_raw_hash(key: str, state: int) -> int:
    return splitmix64(key_hash(key) ^ splitmix64(state + 1))


def ngram_raw_hash(states: Sequence[int]) -> int:
    h = splitmix64(len(states))
    for s in states:
        h = splitmix64(h ^ (int(s) + 1))
    return h


def pairwise_raw_hash(direction: int, left: int, right: int) -> int:
    return splitmix64(splitmix64(direction + 1) ^ ngram_raw_hash((left, right)))


def fold_index(template: FeatureTemplate, raw_hash: int, dimension: int) -> int:
    return splitmix64(template.template_hash ^ raw_hash) % dimension


def _fold_array(template: FeatureTemplate, raw: np.ndarray, dimension: int) -> np.ndarray:
    h = splitmix64_array(np.uint64(template.template_hash) ^ raw)
    return (h % np.uint64(dimension)).astype(np.int64)


def _ngram_raw_hash_array(digits: np.ndarray) -> np.ndarray:
    """``ngram_raw_hash`` for every row of ``digits`` (shape ``(n, d)``)."""
    d = digits.shape[1]
    h = np.full(digits.shape[0], splitmix64(d), dtype=np.uint64)
    for t in range(d):
        h = splitmix64_array(h ^ (digits[:, t].astype(np.uint64) + np.uint64(1)))
    return h


@dataclass(frozen=True)
class FeatureVector:
    """Sparse vector with strictly increasing indices and no stored zeros."""

    indices: np.ndarray
    values: np.ndarray
    dimension: int

    def __post_init__(self):
        idx = self.indices
        if len(idx) != len(self.values):
            raise ShapeError("indices and values differ in length")
        if len(idx) and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dimension):
            raise ValueError("feature indices must be strictly increasing and < dimension")
        if np.any(self.values == 0):
            raise ValueError("zero-valued entries are not stored")

    @classmethod
    def from_pairs(cls, pairs, dimension: int) -> "FeatureVector":
        """Build from (index, value) pairs, merging duplicates and dropping zeros."""
        merged: dict[int, float] = {}
        for i, v in pairs:
            merged[int(i)] = merged.get(int(i), 0.0) + float(v)
        items = sorted((i, v) for i, v in merged.items() if v != 0.0)
        return cls(
            np.array([i for i, _ in items], dtype=np.int64),
            np.array([v for _, v in items], dtype=np.float64),
            dimension,
        )

    def __len__(self):
        return len(self.indices)

    def dot(self, weights: np.ndarray) -> float:
        acc = 0.0
        for i, v in zip(self.indices.tolist(), self.values.tolist()):
            acc += float(weights[i]) * v
        return acc

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class CliqueAssignment:
    """Joint value for the output variables ``position .. position+len(states)-1``."""

    position: int
    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if self.position < 0:
            raise IndexError("clique position must be nonnegative")

    @property
    def order(self) -> int:
        return len(self.states)

    @property
    def end(self) -> int:
        return self.position + len(self.states) - 1


def default_templates(order: int) -> tuple[FeatureTemplate, ...]:
    """Unary emissions plus one transition template per n-gram length 2..order."""
    return (FeatureTemplate(UNARY),) + tuple(FeatureTemplate(NGRAM, k) for k in range(2, order + 1))


@dataclass
class LinearModel:
    """Dense weight vector shared by a set of hashed feature templates."""

    weights: np.ndarray
    templates: tuple
    K: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.templates = tuple(self.templates)
        if self.weights.ndim != 1:
            raise ShapeError("weights must be a vector")
        if not self.templates and len(self.weights):
            raise ShapeError("a model without templates has dimension 0")

    @classmethod
    def zeros(cls, K: int, order: int = 1, dimension: int = 1 << 18, templates=None) -> "LinearModel":
        templates = default_templates(order) if templates is None else tuple(templates)
        if not templates:
            dimension = 0
        return cls(np.zeros(dimension), templates, K)

    @property
    def dimension(self) -> int:
        return len(self.weights)

    @property
    def order(self) -> int:
        """Longest label n-gram any template scores."""
        return max([t.order for t in self.templates if t.kind == NGRAM], default=1)

    @property
    def ngram_orders(self) -> list[int]:
        return sorted(t.order for t in self.templates if t.kind == NGRAM)

    @property
    def has_unary(self) -> bool:
        return any(t.kind == UNARY for t in self.templates)

    def copy(self, weights=None) -> "LinearModel":
        return LinearModel(self.weights.copy() if weights is None else weights, self.templates, self.K)

    def template(self, kind: str, order: int = 1) -> FeatureTemplate | None:
        for t in self.templates:
            if t.kind == kind and t.order == order:
                return t
        return None


def featurize_clique(tokens: Sequence[Sequence[str]], clique: CliqueAssignment, templates,
                     dimension: int) -> FeatureVector:
    """Sparse features of one clique assignment of a sequence.

    Unary cliques (one state) read the input keys at their position; longer cliques
    fire the matching n-gram template and never look at the input.
    """
    if clique.end >= len(tokens):
        raise IndexError(f"clique covering {clique.position}..{clique.end} is outside a length-{len(tokens)} input")
    pairs = []
    for t in templates:
        if t.kind == UNARY and clique.order == 1:
            s = clique.states[0]
            for key in tokens[clique.position]:
                pairs.append((fold_index(t, unary_raw_hash(key, s), dimension), 1.0))
        elif t.kind == NGRAM and t.order == clique.order:
            pairs.append((fold_index(t, ngram_raw_hash(clique.states), dimension), 1.0))
    return FeatureVector.from_pairs(pairs, dimension)


def score_clique(model: LinearModel, tokens, clique: CliqueAssignment) -> float:
    return featurize_clique(tokens, clique, model.templates, model.dimension).dot(model.weights)


def output_cliques(length: int, order: int, ngram_orders=None):
    """Cliques of a length-``length`` chain, grouped by end position.

    Yields ``(end, [(start, k), ...])`` with unary first, then increasing n-gram length.
    """
    ngram_orders = list(range(2, order + 1)) if ngram_orders is None else ngram_orders
    for j in range(length):
        group = [(j, 1)] + [(j - k + 1, k) for k in ngram_orders if j - k + 1 >= 0]
        yield j, group


def score_output(model: LinearModel, tokens, labels) -> float:
    """Score of a full label sequence by summing its clique scores.

    Cliques ending at the same position are summed first; position sums are then
    accumulated left to right. This grouping is the canonical summation order.
    """
    labels = [int(s) for s in labels]
    if len(labels) != len(tokens):
        raise ShapeError(f"output length {len(labels)} != input length {len(tokens)}")
    total = 0.0
    for _, group in output_cliques(len(labels), model.order, model.ngram_orders):
        pos = 0.0
        for start, k in group:
            pos += score_clique(model, tokens, CliqueAssignment(start, labels[start:start + k]))
        total += pos
    return total


@dataclass(eq=False)
class Example:
    """One input sequence (per-position raw feature keys) with optional gold labels."""

    tokens: list
    labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.tokens = [list(t) for t in self.tokens]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.tokens):
                raise ShapeError("labels and tokens differ in length")

    def __len__(self):
        return len(self.tokens)

    def features(self, K: int, dimension: int) -> "SequenceFeatures":
        key = (K, dimension)
        if key not in self._cache:
            self._cache[key] = featurize_sequence(self.tokens, K, dimension)
        return self._cache[key]


def as_features(model: LinearModel, x) -> "SequenceFeatures":
    """Accept an :class:`Example`, raw tokens, or ready :class:`SequenceFeatures`."""
    if isinstance(x, SequenceFeatures):
        return x
    if isinstance(x, Example):
        return x.features(model.K, model.dimension)
    return featurize_sequence(x, model.K, model.dimension)


@dataclass
class SequenceFeatures:
    """Weight-independent featurization of one input sequence.

    ``index[j, s, t]`` / ``value[j, s, t]`` hold the merged, sorted unary feature
    entries for state ``s`` at position ``j``, padded with value 0.0.
    """

    index: np.ndarray
    value: np.ndarray
    K: int
    dimension: int

    @property
    def length(self) -> int:
        return self.index.shape[0]


def featurize_sequence(tokens, K: int, dimension: int, template: FeatureTemplate | None = None) -> SequenceFeatures:
    template = FeatureTemplate(UNARY) if template is None else template
    length = len(tokens)
    rows = [[featurize_clique(tokens, CliqueAssignment(j, (s,)), (template,), dimension) for s in range(K)]
            for j in range(length)]
    width = max([len(fv) for row in rows for fv in row], default=0)
    index = np.zeros((length, K, width), dtype=np.int64)
    value = np.zeros((length, K, width))
    for j, row in enumerate(rows):
        for s, fv in enumerate(row):
            index[j, s, :len(fv)] = fv.indices
            value[j, s, :len(fv)] = fv.values
    return SequenceFeatures(index, value, K, dimension)


def unary_table(weights: np.ndarray, feats: SequenceFeatures) -> np.ndarray:
    """``U[j, s]``: score of the unary clique (j, s), same op order as ``FeatureVector.dot``."""
    acc = np.zeros(feats.index.shape[:2])
    if len(weights) == 0:
        return acc
    for t in range(feats.index.shape[2]):
        acc = acc + weights[feats.index[:, :, t]] * feats.value[:, :, t]
    return acc


@lru_cache(maxsize=256)
def ngram_index_table(template: FeatureTemplate, K: int, dimension: int) -> np.ndarray:
    """Feature index of every k-gram, indexed by its base-K code (first state most significant)."""
    k = template.order
    codes = np.arange(K ** k, dtype=np.int64)
    digits = np.stack([(codes // K ** (k - 1 - t)) % K for t in range(k)], axis=1)
    out = _fold_array(template, _ngram_raw_hash_array(digits), dimension)
    out.setflags(write=False)
    return out


def ngram_tables(model: LinearModel) -> dict[int, np.ndarray]:
    """``{k: T_k}`` with ``T_k[code]`` the score of the k-gram with that code."""
    return {k: model.weights[ngram_index_table(model.template(NGRAM, k), model.K, model.dimension)] * 1.0
            for k in model.ngram_orders}


def encode(states, K: int) -> int:
    code = 0
    for s in states:
        code = code * K + int(s)
    return code


def decode(code: int, K: int, order: int) -> tuple:
    out = []
    for _ in range(order):
        out.append(code % K)
        code //= K
    return tuple(reversed(out))
