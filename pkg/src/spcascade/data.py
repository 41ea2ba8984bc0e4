"""Datasets, synthetic generators and checkpoint files.

Sequence datasets are text: a ``#K=<int>`` header (plus optional ``#name=value``
metadata lines) and one example per line, tokens separated by tabs, each token
``label:key1,key2,...``.

Checkpoints are binary, little-endian::

    b"SPCK" | version u16 | kind u8 | dimension u64 | K u32 | order u32
    | meta_len u32 | meta (sorted-key JSON) | n_arrays u32 | (len u64 | f8 * len) ...
    | crc32 u32 of everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spcascade.lattice import SparseLattice, StateHierarchy
from spcascade.model import Example, FeatureTemplate, LinearModel


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


# -- sequence datasets --------------------------------------------------------

@dataclass
class SequenceDataset:
    examples: list
    K: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        for i, ex in enumerate(self.examples):
            if ex.labels is None or len(ex.labels) != len(ex.tokens):
                raise ValueError(f"example {i}: labels and tokens differ in length")
            if len(ex.labels) and (ex.labels.min() < 0 or ex.labels.max() >= self.K):
                raise ValueError(f"example {i}: label outside [0, {self.K})")

    def __len__(self):
        return len(self.examples)

    def __eq__(self, other):
        if not isinstance(other, SequenceDataset):
            return NotImplemented
        return (self.K == other.K and self.metadata == other.metadata and len(self) == len(other)
                and all(a.tokens == b.tokens and np.array_equal(a.labels, b.labels)
                        for a, b in zip(self.examples, other.examples)))


_BAD_KEY_CHARS = set(",\t\n\r")


def format_sequence_dataset(ds: SequenceDataset) -> str:
    lines = [f"#K={ds.K}"]
    for k in sorted(ds.metadata):
        v = str(ds.metadata[k])
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be written")
        lines.append(f"#{k}={v}")
    for ex in ds.examples:
        if len(ex) == 0:
            raise ValueError("empty examples cannot be written")
        toks = []
        for lab, keys in zip(ex.labels.tolist(), ex.tokens):
            for key in keys:
                if not key or _BAD_KEY_CHARS & set(key):
                    raise ValueError(f"feature key {key!r} is empty or contains a separator")
            toks.append(f"{lab}:{','.join(keys)}")
        lines.append("\t".join(toks))
    return "\n".join(lines) + "\n"


def parse_sequence_dataset(text: str) -> SequenceDataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#K="):
        raise ParseError(1, "missing '#K=<int>' header")
    try:
        K = int(lines[0][3:])
    except ValueError:
        raise ParseError(1, f"bad alphabet size {lines[0][3:]!r}") from None
    if K < 1:
        raise ParseError(1, "K must be positive")
    meta, examples = {}, []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            name, eq, value = line[1:].partition("=")
            if not eq:
                raise ParseError(n, "metadata lines look like '#name=value'")
            meta[name] = value
            continue
        tokens, labels = [], []
        for tok in line.split("\t"):
            lab, colon, keys = tok.partition(":")
            if not colon:
                raise ParseError(n, f"token {tok!r} has no ':'")
            try:
                lab = int(lab)
            except ValueError:
                raise ParseError(n, f"label {lab!r} is not an integer") from None
            if not 0 <= lab < K:
                raise ParseError(n, f"label {lab} outside [0, {K})")
            labels.append(lab)
            tokens.append(keys.split(",") if keys else [])
        examples.append(Example(tokens, labels))
    return SequenceDataset(examples, K, meta)


def read_sequence_dataset(path) -> SequenceDataset:
    return parse_sequence_dataset(Path(path).read_text(encoding="utf-8"))


def write_sequence_dataset(ds: SequenceDataset, path):
    Path(path).write_text(format_sequence_dataset(ds), encoding="utf-8")


# -- synthetic sequence data --------------------------------------------------

@dataclass
class HmmGenerator:
    """Order-d label chain with confusable emissions.

    ``trans[context_code]`` is the distribution of the next label given the previous
    d-1 labels (the first d-1 labels are uniform). A state emits one of its own words,
    or with probability ``noise`` a word shared with its partner state ``s ^ 1``.
    """

    order: int
    K: int
    trans: np.ndarray
    words_per_state: int
    noise: float

    def partner(self, s: int) -> int:
        p = s ^ 1
        return p if p < self.K else s

    def emit(self, s: int, rng) -> int:
        w = self.words_per_state
        if rng.random() < self.noise:
            return self.K * w + (min(s, self.partner(s)) // 2) * w + int(rng.integers(w))
        return s * w + int(rng.integers(w))

    def sample_labels(self, ell: int, rng) -> np.ndarray:
        y = np.zeros(ell, dtype=np.int64)
        for j in range(ell):
            if j < self.order - 1:
                y[j] = rng.integers(self.K)
            else:
                ctx = 0
                for s in y[j - self.order + 1:j]:
                    ctx = ctx * self.K + int(s)
                y[j] = rng.choice(self.K, p=self.trans[ctx])
        return y


def synth_hmm(order: int, K: int, n: int, length=(8, 14), weight_scale: float = 3.0, noise: float = 0.4,
              words_per_state: int = 3, seed: int = 0, generator: HmmGenerator | None = None,
              task_seed: int | None = None):
    """Sample ``n`` labeled sequences from a random order-``order`` chain.

    Returns ``(dataset, generator)``. Tokens carry ``bias`` and one ``w=<word>`` key.
    Pass ``generator`` to draw more data from the same chain (e.g. a test split). With
    ``task_seed`` the chain is drawn from that seed alone, so separate calls that share it
    sample the same task; otherwise it comes from ``seed``.
    """
    if order < 1 or K < 1 or n < 0:
        raise ValueError("order, K must be positive and n nonnegative")
    lo, hi = length
    if not 1 <= lo <= hi:
        raise ValueError("length range must satisfy 1 <= lo <= hi")
    if not 0 <= noise <= 1:
        raise ValueError("noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if generator is None:
        task_rng = rng if task_seed is None else np.random.default_rng(task_seed)
        logits = weight_scale * task_rng.standard_normal((K ** (order - 1), K))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        generator = HmmGenerator(order, K, p / p.sum(axis=1, keepdims=True), words_per_state, noise)
    g = generator
    examples = []
    for _ in range(n):
        y = g.sample_labels(int(rng.integers(lo, hi + 1)), rng)
        examples.append(Example([["bias", f"w={g.emit(s, rng)}"] for s in y.tolist()], y))
    meta = {"generator": "hmm", "order": str(g.order), "noise": str(g.noise), "seed": str(seed)}
    if task_seed is not None:
        meta["task_seed"] = str(task_seed)
    return SequenceDataset(examples, g.K, meta), g


# -- binary helpers ----------------------------------------------------------

MAGIC = b"SPCK"
VERSION = 1
KIND_MODEL = 1
KIND_CASCADE = 2
KIND_GRID = 3
_HEADER = struct.Struct("<4sHBQII")


def _pack(kind: int, dimension: int, K: int, order: int, meta: dict, arrays) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, kind, dimension, K, order), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack("<Q", a.size))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(data: bytes, kind: int):
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(data) < _HEADER.size + 4:
        raise ChecksumError("checkpoint is truncated")
    _, version, got_kind, dimension, K, order = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    if got_kind != kind:
        raise FormatError(f"checkpoint holds kind {got_kind}, expected {kind}")
    pos = _HEADER.size
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        (size,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        arrays.append(np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64))
        pos += 8 * size
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return dimension, K, order, meta, arrays


def _templates_meta(model: LinearModel):
    return [[t.kind, t.order] for t in model.templates]


def _templates_from(meta):
    return tuple(FeatureTemplate(kind, order) for kind, order in meta)


def model_to_bytes(model: LinearModel) -> bytes:
    return _pack(KIND_MODEL, model.dimension, model.K, model.order,
                 {"templates": _templates_meta(model)}, [model.weights])


def model_from_bytes(data: bytes) -> LinearModel:
    dimension, K, _, meta, arrays = _unpack(data, KIND_MODEL)
    return LinearModel(arrays[0], _templates_from(meta["templates"]), K)


def save_model(model: LinearModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> LinearModel:
    return model_from_bytes(Path(path).read_bytes())


def _metrics_meta(row):
    return None if row is None else {f: getattr(row, f) for f in row.FIELDS}


def cascade_to_bytes(cascade) -> bytes:
    stages = cascade.stages
    meta = {
        "K": cascade.K,
        "dropped": list(cascade.dropped),
        "has_final": cascade.final is not None,
        "stages": [{
            "alpha": st.alpha,
            "order": st.order,
            "K": st.model.K,
            "templates": _templates_meta(st.model),
            "label_map": st.label_map.tolist(),
            "refine": None if st.refine is None else [list(c) for c in st.refine.children],
            "metrics": _metrics_meta(st.metrics),
        } for st in stages],
    }
    last = stages[-1].model
    return _pack(KIND_CASCADE, last.dimension, cascade.K, last.order, meta, [st.model.weights for st in stages])


def cascade_from_bytes(data: bytes):
    from spcascade.training import CascadeLevel, MetricsRow, TrainedCascade

    _, K, _, meta, arrays = _unpack(data, KIND_CASCADE)
    stages = []
    for st, w in zip(meta["stages"], arrays):
        model = LinearModel(w, _templates_from(st["templates"]), st["K"])
        stages.append(CascadeLevel(
            model, st["alpha"], st["order"], np.asarray(st["label_map"], dtype=np.int64),
            None if st["refine"] is None else StateHierarchy(st["refine"]),
            None if st["metrics"] is None else MetricsRow(**st["metrics"])))
    final = stages.pop() if meta["has_final"] else None
    return TrainedCascade(stages, final, K, meta["dropped"])


def save_cascade(cascade, path):
    Path(path).write_bytes(cascade_to_bytes(cascade))


def load_cascade(path):
    return cascade_from_bytes(Path(path).read_bytes())


# -- lattices ----------------------------------------------------------------

LATTICE_MAGIC = b"SPLT"


def _put_varint(out: bytearray, v: int):
    if v < 0:
        raise ValueError("varints are unsigned")
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def _get_varint(data: bytes, pos: int) -> tuple[int, int]:
    shift = v = 0
    while True:
        if pos >= len(data):
            raise ChecksumError("lattice data is truncated")
        b = data[pos]
        pos += 1
        v |= (b & 0x7F) << shift
        if not b & 0x80:
            return v, pos
        shift += 7


def lattices_to_bytes(lattices) -> bytes:
    """Survivor lists per anchor as delta-coded varints."""
    out = bytearray(LATTICE_MAGIC)
    out += struct.pack("<H", VERSION)
    _put_varint(out, len(lattices))
    for lat in lattices:
        for v in (lat.length, lat.order, lat.K):
            _put_varint(out, v)
        for c in lat.codes:
            _put_varint(out, len(c))
            prev = 0
            for code in c.tolist():
                _put_varint(out, code - prev)
                prev = code
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def lattices_from_bytes(data: bytes) -> list[SparseLattice]:
    if data[:4] != LATTICE_MAGIC:
        raise FormatError("not a lattice file (bad magic)")
    if len(data) < 10:
        raise ChecksumError("lattice file is truncated")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise VersionError(f"lattice file version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("lattice file checksum mismatch")
    n, pos = _get_varint(body, 6)
    out = []
    for _ in range(n):
        length, pos = _get_varint(body, pos)
        order, pos = _get_varint(body, pos)
        K, pos = _get_varint(body, pos)
        codes = []
        for _ in range(length - order + 1):
            size, pos = _get_varint(body, pos)
            c, prev = [], 0
            for _ in range(size):
                delta, pos = _get_varint(body, pos)
                prev += delta
                c.append(prev)
            codes.append(c)
        out.append(SparseLattice(length, order, K, codes))
    return out


def save_lattices(lattices, path):
    Path(path).write_bytes(lattices_to_bytes(lattices))


def load_lattices(path) -> list[SparseLattice]:
    return lattices_from_bytes(Path(path).read_bytes())


# -- grids ---------------------------------------------------------------------

@dataclass
class GridInstance:
    """Grid potentials (log-space) with an optional planted truth."""

    model: object
    truth: np.ndarray | None = None

    def __post_init__(self):
        for a in (self.model.unary, self.model.horizontal, self.model.vertical):
            if not np.all(np.isfinite(a)):
                raise ValueError("grid potentials must be finite")


UNARY_FLOOR = 1e-12


def synth_grid(n: int, m: int, K: int, seed: int = 0) -> GridInstance:
    """Unary potentials ``u ~ U[0, 1]`` (used as ``log max(u, floor)``); pairwise
    potentials ``exp(-v)`` with ``v ~ U[-25, 25]``, i.e. log-pairwise ``-v``."""
    from spcascade.ensemble import GridModel

    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, (n, m, K))
    h = -rng.uniform(-25.0, 25.0, (n, m - 1, K, K))
    v = -rng.uniform(-25.0, 25.0, (n - 1, m, K, K))
    return GridInstance(GridModel(np.log(np.maximum(u, UNARY_FLOOR)), h, v))


@dataclass
class GridDataset:
    examples: list
    rows: int
    cols: int
    K: int
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)


def synth_grid_task(n: int, m: int, K: int, count: int, noise: float = 0.3, smooth: float = 0.8,
                    words_per_state: int = 2, seed: int = 0) -> GridDataset:
    """Labeled grids for coarse-to-fine training.

    Labels copy a random already-sampled neighbor (left or up) with probability
    ``smooth``, else are uniform. Each node emits ``bias`` and one word: its own with
    probability ``1 - noise``, otherwise one shared with the partner state ``s ^ 1``.
    """
    from spcascade.ensemble import GridExample

    rng = np.random.default_rng(seed)
    w = words_per_state
    examples = []
    for _ in range(count):
        y = np.zeros((n, m), dtype=np.int64)
        for i in range(n):
            for j in range(m):
                nbrs = ([y[i, j - 1]] if j else []) + ([y[i - 1, j]] if i else [])
                if nbrs and rng.random() < smooth:
                    y[i, j] = nbrs[int(rng.integers(len(nbrs)))]
                else:
                    y[i, j] = rng.integers(K)
        keys = []
        for i in range(n):
            row = []
            for j in range(m):
                s = int(y[i, j])
                partner = s ^ 1 if (s ^ 1) < K else s
                if rng.random() < noise:
                    word = K * w + (min(s, partner) // 2) * w + int(rng.integers(w))
                else:
                    word = s * w + int(rng.integers(w))
                row.append(["bias", f"w={word}"])
            keys.append(row)
        examples.append(GridExample(keys, y))
    meta = {"generator": "grid-task", "noise": str(noise), "smooth": str(smooth), "seed": str(seed)}
    return GridDataset(examples, n, m, K, meta)


def grid_instance_to_json(inst: GridInstance) -> dict:
    g = inst.model
    return {"kind": "grid-instance", "rows": g.rows, "cols": g.cols, "K": g.K,
            "unary": g.unary.tolist(), "horizontal": g.horizontal.tolist(), "vertical": g.vertical.tolist(),
            "truth": None if inst.truth is None else inst.truth.tolist()}


def grid_instance_from_json(obj: dict) -> GridInstance:
    from spcascade.ensemble import GridModel

    if obj.get("kind") != "grid-instance":
        raise FormatError("not a grid instance")
    n, m, K = obj["rows"], obj["cols"], obj["K"]
    g = GridModel(np.array(obj["unary"], dtype=np.float64).reshape(n, m, K),
                  np.array(obj["horizontal"], dtype=np.float64).reshape(n, m - 1, K, K),
                  np.array(obj["vertical"], dtype=np.float64).reshape(n - 1, m, K, K))
    truth = None if obj.get("truth") is None else np.array(obj["truth"], dtype=np.int64)
    return GridInstance(g, truth)


def save_grid_instance(inst: GridInstance, path):
    Path(path).write_text(json.dumps(grid_instance_to_json(inst), sort_keys=True), encoding="utf-8")


def load_grid_instance(path) -> GridInstance:
    return grid_instance_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_grid_dataset(ds: GridDataset, path):
    obj = {"kind": "grid-dataset", "rows": ds.rows, "cols": ds.cols, "K": ds.K, "metadata": ds.metadata,
           "examples": [{"keys": ex.keys, "labels": ex.labels.tolist()} for ex in ds.examples]}
    Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def read_grid_dataset(path) -> GridDataset:
    from spcascade.ensemble import GridExample

    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("kind") != "grid-dataset":
        raise FormatError(f"{path} is not a grid dataset")
    n, m, K = obj["rows"], obj["cols"], obj["K"]
    examples = []
    for i, e in enumerate(obj["examples"]):
        lab = np.array(e["labels"], dtype=np.int64)
        if lab.shape != (n, m) or len(e["keys"]) != n or any(len(r) != m for r in e["keys"]):
            raise ValueError(f"example {i}: shape differs from {n}x{m}")
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise ValueError(f"example {i}: label outside [0, {K})")
        examples.append(GridExample(e["keys"], lab))
    return GridDataset(examples, n, m, K, obj.get("metadata", {}))


def grid_cascade_to_bytes(cascade) -> bytes:
    dim = len(cascade.levels[0].thetas[0])
    meta = {"rows": cascade.rows, "cols": cascade.cols, "K": cascade.K, "dropped": list(cascade.dropped),
            "levels": [{"alpha": lv.alpha, "K": lv.K, "label_map": lv.label_map.tolist(),
                        "refine": None if lv.refine is None else [list(c) for c in lv.refine.children],
                        "n_subs": len(lv.thetas), "metrics": _metrics_meta(lv.metrics)}
                       for lv in cascade.levels]}
    arrays = [th for lv in cascade.levels for th in lv.thetas]
    return _pack(KIND_GRID, dim, cascade.K, 1, meta, arrays)


def grid_cascade_from_bytes(data: bytes):
    from spcascade.ensemble import GridCascade, GridLevel
    from spcascade.training import MetricsRow

    _, K, _, meta, arrays = _unpack(data, KIND_GRID)
    levels, k = [], 0
    for lv in meta["levels"]:
        thetas = arrays[k:k + lv["n_subs"]]
        k += lv["n_subs"]
        levels.append(GridLevel(thetas, lv["alpha"], np.asarray(lv["label_map"], dtype=np.int64), lv["K"],
                                None if lv["refine"] is None else StateHierarchy(lv["refine"]),
                                None if lv["metrics"] is None else MetricsRow(**lv["metrics"])))
    return GridCascade(levels, meta["rows"], meta["cols"], K, meta["dropped"])
