"""Feature-archive I/O, few-shot sampling, grouping, and synthetic data.

An archive is a pair of files sharing a stem: ``<stem>.npy`` holding the
raw feature rows (NPY v1.0, little-endian float32, C order, 2-D) and
``<stem>.json`` holding the manifest (labels, class names, optional group
ids, split, source model). The array writer/reader below is deliberately
self-contained so malformed files are rejected with stable error names and
identical inputs always produce identical bytes; round-trip compatibility
with the standard numpy loader is covered by tests.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (FeatureMatrix, LabeledFeatures, LinearMap, PrototypeMatrix,
                   as_matrix, l2_normalize_rows, make_prototypes, make_rng,
                   normalize_rows)
from .errors import (ArchiveNotFound, BadMagic, HeaderParse, InsufficientSamples,
                     IoFailure, LabelOutOfRange, MissingGroups, RejectionOverflow,
                     ShapeMismatch)

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCRS = ("<f4", "<f8")
_SPLITS = ("train", "val", "test")

# ---------------------------------------------------------------------------
# NPY v1.0 array files
# ---------------------------------------------------------------------------


def write_npy(path, array: np.ndarray, descr: str = "<f4") -> None:
    """Write a 2-D real array as NPY v1.0.

    Header dict is rendered in fixed key order and space-padded so the data
    section starts on a 64-byte boundary; the header ends with a newline.
    Output bytes are a pure function of (array values, descr).
    """
    if descr not in _SUPPORTED_DESCRS:
        raise HeaderParse(f"unsupported descr {descr!r}")
    arr = np.ascontiguousarray(np.asarray(array), dtype=np.dtype(descr))
    if arr.ndim != 2:
        raise ShapeMismatch("archives store 2-D arrays")
    header = ("{'descr': '%s', 'fortran_order': False, 'shape': (%d, %d), }"
              % (descr, arr.shape[0], arr.shape[1]))
    base = len(_MAGIC) + 2 + 2  # magic + version + header-length field
    pad = 64 - ((base + len(header) + 1) % 64)
    if pad == 64:
        pad = 0
    header = header + " " * pad + "\n"
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(bytes((1, 0)))
            fh.write(struct.pack("<H", len(header)))
            fh.write(header.encode("latin1"))
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_npy(path) -> np.ndarray:
    """Read and validate an NPY v1.0 file written by :func:`write_npy`."""
    path = Path(path)
    if not path.exists():
        raise ArchiveNotFound(str(path))
    blob = path.read_bytes()
    if len(blob) < 10 or blob[:6] != _MAGIC:
        raise BadMagic(f"{path} is not an NPY file")
    if blob[6:8] != bytes((1, 0)):
        raise HeaderParse(f"unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    header_end = 10 + hlen
    if len(blob) < header_end:
        raise HeaderParse("truncated header")
    try:
        meta = ast.literal_eval(blob[10:header_end].decode("latin1"))
        descr = meta["descr"]
        fortran = meta["fortran_order"]
        shape = meta["shape"]
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise HeaderParse(f"malformed header in {path}") from exc
    if descr not in _SUPPORTED_DESCRS or fortran is not False:
        raise HeaderParse(f"unsupported layout descr={descr!r} fortran={fortran!r}")
    if not (isinstance(shape, tuple) and len(shape) == 2
            and all(isinstance(v, int) and v >= 0 for v in shape)):
        raise HeaderParse(f"expected a 2-D shape, got {shape!r}")
    expected = shape[0] * shape[1] * np.dtype(descr).itemsize
    payload = blob[header_end:]
    if len(payload) != expected:
        raise ShapeMismatch(
            f"payload is {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.dtype(descr)).reshape(shape).copy()


# ---------------------------------------------------------------------------
# manifests and archives
# ---------------------------------------------------------------------------


@dataclass
class ArchiveManifest:
    """Sidecar metadata for a feature archive."""

    labels: list[int] | None = None
    class_names: list[str] | None = None
    group_ids: list[int] | None = None
    split: str = "train"
    source_model: str = ""

    def __post_init__(self):
        if self.split not in _SPLITS:
            raise HeaderParse(f"split must be one of {_SPLITS}, got {self.split!r}")

    def as_dict(self) -> dict:
        doc = {}
        if self.labels is not None:
            doc["labels"] = [int(v) for v in self.labels]
        if self.class_names is not None:
            doc["class_names"] = list(self.class_names)
        if self.group_ids is not None:
            doc["group_ids"] = [int(v) for v in self.group_ids]
        doc["split"] = self.split
        doc["source_model"] = self.source_model
        return doc


def archive_paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix == ".npy":
        base = base.with_suffix("")
    return base.with_suffix(".npy"), base.with_suffix(".json")


def write_archive(features, manifest: ArchiveManifest, path) -> None:
    """Write the (float32 array, JSON manifest) pair; byte-deterministic."""
    arr = as_matrix(features)
    npy_path, json_path = archive_paths(path)
    n = arr.shape[0]
    if manifest.labels is not None and len(manifest.labels) != n:
        raise ShapeMismatch("manifest labels length must match the row count")
    if manifest.group_ids is not None and len(manifest.group_ids) != n:
        raise ShapeMismatch("manifest group_ids length must match the row count")
    write_npy(npy_path, arr, descr="<f4")
    try:
        json_path.write_text(json.dumps(manifest.as_dict(), indent=2) + "\n",
                             encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _parse_manifest(json_path: Path) -> ArchiveManifest:
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise HeaderParse(f"manifest {json_path} is not valid JSON") from exc
    if not isinstance(doc, dict):
        raise HeaderParse("manifest must be a JSON object")
    try:
        return ArchiveManifest(
            labels=doc.get("labels"),
            class_names=doc.get("class_names"),
            group_ids=doc.get("group_ids"),
            split=doc.get("split", "train"),
            source_model=doc.get("source_model", ""),
        )
    except (TypeError, ValueError) as exc:
        raise HeaderParse(f"manifest {json_path} is malformed") from exc


def read_archive(path):
    """Load an archive: widen to float64, l2-normalize, attach metadata.

    Returns (LabeledFeatures, manifest) when the manifest carries labels,
    otherwise (FeatureMatrix, manifest).
    """
    npy_path, json_path = archive_paths(path)
    if not npy_path.exists() or not json_path.exists():
        raise ArchiveNotFound(f"missing {npy_path} or {json_path}")
    raw = read_npy(npy_path).astype(np.float64)
    manifest = _parse_manifest(json_path)
    n = raw.shape[0]
    if manifest.labels is not None and len(manifest.labels) != n:
        raise ShapeMismatch("manifest labels length does not match the array")
    if manifest.group_ids is not None and len(manifest.group_ids) != n:
        raise ShapeMismatch("manifest group_ids length does not match the array")
    if manifest.labels is not None:
        labels = np.asarray(manifest.labels, dtype=np.int64)
        if labels.size and labels.min() < 0:
            raise LabelOutOfRange("negative label")
        if manifest.class_names is not None and labels.size \
                and labels.max() >= len(manifest.class_names):
            raise LabelOutOfRange(
                f"label {int(labels.max())} outside {len(manifest.class_names)} classes")
    features = l2_normalize_rows(raw, group_ids=manifest.group_ids)
    if manifest.labels is not None:
        return LabeledFeatures(features, np.asarray(manifest.labels)), manifest
    return features, manifest


def read_prototypes(path) -> PrototypeMatrix:
    """Load a prototype archive (C rows plus class_names in the manifest)."""
    npy_path, json_path = archive_paths(path)
    if not npy_path.exists() or not json_path.exists():
        raise ArchiveNotFound(f"missing {npy_path} or {json_path}")
    raw = read_npy(npy_path).astype(np.float64)
    manifest = _parse_manifest(json_path)
    if manifest.class_names is None:
        raise HeaderParse("prototype archives must carry class_names")
    return make_prototypes(raw, manifest.class_names)


# ---------------------------------------------------------------------------
# sampling and grouping
# ---------------------------------------------------------------------------


def few_shot_sample(data: LabeledFeatures, shots: int,
                    rng: np.random.Generator) -> LabeledFeatures:
    """Draw exactly ``shots`` rows per class without replacement.

    Output rows are ordered by (class, draw order) and are identical for
    identical seeds.
    """
    classes = np.unique(data.labels)
    rows = []
    labels = []
    for cls in classes:
        idx = np.flatnonzero(data.labels == cls)
        if len(idx) < shots:
            raise InsufficientSamples(int(cls),
                                      f"class {cls} has {len(idx)} < {shots} samples")
        chosen = idx[rng.permutation(len(idx))[:shots]]
        rows.append(data.features.data[chosen])
        labels.append(np.full(shots, cls, dtype=np.int64))
    return LabeledFeatures(FeatureMatrix(np.vstack(rows)), np.concatenate(labels))


def group_aggregate(x: FeatureMatrix, mode: str) -> FeatureMatrix:
    """Reduce crop/frame groups: elementwise max or mean then renormalize.

    ``expand`` keeps every row as its own sample. Groups are emitted in
    first-occurrence order.
    """
    if mode == "expand":
        return x
    if mode not in ("max", "mean"):
        raise ShapeMismatch(f"unknown aggregation mode {mode!r}")
    if x.group_ids is None:
        raise MissingGroups(f"mode {mode!r} requires group_ids")
    _, first_pos, inverse = np.unique(x.group_ids, return_index=True,
                                      return_inverse=True)
    order = np.argsort(np.argsort(first_pos))  # unique-id slot -> output slot
    n_groups = len(first_pos)
    out = np.full((n_groups, x.dim), -np.inf) if mode == "max" \
        else np.zeros((n_groups, x.dim))
    counts = np.zeros(n_groups)
    for row, slot in zip(x.data, order[inverse]):
        if mode == "max":
            np.maximum(out[slot], row, out=out[slot])
        else:
            out[slot] += row
        counts[slot] += 1
    if mode == "mean":
        out /= counts[:, None]
    return l2_normalize_rows(out)


def aggregate_labels(labels: np.ndarray, group_ids: np.ndarray) -> np.ndarray:
    """One label per group, validated to be constant within each group."""
    labels = np.asarray(labels, dtype=np.int64)
    group_ids = np.asarray(group_ids, dtype=np.int64)
    _, first_pos = np.unique(group_ids, return_index=True)
    first_pos = np.sort(first_pos)
    out = labels[first_pos]
    for slot, pos in enumerate(first_pos):
        members = labels[group_ids == group_ids[pos]]
        if (members != out[slot]).any():
            raise ShapeMismatch(f"group {group_ids[pos]} mixes labels")
    return out


def random_projection(x: np.ndarray, d_out: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Gaussian random projection with entries N(0, 1/d_out), rows renormalized."""
    if d_out < 1:
        raise ShapeMismatch("d_out must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    g = rng.normal(0.0, 1.0 / np.sqrt(d_out), size=(x.shape[1], d_out))
    return normalize_rows(x @ g)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

PROTOTYPE_MAX_COSINE = 0.8  # separation bound for rejection sampling


@dataclass
class SynthSpec:
    """Desk-scale verification instance: separated prototypes, a planted
    alignment map, and noisy per-class embeddings."""

    C: int
    d: int
    shots_per_class: int
    noise_std: float = 0.05
    planted_map: str = "random_orthogonal"
    seed: int = 0

    def __post_init__(self):
        if self.C < 2 or self.d < 2:
            raise ShapeMismatch("need C >= 2 and d >= 2")
        if self.shots_per_class < 1:
            raise ShapeMismatch("shots_per_class must be >= 1")
        if self.planted_map not in ("identity", "random_orthogonal", "random_invertible"):
            raise ShapeMismatch(f"unknown planted_map {self.planted_map!r}")


def _sample_prototypes(rng: np.random.Generator, c: int, d: int,
                       max_tries: int = 20000) -> np.ndarray:
    rows: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(float(v @ r) < PROTOTYPE_MAX_COSINE for r in rows):
            rows.append(v)
            if len(rows) == c:
                return np.asarray(rows)
    raise RejectionOverflow(
        f"could not place {c} prototypes in {d} dims under cos < {PROTOTYPE_MAX_COSINE}")


def _planted(rng: np.random.Generator, kind: str, d: int) -> LinearMap:
    if kind == "identity":
        return LinearMap(np.eye(d), kind="identity")
    if kind == "random_orthogonal":
        g = rng.standard_normal((d, d))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return LinearMap(q, kind="orthogonal")
    a = rng.standard_normal((d, d)) / np.sqrt(d) + np.eye(d)
    return LinearMap(a, kind="least_squares")


def _sample_features(rng: np.random.Generator, y: np.ndarray, planted: LinearMap,
                     shots: int, noise_std: float) -> LabeledFeatures:
    c, d = y.shape
    labels = np.repeat(np.arange(c), shots)
    # rows sit at y_label Q^{-1} so that x @ Q = y exactly at zero noise;
    # for orthogonal planted maps the inverse is just the transpose
    if planted.kind in ("identity", "orthogonal"):
        inv_q = planted.data.T
    else:
        inv_q = np.linalg.inv(planted.data)
    base = y[labels] @ inv_q
    noisy = base + noise_std * rng.standard_normal((c * shots, d)) if noise_std > 0 else base
    return LabeledFeatures(l2_normalize_rows(noisy), labels)


def synth_generate(spec: SynthSpec):
    """Generate (LabeledFeatures, PrototypeMatrix, planted LinearMap).

    Feature rows are normalize(y_label @ Q^{-T} + eps) so the planted map Q
    satisfies X Q ~= P Y; prototypes are rejection-sampled for pairwise
    cosine below the separation bound.
    """
    rng = make_rng(spec.seed)
    y = _sample_prototypes(rng, spec.C, spec.d)
    planted = _planted(rng, spec.planted_map, spec.d)
    data = _sample_features(rng, y, planted, spec.shots_per_class, spec.noise_std)
    names = [f"class_{i:03d}" for i in range(spec.C)]
    return data, PrototypeMatrix(y, names), planted


def synth_split(spec: SynthSpec, test_shots: int):
    """Train/test pair sharing prototypes and the planted map.

    The test set continues the same seeded stream, so (spec, test_shots)
    fully determines both splits.
    """
    rng = make_rng(spec.seed)
    y = _sample_prototypes(rng, spec.C, spec.d)
    planted = _planted(rng, spec.planted_map, spec.d)
    train = _sample_features(rng, y, planted, spec.shots_per_class, spec.noise_std)
    test = _sample_features(rng, y, planted, test_shots, spec.noise_std)
    names = [f"class_{i:03d}" for i in range(spec.C)]
    return train, test, PrototypeMatrix(y, names), planted


# ---------------------------------------------------------------------------
# beta cross-validation sweep
# ---------------------------------------------------------------------------

BETA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass
class SweepFoldRow:
    beta: float
    fold: int
    val_acc: float


def _fold_splits(labels: np.ndarray, folds: int, val_frac: float,
                 train_frac: float, rng: np.random.Generator):
    """Per-fold stratified (val, train) index pairs; the remainder is unused.

    Each fold partitions every class independently: the first val_frac of a
    seeded permutation goes to validation, the next train_frac to training.
    """
    classes = np.unique(labels)
    splits = []
    for _ in range(folds):
        val_idx = []
        train_idx = []
        for cls in classes:
            idx = np.flatnonzero(labels == cls)
            n_val = int(np.floor(val_frac * len(idx)))
            n_train = int(np.floor(train_frac * len(idx)))
            if n_val < 1 or n_train < 1:
                raise InsufficientSamples(
                    int(cls), f"class {cls}: {len(idx)} samples cannot honor "
                              f"a {val_frac:.0%}/{train_frac:.0%} split")
            perm = idx[rng.permutation(len(idx))]
            val_idx.append(perm[:n_val])
            train_idx.append(perm[n_val:n_val + n_train])
        splits.append((np.concatenate(val_idx), np.concatenate(train_idx)))
    return splits


def beta_sweep(data: LabeledFeatures, y: PrototypeMatrix, cfg,
               betas=BETA_GRID, folds: int = 3, val_frac: float = 0.2,
               train_frac: float = 0.7, tau: float = 0.01):
    """Cross-validate beta on seeded validation/train splits.

    For every beta in the grid and every fold, fits the closed-form stage
    plus refinement on the fold's train portion and scores top-1 on its
    validation portion. Fold membership is drawn once (seeded by cfg.seed)
    and shared across the whole grid. Returns (best beta, fold table); ties
    resolve to the smaller beta.
    """
    from .evaluate import classify, top1_accuracy
    from .pipeline import fit_supervised

    splits = _fold_splits(data.labels, folds, val_frac, train_frac,
                          make_rng(cfg.seed))
    betas = list(betas)
    table: list[SweepFoldRow] = []
    means = []
    for beta in betas:
        accs = []
        for fold, (val_idx, train_idx) in enumerate(splits):
            train = LabeledFeatures(FeatureMatrix(data.features.data[train_idx]),
                                    data.labels[train_idx])
            w, _, _ = fit_supervised(train.features, train.labels, y, beta, cfg)
            _, preds = classify(data.features.data[val_idx], w, y, tau)
            acc = top1_accuracy(preds, data.labels[val_idx])
            table.append(SweepFoldRow(beta=beta, fold=fold, val_acc=acc))
            accs.append(acc)
        means.append(float(np.mean(accs)))
    best = betas[int(np.argmax(means))]
    return best, table


def write_sweep_csv(table: list[SweepFoldRow], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "fold", "val_acc"])
        for row in table:
            writer.writerow([row.beta, row.fold, repr(row.val_acc)])
