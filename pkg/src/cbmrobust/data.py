"""Dataset generation, CUB-200-2011 attribute ingestion, and text serialization.

File formats are line-oriented text with a `format_version: 1` header;
floats are rendered with 17 significant digits so round-trips are
bit-exact.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ConceptVector, Dataset, LabeledSample, LinearConceptPredictor, LinearHead
from .errors import DataFormatError, IngestError, ParameterError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CUB_NUM_ATTRIBUTES = 312
DEFAULT_CUB_CLASS_IDS = tuple(range(1, 16))


def fmt(v: float) -> str:
    return f"{float(v):.17g}"


@dataclass(frozen=True)
class SyntheticConfig:
    """Prototype-based generator: one binary concept pattern per class,
    per-sample bits agree with the prototype with probability `sharpness`,
    and features are a fixed random linear image of the concepts plus noise."""

    num_concepts: int = 20
    num_classes: int = 5
    num_features: int = 32
    n_per_class: int = 100
    sharpness: float = 0.9
    feature_noise_std: float = 0.05
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if min(self.num_concepts, self.num_classes, self.num_features, self.n_per_class) < 1:
            raise ParameterError("dimensions and n_per_class must be >= 1")
        if not 0.5 < self.sharpness <= 1.0:
            raise ParameterError("sharpness must lie in (0.5, 1]")
        if self.feature_noise_std < 0:
            raise ParameterError("feature_noise_std must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")


def synth_generate(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Deterministic synthetic CBM data; returns (train, test) split per class."""
    rng = np.random.default_rng(cfg.seed)
    prototypes = (rng.random((cfg.num_classes, cfg.num_concepts)) < 0.5).astype(np.float64)
    mix = rng.normal(0.0, 1.0 / math.sqrt(cfg.num_concepts),
                     size=(cfg.num_features, cfg.num_concepts))

    train_samples: list[LabeledSample] = []
    test_samples: list[LabeledSample] = []
    n_train = int(round(cfg.train_fraction * cfg.n_per_class))
    n_train = min(max(n_train, 1), cfg.n_per_class - 1) if cfg.n_per_class > 1 else 1
    for label in range(cfg.num_classes):
        flips = rng.random((cfg.n_per_class, cfg.num_concepts)) >= cfg.sharpness
        concepts = np.abs(prototypes[label] - flips.astype(np.float64))
        noise = rng.normal(0.0, 1.0, size=(cfg.n_per_class, cfg.num_features))
        feats = concepts @ mix.T + cfg.feature_noise_std * noise
        for i in range(cfg.n_per_class):
            sample = LabeledSample(
                concepts=ConceptVector(concepts[i]), label=label, features=feats[i]
            )
            (train_samples if i < n_train else test_samples).append(sample)

    def build(samples):
        return Dataset(
            samples=tuple(samples),
            num_concepts=cfg.num_concepts,
            num_classes=cfg.num_classes,
            num_features=cfg.num_features,
            provenance="synthetic",
        )

    return build(train_samples), build(test_samples)


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded stratified split; every class keeps at least one training sample."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        members = members[rng.permutation(members.size)]
        cut = int(round(train_fraction * members.size))
        cut = min(max(cut, 1), members.size)
        train_idx.extend(members[:cut])
        test_idx.extend(members[cut:])

    def build(indices):
        return Dataset(
            samples=tuple(dataset.samples[i] for i in sorted(indices)),
            num_concepts=dataset.num_concepts,
            num_classes=dataset.num_classes,
            num_features=dataset.num_features,
            provenance=dataset.provenance,
        )

    return build(train_idx), build(test_idx)


# ---------------------------------------------------------------------------
# CUB-200-2011 attribute ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CubIngestConfig:
    root_path: str
    class_ids: tuple[int, ...] = DEFAULT_CUB_CLASS_IDS
    binarize_rule: str = "is_present"
    train_fraction: float = 0.8

    def __post_init__(self):
        ids = tuple(int(i) for i in self.class_ids)
        if not ids:
            raise ParameterError("class_ids must be non-empty")
        if any(not 1 <= i <= 200 for i in ids):
            raise ParameterError("class_ids must lie in [1, 200]")
        if len(set(ids)) != len(ids):
            raise ParameterError("class_ids must be unique")
        if self.binarize_rule != "is_present":
            raise ParameterError(f"unknown binarize rule {self.binarize_rule!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")
        object.__setattr__(self, "class_ids", ids)


def _require_file(root: Path, rel: str) -> Path:
    path = root / rel
    if not path.is_file():
        raise IngestError(f"missing required file: {path}")
    return path


def cub_ingest(cfg: CubIngestConfig) -> Dataset:
    """Concept-only dataset from the CUB attribute annotation files.

    Each selected image becomes one sample with 312 binary concept values
    (is_present taken at face value; certainty ignored) and a label equal
    to the class position in cfg.class_ids. Samples are sorted by image id
    so row order in the raw files does not matter. Malformed rows are
    counted and logged; an image with an attribute count other than 312 is
    an integrity error.
    """
    root = Path(cfg.root_path)
    if not root.is_dir():
        raise IngestError(f"CUB root is not a directory: {root}")
    attr_path = _require_file(root, os.path.join("attributes", "image_attribute_labels.txt"))
    labels_path = _require_file(root, "image_class_labels.txt")
    _require_file(root, "classes.txt")
    _require_file(root, "train_test_split.txt")

    class_pos = {cid: i for i, cid in enumerate(cfg.class_ids)}
    image_class: dict[int, int] = {}
    malformed = 0
    with open(labels_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            try:
                image_id, class_id = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                malformed += 1
                continue
            image_class[image_id] = class_id

    selected = {img for img, cid in image_class.items() if cid in class_pos}
    attributes: dict[int, dict[int, float]] = {img: {} for img in selected}
    with open(attr_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            try:
                image_id, attr_id, present = int(parts[0]), int(parts[1]), int(parts[2])
            except (ValueError, IndexError):
                malformed += 1
                continue
            if image_id in selected:
                attributes[image_id][attr_id] = 1.0 if present else 0.0

    if malformed:
        log.warning("cub_ingest: skipped %d malformed row(s)", malformed)

    samples = []
    for image_id in sorted(selected):
        attrs = attributes[image_id]
        if len(attrs) != CUB_NUM_ATTRIBUTES:
            raise IngestError(
                f"image {image_id} has {len(attrs)} attribute rows, expected {CUB_NUM_ATTRIBUTES}"
            )
        values = np.array([attrs[a] for a in sorted(attrs)], dtype=np.float64)
        samples.append(
            LabeledSample(
                concepts=ConceptVector(values),
                label=class_pos[image_class[image_id]],
            )
        )
    if not samples:
        raise IngestError("no images matched the requested class ids")
    return Dataset(
        samples=tuple(samples),
        num_concepts=CUB_NUM_ATTRIBUTES,
        num_classes=len(cfg.class_ids),
        num_features=0,
        provenance="cub",
    )


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def _vector_text(values) -> str:
    return " ".join(fmt(v) for v in np.asarray(values, dtype=np.float64))


def dataset_save(path, dataset: Dataset) -> None:
    lines = [
        "# concept dataset",
        f"format_version: {FORMAT_VERSION}",
        f"provenance: {dataset.provenance}",
        f"num_concepts: {dataset.num_concepts}",
        f"num_classes: {dataset.num_classes}",
        f"num_features: {dataset.num_features}",
        f"num_samples: {len(dataset)}",
        "# sample rows: label | features | concepts",
    ]
    for s in dataset.samples:
        feats = _vector_text(s.features) if s.features is not None else ""
        lines.append(f"{s.label} | {feats} | {_vector_text(s.concepts.values)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(lines: list[tuple[int, str]], keys: list[str]) -> dict[str, str]:
    header = {}
    for lineno, text in lines:
        if ":" not in text:
            raise DataFormatError(f"line {lineno}: expected 'key: value', got {text!r}")
        key, _, value = text.partition(":")
        header[key.strip()] = value.strip()
    for key in keys:
        if key not in header:
            raise DataFormatError(f"missing header field {key!r}")
    return header


def _float_field(text: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise DataFormatError(f"line {lineno}: bad float {text!r}") from exc


def dataset_load(path) -> Dataset:
    raw = Path(path).read_text().splitlines()
    numbered = [
        (i + 1, line.strip()) for i, line in enumerate(raw)
        if line.strip() and not line.strip().startswith("#")
    ]
    n_header = 0
    while n_header < len(numbered) and "|" not in numbered[n_header][1]:
        n_header += 1
    header = _parse_header(numbered[:n_header], [
        "format_version", "provenance", "num_concepts", "num_classes",
        "num_features", "num_samples",
    ])
    if header["format_version"] != str(FORMAT_VERSION):
        raise DataFormatError(f"unsupported format_version {header['format_version']!r}")
    try:
        k = int(header["num_concepts"])
        c = int(header["num_classes"])
        d = int(header["num_features"])
        n = int(header["num_samples"])
    except ValueError as exc:
        raise DataFormatError(f"non-integer header field: {exc}") from exc

    body = numbered[n_header:]
    if len(body) != n:
        raise DataFormatError(
            f"expected {n} sample rows, found {len(body)}"
            + (f" (last line {body[-1][0]})" if body else "")
        )
    samples = []
    for lineno, text in body:
        parts = text.split("|")
        if len(parts) != 3:
            raise DataFormatError(f"line {lineno}: expected 'label | features | concepts'")
        try:
            label = int(parts[0].strip())
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: bad label {parts[0].strip()!r}") from exc
        feat_fields = parts[1].split()
        conc_fields = parts[2].split()
        if len(feat_fields) != d:
            raise DataFormatError(f"line {lineno}: expected {d} feature values, got {len(feat_fields)}")
        if len(conc_fields) != k:
            raise DataFormatError(f"line {lineno}: expected {k} concept values, got {len(conc_fields)}")
        features = (
            np.array([_float_field(f, lineno) for f in feat_fields]) if d > 0 else None
        )
        concepts = np.array([_float_field(f, lineno) for f in conc_fields])
        samples.append(LabeledSample(concepts=ConceptVector(concepts), label=label, features=features))
    return Dataset(
        samples=tuple(samples),
        num_concepts=k,
        num_classes=c,
        num_features=d,
        provenance=header["provenance"],
    )


def _matrix_lines(mat: np.ndarray) -> list[str]:
    return [_vector_text(row) for row in np.atleast_2d(mat)]


def model_save(path, head: LinearHead,
               predictor: Optional[LinearConceptPredictor] = None,
               lambda_s: Optional[float] = None) -> None:
    """Checkpoint a head and (optionally) a concept predictor.

    lambda_s records the stability weight the head was trained with so
    evaluation reports can carry it; omitted when unknown.
    """
    lines = [
        "# model checkpoint",
        f"format_version: {FORMAT_VERSION}",
        f"lambda_s: {fmt(lambda_s)}" if lambda_s is not None else "lambda_s: none",
        f"head_classes: {head.num_classes}",
        f"head_concepts: {head.num_concepts}",
    ]
    if head.class_names is not None:
        bad = [n for n in head.class_names if "," in n or "\n" in n]
        if bad:
            raise ParameterError(f"class names may not contain commas/newlines: {bad[0]!r}")
        lines.append("head_class_names: " + ",".join(head.class_names))
    lines.append("head_weights:")
    lines.extend(_matrix_lines(head.weights))
    lines.append("head_bias:")
    lines.append(_vector_text(head.bias))
    if predictor is not None:
        lines.append(f"predictor_concepts: {predictor.num_concepts}")
        lines.append(f"predictor_features: {predictor.num_features}")
        lines.append("predictor_weights:")
        lines.extend(_matrix_lines(predictor.weights))
        lines.append("predictor_bias:")
        lines.append(_vector_text(predictor.bias))
    Path(path).write_text("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        raw = Path(path).read_text().splitlines()
        self.lines = [
            (i + 1, line.strip()) for i, line in enumerate(raw)
            if line.strip() and not line.strip().startswith("#")
        ]
        self.pos = 0

    def peek(self) -> Optional[tuple[int, str]]:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self, expect: Optional[str] = None) -> tuple[int, str]:
        if self.pos >= len(self.lines):
            raise DataFormatError("unexpected end of file" + (f", expected {expect!r}" if expect else ""))
        item = self.lines[self.pos]
        self.pos += 1
        return item

    def key_value(self, key: str) -> str:
        lineno, text = self.next(expect=f"{key}: ...")
        if not text.startswith(key + ":"):
            raise DataFormatError(f"line {lineno}: expected {key!r} header, got {text!r}")
        return text.partition(":")[2].strip()

    def matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        out = np.empty((rows, cols))
        for r in range(rows):
            lineno, text = self.next(expect=f"{what} row {r}")
            fields = text.split()
            if len(fields) != cols:
                raise DataFormatError(
                    f"line {lineno}: {what} row {r} has {len(fields)} values, expected {cols}"
                )
            out[r] = [_float_field(f, lineno) for f in fields]
        return out


def model_load(path) -> tuple[LinearHead, Optional[LinearConceptPredictor], Optional[float]]:
    """Load a checkpoint; returns (head, predictor-or-None, lambda_s-or-None)."""
    reader = _LineReader(path)
    if reader.key_value("format_version") != str(FORMAT_VERSION):
        raise DataFormatError("unsupported checkpoint format_version")
    lam_text = reader.key_value("lambda_s")
    lambda_s = None if lam_text == "none" else float(lam_text)
    try:
        c = int(reader.key_value("head_classes"))
        k = int(reader.key_value("head_concepts"))
    except ValueError as exc:
        raise DataFormatError(f"bad dimension header: {exc}") from exc
    class_names = None
    peeked = reader.peek()
    if peeked is not None and peeked[1].startswith("head_class_names:"):
        class_names = tuple(reader.key_value("head_class_names").split(","))
    if reader.key_value("head_weights") != "":
        raise DataFormatError("head_weights header must not carry a value")
    weights = reader.matrix(c, k, "head weight")
    if reader.key_value("head_bias") != "":
        raise DataFormatError("head_bias header must not carry a value")
    bias = reader.matrix(1, c, "head bias")[0]
    head = LinearHead(weights=weights, bias=bias, class_names=class_names)

    predictor = None
    if reader.peek() is not None:
        try:
            pk = int(reader.key_value("predictor_concepts"))
            pd = int(reader.key_value("predictor_features"))
        except ValueError as exc:
            raise DataFormatError(f"bad predictor dimension header: {exc}") from exc
        if pk != k:
            raise DataFormatError(f"predictor outputs {pk} concepts but head consumes {k}")
        reader.key_value("predictor_weights")
        p_weights = reader.matrix(pk, pd, "predictor weight")
        reader.key_value("predictor_bias")
        p_bias = reader.matrix(1, pk, "predictor bias")[0]
        predictor = LinearConceptPredictor(weights=p_weights, bias=p_bias)
    return head, predictor, lambda_s
