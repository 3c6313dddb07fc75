"""Domain types and numerical primitives for concept-bottleneck heads.

Everything here is a pure function of its inputs; the dataclasses are
frozen and safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ParameterError, ShapeError

ACTIVATIONS = ("relu", "sigmoid", "identity")

# Singular values below RCOND * sigma_max are treated as zero when inverting.
DEFAULT_RCOND = 1e-10


def as_vector(x) -> np.ndarray:
    """Coerce a ConceptVector / sequence / ndarray to a 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class ConceptVector:
    """A point in concept space: K finite activations.

    Ground-truth vectors live in [0,1]^K; perturbed vectors may leave the
    box, in which case `clamped` records whether clamping was applied
    before evaluation.
    """

    values: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        arr = as_vector(self.values)
        if arr.size == 0:
            raise ShapeError("concept vector must have at least one entry")
        _require_finite(arr, "concept vector")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def in_unit_range(self, atol: float = 0.0) -> bool:
        return bool(np.all(self.values >= -atol) and np.all(self.values <= 1.0 + atol))


@dataclass(frozen=True)
class LinearHead:
    """Linear concept-to-class map: logits = weights @ c + bias."""

    weights: np.ndarray  # (num_classes, num_concepts)
    bias: np.ndarray  # (num_classes,)
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {w.shape}")
        if b.ndim != 1 or b.size != w.shape[0]:
            raise ShapeError(f"bias shape {b.shape} does not match weights {w.shape}")
        if w.shape[0] < 2:
            raise ShapeError("a head needs at least two classes")
        if w.shape[1] < 1:
            raise ShapeError("a head needs at least one concept input")
        _require_finite(w, "head weights")
        _require_finite(b, "head bias")
        if self.class_names is not None:
            names = tuple(str(n) for n in self.class_names)
            if len(names) != w.shape[0]:
                raise ShapeError("class_names length must equal the class count")
            object.__setattr__(self, "class_names", names)
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_concepts(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class MlpLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.size != w.shape[0]:
            raise ShapeError(f"layer shapes inconsistent: weights {w.shape}, bias {b.shape}")
        _require_finite(w, "layer weights")
        _require_finite(b, "layer bias")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class MlpHead:
    """Stacked affine+activation layers mapping concepts to class logits.

    The final layer must use the identity activation so outputs are logits.
    """

    layers: tuple[MlpLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("an MLP head needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.weights.shape} -> {nxt.weights.shape}"
                )
        if layers[-1].activation != "identity":
            raise ParameterError("final layer activation must be identity (logits)")
        if layers[-1].weights.shape[0] < 2:
            raise ShapeError("a head needs at least two classes")
        object.__setattr__(self, "layers", layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def num_concepts(self) -> int:
        return self.layers[0].weights.shape[1]


@dataclass(frozen=True)
class LinearConceptPredictor:
    """Features-to-concepts map: c = sigmoid(weights @ x + bias), in (0,1)^K."""

    weights: np.ndarray  # (num_concepts, num_features)
    bias: np.ndarray  # (num_concepts,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.size != w.shape[0]:
            raise ShapeError(f"predictor shapes inconsistent: weights {w.shape}, bias {b.shape}")
        _require_finite(w, "predictor weights")
        _require_finite(b, "predictor bias")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_concepts(self) -> int:
        return self.weights.shape[0]

    @property
    def num_features(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class LabeledSample:
    """One supervised example: optional input features, ground-truth concepts, class label."""

    concepts: ConceptVector
    label: int
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.label) != self.label or self.label < 0:
            raise ParameterError(f"label must be a non-negative integer, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))
        if self.features is not None:
            f = as_vector(self.features)
            _require_finite(f, "sample features")
            f.setflags(write=False)
            object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class Dataset:
    """A consistent collection of labeled samples plus dimension metadata.

    num_features == 0 marks a concept-only dataset (no input features).
    """

    samples: tuple[LabeledSample, ...]
    num_concepts: int
    num_classes: int
    num_features: int = 0
    provenance: str = "synthetic"

    def __post_init__(self):
        samples = tuple(self.samples)
        if self.num_concepts < 1 or self.num_classes < 2:
            raise ShapeError("dataset needs num_concepts >= 1 and num_classes >= 2")
        if self.provenance not in ("synthetic", "cub", "file"):
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        for i, s in enumerate(samples):
            if len(s.concepts) != self.num_concepts:
                raise ShapeError(f"sample {i}: concept length {len(s.concepts)} != {self.num_concepts}")
            if s.label >= self.num_classes:
                raise ShapeError(f"sample {i}: label {s.label} >= num_classes {self.num_classes}")
            if self.num_features == 0:
                if s.features is not None:
                    raise ShapeError(f"sample {i}: features present in a concept-only dataset")
            elif s.features is None or s.features.size != self.num_features:
                raise ShapeError(f"sample {i}: feature length does not match num_features")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def concept_matrix(self) -> np.ndarray:
        return np.stack([s.concepts.values for s in self.samples])

    def feature_matrix(self) -> np.ndarray:
        if self.num_features == 0:
            raise ShapeError("dataset has no features")
        return np.stack([s.features for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# numerical primitives
# ---------------------------------------------------------------------------


def logits(head: LinearHead, c) -> np.ndarray:
    """Class logits weights @ c + bias."""
    vec = as_vector(c)
    if vec.size != head.num_concepts:
        raise ShapeError(f"concept length {vec.size} != head input dim {head.num_concepts}")
    return head.weights @ vec + head.bias


def predict(head: LinearHead, c) -> int:
    """Argmax class index; ties go to the lowest index."""
    return int(np.argmax(logits(head, c)))


def pseudoinverse(a, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below rcond * sigma_max are treated as exact zeros, so
    rank-deficient inputs stay well behaved.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    _require_finite(arr, "matrix")
    if rcond <= 0:
        raise ParameterError("rcond must be positive")
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((arr.shape[1], arr.shape[0]))
    inv = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def spectral_norm(a) -> float:
    """Largest singular value of a matrix."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    _require_finite(arr, "matrix")
    return float(np.linalg.svd(arr, compute_uv=False)[0])


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    raise ParameterError(f"unknown activation {activation!r}")


def sigmoid(z):
    # Split by sign to avoid overflow in exp for large |z|.
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(head: MlpHead, c) -> np.ndarray:
    """Evaluate the layered head; returns class logits."""
    vec = as_vector(c)
    if vec.size != head.num_concepts:
        raise ShapeError(f"concept length {vec.size} != head input dim {head.num_concepts}")
    out = vec
    for layer in head.layers:
        out = _activate(layer.weights @ out + layer.bias, layer.activation)
    return out


def mlp_predict(head: MlpHead, c) -> int:
    return int(np.argmax(mlp_forward(head, c)))


def mlp_jacobian(head: MlpHead, c, step: float = 1e-5) -> np.ndarray:
    """Jacobian of the head at c via central finite differences.

    Exact for a single identity-activation layer up to rounding; for
    nonlinear heads this is the local linear model used by iterative
    attacks.
    """
    if step <= 0:
        raise ParameterError("finite-difference step must be positive")
    vec = as_vector(c)
    jac = np.empty((head.num_classes, vec.size))
    for k in range(vec.size):
        bumped = vec.copy()
        bumped[k] = vec[k] + step
        hi = mlp_forward(head, bumped)
        bumped[k] = vec[k] - step
        lo = mlp_forward(head, bumped)
        jac[:, k] = (hi - lo) / (2.0 * step)
    return jac


def linear_head_as_mlp(head: LinearHead) -> MlpHead:
    """Embed a linear head as a single identity-activation layer."""
    return MlpHead(layers=(MlpLayer(head.weights, head.bias, "identity"),))


def predictor_forward(predictor: LinearConceptPredictor, x) -> np.ndarray:
    """Concept activations sigmoid(weights @ x + bias)."""
    vec = as_vector(x)
    if vec.size != predictor.num_features:
        raise ShapeError(f"feature length {vec.size} != predictor input dim {predictor.num_features}")
    return sigmoid(predictor.weights @ vec + predictor.bias)
