"""Synthetic class-conditional sources and labeled dataset containers.

A :class:`SyntheticSource` is a per-class mixture of isotropic Gaussians.
Each mixture component has a mean (in the input layout) and a covariance
scale ``s`` so that draws are ``mean + sqrt(s) * N(0, I)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, UnknownClass

FORMAT_VERSION = 1
DEFAULT_PER_CLASS = 200


@dataclass(frozen=True)
class ClassSpec:
    means: np.ndarray  # (n_components, *input_shape)
    scales: np.ndarray  # (n_components,)
    weights: np.ndarray  # (n_components,)

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "scales", np.atleast_1d(np.asarray(self.scales, dtype=np.float64)))
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, dtype=np.float64)))
        if not (len(self.means) == len(self.scales) == len(self.weights)):
            raise ValueError("means, scales and weights need one entry per mixture component")
        if np.any(self.scales <= 0):
            raise ValueError("covariance scales must be positive")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class SyntheticSource:
    classes: tuple
    input_shape: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        for spec in self.classes:
            if spec.means.shape[1:] != self.input_shape:
                raise ValueError(f"class mean shape {spec.means.shape[1:]} != input shape {self.input_shape}")

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def layout(self) -> str:
        return {1: "flat", 2: "tokens", 3: "image"}.get(len(self.input_shape), "tensor")


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    layout: str = "flat"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self):
        return len(self.y)

    def subset(self, classes) -> "LabeledDataset":
        keep = np.isin(self.y, list(classes))
        return LabeledDataset(self.x[keep], self.y[keep], self.class_count, self.layout)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(
            np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]), self.class_count, self.layout
        )


def gaussian_source(means, scale=1.0, seed=0) -> SyntheticSource:
    """One isotropic Gaussian per class; ``means`` has shape ``(classes, *input_shape)``."""
    means = np.asarray(means, dtype=np.float64)
    classes = [ClassSpec(m[None], [scale], [1.0]) for m in means]
    return SyntheticSource(tuple(classes), means.shape[1:], seed)


def blob_source(class_count, dim, separation=4.0, scale=1.0, components=1, seed=0) -> SyntheticSource:
    """Random well-separated Gaussian mixtures in ``dim`` dimensions."""
    rng = np.random.default_rng(seed)
    classes = []
    for _ in range(class_count):
        center = rng.standard_normal(dim)
        center *= separation / np.linalg.norm(center)
        offsets = rng.standard_normal((components, dim)) * (0.5 * separation / np.sqrt(dim))
        means = center + offsets
        classes.append(ClassSpec(means, np.full(components, scale), np.full(components, 1.0 / components)))
    return SyntheticSource(tuple(classes), (dim,), seed)


def pattern_source(class_count, shape, amplitude=1.0, scale=1.0, seed=0) -> SyntheticSource:
    """Class-specific smooth random patterns for image or token layouts."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count,) + tuple(shape))
    # cheap smoothing along the last two axes so conv filters see structure
    for ax in (-1, -2):
        means = (means + np.roll(means, 1, axis=ax) + np.roll(means, -1, axis=ax)) / 3.0
    means *= amplitude / means.reshape(class_count, -1).std(axis=1).reshape((-1,) + (1,) * len(shape))
    return gaussian_source(means, scale, seed)


def sample(source: SyntheticSource, n_per_class: int = DEFAULT_PER_CLASS, classes=None, seed=None) -> LabeledDataset:
    """Draw exactly ``n_per_class`` samples for each requested class.

    Determinism: the draws depend only on ``seed`` (default: the source's
    seed). Each class uses its own child stream, so a class's samples do not
    change when other classes are added to or removed from ``classes``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    wanted = range(source.class_count) if classes is None else sorted(set(int(c) for c in classes))
    for c in wanted:
        if not 0 <= c < source.class_count:
            raise UnknownClass(f"class {c} not in source with {source.class_count} classes")
    root = np.random.SeedSequence(source.seed if seed is None else seed)
    streams = root.spawn(source.class_count)
    xs, ys = [], []
    for c in wanted:
        spec = source.classes[c]
        rng = np.random.default_rng(streams[c])
        comp = rng.choice(len(spec.weights), size=n_per_class, p=spec.weights)
        noise = rng.standard_normal((n_per_class,) + source.input_shape)
        std = np.sqrt(spec.scales[comp]).reshape((-1,) + (1,) * len(source.input_shape))
        xs.append(spec.means[comp] + std * noise)
        ys.append(np.full(n_per_class, c))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), source.class_count, source.layout)


def degrade(source: SyntheticSource, noise_scale: float) -> SyntheticSource:
    """Source with every covariance scale multiplied by ``1 + noise_scale``."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if noise_scale == 0:
        return source
    classes = tuple(ClassSpec(c.means, c.scales * (1.0 + noise_scale), c.weights) for c in source.classes)
    return replace(source, classes=classes)


# --------------------------------------------------------------------- I/O


def dataset_to_dict(ds: LabeledDataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "layout": ds.layout,
        "input_shape": list(ds.x.shape[1:]),
        "class_count": int(ds.class_count),
        "samples": [{"x": [float(v) for v in x.ravel()], "y": int(y)} for x, y in zip(ds.x, ds.y)],
    }


def dataset_from_dict(doc: dict) -> LabeledDataset:
    try:
        if doc["version"] != FORMAT_VERSION:
            raise FormatError(f"dataset.version: unsupported version {doc['version']!r}")
        shape = tuple(doc["input_shape"])
        size = int(np.prod(shape))
        xs, ys = [], []
        for k, s in enumerate(doc["samples"]):
            if len(s["x"]) != size:
                raise FormatError(f"samples[{k}].x: expected {size} values, found {len(s['x'])}")
            xs.append(s["x"])
            ys.append(s["y"])
        x = np.asarray(xs, dtype=np.float64).reshape((len(xs),) + shape)
        return LabeledDataset(x, np.asarray(ys), int(doc["class_count"]), doc.get("layout", "flat"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"dataset: missing or malformed field {exc}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"dataset: {exc}") from None


def source_to_dict(src: SyntheticSource) -> dict:
    return {
        "version": FORMAT_VERSION,
        "input_shape": list(src.input_shape),
        "seed": int(src.seed),
        "classes": [
            {
                "means": [[float(v) for v in m.ravel()] for m in c.means],
                "scales": [float(s) for s in c.scales],
                "weights": [float(w) for w in c.weights],
            }
            for c in src.classes
        ],
    }


def source_from_dict(doc: dict) -> SyntheticSource:
    try:
        if doc["version"] != FORMAT_VERSION:
            raise FormatError(f"source.version: unsupported version {doc['version']!r}")
        shape = tuple(doc["input_shape"])
        classes = []
        for k, c in enumerate(doc["classes"]):
            means = np.asarray(c["means"], dtype=np.float64)
            if means.ndim != 2 or means.shape[1] != int(np.prod(shape)):
                raise FormatError(f"classes[{k}].means: expected rows of {int(np.prod(shape))} values")
            classes.append(ClassSpec(means.reshape((-1,) + shape), c["scales"], c["weights"]))
        return SyntheticSource(tuple(classes), shape, int(doc.get("seed", 0)))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"source: missing or malformed field {exc}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"source: {exc}") from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds)))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_dict(_read_json(path))


def save_source(src: SyntheticSource, path) -> None:
    Path(path).write_text(json.dumps(source_to_dict(src)))


def load_source(path) -> SyntheticSource:
    return source_from_dict(_read_json(path))


def load_data_file(path):
    """Load either a dataset file or a source spec file, deciding by content."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "samples" in doc:
        return dataset_from_dict(doc)
    if isinstance(doc, dict) and "classes" in doc:
        return source_from_dict(doc)
    raise FormatError(f"{path}: neither a dataset nor a source spec")
