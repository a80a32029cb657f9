"""Synthetic few-shot vision-language tasks and the JSON embedding format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class MalformedHeaderError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class NormViolationError(DataError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm!r}, expected 1 within 1e-6")
        self.row = row
        self.norm = norm


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 8
    shots: int = 16
    n_test: int = 25
    d_in: int = 8
    n_patches: int = 8
    noise: float = 1.0
    style: float = 0.0
    novel_shift: float = 0.5

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.shots < 1:
            raise DataError(f"shots must be >= 1, got {self.shots}")
        if self.n_test < 1 or self.d_in < 1 or self.n_patches < 1:
            raise DataError("n_test, d_in and n_patches must be positive")
        if self.noise < 0 or self.style < 0:
            raise DataError("noise and style must be nonnegative")


@dataclass
class SyntheticTask:
    spec: TaskSpec
    seed: int
    prototypes: np.ndarray  # (C, d_in)
    class_words: np.ndarray  # (C, d_in)
    train_x: np.ndarray  # (C * shots, n_patches, d_in)
    train_y: np.ndarray
    test_x: np.ndarray  # (C * n_test, n_patches, d_in)
    test_y: np.ndarray
    base: list[int] = field(default_factory=list)
    novel: list[int] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def equals(self, other: SyntheticTask) -> bool:
        arrays = ("prototypes", "class_words", "train_x", "train_y", "test_x", "test_y")
        return (
            self.spec == other.spec
            and self.base == other.base
            and self.novel == other.novel
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )


@dataclass
class Split:
    """One side of the base/novel partition with labels local to ``classes``."""

    name: str
    classes: list[int]
    class_words: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _prototypes(rng: np.random.Generator, spec: TaskSpec) -> np.ndarray:
    C, d = spec.n_classes, spec.d_in
    if C <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        protos = q[:C].copy()
    else:
        protos = rng.normal(size=(C, d))
    n_base = math.ceil(C / 2)
    shift = rng.normal(size=d)
    shift /= np.linalg.norm(shift)
    protos[n_base:] += spec.novel_shift * shift
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def gen_synthetic(spec: TaskSpec, seed: int) -> SyntheticTask:
    """Prototype-driven task: each patch is prototype + style + Gaussian noise.

    ``noise`` scales per-patch noise (per-coordinate std ``noise / sqrt(d_in)``).
    ``style`` scales one task-wide vector added to every patch, a domain shift
    the frozen zero-shot model does not know about. Novel prototypes are pushed
    along a shared direction by ``novel_shift`` before renormalization.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, spec)
    style = rng.normal(size=spec.d_in)
    style *= spec.style / np.linalg.norm(style)
    scale = spec.noise / np.sqrt(spec.d_in)

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(spec.n_classes), per_class)
        eps = rng.normal(size=(len(y), spec.n_patches, spec.d_in))
        x = protos[y][:, None, :] + style + scale * eps
        return x, y

    train_x, train_y = draw(spec.shots)
    test_x, test_y = draw(spec.n_test)
    task = SyntheticTask(spec, seed, protos, protos.copy(), train_x, train_y, test_x, test_y)
    base, novel = split_classes(spec.n_classes)
    task.base, task.novel = base, novel
    return task


def split_classes(n_classes: int) -> tuple[list[int], list[int]]:
    n_base = math.ceil(n_classes / 2)
    return list(range(n_base)), list(range(n_base, n_classes))


def _subset(task: SyntheticTask, name: str, classes: list[int]) -> Split:
    local = {c: i for i, c in enumerate(classes)}
    tr = np.isin(task.train_y, classes)
    te = np.isin(task.test_y, classes)
    return Split(
        name=name,
        classes=list(classes),
        class_words=task.class_words[classes],
        train_x=task.train_x[tr],
        train_y=np.array([local[c] for c in task.train_y[tr]], dtype=np.int64),
        test_x=task.test_x[te],
        test_y=np.array([local[c] for c in task.test_y[te]], dtype=np.int64),
    )


def split_base_novel(task: SyntheticTask) -> tuple[Split, Split]:
    """First ceil(C/2) class ids are base, the rest novel."""
    base, novel = split_classes(task.n_classes)
    return _subset(task, "base", base), _subset(task, "novel", novel)


def all_classes(task: SyntheticTask) -> Split:
    return _subset(task, "all", list(range(task.n_classes)))


# ---------------------------------------------------------------- files

UNIT_NORM_KINDS = ("anchor", "corrected")
EMBEDDING_KINDS = ("anchor", "prompted", "image", "corrected")


@dataclass
class EmbeddingFile:
    kind: str
    values: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


def save_embeddings(e: EmbeddingFile, path: str | Path) -> None:
    labels = list(e.labels) if e.labels else list(range(e.count))
    obj = {
        "kind": e.kind,
        "dim": e.dim,
        "count": e.count,
        "labels": labels,
        "data": [[float(v) for v in row] for row in e.values],
    }
    # json writes floats with repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(obj))


def load_embeddings(path: str | Path) -> EmbeddingFile:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: not valid JSON ({exc})") from None
    for key in ("kind", "dim", "count", "data"):
        if key not in obj:
            raise MalformedHeaderError(f"{path}: missing field {key!r}")
    kind, dim, count = obj["kind"], obj["dim"], obj["count"]
    if kind not in EMBEDDING_KINDS:
        raise MalformedHeaderError(f"{path}: unknown kind {kind!r}")
    if not (isinstance(dim, int) and isinstance(count, int)) or dim < 1 or count < 0:
        raise MalformedHeaderError(f"{path}: dim/count must be positive integers, got {dim!r}/{count!r}")
    rows = obj["data"]
    if len(rows) != count or any(len(r) != dim for r in rows):
        raise CountMismatchError(
            f"{path}: header declares {count}x{dim} but payload has {len(rows)} rows "
            f"of widths {sorted({len(r) for r in rows})}"
        )
    values = np.array(rows, dtype=np.float64).reshape(count, dim)
    labels = obj.get("labels", list(range(count)))
    if len(labels) != count:
        raise CountMismatchError(f"{path}: {len(labels)} labels for {count} rows")
    if kind in UNIT_NORM_KINDS:
        norms = np.linalg.norm(values, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise NormViolationError(int(bad[0]), float(norms[bad[0]]))
    return EmbeddingFile(kind, values, labels)


def save_task(task: SyntheticTask, path: str | Path) -> None:
    obj = {
        "kind": "task",
        "spec": asdict(task.spec),
        "seed": task.seed,
        "base": task.base,
        "novel": task.novel,
        "prototypes": task.prototypes.tolist(),
        "class_words": task.class_words.tolist(),
        "train_x": task.train_x.tolist(),
        "train_y": task.train_y.tolist(),
        "test_x": task.test_x.tolist(),
        "test_y": task.test_y.tolist(),
    }
    Path(path).write_text(json.dumps(obj))


def load_task(path: str | Path) -> SyntheticTask:
    obj = json.loads(Path(path).read_text())
    if obj.get("kind") != "task":
        raise MalformedHeaderError(f"{path}: expected kind 'task', got {obj.get('kind')!r}")
    spec = TaskSpec(**obj["spec"])
    arr = lambda k, dt=np.float64: np.array(obj[k], dtype=dt)  # noqa: E731
    task = SyntheticTask(
        spec,
        obj["seed"],
        arr("prototypes"),
        arr("class_words"),
        arr("train_x").reshape(-1, spec.n_patches, spec.d_in),
        arr("train_y", np.int64),
        arr("test_x").reshape(-1, spec.n_patches, spec.d_in),
        arr("test_y", np.int64),
        list(obj["base"]),
        list(obj["novel"]),
    )
    return task
