"""Low-rank deep prompt parameterization.

Three storage modes share one type so ablations can flip a flag:

* ``shared``: one up-projection per layer, ``P_v = U V_v`` and ``P_t = U V_t``
* ``independent``: ``P_v = U_v V_v`` and ``P_t = U_t V_t``
* ``full``: ``P_v`` and ``P_t`` stored directly (the full-rank baseline)

The product carries no ``alpha / r`` scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor, matmul

MODES = ("shared", "independent", "full")

# factor name -> (rows, cols) as attribute names on PromptConfig
_FACTOR_SHAPES: dict[str, dict[str, tuple[str, str]]] = {
    "shared": {"U": ("length", "rank"), "V_v": ("rank", "d_v"), "V_t": ("rank", "d_t")},
    "independent": {
        "U_v": ("v_length", "rank"),
        "V_v": ("rank", "d_v"),
        "U_t": ("length", "rank"),
        "V_t": ("rank", "d_t"),
    },
    "full": {"P_v": ("v_length", "d_v"), "P_t": ("length", "d_t")},
}


class PromptConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PromptConfig:
    mode: str = "shared"
    depth: int = 9
    length: int = 4
    v_length: int = 4
    rank: int = 1
    d_v: int = 768
    d_t: int = 512
    init_std: float = 0.05

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("depth", "length", "v_length", "rank", "d_v", "d_t"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                problems.append(f"{name} must be an integer, got {value!r}")
            elif name == "depth":
                if value < 0:
                    problems.append(f"depth must be >= 0, got {value}")
            elif value < 1:
                problems.append(f"{name} must be >= 1, got {value}")
        if not (isinstance(self.init_std, (int, float)) and self.init_std >= 0):
            problems.append(f"init_std must be >= 0, got {self.init_std!r}")
        if self.mode == "shared" and self.length != self.v_length:
            problems.append(f"shared mode requires length == v_length, got {self.length} != {self.v_length}")
        if self.mode != "full" and not problems and self.rank > min(self.d_v, self.d_t):
            problems.append(f"rank {self.rank} exceeds min(d_v, d_t) = {min(self.d_v, self.d_t)}")
        if problems:
            raise PromptConfigError("; ".join(problems))

    def factor_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            name: (getattr(self, rows), getattr(self, cols))
            for name, (rows, cols) in _FACTOR_SHAPES[self.mode].items()
        }


def count_params(cfg: PromptConfig) -> int:
    """Closed-form number of trainable prompt scalars."""
    cfg.validate()
    L, T, V, r = cfg.depth, cfg.length, cfg.v_length, cfg.rank
    if cfg.mode == "shared":
        per_layer = T * r + r * cfg.d_v + r * cfg.d_t
    elif cfg.mode == "independent":
        per_layer = V * r + r * cfg.d_v + T * r + r * cfg.d_t
    else:
        per_layer = V * cfg.d_v + T * cfg.d_t
    return L * per_layer


@dataclass
class PromptStack:
    """Per-layer prompt factors held as trainable leaf tensors.

    ``layers[l - 1]`` maps factor names to tensors for 1-based layer ``l``.
    """

    config: PromptConfig
    layers: list[dict[str, Tensor]]

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def depth(self) -> int:
        return self.config.depth

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{name}[{l + 1}]", t) for l, layer in enumerate(self.layers) for name, t in layer.items()]

    def num_scalars(self) -> int:
        return int(np.sum([t.data.size for _, t in self.parameters()], dtype=np.int64))

    def arrays(self) -> list[dict[str, np.ndarray]]:
        return [{k: t.data.copy() for k, t in layer.items()} for layer in self.layers]

    def with_arrays(self, layers: list[Mapping[str, np.ndarray]]) -> PromptStack:
        """New stack with fresh leaves holding ``layers``."""
        return PromptStack(
            self.config,
            [{k: Tensor(v, requires_grad=True, name=k) for k, v in layer.items()} for layer in layers],
        )

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def equals(self, other: PromptStack) -> bool:
        if self.config != other.config:
            return False
        return all(
            np.array_equal(a[k], b[k]) for a, b in zip(self.arrays(), other.arrays()) for k in a
        )

    def to_json(self) -> dict:
        return {
            "kind": "prompt_stack",
            "config": asdict(self.config),
            "layers": [{k: v.tolist() for k, v in layer.items()} for layer in self.arrays()],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> PromptStack:
        if obj.get("kind") != "prompt_stack":
            raise PromptConfigError(f"expected kind 'prompt_stack', got {obj.get('kind')!r}")
        cfg = PromptConfig(**obj["config"])
        cfg.validate()
        shapes = cfg.factor_shapes()
        layers = []
        for layer in obj["layers"]:
            arrays = {k: np.asarray(layer[k], dtype=np.float64).reshape(shapes[k]) for k in shapes}
            layers.append(arrays)
        if len(layers) != cfg.depth:
            raise PromptConfigError(f"stack declares depth {cfg.depth} but holds {len(layers)} layers")
        return PromptStack(cfg, []).with_arrays(layers)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> PromptStack:
        return cls.from_json(json.loads(Path(path).read_text()))


def init_stack(cfg: PromptConfig, seed: int) -> PromptStack:
    """Draw every factor i.i.d. from N(0, init_std**2), layer by layer."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    shapes = cfg.factor_shapes()
    layers = []
    for _ in range(cfg.depth):
        layers.append({name: rng.normal(0.0, 1.0, size=shape) * cfg.init_std for name, shape in shapes.items()})
    return PromptStack(cfg, []).with_arrays(layers)


def materialize(stack: PromptStack, layer: int) -> tuple[Tensor, Tensor]:
    """Vision and text prompt matrices for 1-based ``layer``, inside the graph."""
    if not 1 <= layer <= stack.depth:
        raise IndexError(f"layer {layer} out of range 1..{stack.depth}")
    f = stack.layers[layer - 1]
    if stack.mode == "shared":
        return matmul(f["U"], f["V_v"]), matmul(f["U"], f["V_t"])
    if stack.mode == "independent":
        return matmul(f["U_v"], f["V_v"]), matmul(f["U_t"], f["V_t"])
    return f["P_v"], f["P_t"]


def sgd_step(stack: PromptStack, lr: float) -> PromptStack:
    """Plain SGD: theta <- theta - lr * grad. Factors without grad are kept."""
    updated = []
    for layer in stack.layers:
        updated.append({k: t.data if t.grad is None else t.data - lr * t.grad for k, t in layer.items()})
    return stack.with_arrays(updated)


def export_u_rows(stack: PromptStack) -> list[tuple[int, int, int, float]]:
    """(layer, token, rank_index, value) for every entry of the shared up-projection."""
    if stack.mode != "shared":
        raise PromptConfigError(f"export-u needs a shared-mode stack, got mode {stack.mode!r}")
    rows = []
    for l, layer in enumerate(stack.layers, start=1):
        U = layer["U"].data
        for token in range(U.shape[0]):
            for k in range(U.shape[1]):
                rows.append((l, token, k, float(U[token, k])))
    return rows


def write_u_csv(stack: PromptStack, path: str | Path) -> int:
    rows = export_u_rows(stack)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "token", "rank_index", "value"])
        for layer, token, k, value in rows:
            writer.writerow([layer, token, k, repr(value)])
    return len(rows)
