"""Training loop, base-to-novel evaluation, ablation and sensitivity sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .data import Split, SyntheticTask, split_base_novel
from .encoder import FrozenBackbone, ZeroShotAnchor, build_anchor, encode_classes, encode_image
from .losses import LossBreakdown, NonFiniteLossError, cross_entropy, scl_feature_l1, scl_logits, total_loss
from .prompts import PromptConfig, PromptStack, count_params, init_stack, sgd_step
from .udc import apply_udc

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "shared"
    depth: int = 3
    length: int = 4
    v_length: int | None = None
    rank: int = 1
    init_std: float = 0.05
    lambda1: float = 25.0
    lambda2: float = 10.0
    tau: float = 0.01
    lr: float = 0.0025
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    use_scl: bool = True
    use_udc: bool = True
    kl_variant: str = "symmetric"
    template_index: int = 0

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.kl_variant not in ("symmetric", "asymmetric"):
            raise ConfigError(f"kl_variant must be symmetric or asymmetric, got {self.kl_variant!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")

    def prompt_config(self, bb: FrozenBackbone) -> PromptConfig:
        cfg = PromptConfig(
            mode=self.mode,
            depth=self.depth,
            length=self.length,
            v_length=self.length if self.v_length is None else self.v_length,
            rank=self.rank,
            d_v=bb.d_v,
            d_t=bb.d_t,
            init_std=self.init_std,
        )
        cfg.validate()
        if cfg.depth > bb.config.n_layers:
            raise ConfigError(f"depth {cfg.depth} exceeds the backbone's {bb.config.n_layers} blocks")
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    frozen_image: np.ndarray  # zero-shot image features for x


def mmlop_loss(
    stack: PromptStack,
    bb: FrozenBackbone,
    anchor_feats: np.ndarray,
    class_words: np.ndarray,
    batch: Batch,
    cfg: TrainConfig,
) -> LossBreakdown:
    """One evaluation of the full objective, built inside the graph."""
    f_p = encode_image(bb, stack, batch.x)
    g_p = encode_classes(bb, stack, class_words, cfg.template_index)
    g_hat = apply_udc(g_p, anchor_feats).corrected if cfg.use_udc else g_p
    ce = cross_entropy(f_p, g_hat, batch.y, cfg.tau)
    if not cfg.use_scl:
        return total_loss(ce, 0.0, 0.0, 0.0, 0.0, 0.0)
    text = scl_feature_l1(g_hat, anchor_feats)
    image = scl_feature_l1(f_p, batch.frozen_image)
    sims_p = tn.matmul(f_p, tn.transpose(g_hat))
    sims_q = batch.frozen_image @ anchor_feats.T
    logits = scl_logits(sims_p, sims_q, cfg.tau, cfg.kl_variant)
    return total_loss(ce, text, image, logits, cfg.lambda1, cfg.lambda2)


# ---------------------------------------------------------------- training


HISTORY_COLUMNS = ("epoch", "ce", "scl_text", "scl_image", "scl_logits", "total")


@dataclass
class TrainResult:
    stack: PromptStack
    initial: PromptStack
    history: list[dict[str, float]] = field(default_factory=list)


def train(cfg: TrainConfig, bb: FrozenBackbone, anchor: ZeroShotAnchor, split: Split) -> TrainResult:
    """Plain-SGD prompt training on ``split`` (the base classes)."""
    cfg.validate()
    pcfg = cfg.prompt_config(bb)
    if anchor.n_classes != split.n_classes:
        raise ConfigError(f"anchor has {anchor.n_classes} classes but split has {split.n_classes}")
    if len(split.train_y) == 0:
        raise ConfigError("training split is empty")
    if split.train_y.max() >= anchor.n_classes:
        raise ConfigError("split labels fall outside the anchor's classes")
    rng = np.random.default_rng(cfg.seed)
    stack = init_stack(pcfg, seed=cfg.seed)
    initial = stack
    frozen = encode_image(bb, None, split.train_x).data
    n = len(split.train_y)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(HISTORY_COLUMNS[1:], 0.0)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(split.train_x[idx], split.train_y[idx], frozen[idx])
            parts = mmlop_loss(stack, bb, anchor.features, split.class_words, batch, cfg)
            if not np.isfinite(parts.total_value):
                raise NonFiniteLossError("total", parts.total_value)
            parts.total.backward()
            stack = sgd_step(stack, cfg.lr)
            for k, v in parts.as_row().items():
                sums[k] += v * len(idx)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        history.append(row)
        log.debug("epoch %d ce=%.4f total=%.4f", epoch, row["ce"], row["total"])
    return TrainResult(stack, initial, history)


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- evaluation


def harmonic_mean(a: float, b: float) -> float:
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class SplitAccuracy:
    accuracy: float
    per_class: dict[int, float]


@dataclass
class EvalResult:
    base_acc: float
    novel_acc: float
    per_class: dict[str, dict[int, float]] = field(default_factory=dict)

    @property
    def hm(self) -> float:
        return harmonic_mean(self.base_acc, self.novel_acc)

    def as_row(self) -> dict[str, float]:
        return {"base_acc": self.base_acc, "novel_acc": self.novel_acc, "hm": self.hm}


def class_features(stack: PromptStack | None, bb: FrozenBackbone, split: Split, cfg: TrainConfig) -> np.ndarray:
    """Classifier weights for ``split``: UDC-corrected prompted features, or the
    zero-shot anchor when there is no stack. UDC runs over this split's classes."""
    anchor = build_anchor(bb, split.class_words)
    if stack is None:
        return anchor.features
    g = encode_classes(bb, stack, split.class_words, cfg.template_index)
    return apply_udc(g, anchor.features).corrected.data if cfg.use_udc else g.data


def split_accuracy(stack: PromptStack | None, bb: FrozenBackbone, split: Split, cfg: TrainConfig) -> SplitAccuracy:
    if len(split.test_y) == 0:
        raise ConfigError(f"{split.name} split has no test samples")
    weights = class_features(stack, bb, split, cfg)
    f = encode_image(bb, stack, split.test_x).data
    pred = np.argmax(f @ weights.T, axis=1)
    hit = pred == split.test_y
    per_class = {split.classes[k]: 100.0 * float(hit[split.test_y == k].mean()) for k in range(split.n_classes)}
    return SplitAccuracy(100.0 * float(hit.mean()), per_class)


def evaluate(stack: PromptStack | None, bb: FrozenBackbone, task: SyntheticTask, cfg: TrainConfig) -> EvalResult:
    base, novel = split_base_novel(task)
    b = split_accuracy(stack, bb, base, cfg)
    n = split_accuracy(stack, bb, novel, cfg)
    return EvalResult(b.accuracy, n.accuracy, {"base": b.per_class, "novel": n.per_class})


def train_and_evaluate(cfg: TrainConfig, bb: FrozenBackbone, task: SyntheticTask) -> tuple[TrainResult, EvalResult]:
    base, _ = split_base_novel(task)
    anchor = build_anchor(bb, base.class_words)
    result = train(cfg, bb, anchor, base)
    return result, evaluate(result.stack, bb, task, cfg)


# ---------------------------------------------------------------- ablation and sweeps


ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("ivlp", {"mode": "full", "use_scl": False, "use_udc": False}),
    ("+lora", {"mode": "independent", "use_scl": False, "use_udc": False}),
    ("+scl", {"mode": "independent", "use_scl": True, "use_udc": False}),
    ("+udc", {"mode": "independent", "use_scl": True, "use_udc": True}),
    ("+shared", {"mode": "shared", "use_scl": True, "use_udc": True}),
)

METRIC_COLUMNS = ("base_acc", "novel_acc", "hm", "params", "epochs")


def ablation_configs(base_cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Cumulative rows; adjacent rows differ only in the toggle each row adds."""
    return [(name, replace(base_cfg, **changes)) for name, changes in ABLATION_ROWS]


def _run(cfg: TrainConfig, bb: FrozenBackbone, task: SyntheticTask) -> dict:
    _, ev = train_and_evaluate(cfg, bb, task)
    return {**ev.as_row(), "params": count_params(cfg.prompt_config(bb)), "epochs": cfg.epochs}


def ablate(base_cfg: TrainConfig, bb: FrozenBackbone, task: SyntheticTask, seeds: Iterable[int] = (0, 1, 2)) -> list[dict]:
    """One row per (ablation row, seed), ordered by row then seed."""
    rows = []
    for name, cfg in ablation_configs(base_cfg):
        for seed in seeds:
            metrics = _run(replace(cfg, seed=seed), bb, task)
            rows.append({"run_id": f"{name}/s{seed}", "row": name, "seed": seed, **metrics})
            log.info("ablation %s seed %d: base %.2f novel %.2f hm %.2f", name, seed, metrics["base_acc"], metrics["novel_acc"], metrics["hm"])
    return rows


def summarize(rows: Sequence[dict], key: str) -> list[dict]:
    """Mean base/novel/HM per distinct ``key`` value, in first-seen order."""
    groups: dict = {}
    for r in rows:
        if r.get("error"):
            continue
        groups.setdefault(r[key], []).append(r)
    out = []
    for k, rs in groups.items():
        out.append(
            {
                key: k,
                "seeds": len(rs),
                "base_acc": float(np.mean([r["base_acc"] for r in rs])),
                "novel_acc": float(np.mean([r["novel_acc"] for r in rs])),
                "hm": float(np.mean([r["hm"] for r in rs])),
                "params": rs[0]["params"],
            }
        )
    return out


def novel_ordering_report(summary: Sequence[dict]) -> dict:
    """Whether mean novel accuracy rises across ablation rows 2 to 5 (reported, not gated)."""
    novel = [s["novel_acc"] for s in summary]
    steps = {f"{summary[i]['row']}->{summary[i + 1]['row']}": novel[i + 1] - novel[i] for i in range(len(novel) - 1)}
    rising = all(novel[i + 1] >= novel[i] for i in range(1, len(novel) - 1))
    return {"novel_acc_by_row": dict(zip([s["row"] for s in summary], novel)), "deltas": steps, "rows2to5_non_decreasing": rising}


SWEEP_AXES = ("depth", "length", "rank")


def sweep(
    base_cfg: TrainConfig,
    bb: FrozenBackbone,
    task: SyntheticTask,
    axis: str,
    values: Sequence[int],
    seeds: Iterable[int] = (0,),
) -> list[dict]:
    """Train and evaluate once per (value, seed); invalid values become error cells."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    rows = []
    for value in values:
        changes = {"length": value, "v_length": None} if axis == "length" else {axis: value}
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed, **changes)
            row = {"run_id": f"{axis}={value}/s{seed}", "axis": axis, "value": value, "seed": seed}
            try:
                row.update(_run(cfg, bb, task))
                row["error"] = ""
            except (ConfigError, ValueError) as exc:
                row.update({k: "" for k in METRIC_COLUMNS})
                row["error"] = str(exc)
                log.warning("sweep %s=%s seed %d failed: %s", axis, value, seed, exc)
            rows.append(row)
    return rows


def write_rows(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------- gradient check


@dataclass(frozen=True)
class ToyCheckConfig:
    seed: int = 7
    n_classes: int = 3
    depth: int = 2
    width: int = 8
    batch: int = 3
    mode: str = "shared"
    kl_variant: str = "symmetric"
    tau: float = 0.01
    init_std: float = 0.5
    eps: float = 1e-6


def loss_grad_check(toy: ToyCheckConfig = ToyCheckConfig()) -> tn.GradCheckReport:
    """Finite-difference check of the full objective (CE + SCL + UDC) on a tiny setup."""
    from .encoder import BackboneConfig, build_backbone

    bb = build_backbone(
        BackboneConfig(
            d_in=4, d_v=toy.width, d_t=toy.width, d_out=8, n_layers=max(toy.depth, 2), n_heads=2,
            n_patches=3, n_words=2, n_templates=3, fit_samples=256, tau=toy.tau, seed=toy.seed,
        )
    )
    rng = np.random.default_rng(toy.seed + 1)
    class_words = rng.normal(size=(toy.n_classes, 4))
    x = rng.normal(size=(toy.batch, 3, 4))
    y = rng.integers(0, toy.n_classes, size=toy.batch)
    anchor = build_anchor(bb, class_words)
    cfg = TrainConfig(
        mode=toy.mode, depth=toy.depth, length=2, rank=1, init_std=toy.init_std, tau=toy.tau,
        kl_variant=toy.kl_variant, seed=toy.seed,
    )
    pcfg = cfg.prompt_config(bb)
    start = init_stack(pcfg, seed=toy.seed)
    point = {name: t.data for name, t in start.parameters()}
    batch = Batch(x, y, encode_image(bb, None, x).data)
    names = [[f"{k}[{l + 1}]" for k in layer] for l, layer in enumerate(start.layers)]

    def fn(params):
        stack = PromptStack(pcfg, [{n.split("[")[0]: params[n] for n in layer} for layer in names])
        return mmlop_loss(stack, bb, anchor.features, class_words, batch, cfg).total

    return tn.grad_check(fn, point, eps=toy.eps)
