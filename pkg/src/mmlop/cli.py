"""Command-line entry point: ``mmlop <command> [options]``.

Every command resolves its configuration (defaults, then ``--config`` file,
then ``--set`` overrides, then explicit flags), writes the resolved JSON to
``<out>/config.json`` and then runs. Feeding that file back through
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import trainer as tr
from .data import (
    EmbeddingFile,
    TaskSpec,
    gen_synthetic,
    load_embeddings,
    load_task,
    save_embeddings,
    save_task,
    split_base_novel,
)
from .encoder import BackboneConfig, build_anchor, build_backbone, encode_classes, load_backbone, save_backbone
from .prompts import PromptConfig, PromptStack, count_params, write_u_csv
from .tensor import GraphError
from .udc import apply_udc

log = logging.getLogger("mmlop")

COMMANDS = ("gen-data", "train", "eval", "ablate", "sweep", "param-count", "grad-check", "udc", "export-u")
DEFAULT_OUT = "mmlop_out"
ENV_OUT = "MMLOP_OUT"

CONTRACT_ERRORS = (ValueError, TypeError, KeyError, OSError, GraphError, FloatingPointError)


class UsageError(Exception):
    """Bad invocation: unknown override key or malformed ``--set``."""


@dataclass
class RunConfig:
    command: str
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)
    out_dir: str = DEFAULT_OUT
    seed: int | None = None


# ---------------------------------------------------------------- resolved config


def _param_count_defaults() -> dict:
    return {"mode": "shared", "depth": 9, "length": 4, "v_length": None, "rank": 1, "d_v": 768, "d_t": 512}


def default_config() -> dict:
    return {
        "train": asdict(tr.TrainConfig()),
        "task": asdict(TaskSpec()),
        "task_seed": 0,
        "backbone": asdict(BackboneConfig()),
        "seeds": [0, 1, 2],
        "sweep": {"axis": "all", "depth": [1, 2, 3], "length": [2, 4, 8], "rank": [1, 2, 4]},
        "param_count": _param_count_defaults(),
        "grad_check": asdict(tr.ToyCheckConfig()),
        "inputs": {"task": None, "backbone": None, "stack": None, "prompted": None, "anchor": None},
    }


# bare ``--set key=value`` keys are looked up in the command's own section first
PRIMARY_SECTION = {
    "gen-data": "task",
    "param-count": "param_count",
    "grad-check": "grad_check",
    "udc": "inputs",
    "export-u": "inputs",
}
SEARCH_ORDER = ("train", "task", "backbone", "sweep", "param_count", "grad_check", "inputs")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        if key in ("command", "out"):
            continue
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key not in ("sweep",):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def apply_override(cfg: dict, command: str, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, text = item.split("=", 1)
    value = _parse_value(text)
    if "." in key:
        section, name = key.split(".", 1)
        if section not in cfg or not isinstance(cfg[section], dict) or name not in cfg[section]:
            raise UsageError(f"unknown override key {key!r}")
        cfg[section][name] = value
        return
    if key in cfg and not isinstance(cfg[key], dict):
        cfg[key] = value
        return
    order = [PRIMARY_SECTION.get(command, "train")] + list(SEARCH_ORDER)
    for section in order:
        if key in cfg[section]:
            cfg[section][key] = value
            return
    raise UsageError(f"unknown override key {key!r}")


def _build(cls, values: dict):
    """Instantiate a config dataclass, coercing JSON numbers to the field types."""
    out = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = f.default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise tr.ConfigError(f"{cls.__name__}.{f.name} must be true/false, got {v!r}")
        elif isinstance(default, int) and v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                raise tr.ConfigError(f"{cls.__name__}.{f.name} must be an integer, got {v!r}")
            v = int(v)
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise tr.ConfigError(f"{cls.__name__}.{f.name} must be a number, got {v!r}")
            v = float(v)
        out[f.name] = v
    return cls(**out)


# ---------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (a previous run's config.json works)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value; KEY may be section.name")
    p.add_argument("--out", help=f"output directory (env {ENV_OUT} applies when absent)")
    p.add_argument("--seed", type=int, help="training seed (grad-check: toy seed, gen-data: task seed)")
    p.add_argument("-v", "--verbose", action="store_true")


def _inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", help="task.json from gen-data (default: generate from config)")
    p.add_argument("--backbone", help="backbone.mmbb from gen-data (default: build from config)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("shared", "independent", "full"))
    p.add_argument("--depth", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmlop", description="Train and evaluate low-rank deep prompts on a frozen toy image-text encoder.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write task.json, backbone.mmbb and the zero-shot anchor")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--shots", type=int)

    p = sub.add_parser("train", help="train a prompt stack on the base classes and evaluate")
    _common(p)
    _inputs(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="base/novel accuracy of a stack (zero-shot when --stack is absent)")
    _common(p)
    _inputs(p)
    p.add_argument("--stack", help="stack.json from train")

    p = sub.add_parser("ablate", help="the five cumulative ablation rows over several seeds")
    _common(p)
    _inputs(p)
    _train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("sweep", help="sensitivity grid over depth, length or rank")
    _common(p)
    _inputs(p)
    _train_flags(p)
    p.add_argument("--axis", choices=tr.SWEEP_AXES + ("all",))
    p.add_argument("--values", type=int, nargs="+", help="grid for a single --axis")
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("param-count", help="closed-form trainable parameter count")
    _common(p)
    p.add_argument("--mode", choices=("shared", "independent", "full"))
    p.add_argument("--depth", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--v-length", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--dv", type=int)
    p.add_argument("--dt", type=int)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective on a toy setup")
    _common(p)

    p = sub.add_parser("udc", help="drift-correct a prompted embedding file against an anchor file")
    _common(p)
    p.add_argument("--prompted")
    p.add_argument("--anchor")

    p = sub.add_parser("export-u", help="write the shared up-projection rows of a stack as CSV")
    _common(p)
    p.add_argument("--stack")
    return parser


def _flag_updates(args: argparse.Namespace) -> list[tuple[str, str, Any]]:
    """(section, key, value) for every explicit command flag."""
    cmd = args.command
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ups: list[tuple[str, str, Any]] = []
    if cmd == "param-count":
        for flag, key in (("mode", "mode"), ("depth", "depth"), ("length", "length"), ("v_length", "v_length"),
                          ("rank", "rank"), ("dv", "d_v"), ("dt", "d_t")):
            ups.append(("param_count", key, get(flag)))
        return [u for u in ups if u[2] is not None]
    if cmd == "gen-data":
        ups += [("task", "n_classes", get("classes")), ("task", "shots", get("shots")), ("", "task_seed", get("seed"))]
    elif cmd == "grad-check":
        ups.append(("grad_check", "seed", get("seed")))
    else:
        ups.append(("train", "seed", get("seed")))
    for key in ("mode", "depth", "length", "rank", "epochs", "lr"):
        ups.append(("train", key, get(key)))
    for key in ("task", "backbone", "stack", "prompted", "anchor"):
        ups.append(("inputs", key, get(key)))
    ups.append(("", "seeds", get("seeds")))
    if get("axis") is not None:
        ups.append(("sweep", "axis", get("axis")))
        if get("values") is not None:
            if get("axis") == "all":
                raise UsageError("--values needs a single --axis")
            ups.append(("sweep", get("axis"), get("values")))
    elif get("values") is not None:
        raise UsageError("--values needs --axis")
    return [u for u in ups if u[2] is not None]


def resolve(args: argparse.Namespace, environ: dict | None = None) -> tuple[RunConfig, dict]:
    environ = os.environ if environ is None else environ
    cfg = default_config()
    file_out = None
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise tr.ConfigError(f"{args.config}: config must be a JSON object")
        file_out = loaded.get("out")
        _merge(cfg, loaded)
    for item in args.overrides:
        apply_override(cfg, args.command, item)
    for section, key, value in _flag_updates(args):
        if section:
            cfg[section][key] = value
        else:
            cfg[key] = value
    out = args.out or environ.get(ENV_OUT) or file_out or DEFAULT_OUT
    cfg = {"command": args.command, "out": str(out), **cfg}
    run = RunConfig(args.command, args.config, list(args.overrides), str(out), args.seed)
    return run, cfg


# ---------------------------------------------------------------- shared helpers


class Outputs:
    """Writes under the output directory, refusing to clobber any input file."""

    def __init__(self, out_dir: str | Path, inputs: Sequence[str | None]):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._protected = {Path(p).resolve() for p in inputs if p}
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        if p.resolve() in self._protected:
            raise tr.ConfigError(f"refusing to overwrite input file {p}")
        self.written.append(str(p))
        return p

    def json(self, name: str, obj: Any) -> Path:
        text = json.dumps(obj, indent=2) + "\n"
        p = self.dir / name
        # rerunning from a config.json in place leaves it byte-identical
        if p.resolve() in self._protected and p.read_text() == text:
            return p
        self.path(name).write_text(text)
        return p


def _train_cfg(cfg: dict) -> tr.TrainConfig:
    tc = _build(tr.TrainConfig, cfg["train"])
    tc.validate()
    return tc


def _backbone(cfg: dict):
    path = cfg["inputs"]["backbone"]
    if path:
        return load_backbone(path)
    return build_backbone(_build(BackboneConfig, cfg["backbone"]))


def _task(cfg: dict):
    path = cfg["inputs"]["task"]
    if path:
        return load_task(path)
    return gen_synthetic(_build(TaskSpec, cfg["task"]), int(cfg["task_seed"]))


def _check_compatible(bb, task) -> None:
    if bb.config.d_in != task.spec.d_in or bb.config.n_patches != task.spec.n_patches:
        raise tr.ConfigError(
            f"task patches ({task.spec.n_patches}x{task.spec.d_in}) do not fit the backbone "
            f"({bb.config.n_patches}x{bb.config.d_in})"
        )


def _seeds(cfg: dict) -> list[int]:
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise tr.ConfigError(f"seeds must be a non-empty list of integers, got {seeds!r}")
    return seeds


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Outputs) -> int:
    bb = build_backbone(_build(BackboneConfig, cfg["backbone"]))
    task = _task(cfg)
    _check_compatible(bb, task)
    save_task(task, out.path("task.json"))
    save_backbone(bb, out.path("backbone.mmbb"))
    anchor = build_anchor(bb, task.class_words)
    save_embeddings(EmbeddingFile("anchor", anchor.features, list(range(task.n_classes))), out.path("anchor.json"))
    out.json("gen_data_report.json", {
        "n_classes": task.n_classes,
        "base": task.base,
        "novel": task.novel,
        "train_samples": int(len(task.train_y)),
        "test_samples": int(len(task.test_y)),
        "backbone_checksum": bb.checksum(),
    })
    print(f"task with {task.n_classes} classes and backbone {bb.checksum()[:12]} written to {out.dir}")
    return 0


def cmd_train(cfg: dict, out: Outputs) -> int:
    tc = _train_cfg(cfg)
    bb, task = _backbone(cfg), _task(cfg)
    _check_compatible(bb, task)
    before = bb.checksum()
    result, ev = tr.train_and_evaluate(tc, bb, task)
    after = bb.checksum()
    result.stack.save(out.path("stack.json"))
    tr.write_history(result.history, out.path("loss_history.csv"))
    params = count_params(tc.prompt_config(bb))
    row = {**ev.as_row(), "params": params, "epochs": tc.epochs}
    tr.write_rows([row], tr.METRIC_COLUMNS, out.path("metrics.csv"))

    base, _ = split_base_novel(task)
    anchor = build_anchor(bb, base.class_words)
    prompted = encode_classes(bb, result.stack, base.class_words, tc.template_index).data
    save_embeddings(EmbeddingFile("anchor", anchor.features, base.classes), out.path("anchor.json"))
    save_embeddings(EmbeddingFile("prompted", prompted, base.classes), out.path("prompted.json"))
    out.json("train_report.json", {
        **row,
        "initial_ce": result.history[0]["ce"],
        "final_ce": result.history[-1]["ce"],
        "per_class": {k: {str(c): a for c, a in v.items()} for k, v in ev.per_class.items()},
        "backbone_checksum_before": before,
        "backbone_checksum_after": after,
    })
    print(f"base {ev.base_acc:.2f}  novel {ev.novel_acc:.2f}  hm {ev.hm:.2f}  params {params}")
    return 0


def cmd_eval(cfg: dict, out: Outputs) -> int:
    tc = _train_cfg(cfg)
    bb, task = _backbone(cfg), _task(cfg)
    _check_compatible(bb, task)
    stack = None
    if cfg["inputs"]["stack"]:
        stack = PromptStack.load(cfg["inputs"]["stack"])
        tc = replace(tc, mode=stack.mode, depth=stack.depth)
    ev = tr.evaluate(stack, bb, task, tc)
    params = count_params(stack.config) if stack is not None else 0
    row = {**ev.as_row(), "params": params, "epochs": ""}
    tr.write_rows([row], tr.METRIC_COLUMNS, out.path("metrics.csv"))
    out.json("eval_report.json", {
        **ev.as_row(),
        "zero_shot": stack is None,
        "per_class": {k: {str(c): a for c, a in v.items()} for k, v in ev.per_class.items()},
    })
    print(f"base {ev.base_acc:.2f}  novel {ev.novel_acc:.2f}  hm {ev.hm:.2f}")
    return 0


ABLATION_COLUMNS = ("run_id", "row", "seed") + tr.METRIC_COLUMNS
SUMMARY_COLUMNS = ("seeds", "base_acc", "novel_acc", "hm", "params")


def cmd_ablate(cfg: dict, out: Outputs) -> int:
    tc = _train_cfg(cfg)
    seeds = _seeds(cfg)
    bb, task = _backbone(cfg), _task(cfg)
    _check_compatible(bb, task)
    rows = tr.ablate(tc, bb, task, seeds)
    tr.write_rows(rows, ABLATION_COLUMNS, out.path("ablation.csv"))
    summary = tr.summarize(rows, "row")
    tr.write_rows(summary, ("row",) + SUMMARY_COLUMNS, out.path("ablation_summary.csv"))
    out.json("ablation_report.json", {"summary": summary, "novel_ordering": tr.novel_ordering_report(summary)})
    for s in summary:
        print(f"{s['row']:<8} base {s['base_acc']:6.2f}  novel {s['novel_acc']:6.2f}  hm {s['hm']:6.2f}  params {s['params']}")
    return 0


SWEEP_COLUMNS = ("run_id", "axis", "value", "seed") + tr.METRIC_COLUMNS + ("error",)


def cmd_sweep(cfg: dict, out: Outputs) -> int:
    tc = _train_cfg(cfg)
    seeds = _seeds(cfg)
    grid = cfg["sweep"]
    axes = tr.SWEEP_AXES if grid.get("axis") == "all" else (grid.get("axis"),)
    for axis in axes:
        if axis not in tr.SWEEP_AXES:
            raise tr.ConfigError(f"unknown sweep axis {axis!r}")
        if not isinstance(grid.get(axis), list) or not grid[axis]:
            raise tr.ConfigError(f"sweep.{axis} must be a non-empty list")
    bb, task = _backbone(cfg), _task(cfg)
    _check_compatible(bb, task)
    report = {}
    for axis in axes:
        rows = tr.sweep(tc, bb, task, axis, grid[axis], seeds)
        tr.write_rows(rows, SWEEP_COLUMNS, out.path(f"sweep_{axis}.csv"))
        summary = tr.summarize(rows, "value")
        report[axis] = {"summary": summary, "errors": [r["run_id"] for r in rows if r["error"]]}
        for s in summary:
            print(f"{axis}={s['value']:<3} base {s['base_acc']:6.2f}  novel {s['novel_acc']:6.2f}  hm {s['hm']:6.2f}")
    out.json("sweep_report.json", report)
    return 0


def cmd_param_count(cfg: dict, out: Outputs) -> int:
    pc = dict(cfg["param_count"])
    if pc.get("v_length") is None:
        pc["v_length"] = pc["length"]
    pcfg = _build(PromptConfig, pc)
    n = count_params(pcfg)
    out.json("param_count.json", {**asdict(pcfg), "params": n})
    print(n)
    return 0


def cmd_grad_check(cfg: dict, out: Outputs) -> int:
    toy = _build(tr.ToyCheckConfig, cfg["grad_check"])
    report = tr.loss_grad_check(toy)
    ok = report.passed(1e-5)
    out.json("grad_check.json", {
        **asdict(toy),
        "max_rel_err": report.max_rel_err,
        "any_nonfinite": report.any_nonfinite,
        "blocks": {k: asdict(v) for k, v in report.blocks.items()},
        "passed": ok,
    })
    print(f"max relative error {report.max_rel_err:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_udc(cfg: dict, out: Outputs) -> int:
    paths = cfg["inputs"]
    if not paths["prompted"] or not paths["anchor"]:
        raise tr.ConfigError("udc needs --prompted and --anchor embedding files")
    prompted = load_embeddings(paths["prompted"])
    anchor = load_embeddings(paths["anchor"])
    if anchor.kind != "anchor":
        raise tr.ConfigError(f"{paths['anchor']}: expected kind 'anchor', got {anchor.kind!r}")
    report = apply_udc(prompted.values, anchor.values)
    save_embeddings(EmbeddingFile("corrected", report.corrected.data, prompted.labels), out.path("corrected.json"))
    out.json("drift_report.json", {**report.summary(), "labels": list(prompted.labels)})
    print(f"corrected {report.corrected.shape[0]} classes; drift magnitude {report.drift_magnitude:.6g}")
    return 0


def cmd_export_u(cfg: dict, out: Outputs) -> int:
    path = cfg["inputs"]["stack"]
    if not path:
        raise tr.ConfigError("export-u needs --stack")
    stack = PromptStack.load(path)
    n = write_u_csv(stack, out.path("u.csv"))
    print(f"{n} rows written to {out.dir / 'u.csv'}")
    return 0


HANDLERS: dict[str, Callable[[dict, Outputs], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "param-count": cmd_param_count,
    "grad-check": cmd_grad_check,
    "udc": cmd_udc,
    "export-u": cmd_export_u,
}


def run(argv: Sequence[str] | None = None, environ: dict | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run_cfg, cfg = resolve(args, environ)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmlop: error: {exc}", file=sys.stderr)
        return 2
    except CONTRACT_ERRORS as exc:
        print(f"mmlop: error: {exc}", file=sys.stderr)
        return 1
    try:
        out = Outputs(run_cfg.out_dir, list(cfg["inputs"].values()) + [run_cfg.config_path])
        out.json("config.json", cfg)
        return HANDLERS[run_cfg.command](cfg, out)
    except CONTRACT_ERRORS as exc:
        print(f"mmlop: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
