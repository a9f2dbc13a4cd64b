"""Command-line pipeline: calibrate -> compress -> eval -> report.

Each command takes --config <path> (JSON) plus repeatable --set key=value
overrides (dotted keys, values parsed as JSON with a string fallback).
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

Reruns with identical config and inputs produce byte-identical outputs:
bundles are written canonically, reports carry no timestamps, and every
random draw derives from the single config seed via labeled sub-seeds.
An output directory is guarded by a lock file while a command writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import bundle as bundle_io
from . import metrics
from .calib import (
    derive_seed,
    load_choices,
    load_text,
    load_tokenizer,
    make_calibration,
    split_20_80,
)
from .decompose import rank_for_budget
from .errors import ConfigError, DataError, ToolError
from .model import count_macs, count_params
from .search import (
    DEFAULT_BETA_GRID,
    PlanEntry,
    RankPlan,
    SearchPolicy,
    apply_plan,
    default_traversal,
    refresh_gram,
    surgical_search,
)


@dataclass
class RunConfig:
    seed: int
    bundle: str
    output_dir: str = "out"
    mode: str = "feature"
    samples: int = 512
    max_len: int = 128
    strategy: str = "constant"
    calibration: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    constant: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    gram_bank: str | None = None
    plan: str | None = None
    compare_bundle: str | None = None

    def __post_init__(self):
        if not isinstance(self.seed, int):
            raise ConfigError("seed is mandatory and must be an integer")
        if self.mode not in ("feature", "weight"):
            raise ConfigError(f"mode must be 'feature' or 'weight', got {self.mode!r}")
        if self.strategy not in ("constant", "search", "replay"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.samples < 1 or self.max_len < 1:
            raise ConfigError("samples and max_len must be >= 1")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def gram_bank_path(self) -> Path:
        return Path(self.gram_bank) if self.gram_bank else self.out / "gram.bundle"


def _set_override(cfg: dict, key: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part!r} is not an object")
    node[parts[-1]] = value


def load_config(path, overrides=()) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_override(raw, key, value)
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model_and_tokenizer(path):
    model = bundle_io.load_model(path)
    tok_spec = bundle_io.model_tokenizer(path)
    return model, load_tokenizer(tok_spec), tok_spec


def _split_seed(cfg: RunConfig, task_path: str) -> int:
    return derive_seed(cfg.seed, f"split:{Path(task_path).name}")


def _held_out_paths(cfg: RunConfig) -> set:
    """Task files whose 80% evaluation slice must stay out of calibration."""
    paths = set(cfg.evaluation.get("tasks", ()))
    if cfg.policy.get("task"):
        paths.add(cfg.policy["task"])
    return {str(Path(p)) for p in paths}


def _build_calibration(cfg: RunConfig, tokenizer):
    src = cfg.calibration
    if bool(src.get("text")) == bool(src.get("tasks")):
        raise ConfigError("calibration must name exactly one of 'text' or 'tasks'")
    cal_seed = derive_seed(cfg.seed, "calibration")
    if src.get("text"):
        corpus = load_text(src["text"], tokenizer)
        return make_calibration(corpus, cfg.samples, cfg.max_len, cal_seed)
    held_out = _held_out_paths(cfg)
    tasks, excludes = [], []
    for p in src["tasks"]:
        task = load_choices(p, tokenizer)
        tasks.append(task)
        if str(Path(p)) in held_out:
            excludes.append(split_20_80(task, _split_seed(cfg, p)))
        else:
            excludes.append(None)
    return make_calibration(tasks, cfg.samples, cfg.max_len, cal_seed, exclude=excludes)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_calibrate(cfg: RunConfig) -> Path:
    model, tokenizer, _ = _load_model_and_tokenizer(cfg.bundle)
    calibration = _build_calibration(cfg, tokenizer)
    with output_lock(cfg.out):
        bank = refresh_gram(model, calibration)
        meta = {
            "seed": cfg.seed,
            "samples": calibration.sample_count,
            "max_len": calibration.max_len,
            "with_replacement": calibration.with_replacement,
            "sources": list(calibration.sources),
        }
        bundle_io.save_gram_bank(bank, cfg.gram_bank_path, meta=meta)
    print(f"calibrate: {len(bank)} layer records -> {cfg.gram_bank_path}")
    return cfg.gram_bank_path


def _constant_entries(cfg: RunConfig, model) -> list[PlanEntry]:
    spec = cfg.constant
    try:
        beta = float(spec["beta"])
        last = int(spec["last_modules"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"constant strategy needs constant.beta and constant.last_modules: {exc}") from exc
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"constant.beta must be in (0, 1], got {beta}")
    n = model.config.n_layers
    if not 0 <= last <= n:
        raise ConfigError(f"constant.last_modules must be in [0, {n}], got {last}")
    entries = []
    for lid in default_traversal(model.config):
        if lid.module_index >= n - last:
            d2, d1 = model.config.layer_shape(lid.kind)
            entries.append(PlanEntry(lid, beta, rank_for_budget(d2, d1, beta).rank, None))
        else:
            entries.append(PlanEntry(lid, None, None, None))
    return entries


def _load_bank_for(cfg: RunConfig, model, needed) -> dict:
    bank = bundle_io.load_gram_bank(cfg.gram_bank_path)
    missing = [lid.name for lid in needed if lid not in bank]
    if missing:
        raise DataError(
            f"gram bank {cfg.gram_bank_path} is missing layers: {', '.join(missing)} "
            "(run calibrate first)"
        )
    for lid in needed:
        d2, d1 = model.config.layer_shape(lid.kind)
        if (bank[lid].dim_out, bank[lid].dim_in) != (d2, d1):
            raise DataError(f"gram bank entry {lid.name} does not match the bundle shape")
    return bank


def _search_policy(cfg: RunConfig, tokenizer) -> SearchPolicy:
    pol = cfg.policy
    metric = pol.get("metric", "accuracy")
    grid = tuple(pol.get("beta_grid", DEFAULT_BETA_GRID))
    tau = float(pol.get("tau", 0.0))
    refresh = bool(pol.get("refresh_every_module", False))
    normalize = bool(pol.get("normalize", True))
    if metric == "accuracy":
        if not pol.get("task"):
            raise ConfigError("policy.task is required for an accuracy-gated search")
        task = load_choices(pol["task"], tokenizer)
        split = split_20_80(task, _split_seed(cfg, pol["task"]))
        data = split.search_part
    elif metric == "perplexity":
        if not pol.get("corpus"):
            raise ConfigError("policy.corpus is required for a perplexity-gated search")
        data = load_text(pol["corpus"], tokenizer)
    else:
        raise ConfigError(f"unknown policy.metric {metric!r}")
    calibration = None
    if refresh:
        calibration = _build_calibration(cfg, tokenizer)
    try:
        return SearchPolicy(
            data=data, metric=metric, beta_grid=grid, tau=tau,
            refresh_every_module=refresh, calibration=calibration,
            normalize_choice_scores=normalize,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad search policy: {exc}") from exc


def _summary(cfg: RunConfig, model_before, model_after, plan: RankPlan | None) -> dict:
    before = count_params(model_before)
    after = count_params(model_after)
    bm = metrics.budget_map(model_before, model_after)
    macs = count_macs(model_after, model_after.config.max_seq_len)
    summary = {
        "mode": cfg.mode,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "params": {
            "before_total": before.total,
            "after_total": after.total,
            "before_linear": before.linear_total,
            "after_linear": after.linear_total,
            "embedding": after.embedding,
            "head": after.head,
            "norms": after.norms,
        },
        "aggregate_budget": bm.aggregate,
        "retained_linear_params": bm.retained_params,
        "original_linear_params": bm.original_params,
        "macs": {
            "seq_len": macs.seq_len,
            "linear": macs.linear,
            "attention": macs.attention,
            "total": macs.total,
            "formula": macs.formula,
        },
    }
    if plan is not None and cfg.strategy == "search":
        summary["search"] = {"reference": plan.reference, "metric": plan.metric}
    return summary


def cmd_compress(cfg: RunConfig) -> Path:
    model, tokenizer, tok_spec = _load_model_and_tokenizer(cfg.bundle)
    weight_dtype = bundle_io.load_bundle(cfg.bundle).dtypes.get("embed", "f32")

    if cfg.strategy == "constant":
        entries = _constant_entries(cfg, model)
        needed = [e.layer for e in entries if not e.intact]
        bank = _load_bank_for(cfg, model, needed) if cfg.mode == "feature" else None
        compressed = apply_plan(model, entries, bank, mode=cfg.mode)
        plan = RankPlan(entries=tuple(entries), reference=float("nan"), metric="none")
    elif cfg.strategy == "search":
        if cfg.mode != "feature":
            raise ConfigError("the surgical search decomposes in feature mode only")
        policy = _search_policy(cfg, tokenizer)
        bank = _load_bank_for(cfg, model, default_traversal(model.config))
        compressed, plan = surgical_search(model, policy, bank)
    else:  # replay
        if not cfg.plan:
            raise ConfigError("replay strategy needs a 'plan' path")
        entries = RankPlan.load_entries(cfg.plan)
        for e in entries:
            if e.layer.module_index >= model.config.n_layers:
                raise DataError(f"plan entry {e.layer.name} does not fit this bundle")
        needed = [e.layer for e in entries if not e.intact]
        bank = _load_bank_for(cfg, model, needed) if cfg.mode == "feature" else None
        try:
            compressed = apply_plan(model, entries, bank, mode=cfg.mode)
        except ToolError:
            raise
        except ValueError as exc:
            raise DataError(f"plan does not match bundle: {exc}") from exc
        plan = RankPlan(entries=tuple(entries), reference=float("nan"), metric="none")

    with output_lock(cfg.out):
        out_bundle = cfg.out / "compressed.bundle"
        bundle_io.save_model(compressed, out_bundle, weight_dtype=weight_dtype,
                             tokenizer=tok_spec)
        plan.save(cfg.out / "plan.json")
        metrics.write_budget_csv(
            metrics.budget_map(model, compressed), cfg.out / "budget.csv"
        )
        _write_json(cfg.out / "summary.json", _summary(cfg, model, compressed, plan))
    factored = sum(1 for e in plan.entries if not e.intact)
    print(f"compress[{cfg.strategy}/{cfg.mode}]: {factored} layers factored -> {out_bundle}")
    return out_bundle


def _metric_report(cfg: RunConfig, model_a, model_b, tokenizer) -> dict:
    """Held-out metrics for one or two models: accuracy, delta, disagreement, ppl."""
    report = {"tasks": {}, "perplexity": {}}
    for task_path in cfg.evaluation.get("tasks", ()):
        task = load_choices(task_path, tokenizer)
        split = split_20_80(task, _split_seed(cfg, task_path))
        eval_task = split.eval_part.task
        acc_a = metrics.choice_accuracy(model_a, eval_task)
        entry = {"n_items": acc_a.n_items, "accuracy_a": acc_a.value}
        if model_b is not None:
            acc_b = metrics.choice_accuracy(model_b, eval_task)
            dis = metrics.disagreement(model_a, model_b, eval_task)
            entry.update({
                "accuracy_b": acc_b.value,
                "delta": acc_b.value - acc_a.value,
                "disagreement": dis,
            })
        report["tasks"][Path(task_path).name] = entry
    if cfg.evaluation.get("text"):
        corpus = load_text(cfg.evaluation["text"], tokenizer)
        report["perplexity"]["a"] = metrics.perplexity(model_a, corpus).value
        if model_b is not None:
            report["perplexity"]["b"] = metrics.perplexity(model_b, corpus).value
    return report


def cmd_eval(cfg: RunConfig, bundle_a=None, bundle_b=None) -> Path:
    path_a = bundle_a or cfg.bundle
    path_b = bundle_b or cfg.compare_bundle
    model_a, tokenizer, tok_a = _load_model_and_tokenizer(path_a)
    model_b = None
    if path_b:
        tok_b = bundle_io.model_tokenizer(path_b)
        if tok_b != tok_a:
            raise DataError(
                f"tokenizer mismatch: {path_a} uses {tok_a!r}, {path_b} uses {tok_b!r}"
            )
        model_b = bundle_io.load_model(path_b)

    report = {"bundle_a": str(path_a), "bundle_b": str(path_b) if path_b else None}
    report.update(_metric_report(cfg, model_a, model_b, tokenizer))
    rows = list(report["tasks"].items())
    if not report["tasks"] and not report["perplexity"]:
        raise ConfigError("evaluation config names no tasks and no text corpus")

    with output_lock(cfg.out):
        out_json = cfg.out / "metrics.json"
        _write_json(out_json, report)
        lines = ["task,accuracy_a,accuracy_b,delta,disagreement"]
        for name, entry in rows:
            cells = [name, repr(entry["accuracy_a"])]
            if "accuracy_b" in entry:
                cells += [repr(entry["accuracy_b"]), repr(entry["delta"]),
                          repr(entry["disagreement"])]
            else:
                cells += ["", "", ""]
            lines.append(",".join(cells))
        (cfg.out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"eval: report -> {out_json}")
    return out_json


def cmd_report(cfg: RunConfig) -> Path:
    compressed_path = cfg.compare_bundle or str(cfg.out / "compressed.bundle")
    model_before, tokenizer, _ = _load_model_and_tokenizer(cfg.bundle)
    model_after = bundle_io.load_model(compressed_path)
    if model_before.config != model_after.config:
        raise DataError("bundles have different architecture shapes")
    summary = _summary(cfg, model_before, model_after, None)
    if cfg.evaluation.get("tasks") or cfg.evaluation.get("text"):
        summary["metrics"] = _metric_report(cfg, model_before, model_after, tokenizer)
    with output_lock(cfg.out):
        metrics.write_budget_csv(
            metrics.budget_map(model_before, model_after), cfg.out / "budget.csv"
        )
        _write_json(cfg.out / "summary.json", summary)
    print(f"report: budget map -> {cfg.out / 'budget.csv'}")
    return cfg.out / "budget.csv"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ranksurgeon",
        description="Training-free decoder compression by low-rank layer surgery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("calibrate", "compress", "eval", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
        if name == "eval":
            p.add_argument("--bundle-a", default=None)
            p.add_argument("--bundle-b", default=None)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "calibrate":
            cmd_calibrate(cfg)
        elif args.command == "compress":
            cmd_compress(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.bundle_a, args.bundle_b)
        else:
            cmd_report(cfg)
    except ToolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
