"""Generate a self-contained demo workspace: toy bundle, corpora, tasks.

The choice tasks are labeled by the generated model's own argmax choice,
so the intact model scores 100% and compression-induced degradation is
visible in the metrics. Everything derives from one seed.

Usage: python -m ranksurgeon.demo --out demo --seed 7
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from . import metrics
from .bundle import save_model
from .calib import ChoiceItem, SplitMix64, derive_seed
from .model import ModelConfig, random_model

DESK_CONFIG = dict(
    vocab_size=256, d_model=64, n_layers=4, n_heads=4,
    d_ff=172, max_seq_len=128, norm_epsilon=1e-5,
)

_WORDS = (
    "orbit lattice copper meadow signal ember quartz harbor velvet cinder "
    "mirror tundra saffron ripple bastion juniper cobalt prairie lantern onyx"
).split()


def make_text(path: Path, seed: int, n_docs: int = 600, words_per_doc: int = 40) -> Path:
    rng = SplitMix64(seed)
    docs = []
    for _ in range(n_docs):
        docs.append(" ".join(_WORDS[rng.randbelow(len(_WORDS))] for _ in range(words_per_doc)))
    path.write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    return path


def make_self_labeled_task(path: Path, model, seed: int, n_items: int,
                           n_choices: int = 3) -> Path:
    rng = np.random.default_rng(seed)
    records = []
    uid = 0
    while len(records) < n_items:
        ctx = "".join(chr(int(c)) for c in rng.integers(97, 123, size=int(rng.integers(8, 14))))
        choices = [
            "".join(chr(int(c)) for c in rng.integers(97, 123, size=4))
            for _ in range(n_choices)
        ]
        item = ChoiceItem(
            context=tuple(ord(c) for c in ctx),
            choices=tuple(tuple(ord(c) for c in ch) for ch in choices),
            gold=0, uid=uid,
        )
        scores = metrics.choice_scores(model, item)
        order = np.argsort(scores)[::-1]
        # margin filter: float-level weight perturbations (e.g. f32 storage
        # rounding) must not be able to flip a label
        if scores[order[0]] - scores[order[1]] < 1e-3:
            continue
        records.append({"context": ctx, "choices": choices, "gold": int(order[0])})
        uid += 1
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


def make_demo_assets(out_dir, seed: int = 7, config: dict | None = None,
                     n_task_items: int = 150) -> dict:
    """Write model.bundle, train/test corpora and tasks, and a run config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig(**(config or DESK_CONFIG))
    model = random_model(cfg, seed=seed)

    paths = {
        "bundle": out / "model.bundle",
        "train_text": out / "train.txt",
        "eval_text": out / "test.txt",
        "train_task": out / "train.jsonl",
        "eval_task": out / "test.jsonl",
        "config": out / "config.json",
    }
    save_model(model, paths["bundle"])
    make_text(paths["train_text"], derive_seed(seed, "demo:train-text"))
    make_text(paths["eval_text"], derive_seed(seed, "demo:eval-text"), n_docs=60)
    make_self_labeled_task(paths["train_task"], model,
                           derive_seed(seed, "demo:train-task") % 2**32, n_task_items)
    make_self_labeled_task(paths["eval_task"], model,
                           derive_seed(seed, "demo:eval-task") % 2**32, n_task_items)

    run_config = {
        "seed": seed,
        "bundle": str(paths["bundle"]),
        "output_dir": str(out / "out"),
        "mode": "feature",
        "samples": 512,
        "max_len": 128,
        "calibration": {"tasks": [str(paths["train_task"])]},
        "evaluation": {"text": str(paths["eval_text"]), "tasks": [str(paths["eval_task"])]},
        "strategy": "search",
        "constant": {"beta": 0.5, "last_modules": 2},
        "policy": {"metric": "accuracy", "task": str(paths["eval_task"]), "tau": 0.02},
    }
    paths["config"].write_text(json.dumps(run_config, indent=2) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--items", type=int, default=150)
    args = parser.parse_args(argv)
    paths = make_demo_assets(args.out, seed=args.seed, n_task_items=args.items)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
