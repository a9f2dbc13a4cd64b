"""Performance metrics and compression accounting.

Perplexity is exp(mean negative log-likelihood) over predicted tokens,
teacher-forced with natural logs, scored per document in non-overlapping
windows of the model's max_seq_len. Choice accuracy scores each choice by
the log-likelihood of its continuation given the context, normalized by
continuation length (a switchable convention), ties resolved toward the
lowest choice index. All reductions are single-threaded numpy in a fixed
order, so repeated runs agree bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import ChoiceTask, EvalPortion, SearchPortion, TextCorpus
from .errors import DataError
from .model import DecoderModel, DenseLayer, count_params


@dataclass(frozen=True)
class MetricValue:
    kind: str                 # "perplexity" | "accuracy"
    value: float
    direction: str            # "lower_better" | "higher_better"
    n_items: int


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def token_nlls(model, tokens) -> np.ndarray:
    """Per-position negative log-likelihood of tokens[1:] given the prefix."""
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size < 2:
        return np.zeros(0)
    logprobs = _log_softmax(model.forward(toks))
    return -logprobs[np.arange(toks.size - 1), toks[1:]]


def perplexity(model, corpus: TextCorpus) -> MetricValue:
    window = model.config.max_seq_len
    nlls = []
    for doc in corpus.documents:
        doc = np.asarray(doc, dtype=np.int64)
        for start in range(0, len(doc), window):
            chunk = doc[start:start + window]
            if chunk.size >= 2:
                nlls.append(token_nlls(model, chunk))
    if not nlls:
        raise DataError("corpus has no predictable tokens (all documents shorter than 2)")
    flat = np.concatenate(nlls)
    return MetricValue(
        kind="perplexity",
        value=float(np.exp(flat.mean())),
        direction="lower_better",
        n_items=int(flat.size),
    )


def _as_task(task_like) -> ChoiceTask:
    if isinstance(task_like, (SearchPortion, EvalPortion)):
        return task_like.task
    if isinstance(task_like, ChoiceTask):
        return task_like
    raise TypeError(f"expected a choice task, got {type(task_like).__name__}")


def choice_scores(model, item, normalize: bool = True) -> np.ndarray:
    """Log-likelihood score per choice, teacher-forced over the continuation."""
    max_len = model.config.max_seq_len
    scores = np.empty(len(item.choices))
    for ci, choice in enumerate(item.choices):
        if not choice:
            raise DataError(f"item {item.uid}: empty choice {ci}")
        if len(choice) > max_len - 1:
            raise DataError(
                f"item {item.uid}: choice of {len(choice)} tokens cannot be scored "
                f"within max_seq_len {max_len}"
            )
        ctx_room = max_len - len(choice)
        context = item.context[-ctx_room:] if item.context else ()
        if not context:
            raise DataError(f"item {item.uid}: empty context")
        seq = np.asarray(list(context) + list(choice), dtype=np.int64)
        logprobs = _log_softmax(model.forward(seq))
        first = len(context)
        positions = np.arange(first, seq.size)
        total = float(logprobs[positions - 1, seq[positions]].sum())
        scores[ci] = total / len(choice) if normalize else total
    return scores


def predictions(model, task_like, normalize: bool = True) -> np.ndarray:
    """Argmax choice per item; ties go to the lowest index."""
    task = _as_task(task_like)
    picks = np.empty(len(task.items), dtype=np.int64)
    for i, item in enumerate(task.items):
        scores = choice_scores(model, item, normalize=normalize)
        best = 0
        for ci in range(1, scores.size):
            if scores[ci] > scores[best]:
                best = ci
        picks[i] = best
    return picks


def choice_accuracy(model, task_like, normalize: bool = True) -> MetricValue:
    task = _as_task(task_like)
    picks = predictions(model, task, normalize=normalize)
    golds = np.array([item.gold for item in task.items])
    return MetricValue(
        kind="accuracy",
        value=float((picks == golds).mean()),
        direction="higher_better",
        n_items=len(task.items),
    )


def disagreement(model_a, model_b, task_like, normalize: bool = True) -> float:
    """Fraction of items whose argmax choices differ; symmetric in (a, b)."""
    task = _as_task(task_like)
    pa = predictions(model_a, task, normalize=normalize)
    pb = predictions(model_b, task, normalize=normalize)
    return float((pa != pb).mean())


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetMap:
    """Retained-parameter fraction per linear layer plus the exact aggregate.

    The aggregate is sum(beta_i * p_i) / sum(p_i) over linear layers, kept
    as an integer ratio (retained params / original params) so it is exact.
    Intact layers report 1.0.
    """

    per_layer: dict            # LayerId -> float
    retained_params: int
    original_params: int

    @property
    def aggregate(self) -> float:
        return self.retained_params / self.original_params


def budget_map(model_before: DecoderModel, model_after: DecoderModel) -> BudgetMap:
    if model_before.config != model_after.config:
        raise ValueError("models have different architecture shapes")
    before = count_params(model_before).linear
    after = count_params(model_after).linear
    per_layer = {}
    for lid in model_before.config.layer_ids():
        if not isinstance(model_before.layer(lid), DenseLayer):
            raise ValueError(f"reference model layer {lid.name} is not dense")
        per_layer[lid] = after[lid] / before[lid]
    return BudgetMap(
        per_layer=per_layer,
        retained_params=sum(after.values()),
        original_params=sum(before.values()),
    )


def write_budget_csv(bm: BudgetMap, path) -> None:
    """One row per layer: module_index, kind, retained_fraction."""
    path = Path(path)
    ordered = sorted(bm.per_layer.items(), key=lambda kv: (kv[0].module_index, kv[0].kind))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["module_index", "kind", "retained_fraction"])
        for lid, frac in ordered:
            writer.writerow([lid.module_index, lid.kind, repr(float(frac))])
