"""Calibration and evaluation data: tokenizers, corpora, tasks, splits.

File formats:
- text corpus: UTF-8 plain text, documents separated by blank lines
- choice tasks: JSONL, one object per line:
  {"context": str, "choices": [str, ...], "gold": int}

All randomness here is integer-exact so splits and samples reproduce
across platforms. The PRNG is splitmix64 (constants 0x9E3779B97F4A7C15,
0xBF58476D1CE4E5B9, 0x94D049BB133111EB) and shuffles are Fisher-Yates
with indices drawn as next_u64() % (i + 1). Named sub-seeds derive from
one run seed via SHA-256 of "<seed>\\x1f<purpose>".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Deterministic 64-bit mixing PRNG, pure integer arithmetic."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("randbelow needs n >= 1")
        return self.next_u64() % n


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 64-bit sub-seed for a labeled purpose."""
    digest = hashlib.sha256(f"{seed}\x1f{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def fisher_yates_permutation(n: int, seed: int) -> list[int]:
    idx = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.randbelow(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


# ---------------------------------------------------------------------------
# tokenizers
# ---------------------------------------------------------------------------

class ByteTokenizer:
    """UTF-8 byte-level tokenizer: 256 symbols, lossless round trip."""

    vocab_size = 256
    name = "byte"

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8")


class VocabTokenizer:
    """Character tokenizer over an explicit vocabulary file.

    The file is a JSON array of single-character strings; ids follow the
    array order. Unknown characters are rejected.
    """

    def __init__(self, path):
        path = Path(path)
        try:
            symbols = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read vocabulary file {path}: {exc}") from exc
        if not isinstance(symbols, list) or not symbols:
            raise DataError(f"vocabulary file {path} must hold a non-empty JSON array")
        self._to_id = {s: i for i, s in enumerate(symbols)}
        self._symbols = list(symbols)
        self.vocab_size = len(symbols)
        self.name = f"vocab:{hashlib.sha256(json.dumps(symbols).encode()).hexdigest()[:12]}"

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids) -> str:
        return "".join(self._symbols[int(i)] for i in ids)


def load_tokenizer(spec: str = "byte"):
    if spec == "byte":
        return ByteTokenizer()
    return VocabTokenizer(spec)


# ---------------------------------------------------------------------------
# corpora and choice tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextCorpus:
    name: str
    documents: tuple  # tuple of tuple[int, ...]

    def __post_init__(self):
        if not self.documents:
            raise DataError(f"corpus {self.name!r} has no documents")


@dataclass(frozen=True)
class ChoiceItem:
    context: tuple
    choices: tuple  # tuple of tuple[int, ...]
    gold: int
    uid: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise DataError(f"item {self.uid}: needs at least 2 choices")
        if not 0 <= self.gold < len(self.choices):
            raise DataError(f"item {self.uid}: gold index {self.gold} out of range")


@dataclass(frozen=True)
class ChoiceTask:
    name: str
    items: tuple  # tuple of ChoiceItem

    def __post_init__(self):
        if not self.items:
            raise DataError(f"task {self.name!r} has no items")

    def subset(self, uids, suffix: str) -> "ChoiceTask":
        keep = set(uids)
        return ChoiceTask(
            name=f"{self.name}:{suffix}",
            items=tuple(it for it in self.items if it.uid in keep),
        )


def load_text(path, tokenizer=None) -> TextCorpus:
    """Plain-text corpus, documents separated by blank lines."""
    tokenizer = tokenizer or ByteTokenizer()
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    docs = []
    for chunk in raw.split("\n\n"):
        chunk = chunk.strip("\n")
        if chunk:
            docs.append(tuple(tokenizer.encode(chunk)))
    if not docs:
        raise DataError(f"corpus {path} is empty")
    return TextCorpus(name=path.name, documents=tuple(docs))


def load_choices(path, tokenizer=None) -> ChoiceTask:
    """JSONL multiple-choice task; malformed lines are rejected by number."""
    tokenizer = tokenizer or ByteTokenizer()
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read task {path}: {exc}") from exc
    items = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            context = obj["context"]
            choices = obj["choices"]
            gold = obj["gold"]
            if not isinstance(context, str) or not isinstance(choices, list) \
                    or not isinstance(gold, int):
                raise ValueError("wrong field types")
            item = ChoiceItem(
                context=tuple(tokenizer.encode(context)),
                choices=tuple(tuple(tokenizer.encode(c)) for c in choices),
                gold=gold,
                uid=len(items),
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: malformed item: {exc}") from exc
        items.append(item)
    if not items:
        raise DataError(f"task {path} is empty")
    return ChoiceTask(name=path.name, items=tuple(items))


# ---------------------------------------------------------------------------
# 20/80 split with a type-level leakage firewall
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchPortion:
    """The 20% slice; the only task container search routines accept."""

    task: ChoiceTask


@dataclass(frozen=True)
class EvalPortion:
    """The held-out 80% slice, touched only by final reporting."""

    task: ChoiceTask


@dataclass(frozen=True)
class Split:
    search_part: SearchPortion
    eval_part: EvalPortion
    seed: int
    search_ids: tuple
    eval_ids: tuple


def split_20_80(task: ChoiceTask, seed: int) -> Split:
    """Deterministic disjoint split; search side gets floor(0.2 * n) items."""
    n = len(task.items)
    if n < 5:
        raise DataError(f"task {task.name!r} has {n} items; need at least 5 to split")
    perm = fisher_yates_permutation(n, seed)
    n_search = int(0.2 * n)
    search_ids = tuple(sorted(task.items[i].uid for i in perm[:n_search]))
    eval_ids = tuple(sorted(task.items[i].uid for i in perm[n_search:]))
    return Split(
        search_part=SearchPortion(task.subset(search_ids, "search20")),
        eval_part=EvalPortion(task.subset(eval_ids, "eval80")),
        seed=seed,
        search_ids=search_ids,
        eval_ids=eval_ids,
    )


# ---------------------------------------------------------------------------
# calibration sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple  # tuple of np.ndarray token sequences, each <= max_len
    sample_count: int
    max_len: int
    with_replacement: bool
    sources: tuple = field(default=())


def _item_sequence(item: ChoiceItem, max_len: int) -> np.ndarray:
    seq = list(item.context) + list(item.choices[item.gold])
    return np.asarray(seq[:max_len], dtype=np.int64)


def _doc_sequence(doc, max_len: int) -> np.ndarray:
    return np.asarray(list(doc)[:max_len], dtype=np.int64)


def _draw(pool_size: int, quota: int, rng: SplitMix64) -> tuple[list[int], bool]:
    """Indices into a pool: uniform without replacement when it fits."""
    if pool_size >= quota:
        perm = list(range(pool_size))
        for i in range(pool_size - 1, 0, -1):
            j = rng.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm[:quota], False
    return [rng.randbelow(pool_size) for _ in range(quota)], True


def make_calibration(
    source,
    d_samples: int = 512,
    max_len: int = 128,
    seed: int = 0,
    exclude=(),
) -> CalibrationSet:
    """Draw exactly d_samples token sequences for statistics gathering.

    source is a TextCorpus, a ChoiceTask, or a list of ChoiceTasks; with
    several tasks each contributes an equal share per batch (remainder
    spread over the first tasks). Items named in exclude (Split objects
    or uid collections, aligned with the task list) are never drawn, which
    keeps the held-out evaluation slice out of calibration. Sources
    smaller than their quota are drawn with replacement and flagged.
    """
    if d_samples < 1:
        raise ValueError("d_samples must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    if isinstance(source, TextCorpus):
        rng = SplitMix64(derive_seed(seed, f"calibration:{source.name}"))
        idx, replaced = _draw(len(source.documents), d_samples, rng)
        samples = tuple(_doc_sequence(source.documents[i], max_len) for i in idx)
        return CalibrationSet(samples, d_samples, max_len, replaced, (source.name,))

    tasks = [source] if isinstance(source, ChoiceTask) else list(source)
    if not tasks:
        raise ValueError("no calibration source given")
    excludes = list(exclude) if not isinstance(exclude, Split) else [exclude]
    banned_by_task = {}
    for i, exc in enumerate(excludes):
        if exc is None:
            continue
        banned_by_task[i] = set(exc.eval_ids) if isinstance(exc, Split) else set(exc)

    quotas = [d_samples // len(tasks)] * len(tasks)
    for i in range(d_samples % len(tasks)):
        quotas[i] += 1

    samples = []
    replaced_any = False
    for i, (task, quota) in enumerate(zip(tasks, quotas)):
        if quota == 0:
            continue
        banned = banned_by_task.get(i, set())
        pool = [it for it in task.items if it.uid not in banned]
        if not pool:
            raise DataError(f"task {task.name!r}: no items left after exclusions")
        rng = SplitMix64(derive_seed(seed, f"calibration:{task.name}"))
        idx, replaced = _draw(len(pool), quota, rng)
        replaced_any |= replaced
        samples.extend(_item_sequence(pool[j], max_len) for j in idx)
    return CalibrationSet(
        tuple(samples), d_samples, max_len, replaced_any,
        tuple(t.name for t in tasks),
    )
