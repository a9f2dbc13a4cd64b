"""Surgical per-layer rank search, last layer first.

For each layer, walking from the end of the network toward the start, the
budget grid is tried in ascending order; each candidate is materialized as
a feature-route factorization, written into the working model, and scored
on the search data. The first budget whose score still meets the reference
gate is kept and the walk moves on; if the whole grid fails, the layer is
restored intact. Every decision conditions the next, so the loop is
inherently sequential across layers.

Gate semantics: for higher-better metrics a candidate passes when
value >= P * (1 - tau); for lower-better (perplexity) when
value <= P * (1 + tau). P is measured once on the intact model over the
search data; tau = 0 means "meets or exceeds".

By default gram statistics are the ones gathered on the intact model;
refresh_every_module rebuilds them from the partially decomposed model
after each module is finished, trading one calibration pass per module
for fidelity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import metrics
from .calib import CalibrationSet, SearchPortion, TextCorpus
from .decompose import decompose_feature, rank_for_budget
from .errors import ToolError
from .linalg import GramAccumulator
from .model import REVERSE_DATAFLOW_KINDS, DecoderModel, DenseLayer, LayerId

DEFAULT_BETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class SearchPolicy:
    """What to measure, on which data, and how strict the gate is.

    data must be a SearchPortion (the 20% slice) for accuracy or a
    TextCorpus for perplexity; the held-out evaluation slice is not an
    accepted type, which keeps it out of the search by construction.
    """

    data: object
    metric: str = "accuracy"
    beta_grid: tuple = DEFAULT_BETA_GRID
    tau: float = 0.0
    traversal: tuple | None = None
    refresh_every_module: bool = False
    calibration: CalibrationSet | None = None
    normalize_choice_scores: bool = True

    def __post_init__(self):
        if self.metric not in ("accuracy", "perplexity"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "accuracy" and not isinstance(self.data, SearchPortion):
            raise TypeError("accuracy search requires a SearchPortion (20% slice)")
        if self.metric == "perplexity" and not isinstance(self.data, TextCorpus):
            raise TypeError("perplexity search requires a TextCorpus")
        grid = tuple(float(b) for b in self.beta_grid)
        if not grid or any(not 0.0 < b < 1.0 for b in grid):
            raise ValueError("beta grid values must lie in (0, 1)")
        if any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
            raise ValueError("beta grid must be strictly ascending")
        self.beta_grid = grid
        if self.tau < 0.0:
            raise ValueError("tau must be >= 0")
        if self.refresh_every_module and self.calibration is None:
            raise ValueError("refresh_every_module needs a calibration set")

    @property
    def higher_better(self) -> bool:
        return self.metric == "accuracy"


@dataclass(frozen=True)
class PlanEntry:
    layer: LayerId
    beta: float | None
    rank: int | None
    metric_at_accept: float | None

    @property
    def intact(self) -> bool:
        return self.rank is None

    def to_json_obj(self) -> dict:
        return {
            "module": self.layer.module_index,
            "kind": self.layer.kind,
            "beta": self.beta,
            "rank": self.rank,
            "metric_at_accept": self.metric_at_accept,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PlanEntry":
        return cls(
            layer=LayerId(int(obj["module"]), str(obj["kind"])),
            beta=None if obj.get("beta") is None else float(obj["beta"]),
            rank=None if obj.get("rank") is None else int(obj["rank"]),
            metric_at_accept=(
                None if obj.get("metric_at_accept") is None
                else float(obj["metric_at_accept"])
            ),
        )


@dataclass(frozen=True)
class RankPlan:
    """One entry per visited layer, in traversal order, plus provenance."""

    entries: tuple
    reference: float
    metric: str

    def save(self, path) -> None:
        payload = [e.to_json_obj() for e in self.entries]
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @staticmethod
    def load_entries(path) -> tuple:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(payload, list):
            raise ToolError(f"plan file {path} must hold a JSON array")
        return tuple(PlanEntry.from_json_obj(obj) for obj in payload)


class SearchAborted(ToolError):
    """Metric evaluation failed mid-search; carries the partial plan."""

    exit_code = 4

    def __init__(self, message: str, partial: tuple):
        super().__init__(message)
        self.partial_plan = partial


def default_traversal(config) -> tuple:
    """All layers, last module first, reverse dataflow within a module."""
    return tuple(
        LayerId(m, kind)
        for m in range(config.n_layers - 1, -1, -1)
        for kind in REVERSE_DATAFLOW_KINDS
    )


def gate_passes(value: float, reference: float, tau: float, higher_better: bool) -> bool:
    if higher_better:
        return value >= reference * (1.0 - tau)
    return value <= reference * (1.0 + tau)


def measure(model: DecoderModel, policy: SearchPolicy) -> float:
    if policy.metric == "accuracy":
        return metrics.choice_accuracy(
            model, policy.data, normalize=policy.normalize_choice_scores
        ).value
    return metrics.perplexity(model, policy.data).value


def refresh_gram(model: DecoderModel, calibration: CalibrationSet, layers=None) -> dict:
    """Accumulators rebuilt from the model's current activations.

    One forward pass per calibration sample captures every requested
    layer, so the cost is a single calibration sweep regardless of how
    many layers are refreshed.
    """
    layers = tuple(layers) if layers is not None else model.config.layer_ids()
    bank = {}
    for lid in layers:
        d2, d1 = model.config.layer_shape(lid.kind)
        bank[lid] = GramAccumulator(dim_out=d2, dim_in=d1)
    for sample in calibration.samples:
        caps = model.capture_many(sample, layers)
        for lid, (x, y) in caps.items():
            bank[lid].accumulate(x, y)
    return bank


def surgical_search(
    model: DecoderModel, policy: SearchPolicy, gram_bank: dict
) -> tuple[DecoderModel, RankPlan]:
    """Run the search on a copy of the model; the input stays intact."""
    traversal = policy.traversal or default_traversal(model.config)
    missing = [lid.name for lid in traversal if lid not in gram_bank]
    if missing:
        raise ValueError(f"gram bank is missing layers: {', '.join(missing)}")

    work = model.copy()
    bank = dict(gram_bank)
    entries: list[PlanEntry] = []

    def _try_measure():
        try:
            return measure(work, policy)
        except Exception as exc:
            raise SearchAborted(
                f"metric evaluation failed after {len(entries)} layer decisions: {exc}",
                partial=tuple(entries),
            ) from exc

    reference = _try_measure()

    for pos, lid in enumerate(traversal):
        original = work.layer(lid)
        if not isinstance(original, DenseLayer):
            raise ValueError(f"layer {lid.name} is already factored; search expects a dense model")
        d2, d1 = original.weight.shape
        accepted = None
        for beta in policy.beta_grid:
            rank = rank_for_budget(d2, d1, beta).rank
            candidate = decompose_feature(original.weight, bank[lid], rank)
            work.replace_layer(lid, candidate)
            value = _try_measure()
            if gate_passes(value, reference, policy.tau, policy.higher_better):
                accepted = PlanEntry(lid, beta, rank, value)
                break
        if accepted is None:
            work.replace_layer(lid, original)
            entries.append(PlanEntry(lid, None, None, None))
        else:
            entries.append(accepted)

        module_done = pos + 1 == len(traversal) or traversal[pos + 1].module_index != lid.module_index
        if policy.refresh_every_module and module_done and pos + 1 < len(traversal):
            remaining = traversal[pos + 1:]
            bank.update(refresh_gram(work, policy.calibration, remaining))

    return work, RankPlan(entries=tuple(entries), reference=reference, metric=policy.metric)


def apply_plan(model: DecoderModel, entries, gram_bank: dict | None, mode: str = "feature") -> DecoderModel:
    """Replay a stored plan onto a copy of a dense model.

    Deterministic given the same bundle and gram bank, so replaying an
    emitted plan reproduces the compressed model bit for bit.
    """
    from .decompose import decompose_weight  # local to avoid cycle noise

    work = model.copy()
    for entry in entries:
        if entry.intact:
            continue
        lid = entry.layer
        try:
            layer = work.layer(lid)
        except (KeyError, ValueError) as exc:
            raise ToolError(f"plan entry {lid.name} does not exist in this model") from exc
        if not isinstance(layer, DenseLayer):
            raise ToolError(f"plan entry {lid.name}: layer already factored")
        if mode == "feature":
            if gram_bank is None or lid not in gram_bank:
                raise ToolError(f"feature replay needs gram statistics for {lid.name}")
            work.replace_layer(lid, decompose_feature(layer.weight, gram_bank[lid], entry.rank))
        elif mode == "weight":
            work.replace_layer(lid, decompose_weight(layer.weight, entry.rank))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return work
