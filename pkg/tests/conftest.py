import numpy as np
import pytest

from ranksurgeon import metrics
from ranksurgeon.calib import ChoiceItem, ChoiceTask
from ranksurgeon.decompose import decompose_feature, rank_for_budget
from ranksurgeon.linalg import GramAccumulator
from ranksurgeon.model import DenseLayer, LayerId, ModelConfig, random_model


def desk_config(**overrides) -> ModelConfig:
    """Desk-scale defaults: byte vocabulary, decompositions in milliseconds."""
    base = dict(
        vocab_size=256, d_model=64, n_layers=4, n_heads=4,
        d_ff=172, max_seq_len=128, norm_epsilon=1e-5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=256, d_model=32, n_layers=2, n_heads=4,
        d_ff=48, max_seq_len=64, norm_epsilon=1e-5,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def desk_model():
    return random_model(desk_config(), seed=101)


@pytest.fixture(scope="session")
def tiny_model():
    return random_model(tiny_config(), seed=7)


def random_tokens(rng: np.random.Generator, length: int, vocab: int = 256) -> np.ndarray:
    return rng.integers(0, vocab, size=length)


def make_task(items) -> ChoiceTask:
    return ChoiceTask(name="synthetic", items=tuple(items))


def self_labeled_task(model, rng, n_items, n_choices=3, ctx_len=(8, 13),
                      choice_len=4, margin=1e-3) -> ChoiceTask:
    """Items whose gold label is the intact model's own argmax choice.

    The intact model scores 1.0 by construction, which makes performance
    gates bind: any factorization that flips an argmax shows up as an
    accuracy drop. Items with a top-two score margin below `margin` are
    discarded so float-level perturbations cannot flip labels.
    """
    items = []
    uid = 0
    while len(items) < n_items:
        ctx = tuple(int(t) for t in rng.integers(0, model.config.vocab_size, size=int(rng.integers(*ctx_len))))
        choices = tuple(
            tuple(int(t) for t in rng.integers(0, model.config.vocab_size, size=choice_len))
            for _ in range(n_choices)
        )
        probe = ChoiceItem(context=ctx, choices=choices, gold=0, uid=uid)
        scores = metrics.choice_scores(model, probe)
        order = np.argsort(scores)[::-1]
        if scores[order[0]] - scores[order[1]] < margin:
            continue
        items.append(ChoiceItem(context=ctx, choices=choices, gold=int(order[0]), uid=uid))
        uid += 1
    return make_task(items)


class TwoLayerToy:
    """A 2-layer model with a sharp, known per-layer tolerance profile.

    The down-projection of module 1 is given an exactly rank-5 weight and
    module 0's an exactly rank-13 one. On the budget grid for a (32, 48)
    layer (kappa = 19.2) the feature route therefore reconstructs module
    1's layer exactly from beta = 0.3 (rank 5) upward and module 0's from
    beta = 0.7 (rank 13) upward; below those budgets the truncation is
    lossy. The task items are chosen adversarially so every lossy budget
    flips at least one of the model's own argmax labels, pinning the
    accuracy gate profile to exactly (module1.d: 0.3, module0.d: 0.7).
    """

    SEED = 2024

    def __init__(self):
        cfg = tiny_config()
        seed = self.SEED
        rng = np.random.default_rng(seed)
        model = random_model(cfg, seed=seed)
        d2, d1 = cfg.layer_shape("d")
        self.r_late = rank_for_budget(d2, d1, 0.3).rank     # 5
        self.r_early = rank_for_budget(d2, d1, 0.7).rank    # 13

        def low_rank_weight(r):
            a = rng.standard_normal((d2, r))
            b = rng.standard_normal((r, d1))
            return (a @ b) / np.sqrt(r) / np.sqrt(d1)

        self.late = LayerId(1, "d")
        self.early = LayerId(0, "d")
        model.blocks[1].layers["d"] = DenseLayer(low_rank_weight(self.r_late))
        model.blocks[0].layers["d"] = DenseLayer(low_rank_weight(self.r_early))

        lids = (self.late, self.early)
        bank = {lid: GramAccumulator(dim_out=d2, dim_in=d1) for lid in lids}
        cal_samples = tuple(rng.integers(0, 256, size=48) for _ in range(40))
        for toks in cal_samples:
            for lid, (x, y) in model.capture_many(toks, lids).items():
                bank[lid].accumulate(x, y)
        self.calibration_samples = cal_samples

        pool = self_labeled_task(model, rng, n_items=120, n_choices=3)
        golds = np.array([it.gold for it in pool.items])

        def flips(lineup):
            work = model.copy()
            for lid, rank in lineup:
                work.replace_layer(
                    lid, decompose_feature(model.layer(lid).weight, bank[lid], rank)
                )
            picks = metrics.predictions(work, pool)
            return np.flatnonzero(picks != golds)

        fail_conditions = [
            [(self.late, rank_for_budget(d2, d1, b).rank)] for b in (0.1, 0.2)
        ] + [
            [(self.late, self.r_late), (self.early, rank_for_budget(d2, d1, b).rank)]
            for b in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
        ]
        chosen = []
        for lineup in fail_conditions:
            hit = flips(lineup)
            assert hit.size > 0, "toy construction lost a fail condition; reseed"
            if not any(i in chosen for i in hit):
                chosen.append(int(hit[0]))
        padding = [i for i in range(len(pool.items)) if i not in chosen][:16]
        keep = sorted(chosen + padding)
        self.task = make_task(
            ChoiceItem(context=pool.items[i].context, choices=pool.items[i].choices,
                       gold=pool.items[i].gold, uid=new_uid)
            for new_uid, i in enumerate(keep)
        )
        self.model = model
        self.gram_bank = bank
        self.traversal = (self.late, self.early)
        self.grid = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@pytest.fixture(scope="session")
def two_layer_toy():
    return TwoLayerToy()
