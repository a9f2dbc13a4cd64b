"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside the pytest verdicts.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from ranksurgeon import bundle as bundle_io
from ranksurgeon import cli, decompose, demo, metrics
from ranksurgeon.calib import CalibrationSet, SearchPortion, TextCorpus, load_text, make_calibration
from ranksurgeon.decompose import decompose_feature, decompose_weight, rank_for_budget
from ranksurgeon.linalg import GramAccumulator, eigh_symmetric, svd
from ranksurgeon.model import (
    DenseLayer,
    LayerId,
    ModelConfig,
    architecture_param_counts,
    count_params,
    random_model,
)
from ranksurgeon.search import SearchPolicy, apply_plan, refresh_gram, surgical_search

from conftest import desk_config, self_labeled_task


def _criterion(num, ok: bool, detail: str) -> bool:
    print(f"CRITERION {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def llama7b_config() -> ModelConfig:
    return ModelConfig(
        vocab_size=32000, d_model=4096, n_layers=32, n_heads=32,
        d_ff=11008, max_seq_len=2048,
    )


def _constant_beta_total(cfg: ModelConfig, last_modules: int, beta: float,
                         bias: bool) -> int:
    counts = architecture_param_counts(cfg)
    total = counts.embedding + counts.head + counts.norms
    for lid in cfg.layer_ids():
        d2, d1 = cfg.layer_shape(lid.kind)
        if lid.module_index >= cfg.n_layers - last_modules:
            r = rank_for_budget(d2, d1, beta).rank
            total += r * (d1 + d2) + (d2 if bias else 0)
        else:
            total += d2 * d1
    return total


# ---------------------------------------------------------------------------
# 1. parameter accounting against the published totals
# ---------------------------------------------------------------------------

def test_criterion_1a_params_last12_beta046():
    cfg = llama7b_config()
    totals = {bias: _constant_beta_total(cfg, 12, 0.46, bias) for bias in (False, True)}
    values = {k: v / 1e9 for k, v in totals.items()}
    ok = all(abs(v - 5.4) <= 0.05 for v in values.values())
    _criterion("1a", ok,
               f"last 12 modules at beta 0.46: {values[False]:.4f}B (weight) / "
               f"{values[True]:.4f}B (feature) vs 5.4B +/- 0.05B")
    assert ok


def test_criterion_1b_params_last24_beta033():
    cfg = llama7b_config()
    totals = {bias: _constant_beta_total(cfg, 24, 0.33, bias) for bias in (False, True)}
    values = {k: v / 1e9 for k, v in totals.items()}
    ok = all(abs(v - 3.4) <= 0.05 for v in values.values())
    _criterion("1b", ok,
               f"last 24 modules at beta 0.33: {values[False]:.4f}B (weight) / "
               f"{values[True]:.4f}B (feature) vs 3.4B +/- 0.05B")
    assert ok


# ---------------------------------------------------------------------------
# 2. layer count
# ---------------------------------------------------------------------------

def test_criterion_2_layer_count():
    n = len(llama7b_config().layer_ids())
    ok = n == 224
    _criterion(2, ok, f"{n} decomposable linear layers (expected 224)")
    assert ok


# ---------------------------------------------------------------------------
# 3. Eckart-Young oracle suite
# ---------------------------------------------------------------------------

def test_criterion_3_eckart_young_suite():
    rng = np.random.default_rng(12345)
    worst_gap = 0.0
    beaten_all = True
    for trial in range(50):
        d2 = int(rng.integers(2, 17))
        d1 = int(rng.integers(2, 13))
        m = rng.standard_normal((d2, d1))
        sigma = svd(m).sigma
        for r in range(1, min(d1, d2) + 1):
            fac = decompose_weight(m, r)
            err = float(np.linalg.norm(m - fac.w_down @ fac.w_up))
            tail = float(np.sqrt(np.sum(sigma[r:] ** 2)))
            worst_gap = max(worst_gap, abs(err - tail))
            downs = rng.standard_normal((1000, d2, r))
            ups = rng.standard_normal((1000, r, d1))
            rand_errs = np.linalg.norm(m - downs @ ups, axis=(1, 2))
            beaten_all &= bool(np.all(err <= rand_errs + 1e-12))
    ok = worst_gap <= 1e-8 and beaten_all
    _criterion(3, ok,
               f"50 matrices, all ranks: max |err - tail sigma| = {worst_gap:.2e}, "
               f"optimal beat all 1000 random factor pairs: {beaten_all}")
    assert ok


# ---------------------------------------------------------------------------
# 4. feature-decomposition invariants at desk scale
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_calibrated(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_config()
    model = random_model(cfg, seed=424)
    text = demo.make_text(root / "calib.txt", seed=425, n_docs=600, words_per_doc=40)
    corpus = load_text(text)
    calibration = make_calibration(corpus, d_samples=512, max_len=128, seed=426)
    bank = refresh_gram(model, calibration)
    return model, calibration, bank


def test_criterion_4_feature_invariants(desk_calibrated):
    model, calibration, bank = desk_calibrated
    cfg = model.config
    lids = cfg.layer_ids()

    # (a) full-rank feature factors reproduce the logits
    full = model.copy()
    for lid in lids:
        w = model.layer(lid).weight
        full.replace_layer(lid, decompose_feature(w, bank[lid], rank=w.shape[0]))
    rng = np.random.default_rng(427)
    max_logit_dev = 0.0
    for _ in range(25):
        toks = rng.integers(0, cfg.vocab_size, size=int(rng.integers(4, 129)))
        max_logit_dev = max(
            max_logit_dev, float(np.max(np.abs(full.forward(toks) - model.forward(toks))))
        )
    ok_a = max_logit_dev <= 1e-4

    # mid-rank factored layers and full eigenbases for (b) and (c)
    halves, bases, eigvals = {}, {}, {}
    for lid in lids:
        w = model.layer(lid).weight
        d2, d1 = w.shape
        halves[lid] = decompose_feature(w, bank[lid], rank_for_budget(d2, d1, 0.5).rank)
        res = eigh_symmetric(bank[lid].gram)
        bases[lid] = res.eigenvectors
        eigvals[lid] = res.eigenvalues

    resid_sum = {lid: np.zeros(cfg.layer_shape(lid.kind)[0]) for lid in lids}
    y_sq_sum = {lid: 0.0 for lid in lids}
    energy = {lid: np.zeros(cfg.layer_shape(lid.kind)[0]) for lid in lids}
    n_cols = 0
    for sample in calibration.samples:
        caps = model.capture_many(sample, lids)
        n_cols += caps[lids[0]][0].shape[1]
        for lid, (x, y) in caps.items():
            fac = halves[lid]
            y_tilde = fac.w_down @ (fac.w_up @ x) + fac.bias[:, None]
            resid_sum[lid] += (y_tilde - y).sum(axis=1)
            y_sq_sum[lid] += float(np.sum(y * y))
            energy[lid] += np.sum((bases[lid].T @ y) ** 2, axis=1)

    worst_resid = 0.0
    worst_energy = 0.0
    for lid in lids:
        scale = np.sqrt(y_sq_sum[lid] / n_cols)  # RMS column norm of Y
        worst_resid = max(worst_resid, float(np.linalg.norm(resid_sum[lid] / n_cols)) / scale)
        lam = eigvals[lid]
        gap = np.max(np.abs(energy[lid] - lam)) / max(lam[0], 1.0)
        worst_energy = max(worst_energy, float(gap))
    ok_b = worst_resid <= 1e-8
    ok_c = worst_energy <= 1e-8

    ok = ok_a and ok_b and ok_c
    _criterion(4, ok,
               f"(a) full-rank logit dev {max_logit_dev:.2e} <= 1e-4: {ok_a}; "
               f"(b) residual mean {worst_resid:.2e} <= 1e-8 rel: {ok_b}; "
               f"(c) eigen-energy gap {worst_energy:.2e} <= 1e-8 rel: {ok_c}")
    assert ok


# ---------------------------------------------------------------------------
# 5. feature route beats weight route under anisotropy
# ---------------------------------------------------------------------------

def test_criterion_5_feature_beats_weight():
    rng = np.random.default_rng(54321)
    wins, trials = 0, 50
    for _ in range(trials):
        d2 = int(rng.integers(8, 25))
        d1 = int(rng.integers(8, 33))
        n = 40 * d1
        w = rng.standard_normal((d2, d1))
        u_m, _, vt_m = np.linalg.svd(rng.standard_normal((d1, d1)))
        a = u_m @ np.diag(np.logspace(0, -1.5, d1)) @ vt_m
        x = a @ rng.standard_normal((d1, n))
        cov_eigs = np.linalg.eigvalsh(x @ x.T)
        assert cov_eigs.max() / max(cov_eigs.min(), 1e-300) >= 100.0
        rank = rank_for_budget(d2, d1, 0.4).rank
        acc = GramAccumulator(dim_out=d2, dim_in=d1)
        acc.accumulate(x, w @ x)
        dense = DenseLayer(w)
        e_f = decompose.approximation_error(dense, decompose_feature(w, acc, rank), x).value
        e_w = decompose.approximation_error(dense, decompose_weight(w, rank), x).value
        wins += e_f <= e_w
    ok = wins >= int(0.9 * trials)
    _criterion(5, ok, f"feature error <= weight error in {wins}/{trials} trials (need >= 45)")
    assert ok


# ---------------------------------------------------------------------------
# 6. surgical search equals brute-force grid enumeration
# ---------------------------------------------------------------------------

def test_criterion_6_search_vs_bruteforce(two_layer_toy):
    toy = two_layer_toy
    golds = np.array([it.gold for it in toy.task.items])
    d2, d1 = toy.model.config.layer_shape("d")

    def factored(lid, beta):
        rank = rank_for_budget(d2, d1, beta).rank
        return decompose_feature(toy.model.layer(lid).weight, toy.gram_bank[lid], rank)

    def accuracy(model):
        return float((metrics.predictions(model, toy.task) == golds).mean())

    reference = accuracy(toy.model)

    # all 81 grid assignments, each applied front-to-back on a fresh copy
    stage1_pass = {}
    feasible = {}
    for b_late in toy.grid:
        for b_early in toy.grid:
            work = toy.model.copy()
            work.replace_layer(toy.late, factored(toy.late, b_late))
            first_ok = accuracy(work) >= reference
            stage1_pass[b_late] = first_ok
            work.replace_layer(toy.early, factored(toy.early, b_early))
            second_ok = accuracy(work) >= reference
            feasible[(b_late, b_early)] = first_ok and second_ok

    oracle_late = next(b for b in toy.grid if stage1_pass[b])
    oracle_early = next(b for b in toy.grid if feasible[(oracle_late, b)])
    lex_first = next(
        (bl, be) for bl in toy.grid for be in toy.grid if feasible[(bl, be)]
    )
    unique = lex_first == (oracle_late, oracle_early)

    policy = SearchPolicy(
        data=SearchPortion(toy.task), metric="accuracy",
        beta_grid=toy.grid, tau=0.0, traversal=toy.traversal,
    )
    _, plan = surgical_search(toy.model, policy, toy.gram_bank)
    got = tuple((e.layer, e.beta) for e in plan.entries)
    want = ((toy.late, oracle_late), (toy.early, oracle_early))
    ok = unique and got == want and (oracle_late, oracle_early) == (0.3, 0.7)
    _criterion(6, ok,
               f"brute-force plan (late {oracle_late}, early {oracle_early}), unique: {unique}, "
               f"surgical plan matches: {got == want}")
    assert ok


# ---------------------------------------------------------------------------
# 7. search soundness and minimality at desk scale
# ---------------------------------------------------------------------------

def test_criterion_7_search_soundness_minimality():
    cfg = desk_config()
    model = random_model(cfg, seed=707)
    rng = np.random.default_rng(708)

    # give six layers exact low-rank structure at known budget thresholds so
    # the accepted budgets spread across the grid
    engineered = {
        LayerId(0, "v"): 0.3, LayerId(1, "g"): 0.4, LayerId(1, "o"): 0.5,
        LayerId(2, "u"): 0.6, LayerId(2, "k"): 0.2, LayerId(3, "q"): 0.7,
    }
    for lid, beta in engineered.items():
        d2, d1 = cfg.layer_shape(lid.kind)
        r = rank_for_budget(d2, d1, beta).rank
        a = rng.standard_normal((d2, r))
        b = rng.standard_normal((r, d1))
        model.replace_layer(lid, DenseLayer((a @ b) / np.sqrt(r) / np.sqrt(d1)))

    samples = tuple(rng.integers(0, 256, size=64) for _ in range(48))
    calibration = CalibrationSet(samples=samples, sample_count=48, max_len=64,
                                 with_replacement=False)
    bank = refresh_gram(model, calibration)
    task = self_labeled_task(model, rng, n_items=60, n_choices=3)
    policy = SearchPolicy(data=SearchPortion(task), metric="accuracy", tau=0.02)
    compressed, plan = surgical_search(model, policy, bank)

    # (a) the final model satisfies the gate on the search split
    final_acc = metrics.choice_accuracy(compressed, task).value
    ok_a = final_acc >= plan.reference * (1.0 - policy.tau)

    # (b) strictly fewer parameters unless everything stayed intact
    p_before = count_params(model).total
    p_after = count_params(compressed).total
    any_factored = any(not e.intact for e in plan.entries)
    ok_b = (p_after < p_before) if any_factored else (p_after == p_before)

    # (c) for sampled accepted layers, one grid step less fails the gate
    eligible = [
        (i, e) for i, e in enumerate(plan.entries)
        if not e.intact and e.beta > policy.beta_grid[0] + 1e-9
    ]
    pick = rng.permutation(len(eligible))[:5]
    ok_c = len(eligible) >= 5
    for idx in pick:
        pos, entry = eligible[idx]
        prev_beta = policy.beta_grid[policy.beta_grid.index(entry.beta) - 1]
        work = apply_plan(model, plan.entries[:pos], bank, mode="feature")
        d2, d1 = cfg.layer_shape(entry.layer.kind)
        smaller = decompose_feature(
            model.layer(entry.layer).weight, bank[entry.layer],
            rank_for_budget(d2, d1, prev_beta).rank,
        )
        work.replace_layer(entry.layer, smaller)
        value = metrics.choice_accuracy(work, task).value
        ok_c &= value < plan.reference * (1.0 - policy.tau)

    ok = ok_a and ok_b and ok_c
    accepted = sorted(e.beta for e in plan.entries if not e.intact)
    _criterion(7, ok,
               f"(a) final acc {final_acc:.3f} vs gate {plan.reference * 0.98:.3f}: {ok_a}; "
               f"(b) params {p_before} -> {p_after}: {ok_b}; "
               f"(c) beta-0.1 fails for 5/{len(eligible)} sampled accepted layers: {ok_c}; "
               f"accepted betas {accepted}")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism and replay at the command level
# ---------------------------------------------------------------------------

def test_criterion_8_determinism_replay(tmp_path):
    tiny = dict(vocab_size=256, d_model=32, n_layers=2, n_heads=4,
                d_ff=48, max_seq_len=64, norm_epsilon=1e-5)
    paths = demo.make_demo_assets(tmp_path, seed=88, config=tiny, n_task_items=60)
    cfg = cli.load_config(paths["config"])
    cfg.samples, cfg.max_len = 32, 48
    cfg.strategy = "search"
    cfg.policy = {"metric": "accuracy", "task": paths["eval_task"], "tau": 0.02}

    cfg.output_dir = str(tmp_path / "r1")
    cli.cmd_calibrate(cfg)
    out1 = cli.cmd_compress(cfg)
    h1 = bundle_io.file_sha256(out1)

    cfg2 = cli.load_config(paths["config"])
    cfg2.samples, cfg2.max_len = 32, 48
    cfg2.strategy = "search"
    cfg2.policy = {"metric": "accuracy", "task": paths["eval_task"], "tau": 0.02}
    cfg2.output_dir = str(tmp_path / "r2")
    cli.cmd_calibrate(cfg2)
    out2 = cli.cmd_compress(cfg2)
    same_rerun = bundle_io.file_sha256(out2) == h1

    cfg3 = cli.load_config(paths["config"])
    cfg3.output_dir = str(tmp_path / "r3")
    cfg3.strategy = "replay"
    cfg3.plan = str(tmp_path / "r1" / "plan.json")
    cfg3.gram_bank = str(Path(tmp_path / "r1") / "gram.bundle")
    out3 = cli.cmd_compress(cfg3)
    same_replay = bundle_io.file_sha256(out3) == h1

    ok = same_rerun and same_replay
    _criterion(8, ok,
               f"rerun bundle hash identical: {same_rerun}; "
               f"plan replay reproduces hash: {same_replay} ({h1[:12]}...)")
    assert ok


# ---------------------------------------------------------------------------
# 9. metric sanity
# ---------------------------------------------------------------------------

def test_criterion_9_metric_sanity(two_layer_toy):
    cfg = desk_config()
    uniform = random_model(cfg, seed=909)
    uniform.head = np.zeros_like(uniform.head)
    corpus = TextCorpus(name="c", documents=(tuple(range(100)), tuple(range(7, 77))))
    ppl = metrics.perplexity(uniform, corpus).value
    ok_ppl = abs(ppl - cfg.vocab_size) <= 1e-6

    toy = two_layer_toy
    pairs_ok = True
    details = []
    pairs = []
    for seed in (910, 911):
        pairs.append((random_model(toy.model.config, seed=seed),
                      random_model(toy.model.config, seed=seed + 50)))
    compressed, _ = surgical_search(
        toy.model,
        SearchPolicy(data=SearchPortion(toy.task), metric="accuracy",
                     beta_grid=toy.grid, tau=0.0, traversal=toy.traversal),
        toy.gram_bank,
    )
    pairs.append((toy.model, compressed))
    for a, b in pairs:
        acc_a = metrics.choice_accuracy(a, toy.task).value
        acc_b = metrics.choice_accuracy(b, toy.task).value
        dis = metrics.disagreement(a, b, toy.task)
        pairs_ok &= abs(acc_a - acc_b) <= dis + 1e-12
        details.append(f"|{acc_a:.2f}-{acc_b:.2f}|<={dis:.2f}")

    ok = ok_ppl and pairs_ok
    _criterion(9, ok,
               f"uniform-logit ppl {ppl:.9f} vs vocab {cfg.vocab_size}: {ok_ppl}; "
               f"delta<=disagreement on {len(pairs)} pairs: {pairs_ok} ({'; '.join(details)})")
    assert ok
