"""Acceptance gate: every shipped guarantee, one verdict line each.

Each test exercises one end-to-end guarantee at its stated tolerance and
appends a single PASS/FAIL line to the summary printed after the run.
Budgets here are deliberate: these tests train real models.
"""

import time

import numpy as np
import pytest

import naive_reference as ref
from scenevoice.autodiff import value_of
from scenevoice.cli import EXIT_OK, main
from scenevoice.config import apply_master_seed, config_from_tree, default_dict
from scenevoice.evaluate import cross_modal_recall, decoupling_margins, run_baseline
from scenevoice.gradcheck import check_gradients, random_instance
from scenevoice.model import MemoryAligner
from scenevoice.rng import make_rng
from scenevoice.synth import build_world, generate_dataset, sample_eval_pairs
from scenevoice.train import fit, load_checkpoint, restore_trainer, save_checkpoint

MASTER_SEEDS = (0, 1, 2, 3, 4)


def _verdict(log, name, ok, detail):
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    log.append(line)
    print(line)
    assert ok, line


def _seeded_config(seed, **sections):
    tree = default_dict()
    apply_master_seed(tree, seed)
    for section, fields in sections.items():
        tree[section].update(fields)
    return config_from_tree(tree)


def _train_from_config(cfg, step_callback=None):
    world, pairs, _ = generate_dataset(
        cfg.world, cfg.data.n_samples, cfg.data.mode_mix, cfg.data.data_seed
    )
    model = MemoryAligner.create(
        cfg.model.slot_count, cfg.world.dim, make_rng(cfg.model.init_seed),
        cfg.train.temperature, cfg.train.np_dtype(),
    )
    result = fit(model, pairs, cfg.train, step_callback=step_callback)
    return world, pairs, model, result


# ---------------------------------------------------------------------------
# shared expensive runs


@pytest.fixture(scope="session")
def default_run():
    """The stock configuration trained end to end, instrumented per step."""
    cfg = config_from_tree(default_dict())
    sum_dev = 0.0  # worst |row sum - 1| over every weight matrix of every step
    min_entry = np.inf

    def watch_weights(step, bd, outputs):
        nonlocal sum_dev, min_entry
        for pathway in (outputs.visual, outputs.auditory):
            for w in (pathway.timbre_weights, pathway.sound_weights):
                arr = value_of(w)
                sum_dev = max(sum_dev, float(np.abs(arr.sum(axis=1) - 1.0).max()))
                min_entry = min(min_entry, float(arr.min()))

    t0 = time.perf_counter()
    world, pairs, model, result = _train_from_config(cfg, step_callback=watch_weights)
    elapsed = time.perf_counter() - t0
    eval_pairs = sample_eval_pairs(world, cfg.data.eval_pairs, make_rng(cfg.data.eval_seed))
    return {
        "cfg": cfg,
        "history": result.history,
        "ratio": result.history[-1].total / result.history[0].total,
        "recall1": cross_modal_recall(model, eval_pairs, 1),
        "elapsed": elapsed,
        "weight_sum_dev": sum_dev,
        "weight_min_entry": min_entry,
    }


@pytest.fixture(scope="session")
def margin_runs():
    """Per master seed: margins with the full objective and with both
    consistency weights zeroed, on identical data and budgets."""
    rows = []
    for seed in MASTER_SEEDS:
        full_cfg = _seeded_config(seed)
        world, _, model, _ = _train_from_config(full_cfg)
        tm, em = decoupling_margins(
            model, world, full_cfg.eval.n_probe, make_rng(full_cfg.eval.probe_seed)
        )

        ablated_cfg = _seeded_config(seed)
        ablated_cfg.train.loss_weights.timbre = 0.0
        ablated_cfg.train.loss_weights.environment = 0.0
        _, _, bare_model, _ = _train_from_config(ablated_cfg)
        tm0, _ = decoupling_margins(
            bare_model, world, ablated_cfg.eval.n_probe, make_rng(ablated_cfg.eval.probe_seed)
        )
        rows.append({"seed": seed, "timbre": tm, "env": em, "timbre_ablated": tm0})
    return rows


@pytest.fixture(scope="session")
def fusion_runs():
    """Aligner vs both fusion baselines on the compositional nonlinear world,
    equal data, optimizer, and step budget per seed."""
    rows = []
    for seed in MASTER_SEEDS:
        cfg = _seeded_config(
            seed,
            world={"n_characters": 16, "n_environments": 16, "linear_visual": False},
            data={"n_samples": 4096, "eval_pairs": 128},
            train={"steps": 3000},
        )
        world, pairs, model, _ = _train_from_config(cfg)
        eval_pairs = sample_eval_pairs(world, cfg.data.eval_pairs, make_rng(cfg.data.eval_seed))
        aligner = cross_modal_recall(model, eval_pairs, 1)
        concat = run_baseline(
            "concat_fusion", pairs, cfg.train, eval_pairs,
            dim=cfg.world.dim, init_seed=cfg.model.init_seed,
        ).recall_at_1
        attn = run_baseline(
            "attn_fusion", pairs, cfg.train, eval_pairs,
            dim=cfg.world.dim, slot_count=cfg.model.slot_count,
            init_seed=cfg.model.init_seed,
        ).recall_at_1
        rows.append({"seed": seed, "aligner": aligner, "concat": concat, "attn": attn})
    return rows


# ---------------------------------------------------------------------------
# verdicts


def test_gradient_fidelity(acceptance_log):
    # 100 random instances spanning slot counts 2..8 and dims 3..16, both
    # teacher modes, default term weights, h=1e-5, rel tol 1e-4, f64
    t0 = time.perf_counter()
    reports = []
    for seed in range(100):
        model, batch = random_instance(
            seed, n_slots=2 + seed % 7, dim=3 + seed % 14, rows=4 + seed % 3
        )
        for mode in (True, False):
            reports.extend(check_gradients(model, batch, detach_teacher=mode))
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in reports)
    ok = all(r.passed for r in reports) and elapsed < 30.0
    _verdict(
        acceptance_log, "gradient fidelity", ok,
        f"worst rel {worst:.3e} <= 1e-4 over {len(reports)} component checks, {elapsed:.1f}s < 30s",
    )


def test_loss_identity_every_step(acceptance_log, default_run):
    weights = default_run["cfg"].train.loss_weights
    worst = 0.0
    for bd in default_run["history"]:
        expect = (
            ((bd.rec + bd.align * weights.align) + bd.imi * weights.imitation)
            + bd.timbre_c * weights.timbre
        ) + bd.env_c * weights.environment
        worst = max(worst, abs(expect - bd.total))
    ok = worst <= 1e-9
    _verdict(
        acceptance_log, "loss identity", ok,
        f"worst |total - weighted sum| {worst:.3e} <= 1e-9 over {len(default_run['history'])} steps",
    )


def test_pathway_oracle_equivalence(acceptance_log):
    rng = make_rng(1234)
    worst = 0.0
    for i in range(1000):
        n = 1 + int(rng.integers(8))
        d = 1 + int(rng.integers(8))
        rows = 1 + int(rng.integers(3))
        tau = float(rng.uniform(0.1, 1.5))
        model = MemoryAligner.create(n, d, make_rng(9000 + i), tau)
        banks = {name: p.tolist() for name, p in model.parameters().items()}
        v = rng.normal(size=(rows, d))
        a = rng.normal(size=(rows, d))
        vis = model.recall_from_visual(v)
        aud = model.reconstruct_auditory(a)
        for r in range(rows):
            nv = ref.naive_visual_pathway(
                banks["character_key"], banks["environment_key"],
                banks["timbre_value"], banks["sound_value"], v[r].tolist(), tau,
            )
            na = ref.naive_auditory_pathway(
                banks["timbre_value"], banks["sound_value"], a[r].tolist(), tau,
            )
            for got, want in (
                (np.atleast_2d(vis.timbre_weights)[r], nv["w_char"]),
                (np.atleast_2d(vis.sound_weights)[r], nv["w_env"]),
                (np.atleast_2d(vis.combined)[r], nv["combined"]),
                (np.atleast_2d(aud.timbre_weights)[r], na["w_t"]),
                (np.atleast_2d(aud.sound_weights)[r], na["w_s"]),
                (np.atleast_2d(aud.combined)[r], na["combined"]),
            ):
                want = np.asarray(want)
                err = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0)))
                worst = max(worst, err)
    ok = worst <= 1e-12
    _verdict(
        acceptance_log, "pathway oracle equivalence", ok,
        f"worst deviation {worst:.3e} <= 1e-12 over 1000 instances",
    )


def test_default_run_converges(acceptance_log, default_run):
    ratio = default_run["ratio"]
    recall = default_run["recall1"]
    elapsed = default_run["elapsed"]
    ok = ratio <= 0.10 and recall >= 0.9 and elapsed < 120.0
    _verdict(
        acceptance_log, "default run convergence", ok,
        f"final/initial loss {ratio:.4f} <= 0.10, recall@1 {recall:.4f} >= 0.9, {elapsed:.1f}s < 120s",
    )


def test_margins_over_seeds(acceptance_log, margin_runs):
    ok = all(r["timbre"] >= 0.2 and r["env"] >= 0.2 for r in margin_runs)
    lows = min(min(r["timbre"], r["env"]) for r in margin_runs)
    _verdict(
        acceptance_log, "decoupling margins", ok,
        f"both margins >= 0.2 on all {len(margin_runs)} seeds (lowest {lows:.3f})",
    )


def test_beats_concat_fusion(acceptance_log, fusion_runs):
    strict = all(r["aligner"] > r["concat"] for r in fusion_runs)
    attn_ok = all(r["attn"] <= r["aligner"] for r in fusion_runs)
    gaps = ", ".join(f"seed {r['seed']}: {r['aligner']:.3f}>{r['concat']:.3f}" for r in fusion_runs)
    _verdict(
        acceptance_log, "fusion baseline ordering", strict and attn_ok,
        f"aligner beats concat on every seed and attn never exceeds it ({gaps})",
    )


def test_contrastive_weights_drive_margin(acceptance_log, margin_runs):
    full = float(np.mean([r["timbre"] for r in margin_runs]))
    bare = float(np.mean([r["timbre_ablated"] for r in margin_runs]))
    ok = bare < full
    _verdict(
        acceptance_log, "consistency-term ablation", ok,
        f"mean timbre margin {bare:.4f} (weights zeroed) < {full:.4f} (full objective)",
    )


def test_determinism_and_resume(acceptance_log, tmp_path_factory):
    base = tmp_path_factory.mktemp("accept")
    small = [
        "--world.n_characters", "6", "--world.n_environments", "6",
        "--world.dim", "16", "--data.n_samples", "256", "--data.eval_pairs", "16",
        "--model.slot_count", "8", "--train.steps", "40",
    ]

    def run(*argv):
        assert main(list(argv)) == EXIT_OK

    checks = []
    run("gen", "--out", str(base / "g1"), *small)
    run("gen", "--out", str(base / "g2"), *small)
    checks.append(
        (base / "g1" / "dataset.jsonl").read_bytes() == (base / "g2" / "dataset.jsonl").read_bytes()
        and (base / "g1" / "manifest.json").read_bytes() == (base / "g2" / "manifest.json").read_bytes()
    )

    run("train", "--out", str(base / "t1"), "--data", str(base / "g1"), *small)
    run("train", "--out", str(base / "t2"), "--data", str(base / "g1"), *small)
    ckpt_bytes = (base / "t1" / "model.ckpt").read_bytes()
    checks.append(ckpt_bytes == (base / "t2" / "model.ckpt").read_bytes())
    checks.append(
        (base / "t1" / "loss.csv").read_bytes() == (base / "t2" / "loss.csv").read_bytes()
    )

    # load -> save reproduces the checkpoint bit for bit
    ckpt = load_checkpoint(base / "t1" / "model.ckpt")
    cfg = config_from_tree(default_dict())
    model, opt, ema = restore_trainer(ckpt, cfg.train)
    save_checkpoint(base / "roundtrip.ckpt", model, opt, ema, ckpt.config, ckpt.step)
    checks.append((base / "roundtrip.ckpt").read_bytes() == ckpt_bytes)

    # interrupt at half budget, resume, land on the identical checkpoint
    run("train", "--out", str(base / "half"), "--data", str(base / "g1"), *small,
        "--train.steps", "20")
    run("train", "--out", str(base / "resumed"), "--data", str(base / "g1"),
        "--resume", str(base / "half" / "model.ckpt"), *small)
    checks.append((base / "resumed" / "model.ckpt").read_bytes() == ckpt_bytes)

    labels = ("datasets", "checkpoints", "loss CSVs", "save/load round-trip", "resume")
    detail = ", ".join(f"{name} {'ok' if ok else 'DIFFER'}" for name, ok in zip(labels, checks))
    _verdict(acceptance_log, "determinism and persistence", all(checks), detail)


def test_weight_simplex_and_divergence_floor(acceptance_log, default_run):
    sum_dev = default_run["weight_sum_dev"]
    min_entry = default_run["weight_min_entry"]
    min_align = min(bd.align for bd in default_run["history"])
    ok = sum_dev <= 1e-9 and min_entry >= 0.0 and min_align >= -1e-12
    _verdict(
        acceptance_log, "attention simplex and divergence floor", ok,
        f"worst row-sum deviation {sum_dev:.3e} <= 1e-9, min weight {min_entry:.3e} >= 0,"
        f" min align term {min_align:.3e} >= -1e-12",
    )
