"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import copy
import csv
import json
import time

import numpy as np
import pytest

from nanonas import tensor as T
from nanonas.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from nanonas.cli import main
from nanonas.ctc import ctc_loss, ctc_losses
from nanonas.eval_report import align_identity, identity_summary, model_report
from nanonas.net import BlockConfig, ModelConfig, build
from nanonas.pruning import find_knee, prune_unstructured, storage_ratio, sweep, write_sweep
from nanonas.qabas import (
    IDENTITY, Candidate, SearchConfig, Searcher, SearchSpace, Slot, all_paths, build_supernet, config_for_path,
    default_latency_table, expected_latency, path_latency, search, select,
)
from nanonas.quant import FLOAT, QuantSpec, bops, model_size_bytes
from nanonas.signal_sim import SimConfig, chunk_dataset, simulate_reads
from nanonas.skipclip import KdConfig, kd_loss, remove_all_skips, skipclip_train
from nanonas.tensor import Tensor
from nanonas.train import OptimConfig, batch_inputs, evaluate_loss, fit, read_identities

from conftest import tiny_config
from oracles import brute_ctc, check_grads, sort_percentile, weighted_sum


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


@pytest.fixture(scope="module")
def toy_data():
    """Default simulation (k=3, 200 reads x 500 bases), 80/20 read split, 400-sample chunks."""
    _, reads = simulate_reads(SimConfig())
    ds = chunk_dataset(reads, 400, 0, (0.8, 0.2), 0)
    held = set(ds["eval"].read_ids)
    return ds, [r for r in reads if r.id in held]


def test_criterion_1_ctc_oracle(capsys):
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst, finite = 0.0, 0
    for _ in range(200):
        t = int(rng.integers(1, 6))
        labels = rng.integers(1, 5, size=int(rng.integers(0, 4))).tolist()
        x = rng.normal(size=(t, 1, 5))
        lp = x - np.logaddexp.reduce(x, axis=2, keepdims=True)
        expected = brute_ctc(lp[:, 0], labels)
        got = ctc_losses(lp, [labels])[0][0]
        if np.isinf(expected):
            worst = max(worst, 0.0 if np.isinf(got) else np.inf)
        else:
            finite += 1
            worst = max(worst, abs(got - expected))
    elapsed = time.monotonic() - start
    verdict(capsys, 1, worst <= 1e-9 and elapsed < 10,
            f"200 cases, {finite} feasible, max |delta| {worst:.2e}, {elapsed:.1f} s")


def test_criterion_2_gradient_suite(capsys):
    errors = {}
    net = build_supernet(SearchSpace(op_options=[3, 5, IDENTITY], channel_options=[8], repeats=2, chunk_len=200), 0)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 4, 9))
        w = rng.normal(size=(6, 2, 3))
        errors.setdefault("conv1d", []).append(check_grads(
            lambda a, b: weighted_sum(T.conv1d(a, b, None, 2, 1, 2), rng_probe(seed, (2, 6, 5))), [x, w]))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        errors.setdefault("batch_norm1d", []).append(check_grads(
            lambda a, g, b: weighted_sum(T.batch_norm1d(a, g, b, np.zeros(4), np.ones(4), True),
                                         rng_probe(seed, x.shape)), [x, gamma, beta]))
        v = rng.normal(size=(3, 5))
        v = np.where(np.abs(v) < 0.02, 0.05, v)
        v = np.where(np.abs(np.abs(v) - 0.5) < 0.02, v + 0.05, v)
        errors.setdefault("activations", []).append(max(
            check_grads(lambda a: weighted_sum(T.relu(a), rng_probe(seed, v.shape)), [v]),
            check_grads(lambda a: weighted_sum(T.clamp(a, -0.5, 0.5), rng_probe(seed, v.shape)), [v]),
            check_grads(lambda a: weighted_sum(T.exp(a), rng_probe(seed, v.shape)), [v]),
        ))
        errors.setdefault("log_softmax", []).append(check_grads(
            lambda a: weighted_sum(T.log_softmax(a, axis=1), rng_probe(seed, v.shape)), [v]))
        logits = rng.normal(size=(7, 2, 5))
        targets = [rng.integers(1, 5, size=3), rng.integers(1, 5, size=2)]
        errors.setdefault("ctc_loss", []).append(check_grads(
            lambda a: ctc_loss(T.log_softmax(a, axis=2), targets, [7, 5]), [logits]))
        teacher = rng.normal(size=(7, 2, 5))
        teacher -= np.logaddexp.reduce(teacher, axis=2, keepdims=True)
        errors.setdefault("kd_loss", []).append(check_grads(
            lambda a: kd_loss(T.log_softmax(a, axis=2), teacher, targets, [7, 5], KdConfig()), [logits]))

        def lat(*alphas):
            for s, a in zip(net.slots, alphas):
                s.alpha = a
            return expected_latency(net)

        errors.setdefault("expected_latency", []).append(
            check_grads(lat, [rng.normal(size=len(s.candidates)) for s in net.slots]))
    worst = {k: max(v) for k, v in errors.items()}
    ok = all(v <= 1e-4 for v in worst.values()) and all(len(v) >= 10 for v in errors.values())
    verdict(capsys, 2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + "; 10 seeds each")


def rng_probe(seed, shape):
    return np.random.default_rng(1000 + seed).normal(size=shape)


def test_criterion_3_quantization_anchors(capsys):
    def uniform(q):
        cfg = tiny_config(quant=q, channels=(8, 16))
        cfg.stem = BlockConfig(kernel_size=5, channels_out=8, stride=2, quant=q)
        cfg.head_quant = q
        return build(cfg, seed=0)

    ratio_q = model_size_bytes(uniform(FLOAT))["total_bytes"] / model_size_bytes(uniform(QuantSpec(8, 8)))["total_bytes"]
    pruned, _ = prune_unstructured(uniform(FLOAT), 0.85)
    ratio_p = storage_ratio(pruned)
    ok = ratio_q == 4.0 and ratio_p == 20 / 3 and round(ratio_p, 2) == 6.67
    verdict(capsys, 3, ok, f"<8,8> size ratio {ratio_q!r}, sparsity 0.85 storage ratio {ratio_p:.4f}")


def test_criterion_4_latency_anchor(capsys):
    space = SearchSpace(op_options=[9, IDENTITY], quant_options=[(16, 16), (8, 4), (4, 8), (8, 8), (16, 8)])
    table = default_latency_table(space)
    lats = {q: table.unit_latency(9, 16, 16, space.frames, q) for q in space.quant_options}
    ratio = lats[QuantSpec(16, 16)] / min(lats.values())
    verdict(capsys, 4, ratio == 8.0, f"<16,16> / fastest = {ratio!r}")


def test_criterion_5_search_matches_exhaustive_optimum(capsys):
    start = time.monotonic()
    _, reads = simulate_reads(SimConfig(n_reads=160))
    ds = chunk_dataset(reads, 400, 0, (0.8, 0.2), 0)
    space = SearchSpace(op_options=[3, 9, IDENTITY], quant_options=[(8, 4), (16, 16)], channel_options=[16, 16],
                        repeats=1, stem_stride=4)
    lam, ratios = 0.6, []
    for seed in range(3):
        net = build_supernet(space, seed)
        target = min(path_latency(net, p) for p in all_paths(net)
                     if not any(net.slots[i].candidates[j].is_identity for i, j in enumerate(p)))
        cfg = SearchConfig(lam=lam, target_latency=target, epochs=14, alpha_lr=0.05, warmup_steps=208, seed=seed,
                           weight_optim=OptimConfig(lr=1e-2))
        search(net, ds["train"], ds["eval"], cfg)
        chosen = tuple(select(net))
        objective = {}
        for path in all_paths(net):
            model = build(config_for_path(net, path), seed)
            fit(model, ds["train"], 6, seed=seed, optim=OptimConfig(lr=1e-2))
            objective[path] = evaluate_loss(model, ds["eval"]) + lam * path_latency(net, path) / target
        ratios.append(objective[chosen] / min(objective.values()))
    elapsed = time.monotonic() - start
    ok = max(ratios) <= 1.05 and elapsed < 15 * 60
    verdict(capsys, 5, ok, f"{len(ds['train'])} train chunks, 25 sub-architectures, objective/optimum "
                           f"{', '.join(f'{r:.4f}' for r in ratios)}, {elapsed:.0f} s")


def test_criterion_6_latency_pressure(capsys):
    _, reads = simulate_reads(SimConfig(n_reads=20))
    held = chunk_dataset(reads, 400, 0, (0.5, 0.5), 0)["eval"]
    cheap = {}
    for lam in (0.0, 10.0):
        net = build_supernet(SearchSpace(op_options=[3, IDENTITY], quant_options=[FLOAT], channel_options=[8]), 0)
        unit = net.slots[0].candidates[0].unit
        net.slots = [Slot(0, 8, 8, [Candidate(3, FLOAT, 10.0, unit), Candidate(3, FLOAT, 1.0, copy.deepcopy(unit))])]
        searcher = Searcher(net, SearchConfig(lam=lam, target_latency=10.0, alpha_lr=0.05))
        for i in range(50):
            start = i * 4 % 120
            searcher.alpha_step(batch_inputs(net, held, np.arange(start, start + 4)))
        cheap[lam] = float(net.slots[0].probs()[1])
    ok = cheap[10.0] > 0.9 and abs(cheap[0.0] - 0.5) <= 0.1
    verdict(capsys, 6, ok, f"cheap-candidate mass after 50 alpha steps: lambda 10 -> {cheap[10.0]:.3f}, "
                           f"lambda 0 -> {cheap[0.0]:.3f}")


def test_criterion_7_skipclip(capsys, toy_data):
    start = time.monotonic()
    ds, held = toy_data
    teacher = build(ModelConfig(stem=BlockConfig(9, 48, stride=4),
                                blocks=[BlockConfig(k, 48, repeats=2, has_skip=True) for k in (9, 9, 15, 15, 9)]), 0)
    fit(teacher, ds["train"], 20, seed=0, optim=OptimConfig(lr=1e-2))
    quants = [QuantSpec(16, 8), QuantSpec(16, 8), QuantSpec(8, 8), QuantSpec(8, 8), QuantSpec(8, 4)]
    student = build(ModelConfig(stem=BlockConfig(9, 32, stride=4), blocks=[
        BlockConfig(k, c, repeats=2, has_skip=True, quant=q)
        for k, c, q in zip((9, 9, 15, 15, 9), (32, 32, 48, 48, 32), quants)]), 1)
    fit(student, ds["train"], 15, seed=1, optim=OptimConfig(lr=1e-2))
    baseline = remove_all_skips(student)
    skips_before = len(student.skip_blocks())
    cfg = KdConfig(skip_stride=1, epochs_total=10, optim=OptimConfig(lr=2e-3), seed=2)
    student, rows = skipclip_train(teacher, student, ds["train"], cfg, val_reads=held)
    fit(baseline, ds["train"], 10, seed=2, optim=OptimConfig(lr=2e-3))
    ti = float(np.median(read_identities(teacher, held)))
    si = float(np.median(read_identities(student, held)))
    bi = float(np.median(read_identities(baseline, held)))
    elapsed = time.monotonic() - start
    ok = (skips_before == 5 and rows[4]["skips_remaining"] == 0 and (ti - si) * 100 < 2 and bi < si
          and elapsed < 20 * 60)
    verdict(capsys, 7, ok, f"skips by epoch {[r['skips_remaining'] for r in rows]}, teacher {ti:.4f}, "
                           f"student {si:.4f}, no-KD baseline {bi:.4f}, {elapsed:.0f} s")


def test_criterion_8_pruning(capsys, toy_data, tmp_path):
    ds, held = toy_data
    q = QuantSpec(8, 8)
    model = build(ModelConfig(stem=BlockConfig(kernel_size=9, channels_out=32, stride=4), blocks=[
        BlockConfig(kernel_size=k, channels_out=32, repeats=2, has_skip=True, quant=q) for k in (9, 9, 15, 15)]), 0)
    fit(model, ds["train"], 20, optim=OptimConfig(lr=1e-2))
    unpruned = float(np.median(read_identities(model, held)))
    levels = [0.0, 0.15, 0.3, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98]
    write_sweep(sweep(model, ds["train"], held, levels, 2, optim=OptimConfig(lr=2e-3)), tmp_path / "sweep.csv")
    with open(tmp_path / "sweep.csv") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    ident = {r["sparsity"]: r["identity"] for r in rows}
    drops = [(b["sparsity"], a["identity"] - b["identity"]) for a, b in zip(rows, rows[1:])]
    knees = [s for s, d in drops if d > 0.05 and s >= 0.6]
    ok = (ident[0.0] - ident[0.15]) * 100 <= 1 and bool(knees)
    verdict(capsys, 8, ok, f"fine-tuned identity at 0 / 0.15 sparsity {ident[0.0]:.4f} / {ident[0.15]:.4f} "
                           f"(unpruned, no fine-tune {unpruned:.4f}); first knee {find_knee(rows)}, "
                           f"knees at >= 0.6: {knees}")


def _pipeline(root, capsys):
    root.mkdir()
    (root / "cfg.json").write_text(json.dumps({"train": {"epochs": 20, "lr": 1e-2}}))
    cfg = ["--config", str(root / "cfg.json")]
    lines = []
    start = time.monotonic()
    for argv in (
        ["simulate", "--out", str(root / "data")],
        ["train", "--data", str(root / "data"), "--out", str(root / "model.ckpt")] + cfg,
        ["basecall", "--data", str(root / "data"), "--checkpoint", str(root / "model.ckpt"),
         "--out", str(root / "calls.fa")] + cfg,
        ["evaluate", "--calls", str(root / "calls.fa"), "--data", str(root / "data"),
         "--out", str(root / "summary.json")],
    ):
        assert main(argv) == 0, argv
        lines += [ln.replace(str(root), "<root>") for ln in capsys.readouterr().out.splitlines()
                  if "kbp/s" not in ln]
    elapsed = time.monotonic() - start
    artifacts = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return elapsed, lines, artifacts


def test_criterion_9_end_to_end(capsys, tmp_path):
    elapsed, lines, first = _pipeline(tmp_path / "a", capsys)
    _, lines2, second = _pipeline(tmp_path / "b", capsys)
    summary = json.loads(first["summary.json"])
    model, _ = load_checkpoint(tmp_path / "a" / "model.ckpt")
    ok = (summary["median"] >= 0.85 and elapsed < 10 * 60 and len(model.blocks) == 4
          and first == second and lines == lines2)
    verdict(capsys, 9, ok, f"median identity {summary['median']:.4f} over {summary['reads']} held-out reads, "
                           f"{elapsed:.0f} s, rerun byte-identical {first == second and lines == lines2}")


def test_criterion_10_persistence_and_metrics(capsys, tmp_path):
    model = build(tiny_config(quant=QuantSpec(8, 4)), seed=0)
    model(Tensor(np.random.default_rng(0).normal(size=(2, 1, 200))))
    model.eval()
    save_checkpoint(model, tmp_path / "a.ckpt", {"stage": "test"})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    roundtrip = checkpoint_bytes(loaded, meta) == (tmp_path / "a.ckpt").read_bytes()

    rep = model_report(loaded)
    totals = (rep["totals"]["bytes"] == model_size_bytes(loaded)["total_bytes"]
              and rep["totals"]["bops"] == sum(bops(c) for c in loaded.layer_costs()))

    values = list(np.random.default_rng(1).uniform(0.7, 1.0, size=37))
    s = identity_summary(values)
    pct = all(abs(s[k] - sort_percentile(values, q)) <= 1e-12 for k, q in (("p25", 25), ("median", 50), ("p75", 75)))

    ident = align_identity("ACGT", "ACG").identity
    ok = roundtrip and totals and pct and ident == 0.75
    verdict(capsys, 10, ok, f"checkpoint round trip identical {roundtrip}, report totals exact {totals}, "
                            f"percentiles match {pct}, ACGT vs ACG identity {ident}")
