"""Command-line entry point: ``nanonas <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pruning, qabas, skipclip
from .checkpoint import CheckpointError, is_checkpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig, PipelineConfigError, load_config
from .ctc import CtcError
from .eval_report import align_identity, identity_summary, model_report, report_csv, report_text, throughput
from .net import ConfigError, ModelConfig, build
from .quant import QuantizationError
from .signal_sim import SimulationError, chunk_dataset, load_dataset, read_fasta, save_dataset, simulate_reads, write_fasta
from .train import OptimConfig, basecall_reads, fit, worker_count

TWO_CANDIDATE_SPACE = {
    "op_options": [9, qabas.IDENTITY],
    "quant_options": [[16, 16]],
    "channel_options": [16],
    "repeats": 1,
    "stem_stride": 4,
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _reads(data, split: str):
    reads, manifest = load_dataset(data)
    if split == "all":
        return reads, manifest
    ids = set(manifest["split"][split])
    return [r for r in reads if r.id in ids], manifest


def _chunks(reads, chunk_len: int, seed: int, fractions=(1.0, 0.0), cap: int | None = None):
    ds = chunk_dataset(reads, chunk_len, 0, fractions, seed)
    if cap is not None:
        ds = {k: v.subset(np.arange(min(cap, len(v)))) for k, v in ds.items()}
    return ds


def _chunk_len(args, default: int) -> int:
    return args.chunk_len if args.chunk_len is not None else default


def _print(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg: PipelineConfig) -> None:
    sim = cfg.simulate
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.chunk_len is not None:
        sim = replace(sim, chunk_len=args.chunk_len)
    _, reads = simulate_reads(sim)
    out = save_dataset(args.out, reads, sim)
    _print(f"simulated {len(reads)} reads into {out}")


def cmd_train(args, cfg: PipelineConfig) -> None:
    tr = cfg.train
    seed = args.seed if args.seed is not None else 0
    reads, manifest = _reads(args.data, "train")
    chunk_len = _chunk_len(args, manifest["config"]["chunk_len"])
    cap = args.chunks if args.chunks is not None else tr.chunks
    train = _chunks(reads, chunk_len, seed, cap=cap)["train"]
    mcfg = ModelConfig.from_json(Path(args.arch).read_text()) if args.arch else tr.model_config()
    model = build(mcfg, seed)
    epochs = args.epochs if args.epochs is not None else tr.epochs
    losses = fit(model, train, epochs, seed=seed, batch_size=tr.batch_size, optim=tr.optim(),
                 log=lambda e, l: _print(f"epoch {e} loss {l:.4f}"))
    meta = {"stage": "train", "seed": seed, "epochs": epochs, "losses": losses, "chunk_len": chunk_len}
    save_checkpoint(model, args.out, meta)
    _print(f"wrote {args.out}")


def cmd_search(args, cfg: PipelineConfig) -> None:
    sc = cfg.search
    seed = args.seed if args.seed is not None else 0
    space = qabas.SearchSpace.from_dict(TWO_CANDIDATE_SPACE if args.space == "two-candidate" else sc.space)
    if args.chunk_len is not None:
        space.chunk_len = args.chunk_len
    reads, _ = _reads(args.data, "train")
    ds = _chunks(reads, space.chunk_len, seed, (0.8, 0.2), cap=args.chunks)
    net = qabas.build_supernet(space, seed)
    target = args.target_latency if args.target_latency is not None else sc.target_latency
    if target is None:
        target = min(qabas.path_latency(net, p) for p in _non_identity_paths(net))
    lam = args.lam if args.lam is not None else sc.lam
    scfg = qabas.SearchConfig(
        lam=lam, target_latency=target, epochs=args.epochs if args.epochs is not None else sc.epochs,
        batch_size=sc.batch_size, weight_optim=OptimConfig(lr=sc.lr), alpha_lr=sc.alpha_lr,
        alpha_weight_decay=sc.alpha_weight_decay, warmup_steps=sc.warmup_steps, seed=seed,
    )
    rows = qabas.search(net, ds["train"], ds["eval"], scfg)
    path = qabas.select(net)
    arch = qabas.config_for_path(net, path, skip=sc.add_skips)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "architecture.json").write_text(json.dumps(arch.to_dict(), indent=2, sort_keys=True) + "\n")
    qabas.write_trajectory(rows, out / "alpha_log.csv")
    chosen = [slot.candidates[j].label() for slot, j in zip(net.slots, path)]
    _print(f"selected {' '.join(chosen)} latency {qabas.path_latency(net, path):g} (target {target:g}, lambda {lam:g})")
    _print(f"wrote {out / 'architecture.json'} and {out / 'alpha_log.csv'}")


def _non_identity_paths(net):
    paths = [p for p in qabas.all_paths(net) if not any(net.slots[s].candidates[j].is_identity for s, j in enumerate(p))]
    return paths or list(qabas.all_paths(net))


def cmd_skipclip(args, cfg: PipelineConfig) -> None:
    sk = cfg.skipclip
    seed = args.seed if args.seed is not None else 0
    teacher, tmeta = load_checkpoint(args.teacher)
    reads, manifest = _reads(args.data, "train")
    chunk_len = _chunk_len(args, tmeta.get("chunk_len", manifest["config"]["chunk_len"]))
    train = _chunks(reads, chunk_len, seed, cap=args.chunks)["train"]
    if is_checkpoint(args.student):
        student, _ = load_checkpoint(args.student)
    else:
        student = build(ModelConfig.from_json(Path(args.student).read_text()), seed)
        if sk.pretrain_epochs:
            fit(student, train, sk.pretrain_epochs, seed=seed, optim=OptimConfig(lr=sk.lr))
    kd = skipclip.KdConfig(
        alpha=args.alpha if args.alpha is not None else sk.alpha,
        tau=args.tau if args.tau is not None else sk.tau,
        skip_stride=args.skip_stride if args.skip_stride is not None else sk.skip_stride,
        divergence=sk.divergence,
        epochs_total=args.epochs if args.epochs is not None else sk.epochs,
        batch_size=sk.batch_size, optim=OptimConfig(lr=sk.lr), seed=seed,
    )
    student, rows = skipclip.skipclip_train(
        teacher, student, train, kd,
        log=lambda r: _print(f"epoch {r['epoch']} skips {r['skips_remaining']} loss {r['train_loss']:.4f}"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": "skipclip", "seed": seed, "epochs": kd.epochs_total, "chunk_len": chunk_len,
            "losses": [r["train_loss"] for r in rows]}
    save_checkpoint(student, out / "student.ckpt", meta)
    skipclip.write_trajectory(rows, out / "trajectory.csv")
    _print(f"wrote {out / 'student.ckpt'} and {out / 'trajectory.csv'}")


def cmd_prune(args, cfg: PipelineConfig) -> None:
    pc = cfg.prune
    seed = args.seed if args.seed is not None else 0
    model, meta = load_checkpoint(args.checkpoint)
    method = args.method or pc.method
    level = args.sparsity if args.sparsity is not None else pc.sparsity
    reads, manifest = _reads(args.data, "train")
    chunk_len = _chunk_len(args, meta.get("chunk_len", manifest["config"]["chunk_len"]))
    train = _chunks(reads, chunk_len, seed, cap=args.chunks)["train"]
    optim = OptimConfig(lr=pc.lr)
    if method == "element":
        pruned, mask = pruning.prune_unstructured(model, level)
    else:
        pruned, mask = pruning.prune_structured_channels(model, level)
    pruning.fine_tune(pruned, train, pc.fine_tune_epochs, mask, seed=seed, optim=optim, batch_size=pc.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pruned, out / "pruned.ckpt", {
        "stage": "prune", "seed": seed, "method": method, "level": level, "chunk_len": chunk_len,
        "epochs": pc.fine_tune_epochs, "sparsity": pruning.sparsity(pruned),
    })
    _print(f"{method} pruning at {level:g}: sparsity {pruning.sparsity(pruned):.4f}, "
           f"nonzero bytes {pruning.storage_bytes(pruned, True):g} of {pruning.storage_bytes(pruned, False):g}")
    if args.sweep is None:
        levels = pc.sweep
    else:
        levels = [float(s) for s in args.sweep.split(",") if s.strip()]
    if levels:
        held, _ = _reads(args.data, "eval")
        rows = pruning.sweep(model, train, held, levels, pc.fine_tune_epochs, method=method, seed=seed, optim=optim,
                             log=lambda r: _print(f"sweep {r['sparsity']:g} identity {r['identity']:.4f}"))
        pruning.write_sweep(rows, out / "sweep.csv")
        knee = pruning.find_knee(rows)
        _print(f"knee {'none' if knee is None else f'{knee:g}'}")
    _print(f"wrote {out}")


def cmd_basecall(args, cfg: PipelineConfig) -> None:
    start = time.monotonic()
    model, meta = load_checkpoint(args.checkpoint)
    reads, _ = _reads(args.data, args.split or cfg.evaluate.split)
    chunk_len = _chunk_len(args, meta.get("chunk_len", cfg.evaluate.chunk_len))
    calls = basecall_reads(model, reads, chunk_len, worker_count())
    write_fasta(args.out, [(r.id, c) for r, c in zip(reads, calls)])
    elapsed = time.monotonic() - start
    bases = sum(len(c) for c in calls)
    _print(f"basecalled {len(reads)} reads, {bases} bases")
    _print(f"throughput {throughput(bases, elapsed):.3f} kbp/s")


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    truth = dict(read_fasta(Path(args.data) / "reference.fasta")) if args.data else dict(read_fasta(args.truth))
    calls = read_fasta(args.calls)
    values = []
    for name, seq in calls:
        if name not in truth:
            raise CliError(f"no reference for read {name!r}")
        values.append(align_identity(seq, truth[name]).identity if seq else 0.0)
    summary = identity_summary(values)
    summary["reads"] = len(values)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    _print(text)


def cmd_report(args, cfg: PipelineConfig) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    rep = model_report(model)
    _print(report_text(rep))
    if args.out:
        Path(args.out).write_text(report_csv(rep))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanonas", description="Quantized CNN basecaller search, distillation and pruning.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--chunk-len", type=int, dest="chunk_len")
        return sp

    common(sub.add_parser("simulate", help="simulate a dataset"), "dataset directory")

    sp = common(sub.add_parser("train", help="train a model"), "checkpoint path")
    sp.add_argument("--data", required=True)
    sp.add_argument("--arch", help="architecture JSON (default: config train.model)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--chunks", type=int)

    sp = common(sub.add_parser("search", help="quantization-aware architecture search"), "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lambda", type=float, dest="lam")
    sp.add_argument("--target-latency", type=float, dest="target_latency")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--chunks", type=int)
    sp.add_argument("--space", choices=["config", "two-candidate"], default="config")

    sp = common(sub.add_parser("skipclip", help="remove skips with distillation"), "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--student", required=True, help="student checkpoint or architecture JSON")
    sp.add_argument("--skip-stride", type=int, dest="skip_stride")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--chunks", type=int)

    sp = common(sub.add_parser("prune", help="one-shot pruning and sparsity sweep"), "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--method", choices=["element", "channel"])
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--sweep", help="comma-separated levels (default: config prune.sweep; empty string disables)")
    sp.add_argument("--chunks", type=int)

    sp = common(sub.add_parser("basecall", help="basecall reads to FASTA"), "FASTA path")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "eval", "all"])

    sp = sub.add_parser("evaluate", help="identity summary of basecalls")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--calls", required=True, help="FASTA of basecalls")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="dataset directory (uses reference.fasta)")
    group.add_argument("--truth", help="FASTA of true sequences")
    sp.add_argument("--out", help="summary JSON path")

    sp = sub.add_parser("report", help="per-layer size, BOPs and latency table")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="CSV path")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "search": cmd_search,
    "skipclip": cmd_skipclip,
    "prune": cmd_prune,
    "basecall": cmd_basecall,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

ERRORS = (CliError, CheckpointError, PipelineConfigError, ConfigError, SimulationError, qabas.SearchError,
          skipclip.ScheduleError, pruning.PruneError, QuantizationError, CtcError, OSError, ValueError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except ERRORS as exc:
        print(f"nanonas {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
