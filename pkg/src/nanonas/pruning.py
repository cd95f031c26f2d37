"""One-shot magnitude pruning with mask-enforced fine-tuning.

Unstructured pruning ranks every convolution weight of the model globally by
``|w|`` and zeroes the smallest fraction.  Structured pruning ranks each
layer's output channels by the L1 norm of their filters, drops the lowest
fraction and rebuilds smaller dense tensors, cascading the removed channels
into the consumers' input dimension.  Batch-norm and bias parameters are
never pruned.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .net import Conv, Model
from .quant import FakeQuantizer
from .signal_sim import ChunkSet
from .train import OptimConfig, fit, read_identities


class PruneError(ValueError):
    pass


@dataclass
class PruneMask:
    """Unstructured masks by parameter name or structured kept-channel indices by layer."""

    sparsity: float
    masks: dict = field(default_factory=dict)
    channels: dict = field(default_factory=dict)


def prunable(model: Model) -> dict:
    """Convolution weights by parameter name, in model order."""
    return {f"{c.name}.weight": c.weight for c in model.conv_layers()}


def _check_fraction(value: float, what: str) -> None:
    if not 0.0 <= value < 1.0:
        raise PruneError(f"{what} must lie in [0, 1), got {value}")


def prune_unstructured(model: Model, sparsity: float, inplace: bool = False) -> tuple[Model, PruneMask]:
    """Zero the globally smallest-|w| fraction of convolution weights.

    Ties are broken by position (stable sort), so masks are nested across
    sparsities and pruning twice at the same sparsity is idempotent.
    """
    _check_fraction(sparsity, "sparsity")
    if not inplace:
        model = model.copy()
    params = prunable(model)
    flat = np.concatenate([np.abs(p.data).ravel() for p in params.values()])
    n_prune = int(round(sparsity * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:n_prune]] = False
    mask = PruneMask(sparsity)
    offset = 0
    for name, p in params.items():
        m = keep[offset : offset + p.data.size].reshape(p.shape)
        offset += p.data.size
        mask.masks[name] = m
        p.data *= m
    return model, mask


def apply_mask(model: Model, mask: PruneMask) -> None:
    params = model.named_parameters()
    for name, m in mask.masks.items():
        params[name].data *= m


def sparsity(model: Model) -> float:
    """Exact fraction of zero convolution weights."""
    params = list(prunable(model).values())
    total = sum(p.data.size for p in params)
    zeros = sum(int(p.data.size - np.count_nonzero(p.data)) for p in params)
    return zeros / total if total else 0.0


def storage_bytes(model: Model, nonzero_only: bool) -> float:
    """Convolution-weight storage at each layer's weight precision."""
    total = 0.0
    for conv in model.conv_layers():
        count = np.count_nonzero(conv.weight.data) if nonzero_only else conv.weight.data.size
        total += count * conv.quant.weight_bits / 8
    return total


def storage_ratio(model: Model) -> float:
    """Dense over nonzero-value storage of the prunable weights."""
    nz = storage_bytes(model, True)
    if nz == 0:
        raise PruneError("every prunable weight is zero")
    return storage_bytes(model, False) / nz


def fine_tune(model: Model, data: ChunkSet, epochs: int, mask: PruneMask | None = None, seed: int = 0,
              optim: OptimConfig | None = None, batch_size: int = 64) -> Model:
    """Train with the mask re-applied after every optimizer step."""
    after = (lambda: apply_mask(model, mask)) if mask is not None and mask.masks else None
    fit(model, data, epochs, seed=seed, batch_size=batch_size, optim=optim, after_step=after)
    return model


# ---------------------------------------------------------------- structured


def _n_drop(channels: int, fraction: float) -> int:
    n = int(round(fraction * channels))
    if n >= channels:
        raise PruneError(f"pruning {fraction:.0%} of {channels} channels leaves none")
    return n


def rank_channels(weight: np.ndarray, fraction: float) -> np.ndarray:
    """Sorted indices of the output channels kept after dropping the lowest-L1 fraction."""
    norms = np.abs(weight).reshape(weight.shape[0], -1).sum(axis=1)
    drop = _n_drop(weight.shape[0], fraction)
    order = np.argsort(norms, kind="stable")
    return np.sort(order[drop:])


def channel_plan(model: Model, fraction: float) -> dict:
    """Kept output channels of the stem and of every block unit.

    The last unit of a block with an identity skip keeps its input's
    channels so the residual sum stays aligned.
    """
    _check_fraction(fraction, "fraction")
    plan = {"stem": rank_channels(model.stem_conv.weight.data, fraction)}
    current = plan["stem"]
    for block in model.blocks:
        if block.cfg.is_identity:
            raise PruneError("structured pruning does not support width-adapting identity blocks")
        if block.cfg.groups is not None:
            raise PruneError("structured pruning supports depthwise blocks only")
        block_in = current
        for r, unit in enumerate(block.units):
            last = r == len(block.units) - 1
            if last and block.has_skip and block.proj is None:
                kept = block_in
            else:
                kept = rank_channels(unit.pw.weight.data, fraction)
            plan[unit.pw.name] = kept
            current = kept
    return plan


def _select_conv(conv: Conv, out_idx, in_idx, depthwise: bool) -> None:
    w = conv.weight.data
    w = w[out_idx]
    if not depthwise and in_idx is not None:
        w = w[:, in_idx]
    conv.weight.data = np.ascontiguousarray(w)
    if conv.bias is not None and out_idx is not None:
        conv.bias.data = np.ascontiguousarray(conv.bias.data[out_idx])
    if depthwise:
        conv.groups = conv.weight.shape[0]
    conv.wq = FakeQuantizer(conv.wq.bits, signed=True)


def _select_bn(bn, idx) -> None:
    bn.gamma.data = np.ascontiguousarray(bn.gamma.data[idx])
    bn.beta.data = np.ascontiguousarray(bn.beta.data[idx])
    bn.running_mean = np.ascontiguousarray(bn.running_mean[idx])
    bn.running_var = np.ascontiguousarray(bn.running_var[idx])


def _walk(model: Model, plan: dict):
    """Yield ``(conv, out_idx, in_idx, depthwise, bn)`` for every layer touched by ``plan``."""
    all_in = None
    stem_idx = plan["stem"]
    yield model.stem_conv, stem_idx, all_in, False, model.stem_bn
    current = stem_idx
    for block in model.blocks:
        block_in = current
        for unit in block.units:
            kept = plan[unit.pw.name]
            yield unit.dw, current, None, True, None
            yield unit.pw, kept, current, False, unit.bn
            current = kept
        if block.proj is not None:
            yield block.proj[0], current, block_in, False, block.proj[1]
    yield model.head, None, current, False, None


def compact(model: Model, plan: dict) -> Model:
    """Smaller dense model keeping only the planned channels."""
    out = model.copy()
    for conv, out_idx, in_idx, depthwise, bn in _walk(out, plan):
        _select_conv(conv, slice(None) if out_idx is None else out_idx, in_idx, depthwise)
        if bn is not None:
            _select_bn(bn, out_idx)
    cfg = out.config
    cfg.stem = replace(cfg.stem, channels_out=len(plan["stem"]))
    blocks = []
    for block in out.blocks:
        width = len(plan[block.units[-1].pw.name])
        block.cfg = replace(block.cfg, channels_out=width)
        block.c_in = block.units[0].dw.c_in
        blocks.append(block.cfg)
    cfg.blocks = blocks
    cfg.validate()
    return out


def masked_dense(model: Model, plan: dict) -> Model:
    """Same-shape model with every weight that :func:`compact` removes set to zero."""
    out = model.copy()
    for conv, out_idx, in_idx, depthwise, bn in _walk(out, plan):
        w = conv.weight.data
        keep = np.zeros(w.shape, dtype=bool)
        rows = np.arange(w.shape[0]) if out_idx is None else out_idx
        if depthwise or in_idx is None:
            keep[rows] = True
        else:
            keep[np.ix_(rows, in_idx, np.arange(w.shape[2]))] = True
        conv.weight.data = w * keep
        if conv.bias is not None and out_idx is not None:
            b = np.zeros_like(conv.bias.data)
            b[out_idx] = conv.bias.data[out_idx]
            conv.bias.data = b
        if bn is not None:
            sel = np.zeros(bn.gamma.shape[0], dtype=bool)
            sel[out_idx] = True
            bn.gamma.data = bn.gamma.data * sel
            bn.beta.data = bn.beta.data * sel
    return out


def prune_structured_channels(model: Model, fraction: float) -> tuple[Model, PruneMask]:
    plan = channel_plan(model, fraction)
    return compact(model, plan), PruneMask(fraction, channels={k: v.tolist() for k, v in plan.items()})


# ---------------------------------------------------------------- sweeps


SWEEP_COLUMNS = ("sparsity", "identity", "nonzero_bytes", "dense_bytes", "params")


def sweep(model: Model, train: ChunkSet, reads, sparsities: Sequence[float], epochs: int,
          method: str = "element", seed: int = 0, optim: OptimConfig | None = None,
          log: Callable | None = None) -> list[dict]:
    """Prune a copy of ``model`` at each level, fine-tune, and measure median read identity."""
    if method not in ("element", "channel"):
        raise PruneError(f"unknown pruning method {method!r}")
    rows = []
    for s in sparsities:
        if method == "element":
            pruned, mask = prune_unstructured(model, s)
        else:
            pruned, mask = prune_structured_channels(model, s)
        if epochs:
            fine_tune(pruned, train, epochs, mask, seed=seed, optim=optim)
        ident = float(np.median(read_identities(pruned, reads, int(train.signals.shape[1]))))
        row = {
            "sparsity": s,
            "identity": ident,
            "nonzero_bytes": storage_bytes(pruned, True),
            "dense_bytes": storage_bytes(pruned, False),
            "params": sum(p.data.size for p in pruned.parameters()),
        }
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def find_knee(rows: Sequence[dict], drop: float = 0.05) -> float | None:
    """First sparsity whose identity falls more than ``drop`` below the previous sweep point."""
    ordered = sorted(rows, key=lambda r: r["sparsity"])
    for prev, cur in zip(ordered, ordered[1:]):
        if prev["identity"] - cur["identity"] > drop:
            return cur["sparsity"]
    return None


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(SWEEP_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
