"""Quantization-aware differentiable architecture search.

The supernet shares a dense stem and a pointwise head; in between sit
searchable slots grouped into stages of fixed width.  Every slot holds one
candidate per (kernel, QuantSpec) pair, each a separable unit
``depthwise conv(K) -> pointwise conv -> BN -> QuantReLU``, plus a
parameter-free identity.  Each slot carries one architecture logit per
candidate.

Weight steps sample a single path from ``softmax(alpha)`` and update only the
weights on that path.  Alpha steps use straight-through binary gates
``onehot + p - stop_grad(p)`` (forward value is the sampled path, gradient
reaches every candidate) and add the latency regularizer
``lam * (E[latency] - target) / target`` computed from the full softmax.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .ctc import NUM_CLASSES, ctc_loss
from .net import BatchNorm, BlockConfig, Conv, ModelConfig, QuantReLU, Unit
from .quant import FLOAT, LayerCost, QuantSpec, layers_latency
from .signal_sim import ChunkSet
from .tensor import AdamW, Tape, Tensor
from .train import OptimConfig, batch_inputs, batches

IDENTITY = "identity"
FULL_KERNELS = (3, 5, 7, 9, 25, 31, 55, 75, 115, 123)
FULL_QUANTS = (QuantSpec(8, 4), QuantSpec(8, 8), QuantSpec(16, 8), QuantSpec(16, 16))


class SearchError(ValueError):
    pass


class LatencyTableError(KeyError):
    pass


@dataclass
class SearchSpace:
    """Slots are ``len(channel_options)`` stages of ``repeats`` slots each.

    ``op_options`` lists kernel sizes plus the string ``"identity"``.
    """

    op_options: list = field(default_factory=lambda: [3, 9, IDENTITY])
    quant_options: list = field(default_factory=lambda: [QuantSpec(8, 8), QuantSpec(16, 16)])
    channel_options: list = field(default_factory=lambda: [16])
    repeats: int = 1
    stem_kernel: int = 9
    stem_stride: int = 2
    chunk_len: int = 400

    def __post_init__(self):
        self.quant_options = [QuantSpec.parse(q) for q in self.quant_options]
        self.validate()

    def validate(self) -> None:
        if IDENTITY not in self.op_options:
            raise SearchError("identity must be among op_options")
        if not self.channel_options or self.repeats < 1:
            raise SearchError("need at least one stage and one repeat")
        if any(c < 1 for c in self.channel_options):
            raise SearchError("channel widths must be positive")
        if self.kernels and not self.quant_options:
            raise SearchError("kernel options need at least one quantization option")
        for k in self.kernels:
            if k < 1 or k % 2 == 0:
                raise SearchError(f"kernel sizes must be odd and positive, got {k}")
        if len(set(self.op_options)) != len(self.op_options) or len(set(self.quant_options)) != len(self.quant_options):
            raise SearchError("duplicate options")

    @property
    def kernels(self) -> list[int]:
        return [int(o) for o in self.op_options if o != IDENTITY]

    @property
    def depth(self) -> int:
        return len(self.channel_options) * self.repeats

    @property
    def candidates_per_slot(self) -> int:
        return len(self.kernels) * len(self.quant_options) + 1

    def slot_channels(self) -> list[tuple[int, int]]:
        """``(c_in, c_out)`` of every slot as seen by the supernet."""
        out, c = [], self.channel_options[0]
        for width in self.channel_options:
            for _ in range(self.repeats):
                out.append((c, width))
                c = width
        return out

    @property
    def frames(self) -> int:
        return T.conv_out_len(self.chunk_len, self.stem_kernel, self.stem_stride, (self.stem_kernel - 1) // 2)

    def to_dict(self) -> dict:
        return {
            "op_options": list(self.op_options),
            "quant_options": [q.to_list() for q in self.quant_options],
            "channel_options": list(self.channel_options),
            "repeats": self.repeats,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "chunk_len": self.chunk_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {"op_options", "quant_options", "channel_options", "repeats", "stem_kernel", "stem_stride", "chunk_len"}
        unknown = set(d) - known
        if unknown:
            raise SearchError(f"unknown search space keys: {sorted(unknown)}")
        return cls(**d)


def count_space(space: SearchSpace, channel_factor: int = 1) -> int:
    """Number of distinct sub-architectures (exact integer).

    Stage widths are fixed, so channels contribute ``channel_factor``
    (1 by default).
    """
    return space.candidates_per_slot ** space.depth * channel_factor


# ---------------------------------------------------------------- latency


def conv_signature(kernel, c_in, c_out, groups, l_out, quant: QuantSpec) -> tuple:
    return (int(kernel), int(c_in), int(c_out), int(groups), int(l_out), quant.weight_bits, quant.act_bits)


@dataclass
class LatencyTable:
    """Latency per convolution signature ``(K, C_in, C_out, groups, L_out, w_bits, a_bits)``."""

    entries: dict = field(default_factory=dict)

    def lookup(self, sig: tuple) -> float:
        try:
            return self.entries[sig]
        except KeyError:
            raise LatencyTableError(f"no latency entry for conv {sig}") from None

    def unit_latency(self, kernel, c_in, c_out, l_out, quant: QuantSpec) -> float:
        return (self.lookup(conv_signature(kernel, c_in, c_in, c_in, l_out, quant))
                + self.lookup(conv_signature(1, c_in, c_out, 1, l_out, quant)))

    def to_json(self) -> str:
        return json.dumps([[list(k), v] for k, v in sorted(self.entries.items())])

    @classmethod
    def from_json(cls, text: str) -> "LatencyTable":
        return cls({tuple(k): float(v) for k, v in json.loads(text)})


def _conv_latency(kernel, c_in, c_out, groups, l_out, quant) -> float:
    cost = LayerCost("op", "conv", 0, quant, c_in, c_out, groups, kernel, l_out)
    return layers_latency([cost])


def default_latency_table(space: SearchSpace, chunk_len: int | None = None) -> LatencyTable:
    """MACs / throughput(QuantSpec) for every conv the search space can realize."""
    l_out = space.frames if chunk_len is None else T.conv_out_len(
        chunk_len, space.stem_kernel, space.stem_stride, (space.stem_kernel - 1) // 2)
    entries = {}
    for c_in, c_out in space.slot_channels():
        for q in space.quant_options:
            for k in space.kernels:
                entries[conv_signature(k, c_in, c_in, c_in, l_out, q)] = _conv_latency(k, c_in, c_in, c_in, l_out, q)
            entries[conv_signature(1, c_in, c_out, 1, l_out, q)] = _conv_latency(1, c_in, c_out, 1, l_out, q)
    return LatencyTable(entries)


def arch_latency(config: ModelConfig, table: LatencyTable) -> float:
    """Summed latency of the block convolutions of ``config`` (stem and head excluded)."""
    stem = config.stem
    l_out = T.conv_out_len(config.chunk_len, stem.kernel_size, stem.stride, (stem.kernel_size - 1) // 2)
    total = 0.0
    for block, c_in in zip(config.blocks, config.channels_in()):
        if block.is_identity:
            continue
        c = c_in
        for _ in range(block.repeats):
            g = c if block.groups is None else block.groups
            total += table.lookup(conv_signature(block.kernel_size, c, c, g, l_out, block.quant))
            total += table.lookup(conv_signature(1, c, block.channels_out, 1, l_out, block.quant))
            c = block.channels_out
        if block.has_skip and c_in != block.channels_out:
            total += table.lookup(conv_signature(1, c_in, block.channels_out, 1, l_out, block.quant))
    return total


# ---------------------------------------------------------------- supernet


@dataclass
class Candidate:
    kernel: int | None  # None for identity
    quant: QuantSpec | None
    latency: float
    unit: Unit | None = None

    @property
    def is_identity(self) -> bool:
        return self.kernel is None

    def label(self) -> str:
        return IDENTITY if self.is_identity else f"k{self.kernel}{self.quant}"


class Slot:
    def __init__(self, index, c_in, c_out, candidates):
        self.index = index
        self.c_in = c_in
        self.c_out = c_out
        self.candidates: list[Candidate] = candidates
        self.alpha = Tensor(np.zeros(len(candidates)), requires_grad=True, dtype=np.float64)
        self.latencies = np.array([c.latency for c in candidates], dtype=np.float64)

    def probs(self) -> np.ndarray:
        a = self.alpha.data - self.alpha.data.max()
        e = np.exp(a)
        return e / e.sum()

    def run(self, j: int, x: Tensor, training: bool, observe: bool) -> Tensor:
        cand = self.candidates[j]
        if cand.is_identity:
            return T.match_channels(x, self.c_out)
        return cand.unit.act(cand.unit.pre_activation(x, training), observe)

    def candidate_params(self, j: int) -> list[Tensor]:
        unit = self.candidates[j].unit
        if unit is None:
            return []
        return unit.dw.params() + unit.pw.params() + unit.bn.params()


def _mix(outputs: Sequence[Tensor], gate: Tensor) -> Tensor:
    """``sum_j gate[j] * outputs[j]``; the gate gradient is accumulated in float64."""
    gv = gate.data
    out = np.zeros_like(outputs[0].data)
    for j, o in enumerate(outputs):
        if gv[j] != 0:
            out += (gv[j] * o.data).astype(out.dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        ggate = np.array([float(np.sum(g64 * o.data)) for o in outputs])
        return tuple((g * gv[j]).astype(o.dtype) for j, o in enumerate(outputs)) + (ggate,)

    return T.custom_op(out, tuple(outputs) + (gate,), grad_fn, "mix")


class Supernet:
    def __init__(self, space: SearchSpace, seed: int = 0, table: LatencyTable | None = None):
        space.validate()
        self.space = space
        self.table = table or default_latency_table(space)
        self.training = True
        rng = np.random.default_rng(seed)
        c0 = space.channel_options[0]
        self.stem_cfg = BlockConfig(kernel_size=space.stem_kernel, channels_out=c0, stride=space.stem_stride)
        self.stem_conv = Conv("stem.conv", 1, c0, space.stem_kernel, FLOAT, rng, stride=space.stem_stride)
        self.stem_bn = BatchNorm("stem.bn", c0, FLOAT)
        self.stem_act = QuantReLU("stem.act", 32)
        l_out = space.frames
        self.slots: list[Slot] = []
        for s, (c_in, c_out) in enumerate(space.slot_channels()):
            cands = []
            for op in space.op_options:
                if op == IDENTITY:
                    continue
                for q in space.quant_options:
                    unit = Unit(f"slot{s}.k{op}.{q}", c_in, c_out, BlockConfig(int(op), c_out, quant=q), rng, 0.1, 1e-5)
                    cands.append(Candidate(int(op), q, self.table.unit_latency(int(op), c_in, c_out, l_out, q), unit))
            cands.append(Candidate(None, None, 0.0))
            self.slots.append(Slot(s, c_in, c_out, cands))
        self.head = Conv("head", space.channel_options[-1], NUM_CLASSES, 1, FLOAT, rng, bias=True)

    # -- parameters
    def shared_params(self) -> list[Tensor]:
        return self.stem_conv.params() + self.stem_bn.params() + self.head.params()

    def weight_params(self) -> list[Tensor]:
        out = self.shared_params()
        for slot in self.slots:
            for j in range(len(slot.candidates)):
                out += slot.candidate_params(j)
        return out

    def alphas(self) -> list[Tensor]:
        return [slot.alpha for slot in self.slots]

    def path_params(self, path: Sequence[int]) -> list[Tensor]:
        out = self.shared_params()
        for slot, j in zip(self.slots, path):
            out += slot.candidate_params(j)
        return out

    def output_length(self, length: int) -> int:
        return self.stem_conv.out_len(length)

    # -- forward
    def _stem(self, x: Tensor) -> Tensor:
        return self.stem_act(self.stem_bn(self.stem_conv(x), self.training), self.training)

    def _head(self, h: Tensor) -> Tensor:
        if h.shape[1] != self.head.c_in:
            h = T.match_channels(h, self.head.c_in)
        return T.transpose(T.log_softmax(self.head(h), axis=1), (2, 0, 1))

    def forward_path(self, x: Tensor, path: Sequence[int]) -> Tensor:
        """Log-posteriors ``[T, N, 5]`` through one candidate per slot."""
        if len(path) != len(self.slots):
            raise SearchError(f"path has {len(path)} entries for {len(self.slots)} slots")
        h = self._stem(x)
        for slot, j in zip(self.slots, path):
            h = slot.run(j, h, self.training, self.training)
        return self._head(h)

    def forward_gated(self, x: Tensor, gates: Sequence[Tensor]) -> Tensor:
        """Every candidate runs; slot output is ``sum_j gate[j] * o_j``."""
        h = self._stem(x)
        for slot, gate in zip(self.slots, gates):
            outs = [slot.run(j, h, self.training, self.training) for j in range(len(slot.candidates))]
            h = _mix(outs, gate)
        return self._head(h)

    def expected_latency(self) -> Tensor:
        return expected_latency(self)


def build_supernet(space: SearchSpace, seed: int = 0, table: LatencyTable | None = None) -> Supernet:
    return Supernet(space, seed, table)


def expected_latency(supernet: Supernet) -> Tensor:
    """``sum_slots sum_j softmax(alpha)_j * latency_j``, differentiable w.r.t. every alpha."""
    total = None
    for slot in supernet.slots:
        p = T.softmax(slot.alpha, axis=0)
        term = T.tsum(T.mul(p, slot.latencies))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------- search


@dataclass
class SearchConfig:
    lam: float = 0.6
    target_latency: float = 1.0
    epochs: int = 1
    batch_size: int = 64
    weight_optim: OptimConfig = field(default_factory=OptimConfig)
    alpha_lr: float = 2e-3
    alpha_betas: tuple = (0.9, 0.999)
    alpha_weight_decay: float = 0.01
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise SearchError("lambda must be >= 0")
        if self.target_latency <= 0:
            raise SearchError("target latency must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise SearchError("epochs, batch size and warmup must be non-negative")


class Searcher:
    """Optimizer state and sampling rng for alternating weight/alpha steps."""

    def __init__(self, supernet: Supernet, cfg: SearchConfig):
        self.net = supernet
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.wopt = cfg.weight_optim.make(supernet.weight_params())
        self.aopt = AdamW(supernet.alphas(), lr=cfg.alpha_lr, betas=tuple(cfg.alpha_betas),
                          weight_decay=cfg.alpha_weight_decay)
        self.steps = 0

    def sample_path(self) -> list[int]:
        return [int(self.rng.choice(len(s.candidates), p=s.probs())) for s in self.net.slots]

    def weight_step(self, batch) -> float:
        x, targets, input_lens = batch
        path = self.sample_path()
        params = self.net.path_params(path)
        for p in params:
            p.grad = None
        self.net.training = True
        with Tape() as tape:
            loss = ctc_loss(self.net.forward_path(x, path), targets, input_lens)
        tape.backward(loss)
        self.wopt.step(params)
        return loss.item()

    def alpha_loss(self, batch, path: Sequence[int] | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Validation CTC through straight-through gates plus the latency regularizer."""
        x, targets, input_lens = batch
        path = self.sample_path() if path is None else path
        gates = []
        for slot, j in zip(self.net.slots, path):
            p = T.softmax(slot.alpha, axis=0)
            onehot = np.zeros(len(slot.candidates))
            onehot[j] = 1.0
            gates.append(T.add(T.sub(p, T.detach(p)), Tensor(onehot, dtype=np.float64)))
        val = ctc_loss(self.net.forward_gated(x, gates), targets, input_lens)
        lat = expected_latency(self.net)
        tgt = self.cfg.target_latency
        reg = T.mul(T.sub(lat, Tensor(np.array(tgt), dtype=np.float64)), self.cfg.lam / tgt)
        total = T.add(_to64(val), reg)
        return total, val, lat

    def alpha_step(self, batch) -> dict:
        for a in self.net.alphas():
            a.grad = None
        self.net.training = True
        with Tape() as tape:
            total, val, lat = self.alpha_loss(batch)
        tape.backward(total)
        self.aopt.step()
        return {"val_loss": val.item(), "expected_latency": lat.item(), "objective": total.item()}

    def step(self, train_batch, val_batch) -> dict:
        train_loss = self.weight_step(train_batch)
        out = {"train_loss": train_loss}
        if self.steps >= self.cfg.warmup_steps:
            out.update(self.alpha_step(val_batch))
        self.steps += 1
        return out


def _to64(x: Tensor) -> Tensor:
    return T.custom_op(x.data.astype(np.float64), (x,), lambda g: (g.astype(x.dtype),), "to64")


def search_step(searcher: Searcher, train_batch, val_batch) -> dict:
    return searcher.step(train_batch, val_batch)


TRAJECTORY_COLUMNS = ("step", "slot", "candidate", "weight", "expected_latency", "train_loss", "val_loss")


def search(supernet: Supernet, train: ChunkSet, val: ChunkSet, cfg: SearchConfig, log=None) -> list[dict]:
    """Run ``cfg.epochs`` passes over ``train``; returns the alpha trajectory rows."""
    searcher = Searcher(supernet, cfg)
    rows = []
    val_order = np.random.default_rng(cfg.seed + 1)
    val_iter = _cycle(len(val), cfg.batch_size, val_order)
    for epoch in range(cfg.epochs):
        for idx in batches(len(train), cfg.batch_size, searcher.rng):
            tb = batch_inputs(supernet, train, idx)
            vb = batch_inputs(supernet, val, next(val_iter))
            info = searcher.step(tb, vb)
            lat = expected_latency(supernet).item()
            for slot in supernet.slots:
                for j, (cand, w) in enumerate(zip(slot.candidates, slot.probs())):
                    rows.append({
                        "step": searcher.steps, "slot": slot.index, "candidate": cand.label(), "weight": float(w),
                        "expected_latency": lat, "train_loss": info["train_loss"],
                        "val_loss": info.get("val_loss", float("nan")),
                    })
            if log is not None:
                log(epoch, searcher.steps, info)
    supernet.training = False
    return rows


def _cycle(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        yield from batches(n, batch_size, rng)


def write_trajectory(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(TRAJECTORY_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


# ---------------------------------------------------------------- derivation


def select(supernet: Supernet) -> list[int]:
    """Argmax candidate per slot; ties go to the lower latency, then the smaller kernel."""
    path = []
    for slot in supernet.slots:
        a = slot.alpha.data
        best = max(range(len(a)), key=lambda j: (a[j], -slot.latencies[j], -(slot.candidates[j].kernel or 0)))
        path.append(best)
    return path


def config_for_path(supernet: Supernet, path: Sequence[int], skip: bool = False,
                    channels: Sequence[int] | None = None) -> ModelConfig:
    """ModelConfig realizing one candidate per slot.

    Identity slots are dropped; a parameter-free width adapter is kept only
    where a later block would otherwise see a different input width than in
    the supernet.  ``channels`` optionally overrides the per-stage widths.
    """
    space = supernet.space
    widths = list(space.channel_options if channels is None else channels)
    if len(widths) != len(space.channel_options):
        raise SearchError(f"expected {len(space.channel_options)} stage widths, got {len(widths)}")
    slot_width = [w for w in widths for _ in range(space.repeats)]
    slot_in = [widths[0]] + slot_width[:-1]
    blocks, current = [], widths[0]
    for s, (slot, j) in enumerate(zip(supernet.slots, path)):
        cand = slot.candidates[j]
        if cand.is_identity:
            continue
        if current != slot_in[s]:
            blocks.append(BlockConfig(channels_out=slot_in[s], is_identity=True))
        blocks.append(BlockConfig(kernel_size=cand.kernel, channels_out=slot_width[s], repeats=1,
                                  has_skip=skip, quant=cand.quant))
        current = slot_width[s]
    stem = BlockConfig(kernel_size=space.stem_kernel, channels_out=widths[0], stride=space.stem_stride)
    return ModelConfig(stem=stem, blocks=blocks, chunk_len=space.chunk_len)


def derive_architecture(supernet: Supernet, channels: Sequence[int] | None = None, skip: bool = False) -> ModelConfig:
    return config_for_path(supernet, select(supernet), skip=skip, channels=channels)


def path_latency(supernet: Supernet, path: Sequence[int]) -> float:
    return float(sum(slot.latencies[j] for slot, j in zip(supernet.slots, path)))


def all_paths(supernet: Supernet):
    """Every sub-architecture as a candidate-index tuple."""
    sizes = [len(s.candidates) for s in supernet.slots]
    for flat in range(math.prod(sizes)):
        path = []
        for n in reversed(sizes):
            path.append(flat % n)
            flat //= n
        yield tuple(reversed(path))
