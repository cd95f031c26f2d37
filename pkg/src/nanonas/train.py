"""Training loops, chunked basecalling and read-level evaluation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ctc import ctc_loss, greedy_decode
from .eval_report import align_identity
from .net import Model
from .signal_sim import ChunkSet, Read, normalize_med_mad
from .tensor import AdamW, Tape, Tensor


@dataclass
class OptimConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8

    def make(self, params) -> AdamW:
        return AdamW(params, lr=self.lr, betas=(self.beta1, self.beta2), weight_decay=self.weight_decay, eps=self.eps)


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def batch_inputs(model: Model, chunks: ChunkSet, idx) -> tuple[Tensor, list, list]:
    x = Tensor(chunks.signals[idx][:, None, :])
    input_lens = [model.output_length(int(v)) for v in chunks.valid_lens[idx]]
    targets = [chunks.targets[i] for i in idx]
    return x, targets, input_lens


def ctc_step_loss(model: Model, x: Tensor, targets, input_lens) -> Tensor:
    return ctc_loss(model(x), targets, input_lens)


def train_epoch(
    model: Model,
    chunks: ChunkSet,
    opt: AdamW,
    rng: np.random.Generator,
    batch_size: int = 64,
    loss_fn: Callable | None = None,
    after_step: Callable | None = None,
) -> float:
    """One pass over ``chunks``; returns the mean batch loss.

    ``loss_fn(model, x, targets, input_lens)`` defaults to plain CTC.
    ``after_step`` runs after every optimizer update (mask enforcement).
    """
    loss_fn = loss_fn or ctc_step_loss
    model.train()
    total, count = 0.0, 0
    for idx in batches(len(chunks), batch_size, rng):
        x, targets, input_lens = batch_inputs(model, chunks, idx)
        opt.zero_grad()
        with Tape() as tape:
            loss = loss_fn(model, x, targets, input_lens)
        tape.backward(loss)
        opt.step(model.parameters())
        if after_step is not None:
            after_step()
        total += loss.item()
        count += 1
    return total / max(count, 1)


def evaluate_loss(model: Model, chunks: ChunkSet, batch_size: int = 128) -> float:
    """Mean CTC loss over ``chunks`` in eval mode."""
    model.eval()
    total, n = 0.0, 0
    for idx in batches(len(chunks), batch_size, None):
        x, targets, input_lens = batch_inputs(model, chunks, idx)
        total += ctc_loss(model(x), targets, input_lens).item() * len(idx)
        n += len(idx)
    return total / max(n, 1)


def fit(model: Model, train: ChunkSet, epochs: int, seed: int = 0, batch_size: int = 64,
        optim: OptimConfig | None = None, after_step: Callable | None = None, log: Callable | None = None) -> list:
    opt = (optim or OptimConfig()).make(model.parameters())
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        loss = train_epoch(model, train, opt, rng, batch_size, after_step=after_step)
        history.append(loss)
        if log is not None:
            log(epoch, loss)
    model.eval()
    return history


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RUBI_THREADS", "1")))
    except ValueError:
        return 1


def basecall_read(model: Model, read: Read | np.ndarray, chunk_len: int = 400, batch_size: int = 64) -> str:
    """Basecall one read: normalize, cut non-overlapping chunks, decode, concatenate."""
    signal = read.signal if isinstance(read, Read) else np.asarray(read, dtype=np.float32)
    sig = normalize_med_mad(signal)
    n_chunks = -(-sig.size // chunk_len)
    windows = np.zeros((n_chunks, chunk_len), dtype=np.float32)
    valid = np.empty(n_chunks, dtype=np.int64)
    for i in range(n_chunks):
        part = sig[i * chunk_len : (i + 1) * chunk_len]
        windows[i, : part.size] = part
        valid[i] = part.size
    model.eval()
    pieces = []
    for start in range(0, n_chunks, batch_size):
        sl = slice(start, start + batch_size)
        lp = model(Tensor(windows[sl][:, None, :]))
        lens = [model.output_length(int(v)) for v in valid[sl]]
        pieces.extend(greedy_decode(lp, lens))
    return "".join(pieces)


def basecall_reads(model: Model, reads, chunk_len: int = 400, threads: int | None = None) -> list[str]:
    reads = list(reads)
    threads = threads or worker_count()
    if threads <= 1 or len(reads) < 2:
        return [basecall_read(model, r, chunk_len) for r in reads]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda r: basecall_read(model, r, chunk_len), reads))


def read_identities(model: Model, reads, chunk_len: int = 400) -> np.ndarray:
    reads = list(reads)
    calls = basecall_reads(model, reads, chunk_len)
    out = []
    for call, read in zip(calls, reads):
        out.append(align_identity(call, read.sequence).identity if call else 0.0)
    return np.array(out)
