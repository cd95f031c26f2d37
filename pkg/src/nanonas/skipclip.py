"""Gradual skip-connection removal with knowledge distillation.

A frozen float teacher supplies softened frame posteriors.  At epochs
``0, stride, 2*stride, ...`` the student loses the skip of its earliest
remaining skip block and keeps training on
``alpha * CTC + (1 - alpha) * tau^2 * D(teacher || student)``.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .ctc import ctc_loss
from .net import Model, remove_skip
from .signal_sim import ChunkSet
from .tensor import Tensor
from .train import OptimConfig, read_identities, train_epoch

DIVERGENCES = ("kl", "ce")


class ScheduleError(ValueError):
    pass


@dataclass
class KdConfig:
    alpha: float = 0.9
    tau: float = 2.0
    skip_stride: int = 1
    divergence: str = "kl"
    epochs_total: int = 10
    batch_size: int = 64
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.skip_stride < 1:
            raise ValueError("skip_stride must be >= 1")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}")
        if self.epochs_total < 0:
            raise ValueError("epochs_total must be >= 0")


def soften(logprobs: np.ndarray, tau: float) -> np.ndarray:
    """``log_softmax(logprobs / tau)`` over the class axis (last)."""
    z = logprobs / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _frame_mask(shape, input_lens) -> np.ndarray:
    t_max, batch = shape[0], shape[1]
    if input_lens is None:
        return np.ones((t_max, batch), dtype=bool)
    return np.arange(t_max)[:, None] < np.asarray(input_lens)[None, :]


def distill_loss(student: Tensor, teacher: np.ndarray, tau: float, divergence: str = "kl",
                 input_lens=None) -> Tensor:
    """``tau^2 * mean over valid frames of D(soft teacher || soft student)``."""
    teacher = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} posteriors differ in shape")
    if divergence not in DIVERGENCES:
        raise ValueError(f"divergence must be one of {DIVERGENCES}")
    mask = _frame_mask(student.shape, input_lens)
    count = max(int(mask.sum()), 1)
    log_pt = soften(teacher.astype(np.float64), tau)
    pt = np.exp(log_pt) * mask[..., None]
    log_ps = T.log_softmax(T.mul(student, 1.0 / tau), axis=2)
    cross = T.tsum(T.mul(log_ps, (-pt / count).astype(student.dtype)))
    if divergence == "kl":
        entropy = float((pt * log_pt).sum() / count)
        cross = T.add(cross, Tensor(np.array(entropy), dtype=student.dtype))
    return T.mul(cross, tau * tau)


def kd_components(student: Tensor, teacher, targets, input_lens, cfg: KdConfig) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, student_loss, distill_loss)``."""
    ls = ctc_loss(student, targets, input_lens)
    ld = distill_loss(student, teacher, cfg.tau, cfg.divergence, input_lens)
    if cfg.alpha == 1.0:
        return ls, ls, ld
    total = T.add(T.mul(ls, cfg.alpha), T.mul(ld, 1.0 - cfg.alpha))
    return total, ls, ld


def kd_loss(student: Tensor, teacher, targets, input_lens, cfg: KdConfig) -> Tensor:
    return kd_components(student, teacher, targets, input_lens, cfg)[0]


def weights_checksum(model: Model) -> int:
    crc = 0
    for name, arr in sorted(model.state_dict().items()):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
    return crc


def removal_epochs(n_skips: int, stride: int) -> list[int]:
    return [i * stride for i in range(n_skips)]


def check_schedule(n_skips: int, cfg: KdConfig) -> None:
    if cfg.epochs_total < n_skips * cfg.skip_stride:
        raise ScheduleError(
            f"{cfg.epochs_total} epochs cannot remove {n_skips} skips at stride {cfg.skip_stride} "
            f"(need at least {n_skips * cfg.skip_stride})"
        )


def remove_all_skips(model: Model) -> Model:
    """Copy of ``model`` with every skip connection and projection deleted."""
    out = model.copy()
    for idx in out.skip_blocks():
        remove_skip(out, idx, inplace=True)
    return out


TRAJECTORY_COLUMNS = ("epoch", "skips_remaining", "train_loss", "val_identity")


def skipclip_train(
    teacher: Model,
    student: Model,
    train: ChunkSet,
    cfg: KdConfig,
    val_reads=None,
    log: Callable | None = None,
) -> tuple[Model, list[dict]]:
    """Distill into ``student`` (modified in place) while clipping its skips.

    Returns the student and one trajectory row per epoch.
    """
    n_skips = len(student.skip_blocks())
    if n_skips < 1:
        raise ScheduleError("student has no skip connections to remove")
    check_schedule(n_skips, cfg)
    if teacher is student:
        raise ValueError("teacher and student must be distinct models")
    length = train_chunk_len(train)
    if teacher.output_length(length) != student.output_length(length):
        raise ScheduleError(
            f"teacher emits {teacher.output_length(length)} frames per chunk but the student emits "
            f"{student.output_length(length)}; their stem strides must match"
        )
    teacher.eval()
    removals = set(removal_epochs(n_skips, cfg.skip_stride))

    def loss_fn(model, x, targets, input_lens):
        with T.no_tape():
            teacher_lp = teacher(x).data
        return kd_loss(model(x), teacher_lp, targets, input_lens, cfg)

    opt = cfg.optim.make(student.parameters())
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for epoch in range(cfg.epochs_total):
        if epoch in removals and student.skip_blocks():
            remove_skip(student, student.skip_blocks()[0], inplace=True)
        loss = train_epoch(student, train, opt, rng, cfg.batch_size, loss_fn=loss_fn)
        ident = float(np.median(read_identities(student, val_reads, train_chunk_len(train)))) if val_reads else float("nan")
        row = {"epoch": epoch, "skips_remaining": len(student.skip_blocks()), "train_loss": loss, "val_identity": ident}
        rows.append(row)
        if log is not None:
            log(row)
    student.eval()
    return student, rows


def train_chunk_len(chunks: ChunkSet) -> int:
    return int(chunks.signals.shape[1])


def write_trajectory(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(TRAJECTORY_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
