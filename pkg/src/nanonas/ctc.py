"""CTC loss (log-space forward-backward) and greedy decoding.

Class ids: 0 is the blank, 1..4 are A, C, G, T.  Frame posteriors are laid
out ``[T, N, 5]`` as log-probabilities.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numba import njit

from .tensor import Tensor, custom_op

BLANK = 0
ALPHABET = "ACGT"
NUM_CLASSES = 5
_DECODE = np.array(list("-ACGT"))
_ENCODE = {b: i + 1 for i, b in enumerate(ALPHABET)}


class CtcError(ValueError):
    pass


class CtcInfeasibleError(CtcError):
    """Raised when some targets cannot be aligned in the available frames.

    ``losses`` holds the per-element losses (``inf`` where infeasible).
    """

    def __init__(self, indices, losses):
        self.indices = list(indices)
        self.losses = losses
        super().__init__(f"infeasible CTC targets for batch elements {self.indices}")


def encode(seq: str) -> np.ndarray:
    try:
        return np.array([_ENCODE[b] for b in seq], dtype=np.int64)
    except KeyError as exc:
        raise CtcError(f"unknown base {exc.args[0]!r}") from None


def decode_labels(labels) -> str:
    return "".join(ALPHABET[int(i) - 1] for i in labels)


def min_frames(labels) -> int:
    """Fewest frames able to emit ``labels``: length plus repeated neighbours."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


@njit(cache=True)
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def _ctc_single(lp, labels, t_len):
    """Negative log-likelihood and its gradient w.r.t. ``lp[:t_len]``."""
    n_lab = labels.shape[0]
    s_len = 2 * n_lab + 1
    n_cls = lp.shape[1]
    ext = np.zeros(s_len, dtype=np.int64)
    for i in range(n_lab):
        ext[2 * i + 1] = labels[i]
    grad = np.zeros((lp.shape[0], n_cls))
    if t_len == 0:
        return np.inf, grad
    la = np.full((t_len, s_len), -np.inf)
    la[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        la[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            a = la[t - 1, s]
            if s >= 1:
                a = _lse(a, la[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = _lse(a, la[t - 1, s - 2])
            la[t, s] = a + lp[t, ext[s]]
    logp = la[t_len - 1, s_len - 1]
    if s_len > 1:
        logp = _lse(logp, la[t_len - 1, s_len - 2])
    if logp == -np.inf:
        return np.inf, grad
    lb = np.full((t_len, s_len), -np.inf)
    lb[t_len - 1, s_len - 1] = lp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        lb[t_len - 1, s_len - 2] = lp[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            b = lb[t + 1, s]
            if s + 1 < s_len:
                b = _lse(b, lb[t + 1, s + 1])
            if s + 2 < s_len and ext[s] != 0 and ext[s + 2] != ext[s]:
                b = _lse(b, lb[t + 1, s + 2])
            lb[t, s] = b + lp[t, ext[s]]
    acc = np.full(n_cls, -np.inf)
    for t in range(t_len):
        for c in range(n_cls):
            acc[c] = -np.inf
        for s in range(s_len):
            c = ext[s]
            acc[c] = _lse(acc[c], la[t, s] + lb[t, s] - lp[t, c])
        for c in range(n_cls):
            if acc[c] != -np.inf:
                grad[t, c] = -np.exp(acc[c] - logp)
    return -logp, grad


@njit(cache=True)
def _ctc_scaled(lp, labels, t_len):
    """Same result as :func:`_ctc_single` using rescaled linear-domain recursions.

    Emissions are exponentiated after subtracting each frame's max and the
    forward/backward variables are renormalized every frame; the log of the
    scale factors carries the likelihood.  Returns ``ok=False`` on underflow.
    """
    n_lab = labels.shape[0]
    s_len = 2 * n_lab + 1
    n_cls = lp.shape[1]
    grad = np.zeros((lp.shape[0], n_cls))
    if t_len == 0:
        return np.inf, grad, True
    ext = np.zeros(s_len, dtype=np.int64)
    for i in range(n_lab):
        ext[2 * i + 1] = labels[i]
    skip = np.zeros(s_len, dtype=np.bool_)
    for s in range(2, s_len):
        skip[s] = ext[s] != 0 and ext[s] != ext[s - 2]
    y = np.empty((t_len, n_cls))
    log_scale = 0.0
    for t in range(t_len):
        m = lp[t, 0]
        for c in range(1, n_cls):
            if lp[t, c] > m:
                m = lp[t, c]
        log_scale += m
        for c in range(n_cls):
            y[t, c] = np.exp(lp[t, c] - m)
    alpha = np.zeros((t_len, s_len))
    alpha[0, 0] = y[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = y[0, ext[1]]
    for t in range(t_len):
        if t > 0:
            for s in range(s_len):
                a = alpha[t - 1, s]
                if s >= 1:
                    a += alpha[t - 1, s - 1]
                if skip[s]:
                    a += alpha[t - 1, s - 2]
                alpha[t, s] = a * y[t, ext[s]]
        z = 0.0
        for s in range(s_len):
            z += alpha[t, s]
        if z == 0.0:
            return np.inf, grad, False
        log_scale += np.log(z)
        for s in range(s_len):
            alpha[t, s] /= z
    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail += alpha[t_len - 1, s_len - 2]
    if tail == 0.0:
        return np.inf, grad, True
    logp = log_scale + np.log(tail)
    # beta excludes the emission at its own frame
    beta = np.zeros(s_len)
    nxt = np.zeros(s_len)
    beta[s_len - 1] = 1.0
    if s_len > 1:
        beta[s_len - 2] = 1.0
    occ = np.zeros(n_cls)
    for t in range(t_len - 1, -1, -1):
        if t < t_len - 1:
            for s in range(s_len):
                nxt[s] = beta[s] * y[t + 1, ext[s]]
            z = 0.0
            for s in range(s_len):
                b = nxt[s]
                if s + 1 < s_len:
                    b += nxt[s + 1]
                if s + 2 < s_len and skip[s + 2]:
                    b += nxt[s + 2]
                beta[s] = b
                z += b
            if z == 0.0:
                return np.inf, grad, False
            for s in range(s_len):
                beta[s] /= z
        for c in range(n_cls):
            occ[c] = 0.0
        total = 0.0
        for s in range(s_len):
            v = alpha[t, s] * beta[s]
            occ[ext[s]] += v
            total += v
        if total == 0.0:
            return np.inf, grad, False
        for c in range(n_cls):
            grad[t, c] = -occ[c] / total
    return -logp, grad, True


def _normalize_targets(targets, target_lens, batch):
    if len(targets) != batch:
        raise CtcError(f"{len(targets)} targets for batch of {batch}")
    out = []
    for i, tgt in enumerate(targets):
        arr = encode(tgt) if isinstance(tgt, str) else np.asarray(tgt, dtype=np.int64)
        if arr.size and (arr.min() < 1 or arr.max() >= NUM_CLASSES):
            raise CtcError(f"target {i} contains blank or out-of-range labels")
        if target_lens is not None and int(target_lens[i]) != arr.size:
            raise CtcError(f"target_lens[{i}]={target_lens[i]} but target has {arr.size} labels")
        out.append(np.ascontiguousarray(arr))
    return out


def ctc_losses(
    log_probs: np.ndarray,
    targets: Sequence,
    input_lens: Sequence[int] | None = None,
    target_lens: Sequence[int] | None = None,
    norm_tol: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-element losses and gradients for a ``[T, N, C]`` array.

    Infeasible elements get ``inf`` loss and zero gradient.
    """
    if log_probs.ndim != 3:
        raise CtcError("log_probs must be [T, N, C]")
    t_max, batch, n_cls = log_probs.shape
    if not np.isfinite(log_probs).all():
        raise CtcError("log_probs contain non-finite values")
    row_mass = np.logaddexp.reduce(log_probs.astype(np.float64), axis=2)
    if np.abs(row_mass).max(initial=0.0) > norm_tol:
        raise CtcError("log_probs rows are not normalized")
    labels = _normalize_targets(targets, target_lens, batch)
    if input_lens is None:
        input_lens = [t_max] * batch
    lp64 = np.ascontiguousarray(log_probs.astype(np.float64).transpose(1, 0, 2))
    losses = np.empty(batch)
    grads = np.zeros((batch, t_max, n_cls))
    for i in range(batch):
        t_len = int(input_lens[i])
        if not 0 <= t_len <= t_max:
            raise CtcError(f"input_lens[{i}]={t_len} outside [0, {t_max}]")
        loss, g, ok = _ctc_scaled(lp64[i], labels[i], t_len)
        if not ok:
            loss, g = _ctc_single(lp64[i], labels[i], t_len)
        losses[i] = loss
        grads[i] = g
    return losses, grads.transpose(1, 0, 2)


def ctc_loss(
    log_probs: Tensor,
    targets: Sequence,
    input_lens: Sequence[int] | None = None,
    target_lens: Sequence[int] | None = None,
) -> Tensor:
    """Mean negative log-likelihood over the batch, differentiable w.r.t. ``log_probs``."""
    losses, grads = ctc_losses(log_probs.data, targets, input_lens, target_lens)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise CtcInfeasibleError(bad, losses)
    batch = losses.size
    value = np.asarray(losses.mean(), dtype=log_probs.dtype)
    gl = (grads / batch).astype(log_probs.dtype)
    return custom_op(value, (log_probs,), lambda g: (gl * g,), "ctc_loss")


def greedy_decode(log_probs, lengths: Sequence[int] | None = None) -> list[str]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=2)  # [T, N]; ties go to the lower class id
    out = []
    for i in range(best.shape[1]):
        path = best[: (lengths[i] if lengths is not None else best.shape[0]), i]
        if path.size == 0:
            out.append("")
            continue
        keep = np.ones(path.size, dtype=bool)
        keep[1:] = path[1:] != path[:-1]
        collapsed = path[keep]
        out.append("".join(_DECODE[collapsed[collapsed != BLANK]]))
    return out


ctc_greedy_decode = greedy_decode
