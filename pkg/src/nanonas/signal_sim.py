"""Synthetic nanopore squiggles, med-MAD normalization and chunked datasets.

Reads are produced from a k-mer pore model: every base dwells for a uniform
random number of samples at the current level of the k-mer starting at that
base, plus Gaussian noise.  The level table is derived from a keyed hash so
that ``(k, seed)`` fully determines it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ctc import encode, min_frames

BASES = "ACGT"
MAD_SCALE = 1.4826


class SimulationError(ValueError):
    pass


def _hash_unit(*parts) -> float:
    digest = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0**64


@dataclass
class PoreModel:
    k: int
    levels: dict
    sigmas: dict
    level_range: tuple = (60.0, 120.0)

    @classmethod
    def build(cls, k: int = 3, seed: int = 0, level_range=(60.0, 120.0), min_gap_frac: float | None = None,
              sigma_jitter: float = 0.0) -> "PoreModel":
        """Spread ``4**k`` levels evenly over ``level_range`` in hashed order.

        Each level is jittered by at most half the slack between the even
        spacing and ``min_gap_frac`` of the range, so neighbouring levels
        never come closer than ``min_gap_frac * range``.
        """
        if k < 1:
            raise SimulationError("k must be >= 1")
        kmers = ["".join(p) for p in itertools.product(BASES, repeat=k)]
        lo, hi = map(float, level_range)
        span = hi - lo
        n = len(kmers)
        step = span / max(n - 1, 1)
        if min_gap_frac is None:
            min_gap_frac = 0.5 * step / span
        min_gap = min_gap_frac * span
        if n > 1 and min_gap > step:
            raise SimulationError(f"min gap {min_gap:.4g} exceeds even spacing {step:.4g} for k={k}")
        slack = (step - min_gap) / 2 if n > 1 else 0.0
        order = sorted(kmers, key=lambda km: _hash_unit("order", seed, km))
        levels, sigmas = {}, {}
        for rank, km in enumerate(order):
            jitter = (2 * _hash_unit("jitter", seed, km) - 1) * slack
            if rank in (0, n - 1):
                jitter = 0.0
            levels[km] = lo + rank * step + jitter
            sigmas[km] = 1.0 + sigma_jitter * (2 * _hash_unit("sigma", seed, km) - 1)
        return cls(k, levels, sigmas, (lo, hi))

    def kmer_at(self, seq: str, i: int) -> str:
        start = min(i, len(seq) - self.k)
        return seq[start : start + self.k]

    def level_array(self, seq: str) -> tuple[np.ndarray, np.ndarray]:
        km = [self.kmer_at(seq, i) for i in range(len(seq))]
        return np.array([self.levels[x] for x in km]), np.array([self.sigmas[x] for x in km])


@dataclass
class Read:
    id: str
    sequence: str
    signal: np.ndarray
    dwell: np.ndarray

    def __post_init__(self):
        if int(self.dwell.sum()) != self.signal.size:
            raise SimulationError(f"read {self.id}: dwell total does not match signal length")

    @property
    def base_index(self) -> np.ndarray:
        """Reference position of every signal sample."""
        return np.repeat(np.arange(len(self.sequence)), self.dwell)


def random_genome(length: int, seed: int = 0) -> str:
    if length < 1:
        raise SimulationError("genome length must be positive")
    rng = np.random.default_rng(seed)
    return "".join(np.array(list(BASES))[rng.integers(0, 4, size=length)])


def simulate_read(seq: str, pore: PoreModel, dwell_range=(8, 12), noise_sigma: float = 1.0, seed: int = 0,
                  read_id: str = "read") -> Read:
    lo, hi = dwell_range
    if lo < 1 or hi < lo:
        raise SimulationError(f"empty dwell range {dwell_range}")
    if len(seq) < pore.k:
        raise SimulationError(f"sequence shorter than k={pore.k}")
    rng = np.random.default_rng(seed)
    dwell = rng.integers(lo, hi + 1, size=len(seq))
    levels, sigmas = pore.level_array(seq)
    mean = np.repeat(levels, dwell)
    noise = rng.normal(0.0, 1.0, size=mean.size) * np.repeat(sigmas, dwell) * noise_sigma
    return Read(read_id, seq, (mean + noise).astype(np.float32), dwell.astype(np.int64))


def normalize_med_mad(signal: np.ndarray) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise SimulationError("cannot normalize an empty signal")
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    if mad <= 0:
        raise SimulationError("signal has zero MAD (constant signal)")
    return ((x - med) / (MAD_SCALE * mad)).astype(np.float32)


@dataclass
class ChunkSet:
    signals: np.ndarray  # [M, chunk_len] float32, zero padded
    valid_lens: np.ndarray  # [M] samples that carry signal
    targets: list  # label arrays over {1..4}
    read_ids: list

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "ChunkSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ChunkSet(self.signals[idx], self.valid_lens[idx], [self.targets[i] for i in idx],
                        [self.read_ids[i] for i in idx])


def read_chunks(read: Read, chunk_len: int, overlap: int = 0, normalized: np.ndarray | None = None,
                keep_tail: bool = True):
    """Windows over one read with their majority-dwell labels.

    A base belongs to a window when more than half of its samples fall in
    it; a base split exactly in half goes to the earlier window.
    """
    if overlap < 0 or overlap >= chunk_len:
        raise SimulationError("overlap must satisfy 0 <= overlap < chunk_len")
    sig = normalize_med_mad(read.signal) if normalized is None else normalized
    n = sig.size
    step = chunk_len - overlap
    ends = np.cumsum(read.dwell)
    starts = ends - read.dwell
    labels = encode(read.sequence)
    out = []
    pos = 0
    while pos < n:
        stop = min(pos + chunk_len, n)
        if stop - pos < chunk_len and not keep_tail:
            break
        inside = np.clip(np.minimum(ends, stop) - np.maximum(starts, pos), 0, None)
        twice = 2 * inside
        take = (twice > read.dwell) | ((twice == read.dwell) & (starts >= pos) & (inside > 0))
        window = np.zeros(chunk_len, dtype=np.float32)
        window[: stop - pos] = sig[pos:stop]
        out.append((window, stop - pos, labels[take]))
        if stop == n:
            break
        pos += step
    return out


def chunk_dataset(reads, chunk_len: int = 400, overlap: int = 0, split_fractions=(0.8, 0.2), seed: int = 0,
                  dwell_max: int | None = None, keep_tail: bool = True) -> dict:
    """Chunk reads and split them by read id into ``train`` and ``eval`` sets."""
    reads = list(reads)
    if dwell_max is None:
        dwell_max = max((int(r.dwell.max()) for r in reads), default=0)
    if chunk_len <= dwell_max:
        raise SimulationError(f"chunk_len {chunk_len} must exceed the longest dwell {dwell_max}")
    if not 0 <= overlap < chunk_len:
        raise SimulationError("overlap must satisfy 0 <= overlap < chunk_len")
    frac_train = split_fractions[0] / float(sum(split_fractions))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(reads))
    n_train = int(round(frac_train * len(reads)))
    splits = {"train": sorted(order[:n_train]), "eval": sorted(order[n_train:])}
    out = {}
    for name, idx in splits.items():
        sigs, lens, tgts, ids = [], [], [], []
        for i in idx:
            for window, valid, labels in read_chunks(reads[i], chunk_len, overlap, keep_tail=keep_tail):
                sigs.append(window)
                lens.append(valid)
                tgts.append(labels)
                ids.append(reads[i].id)
        perm = rng.permutation(len(tgts))
        signals = np.stack(sigs) if sigs else np.zeros((0, chunk_len), np.float32)
        cs = ChunkSet(signals, np.array(lens, dtype=np.int64), tgts, ids)
        out[name] = cs.subset(perm) if len(tgts) else cs
    return out


def chunk_feasible(chunks: ChunkSet, stride: int = 1) -> np.ndarray:
    frames = -(-chunks.valid_lens // stride)
    return np.array([min_frames(t) <= f for t, f in zip(chunks.targets, frames)])


# ---------------------------------------------------------------- datasets on disk


@dataclass
class SimConfig:
    k: int = 3
    n_reads: int = 200
    read_len: int = 500
    dwell_min: int = 8
    dwell_max: int = 12
    noise_sigma: float = 1.0
    level_low: float = 60.0
    level_high: float = 120.0
    chunk_len: int = 400
    overlap: int = 0
    split: list = field(default_factory=lambda: [0.8, 0.2])
    seed: int = 0


def simulate_reads(cfg: SimConfig) -> tuple[PoreModel, list[Read]]:
    pore = PoreModel.build(cfg.k, cfg.seed, (cfg.level_low, cfg.level_high))
    reads = []
    for i in range(cfg.n_reads):
        seq = random_genome(cfg.read_len, seed=[cfg.seed, 1, i])
        reads.append(simulate_read(seq, pore, (cfg.dwell_min, cfg.dwell_max), cfg.noise_sigma,
                                   seed=[cfg.seed, 2, i], read_id=f"read{i:05d}"))
    return pore, reads


def split_read_ids(reads, cfg: SimConfig) -> dict:
    frac_train = cfg.split[0] / float(sum(cfg.split))
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(reads))
    n_train = int(round(frac_train * len(reads)))
    return {
        "train": [reads[i].id for i in sorted(order[:n_train])],
        "eval": [reads[i].id for i in sorted(order[n_train:])],
    }


def save_dataset(path, reads, cfg: SimConfig) -> Path:
    """Write ``reads.jsonl``, ``signals.bin``, ``manifest.json`` and ``reference.fasta``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "reads.jsonl", "w") as fh:
        for r in reads:
            fh.write(json.dumps({"id": r.id, "sequence": r.sequence, "dwell": r.dwell.tolist()}) + "\n")
    with open(path / "signals.bin", "wb") as fh:
        for r in reads:
            fh.write(struct.pack("<I", r.signal.size))
            fh.write(r.signal.astype("<f4").tobytes())
    manifest = {"format": 1, "config": asdict(cfg), "split": split_read_ids(reads, cfg)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_fasta(path / "reference.fasta", [(r.id, r.sequence) for r in reads])
    return path


def load_dataset(path) -> tuple[list[Read], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    meta = [json.loads(line) for line in (path / "reads.jsonl").read_text().splitlines() if line.strip()]
    raw = (path / "signals.bin").read_bytes()
    reads, off = [], 0
    for m in meta:
        if off + 4 > len(raw):
            raise SimulationError("signals.bin is truncated")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + 4 * n > len(raw):
            raise SimulationError("signals.bin is truncated")
        sig = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        reads.append(Read(m["id"], m["sequence"], sig, np.asarray(m["dwell"], dtype=np.int64)))
    if off != len(raw):
        raise SimulationError("signals.bin has trailing bytes")
    return reads, manifest


def write_fasta(path, records, width: int = 80) -> None:
    with open(path, "w") as fh:
        for name, seq in records:
            fh.write(f">{name}\n")
            for i in range(0, len(seq), width):
                fh.write(seq[i : i + width] + "\n")
            if not seq:
                fh.write("\n")


def read_fasta(path) -> list[tuple[str, str]]:
    records, name, parts = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith(">"):
            if name is not None:
                records.append((name, "".join(parts)))
            name, parts = line[1:].split()[0] if line[1:].strip() else "", []
        elif line.strip():
            parts.append(line.strip())
    if name is not None:
        records.append((name, "".join(parts)))
    return records
