"""Synthetic sequence tasks with a learnable feature encoding.

Each token is mapped to a fixed random projection vector; an utterance's
feature matrix is that vector repeated for a couple of frames per token,
plus optional Gaussian noise. With zero noise the mapping is exactly
invertible by nearest neighbor, which the tests exploit; with noise the
model has to denoise before it can transduce.

Targets per task: copy returns the tokens, reverse flips them, and
downsample-map keeps every second token and relabels through a fixed
random permutation (a stand-in for output sequences shorter than and
differently labeled from the input).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError

TASKS = ("copy", "reverse", "downsample-map")

MAGIC = b"CASQD1"


@dataclass
class SyntheticTaskSpec:
    task: str = "copy"
    vocab_size: int = 20
    feat_dim: int = 8
    t_min: int = 10            # frame-length range of the feature matrix
    t_max: int = 30
    noise_std: float = 0.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0
    frames_per_token: int = 2  # keeps CTC feasible: T = 2L >= L + repeats

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be positive")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"bad length range [{self.t_min}, {self.t_max}]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.frames_per_token < 1:
            raise ConfigError("frames_per_token must be positive")


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray   # (n_frames, feat_dim) float64
    tokens: list[int]


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    projection: np.ndarray   # (vocab, feat_dim) token embedding used to build X
    permutation: np.ndarray  # (vocab,) relabeling used by downsample-map
    splits: dict[str, list[Utterance]] = field(default_factory=dict)


def _targets(task: str, tokens: np.ndarray, permutation: np.ndarray) -> list[int]:
    if task == "copy":
        return [int(t) for t in tokens]
    if task == "reverse":
        return [int(t) for t in tokens[::-1]]
    return [int(permutation[t]) for t in tokens[0::2]]


def generate_dataset(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic dataset: same spec and seed give identical splits.

    The projection, the relabeling permutation, and each split draw from
    independent children of the spec seed, so changing n_dev cannot
    perturb the training set.
    """
    spec.validate()
    ss = np.random.SeedSequence(spec.seed)
    proj_child, train_child, dev_child, test_child = ss.spawn(4)
    proj_rng = np.random.default_rng(proj_child)
    projection = proj_rng.standard_normal((spec.vocab_size, spec.feat_dim))
    permutation = proj_rng.permutation(spec.vocab_size)

    fpt = spec.frames_per_token
    l_min = max(1, -(-spec.t_min // fpt))  # ceil division
    l_max = max(l_min, spec.t_max // fpt)

    def make_split(n: int, child) -> list[Utterance]:
        rng = np.random.default_rng(child)
        out = []
        for i in range(n):
            n_tok = int(rng.integers(l_min, l_max + 1))
            tokens = rng.integers(0, spec.vocab_size, size=n_tok)
            feats = np.repeat(projection[tokens], fpt, axis=0)
            feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
            out.append(
                Utterance(f"utt-{i:06d}", feats, _targets(spec.task, tokens, permutation))
            )
        return out

    return Dataset(
        spec,
        projection,
        permutation,
        {
            "train": make_split(spec.n_train, train_child),
            "dev": make_split(spec.n_dev, dev_child),
            "test": make_split(spec.n_test, test_child),
        },
    )


def nearest_tokens(features: np.ndarray, projection: np.ndarray,
                   frames_per_token: int = 2) -> list[int]:
    """Nearest-neighbor read-back of the token sequence from features."""
    frames = features[::frames_per_token]
    d2 = ((frames[:, None, :] - projection[None, :, :]) ** 2).sum(axis=2)
    return [int(i) for i in d2.argmin(axis=1)]


# ---------------------------------------------------------------------------
# On-disk format: little-endian header + per-utterance records
# ---------------------------------------------------------------------------


def save_split(path: str, utts: list[Utterance], spec: SyntheticTaskSpec):
    """Header: magic, u32 count, u32 vocab, u32 feat_dim, u64 seed,
    u32 task length + task bytes. Records: u32 n_frames, frames as f64,
    u32 n_tokens, tokens as u32. Everything little-endian; utterance ids
    are positional, not stored."""
    task = spec.task.encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", len(utts), spec.vocab_size, spec.feat_dim))
        f.write(struct.pack("<Q", spec.seed))
        f.write(struct.pack("<I", len(task)))
        f.write(task)
        for u in utts:
            feats = np.ascontiguousarray(u.features, dtype="<f8")
            if feats.ndim != 2 or feats.shape[1] != spec.feat_dim:
                raise ContractError(f"features of {u.utt_id} are {feats.shape}")
            f.write(struct.pack("<I", feats.shape[0]))
            f.write(feats.tobytes())
            f.write(struct.pack("<I", len(u.tokens)))
            f.write(np.asarray(u.tokens, dtype="<u4").tobytes())


def load_split(path: str) -> tuple[list[Utterance], dict]:
    """Returns (utterances, header) with ids regenerated by position."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a dataset file (bad magic)")
    off = len(MAGIC)
    n_utts, vocab, feat_dim = struct.unpack_from("<III", raw, off)
    off += 12
    (seed,) = struct.unpack_from("<Q", raw, off)
    off += 8
    (task_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    task = raw[off : off + task_len].decode()
    off += task_len
    header = {"n_utts": n_utts, "vocab_size": vocab, "feat_dim": feat_dim,
              "seed": seed, "task": task}
    utts = []
    for i in range(n_utts):
        (n_frames,) = struct.unpack_from("<I", raw, off)
        off += 4
        feats = np.frombuffer(raw, dtype="<f8", count=n_frames * feat_dim, offset=off)
        off += 8 * n_frames * feat_dim
        (n_tok,) = struct.unpack_from("<I", raw, off)
        off += 4
        tokens = np.frombuffer(raw, dtype="<u4", count=n_tok, offset=off)
        off += 4 * n_tok
        utts.append(
            Utterance(
                f"utt-{i:06d}",
                feats.reshape(n_frames, feat_dim).astype(np.float64),
                [int(t) for t in tokens],
            )
        )
    if off != len(raw):
        raise ContractError(f"{path} has {len(raw) - off} trailing bytes")
    return utts, header
