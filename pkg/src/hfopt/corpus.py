"""Utterance corpora: synthetic generation, binary persistence, sharded reduce.

An utterance is a contiguous run of labeled frames; it is the atomic unit of
sampling and of parallel work. The reduction engine folds per-utterance
results in one fixed global order (sorted by utterance id), so results are
bitwise identical for any worker count - workers only decide which utterances
are computed concurrently, never how partial sums are associated.
"""

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, CorpusFormatError, NumericError

MAGIC = b"HFUC"
VERSION = 1


@dataclass
class Utterance:
    id: int
    frames: np.ndarray  # L x feature_dim, float32
    labels: np.ndarray  # L class indices

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ConfigurationError("utterance needs at least one frame")
        if self.labels.shape != (self.frames.shape[0],):
            raise ConfigurationError("one label per frame required")

    @property
    def length(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        return (
            self.id == other.id
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class GenParams:
    """Knobs for the synthetic generator; a corpus is a pure function of these.

    Labels follow a Markov chain with stay probability ``p_stay`` (otherwise
    uniform over all classes), so frames within an utterance are correlated
    and utterance-level statistics genuinely differ from frame-level ones.
    Frames are drawn from the label's Gaussian: mean from a seeded draw with
    spread ``mean_scale``, isotropic stddev ``noise_scale``.
    """

    n_classes: int = 10
    feature_dim: int = 20
    train_utterances: int = 2000
    heldout_utterances: int = 200
    min_length: int = 20
    max_length: int = 100
    p_stay: float = 0.9
    mean_scale: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_classes < 2 or self.n_classes > 0xFFFF:
            raise ConfigurationError("n_classes must be in [2, 65535]")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1")
        if self.train_utterances < 1 or self.heldout_utterances < 0:
            raise ConfigurationError("need >= 1 train utterance, >= 0 heldout")
        if not (1 <= self.min_length <= self.max_length):
            raise ConfigurationError("need 1 <= min_length <= max_length")
        if not (0.0 <= self.p_stay <= 1.0):
            raise ConfigurationError("p_stay must be in [0, 1]")
        if self.noise_scale <= 0:
            raise ConfigurationError("noise_scale must be positive")


@dataclass
class UtteranceCorpus:
    train: list
    heldout: list
    n_classes: int
    feature_dim: int
    gen_params: GenParams | None = None

    def __eq__(self, other):
        return (
            self.n_classes == other.n_classes
            and self.feature_dim == other.feature_dim
            and self.train == other.train
            and self.heldout == other.heldout
        )

    def by_id(self):
        return {u.id: u for u in self.train + self.heldout}

    def train_ids(self):
        return [u.id for u in self.train]

    def heldout_ids(self):
        return [u.id for u in self.heldout]


def _gen_labels(rng, length, n_classes, p_stay):
    labels = np.empty(length, dtype=np.int64)
    labels[0] = rng.integers(n_classes)
    if length > 1:
        stay = rng.random(length - 1) < p_stay
        jump = rng.integers(0, n_classes, size=length - 1)
        for t in range(1, length):
            labels[t] = labels[t - 1] if stay[t - 1] else jump[t - 1]
    return labels


def generate(gen_params: GenParams) -> UtteranceCorpus:
    """Synthesize a corpus, fully determined by ``gen_params``."""
    gp = gen_params
    gp.validate()
    rng = np.random.default_rng(gp.seed)
    means = rng.normal(0.0, gp.mean_scale, size=(gp.n_classes, gp.feature_dim))

    def make(uid):
        length = int(rng.integers(gp.min_length, gp.max_length + 1))
        labels = _gen_labels(rng, length, gp.n_classes, gp.p_stay)
        frames = means[labels] + gp.noise_scale * rng.standard_normal(
            (length, gp.feature_dim)
        )
        return Utterance(uid, frames.astype(np.float32), labels)

    train = [make(uid) for uid in range(gp.train_utterances)]
    heldout = [
        make(uid)
        for uid in range(gp.train_utterances, gp.train_utterances + gp.heldout_utterances)
    ]
    return UtteranceCorpus(train, heldout, gp.n_classes, gp.feature_dim, gp)


# ---------------------------------------------------------------------------
# binary persistence
#
# little-endian layout:
#   "HFUC" | u32 version | u32 n_classes | u32 feature_dim
#   | u32 train_count | u32 heldout_count
#   then per utterance (train block, then heldout block):
#   u64 id | u32 L | L*feature_dim f32 frames | L u16 labels
# ---------------------------------------------------------------------------


def save(corpus: UtteranceCorpus, path):
    parts = [
        MAGIC,
        struct.pack(
            "<IIIII",
            VERSION,
            corpus.n_classes,
            corpus.feature_dim,
            len(corpus.train),
            len(corpus.heldout),
        ),
    ]
    for utt in corpus.train + corpus.heldout:
        parts.append(struct.pack("<QI", utt.id, utt.length))
        parts.append(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(utt.labels, dtype="<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise CorpusFormatError(f"truncated while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk


def load(path) -> UtteranceCorpus:
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise CorpusFormatError("bad magic, not a corpus file", 0)
    version, n_classes, feature_dim, n_train, n_heldout = struct.unpack(
        "<IIIII", cur.take(20, "header")
    )
    if version != VERSION:
        raise CorpusFormatError(f"unsupported version {version}", 4)

    def read_utt(what):
        uid, length = struct.unpack("<QI", cur.take(12, f"{what} utterance header"))
        frames = np.frombuffer(
            cur.take(length * feature_dim * 4, f"{what} frames"), dtype="<f4"
        ).reshape(length, feature_dim)
        labels = np.frombuffer(cur.take(length * 2, f"{what} labels"), dtype="<u2")
        if labels.size and labels.max() >= n_classes:
            raise CorpusFormatError("label out of range", cur.offset)
        return Utterance(uid, frames.copy(), labels.copy())

    train = [read_utt("train") for _ in range(n_train)]
    heldout = [read_utt("heldout") for _ in range(n_heldout)]
    if cur.offset != len(data):
        raise CorpusFormatError("trailing bytes after last utterance", cur.offset)
    return UtteranceCorpus(train, heldout, n_classes, feature_dim, None)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# deterministic sharded reduction
# ---------------------------------------------------------------------------


@dataclass
class ShardPlan:
    worker_count: int
    shards: list  # lists of utterance ids, contiguous over the sorted sample

    def validate(self, sample_ids):
        flat = [i for shard in self.shards for i in shard]
        assert sorted(flat) == sorted(sample_ids)


def plan_shards(sample_ids, worker_count) -> ShardPlan:
    """Contiguous split of the sorted sample into ``worker_count`` shards.

    Shard sizes differ by at most one utterance.
    """
    if worker_count < 1:
        raise ConfigurationError("worker_count must be >= 1")
    ordered = sorted(sample_ids)
    shards = [list(chunk) for chunk in np.array_split(np.array(ordered, dtype=np.int64), worker_count)]
    return ShardPlan(worker_count, shards)


_POOLS = {}


def _pool(workers):
    pool = _POOLS.get(workers)
    if pool is None:
        pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="hfopt-shard")
        _POOLS[workers] = pool
    return pool


def sharded_reduce(utterance_map, sample_ids, worker_count, utt_fn, zero):
    """Fold utt_fn over the sample in sorted-id order: zero + f(u0) + f(u1) ...

    Shards only distribute the per-utterance evaluations across threads; the
    fold itself always walks the same global order, so the result does not
    depend on ``worker_count`` at all (bitwise).
    """
    plan = plan_shards(sample_ids, worker_count)
    acc = zero
    if worker_count == 1:
        for shard in plan.shards:
            for uid in shard:
                acc = acc + utt_fn(utterance_map[uid])
        return acc

    def run_shard(shard):
        return [utt_fn(utterance_map[uid]) for uid in shard]

    futures = [_pool(worker_count).submit(run_shard, shard) for shard in plan.shards]
    for shard_index, fut in enumerate(futures):
        try:
            results = fut.result()
        except NumericError as err:
            err.context.setdefault("shard", shard_index)
            raise
        for r in results:
            acc = acc + r
    return acc


def total_frames(utterance_map, sample_ids) -> int:
    return sum(utterance_map[uid].length for uid in sample_ids)
