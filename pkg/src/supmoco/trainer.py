"""Contrastive training loop, optimizer, schedule and checkpoints.

One step of the queue-based variants (SUPMOCO, MOCO):

1. build a batch from the train split;
2. embed query views with the query encoder (tracked on a tape) and all key
   views with the key encoder (untracked);
3. compute the loss against a snapshot of the queue and backpropagate;
4. SGD step on the query encoder, then momentum update of the key encoder;
5. enqueue the key embedding of each query's own augmented view.

The in-batch variants (SIMCLR, SUPCON) embed both views with the query
encoder and never touch the queue. The key encoder still follows the query
encoder by momentum so the pair stays well defined.

Randomness: parameters are drawn from substream ``(seed, 0)`` and step ``t``
draws its batch from substream ``(seed, 1, t)``. The whole trajectory is a
function of ``(seed, config, dataset)`` and resuming needs no generator
state beyond the step counter.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    IMPURE,
    AugmentationSpec,
    BatchPlan,
    ContrastiveBatch,
    Dataset,
    TrainIndex,
    build_contrastive_batch,
    vector_augmenter,
)
from .encoder import EncoderConfig, EncoderPair, embed, init_pair, init_params, momentum_update
from .losses import simclr_loss, supcon_loss, supmoco_loss, two_view_pairs
from .numcore import Tape, backward, seeded_rng
from .queue import UNLABELED, FeatureQueue, QueueSnapshot

SUPMOCO = "supmoco"
MOCO = "moco"
SUPCON = "supcon"
SIMCLR = "simclr"
LOSS_VARIANTS = (SUPMOCO, MOCO, SUPCON, SIMCLR)

STREAM_INIT = 0
STREAM_TRAIN = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 10
    batch_size: int = 32
    positives: int = 3
    temperature: float = 0.1
    queue_size: int = 1024
    momentum: float = 0.99
    base_lr: float = 0.02
    peak_lr: float = 0.2
    warmup_epochs: int = 3
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    mixing: str = IMPURE
    loss: str = SUPMOCO
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}, got {self.loss!r}")
        if self.optimizer != "sgd":
            raise ValueError("only the 'sgd' optimizer is implemented")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if min(self.base_lr, self.peak_lr, self.temperature) <= 0 or self.steps_per_epoch <= 0:
            raise ValueError("rates, temperature and steps_per_epoch must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, seed: int):
        super().__init__(
            f"non-finite loss at step {step} (lr={lr!r}); batch stream seed={seed}, substream=({STREAM_TRAIN}, {step})"
        )
        self.step, self.lr, self.seed = step, lr, seed


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from ``base_lr`` to ``peak_lr``, then cosine decay to 0."""
    w, total = config.warmup_steps, config.total_steps
    if step < w:
        return config.base_lr + (config.peak_lr - config.base_lr) * step / w
    span = max(1, total - w)
    progress = min(1.0, (step - w) / span)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, buffers, lr: float, sgd_momentum: float, weight_decay: float) -> None:
    """In-place ``buf = mu*buf + (g + wd*p); p -= lr*buf`` (decay on every tensor)."""
    for p, g, buf in zip(params, grads, buffers, strict=True):
        buf *= sgd_momentum
        buf += g + weight_decay * p.values
        p.values = p.values - lr * buf


@dataclass
class HistoryRow:
    step: int
    loss: float
    lr: float
    queue_fill: int


@dataclass
class TrainResult:
    pair: EncoderPair
    history: list[HistoryRow] = field(default_factory=list)


class Trainer:
    def __init__(
        self,
        dataset: Dataset,
        config: TrainConfig,
        encoder_config: EncoderConfig | None = None,
        augmentation: AugmentationSpec | None = None,
        augmenter=None,
    ):
        self.dataset = dataset
        self.config = config
        self.encoder_config = encoder_config or EncoderConfig(input_dim=dataset.input_dim)
        if self.encoder_config.input_dim != dataset.input_dim:
            raise ValueError("encoder input_dim does not match the dataset")
        self.augmentation = augmentation or AugmentationSpec()
        self.augmenter = augmenter or vector_augmenter(self.augmentation)
        self.pair = init_pair(self.encoder_config, seeded_rng(config.seed, STREAM_INIT), config.momentum)
        self.buffers = [np.zeros_like(t.values) for t in self.pair.query.tensors()]
        self.queue = FeatureQueue(config.queue_size, self.encoder_config.proj_out)
        self.step = 0
        self.history: list[HistoryRow] = []
        self._index = TrainIndex(dataset)
        self.plan = self._plan()

    def _plan(self) -> BatchPlan:
        c = self.config
        if c.loss in (MOCO, SIMCLR):
            return BatchPlan(c.batch_size, 1, c.mixing)
        return BatchPlan(c.batch_size, c.positives, c.mixing, grouped=c.loss == SUPCON)

    # -- one step -----------------------------------------------------------

    def _queue_loss(self, batch: ContrastiveBatch):
        cfg = self.config
        labels = batch.labels if cfg.loss == SUPMOCO else np.full_like(batch.labels, UNLABELED)
        q = embed(self.pair.query, batch.query_views, include_head=True, track_grad=True)
        k = embed(self.pair.key, batch.key_views, include_head=True, track_grad=False)
        loss = supmoco_loss(q, labels, k.values, self.queue.snapshot(), cfg.temperature, key_owner=batch.key_owner)
        return loss, (k.values[batch.self_key_index], labels)

    def _in_batch_loss(self, batch: ContrastiveBatch):
        cfg = self.config
        n = batch.labels.shape[0]
        views = np.concatenate([batch.query_views, batch.key_views[batch.self_key_index]], axis=0)
        e = embed(self.pair.query, views, include_head=True, track_grad=True)
        if cfg.loss == SIMCLR:
            return simclr_loss(e, two_view_pairs(n), cfg.temperature), None
        # unlabeled anchors only pair with their own other view
        own = np.where(batch.labels == UNLABELED, -2 - np.arange(n), batch.labels)
        return supcon_loss(e, np.concatenate([own, own]), cfg.temperature), None

    def train_step(self) -> HistoryRow:
        cfg = self.config
        step = self.step
        rng = seeded_rng(cfg.seed, STREAM_TRAIN, step)
        lr = lr_schedule(step, cfg)
        batch = build_contrastive_batch(self.dataset, self.plan, rng, self.augmenter, self._index)
        params = self.pair.query.tensors()
        for p in params:
            p.grad = None
        with Tape() as tape:
            if cfg.loss in (SUPMOCO, MOCO):
                loss, pending = self._queue_loss(batch)
            else:
                loss, pending = self._in_batch_loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, lr, cfg.seed)
        backward(tape, loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
        sgd_step(params, grads, self.buffers, lr, cfg.sgd_momentum, cfg.weight_decay)
        momentum_update(self.pair)
        if pending is not None:
            self.queue.enqueue(*pending)
        self.step += 1
        row = HistoryRow(step, value, lr, len(self.queue))
        self.history.append(row)
        return row

    def run(self, steps: int | None = None) -> TrainResult:
        """Advance ``steps`` steps (default: until ``config.total_steps``)."""
        target = self.config.total_steps if steps is None else self.step + steps
        while self.step < target:
            self.train_step()
        return TrainResult(self.pair, self.history)

    # -- checkpoints --------------------------------------------------------

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            encoder_config=self.encoder_config,
            augmentation=self.augmentation,
            step=self.step,
            query={k: t.values.copy() for k, t in self.pair.query.named()},
            key={k: t.values.copy() for k, t in self.pair.key.named()},
            buffers={k: b.copy() for (k, _), b in zip(self.pair.query.named(), self.buffers)},
            queue=self.queue.snapshot(),
            queue_next_seq=self.queue.next_seq,
        )

    @classmethod
    def from_checkpoint(cls, dataset: Dataset, ckpt: "Checkpoint", augmenter=None) -> "Trainer":
        tr = cls(dataset, ckpt.config, ckpt.encoder_config, ckpt.augmentation, augmenter)
        for name, t in tr.pair.query.named():
            t.values = ckpt.query[name].copy()
        for name, t in tr.pair.key.named():
            t.values = ckpt.key[name].copy()
        tr.buffers = [ckpt.buffers[name].copy() for name, _ in tr.pair.query.named()]
        tr.queue.restore(ckpt.queue, ckpt.queue_next_seq)
        tr.step = ckpt.step
        return tr


def train(
    dataset: Dataset,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    augmentation: AugmentationSpec | None = None,
) -> TrainResult:
    return Trainer(dataset, config, encoder_config, augmentation).run()


def write_history(history, path) -> None:
    lines = ["step,loss,lr,queue_fill"]
    lines += [f"{r.step},{r.loss!r},{r.lr!r},{r.queue_fill}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Binary checkpoint
# ---------------------------------------------------------------------------
#
#   magic        8 bytes  b"SUPMOCO\x00"
#   version      u32
#   config       u32 length + UTF-8 JSON {"train", "encoder", "augmentation"}
#   step         u64
#   nblocks      u32
#   block        u16 name length, name, u8 dtype (0=f64, 1=i64), u8 ndim,
#                ndim x u64 dims, raw little-endian data
#   crc32        u32 over every preceding byte
#
# Blocks: "query/<param>", "key/<param>", "opt/<param>" (SGD momentum
# buffers), "queue/embeddings", "queue/labels", "queue/seq", "queue/next_seq".
# All integers little-endian.

MAGIC = b"SUPMOCO\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder_config: EncoderConfig
    augmentation: AugmentationSpec
    step: int
    query: dict[str, np.ndarray]
    key: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    queue: QueueSnapshot
    queue_next_seq: int

    def query_params(self):
        params = init_params(self.encoder_config, np.random.default_rng(0), requires_grad=False)
        for name, t in params.named():
            t.values = self.query[name].copy()
        return params


def _config_json(ckpt: Checkpoint) -> bytes:
    doc = {
        "train": asdict(ckpt.config),
        "encoder": asdict(ckpt.encoder_config),
        "augmentation": asdict(ckpt.augmentation),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape)
    return head + data.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks = []
    for prefix, group in (("query", ckpt.query), ("key", ckpt.key), ("opt", ckpt.buffers)):
        blocks += [_block(f"{prefix}/{k}", v) for k, v in group.items()]
    q = ckpt.queue
    blocks += [
        _block("queue/embeddings", q.embeddings),
        _block("queue/labels", q.labels),
        _block("queue/seq", q.insert_seq),
        _block("queue/next_seq", np.array([ckpt.queue_next_seq], dtype=np.int64)),
    ]
    cfg = _config_json(ckpt)
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<I", len(cfg))
        + cfg
        + struct.pack("<Q", ckpt.step)
        + struct.pack("<I", len(blocks))
        + b"".join(blocks)
    )
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _dataclass_from(cls, doc: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise CheckpointError(f"unknown {cls.__name__} fields in checkpoint: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return cls(**kwargs)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if len(buf) < 4 or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        # distinguish truncation from corruption where possible
        raise CheckpointError(f"{path}: checkpoint truncated or corrupted (checksum mismatch)")
    (clen,) = r.unpack("<I")
    doc = json.loads(r.take(clen).decode("utf-8"))
    (step,) = r.unpack("<Q")
    (nblocks,) = r.unpack("<I")
    blocks = {}
    for _ in range(nblocks):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in block {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf) - 4:
        raise CheckpointError(f"{path}: trailing bytes after last block")

    def group(prefix):
        return {k[len(prefix) + 1 :]: v for k, v in blocks.items() if k.startswith(prefix + "/")}

    try:
        queue = QueueSnapshot(blocks["queue/embeddings"], blocks["queue/labels"], blocks["queue/seq"])
        next_seq = int(blocks["queue/next_seq"][0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing block {exc}") from None
    return Checkpoint(
        config=_dataclass_from(TrainConfig, doc["train"]),
        encoder_config=_dataclass_from(EncoderConfig, doc["encoder"]),
        augmentation=_dataclass_from(AugmentationSpec, doc["augmentation"]),
        step=int(step),
        query=group("query"),
        key=group("key"),
        buffers=group("opt"),
        queue=queue,
        queue_next_seq=next_seq,
    )
