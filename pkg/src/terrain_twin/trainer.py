"""Training loop, Adam/SGD, held-out validation and checkpoint files."""
from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import evalkit, nnet
from .labeler import N_CLASSES
from .netpbm import atomic_write_bytes

log = logging.getLogger(__name__)

ELEVATION_SCALE = 6000.0


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-4
    val_every: int = 10
    val_fraction: float = 0.2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class ColorStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, images) -> "ColorStats":
        px = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images])
        return cls(px.mean(axis=0), px.std(axis=0))

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.std <= 0))


# ---------------------------------------------------------------------------
# data

def split_dataset(ids, val_fraction: float, seed: int):
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 patches to split")
    n_val = int(math.floor(len(ids) * val_fraction + 0.5))
    if n_val < 1 or n_val >= len(ids):
        raise ValueError(f"val_fraction {val_fraction} leaves an empty side for {len(ids)} ids")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def normalize_rgb(rgb, stats: ColorStats) -> np.ndarray:
    std = np.where(stats.std > 0, stats.std, 1.0)
    x = (np.asarray(rgb, dtype=np.float64) - stats.mean) / std
    return x.astype(np.float32)


def patches_to_arrays(patches, stats: ColorStats, in_channels: int = 3):
    """Stack patches into network input ``N x C x H x W`` and labels ``N x H x W``."""
    xs = []
    for p in patches:
        chans = normalize_rgb(p.terrain, stats).transpose(2, 0, 1)
        if in_channels == 4:
            hgt = (np.asarray(p.height, dtype=np.float64) / ELEVATION_SCALE).astype(np.float32)
            chans = np.concatenate([chans, hgt[None]], axis=0)
        xs.append(chans)
    x = np.ascontiguousarray(np.stack(xs), dtype=np.float32)
    y = np.stack([np.asarray(p.mask, dtype=np.int64) for p in patches])
    return x, y


# ---------------------------------------------------------------------------
# optimizers

def adam_step(params, grads, m, v, t: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam, updating ``params``, ``m`` and ``v`` in place."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape or m[k].shape != g.shape or v[k].shape != g.shape:
            raise nnet.ShapeError(f"shape mismatch for {k}")
        m[k] *= beta1
        m[k] += (1.0 - beta1) * g
        v[k] *= beta2
        v[k] += (1.0 - beta2) * (g * g)
        params[k] -= lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)
    return params, m, v


def sgd_step(params, grads, lr: float):
    for k in params:
        params[k] -= lr * grads[k]
    return params


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MRSU"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: nnet.UNetModel
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    seed: int = 0
    optimizer: str = "adam"
    color_stats: ColorStats | None = None
    best_val_loss: float = math.inf

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.model.copy(), {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step, self.epoch,
                          self.seed, self.optimizer, self.color_stats, self.best_val_loss)


def new_checkpoint(model: nnet.UNetModel, seed: int = 0, optimizer: str = "adam",
                   color_stats: ColorStats | None = None) -> Checkpoint:
    zeros = {k: np.zeros_like(a, dtype=np.float32) for k, a in model.params.items()}
    return Checkpoint(model.astype(np.float32), zeros,
                      {k: a.copy() for k, a in zeros.items()}, 0, 0, seed, optimizer,
                      color_stats)


def _floats(values) -> str:
    return " ".join(repr(float(x)) for x in values)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    cfg = ck.model.config
    stats = ck.color_stats or ColorStats(np.zeros(3), np.ones(3))
    header = {
        "in_channels": cfg.in_channels,
        "n_classes": cfg.n_classes,
        "depth": cfg.depth,
        "base_filters": cfg.base_filters,
        "dropout_p": repr(float(cfg.dropout_p)),
        "epoch": ck.epoch,
        "step": ck.step,
        "seed": ck.seed,
        "optimizer": ck.optimizer,
        "best_val_loss": repr(float(ck.best_val_loss)),
        "color_mean": _floats(stats.mean),
        "color_std": _floats(stats.std),
        "has_color_stats": int(ck.color_stats is not None),
        "n_params": len(ck.model.params),
    }
    text = "".join(f"{k} = {v}\n" for k, v in header.items()).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    names = ck.model.names()
    for group in (ck.model.params, ck.m, ck.v):
        for name in names:
            chunks.append(np.ascontiguousarray(group[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, shorter than the magic")
    if data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointTruncatedError("file ends inside the fixed header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointTruncatedError("file ends inside the text header")
    header = {}
    for line in data[12:12 + hlen].decode("utf-8").splitlines():
        k, _, val = line.partition("=")
        header[k.strip()] = val.strip()
    try:
        cfg = nnet.UNetConfig(int(header["in_channels"]), int(header["n_classes"]),
                              int(header["depth"]), int(header["base_filters"]),
                              float(header["dropout_p"]))
    except KeyError as exc:
        raise CheckpointError(f"header is missing {exc}") from None
    layout = nnet.param_layout(cfg)
    pos = 12 + hlen
    need = sum(int(np.prod(shape)) for _, shape, _ in layout) * 4 * 3
    if len(data) - pos < need:
        raise CheckpointTruncatedError(
            f"array payload truncated: expected {need} bytes, got {len(data) - pos}")
    if len(data) - pos > need:
        raise CheckpointError(f"{len(data) - pos - need} trailing bytes after arrays")
    groups = []
    for _ in range(3):
        group = {}
        for name, shape, _ in layout:
            count = int(np.prod(shape))
            group[name] = np.frombuffer(data, "<f4", count, pos).astype(np.float32).reshape(shape)
            pos += count * 4
        groups.append(group)
    stats = None
    if int(header.get("has_color_stats", "0")):
        stats = ColorStats(np.array([float(x) for x in header["color_mean"].split()]),
                           np.array([float(x) for x in header["color_std"].split()]))
    return Checkpoint(nnet.UNetModel(cfg, groups[0]), groups[1], groups[2],
                      int(header["step"]), int(header["epoch"]), int(header["seed"]),
                      header.get("optimizer", "adam"), stats, float(header["best_val_loss"]))


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# training

@dataclass
class LogRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    mean_jaccard: float
    jaccard: np.ndarray = field(repr=False, default=None)


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    log: list[LogRecord]


def _epoch_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def validate_model(model, x, y, batch_size):
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    total = 0.0
    for i in range(0, len(x), batch_size):
        logits = nnet.unet_forward(model, x[i:i + batch_size], training=False)
        loss, _ = nnet.softmax_ce(logits, y[i:i + batch_size])
        total += loss * y[i:i + batch_size].size
        cm += evalkit.confusion(logits.argmax(axis=1), y[i:i + batch_size])
    return total / y.size, cm


def train(patches, unet_cfg: nnet.UNetConfig, cfg: TrainConfig, resume: Checkpoint | None = None,
          train_ids=None, val_ids=None, on_epoch=None) -> TrainResult:
    """Minibatch training with validation every ``cfg.val_every`` epochs.

    Epoch shuffles and dropout masks come from streams keyed on
    ``(seed, epoch, step)``, so resuming from any epoch-boundary checkpoint
    continues the exact trajectory of an uninterrupted run.
    """
    cfg.validate()
    unet_cfg.validate()
    if not patches:
        raise ValueError("training needs a non-empty dataset")
    if train_ids is None:
        train_ids, val_ids = split_dataset(range(len(patches)), cfg.val_fraction, cfg.seed)
    train_p = [patches[i] for i in train_ids]
    val_p = [patches[i] for i in (val_ids or [])]

    if resume is None:
        stats = ColorStats.of([p.terrain for p in train_p])
        model = nnet.init_params(unet_cfg, cfg.seed)
        state = new_checkpoint(model, cfg.seed, cfg.optimizer, stats)
    else:
        state = resume.copy()
        stats = state.color_stats
        if stats is None:
            raise ValueError("checkpoint has no color statistics")
    x_tr, y_tr = patches_to_arrays(train_p, stats, unet_cfg.in_channels)
    x_va, y_va = patches_to_arrays(val_p, stats, unet_cfg.in_channels) if val_p else (None, None)

    model = state.model
    params = model.params
    best = None
    history: list[LogRecord] = []
    rounds_without_gain = 0
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        order = _epoch_rng(cfg.seed, 1, epoch).permutation(len(x_tr))
        cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            drop_rng = _epoch_rng(cfg.seed, 2, epoch, b)
            loss, grads, logits = nnet.unet_loss_and_grads(model, x_tr[idx], y_tr[idx],
                                                          training=True, rng=drop_rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {b}")
            loss_sum += loss * y_tr[idx].size
            cm += evalkit.confusion(logits.argmax(axis=1), y_tr[idx])
            state.step += 1
            if cfg.optimizer == "adam":
                adam_step(params, grads, state.m, state.v, state.step, cfg.learning_rate,
                          cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_step(params, grads, cfg.learning_rate)
        state.epoch = epoch
        rec = LogRecord(epoch, "train", loss_sum / y_tr.size, evalkit.pixel_accuracy(cm),
                        evalkit.mean_jaccard(cm), evalkit.jaccard_from_confusion(cm))
        history.append(rec)
        log.info("epoch %d train loss %.5f acc %.4f", epoch, rec.loss, rec.accuracy)
        stop = False
        if epoch % cfg.val_every == 0 and x_va is not None:
            vloss, vcm = validate_model(model, x_va, y_va, cfg.batch_size)
            vrec = LogRecord(epoch, "val", vloss, evalkit.pixel_accuracy(vcm),
                             evalkit.mean_jaccard(vcm), evalkit.jaccard_from_confusion(vcm))
            history.append(vrec)
            log.info("epoch %d val loss %.5f acc %.4f mIoU %.4f", epoch, vloss,
                     vrec.accuracy, vrec.mean_jaccard)
            if vloss < state.best_val_loss:
                state.best_val_loss = vloss
                best = state.copy()
                rounds_without_gain = 0
            else:
                rounds_without_gain += 1
                if cfg.early_stop_patience is not None and \
                        rounds_without_gain >= cfg.early_stop_patience:
                    stop = True
        if on_epoch is not None:
            on_epoch(state)
        if stop:
            log.info("early stop at epoch %d", epoch)
            break
    return TrainResult(state, best, history)


LOG_HEADER = "epoch\tsplit\tloss\taccuracy\tmean_jaccard\n"


def format_log(records) -> str:
    rows = [LOG_HEADER]
    for r in records:
        rows.append(f"{r.epoch}\t{r.split}\t{r.loss:.8g}\t{r.accuracy:.8g}\t{r.mean_jaccard:.8g}\n")
    return "".join(rows)


def write_log(path, records) -> None:
    atomic_write_bytes(path, format_log(records).encode())


def read_log(path) -> list[LogRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            e, split, loss, acc, mj = line.rstrip("\n").split("\t")
            out.append(LogRecord(int(e), split, float(loss), float(acc), float(mj)))
    return out
