"""Desk-scale supervised training: DFA1 datasets, AdamW, schedules and the loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, DataError, FormatError, NumericalError
from .network import (
    DefocusNetwork, DropPathSchedule, ModelConfig, drop_path_rate, forward, save_checkpoint, total_loss,
)

__all__ = [
    "TrainConfig", "RunMetrics", "TrainResult", "AdamWState", "TrainingError",
    "write_dataset", "load_dataset", "make_synthetic_dataset", "make_bar_blob_dataset",
    "adamw_step", "lr_at", "train", "evaluate", "METRICS_COLUMNS",
]

log = logging.getLogger(__name__)

MAGIC = b"DFA1"
_HEADER = struct.Struct("<4s5I")
METRICS_COLUMNS = ("step", "lr", "drop_path_rate", "loss", "cls_loss", "aux_loss")


class TrainingError(NumericalError):
    """Training produced a non-finite loss."""


# -- datasets ---------------------------------------------------------------------------


def write_dataset(path, images, labels, num_classes: int) -> None:
    """Write ``images`` (uint8 [N, C, H, W]) and ``labels`` in DFA1 layout."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.dtype != np.uint8:
        raise DataError(f"images must be uint8 [N, C, H, W], got {images.dtype} {images.shape}")
    n, c, h, w = images.shape
    if labels.shape != (n,):
        raise DataError(f"need one label per image, got {labels.shape} for {n} images")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, h, w, c, num_classes))
        fh.write(np.ascontiguousarray(images).tobytes())
        fh.write(labels.astype(np.uint8).tobytes())


def load_dataset(path):
    """Read a DFA1 file; returns ``(images in [0, 1], labels, metadata)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes at offset 0)")
    magic, n, h, w, c, k = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    pix = n * c * h * w
    expected = _HEADER.size + pix + n
    if len(raw) != expected:
        raise FormatError(f"{path}: file is {len(raw)} bytes, header implies {expected} "
                          f"(mismatch from byte offset {min(len(raw), expected)})")
    images = np.frombuffer(raw, dtype=np.uint8, count=pix, offset=_HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size + pix).astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        off = _HEADER.size + pix + int(bad[0])
        raise FormatError(f"{path}: label {labels[bad[0]]} >= num_classes {k} at byte offset {off}")
    meta = {"count": n, "height": h, "width": w, "channels": c, "num_classes": k}
    return images.astype(np.float64) / 255.0, labels, meta


def make_synthetic_dataset(n: int, seed: int = 0, image_size: int = 16, patch_size: int = 4,
                           noise: int = 40):
    """Blob-pair images whose class is the spatial arrangement of two identical blobs.

    Each image holds two bright square blobs centred in two patch cells.  Class
    0: horizontal neighbours, 1: vertical neighbours, 2: diagonal neighbours,
    3: at least two cells apart.  Both blobs look alike, so the label depends
    only on where they sit relative to each other.
    """
    rng = np.random.default_rng(seed)
    g = image_size // patch_size
    cells = [(r, c) for r in range(g) for c in range(g)]
    pairs = {0: [], 1: [], 2: [], 3: []}
    for i, (r1, c1) in enumerate(cells):
        for r2, c2 in cells[i + 1:]:
            dr, dc = abs(r1 - r2), abs(c1 - c2)
            if max(dr, dc) >= 2:
                pairs[3].append(((r1, c1), (r2, c2)))
            elif dr == 0:
                pairs[0].append(((r1, c1), (r2, c2)))
            elif dc == 0:
                pairs[1].append(((r1, c1), (r2, c2)))
            else:
                pairs[2].append(((r1, c1), (r2, c2)))
    labels = rng.integers(0, 4, size=n)
    images = rng.integers(0, noise + 1, size=(n, 1, image_size, image_size)).astype(np.uint8)
    side = max(patch_size // 2, 1)
    lo = (patch_size - side) // 2
    for i, y in enumerate(labels):
        options = pairs[int(y)]
        (r1, c1), (r2, c2) = options[rng.integers(len(options))]
        for r, c in ((r1, c1), (r2, c2)):
            top, left = r * patch_size + lo, c * patch_size + lo
            images[i, 0, top:top + side, left:left + side] = rng.integers(180, 256)
    return images, labels.astype(np.int64)


def make_bar_blob_dataset(n: int, seed: int = 0, image_size: int = 16, noise: int = 30):
    """Shape images for fixtures: 0 horizontal bar, 1 vertical bar, 2 square blob, 3 diagonal bar."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    images = rng.integers(0, noise + 1, size=(n, 1, image_size, image_size)).astype(np.uint8)
    length = max(image_size // 2, 2)
    for i, y in enumerate(labels):
        r, c = rng.integers(0, image_size - length + 1, size=2)
        v = rng.integers(180, 256)
        if y == 0:
            images[i, 0, r + length // 2, c:c + length] = v
        elif y == 1:
            images[i, 0, r:r + length, c + length // 2] = v
        elif y == 2:
            side = max(length // 2, 2)
            images[i, 0, r:r + side, c:c + side] = v
        else:
            k = np.arange(length)
            images[i, 0, r + k, c + k] = v
    return images, labels.astype(np.int64)


# -- optimisation --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    total_steps: int = 1000
    warmup_steps: int | None = None
    seed: int = 0
    drop_path: DropPathSchedule | None = None
    dataset_path: str = ""
    clip_norm: float | None = None

    def __post_init__(self):
        if isinstance(self.drop_path, dict):
            self.drop_path = DropPathSchedule(**self.drop_path)
        if self.drop_path is None:
            self.drop_path = DropPathSchedule(0.1, 0.7, self.total_steps)
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.05 * self.total_steps))
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps <= total_steps")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ConfigurationError("step must be non-negative")
    peak, warm, total = config.peak_lr, config.warmup_steps, config.total_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    frac = (step - warm) / max(total - warm, 1)
    return 0.5 * peak * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, step: int, config: TrainConfig,
               lr: float | None = None) -> AdamWState:
    """One AdamW update of ``params`` (name -> Tensor) in place.

    ``step`` counts updates from 1 and drives bias correction.  Weight decay is
    decoupled: ``p -= lr * wd * p`` before the Adam direction is applied.
    """
    if step < 1:
        raise ContractError("adamw_step counts steps from 1")
    lr = config.peak_lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"optimizer state for {name} does not match parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data - lr * config.weight_decay * p.data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


# -- metrics --------------------------------------------------------------------------------


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)        # (step, lr, dpr, loss, cls_loss, aux_loss)
    evals: list = field(default_factory=list)       # (step, accuracy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for step, *vals in self.rows:
            w.writerow([step] + [f"{v:.9g}" for v in vals])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def losses(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])


@dataclass
class TrainResult:
    model: DefocusNetwork
    metrics: RunMetrics


def evaluate(model: DefocusNetwork, images, labels, batch_size: int = 250) -> float:
    """Top-1 accuracy of the ``<CLS>`` head in inference mode."""
    correct = 0
    with ad.no_grad():
        for i in range(0, len(labels), batch_size):
            out = forward(model, images[i:i + batch_size])
            correct += int((out.cls_logits.data.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / max(len(labels), 1)


def _offending_layer(out) -> str:
    for i, t in enumerate(out.layer_outputs):
        if not np.all(np.isfinite(t.data)):
            return f"block {i}"
    return "heads"


def train(model_config: ModelConfig, train_config: TrainConfig, data=None, eval_data=None,
          eval_every: int = 0, metrics_path=None, checkpoint_path=None,
          model: DefocusNetwork | None = None) -> TrainResult:
    """Train from scratch (or from ``model``) for ``train_config.total_steps`` steps.

    ``data`` is ``(images, labels)``; when omitted it is read from
    ``train_config.dataset_path``.  Given one seed, the initial weights, batch
    order and drop-path draws are all fixed, so reruns are bitwise identical.
    """
    if data is None:
        images, labels, _ = load_dataset(train_config.dataset_path)
    else:
        images, labels = data
    init_seq, run_seq = np.random.SeedSequence(train_config.seed).spawn(2)
    if model is None:
        model = DefocusNetwork.init(model_config, np.random.default_rng(init_seq))
    rng = np.random.default_rng(run_seq)
    params = model.trainable()
    names = list(params)
    state = AdamWState()
    metrics = RunMetrics()
    n = len(labels)
    bs = min(train_config.batch_size, n)
    order, cursor = rng.permutation(n), 0
    aux_w = model_config.aux_loss_weight
    for step in range(train_config.total_steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        lr = lr_at(step, train_config)
        dpr = drop_path_rate(train_config.drop_path, step)
        try:
            out = forward(model, images[idx], training=True, rng=rng, drop_rate=dpr)
        except NumericalError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        loss, cls_loss, aux_loss = total_loss(out.cls_logits, out.aux_logits, labels[idx], aux_w,
                                              return_parts=True)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step} (first bad layer: {_offending_layer(out)})")
        grads = dict(zip(names, ad.grad(loss, [params[k] for k in names])))
        if train_config.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > train_config.clip_norm:
                grads = {k: g * (train_config.clip_norm / total) for k, g in grads.items()}
        adamw_step(params, grads, state, step + 1, train_config, lr=lr)
        metrics.rows.append((step, lr, dpr, loss.item(), cls_loss.item(), aux_loss.item()))
        if eval_data is not None and eval_every and (step + 1) % eval_every == 0:
            metrics.evals.append((step + 1, evaluate(model, *eval_data)))
            log.info("step %d accuracy %.4f", step + 1, metrics.evals[-1][1])
    if metrics_path is not None:
        metrics.write_csv(metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model, metrics)


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a JSON file with ``model`` and ``train`` sections."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc})") from None
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))
