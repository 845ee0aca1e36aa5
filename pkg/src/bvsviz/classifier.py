"""Training and evaluation of the slice classifier.

Crops are sampled with wrap-around along the angle axis, the loss is
cross-entropy weighted by normalized inverse class frequency, and parameters
are updated with Adam at a constant learning rate.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import config as cfg
from .labels import ClassLabel
from .model import N_CLASSES, Model
from .phantom import PolarImage, PullbackDataset
from .tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 40
    epochs: int = 400
    crop_size: int = 224
    seed: int = 0
    precision: str = "float32"
    channels_base: int = 8
    input_mode: str = "patch"  # "patch" or "full" (whole image, block-downsampled)
    downsample: int = 4  # only used by input_mode == "full"
    eval_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.input_mode not in ("patch", "full"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


CLINICAL_TRAIN = TrainConfig()
DESK_TRAIN = TrainConfig(learning_rate=2e-3, batch_size=40, epochs=100, crop_size=64, eval_every=10)


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Normalized inverse class frequency: w_c = (1/n_c) / sum_j (1/n_j)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (N_CLASSES,):
        raise ValueError(f"expected {N_CLASSES} class counts, got {counts.shape}")
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one training example, got counts {counts.tolist()}")
    inv = 1.0 / counts
    return inv / inv.sum()


def weighted_cross_entropy(logits: Tensor, labels: Sequence[int], weights: Sequence[float]) -> Tensor:
    """Batch mean of w[label] * -log softmax(logits)[label]."""
    z = logits.data
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"logits must be [N, C] with N >= 1, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits passed to weighted_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=z.dtype)[labels]
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - logsumexp
    loss = np.asarray((w * -logp).mean(), dtype=z.dtype)

    def backward(g, needs):
        p = np.exp(shifted - logsumexp[:, None])
        p[np.arange(n), labels] -= 1
        return ((g * w / n)[:, None] * p,)

    return Tensor.from_op(loss, (logits,), backward, "weighted_cross_entropy")


def angular_shift(image: PolarImage, s: int) -> PolarImage:
    """Circularly shift along the angle axis: output row r is input row (r - s) mod n_angles."""
    h = image.pixels.shape[0]
    s = s % h
    if s == 0:
        return image
    roll = lambda a: None if a is None else np.roll(a, s, axis=0)
    return image.replace(pixels=roll(image.pixels), strut_mask=roll(image.strut_mask),
                         lumen_boundary=roll(image.lumen_boundary))


def crop_position(shape: tuple[int, int], crop_size: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = shape
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than image {shape}")
    return int(rng.integers(0, h)), int(rng.integers(0, w - crop_size + 1))


def crop_at(pixels: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    rows = np.arange(row, row + size) % pixels.shape[0]
    return pixels[rows, col:col + size]


def sample_training_crop(image: PolarImage, crop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop of shape (1, 1, crop_size, crop_size); rows wrap around."""
    if crop_size == image.pixels.shape[0] and crop_size == image.pixels.shape[1]:
        # the identity crop: no angular offset either
        return image.pixels[None, None].astype(get_dtype())
    row, col = crop_position(image.pixels.shape, crop_size, rng)
    return crop_at(image.pixels, row, col, crop_size)[None, None].astype(get_dtype())


def downsample_image(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling used by the whole-image baseline."""
    h, w = pixels.shape
    hh, ww = h // factor, w // factor
    return pixels[:hh * factor, :ww * factor].reshape(hh, factor, ww, factor).mean(axis=(1, 3))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    epoch: int = 0
    accuracy: float = float("nan")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def _slices(pullbacks: Sequence[PullbackDataset]) -> list[PolarImage]:
    return [s for pb in pullbacks for s in pb.slices]


def _batch_input(images: Sequence[PolarImage], config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if config.input_mode == "full":
        arrs = []
        for im in images:
            shift = int(rng.integers(0, im.pixels.shape[0]))
            arrs.append(downsample_image(np.roll(im.pixels, shift, axis=0), config.downsample))
        return np.stack(arrs)[:, None].astype(get_dtype())
    return np.concatenate([sample_training_crop(im, config.crop_size, rng) for im in images])


def train(model: Model, train_set: Sequence[PullbackDataset], config: TrainConfig,
          test_set: Optional[Sequence[PullbackDataset]] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train in place and return the best held-out-accuracy checkpoint plus per-epoch metrics.

    One epoch draws exactly one random crop from every training slice. The
    held-out set is evaluated every ``config.eval_every`` epochs and at the
    last epoch; without a held-out set the final model is returned.
    """
    images = _slices(train_set)
    if not images:
        raise ValueError("empty training set")
    counts = np.bincount([int(s.label) for s in images], minlength=N_CLASSES)
    weights = class_weights(counts)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    history: list[dict] = []
    best: Optional[Checkpoint] = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        losses, sizes = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [images[i] for i in order[start:start + config.batch_size]]
            x = Tensor(_batch_input(batch, config, rng))
            model.zero_grad()
            loss = weighted_cross_entropy(model(x), [int(s.label) for s in batch], weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            sizes.append(len(batch))
        record = {"epoch": epoch, "loss": float(np.average(losses, weights=sizes))}
        last = epoch == config.epochs
        if test_set and (epoch % config.eval_every == 0 or last):
            metrics = evaluate(model, test_set, config)
            record["accuracy"] = metrics["accuracy"]
            if best is None or metrics["accuracy"] > best.accuracy:
                best = Checkpoint(copy_model(model), dataclasses.replace(config), epoch, metrics["accuracy"])
        history.append(record)
        if log is not None:
            log(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()))
    if best is None:
        best = Checkpoint(copy_model(model), dataclasses.replace(config), config.epochs)
    return TrainResult(best, history)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def copy_model(model: Model) -> Model:
    clone = Model(model.crop_size, model.channels_base)
    clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    return clone


# prediction and metrics

def predict_probabilities(model: Model, image: PolarImage, config: TrainConfig) -> np.ndarray:
    """Image-level class probabilities: patch-averaged, or one pass for whole-image models."""
    if config.input_mode == "full":
        x = downsample_image(image.pixels, config.downsample)[None, None].astype(get_dtype())
        return softmax(model.predict_logits(x))[0]
    from .saliency import predict_image

    return predict_image(model, image.pixels, config.crop_size)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int]) -> np.ndarray:
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for y, p in zip(labels, predictions):
        cm[int(y), int(p)] += 1
    return cm


def auc_mann_whitney(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based ROC AUC with average ranks for ties."""
    from scipy.stats import rankdata

    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(labels: Sequence[int], probabilities: np.ndarray) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    preds = probabilities.argmax(axis=1)
    cm = confusion_matrix(labels, preds)
    aucs = []
    for c in range(N_CLASSES):
        auc = auc_mann_whitney(probabilities[:, c], labels == c)
        if np.isnan(auc):
            warnings.warn(f"class {ClassLabel(c).name} absent (or the only class) in evaluation set; "
                          f"omitted from macro AUC")
        else:
            aucs.append(auc)
    f1s = []
    for c in range(N_CLASSES):
        tp = cm[c, c]
        denom = cm[c, :].sum() + cm[:, c].sum()
        f1s.append(2 * tp / denom if denom else 0.0)
    present = [c for c in range(N_CLASSES) if cm[c, :].sum() > 0 or cm[:, c].sum() > 0]
    return {
        "accuracy": float(np.trace(cm) / max(cm.sum(), 1)),
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
        "f1": float(np.mean([f1s[c] for c in present])) if present else float("nan"),
        "confusion": cm,
    }


def evaluate(model: Model, dataset: Sequence[PullbackDataset] | Sequence[PolarImage], config: TrainConfig) -> dict:
    """Accuracy, macro one-vs-rest AUC, macro F1 and the confusion matrix."""
    images = dataset if dataset and isinstance(dataset[0], PolarImage) else _slices(dataset)
    if not images:
        raise ValueError("empty evaluation set")
    probs = np.stack([predict_probabilities(model, im, config) for im in images])
    return classification_metrics([int(im.label) for im in images], probs)


# checkpoints

def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Text manifest followed by little-endian float32 parameter blobs."""
    model = ckpt.model
    header = {"format_version": CHECKPOINT_VERSION,
              "arch.crop_size": model.crop_size,
              "arch.channels_base": model.channels_base}
    for i, line in enumerate(model.descriptor()):
        header[f"arch.layer.{i}"] = line
    for label in ClassLabel:
        header[f"class.{int(label)}"] = label.name
    for k, v in cfg.to_dict(ckpt.config).items():
        header[f"config.{k}"] = v
    header["epoch"] = ckpt.epoch
    header["accuracy"] = ckpt.accuracy
    blobs = []
    offset = 0
    for name, shape in model.param_shapes().items():
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        header[f"blob.{name}"] = f"{offset} {'x'.join(map(str, shape))}"
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(cfg.dump_kv(header).encode())
        fh.write(b"end_header\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0:
        raise ValueError(f"{path}: not a checkpoint (missing end_header)")
    header = cfg.parse_kv(raw[:pos].decode())
    body = raw[pos + len(marker):]
    if int(header.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    for label in ClassLabel:
        if header.get(f"class.{int(label)}") != label.name:
            raise ValueError(f"{path}: class encoding mismatch for {label.name}")
    config = cfg.from_dict(TrainConfig, {k[7:]: v for k, v in header.items() if k.startswith("config.")})
    model = Model(int(header["arch.crop_size"]), int(header["arch.channels_base"]))
    dtype = get_dtype()
    for name, shape in model.param_shapes().items():
        offset, dims = header[f"blob.{name}"].split()
        stored = tuple(int(d) for d in dims.split("x"))
        if stored != shape:
            raise ValueError(f"{path}: blob {name} has shape {stored}, architecture expects {shape}")
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=int(offset)).reshape(shape)
        model.params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return Checkpoint(model, config, int(header.get("epoch", 0)), float(header.get("accuracy", "nan")))
