"""Binary pair classification: encoder + 2-class head, trained once or twice.

The two-stage procedure fine-tunes every parameter in both stages: first on a
large surrogate task for a fixed number of epochs, then on the small target
task, by default until dev accuracy stops improving. Optimization is plain
stochastic gradient descent with a fixed learning rate.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import LabeledPair
from .encoder import EncoderConfig, TinyTransformerEncoder, Vocab, _softmax

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad inputs, diverging loss)."""


@dataclass(frozen=True)
class TrainConfig:
    rng_seed: int
    max_tokens: int = 200
    learning_rate: float = 2e-5
    batch_size: int = 16
    epochs: int | None = None
    early_stop_patience: int | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 2:
            raise TrainingError("max_tokens must be >= 2")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if (self.epochs is None) == (self.early_stop_patience is None):
            raise TrainingError("set exactly one of epochs / early_stop_patience")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise TrainingError("early_stop_patience must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise TrainingError("epochs must be >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    dev_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0


class PairClassifier:
    """Encoder plus affine head mapping the pooled vector to 2 logits."""

    def __init__(self, encoder: TinyTransformerEncoder, rng_seed: int = 0, threshold: float = 0.5):
        rng = np.random.default_rng(rng_seed)
        self.encoder = encoder
        self.head_w = rng.normal(0.0, 0.02, (encoder.width, 2))
        self.head_b = np.zeros(2)
        self.threshold = threshold

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        return pooled @ self.head_w + self.head_b

    def predict_batch(self, pairs: Sequence[tuple[str, str]], max_tokens: int = 200) -> list[tuple[int, float]]:
        """(label, p_positive) per pair; deterministic on frozen parameters."""
        for i, (a, b) in enumerate(pairs):
            if not a.strip() or not b.strip():
                raise ValueError(f"pair {i}: empty text")
        if not pairs:
            return []
        ids, segs, mask = self.encoder.prepare_batch(pairs, max_tokens)
        pooled, _ = self.encoder.forward(ids, segs, mask)
        probs = _softmax(self.logits(pooled))[:, 1]
        return [(int(p >= self.threshold), float(p)) for p in probs]

    def predict(self, pair: tuple[str, str], max_tokens: int = 200) -> tuple[int, float]:
        return self.predict_batch([pair], max_tokens)[0]

    def copy(self) -> "PairClassifier":
        clone = object.__new__(PairClassifier)
        clone.encoder = self.encoder.copy()
        clone.head_w = self.head_w.copy()
        clone.head_b = self.head_b.copy()
        clone.threshold = self.threshold
        return clone

    def _state(self) -> dict[str, np.ndarray]:
        state = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        state["head_w"] = self.head_w
        state["head_b"] = self.head_b
        return state


def _loss_and_grads(model: PairClassifier, ids, segs, mask, labels: np.ndarray):
    """Mean cross-entropy over the batch plus gradients for every parameter."""
    pooled, cache = model.encoder.forward(ids, segs, mask)
    logits = model.logits(pooled)
    probs = _softmax(logits)
    n = len(labels)
    eps = 1e-12
    loss = -float(np.mean(np.log(probs[np.arange(n), labels] + eps)))

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dhead_w = pooled.T @ dlogits
    dhead_b = dlogits.sum(axis=0)
    dpooled = dlogits @ model.head_w.T
    enc_grads = model.encoder.backward(cache, dpooled)
    return loss, enc_grads, dhead_w, dhead_b


def _accuracy_on(model: PairClassifier, pairs: Sequence[LabeledPair], max_tokens: int) -> float:
    preds = model.predict_batch([(p.text_a, p.text_b) for p in pairs], max_tokens)
    correct = sum(1 for (label, _), pair in zip(preds, pairs) if label == pair.label)
    return correct / len(pairs)


def finetune(
    model: PairClassifier,
    train: Sequence[LabeledPair],
    dev: Sequence[LabeledPair] | None = None,
    cfg: TrainConfig | None = None,
) -> tuple[PairClassifier, TrainReport]:
    """Train a copy of the model by SGD on shuffled mini-batches.

    With cfg.epochs set, runs exactly that many epochs. With
    cfg.early_stop_patience set, stops once dev accuracy has failed to improve
    for that many consecutive epochs and restores the best-dev parameters.
    """
    if cfg is None:
        raise TrainingError("cfg is required")
    if not train:
        raise TrainingError("empty training set")
    if cfg.early_stop_patience is not None and not dev:
        raise TrainingError("early stopping requires a dev set")

    model = model.copy()
    report = TrainReport()
    if cfg.epochs == 0:
        return model, report

    rng = np.random.default_rng(cfg.rng_seed)
    ids, segs, mask = model.encoder.prepare_batch([(p.text_a, p.text_b) for p in train], cfg.max_tokens)
    labels = np.array([p.label for p in train], dtype=np.int64)

    best_state: dict[str, np.ndarray] | None = None
    best_dev = -1.0
    strikes = 0
    epoch = 0
    while True:
        epoch += 1
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, enc_grads, dhw, dhb = _loss_and_grads(model, ids[batch], segs[batch], mask[batch], labels[batch])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            epoch_loss += loss * len(batch)
            for name, grad in enc_grads.items():
                model.encoder.params[name] -= cfg.learning_rate * grad
            model.head_w -= cfg.learning_rate * dhw
            model.head_b -= cfg.learning_rate * dhb
        report.train_loss.append(epoch_loss / len(train))

        if dev:
            dev_acc = _accuracy_on(model, dev, cfg.max_tokens)
            report.dev_accuracy.append(dev_acc)

        if cfg.epochs is not None:
            if epoch >= cfg.epochs:
                break
        else:
            if report.dev_accuracy[-1] > best_dev:
                best_dev = report.dev_accuracy[-1]
                best_state = {k: v.copy() for k, v in model._state().items()}
                strikes = 0
            else:
                strikes += 1
                if strikes >= cfg.early_stop_patience:
                    break

    report.stopped_epoch = epoch
    if best_state is not None:
        for name, value in best_state.items():
            if name.startswith("encoder."):
                model.encoder.params[name[len("encoder.") :]] = value
        model.head_w = best_state["head_w"]
        model.head_b = best_state["head_b"]
    return model, report


def double_finetune(
    base: PairClassifier,
    intermediate: Sequence[LabeledPair],
    final: Sequence[LabeledPair],
    cfg_mid: TrainConfig,
    cfg_final: TrainConfig,
    final_dev: Sequence[LabeledPair] | None = None,
) -> tuple[PairClassifier, TrainReport]:
    """Fine-tune twice: surrogate task first, target task second.

    All parameters stay trainable in both stages. The intermediate stage must
    use a fixed epoch budget. Returns the final-stage report.
    """
    if not intermediate:
        raise TrainingError("intermediate dataset must be non-empty")
    if cfg_mid.epochs is None:
        raise TrainingError("intermediate stage requires a fixed epoch count")
    staged, _ = finetune(base, intermediate, dev=None, cfg=cfg_mid)
    return finetune(staged, final, dev=final_dev, cfg=cfg_final)


def predict(model: PairClassifier, pair: tuple[str, str], max_tokens: int = 200) -> tuple[int, float]:
    """Module-level alias for PairClassifier.predict."""
    return model.predict(pair, max_tokens)


# ---- checkpoints ------------------------------------------------------------


def save_checkpoint(model: PairClassifier, path: str | Path) -> None:
    """Write a self-describing archive: manifest (version, hyperparameters,
    vocabulary, tensor specs) plus one .npy entry per parameter tensor."""
    path = Path(path)
    state = model._state()
    cfg = model.encoder.config
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "pair-classifier",
        "threshold": model.threshold,
        "encoder": {
            "width": cfg.width,
            "layers": cfg.layers,
            "heads": cfg.heads,
            "ffn_width": cfg.ffn_width,
            "max_len": cfg.max_len,
            "pooling": cfg.pooling,
        },
        "vocab": model.encoder.vocab.tokens,
        "tensors": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype), "byte_order": "little"}
            for name, arr in state.items()
        },
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, arr in state.items():
            buf = io.BytesIO()
            np.save(buf, arr.astype("<f8") if arr.dtype.kind == "f" else arr)
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> PairClassifier:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if "format_version" not in manifest:
            raise TrainingError(f"{path}: checkpoint missing format_version")
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise TrainingError(f"{path}: unsupported checkpoint version {manifest['format_version']}")
        enc_cfg = EncoderConfig(**manifest["encoder"])
        encoder = TinyTransformerEncoder(Vocab(manifest["vocab"]), enc_cfg)
        model = PairClassifier(encoder, threshold=manifest.get("threshold", 0.5))
        for name, spec in manifest["tensors"].items():
            buf = io.BytesIO(zf.read(f"params/{name}.npy"))
            arr = np.load(buf)
            if list(arr.shape) != spec["shape"]:
                raise TrainingError(f"{path}: tensor {name} shape mismatch")
            if name.startswith("encoder."):
                model.encoder.params[name[len("encoder.") :]] = arr
            elif name == "head_w":
                model.head_w = arr
            elif name == "head_b":
                model.head_b = arr
            else:
                raise TrainingError(f"{path}: unknown tensor {name}")
    return model


def model_version(model: PairClassifier) -> str:
    """Short content hash identifying the loaded parameters."""
    digest = hashlib.sha256()
    state = model._state()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].tobytes())
    return digest.hexdigest()[:12]
