"""Loss, optimizer with cosine annealing, and the toy training loop.

Reverse-mode differentiation is torch autograd; the scan supplies its own
adjoint (see ``m4fuse.mixer``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from m4fuse.errors import DataError, TrainingError
from m4fuse.metrics import average_scores, class_to_label, label_to_class, region_scores
from m4fuse.network import M4Fuse, NetworkConfig, build
from m4fuse.synthetic import SyntheticSpec, generate

log = logging.getLogger(__name__)

DICE_WEIGHT = 0.7
CE_WEIGHT = 0.3
DICE_EPS = 1e-5


def loss_terms(logits: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft Dice loss over foreground classes and mean voxelwise cross-entropy."""
    n_classes = logits.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise DataError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{int(labels.min())}, {int(labels.max())}]")
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims) + eps
    dice_loss = 1.0 - (2.0 * inter / denom)[1:].mean()
    ce = F.cross_entropy(logits, labels)
    return dice_loss, ce


def loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    dice_loss, ce = loss_terms(logits, labels)
    return DICE_WEIGHT * dice_loss + CE_WEIGHT * ce


def backward(model: torch.nn.Module, value: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``value``; return gradients of every trainable parameter by name."""
    model.zero_grad(set_to_none=True)
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        grads[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    return grads


def cosine_lr(step: int, horizon: int, base_lr: float, min_lr: float) -> float:
    t = min(max(step, 0), horizon)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / horizon))


@dataclass
class OptimState:
    base_lr: float = 1e-4
    weight_decay: float = 1e-5
    min_lr: float = 1e-6
    horizon: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0

    def lr(self, step: int | None = None) -> float:
        return cosine_lr(self.step_count if step is None else step, self.horizon, self.base_lr, self.min_lr)


class Optimizer:
    """AdamW (decoupled weight decay, bias-corrected moments) on a cosine schedule."""

    def __init__(self, model: torch.nn.Module, state: OptimState | None = None):
        self.state = state or OptimState()
        self.named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.inner = torch.optim.AdamW(
            [p for _, p in self.named],
            lr=self.state.lr(),
            betas=self.state.betas,
            eps=self.state.eps,
            weight_decay=self.state.weight_decay,
        )

    def step(self) -> float:
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        lr = self.state.lr()
        for group in self.inner.param_groups:
            group["lr"] = lr
        self.inner.step()
        self.state.step_count += 1
        return lr


@dataclass
class ToyConfig:
    network: NetworkConfig = field(default_factory=lambda: toy_network())
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    epochs: int = 40
    batch_size: int = 2
    val_fraction: float = 0.25
    base_lr: float = 3e-3
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    patience: int = 20
    seed: int = 0


def toy_network(**overrides) -> NetworkConfig:
    """Small custom variant that trains on CPU in minutes at 32^3."""
    defaults = dict(
        variant="custom",
        max_channels=32,
        channel_schedule=(8, 8, 16, 16, 32),
        state_dim=16,
        num_experts=2,
        top_k=1,
        id_table={"site_a": 1, "site_b": 2},
    )
    defaults.update(overrides)
    return NetworkConfig(**defaults)


def _batch(samples: list[dict], dtype=torch.float32):
    x = torch.from_numpy(np.stack([s["image"] for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([label_to_class(s["labels"]) for s in samples]))
    ids = [s["site"] for s in samples]
    return x, y, ids


@torch.no_grad()
def predict_labels(model: M4Fuse, image: np.ndarray, site) -> np.ndarray:
    x = torch.from_numpy(image[None]).float()
    logits = model(x, [site], training=False)
    return class_to_label(logits.argmax(dim=1)[0].numpy())


def evaluate(model: M4Fuse, samples: list[dict]) -> dict:
    cases = [region_scores(predict_labels(model, s["image"], s["site"]), s["labels"]) for s in samples]
    summary = average_scores(cases)
    summary["mean_dice"] = float(np.mean([summary[r]["dice"] for r in ("WT", "TC", "ET")]))
    return summary


def split_dataset(samples: list[dict], val_fraction: float) -> tuple[list[dict], list[dict]]:
    n_val = max(1, int(round(len(samples) * val_fraction)))
    return samples[:-n_val], samples[-n_val:]


def train_toy(cfg: ToyConfig, dataset: list[dict] | None = None, epochs: int | None = None):
    """Train on synthetic volumes; returns ``(model, metric_log)``.

    Early-stops when held-out mean Dice has not improved for ``cfg.patience`` epochs.
    """
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    samples = dataset if dataset is not None else generate(cfg.data)
    train, val = split_dataset(samples, cfg.val_fraction)
    model = build(cfg.network)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    opt = Optimizer(model, OptimState(cfg.base_lr, cfg.weight_decay, cfg.min_lr, max(1, epochs * steps_per_epoch)))
    rng = np.random.default_rng(cfg.seed)
    dropout_gen = torch.Generator().manual_seed(cfg.seed)

    history = []
    best, since_best = -1.0, 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            x, y, ids = _batch([train[i] for i in order[start : start + cfg.batch_size]])
            value = loss(model(x, ids, training=True, generator=dropout_gen), y)
            if not torch.isfinite(value):
                raise TrainingError(f"loss diverged (value {value.item()}) at epoch {epoch}, step {opt.state.step_count}")
            backward(model, value)
            opt.step()
            total += value.item() * len(ids)
            seen += len(ids)
        scores = evaluate(model, val)
        entry = {
            "epoch": epoch,
            "loss": total / seen,
            "val_dice": scores["mean_dice"],
            "val": {r: scores[r]["dice"] for r in ("WT", "TC", "ET")},
            "lr": opt.state.lr(),
        }
        history.append(entry)
        log.info("epoch %d loss %.4f val dice %.4f", epoch, entry["loss"], entry["val_dice"])
        if entry["val_dice"] > best:
            best, since_best = entry["val_dice"], 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best %.4f)", epoch, best)
                break
    return model, history
