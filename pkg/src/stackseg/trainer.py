"""Training loop: polynomial LR decay, heavy-ball SGD with weight decay,
and random scale/aspect/crop/mirror augmentation.

One trainer seed drives two independent streams (batch/augmentation
draws and dropout masks), so a fixed seed reproduces a run bit for bit
on the same thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import mean_pixel, pad_to_multiple
from .errors import ConfigError, DataError, DivergenceError
from .metrics import EvalAccumulator
from .ops import resize_bilinear_array, resize_nearest_labels
from .tensor import backward


@dataclass
class TrainConfig:
    base_lr: float = 2.5e-4
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    crop: int = 64
    max_iter: int = 1000
    scales: tuple = (0.6, 0.8, 1.0, 1.2, 1.4)
    aspects: tuple = (0.7, 0.85, 1.0, 1.15, 1.3)
    hflip_prob: float = 0.5
    ignore_index: int = 255
    seed: int = 0
    log_every: int = 10

    def validate(self):
        if self.base_lr <= 0 or self.max_iter < 1 or self.batch_size < 1:
            raise ConfigError(
                f"bad schedule: lr={self.base_lr} max_iter={self.max_iter} "
                f"batch_size={self.batch_size}")
        if self.crop % 16:
            raise ConfigError(f"crop {self.crop} must be a multiple of 16")
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError(f"bad scales {self.scales}")
        if not self.aspects or min(self.aspects) <= 0:
            raise ConfigError(f"bad aspects {self.aspects}")


def benchmark_profile(**overrides):
    """Settings for full-scale runs: batch 10, 320px crops, long horizon."""
    base = dict(base_lr=2.5e-4, batch_size=10, crop=320, max_iter=30000,
                scales=(0.6, 0.8, 1.0, 1.2, 1.4),
                aspects=(0.7, 0.85, 1.0, 1.15, 1.3))
    base.update(overrides)
    return TrainConfig(**base)


def poly_lr(base_lr, iteration, max_iter, power=0.9):
    """base * (1 - it/max_iter)^power, clamped to 0 past the horizon."""
    if max_iter <= 0:
        raise ConfigError(f"max_iter={max_iter}")
    frac = min(iteration / max_iter, 1.0)
    return base_lr * (1.0 - frac) ** power


def sgd_step(params, lr, momentum=0.9, weight_decay=5e-4):
    """v <- momentum*v + grad + wd*value; value <- value - lr*v.

    Decay-exempt parameters (biases, BN affine) skip the L2 term.
    Gradients are consumed: every touched parameter is zeroed after.
    """
    for p in params:
        if p._grad is None:
            continue
        g = p._grad
        if weight_decay and not p.decay_exempt:
            g = g + weight_decay * p.value
        buf = p.momentum_buf
        buf *= momentum
        buf += g
        p.value -= lr * buf
        p.zero_grad()


def augment(sample, cfg, rng, fill):
    """Random resize by scale*sqrt(aspect), crop (padding short sides with
    the dataset mean / ignore), and coin-flip mirror."""
    s = cfg.scales[rng.integers(len(cfg.scales))]
    a = cfg.aspects[rng.integers(len(cfg.aspects))]
    h, w = sample.image.shape[1:]
    nh = max(1, int(round(h * s * math.sqrt(a))))
    nw = max(1, int(round(w * s / math.sqrt(a))))
    image = resize_bilinear_array(sample.image.astype(np.float32), nh, nw)
    labels = resize_nearest_labels(sample.labels, nh, nw)

    crop = cfg.crop
    if nh < crop or nw < crop:
        ph, pw = max(0, crop - nh), max(0, crop - nw)
        padded = np.empty((3, nh + ph, nw + pw), dtype=image.dtype)
        padded[:] = np.asarray(fill, dtype=image.dtype)[:, None, None]
        padded[:, :nh, :nw] = image
        image = padded
        lab = np.full((nh + ph, nw + pw), cfg.ignore_index, dtype=labels.dtype)
        lab[:nh, :nw] = labels
        labels = lab
        nh, nw = image.shape[1:]
    y0 = int(rng.integers(nh - crop + 1))
    x0 = int(rng.integers(nw - crop + 1))
    image = image[:, y0:y0 + crop, x0:x0 + crop]
    labels = labels[y0:y0 + crop, x0:x0 + crop]
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def train(net, samples, cfg, log_fn=None):
    """Run the loop; returns one history dict per iteration.

    Log rows are ``iter<TAB>lr<TAB>total_loss<TAB>name=value,...`` with
    one name=value per supervision head.
    """
    cfg.validate()
    if not samples:
        raise DataError("no training samples")
    for s in samples:
        if s.labels is None:
            raise DataError(f"sample {s.name} has no labels")
    fill = mean_pixel(samples)
    aug_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    aug_rng = np.random.default_rng(aug_seq)
    drop_rng = np.random.default_rng(drop_seq)
    params = net.params()

    history = []
    for it in range(cfg.max_iter):
        lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.power)
        batch = [augment(samples[int(aug_rng.integers(len(samples)))],
                         cfg, aug_rng, fill)
                 for _ in range(cfg.batch_size)]
        x = np.stack([im for im, _ in batch])
        y = np.stack([lb for _, lb in batch])

        maps = net.forward(x, training=True, rng=drop_rng)
        named = net.losses(maps, y, cfg.ignore_index)
        head_losses = {name: float(loss.data) for name, loss, _ in named}
        total = sum(w * float(loss.data) for _, loss, w in named)
        for name, value in head_losses.items():
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at iteration {it}: head {name} = "
                    f"{value} (lr was {lr:.3g})")

        backward([loss for _, loss, _ in named], [w for _, _, w in named])
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)

        history.append({"iteration": it, "lr": lr, "total_loss": total,
                        "head_losses": head_losses})
        if log_fn and (it % cfg.log_every == 0 or it == cfg.max_iter - 1):
            heads = ",".join(f"{k}={v:.4g}" for k, v in head_losses.items())
            log_fn(f"{it}\t{lr:.6g}\t{total:.6g}\t{heads}")
    return history


def evaluate(net, samples, num_classes, ignore_index=255, fill=None):
    """Score plain single-scale predictions against sample labels."""
    acc = EvalAccumulator(num_classes, ignore_index)
    for s in samples:
        if s.labels is None:
            raise DataError(f"sample {s.name} has no labels to score against")
        h, w = s.image.shape[1:]
        padded, _ = pad_to_multiple(s.image, None, fill=fill)
        pred = net.predict(padded[None])[0][:h, :w]
        acc.update(s.labels, pred)
    return acc
