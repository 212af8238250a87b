"""Joint self-supervised pretraining, optimizers, segmentation fine-tuning and linear probes."""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .datasets import NUM_TOY_PARTS, PART_SETS, GeneratedStore, assemble_batch
from .encoders import (EncoderConfig, EncoderParams, add_segmentation_head, forward_fusion, forward_image,
                       forward_point, forward_segmentation, init_params, reinit_point_network, save_checkpoint)
from .errors import ConfigError, SizeError, TrainingFault
from .objectives import LossConfig, combined_loss, cross_modality_loss, triplet_loss
from .pointcloud import augment_cloud

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "l_triplet", "l_cross", "l_self", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_iterations: int = 120_000
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_every: int = 40_000
    lr_decay_factor: float = 0.1
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10_000
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if min(self.lr0, self.lr_decay_every, self.lr_decay_factor) <= 0 or self.total_iterations < 0:
            raise ConfigError("learning-rate settings must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay must be non-negative")

    @classmethod
    def toy(cls, **overrides) -> TrainConfig:
        base = dict(batch_size=16, total_iterations=2000, checkpoint_every=500)
        base.update(overrides)
        return cls(**base)


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay_factor ** (iteration // config.lr_decay_every)


def _is_bn_affine(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise TrainingFault(f"non-finite gradient for parameter {name!r}")


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, momentum: float,
               weight_decay: float, state: SGDState) -> None:
    """v <- momentum * v + (g + wd * p); p <- p - lr * v. Batchnorm scale/shift get no decay.

    Parameters without an entry in ``grads`` are left alone.
    """
    for name, g in grads.items():
        _check_finite(name, g)
    for name, g in grads.items():
        p = params[name]
        wd = 0.0 if _is_bn_affine(name) else weight_decay
        step = g + wd * p.data if wd else g
        v = state.velocity.get(name)
        v = step.copy() if v is None else momentum * v + step
        state.velocity[name] = v
        if lr:
            p.data -= (lr * v).astype(p.dtype, copy=False)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, state: AdamState) -> None:
    for name, g in grads.items():
        _check_finite(name, g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr:
            p = params[name]
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def collect_grads(tensors: dict[str, Tensor], prefixes: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    """Gradients of the selected parameters; an untouched parameter contributes zeros."""
    out = {}
    for name, t in tensors.items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    return out


# ------------------------------------------------------------------ pretraining

@dataclass
class StepResult:
    l_triplet: float
    l_cross: float
    l_self: float
    loss: Tensor


def joint_loss(params: EncoderParams, images: np.ndarray, clouds: np.ndarray, labels: np.ndarray,
               loss_cfg: LossConfig, mode: str = "train") -> StepResult:
    """Combined objective for one batch. ``images`` is [3, B, 1, H, W] (anchor, positive, negative)."""
    _, B = images.shape[:2]
    fi = forward_image(params, images.reshape(3 * B, *images.shape[2:]), mode)
    _, fp, _ = forward_point(params, clouds, mode)
    f1, f2, f3 = (ops.take(ops.reshape(fi, (3, B, -1)), j, axis=0) for j in range(3))
    l_tri = triplet_loss(f1, f2, f3, loss_cfg.margin)
    fp3 = ops.reshape(ops.expand(fp, 0, 3), (3 * B, -1))
    probs = ops.transpose(ops.reshape(forward_fusion(params, fi, fp3), (3, B)), (1, 0))
    l_cross = cross_modality_loss(probs, labels, loss_cfg.eps)
    total = combined_loss(l_tri, l_cross, loss_cfg.cross_weight)
    return StepResult(l_tri.item(), l_cross.item(), total.item(), total)


def _write_trace(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in rows:
            w.writerow([r[0], *(repr(float(x)) for x in r[1:])])


def read_trace(path: str | Path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["l_triplet"]), float(r["l_cross"]), float(r["l_self"]), float(r["lr"]))
            for r in rows]


class _BatchFeeder:
    """Draws batches on the caller's thread, or prefetches them from one worker thread."""

    def __init__(self, store, pool, batch_size, rng, augment, threaded, depth=4):
        self.args = (store, pool, batch_size, rng, augment)
        self.threaded = threaded
        if threaded:
            self.q: queue.Queue = queue.Queue(maxsize=depth)
            self.stop = threading.Event()
            self.worker = threading.Thread(target=self._run, daemon=True)
            self.worker.start()

    def _draw(self):
        store, pool, B, rng, augment = self.args
        objs = rng.choice(pool, size=B, replace=len(pool) < B)
        return assemble_batch(store, objs, rng, augment, pool)

    def _run(self):
        while not self.stop.is_set():
            batch = self._draw()
            while not self.stop.is_set():
                try:
                    self.q.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next(self):
        return self.q.get() if self.threaded else self._draw()

    def close(self):
        if self.threaded:
            self.stop.set()
            self.worker.join()


def pretrain(store: GeneratedStore, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
             loss_cfg: LossConfig = LossConfig(), out_dir: str | Path | None = None,
             params: EncoderParams | None = None, objects: np.ndarray | None = None,
             log_every: int = 100) -> tuple[EncoderParams, list[tuple]]:
    """Jointly train the image, point and fusion networks on the training split.

    Returns the parameters and the loss trace rows (iteration, l_triplet,
    l_cross, l_self, lr). With ``out_dir`` the trace is written to
    ``trace.csv`` and checkpoints to ``ckpt_<iteration>.ckpt`` / ``final.ckpt``.
    """
    pool = store.indices("train") if objects is None else np.asarray(objects)
    if len(pool) < 2:
        raise SizeError("pretraining needs at least two training objects")
    params = params or init_params(enc_cfg, train_cfg.seed)
    params.seed = train_cfg.seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(train_cfg.seed + 1)
    feeder = _BatchFeeder(store, pool, train_cfg.batch_size, rng, train_cfg.augment, not train_cfg.deterministic)
    state = SGDState()
    trace: list[tuple] = []
    start = params.iteration
    try:
        for it in range(start, train_cfg.total_iterations):
            batch = feeder.next()
            lr = lr_at(it, train_cfg)
            params.zero_grad()
            res = joint_loss(params, batch.images, batch.clouds, batch.labels, loss_cfg)
            trace.append((it, res.l_triplet, res.l_cross, res.l_self, lr))
            if not np.isfinite(res.l_self):
                if out is not None:
                    _write_trace(trace, out / "trace.csv")
                raise TrainingFault(f"non-finite loss at iteration {it}: {trace[-1]}")
            res.loss.backward()
            try:
                sgd_update(params.tensors, collect_grads(params.tensors, ("img.", "pt.", "fuse.")), lr,
                           train_cfg.momentum, train_cfg.weight_decay, state)
            except TrainingFault:
                if out is not None:
                    _write_trace(trace, out / "trace.csv")
                raise
            params.iteration = it + 1
            if log_every and (it + 1) % log_every == 0:
                recent = np.mean([r[3] for r in trace[-log_every:]])
                log.info("iter %d  l_self %.4f  lr %.2g", it + 1, recent, lr)
            if out is not None and (it + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(params, out / f"ckpt_{it + 1:06d}.ckpt")
    finally:
        feeder.close()
    params.zero_grad()
    if out is not None:
        _write_trace(trace, out / "trace.csv")
        save_checkpoint(params, out / "final.ckpt")
    return params, trace


# ------------------------------------------------------------------ segmentation

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 16
    lr0: float = 0.003
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fraction: float = 1.0
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError("training fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need at least one epoch and batch_size >= 2")


REGIMES = ("frozen", "unfrozen", "scratch")


def finetune_lr(epoch: int, config: FinetuneConfig) -> float:
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def subsample_per_class(indices: np.ndarray, classes: list[str], fraction: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Keep round(fraction * count) objects of every class, at least one."""
    keep = []
    for c in sorted({classes[i] for i in indices}):
        members = np.array([i for i in indices if classes[i] == c])
        n = max(1, int(round(fraction * len(members))))
        keep.extend(rng.choice(members, n, replace=False).tolist())
    return np.sort(np.array(keep, dtype=np.int64))


def part_mask(classes: list[str], num_parts: int, part_sets: dict[str, tuple[int, ...]] = PART_SETS) -> np.ndarray:
    """[len(classes), num_parts] boolean: which part ids each object's category may use."""
    mask = np.zeros((len(classes), num_parts), dtype=bool)
    for i, c in enumerate(classes):
        mask[i, list(part_sets[c])] = True
    return mask


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-point softmax cross-entropy."""
    if labels.shape != logits.shape[:-1]:
        raise SizeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise SizeError(f"part label outside the head's {logits.shape[-1]} classes")
    return ops.scale(ops.sum(ops.pick(ops.log_softmax(logits, axis=-1), labels)), -1.0 / labels.size)


def finetune_segmentation(base: EncoderParams | None, store: GeneratedStore, regime: str,
                          config: FinetuneConfig, num_parts: int = NUM_TOY_PARTS,
                          enc_cfg: EncoderConfig | None = None) -> tuple[EncoderParams, list[float]]:
    """Train a segmentation head (and, unless frozen, the point network) on part labels.

    ``base`` is copied, never modified. Returns the new parameters and the
    per-epoch mean training loss.
    """
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    if store.parts is None:
        raise ConfigError("store has no part labels")
    if store.parts.max() >= num_parts:
        raise SizeError(f"part labels reach {int(store.parts.max())} but the head has {num_parts} classes")
    if base is None:
        if regime != "scratch":
            raise ConfigError(f"regime {regime!r} needs a base checkpoint")
        base = init_params(enc_cfg or EncoderConfig.toy(), config.seed)
    params = base.copy()
    if regime == "scratch":
        reinit_point_network(params, config.seed + 7)
    add_segmentation_head(params, num_parts, seed=config.seed + 11)
    frozen = regime == "frozen"
    trainable = ("seg.",) if frozen else ("seg.", "pt.")

    rng = np.random.default_rng(config.seed + 3)
    train = subsample_per_class(store.indices("train"), store.classes, config.fraction, rng)
    state = AdamState(config.beta1, config.beta2, config.eps)
    history = []
    B = min(config.batch_size, len(train))
    for epoch in range(config.epochs):
        lr = finetune_lr(epoch, config)
        order = rng.permutation(train)
        losses = []
        for s in range(0, len(order), B):
            idx = order[s:s + B]
            if len(idx) < 2:
                continue  # train-mode batchnorm needs more than one cloud
            clouds = store.clouds[idx]
            if config.augment:
                clouds = np.stack([augment_cloud(c, rng) for c in clouds])
            params.zero_grad()
            loss = segmentation_loss(forward_segmentation(params, clouds, "train", freeze_base=frozen),
                                     store.parts[idx].astype(np.int64))
            loss.backward()
            adam_update(params.tensors, collect_grads(params.tensors, trainable), lr, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    params.zero_grad()
    return params, history


def predict_parts(params: EncoderParams, clouds: np.ndarray, allowed: np.ndarray | None = None,
                  batch_size: int = 64) -> np.ndarray:
    """Arg-max part per point; ``allowed`` [N, num_parts] restricts each cloud to its category's parts."""
    out = []
    with no_grad():
        for s in range(0, len(clouds), batch_size):
            logits = forward_segmentation(params, clouds[s:s + batch_size], "eval").data
            if allowed is not None:
                logits = np.where(allowed[s:s + batch_size, None, :], logits, -np.inf)
            out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out)


# ------------------------------------------------------------------ linear probe

@dataclass(frozen=True)
class ProbeConfig:
    C: float = 1.0
    epochs: int = 200
    lr0: float = 0.01
    seed: int = 0
    standardize: bool = True


@dataclass
class LinearProbe:
    weights: np.ndarray  # [num_classes, D]
    bias: np.ndarray  # [num_classes]
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weights.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=1)


def train_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
                       config: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """One-vs-rest linear SVM: per-sample subgradient descent on
    (1 / (2 C N)) |w|^2 + mean hinge, step lr0 / t at epoch t."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise SizeError(f"features {X.shape} and labels {y.shape} disagree")
    num_classes = num_classes or int(y.max()) + 1
    present = np.unique(y)
    if len(present) < 2:
        raise ConfigError("linear probe needs at least two classes")
    mean = X.mean(0) if config.standardize else np.zeros(X.shape[1])
    scale = X.std(0) if config.standardize else np.ones(X.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (X - mean) / scale
    N, D = Z.shape
    Y = np.where(y[:, None] == np.arange(num_classes)[None, :], 1.0, -1.0)  # [N, K]
    W = np.zeros((num_classes, D))
    b = np.zeros(num_classes)
    lam = 1.0 / (config.C * N)
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        eta = config.lr0 / epoch
        for i in rng.permutation(N):
            z, yi = Z[i], Y[i]
            active = yi * (W @ z + b) < 1
            W *= 1 - eta * lam
            if active.any():
                W[active] += eta * yi[active, None] * z[None, :]
                b[active] += eta * yi[active]
    return LinearProbe(W, b, mean, scale)
