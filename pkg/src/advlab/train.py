"""Standard training and free adversarial training.

Free AT replays every mini-batch ``replay`` times. Each replay runs one
forward/backward pass on ``x + delta`` and uses its two gradients twice: the
input gradient moves the persistent perturbation ``delta`` (sign step,
projected back into the epsilon ball and the pixel range), the parameter
gradient feeds the optimizer. The schedule step counter advances per
optimizer call, i.e. ``replay`` times per batch.
"""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .attacks import project_ball
from .datasets import LabeledImageSet
from .zoo import Classifier


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class FreeATConfig:
    replay: int = 4
    epsilon: float = 2.0
    step_size: float = 0.6

    def __post_init__(self):
        if self.replay < 1:
            raise ValueError("free_at.replay must be >= 1")
        if self.epsilon < 0:
            raise ValueError("free_at.epsilon must be >= 0")
        if not self.step_size > 0:
            raise ValueError("free_at.step_size must be > 0")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    global_clipnorm: float | None = None
    schedule: str = "exponential"
    initial_lr: float = 0.1
    decay_steps: int = 1000
    decay_rate: float = 0.1
    staircase: bool = True
    warmup_steps: int = 0
    warmup_target: float | None = None
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    free_at: FreeATConfig | None = None

    def __post_init__(self):
        if isinstance(self.free_at, dict):
            self.free_at = FreeATConfig(**self.free_at)
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.schedule not in ("exponential", "cosine"):
            raise ValueError("schedule must be 'exponential' or 'cosine'")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and patience >= 1 required")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if self.global_clipnorm is not None and not self.global_clipnorm > 0:
            raise ValueError("global_clipnorm must be positive when given")

    def to_dict(self) -> dict:
        return asdict(self)


def reference_cnn_config(batches_per_epoch: int = 5004, replay: int = 4) -> TrainConfig:
    """The TPU-scale CNN recipe (documentation preset; far too slow for desk use)."""
    return TrainConfig(
        optimizer="sgd",
        momentum=0.9,
        weight_decay=1e-4,
        schedule="exponential",
        initial_lr=0.1,
        decay_steps=8 * batches_per_epoch * replay,
        decay_rate=0.1,
        staircase=True,
        batch_size=32 * 8,
        max_epochs=90,
        free_at=FreeATConfig(replay=replay, epsilon=2.0, step_size=0.6),
    )


def reference_vit_config(replay: int = 4) -> TrainConfig:
    """The TPU-scale ViT recipe (documentation preset)."""
    return TrainConfig(
        optimizer="adam",
        weight_decay=0.1,
        global_clipnorm=1.0,
        schedule="cosine",
        initial_lr=0.001,
        decay_steps=8 * 270,
        warmup_steps=8 * 30,
        warmup_target=0.001,
        batch_size=32 * 8,
        max_epochs=300,
        free_at=FreeATConfig(replay=replay, epsilon=2.0, step_size=0.6),
    )


def lr_at_step(config: TrainConfig, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.schedule == "exponential":
        p = step / config.decay_steps
        if config.staircase:
            p = math.floor(p)
        return config.initial_lr * config.decay_rate**p
    # cosine with optional linear warmup from initial_lr to warmup_target
    peak = config.initial_lr if config.warmup_target is None else config.warmup_target
    if step < config.warmup_steps:
        return config.initial_lr + (peak - config.initial_lr) * step / config.warmup_steps
    t = min(step - config.warmup_steps, config.decay_steps) / config.decay_steps
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    step: int = 0
    slots: dict = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], clipnorm: float | None):
    if clipnorm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= clipnorm:
        return grads
    k = clipnorm / norm
    return {name: (g * k).astype(g.dtype) for name, g in grads.items()}


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], config: TrainConfig, state: OptimizerState):
    """Update ``params`` in place: global-norm clip, decoupled decay, then SGD/Adam."""
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"missing gradients for {sorted(missing)}")
    grads = clip_by_global_norm(grads, config.global_clipnorm)
    lr = lr_at_step(config, state.step)
    state.step += 1
    t = state.step
    new = {}
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        w = p.astype(np.float64)
        if config.weight_decay:
            w = w - lr * config.weight_decay * w
        if config.optimizer == "sgd":
            if config.momentum:
                v = config.momentum * state.slots.get(name, 0.0) + g
                state.slots[name] = v
                g = v
            w = w - lr * g
        else:
            m, v = state.slots.get(name, (0.0, 0.0))
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            state.slots[name] = (m, v)
            mhat = m / (1 - config.beta1**t)
            vhat = v / (1 - config.beta2**t)
            w = w - lr * mhat / (np.sqrt(vhat) + config.adam_epsilon)
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(f"non-finite update for parameter {name}")
        new[name] = w
    for name, w in new.items():
        params[name] = w.astype(params[name].dtype)
    return params


def early_stop(history, patience: int) -> tuple[bool, int]:
    """``(stop, best_epoch)`` for a list of clean validation losses."""
    if len(history) == 0:
        raise ValueError("early_stop needs a nonempty history")
    best = int(np.argmin(np.asarray(history, dtype=np.float64)))
    return (len(history) - 1 - best) >= patience, best


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    delta: np.ndarray | None = None
    best_val_loss: float = math.inf
    best_params: "OrderedDict[str, np.ndarray] | None" = None


@dataclass
class TrainResult:
    model: Classifier
    history: list[dict]
    best_epoch: int | None
    stopped_early: bool
    steps: int
    backward_passes: int


def evaluate(model: Classifier, data: LabeledImageSet, chunk: int = 256) -> tuple[float, float]:
    """Clean ``(mean loss, accuracy)``."""
    total, correct = 0.0, 0
    for i in range(0, len(data), chunk):
        x = data.images[i : i + chunk].astype(model.dtype)
        y = data.labels[i : i + chunk]
        logits = model.forward(gc.Tensor(x)).data.astype(np.float64)
        if not np.all(np.isfinite(logits)):
            raise TrainingDivergedError("non-finite validation logits")
        logp = gc.log_softmax(logits)
        total += float(-logp[np.arange(len(y)), y].sum())
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(data), correct / len(data)


def _loop(model: Classifier, train_set, val_set, config: TrainConfig, seed: int, free: FreeATConfig | None) -> TrainResult:
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = OptimizerState()
    state = TrainState()
    history: list[dict] = []
    n = len(train_set)
    bs = config.batch_size
    passes = 0
    stopped = False
    if free is not None:
        state.delta = np.zeros((bs,) + train_set.image_shape, dtype=model.dtype)
        eps = model.dtype.type(free.epsilon)
        alpha = model.dtype.type(free.step_size)
    for epoch in range(config.max_epochs):
        state.epoch = epoch
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            x = train_set.images[idx].astype(model.dtype)
            y = train_set.labels[idx]
            try:
                if free is None:
                    loss, tape = gc.forward_scalar_loss(model, x, y)
                    grads = gc.backward_params(tape, loss)
                    passes += 1
                    optimizer_step(model.params, grads, config, opt)
                    losses.append(float(loss.data))
                    continue
                b = len(idx)
                # warm-start perturbation from the previous batch, made valid for this one
                delta = np.clip(x + state.delta[:b], 0, 255) - x
                for _ in range(free.replay):
                    loss, tape = gc.forward_scalar_loss(model, x + delta, y, input_grad=True)
                    grads, gx = gc.backward_all(tape, loss)
                    passes += 1
                    adv = project_ball(x, x + delta + alpha * gc.sign(gx), eps)
                    delta = adv - x
                    optimizer_step(model.params, grads, config, opt)
                    losses.append(float(loss.data))
                state.delta[:b] = delta
            except gc.NonFiniteError as e:
                raise TrainingDivergedError(f"epoch {epoch}: {e}") from None
        state.step = opt.step
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite training loss")
        val_loss, val_acc = evaluate(model, val_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc})
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_params = OrderedDict((k, v.copy()) for k, v in model.params.items())
        stop, _ = early_stop([h["val_loss"] for h in history], config.patience)
        if stop:
            stopped = True
            break
    best_epoch = None
    if history:
        _, best_epoch = early_stop([h["val_loss"] for h in history], config.patience)
        model.params = state.best_params
    model.tag = "ST" if free is None else "AT"
    return TrainResult(model, history, best_epoch, stopped, opt.step, passes)


def train_standard(model: Classifier, train_set: LabeledImageSet, val_set: LabeledImageSet, config: TrainConfig, seed: int = 0) -> TrainResult:
    """Minimise clean cross-entropy with early stopping on clean validation loss."""
    return _loop(model, train_set, val_set, config, seed, None)


def train_free_at(model: Classifier, train_set: LabeledImageSet, val_set: LabeledImageSet, config: TrainConfig, seed: int = 0) -> TrainResult:
    if config.free_at is None:
        raise ValueError("train_free_at requires config.free_at")
    return _loop(model, train_set, val_set, config, seed, config.free_at)


def write_run_artifacts(out_dir, result: TrainResult, manifest: dict) -> tuple[Path, Path]:
    """Emit ``curves.csv`` and ``run.json`` (manifest plus curves and final tag)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cpath = out / "curves.csv"
    with open(cpath, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for h in result.history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["val_acc"])])
    body = dict(manifest)
    body.update(
        {
            "tag": result.model.tag,
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "optimizer_steps": result.steps,
            "curves": result.history,
        }
    )
    mpath = out / "run.json"
    mpath.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return cpath, mpath
