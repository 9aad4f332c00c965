"""Untargeted l-infinity attacks in pixel units.

All attacks start from the clean image, keep every iterate inside both the
epsilon ball and the valid pixel range, and treat each image independently:
work is split into fixed-size chunks so results do not depend on how many
worker threads process them.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .zoo import Classifier, check_pixel_range, predict_labels, read_container, split_blobs, write_container

ADVSET_MAGIC = b"ADVS"

#: Target accuracy of AT targets under AT-surrogate transfer, averaged in the
#: reference study; used as a directional anchor, not a pass threshold.
REFERENCE_AT_TO_AT_ACCURACY = 0.1316

UPDATE_SIGNS = {"ascend": 1.0, "descend": -1.0}


@dataclass
class AttackSpec:
    epsilons: tuple[float, ...] = (16.0,)
    steps: int = 20
    step_size: float | None = None
    momentum: float = 1.0
    ig_steps: int = 20
    baseline: float = 0.0
    update_sign: str = "ascend"
    loss: str = "cross_entropy"
    scalar: str = "logit"
    bounds: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in np.atleast_1d(self.epsilons))
        self.bounds = tuple(float(b) for b in self.bounds)
        if not self.epsilons:
            raise ValueError("at least one epsilon is required")
        if min(self.epsilons) <= 0:
            raise ValueError("epsilons must be strictly positive")
        if any(b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be sorted strictly ascending")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive when given")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.update_sign not in UPDATE_SIGNS:
            raise ValueError(f"update_sign must be one of {tuple(UPDATE_SIGNS)}")
        if self.scalar not in gc.SCALARS:
            raise ValueError(f"scalar must be one of {gc.SCALARS}")
        if self.loss != "cross_entropy":
            raise ValueError("only the cross_entropy loss is supported")
        if len(self.bounds) != 2 or self.bounds[0] >= self.bounds[1]:
            raise ValueError("bounds must be (low, high) with low < high")

    @property
    def epsilon(self) -> float:
        if len(self.epsilons) != 1:
            raise ValueError(f"attack needs a single epsilon, got {self.epsilons}")
        return self.epsilons[0]

    def alpha(self, eps: float) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.steps == 0:
            return 0.0
        return eps / self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilons"] = list(self.epsilons)
        d["bounds"] = list(self.bounds)
        return d


@dataclass
class AttackOutput:
    epsilons: tuple[float, ...]
    adversarials: list[np.ndarray]
    success: list[np.ndarray]
    linf: list[np.ndarray]
    diagnostics: list[str] = field(default_factory=list)

    def at(self, eps: float) -> np.ndarray:
        return self.adversarials[self.epsilons.index(float(eps))]


@dataclass
class SuccessReport:
    accuracy: float
    success: float
    n: int
    correct: int
    per_class: dict[int, float]


# ---------------------------------------------------------------------------


def project_ball(x0, x, epsilon: float, bounds=(0.0, 255.0)) -> np.ndarray:
    """Clip ``x`` into ``[x0 - eps, x0 + eps]`` intersected with the pixel range."""
    if np.any(np.asarray(epsilon) < 0):
        raise ValueError("epsilon must be non-negative")
    x0 = np.asarray(x0)
    out = np.clip(x, x0 - epsilon, x0 + epsilon)
    return np.clip(out, bounds[0], bounds[1])


def _chunks(n: int, size: int):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, n: int, size: int, threads: int):
    slices = _chunks(n, size)
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return slices, list(pool.map(fn, slices))
    return slices, [fn(s) for s in slices]


def _prepare(model: Classifier, x, y, spec: AttackSpec):
    x = np.asarray(x)
    if spec.bounds == (0.0, 255.0):
        check_pixel_range(x)
    elif x.size and (x.min() < spec.bounds[0] or x.max() > spec.bounds[1]):
        raise ValueError(f"inputs must lie within bounds {spec.bounds}")
    x = x.astype(model.dtype, copy=True)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    return x, y


def _finish(model, x, y, epsilons, advs, diags) -> AttackOutput:
    succ, dist = [], []
    for adv in advs:
        succ.append(_labels(model, adv) != y)
        dist.append(np.abs(adv - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0))
    return AttackOutput(tuple(epsilons), advs, succ, dist, diags)


def _labels(model, images, chunk: int = 256) -> np.ndarray:
    # no range check: attacks may run in a preprocessed coordinate system
    out = [model.forward(gc.Tensor(images[sl])).data.argmax(axis=1) for sl in _chunks(len(images), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _freeze_nonfinite(g: np.ndarray, active: np.ndarray, offset: int, it: int, diags: list, what: str):
    bad = ~np.isfinite(g.reshape(len(g), -1)).all(axis=1)
    for i in np.flatnonzero(bad & active):
        diags.append(f"image {offset + i}: non-finite {what} at iteration {it}; attack aborted for this image")
    active &= ~bad
    g[~np.isfinite(g)] = 0.0
    return g


# ---------------------------------------------------------------------------
# PGD


def pgd(model: Classifier, x, y, spec: AttackSpec, chunk: int = 64, threads: int = 1) -> AttackOutput:
    """T steps of ``x <- Proj(x + alpha * sign(grad_x loss))`` from the clean image."""
    eps = spec.epsilon
    x, y = _prepare(model, x, y, spec)
    alpha = x.dtype.type(spec.alpha(eps))
    diags: list[str] = []

    def run(sl):
        x0, yy = x[sl], y[sl]
        adv = x0.copy()
        active = np.ones(len(x0), dtype=bool)
        local: list[str] = []
        for t in range(spec.steps):
            g = gc.input_gradient(model, adv, yy, "loss", check_finite=False)
            g = _freeze_nonfinite(g, active, sl.start, t, local, "loss gradient")
            step = adv + alpha * gc.sign(g)
            adv = np.where(active[:, None, None, None], project_ball(x0, step, eps, spec.bounds), adv)
        return adv.astype(x.dtype, copy=False), local

    _, parts = _map_chunks(run, len(x), chunk, threads)
    adv = np.concatenate([p[0] for p in parts]) if parts else x.copy()
    for p in parts:
        diags.extend(p[1])
    return _finish(model, x, y, (eps,), [adv], diags)


# ---------------------------------------------------------------------------
# integrated gradients


_IG_ROWS = 160  # path images per backward pass


def integrated_gradients(
    model: Classifier,
    x,
    y,
    baseline=0.0,
    steps: int = 20,
    scalar: str = "logit",
    chunk: int = 8,
    check_finite: bool = True,
) -> np.ndarray:
    """Riemann-sum integrated gradients along the straight path from ``baseline``.

    ``IG_i = (x_i - b_i) / s * sum_{k=1..s} dS(b + k/s (x - b)) / dx_i`` where
    ``S`` is the per-image scalar picked by ``scalar`` for label ``y``.
    """
    if steps < 1:
        raise ValueError("IG needs at least one step")
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    b = np.broadcast_to(np.asarray(baseline, dtype=model.dtype), x.shape)
    if b.shape != x.shape:
        raise ValueError("baseline and input shapes differ")
    fracs = (np.arange(1, steps + 1, dtype=np.float64) / steps).astype(model.dtype)
    out = np.empty_like(x)
    for sl in _chunks(len(x), chunk):
        xs, bs, ys = x[sl], b[sl], y[sl]
        m = len(xs)
        total = np.zeros_like(xs)
        # bounded batches of path points; the sum still runs k = 1..s in order
        block = max(1, _IG_ROWS // m)
        for k0 in range(0, steps, block):
            f = fracs[k0 : k0 + block]
            # rows ordered (k, image)
            path = bs[None] + f[:, None, None, None, None] * (xs - bs)[None]
            grads = gc.input_gradient(
                model,
                path.reshape((len(f) * m,) + xs.shape[1:]),
                np.tile(ys, len(f)),
                scalar,
                check_finite=check_finite,
            ).reshape((len(f), m) + xs.shape[1:])
            for g in grads:
                total += g
        out[sl] = (xs - bs) * total / model.dtype.type(steps)
    return out


# ---------------------------------------------------------------------------
# MIG


def _l1_direction(delta: np.ndarray, active: np.ndarray, offset: int, it: int, diags: list) -> np.ndarray:
    norms = np.abs(delta).reshape(len(delta), -1).sum(axis=1)
    zero = norms == 0
    for i in np.flatnonzero(zero & active):
        diags.append(f"image {offset + i}: zero IG norm at iteration {it}; direction set to zero")
    safe = np.where(zero, 1.0, norms).astype(delta.dtype)
    return np.where(zero[:, None, None, None], 0.0, delta / safe[:, None, None, None]).astype(delta.dtype)


def mig(model: Classifier, x, y, spec: AttackSpec, chunk: int = 8, threads: int = 1) -> AttackOutput:
    """Momentum integrated-gradients attack at a single epsilon.

    ``g <- mu g + IG / |IG|_1``, ``adv <- Proj(adv +/- alpha sign(g))`` with
    the sign set by ``spec.update_sign``.
    """
    eps = spec.epsilon
    x, y = _prepare(model, x, y, spec)
    alpha = x.dtype.type(spec.alpha(eps))
    mu = x.dtype.type(spec.momentum)
    direction = x.dtype.type(UPDATE_SIGNS[spec.update_sign])

    def run(sl):
        x0, yy = x[sl], y[sl]
        adv = x0.copy()
        g = np.zeros_like(x0)
        active = np.ones(len(x0), dtype=bool)
        local: list[str] = []
        for t in range(spec.steps):
            delta = integrated_gradients(model, adv, yy, spec.baseline, spec.ig_steps, spec.scalar, chunk, False)
            delta = _freeze_nonfinite(delta, active, sl.start, t, local, "integrated gradient")
            g = mu * g + _l1_direction(delta, active, sl.start, t, local)
            step = adv + direction * alpha * gc.sign(g)
            adv = np.where(active[:, None, None, None], project_ball(x0, step, eps, spec.bounds), adv)
        return adv, local

    _, parts = _map_chunks(run, len(x), chunk, threads)
    adv = np.concatenate([p[0] for p in parts]) if parts else x.copy()
    diags = [d for p in parts for d in p[1]]
    return _finish(model, x, y, (eps,), [adv], diags)


def mig_multi_epsilon(model: Classifier, x, y, spec: AttackSpec, chunk: int = 8, threads: int = 1) -> AttackOutput:
    """MIG for several budgets at the cost of one.

    IG is evaluated once per iteration on the largest-budget trajectory; each
    budget keeps its own momentum buffer, step size ``eps_i / T`` and clip
    radius. The largest-budget output coincides with :func:`mig`.
    """
    if spec.step_size is not None and len(spec.epsilons) > 1:
        raise ValueError("multi-epsilon MIG uses eps_i / T step sizes; leave step_size unset")
    x, y = _prepare(model, x, y, spec)
    eps = spec.epsilons
    n = len(eps)
    alphas = [x.dtype.type(spec.alpha(e)) for e in eps]
    mu = x.dtype.type(spec.momentum)
    direction = x.dtype.type(UPDATE_SIGNS[spec.update_sign])

    def run(sl):
        x0, yy = x[sl], y[sl]
        advs = [x0.copy() for _ in range(n)]
        gs = [np.zeros_like(x0) for _ in range(n)]
        active = np.ones(len(x0), dtype=bool)
        local: list[str] = []
        for t in range(spec.steps):
            delta = integrated_gradients(model, advs[-1], yy, spec.baseline, spec.ig_steps, spec.scalar, chunk, False)
            delta = _freeze_nonfinite(delta, active, sl.start, t, local, "integrated gradient")
            unit = _l1_direction(delta, active, sl.start, t, local)
            for i in range(n):
                gs[i] = mu * gs[i] + unit
                step = advs[i] + direction * alphas[i] * gc.sign(gs[i])
                advs[i] = np.where(
                    active[:, None, None, None], project_ball(x0, step, eps[i], spec.bounds), advs[i]
                )
        return advs, local

    _, parts = _map_chunks(run, len(x), chunk, threads)
    if parts:
        advs = [np.concatenate([p[0][i] for p in parts]) for i in range(n)]
    else:
        advs = [x.copy() for _ in range(n)]
    diags = [d for p in parts for d in p[1]]
    return _finish(model, x, y, eps, advs, diags)


# ---------------------------------------------------------------------------


def success_rate(model: Classifier, adversarials, labels) -> SuccessReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("success_rate needs a nonempty set")
    pred = predict_labels(model, adversarials)
    return accuracy_report(pred, labels)


def accuracy_report(pred, labels) -> SuccessReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("accuracy needs a nonempty set")
    ok = np.asarray(pred) == labels
    correct = int(ok.sum())
    acc = correct / len(labels)
    per_class = {int(c): float(ok[labels == c].mean()) for c in np.unique(labels)}
    return SuccessReport(acc, 1.0 - acc, len(labels), correct, per_class)


# ---------------------------------------------------------------------------
# persistence


def save_adversarial_set(path, images, labels, manifest: dict, clean=None) -> tuple[Path, Path]:
    """Write images to an ADVS container and ``manifest`` to a sibling JSON file.

    With ``clean`` given, the manifest also lists each image's l-inf distance
    to its clean source.
    """
    path = Path(path)
    images = np.asarray(images, dtype=np.float32)
    if clean is not None:
        d = np.abs(images.astype(np.float64) - np.asarray(clean, dtype=np.float64))
        manifest = {**manifest, "linf": [float(v) for v in d.reshape(len(images), -1).max(axis=1)]}
    header = {"shape": list(images.shape), "labels": [int(v) for v in labels]}
    write_container(path, ADVSET_MAGIC, header, [images])
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, mpath


def load_adversarial_set(path):
    header, payload = read_container(path, ADVSET_MAGIC)
    shape = tuple(int(d) for d in header["shape"])
    (images,) = split_blobs(path, payload, [shape])
    labels = np.asarray(header["labels"], dtype=np.int64)
    if len(labels) != shape[0]:
        from .zoo import CheckpointFormatError

        raise CheckpointFormatError(f"{path}: {shape[0]} images but {len(labels)} labels")
    mpath = Path(path).with_suffix(".json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return images, labels, manifest


def linf(a, b) -> float:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return float(d.max()) if d.size else 0.0

