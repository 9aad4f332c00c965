"""Robustness sweeps, transfer benchmarks and their reports.

A transfer benchmark is built from surrogates only; target models are first
touched in :func:`eval_transfer_matrix`, so crafting never queries a target.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as at
from .datasets import BenchmarkSample, LabeledImageSet
from .zoo import TAGS, Classifier, predict_labels

DEFAULT_SWEEP = (1.0, 2.0, 3.0, 4.0, 5.0)
BENCHMARK_EPSILON = 16.0
MANIFEST_SCHEMA = 1
TRANSFER_COLUMNS = ("surrogate", "target", "surrogate_tag", "target_tag", "accuracy", "n")

# reference averages from the ImageNet-scale study, (surrogate tag, target tag)
REFERENCE_AGGREGATE = {
    ("AT", "AT"): 0.1316,
    ("AT", "ST"): 0.2658,
    ("ST", "AT"): 0.4809,
    ("ST", "ST"): 0.3288,
}


def default_pgd_spec() -> at.AttackSpec:
    return at.AttackSpec(epsilons=(1.0,), steps=20)


def default_mig_spec(epsilon: float = BENCHMARK_EPSILON) -> at.AttackSpec:
    # descending on the true-class logit attribution is what makes MIG an attack
    return at.AttackSpec(epsilons=(epsilon,), steps=20, momentum=1.0, ig_steps=20, update_sign="descend", scalar="logit")


def model_id(model: Classifier, fallback: str) -> str:
    return model.name or fallback


# ---------------------------------------------------------------------------
# robustness sweep


@dataclass
class RobustnessRow:
    model: str
    family: str
    tag: str | None
    n: int
    clean: float
    pgd: dict[float, float]
    mig: dict[float, float]


@dataclass
class RobustnessReport:
    epsilons: tuple[float, ...]
    rows: list[RobustnessRow]
    pgd_spec: dict
    mig_spec: dict

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons),
            "pgd_spec": self.pgd_spec,
            "mig_spec": self.mig_spec,
            "rows": [
                {
                    "model": r.model,
                    "family": r.family,
                    "tag": r.tag,
                    "n": r.n,
                    "clean": r.clean,
                    "pgd": {repr(e): v for e, v in r.pgd.items()},
                    "mig": {repr(e): v for e, v in r.mig.items()},
                }
                for r in self.rows
            ],
        }


def _accuracy(model: Classifier, images, labels) -> float:
    return float(np.mean(predict_labels(model, images) == labels))


def eval_robustness_sweep(
    model: Classifier,
    dataset: LabeledImageSet | BenchmarkSample,
    pgd_spec: at.AttackSpec | None = None,
    mig_spec: at.AttackSpec | None = None,
    epsilon_list=DEFAULT_SWEEP,
    name: str | None = None,
    threads: int = 1,
    mig: bool = True,
) -> RobustnessReport:
    """Clean accuracy, PGD accuracy per budget and clipped multi-budget MIG accuracy.

    PGD runs separately for every positive budget. MIG runs once on the
    largest budget and clips its trajectory for the smaller ones. A budget of
    0 is reported as clean accuracy.
    """
    eps = tuple(float(e) for e in epsilon_list)
    if not eps:
        raise ValueError("epsilon_list is empty")
    if any(b <= a for a, b in zip(eps, eps[1:])) or eps[0] < 0:
        raise ValueError("epsilon_list must be non-negative and strictly ascending")
    x, y = np.asarray(dataset.images), np.asarray(dataset.labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("robustness sweep needs a nonempty dataset")
    pgd_spec = pgd_spec or default_pgd_spec()
    mig_spec = mig_spec or default_mig_spec()
    positive = tuple(e for e in eps if e > 0)

    clean = _accuracy(model, x, y)
    pgd_acc = {0.0: clean} if 0.0 in eps else {}
    for e in positive:
        spec = at.AttackSpec(**{**pgd_spec.to_dict(), "epsilons": (e,)})
        out = at.pgd(model, x, y, spec, threads=threads)
        pgd_acc[e] = float(1.0 - out.success[0].mean())
    mig_acc = {0.0: clean} if 0.0 in eps else {}
    if mig and positive:
        spec = at.AttackSpec(**{**mig_spec.to_dict(), "epsilons": positive, "step_size": None})
        out = at.mig_multi_epsilon(model, x, y, spec, threads=threads)
        for e, s in zip(out.epsilons, out.success):
            mig_acc[e] = float(1.0 - s.mean())
    row = RobustnessRow(name or model_id(model, "model"), model.config.family, model.tag, len(y), clean, pgd_acc, mig_acc)
    return RobustnessReport(eps, [row], pgd_spec.to_dict(), mig_spec.to_dict())


def merge_reports(reports: list[RobustnessReport]) -> RobustnessReport:
    if not reports:
        raise ValueError("no reports to merge")
    first = reports[0]
    for r in reports[1:]:
        if r.epsilons != first.epsilons:
            raise ValueError("reports use different epsilon lists")
    return RobustnessReport(first.epsilons, [row for r in reports for row in r.rows], first.pgd_spec, first.mig_spec)


# ---------------------------------------------------------------------------
# transfer benchmark


@dataclass
class TransferBenchmark:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    epsilon: float
    adversarial: dict[str, np.ndarray]  # surrogate id -> images, same order as labels
    surrogate_meta: dict[str, dict]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _meta(model: Classifier) -> dict:
    return {"family": model.config.family, "tag": model.tag}


def build_transfer_benchmark(
    surrogates: dict[str, Classifier],
    clean_sample: BenchmarkSample | LabeledImageSet,
    epsilon: float = BENCHMARK_EPSILON,
    spec: at.AttackSpec | None = None,
    out_dir=None,
    threads: int = 1,
    seed: int | None = None,
) -> TransferBenchmark:
    """Craft one adversarial set per surrogate with single-budget MIG at ``epsilon``."""
    if not surrogates:
        raise ValueError("at least one surrogate is required")
    x = np.asarray(clean_sample.images, dtype=np.float32)
    y = np.asarray(clean_sample.labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("clean sample is empty")
    spec = spec or default_mig_spec(epsilon)
    spec = at.AttackSpec(**{**spec.to_dict(), "epsilons": (float(epsilon),)})
    classes = {m.config.num_classes for m in surrogates.values()}
    if len(classes) != 1:
        raise ValueError(f"surrogates disagree on class count: {sorted(classes)}")
    class_count = classes.pop()

    adversarial, meta = {}, {}
    for sid in sorted(surrogates):
        model = surrogates[sid]
        out = at.mig(model, x, y, spec, threads=threads)
        failed = [d for d in out.diagnostics if "non-finite" in d]
        if failed:
            raise RuntimeError(f"surrogate {sid}: attack failed: " + "; ".join(failed[:5]))
        adversarial[sid] = out.adversarials[0].astype(np.float32)
        meta[sid] = _meta(model)

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "epsilon": float(epsilon),
        "attack": "mig",
        "spec": spec.to_dict(),
        "n": int(len(y)),
        "class_count": int(class_count),
        "surrogates": {sid: meta[sid] for sid in sorted(meta)},
        "sample_seed": getattr(clean_sample, "seed", None),
        "seed": seed,
    }
    bench = TransferBenchmark(x, y, class_count, float(epsilon), adversarial, meta, manifest)
    if out_dir is not None:
        save_transfer_benchmark(bench, out_dir)
    return bench


def save_transfer_benchmark(bench: TransferBenchmark, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    at.save_adversarial_set(out / "clean.advs", bench.images, bench.labels, {"role": "clean"})
    files = {}
    for i, sid in enumerate(sorted(bench.adversarial)):
        fname = f"adv_{i:03d}.advs"
        files[sid] = fname
        m = {"role": "adversarial", "surrogate": sid, **bench.surrogate_meta[sid], "epsilon": bench.epsilon}
        at.save_adversarial_set(out / fname, bench.adversarial[sid], bench.labels, m, clean=bench.images)
    manifest = {**bench.manifest, "files": files}
    path = out / "benchmark.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_transfer_benchmark(out_dir) -> TransferBenchmark:
    out = Path(out_dir)
    manifest = json.loads((out / "benchmark.json").read_text())
    images, labels, _ = at.load_adversarial_set(out / "clean.advs")
    adversarial, meta = {}, {}
    for sid, fname in manifest["files"].items():
        adv, adv_labels, m = at.load_adversarial_set(out / fname)
        if not np.array_equal(adv_labels, labels):
            raise ValueError(f"{fname}: labels differ from the clean set")
        adversarial[sid] = adv
        meta[sid] = {"family": m.get("family"), "tag": m.get("tag")}
    manifest = {k: v for k, v in manifest.items() if k != "files"}
    return TransferBenchmark(images, labels, int(manifest["class_count"]), float(manifest["epsilon"]), adversarial, meta, manifest)


# ---------------------------------------------------------------------------
# transfer matrix


@dataclass
class TransferMatrix:
    surrogates: list[str]
    targets: list[str]
    accuracy: np.ndarray  # (surrogates, targets)
    n: np.ndarray
    clean: dict[str, float]  # target id -> clean accuracy on the benchmark images
    meta: dict[str, dict]  # model id -> {"family", "tag"}

    def __post_init__(self):
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        self.n = np.asarray(self.n, dtype=np.int64)
        shape = (len(self.surrogates), len(self.targets))
        if self.accuracy.shape != shape or self.n.shape != shape:
            raise ValueError(f"matrix shape must be {shape}")
        if self.accuracy.size and (self.accuracy.min() < 0 or self.accuracy.max() > 1):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def whitebox(self) -> np.ndarray:
        return np.array([[s == t for t in self.targets] for s in self.surrogates], dtype=bool)

    def cell(self, surrogate: str, target: str) -> float:
        return float(self.accuracy[self.surrogates.index(surrogate), self.targets.index(target)])

    def rows(self):
        wb = self.whitebox
        for i, s in enumerate(self.surrogates):
            for j, t in enumerate(self.targets):
                yield {
                    "surrogate": s,
                    "target": t,
                    "surrogate_tag": self.meta[s]["tag"],
                    "target_tag": self.meta[t]["tag"],
                    "accuracy": float(self.accuracy[i, j]),
                    "n": int(self.n[i, j]),
                    "whitebox": bool(wb[i, j]),
                }


def eval_transfer_matrix(bench: TransferBenchmark, targets: dict[str, Classifier], threads: int = 1) -> TransferMatrix:
    """Accuracy of every target on every surrogate's adversarial set."""
    if not targets:
        raise ValueError("at least one target is required")
    for tid, model in targets.items():
        if model.config.num_classes != bench.class_count:
            raise ValueError(
                f"target {tid} has {model.config.num_classes} classes, benchmark has {bench.class_count}"
            )
    sids = sorted(bench.adversarial)
    tids = sorted(targets)
    y = bench.labels

    def run(tid):
        model = targets[tid]
        clean = float(np.mean(predict_labels(model, bench.images) == y))
        col = [float(np.mean(predict_labels(model, bench.adversarial[s]) == y)) for s in sids]
        return clean, col

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tids))
    else:
        results = [run(t) for t in tids]
    acc = np.array([r[1] for r in results], dtype=np.float64).T.reshape(len(sids), len(tids))
    meta = {s: dict(bench.surrogate_meta[s]) for s in sids}
    for t in tids:
        meta[t] = _meta(targets[t])
    return TransferMatrix(
        sids, tids, acc, np.full(acc.shape, len(y)), {t: r[0] for t, r in zip(tids, results)}, meta
    )


# ---------------------------------------------------------------------------
# training-type aggregation


@dataclass
class AggregateMatrix:
    means: dict[tuple[str, str], float]  # (surrogate tag, target tag) -> mean accuracy
    counts: dict[tuple[str, str], int]
    exclude_diagonal: bool

    def mean(self, surrogate_tag: str, target_tag: str) -> float:
        return self.means[(surrogate_tag, target_tag)]

    def to_dict(self) -> dict:
        return {
            "exclude_diagonal": self.exclude_diagonal,
            "means": {f"{s}->{t}": _json_float(v) for (s, t), v in self.means.items()},
            "counts": {f"{s}->{t}": v for (s, t), v in self.counts.items()},
        }


def _json_float(v: float):
    return None if math.isnan(v) else v


def _cell_mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def aggregate_training_type(matrix: TransferMatrix, exclude_diagonal: bool = True) -> AggregateMatrix:
    """2x2 means of target accuracy grouped by surrogate and target training type."""
    for mid in list(matrix.surrogates) + list(matrix.targets):
        tag = matrix.meta.get(mid, {}).get("tag")
        if tag not in TAGS:
            raise ValueError(f"model {mid} is not tagged ST or AT (tag={tag!r})")
    cells: dict[tuple[str, str], list[float]] = {(a, b): [] for a in ("AT", "ST") for b in ("AT", "ST")}
    wb = matrix.whitebox
    for i, s in enumerate(matrix.surrogates):
        for j, t in enumerate(matrix.targets):
            if exclude_diagonal and wb[i, j]:
                continue
            cells[(matrix.meta[s]["tag"], matrix.meta[t]["tag"])].append(float(matrix.accuracy[i, j]))
    return AggregateMatrix(
        {k: _cell_mean(v) for k, v in cells.items()}, {k: len(v) for k, v in cells.items()}, exclude_diagonal
    )


def surrogate_tag_means(matrix: TransferMatrix, exclude_diagonal: bool = True) -> dict[str, float]:
    """Mean target accuracy per surrogate training type, over all targets."""
    wb = matrix.whitebox
    out = {}
    for tag in ("AT", "ST"):
        vals = [
            float(matrix.accuracy[i, j])
            for i, s in enumerate(matrix.surrogates)
            for j in range(len(matrix.targets))
            if matrix.meta[s]["tag"] == tag and not (exclude_diagonal and wb[i, j])
        ]
        out[tag] = _cell_mean(vals)
    return out


# ---------------------------------------------------------------------------
# export


def transfer_csv(matrix: TransferMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSFER_COLUMNS)
    for r in matrix.rows():
        w.writerow([r["surrogate"], r["target"], r["surrogate_tag"], r["target_tag"], repr(r["accuracy"]), r["n"]])
    return buf.getvalue()


def grid_csv(matrix: TransferMatrix) -> str:
    """Wide layout: one row per surrogate, one column per target."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["surrogate", *matrix.targets])
    for i, s in enumerate(matrix.surrogates):
        w.writerow([s, *(repr(float(v)) for v in matrix.accuracy[i])])
    return buf.getvalue()


def aggregate_csv(agg: AggregateMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["surrogate_tag", "AT", "ST"])
    for s in ("AT", "ST"):
        w.writerow([s, repr(agg.means[(s, "AT")]), repr(agg.means[(s, "ST")])])
    return buf.getvalue()


def robustness_csv(report: RobustnessReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    eps = report.epsilons
    w.writerow(["model", "family", "tag", "n", "clean", *(f"pgd_{e:g}" for e in eps), *(f"mig_{e:g}" for e in eps)])
    for r in report.rows:
        cols = [repr(r.pgd[e]) if e in r.pgd else "" for e in eps]
        cols += [repr(r.mig[e]) if e in r.mig else "" for e in eps]
        w.writerow([r.model, r.family, r.tag or "", r.n, repr(r.clean), *cols])
    return buf.getvalue()


def aggregate_from_csv(text: str, exclude_diagonal: bool = True) -> dict[tuple[str, str], float]:
    """Recompute the 2x2 means from :func:`transfer_csv` output."""
    cells: dict[tuple[str, str], list[float]] = {(a, b): [] for a in ("AT", "ST") for b in ("AT", "ST")}
    for r in csv.DictReader(io.StringIO(text)):
        if exclude_diagonal and r["surrogate"] == r["target"]:
            continue
        cells[(r["surrogate_tag"], r["target_tag"])].append(float(r["accuracy"]))
    return {k: _cell_mean(v) for k, v in cells.items()}


def heat_color(value: float) -> str:
    """Linear ramp: 0 -> pure blue, 1 -> white."""
    v = min(max(float(value), 0.0), 1.0)
    c = int(round(255 * v))
    return f"#{c:02x}{c:02x}ff"


def heatmap_svg(matrix: TransferMatrix, cell: int = 48) -> str:
    ns, nt = matrix.accuracy.shape
    left, top = 140, 120
    width, height = left + nt * cell + 10, top + ns * cell + 10
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        '<g font-family="monospace" font-size="10">',
    ]
    for j, t in enumerate(matrix.targets):
        x = left + j * cell + cell // 2
        out.append(f'<text x="{x}" y="{top - 6}" transform="rotate(-60 {x} {top - 6})">{_xml(t)}</text>')
    for i, s in enumerate(matrix.surrogates):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell // 2 + 3}" text-anchor="end">{_xml(s)}</text>')
        for j in range(nt):
            v = float(matrix.accuracy[i, j])
            x = left + j * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{heat_color(v)}" stroke="#808080"/>')
            out.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 3}" text-anchor="middle">{100 * v:.1f}</text>')
    out += ["</g>", "</svg>", ""]
    return "\n".join(out)


def _xml(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def attribution_pgm(attribution: np.ndarray) -> bytes:
    """Binary P5 grayscale map of one attribution image (H, W[, C]).

    Channels are summed; values are scaled symmetrically so 0 maps to 128 and
    the largest magnitude to 1 or 255.
    """
    a = np.asarray(attribution, dtype=np.float64)
    if a.ndim == 3:
        a = a.sum(axis=2)
    if a.ndim != 2:
        raise ValueError("attribution must be (H, W) or (H, W, C)")
    peak = np.abs(a).max()
    scaled = a / peak if peak > 0 else np.zeros_like(a)
    pix = np.clip(np.round(128 + 127 * scaled), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _write(path: Path, text: str) -> Path:
    path.write_text(text, newline="")
    return path


def export_reports(
    out_dir,
    matrix: TransferMatrix | None = None,
    robustness: RobustnessReport | None = None,
    attributions: dict[str, np.ndarray] | None = None,
    manifest: dict | None = None,
    exclude_diagonal: bool = True,
) -> list[Path]:
    """Write CSV tables, a JSON manifest, an SVG heatmap and PGM attribution maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary: dict = {"schema": MANIFEST_SCHEMA, **(manifest or {})}
    if matrix is not None:
        written.append(_write(out / "transfer.csv", transfer_csv(matrix)))
        written.append(_write(out / "transfer_grid.csv", grid_csv(matrix)))
        written.append(_write(out / "heatmap.svg", heatmap_svg(matrix)))
        summary["transfer"] = {
            "surrogates": matrix.surrogates,
            "targets": matrix.targets,
            "clean": {t: matrix.clean[t] for t in matrix.targets},
            "meta": {k: matrix.meta[k] for k in sorted(matrix.meta)},
        }
        if all(matrix.meta[m].get("tag") in TAGS for m in matrix.meta):
            agg = aggregate_training_type(matrix, exclude_diagonal)
            written.append(_write(out / "aggregate.csv", aggregate_csv(agg)))
            summary["aggregate"] = agg.to_dict()
            summary["surrogate_means"] = {
                k: _json_float(v) for k, v in surrogate_tag_means(matrix, exclude_diagonal).items()
            }
    if robustness is not None:
        written.append(_write(out / "robustness.csv", robustness_csv(robustness)))
        summary["robustness"] = robustness.to_dict()
    if attributions:
        adir = out / "attributions"
        adir.mkdir(exist_ok=True)
        for key in sorted(attributions):
            p = adir / f"{key}.pgm"
            p.write_bytes(attribution_pgm(attributions[key]))
            written.append(p)
    written.append(_write(out / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    return written
