"""``advlab`` command line.

    advlab <command> --config run.json [--seed S] [--threads N] [--out DIR]

Commands: train, eval, attack, bench build, bench run, report.

Every run is fully determined by (config, seed). Relative paths inside the
config are resolved against the config file's directory. Each command writes
``manifest.json`` echoing the effective config, the seed and the per-stage
seeds; it carries no timestamps or output paths, so two identical runs give
byte-identical artifacts (with ``--threads 1``).

Per-stage seeds come from ``SeedSequence([seed, STAGES[stage]])``, so any
stage can be re-run on its own.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import attacks as at
from . import bench
from . import datasets as ds
from . import train as tr
from . import zoo

COMMANDS = ("train", "eval", "attack", "bench build", "bench run", "report")
STAGES = {"data": 0, "split": 1, "init": 2, "train": 3, "sample": 4}
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGES[stage]]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# config schema


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=False)


class PreprocessBlock(_Block):
    offset: float = 127.5
    scale: float = Field(127.5, gt=0)


class ModelBlock(_Block):
    family: Literal["mlp", "small-cnn-a", "small-cnn-b-residual", "tiny-vit"] = "small-cnn-a"
    name: str | None = None
    input_shape: tuple[int, int, int] = (28, 28, 1)
    num_classes: int = Field(10, ge=2)
    hidden: tuple[int, ...] = (64,)
    channels: tuple[int, ...] = (16, 32)
    patch: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    dtype: Literal["float32", "float64"] = "float32"
    preprocess: PreprocessBlock = PreprocessBlock()

    def build(self, seed: int) -> zoo.Classifier:
        cfg = zoo.ModelConfig(
            family=self.family,
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            hidden=self.hidden,
            channels=self.channels,
            patch=self.patch,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
        )
        pre = zoo.PreprocessSpec(self.preprocess.offset, self.preprocess.scale)
        return zoo.build_classifier(cfg, seed, preprocess=pre, dtype=np.dtype(self.dtype), name=self.name)


class SynthBlock(_Block):
    class_count: int = Field(10, ge=1)
    per_class: int = Field(100, ge=1)
    resolution: int = Field(28, ge=1)
    channels: int = Field(1, ge=1)
    blobs_per_class: int = Field(3, ge=1)
    noise: float = Field(16.0, ge=0)
    texture: float = Field(0.0, ge=0)
    jitter: float = Field(0.0, ge=0)
    amplitude: float = 90.0
    confusion: float = Field(0.0, ge=0)
    texture_band: tuple[float, float] = (0.6, 1.4)


class DatasetBlock(_Block):
    kind: Literal["synth", "idx", "cifar"] = "synth"
    synth: SynthBlock = SynthBlock()
    images: str | None = None  # idx image file
    labels: str | None = None  # idx label file
    paths: list[str] = []  # cifar binary batches
    class_count: int = Field(10, ge=1)
    seed: int | None = None  # overrides the derived data seed
    val_fraction: float = Field(0.2, gt=0, lt=1)
    split: Literal["train", "val", "all"] = "val"  # the part eval/attack/bench use
    limit: int | None = Field(None, ge=1)


class FreeATBlock(_Block):
    replay: int = Field(4, ge=1)
    epsilon: float = Field(2.0, ge=0)
    step_size: float = Field(0.6, gt=0)


class TrainBlock(_Block):
    optimizer: Literal["sgd", "adam"] = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    global_clipnorm: float | None = None
    schedule: Literal["exponential", "cosine"] = "exponential"
    initial_lr: float = 0.1
    decay_steps: int = Field(1000, ge=1)
    decay_rate: float = 0.1
    staircase: bool = True
    warmup_steps: int = Field(0, ge=0)
    warmup_target: float | None = None
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(10, ge=0)
    patience: int = Field(5, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    free_at: FreeATBlock | None = None

    def build(self) -> tr.TrainConfig:
        d = self.model_dump()
        return tr.TrainConfig(**d)


class AttackBlock(_Block):
    method: Literal["pgd", "mig", "mig_multi", "ig"] = "mig"
    epsilons: list[float] = [16.0]
    steps: int = Field(20, ge=0)
    step_size: float | None = None
    momentum: float = Field(1.0, ge=0)
    ig_steps: int = Field(20, ge=1)
    baseline: float = 0.0
    update_sign: Literal["ascend", "descend"] = "descend"
    scalar: Literal["loss", "logit", "prob"] = "logit"
    checkpoint: str | None = None
    chunk: int = Field(8, ge=1)

    def spec(self, epsilons=None) -> at.AttackSpec:
        return at.AttackSpec(
            epsilons=tuple(epsilons if epsilons is not None else self.epsilons),
            steps=self.steps,
            step_size=self.step_size,
            momentum=self.momentum,
            ig_steps=self.ig_steps,
            baseline=self.baseline,
            update_sign=self.update_sign,
            scalar=self.scalar,
        )


class EvalBlock(_Block):
    checkpoint: str | None = None  # None: a freshly initialised model from the model block
    epsilons: list[float] = list(bench.DEFAULT_SWEEP)
    pgd_steps: int = Field(20, ge=0)
    mig: bool = True

    @field_validator("epsilons")
    @classmethod
    def _ascending(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 0:
            raise ValueError("epsilons must be a nonempty, non-negative, strictly ascending list")
        return v


class BenchBlock(_Block):
    epsilon: float = Field(bench.BENCHMARK_EPSILON, gt=0)
    k_per_class: int = Field(2, ge=1)
    surrogates: dict[str, str] = {}  # id -> checkpoint
    targets: dict[str, str] = {}  # id -> checkpoint
    benchmark: str | None = None  # directory written by `bench build`
    exclude_diagonal: bool = True


class ReportBlock(_Block):
    matrix: str | None = None  # matrix.json written by `bench run`
    robustness: list[str] = []  # report.json files written by `eval`


class RunConfig(_Block):
    model: ModelBlock = ModelBlock()
    dataset: DatasetBlock = DatasetBlock()
    train: TrainBlock = TrainBlock()
    attack: AttackBlock = AttackBlock()
    eval: EvalBlock = EvalBlock()
    bench: BenchBlock = BenchBlock()
    report: ReportBlock = ReportBlock()
    seed: int = 0


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def parse_config(source) -> RunConfig:
    """Parse a JSON config from a path, a JSON string or a dict. Unknown keys are fatal."""
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            path = Path(text)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            text = path.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def dump_config(cfg: RunConfig) -> dict:
    return json.loads(cfg.model_dump_json())


# ---------------------------------------------------------------------------
# helpers


class _Ctx:
    def __init__(self, cfg: RunConfig, base: Path, out: Path, threads: int, command: str):
        self.cfg = cfg
        self.base = base
        self.out = out
        self.threads = threads
        self.command = command
        self.seed = cfg.seed

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base / q

    def manifest(self, **extra) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "command": self.command,
            "seed": self.seed,
            "stage_seeds": {k: stage_seed(self.seed, k) for k in STAGES},
            "config": dump_config(self.cfg),
            **extra,
        }

    def write_json(self, name: str, body: dict) -> Path:
        p = self.out / name
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return p


def load_dataset(ctx: _Ctx) -> tuple[ds.LabeledImageSet, ds.LabeledImageSet]:
    d = ctx.cfg.dataset
    if d.kind == "synth":
        seed = d.seed if d.seed is not None else stage_seed(ctx.seed, "data")
        data = ds.synth_blobs(seed=seed, **d.synth.model_dump())
    elif d.kind == "idx":
        if not d.images or not d.labels:
            raise ConfigError("dataset.images and dataset.labels are required for kind 'idx'")
        data = ds.load_idx(ctx.path(d.images), ctx.path(d.labels))
    else:
        if not d.paths:
            raise ConfigError("dataset.paths is required for kind 'cifar'")
        data = ds.load_cifar_binary([ctx.path(p) for p in d.paths], d.class_count)
    return data.split(d.val_fraction, stage_seed(ctx.seed, "split"))


def eval_split(ctx: _Ctx) -> ds.LabeledImageSet:
    trn, val = load_dataset(ctx)
    d = ctx.cfg.dataset
    part = {"train": trn, "val": val}.get(d.split)
    if part is None:
        part = ds.LabeledImageSet(
            np.concatenate([trn.images, val.images]), np.concatenate([trn.labels, val.labels]), trn.class_count
        )
    if d.limit is not None:
        part = part.subset(np.arange(min(d.limit, len(part))))
    return part


def load_model(ctx: _Ctx, checkpoint: str | None) -> zoo.Classifier:
    if checkpoint is None:
        return ctx.cfg.model.build(stage_seed(ctx.seed, "init"))
    return zoo.load_checkpoint(ctx.path(checkpoint))


# ---------------------------------------------------------------------------
# commands


def cmd_train(ctx: _Ctx) -> None:
    trn, val = load_dataset(ctx)
    model = ctx.cfg.model.build(stage_seed(ctx.seed, "init"))
    config = ctx.cfg.train.build()
    fn = tr.train_standard if config.free_at is None else tr.train_free_at
    result = fn(model, trn, val, config, seed=stage_seed(ctx.seed, "train"))
    if result.model.name is None:
        result.model.name = f"{result.model.config.family}-{result.model.tag}"
    zoo.save_checkpoint(result.model, ctx.out / "model.advz")
    tr.write_run_artifacts(ctx.out, result, {"name": result.model.name})
    ctx.write_json("manifest.json", ctx.manifest(tag=result.model.tag, name=result.model.name))


def cmd_eval(ctx: _Ctx) -> None:
    e = ctx.cfg.eval
    model = load_model(ctx, e.checkpoint)
    data = eval_split(ctx)
    pgd_spec = at.AttackSpec(epsilons=(1.0,), steps=e.pgd_steps)
    top = max(e.epsilons)
    mig_spec = ctx.cfg.attack.spec([top if top > 0 else 1.0])
    report = bench.eval_robustness_sweep(
        model, data, pgd_spec, mig_spec, e.epsilons, name=model.name, threads=ctx.threads, mig=e.mig
    )
    bench.export_reports(ctx.out, robustness=report)
    ctx.write_json("manifest.json", ctx.manifest(n=len(data)))


def cmd_attack(ctx: _Ctx) -> None:
    a = ctx.cfg.attack
    model = load_model(ctx, a.checkpoint)
    data = eval_split(ctx)
    x, y = data.images, data.labels
    summary: dict = {"method": a.method, "n": len(y)}
    if a.method == "ig":
        attr = at.integrated_gradients(model, x, y, a.baseline, a.ig_steps, a.scalar, chunk=a.chunk)
        bench.export_reports(ctx.out, attributions={f"ig_{i:05d}": attr[i] for i in range(len(y))})
        summary["attribution_l1"] = [float(np.abs(v).sum()) for v in attr]
    else:
        spec = a.spec()
        if a.method == "pgd":
            outs = [at.pgd(model, x, y, a.spec([eps]), threads=ctx.threads) for eps in spec.epsilons]
            results = [(o.epsilons[0], o.adversarials[0], o.diagnostics) for o in outs]
        elif a.method == "mig":
            outs = [at.mig(model, x, y, a.spec([eps]), chunk=a.chunk, threads=ctx.threads) for eps in spec.epsilons]
            results = [(o.epsilons[0], o.adversarials[0], o.diagnostics) for o in outs]
        else:
            o = at.mig_multi_epsilon(model, x, y, spec, chunk=a.chunk, threads=ctx.threads)
            results = [(e, adv, o.diagnostics) for e, adv in zip(o.epsilons, o.adversarials)]
        summary["results"] = []
        for eps, adv, diags in results:
            rep = at.success_rate(model, adv, y)
            fname = f"adv_eps{eps:g}.advs"
            at.save_adversarial_set(
                ctx.out / fname, adv, y, {"method": a.method, "epsilon": eps, "spec": a.spec([eps]).to_dict()}, clean=x
            )
            summary["results"].append(
                {"epsilon": eps, "accuracy": rep.accuracy, "success": rep.success, "file": fname, "diagnostics": diags}
            )
    ctx.write_json("attack.json", summary)
    ctx.write_json("manifest.json", ctx.manifest())


def _load_models(ctx: _Ctx, mapping: dict[str, str]) -> dict[str, zoo.Classifier]:
    return {k: zoo.load_checkpoint(ctx.path(v)) for k, v in sorted(mapping.items())}


def cmd_bench_build(ctx: _Ctx) -> None:
    b = ctx.cfg.bench
    if not b.surrogates:
        raise ConfigError("bench.surrogates: at least one surrogate checkpoint is required")
    surrogates = _load_models(ctx, b.surrogates)
    data = eval_split(ctx)
    sample = ds.sample_benchmark(data, b.k_per_class, stage_seed(ctx.seed, "sample"))
    spec = ctx.cfg.attack.spec([b.epsilon])
    bench.build_transfer_benchmark(surrogates, sample, b.epsilon, spec, out_dir=ctx.out, threads=ctx.threads, seed=ctx.seed)
    ctx.write_json("manifest.json", ctx.manifest())


def matrix_to_dict(m: bench.TransferMatrix) -> dict:
    return {
        "surrogates": m.surrogates,
        "targets": m.targets,
        "accuracy": m.accuracy.tolist(),
        "n": m.n.tolist(),
        "clean": m.clean,
        "meta": m.meta,
    }


def matrix_from_dict(d: dict) -> bench.TransferMatrix:
    return bench.TransferMatrix(d["surrogates"], d["targets"], np.array(d["accuracy"]), np.array(d["n"]), d["clean"], d["meta"])


def cmd_bench_run(ctx: _Ctx) -> None:
    b = ctx.cfg.bench
    if not b.targets:
        raise ConfigError("bench.targets: at least one target checkpoint is required")
    if b.benchmark is None:
        raise ConfigError("bench.benchmark: path to a `bench build` output directory is required")
    benchmark = bench.load_transfer_benchmark(ctx.path(b.benchmark))
    targets = _load_models(ctx, b.targets)
    matrix = bench.eval_transfer_matrix(benchmark, targets, threads=ctx.threads)
    ctx.write_json("matrix.json", matrix_to_dict(matrix))
    bench.export_reports(ctx.out, matrix=matrix, exclude_diagonal=b.exclude_diagonal)
    ctx.write_json("manifest.json", ctx.manifest(benchmark=benchmark.manifest))


def cmd_report(ctx: _Ctx) -> None:
    r = ctx.cfg.report
    if r.matrix is None and not r.robustness:
        raise ConfigError("report: give report.matrix and/or report.robustness")
    matrix = matrix_from_dict(json.loads(ctx.path(r.matrix).read_text())) if r.matrix else None
    robustness = None
    if r.robustness:
        parts = []
        for p in r.robustness:
            body = json.loads(ctx.path(p).read_text())["robustness"]
            rows = [
                bench.RobustnessRow(
                    row["model"], row["family"], row["tag"], row["n"], row["clean"],
                    {float(k): v for k, v in row["pgd"].items()}, {float(k): v for k, v in row["mig"].items()},
                )
                for row in body["rows"]
            ]
            parts.append(bench.RobustnessReport(tuple(body["epsilons"]), rows, body["pgd_spec"], body["mig_spec"]))
        robustness = bench.merge_reports(parts)
    bench.export_reports(ctx.out, matrix=matrix, robustness=robustness, exclude_diagonal=ctx.cfg.bench.exclude_diagonal)
    ctx.write_json("manifest.json", ctx.manifest())


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "bench build": cmd_bench_build,
    "bench run": cmd_bench_run,
    "report": cmd_report,
}


def run_command(command: str, cfg: RunConfig, out, base=".", threads: int = 1) -> int:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    out = Path(out)
    ctx = _Ctx(cfg, Path(base), out, threads, command)
    # cheap validation first, so degenerate runs fail before any compute
    if command == "bench run" and not cfg.bench.targets:
        raise ConfigError("bench.targets: at least one target checkpoint is required")
    if command == "bench build" and not cfg.bench.surrogates:
        raise ConfigError("bench.surrogates: at least one surrogate checkpoint is required")
    out.mkdir(parents=True, exist_ok=True)
    HANDLERS[command](ctx)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advlab", description="Adversarial robustness laboratory.")
    p.add_argument("command", nargs="+", help="train | eval | attack | bench build | bench run | report")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-image attack work")
    p.add_argument("--out", default="out", help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = " ".join(args.command)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        return run_command(command, cfg, args.out, base=Path(args.config).parent, threads=args.threads)
    except ConfigError as e:
        print(f"advlab: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any module error with context and exit nonzero
        print(f"advlab {command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
