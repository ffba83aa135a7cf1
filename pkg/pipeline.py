#!/usr/bin/env python3
"""
pipeline.py

Experiment orchestration on the desk-scale shapes bench:

  prepare_bench     data splits, toy G_s / H_s, source classifiers (cached on disk)
  run_trial         one (task, domain, seed): source-only, single-shot SiSTA
                    (invert -> finetune -> curate -> adapt -> evaluate) per
                    strategy, and the full-target NRC reference
  run_experiment    all trials + ResultTable (mean / std over seeds)
  run_sweep         one experiment per value of p or T, reusing fine-tuned generators
  emit_report       results_table.json, summary.md, per-domain plots

Stage progress goes to the run ledger (run_ledger.py) so failed runs can be
inspected; a failing stage raises StageError naming it and leaves the trial
directory in place.
"""

import json
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from rich.table import Table
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from sista_common import (
    QUIET,
    TRIAL_MODE_DEFAULT,
    USE_POSTGRES,
    ConfigurationError,
    ContractViolation,
    NonFiniteLossError,
    StageError,
    console,
    is_finite,
    resolve_device,
    torch_generator,
)
from stylegen import (
    DiscriminatorHandle,
    GeneratorHandle,
    StyleLayerSet,
    build_toy_discriminator,
    build_toy_generator,
    load_checkpoint,
    save_checkpoint,
)
from inversion import InversionConfig, invert
from finetune import FinetuneConfig, per_class_finetune, sista_g_finetune, sista_u_finetune
from sampler import PruneConfig, SyntheticManifest, curate_dataset
from adapt import ClassifierHandle, NRCConfig, adapt_classifier, build_classifier, evaluate, load_classifier, save_classifier
from shiftlab import ShiftConfig, build_target_split
from toybench import ATTRIBUTES, ImageSet, PretrainConfig, SingleShotAccess, make_shapes, pretrain_toy_generator
from run_ledger import get_engine_and_session, log_stage

RESULTS_FILE = "results_table.json"
TRIAL_RESULT_FILE = "trial_result.json"
RESOLVED_CONFIG_FILE = "resolved_config.json"
SUMMARY_FILE = "summary.md"
SOURCE_ONLY = "source-only"
FULL_TARGET = "full-target-da"
SANDWICH_SLACK = 3.0


# -----------------------------
# Config
# -----------------------------
class TaskConfig(BaseModel):
    kind: Literal["multi-class", "binary-attribute"] = "multi-class"
    attribute: Optional[str] = None

    @model_validator(mode="after")
    def _attribute(self):
        if self.kind == "binary-attribute" and self.attribute not in ATTRIBUTES:
            raise ValueError(f"binary-attribute task needs attribute in {ATTRIBUTES}")
        if self.kind == "multi-class" and self.attribute is not None:
            raise ValueError("multi-class task takes no attribute")
        return self

    @property
    def name(self) -> str:
        return "shape" if self.kind == "multi-class" else self.attribute


class SourceTrainConfig(BaseModel):
    epochs: int = Field(30, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(64, ge=1)
    seed: int = 0


class BenchConfig(BaseModel):
    source_train: int = Field(1500, ge=1)
    source_test: int = Field(500, ge=1)
    target_train: int = Field(1000, ge=1)
    target_test: int = Field(500, ge=1)
    data_seed: int = 0
    model_seed: int = 0
    pretrain: PretrainConfig = PretrainConfig()


class ExperimentConfig(BaseModel):
    name: str = "sista"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    tasks: List[TaskConfig] = Field(default_factory=lambda: [TaskConfig()])
    generator_mode: Literal["single", "conditional", "per-class"] = "single"
    strategy: Literal["base", "prune-zero", "prune-rewind"] = "prune-zero"
    strategies: Optional[List[Literal["base", "prune-zero", "prune-rewind"]]] = None
    ratio: Optional[float] = Field(None, ge=0.0, le=100.0)
    T: int = Field(1000, ge=1)
    gate_probability: float = Field(0.5, ge=0.0, le=1.0)
    # overrides both finetune.style_layers and the sampler's style layers when set
    style_layers: Optional[StyleLayerSet] = None
    truncation_psi: float = Field(1.0, gt=0.0, le=1.0)
    inversion: InversionConfig = InversionConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    nrc: NRCConfig = NRCConfig()
    source: SourceTrainConfig = SourceTrainConfig()
    shifts: List[ShiftConfig] = Field(default_factory=lambda: [ShiftConfig(domain="C")])
    example_classes: Optional[List[int]] = None
    include_full_target: bool = True
    bench_dir: str = "toy_bench"
    bench: BenchConfig = BenchConfig()
    auto_prepare: bool = True
    output_dir: str = "runs/sista"
    trial_mode: Literal["inline", "enqueue"] = TRIAL_MODE_DEFAULT
    curation_workers: int = Field(1, ge=1)
    use_postgres: bool = False

    @field_validator("style_layers", mode="before")
    @classmethod
    def _layers(cls, v):
        if isinstance(v, (str, list, tuple)):
            return StyleLayerSet.parse(v)
        return v

    @model_validator(mode="after")
    def _check(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.tasks or not self.shifts:
            raise ValueError("tasks and shifts must be non-empty")
        if self.example_classes is not None and self.generator_mode == "single":
            raise ValueError("example_classes only applies to conditional / per-class modes")
        if self.style_layers is not None:
            self.finetune = self.finetune.model_copy(update={"style_layers": self.style_layers})
        return self

    def strategy_list(self) -> List[str]:
        out = []
        for s in self.strategies or [self.strategy]:
            if s != "base" and s not in out:
                out.append(s)
        return out

    def prune_config(self, strategy: str, seed: int) -> PruneConfig:
        return PruneConfig(
            strategy=strategy,
            ratio=None if strategy == "base" else self.ratio,
            style_layers=self.style_layers if self.style_layers is not None else self.finetune.style_layers,
            gate_probability=self.gate_probability,
            seed=seed,
            truncation_psi=self.truncation_psi,
        )


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        return ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config {path}:\n{e}") from e


# -----------------------------
# Results
# -----------------------------
class TrialResult(BaseModel):
    task: str
    domain: str
    seed: int
    accuracies: Dict[str, float]
    manifest_hashes: Dict[str, str] = Field(default_factory=dict)
    single_shot_reads: Dict[str, int] = Field(default_factory=dict)


class ResultRow(BaseModel):
    method: str
    domain: str
    task: str
    mean: float
    std: float = Field(ge=0.0)
    trials: List[float] = Field(default_factory=list)


def _method_rank(method: str) -> Tuple[int, str]:
    if method == SOURCE_ONLY:
        return 0, method
    if method == "sista-base":
        return 1, method
    if method == FULL_TARGET:
        return 3, method
    return 2, method


class ResultTable(BaseModel):
    rows: List[ResultRow] = Field(default_factory=list)

    @classmethod
    def from_trials(cls, trials: List[TrialResult]) -> "ResultTable":
        cells: Dict[Tuple[str, str, str], List[Tuple[int, float]]] = {}
        for t in trials:
            for method, acc in t.accuracies.items():
                cells.setdefault((method, t.domain, t.task), []).append((t.seed, acc))
        rows = []
        for (method, domain, task), vals in cells.items():
            accs = [a for _, a in sorted(vals)]
            rows.append(ResultRow(method=method, domain=domain, task=task, mean=float(np.mean(accs)), std=float(np.std(accs)), trials=accs))
        rows.sort(key=lambda r: (r.task, r.domain, _method_rank(r.method)))
        return cls(rows=rows)

    def methods(self) -> List[str]:
        return sorted({r.method for r in self.rows}, key=_method_rank)

    def cell(self, method: str, domain: str, task: str) -> ResultRow:
        for r in self.rows:
            if (r.method, r.domain, r.task) == (method, domain, task):
                return r
        raise KeyError((method, domain, task))

    def task_averages(self) -> Dict[Tuple[str, str], float]:
        """(method, domain) -> mean accuracy averaged across tasks."""
        acc: Dict[Tuple[str, str], List[float]] = {}
        for r in self.rows:
            acc.setdefault((r.method, r.domain), []).append(r.mean)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


def load_table(path) -> Union[ResultTable, Dict[str, ResultTable]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "rows" in doc:
        return ResultTable.model_validate(doc)
    return {name: ResultTable.model_validate(t) for name, t in doc["tables"].items()}


# -----------------------------
# Source classifier
# -----------------------------
def train_source_classifier(dataset: Dataset, num_classes: int, cfg: Optional[SourceTrainConfig] = None, device=None) -> Tuple[ClassifierHandle, List[float]]:
    """Adam on a labeled (x, y) dataset; returns (classifier, per-epoch mean loss)."""
    cfg = cfg or SourceTrainConfig()
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    model = build_classifier(num_classes, seed=cfg.seed, device=device)
    if cfg.epochs == 0:
        return model, []
    opt = torch.optim.Adam(model.module.parameters(), lr=cfg.learning_rate)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=torch_generator(cfg.seed))
    curve = []
    model.module.train()
    for epoch in tqdm(range(cfg.epochs), desc="train F_s", leave=False, disable=QUIET):
        total, seen = 0.0, 0
        for x, y in loader:
            loss = F.cross_entropy(model.logits(x), y.to(model.device))
            if not is_finite(loss):
                raise NonFiniteLossError(f"source training diverged in epoch {epoch}", where=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(x)
            seen += len(x)
        curve.append(total / seen)
    model.module.eval()
    return model, curve


# -----------------------------
# Bench
# -----------------------------
@dataclass
class Bench:
    """On-disk toy bench: clean splits plus source-side checkpoints."""

    root: Path
    device: torch.device = field(default_factory=resolve_device)
    _cache: Dict = field(default_factory=dict)

    def split_dir(self, split: str) -> Path:
        return self.root / "data" / split

    def discriminator_path(self) -> Path:
        return self.root / "discriminator.pt"

    def generator_path(self, task: str, mode: str, cls: Optional[int] = None) -> Path:
        if mode == "single":
            return self.root / "generator_single.pt"
        if mode == "conditional":
            return self.root / task / "generator_conditional.pt"
        return self.root / task / f"generator_class_{cls}.pt"

    def classifier_path(self, task: str) -> Path:
        return self.root / task / "classifier.pt"

    def split(self, name: str) -> ImageSet:
        key = ("split", name)
        if key not in self._cache:
            self._cache[key] = ImageSet.load(self.split_dir(name))
        return self._cache[key]

    def discriminator(self) -> DiscriminatorHandle:
        key = ("disc",)
        if key not in self._cache:
            self._cache[key] = load_checkpoint(self.discriminator_path(), device=self.device, kind="discriminator")
        return self._cache[key]

    def generator(self, task: str, mode: str, cls: Optional[int] = None) -> GeneratorHandle:
        key = ("gen", task, mode, cls)
        if key not in self._cache:
            self._cache[key] = load_checkpoint(self.generator_path(task, mode, cls), device=self.device, kind="generator")
        return self._cache[key]

    def classifier(self, task: str) -> ClassifierHandle:
        key = ("clf", task)
        if key not in self._cache:
            self._cache[key] = load_classifier(self.classifier_path(task), device=self.device)
        return self._cache[key]

    def required_paths(self, cfg: ExperimentConfig) -> List[Path]:
        paths = [self.split_dir(s) for s in ("source_train", "source_test", "target_train", "target_test")]
        paths.append(self.discriminator_path())
        for task in cfg.tasks:
            paths.append(self.classifier_path(task.name))
            if cfg.generator_mode == "per-class":
                paths.extend(self.generator_path(task.name, "per-class", c) for c in _task_classes(task))
            else:
                paths.append(self.generator_path(task.name, cfg.generator_mode))
        return paths


def _task_classes(task: TaskConfig) -> List[int]:
    return list(range(3 if task.kind == "multi-class" else 2))


def prepare_bench(cfg: ExperimentConfig) -> Bench:
    """Build every bench artifact `cfg` needs that is not on disk yet. Deterministic."""
    bench = Bench(root=Path(cfg.bench_dir))
    bc = cfg.bench
    if not (bench.split_dir("target_test") / "labels.json").exists():
        total = bc.source_train + bc.source_test + bc.target_train + bc.target_test
        console.print(f"[+] generating {total} shapes (seed {bc.data_seed})")
        shapes = make_shapes(total, seed=bc.data_seed)
        parts = shapes.split([bc.source_train, bc.source_test, bc.target_train, bc.target_test], seed=bc.data_seed)
        for name, part in zip(("source_train", "source_test", "target_train", "target_test"), parts):
            part.save(bench.split_dir(name))

    if not bench.discriminator_path().exists():
        save_checkpoint(build_toy_discriminator(seed=bc.model_seed), bench.discriminator_path())
    disc = bench.discriminator()
    train = bench.split("source_train")

    def fit(path: Path, data: ImageSet, num_classes: Optional[int], task: str):
        if path.exists():
            return
        console.print(f"[+] pre-training toy generator -> {path}")
        gen = build_toy_generator(seed=bc.model_seed, num_classes=num_classes, device=bench.device)
        trained, _ = pretrain_toy_generator(data, gen, disc, bc.pretrain.model_copy(update={"task": task}))
        save_checkpoint(trained, path)

    for task in cfg.tasks:
        if cfg.generator_mode == "single":
            fit(bench.generator_path(task.name, "single"), train, None, "shape")
        elif cfg.generator_mode == "conditional":
            fit(bench.generator_path(task.name, "conditional"), train, len(_task_classes(task)), task.name)
        else:
            labels = train.task_labels(task.name)
            for c in _task_classes(task):
                fit(bench.generator_path(task.name, "per-class", c), train.subset(np.nonzero(labels == c)[0]), None, task.name)

        clf_path = bench.classifier_path(task.name)
        if not clf_path.exists():
            console.print(f"[+] training source classifier for task '{task.name}'")
            model, curve = train_source_classifier(train.as_labeled_dataset(task.name), len(_task_classes(task)), cfg.source, device=bench.device)
            save_classifier(model, clf_path)
            acc = evaluate(model, bench.split("source_test").as_labeled_dataset(task.name))
            console.print(f"[+] source accuracy on '{task.name}': {acc:.2f}%")
    return bench


# -----------------------------
# Trials
# -----------------------------
@dataclass
class RunContext:
    """State shared across trials of one experiment or sweep."""

    bench: Bench
    session: Optional[object] = None
    domains: Dict[str, Tuple[ImageSet, ImageSet]] = field(default_factory=dict)
    generators: Dict[Tuple, Tuple[object, object, Dict[str, int]]] = field(default_factory=dict)
    baselines: Dict[Tuple, Dict[str, float]] = field(default_factory=dict)

    def target_domain(self, shift: ShiftConfig) -> Tuple[ImageSet, ImageSet]:
        label = shift.label()
        if label not in self.domains:
            train, _ = build_target_split(self.bench.split("target_train"), shift)
            test, _ = build_target_split(self.bench.split("target_test"), shift.model_copy(update={"seed": shift.seed + 1}))
            self.domains[label] = (train, test)
        return self.domains[label]


@contextmanager
def _stage(ctx: RunContext, trial: str, stage: str):
    if ctx.session is not None:
        log_stage(ctx.session, trial, stage, "started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        message = f"{type(e).__name__}: {e}"
        if ctx.session is not None:
            log_stage(ctx.session, trial, stage, "failed", message)
        console.print(f"[red][!] {trial}: stage '{stage}' failed: {message}[/red]")
        raise StageError(stage, message) from e
    if ctx.session is not None:
        log_stage(ctx.session, trial, stage, "done")


def _fine_tune_for_trial(cfg: ExperimentConfig, ctx: RunContext, task: TaskConfig, target_train: ImageSet, seed: int, trial: str, trial_dir: Path):
    """Single-shot path: read the real target example(s), invert, fine-tune. Returns (G_t, G_s, reads)."""
    bench = ctx.bench
    disc = bench.discriminator()
    access = SingleShotAccess(target_train, task=task.name)
    inv_cfg = cfg.inversion.model_copy(update={"seed": seed})
    ft_cfg = cfg.finetune.model_copy(update={"seed": seed, "truncation_psi": cfg.truncation_psi})
    classes = cfg.example_classes if cfg.example_classes is not None else _task_classes(task)

    if cfg.generator_mode == "single":
        G_s = bench.generator(task.name, "single")
        with _stage(ctx, trial, "invert"):
            x_t, _, index = access.draw_one(seed)
            inv = invert(x_t, G_s, disc, inv_cfg)
            inv.save(trial_dir / "inversion.json")
        with _stage(ctx, trial, "finetune"):
            report = sista_g_finetune(x_t, inv, G_s, disc, ft_cfg)
            G_t = report.generator
            save_checkpoint(G_t, trial_dir / "generator_target.pt")
    elif cfg.generator_mode == "conditional":
        G_s = bench.generator(task.name, "conditional")
        with _stage(ctx, trial, "invert"):
            examples = {c: access.draw_one(seed, label=c)[0] for c in classes}
        with _stage(ctx, trial, "finetune"):
            report = sista_u_finetune(examples, G_s, disc, ft_cfg, inversion_cfg=inv_cfg)
            G_t = report.generator
            save_checkpoint(G_t, trial_dir / "generator_target.pt")
    else:
        G_s = {c: bench.generator(task.name, "per-class", c) for c in classes}
        with _stage(ctx, trial, "invert"):
            examples = {c: access.draw_one(seed, label=c)[0] for c in classes}
        with _stage(ctx, trial, "finetune"):
            reports = per_class_finetune(examples, G_s, disc, ft_cfg, inversion_cfg=inv_cfg)
            G_t = {c: r.generator for c, r in reports.items()}
            for c, gen in G_t.items():
                save_checkpoint(gen, trial_dir / f"generator_target_class_{c}.pt")

    access.assert_single_shot()
    reads = {str(c): n for c, n in sorted(access.reads_per_class().items())}
    return G_t, G_s, reads


def run_trial(cfg: ExperimentConfig, seed: int, task: TaskConfig, shift: ShiftConfig, ctx: Optional[RunContext] = None) -> TrialResult:
    ctx = ctx or RunContext(bench=_resolve_bench(cfg))
    trial = f"{task.name}/{shift.label()}/seed-{seed}"
    trial_dir = Path(cfg.output_dir) / "trials" / task.name / shift.label() / f"seed-{seed}"
    trial_dir.mkdir(parents=True, exist_ok=True)
    source_model = ctx.bench.classifier(task.name)
    target_train, target_test = ctx.target_domain(shift)
    test_set = target_test.as_labeled_dataset(task.name)
    nrc_cfg = cfg.nrc.model_copy(update={"seed": seed})
    console.print(f"[+] trial {trial}")

    baseline_key = (task.name, shift.label(), seed)
    accuracies: Dict[str, float] = {}
    if baseline_key not in ctx.baselines:
        baselines = {}
        with _stage(ctx, trial, "source-only"):
            baselines[SOURCE_ONLY] = evaluate(source_model, test_set)
        if cfg.include_full_target:
            with _stage(ctx, trial, "full-target-da"):
                full = adapt_classifier(source_model, target_train.as_unlabeled_dataset(), nrc_cfg)
                baselines[FULL_TARGET] = evaluate(full.classifier, test_set)
        ctx.baselines[baseline_key] = baselines
    accuracies.update(ctx.baselines[baseline_key])

    gen_key = (task.name, shift.label(), seed, cfg.generator_mode, tuple(cfg.example_classes or ()))
    if gen_key not in ctx.generators:
        G_t, G_s, reads = _fine_tune_for_trial(cfg, ctx, task, target_train, seed, trial, trial_dir)
        ctx.generators[gen_key] = (G_t, G_s, reads)
    G_t, G_s, reads = ctx.generators[gen_key]
    class_mode = "none" if cfg.generator_mode == "single" else "uniform-random"

    hashes = {}
    for strategy in ["base", *cfg.strategy_list()]:
        method = f"sista-{strategy}"
        data_dir = trial_dir / f"synthetic_{strategy}"
        with _stage(ctx, trial, f"sample:{strategy}"):
            if data_dir.exists():
                shutil.rmtree(data_dir)
            manifest = curate_dataset(G_t, G_s, cfg.prune_config(strategy, seed), cfg.T, data_dir, class_mode=class_mode, workers=cfg.curation_workers)
            hashes[method] = manifest.dataset_hash
        with _stage(ctx, trial, f"adapt:{strategy}"):
            adapted = adapt_classifier(source_model, manifest, nrc_cfg)
        with _stage(ctx, trial, f"evaluate:{strategy}"):
            accuracies[method] = evaluate(adapted.classifier, test_set)

    result = TrialResult(task=task.name, domain=shift.label(), seed=seed, accuracies=accuracies, manifest_hashes=hashes, single_shot_reads=reads)
    (trial_dir / TRIAL_RESULT_FILE).write_text(result.model_dump_json(indent=2), encoding="utf-8")
    _check_sandwich(result)
    return result


def _check_sandwich(result: TrialResult) -> None:
    src = result.accuracies.get(SOURCE_ONLY)
    full = result.accuracies.get(FULL_TARGET)
    for method, acc in result.accuracies.items():
        if not method.startswith("sista-"):
            continue
        if src is not None and acc < src:
            console.print(f"[yellow][!] {result.task}/{result.domain}/seed-{result.seed}: {method} ({acc:.2f}) below source-only ({src:.2f})[/yellow]")
        if full is not None and acc > full + SANDWICH_SLACK:
            console.print(f"[yellow][!] {result.task}/{result.domain}/seed-{result.seed}: {method} ({acc:.2f}) above full-target DA ({full:.2f}) + {SANDWICH_SLACK}[/yellow]")


def _resolve_bench(cfg: ExperimentConfig) -> Bench:
    bench = prepare_bench(cfg) if cfg.auto_prepare else Bench(root=Path(cfg.bench_dir))
    missing = [str(p) for p in bench.required_paths(cfg) if not p.exists()]
    if missing:
        raise ConfigurationError("missing bench artifacts (run `sista_cli.py prepare-toy`): " + ", ".join(missing))
    return bench


def write_resolved_config(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG_FILE
    path.write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    return path


def open_context(cfg: ExperimentConfig) -> RunContext:
    bench = _resolve_bench(cfg)
    _, Session = get_engine_and_session(USE_POSTGRES or cfg.use_postgres, out_dir=cfg.output_dir)
    return RunContext(bench=bench, session=Session())


def run_experiment(cfg: ExperimentConfig, ctx: Optional[RunContext] = None, seeds: Optional[List[int]] = None) -> ResultTable:
    write_resolved_config(cfg)
    own_ctx = ctx is None
    ctx = ctx or open_context(cfg)
    try:
        trials = []
        for task in cfg.tasks:
            for shift in cfg.shifts:
                for seed in seeds if seeds is not None else cfg.seeds:
                    trials.append(run_trial(cfg, seed, task, shift, ctx))
    finally:
        if own_ctx and ctx.session is not None:
            ctx.session.close()
    table = ResultTable.from_trials(trials)
    table.save(Path(cfg.output_dir) / RESULTS_FILE)
    return table


def run_sweep(cfg: ExperimentConfig, axis: Literal["p", "T"], values: List[float]) -> Dict[str, ResultTable]:
    """One experiment per value; fine-tuned generators and baselines are shared across values."""
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if axis not in ("p", "T"):
        raise ConfigurationError(f"unknown sweep axis {axis!r}; use p or T")
    field_name = "ratio" if axis == "p" else "T"
    ctx = open_context(cfg)
    tables = {}
    try:
        for value in values:
            value = int(value) if axis == "T" else float(value)
            key = f"{axis}={value:g}"
            sub = cfg.model_copy(update={field_name: value, "output_dir": str(Path(cfg.output_dir) / f"sweep_{axis}_{value:g}")})
            console.print(f"[+] sweep {key}")
            tables[key] = run_experiment(sub, ctx)
    finally:
        if ctx.session is not None:
            ctx.session.close()
    return tables


def collect_results(out_dir) -> ResultTable:
    """Aggregate every trial_result.json under `out_dir` (inline or worker-produced)."""
    files = sorted(Path(out_dir).rglob(TRIAL_RESULT_FILE))
    if not files:
        raise FileNotFoundError(f"no {TRIAL_RESULT_FILE} files under {out_dir}")
    trials = [TrialResult.model_validate_json(p.read_text(encoding="utf-8")) for p in files]
    return ResultTable.from_trials(trials)


def export_client_bundle(out_dir, classifier: ClassifierHandle, manifest: SyntheticManifest) -> Path:
    """Classifier checkpoint + synthetic dataset, consumable by `adapt --model ... --data ...`."""
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    if data_dir.exists():
        shutil.rmtree(data_dir)
    data_dir.mkdir(parents=True)
    for rec in manifest.records:
        shutil.copy2(manifest.image_file(rec), data_dir / rec.image_path)
    manifest.model_copy(update={"root": str(data_dir)}).write(data_dir)
    save_classifier(classifier, out_dir / "classifier.pt")
    console.print(f"[+] client bundle: {out_dir} ({manifest.count} synthetic images)")
    return out_dir


# -----------------------------
# Reporting
# -----------------------------
def _render_markdown(name: str, table: ResultTable) -> List[str]:
    lines = [f"## {name}", "", "| task | domain | method | accuracy (%) | std | trials |", "|---|---|---|---|---|---|"]
    for r in table.rows:
        lines.append(f"| {r.task} | {r.domain} | {r.method} | {r.mean:.2f} | {r.std:.2f} | {len(r.trials)} |")
    averages = table.task_averages()
    if len({r.task for r in table.rows}) > 1:
        lines += ["", "Averaged across tasks:", "", "| domain | method | accuracy (%) |", "|---|---|---|"]
        for (method, domain), acc in sorted(averages.items(), key=lambda kv: (kv[0][1], _method_rank(kv[0][0]))):
            lines.append(f"| {domain} | {method} | {acc:.2f} |")
    return lines + [""]


def _plot_domains(name: str, table: ResultTable, out_dir: Path) -> List[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for domain in sorted({r.domain for r in table.rows}):
        rows = [r for r in table.rows if r.domain == domain]
        tasks = sorted({r.task for r in rows})
        methods = sorted({r.method for r in rows}, key=_method_rank)
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(tasks) * len(methods) / 2, 3.2))
        width = 0.8 / len(methods)
        for m_i, method in enumerate(methods):
            xs, means, stds = [], [], []
            for t_i, task in enumerate(tasks):
                match = [r for r in rows if r.task == task and r.method == method]
                if match:
                    xs.append(t_i + m_i * width)
                    means.append(match[0].mean)
                    stds.append(match[0].std)
            ax.bar(xs, means, width=width, yerr=stds, label=method, capsize=2)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))])
        ax.set_xticklabels(tasks)
        ax.set_ylabel("target accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title(f"{name}: domain {domain}")
        ax.legend(fontsize=7, loc="lower right")
        fig.tight_layout()
        path = out_dir / f"{name}_{domain}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(tables: Union[ResultTable, Dict[str, ResultTable]], out_dir) -> List[Path]:
    if isinstance(tables, ResultTable):
        tables = {"results": tables}
    if not tables or any(not t.rows for t in tables.values()):
        raise ContractViolation("nothing to report: empty result table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    table_path = out_dir / RESULTS_FILE
    if list(tables) == ["results"]:
        table_path.write_text(tables["results"].model_dump_json(indent=2), encoding="utf-8")
    else:
        table_path.write_text(json.dumps({"tables": {k: t.model_dump(mode="json") for k, t in tables.items()}}, indent=2), encoding="utf-8")

    lines = ["# SiSTA results", ""]
    for name, table in tables.items():
        lines += _render_markdown(name, table)
    summary_path = out_dir / SUMMARY_FILE
    summary_path.write_text("\n".join(lines), encoding="utf-8")

    plots = []
    for name, table in tables.items():
        plots += _plot_domains(name, table, out_dir)
        rt = Table(title=name)
        for col in ("task", "domain", "method", "acc %", "std"):
            rt.add_column(col)
        for r in table.rows:
            rt.add_row(r.task, r.domain, r.method, f"{r.mean:.2f}", f"{r.std:.2f}")
        console.print(rt)
    return [table_path, summary_path, *plots]
