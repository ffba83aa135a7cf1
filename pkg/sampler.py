#!/usr/bin/env python3
"""
sampler.py

Synthetic target dataset curation. Each sample draws a latent from the
fine-tuned generator, flips an independent gate per style layer and applies the
configured activation-pruning strategy at the gated layers:

  base          no intervention
  prune-zero    sub-threshold activations -> 0
  prune-rewind  sub-threshold activations -> source generator activations

All randomness for sample j derives from (seed, j) so curation gives the same
manifest whatever the worker count.
"""

import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from sista_common import (
    QUIET,
    AlignmentError,
    ConfigurationError,
    ContractViolation,
    console,
    derive_seed,
    sha256_chunks,
    to_uint8,
)
from stylegen import (
    ActivationTensor,
    GeneratorHandle,
    InterventionPlan,
    RewindDirective,
    StyleLayerSet,
    ZeroDirective,
    draw_latent,
    mean_latent,
    percentile_thresholds,
    prune_activations,
    synthesize,
)

STRATEGIES = ("base", "prune-zero", "prune-rewind")
DEFAULT_RATIOS = {"base": 0.0, "prune-zero": 50.0, "prune-rewind": 20.0}
MANIFEST_NAME = "manifest.jsonl"

# sub-streams of derive_seed(seed, index, stream)
_GATE_STREAM = 1
_CLASS_STREAM = 2


class PruneConfig(BaseModel):
    strategy: Literal["base", "prune-zero", "prune-rewind"] = "prune-zero"
    # None -> strategy default (50 for prune-zero, 20 for prune-rewind)
    ratio: Optional[float] = Field(None, ge=0.0, le=100.0)
    style_layers: StyleLayerSet = StyleLayerSet(layer_indices=(2, 3))
    gate_probability: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = 0
    truncation_psi: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _default_ratio(self):
        if self.ratio is None:
            self.ratio = DEFAULT_RATIOS[self.strategy]
        return self


class SampleRecord(BaseModel):
    index: int
    image_path: str = ""
    latent_seed: int
    class_index: Optional[int] = None
    strategy: str
    ratio: Optional[float] = None
    gated_layers: List[int] = Field(default_factory=list)


class SyntheticManifest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict)
    records: List[SampleRecord] = Field(default_factory=list)
    dataset_hash: str = ""
    root: Optional[str] = Field(default=None, exclude=True)

    @property
    def count(self) -> int:
        return len(self.records)

    def image_file(self, record: SampleRecord) -> Path:
        if self.root is None:
            raise ContractViolation("manifest has no root directory")
        return Path(self.root) / record.image_path

    def recompute_hash(self) -> str:
        """SHA-256 over each record (JSON) followed by its decoded pixels."""

        def chunks():
            for rec in self.records:
                yield rec.model_dump_json().encode("utf-8")
                with Image.open(self.image_file(rec)) as im:
                    yield np.asarray(im.convert("RGB"), dtype=np.uint8).tobytes()

        return sha256_chunks(chunks())

    def write(self, root=None) -> Path:
        root = Path(root or self.root)
        root.mkdir(parents=True, exist_ok=True)
        self.root = str(root)
        header = {"header": {**self.config, "count": self.count, "dataset_hash": self.dataset_hash}}
        path = root / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header) + "\n")
            for rec in self.records:
                f.write(rec.model_dump_json() + "\n")
        return path

    @classmethod
    def load(cls, root) -> "SyntheticManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
        if not lines or "header" not in json.loads(lines[0]):
            raise ContractViolation(f"{path} is missing its header line")
        header = dict(json.loads(lines[0])["header"])
        dataset_hash = header.pop("dataset_hash", "")
        count = header.pop("count", None)
        records = [SampleRecord.model_validate_json(line) for line in lines[1:]]
        if count is not None and count != len(records):
            raise ContractViolation(f"{path}: header says {count} records, found {len(records)}")
        return cls(config=header, records=records, dataset_hash=dataset_hash, root=str(root))


# -----------------------------
# Pruning primitives
# -----------------------------
def channel_thresholds(h: ActivationTensor, p: float) -> torch.Tensor:
    return percentile_thresholds(h.to_nchw(), p).reshape(-1)


def prune_zero(h: ActivationTensor, p: float) -> ActivationTensor:
    return ActivationTensor.from_nchw(prune_activations(h.to_nchw(), p), h.layer_index)


def prune_rewind(h_t: ActivationTensor, h_s: ActivationTensor, p: float) -> ActivationTensor:
    if h_t.layer_index != h_s.layer_index:
        raise AlignmentError(f"layer mismatch: target layer {h_t.layer_index}, source layer {h_s.layer_index}")
    if h_t.shape != h_s.shape:
        raise AlignmentError(f"shape mismatch: target {h_t.shape}, source {h_s.shape}")
    out = prune_activations(h_t.to_nchw(), p, replacement=h_s.to_nchw())
    return ActivationTensor.from_nchw(out, h_t.layer_index)


# -----------------------------
# Sampling
# -----------------------------
def sample_one(
    G_t: GeneratorHandle,
    G_s: Optional[GeneratorHandle],
    cfg: PruneConfig,
    condition: Optional[int] = None,
    index: int = 0,
    w_avg: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, SampleRecord]:
    if cfg.strategy == "prune-rewind":
        if G_s is None:
            raise AlignmentError("prune-rewind needs the source generator")
        if not G_t.aligned_with(G_s):
            raise AlignmentError("source and target generators have different architectures")
    cfg.style_layers.check_within(G_t.num_layers)

    latent_seed = derive_seed(cfg.seed, index)
    gate_rng = np.random.default_rng(derive_seed(cfg.seed, index, _GATE_STREAM))
    # gates are always drawn so every strategy sees the same latent/gate stream
    gated = [l for l in cfg.style_layers.indices if gate_rng.random() < cfg.gate_probability]

    with torch.no_grad():
        w_plus = draw_latent(G_t, latent_seed, condition=condition, truncation_psi=cfg.truncation_psi, w_avg=w_avg)
        plan = None
        if cfg.strategy == "base":
            gated = []
        elif gated:
            if cfg.strategy == "prune-zero":
                directives = {l: ZeroDirective(cfg.ratio) for l in gated}
            else:
                _, reference = synthesize(G_s, w_plus, capture=gated)
                directives = {l: RewindDirective(cfg.ratio, reference[l]) for l in gated}
            plan = InterventionPlan(cfg.style_layers, directives)
        image, _ = synthesize(G_t, w_plus, plan)

    record = SampleRecord(
        index=index,
        latent_seed=latent_seed,
        class_index=condition,
        strategy=cfg.strategy,
        ratio=None if cfg.strategy == "base" else cfg.ratio,
        gated_layers=gated,
    )
    return image, record


def _image_name(index: int) -> str:
    return f"{index:05d}.png"


def curate_dataset(
    generators: Union[GeneratorHandle, Dict[int, GeneratorHandle]],
    sources: Union[None, GeneratorHandle, Dict[int, GeneratorHandle]],
    cfg: PruneConfig,
    T: int,
    out_dir,
    class_mode: Literal["none", "uniform-random"] = "none",
    workers: int = 1,
) -> SyntheticManifest:
    """Write exactly T images plus manifest.jsonl into `out_dir`."""
    if T < 1:
        raise ContractViolation(f"T must be >= 1, got {T}")
    per_class = isinstance(generators, dict)
    if per_class and not generators:
        raise ConfigurationError("empty generator map")
    if class_mode == "uniform-random":
        if per_class:
            classes = sorted(generators)
        elif generators.conditional:
            classes = list(range(generators.descriptor.num_classes))
        else:
            raise ConfigurationError("uniform-random class mode needs a conditional generator or a per-class map")
    elif class_mode == "none":
        if per_class or generators.conditional:
            raise ConfigurationError("class-aware generators need class_mode 'uniform-random'")
        classes = []
    else:
        raise ConfigurationError(f"unknown class mode {class_mode!r}")
    if per_class and isinstance(sources, dict) and set(sources) != set(generators):
        raise ConfigurationError("source generator classes do not match target generator classes")

    out_dir = Path(out_dir)
    created_dir = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)

    w_avgs: Dict[Optional[int], torch.Tensor] = {}
    if cfg.truncation_psi != 1.0:
        for cls in classes or [None]:
            gen = generators[cls] if per_class else generators
            cond = None if per_class else cls
            w_avgs[cls] = mean_latent(gen, condition=cond, seed=cfg.seed)

    def job(index: int) -> SampleRecord:
        cls = None
        if classes:
            pick = np.random.default_rng(derive_seed(cfg.seed, index, _CLASS_STREAM)).integers(len(classes))
            cls = classes[int(pick)]
        G_t = generators[cls] if per_class else generators
        G_s = sources[cls] if isinstance(sources, dict) else sources
        cond = None if per_class else cls
        image, record = sample_one(G_t, G_s, cfg, condition=cond, index=index, w_avg=w_avgs.get(cls))
        name = _image_name(index)
        Image.fromarray(to_uint8(image)).save(out_dir / name)
        return record.model_copy(update={"class_index": cls, "image_path": name})

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(tqdm(pool.map(job, range(T)), total=T, desc="curate", leave=False, disable=QUIET))
        else:
            records = [job(i) for i in tqdm(range(T), desc="curate", leave=False, disable=QUIET)]
        manifest = SyntheticManifest(
            config={**cfg.model_dump(mode="json"), "T": T, "class_mode": class_mode},
            records=records,
            root=str(out_dir),
        )
        manifest.dataset_hash = manifest.recompute_hash()
        manifest.write(out_dir)
    except BaseException:
        console.print(f"[red][!] curation failed, removing partial output in {out_dir}[/red]")
        if created_dir:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for i in range(T):
                (out_dir / _image_name(i)).unlink(missing_ok=True)
            (out_dir / MANIFEST_NAME).unlink(missing_ok=True)
        raise
    console.print(f"[+] curated {T} samples ({cfg.strategy}, p={cfg.ratio}) -> {out_dir}")
    return manifest
