#!/usr/bin/env python3
"""
toybench.py

Desk-scale benchmark pieces: the procedural 32x32 shapes dataset (3-way shape
label plus binary attributes round / large / warm), the on-disk ImageSet
container, a read-counting wrapper that proves single-shot access, and
non-adversarial pre-training of the toy generator on a dataset.
"""

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field
from torch.utils.data import Dataset, TensorDataset
from tqdm import tqdm

from sista_common import QUIET, ConfigurationError, ContractViolation, NonFiniteLossError, console, derive_seed, is_finite, sha256_chunks, torch_generator
from stylegen import DiscriminatorHandle, GeneratorHandle, discriminator_features, feature_l1_distance

SHAPE_CLASSES = ("circle", "square", "triangle")
ATTRIBUTES = ("round", "large", "warm")
IMAGES_DIR = "images"
LABELS_FILE = "labels.json"


# -----------------------------
# ImageSet
# -----------------------------
def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 127.5 - 1.0


class IndexedImages(Dataset):
    """Unlabeled view: yields (image, position) pairs."""

    def __init__(self, tensors: torch.Tensor):
        self.tensors = tensors

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, idx):
        return self.tensors[idx], idx


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    class_names: Tuple[str, ...] = SHAPE_CLASSES
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ContractViolation(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractViolation("one label per image")
        self.attributes = {k: np.asarray(v, dtype=np.int64) for k, v in self.attributes.items()}
        if any(len(v) != len(self.images) for v in self.attributes.values()):
            raise ContractViolation("one attribute value per image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def task_labels(self, task: str = "shape") -> np.ndarray:
        if task == "shape":
            return self.labels
        if task not in self.attributes:
            raise ConfigurationError(f"unknown task {task!r}; have shape, {', '.join(sorted(self.attributes))}")
        return self.attributes[task]

    def num_classes(self, task: str = "shape") -> int:
        return len(self.class_names) if task == "shape" else 2

    def tensor(self, index: int) -> torch.Tensor:
        return images_to_tensor(self.images[index: index + 1])[0]

    def as_labeled_dataset(self, task: str = "shape") -> TensorDataset:
        return TensorDataset(images_to_tensor(self.images), torch.from_numpy(self.task_labels(task)))

    def as_unlabeled_dataset(self) -> IndexedImages:
        return IndexedImages(images_to_tensor(self.images))

    def subset(self, indices: Sequence[int]) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(
            images=self.images[idx],
            labels=self.labels[idx],
            attributes={k: v[idx] for k, v in self.attributes.items()},
            class_names=self.class_names,
            meta=dict(self.meta),
        )

    def with_images(self, images: np.ndarray, meta: Optional[Dict] = None) -> "ImageSet":
        if len(images) != len(self):
            raise ContractViolation("replacement images must keep the dataset size")
        return ImageSet(images=images, labels=self.labels.copy(), attributes={k: v.copy() for k, v in self.attributes.items()}, class_names=self.class_names, meta=dict(meta if meta is not None else self.meta))

    def split(self, counts: Sequence[int], seed: int = 0) -> List["ImageSet"]:
        if sum(counts) > len(self):
            raise ContractViolation(f"split sizes {list(counts)} exceed dataset size {len(self)}")
        order = np.random.default_rng(seed).permutation(len(self))
        parts, start = [], 0
        for n in counts:
            parts.append(self.subset(np.sort(order[start: start + n])))
            start += n
        return parts

    def hash(self) -> str:
        def chunks():
            yield self.images.tobytes()
            yield self.labels.tobytes()
            for k in sorted(self.attributes):
                yield k.encode("utf-8")
                yield self.attributes[k].tobytes()

        return sha256_chunks(chunks())

    def save(self, root) -> Path:
        root = Path(root)
        (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            Image.fromarray(img).save(root / IMAGES_DIR / f"{i:05d}.png")
        doc = {
            "count": len(self),
            "class_names": list(self.class_names),
            "labels": self.labels.tolist(),
            "attributes": {k: v.tolist() for k, v in self.attributes.items()},
            "meta": self.meta,
            "dataset_hash": self.hash(),
        }
        (root / LABELS_FILE).write_text(json.dumps(doc), encoding="utf-8")
        return root

    @classmethod
    def load(cls, root) -> "ImageSet":
        root = Path(root)
        labels_path = root / LABELS_FILE
        if not labels_path.exists():
            raise FileNotFoundError(f"no {LABELS_FILE} in {root}")
        doc = json.loads(labels_path.read_text(encoding="utf-8"))
        images = []
        for i in range(doc["count"]):
            with Image.open(root / IMAGES_DIR / f"{i:05d}.png") as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        return cls(
            images=np.stack(images),
            labels=np.asarray(doc["labels"]),
            attributes={k: np.asarray(v) for k, v in doc.get("attributes", {}).items()},
            class_names=tuple(doc.get("class_names", SHAPE_CLASSES)),
            meta=doc.get("meta", {}),
        )


class SingleShotAccess:
    """Counts every image read from the wrapped set, per class of the given task."""

    def __init__(self, dataset: ImageSet, task: str = "shape"):
        self.dataset = dataset
        self.task = task
        self.reads: List[int] = []

    def __len__(self) -> int:
        return len(self.dataset)

    def read(self, index: int) -> Tuple[torch.Tensor, int]:
        self.reads.append(int(index))
        return self.dataset.tensor(index), int(self.dataset.task_labels(self.task)[index])

    def draw_one(self, seed: int, label: Optional[int] = None) -> Tuple[torch.Tensor, int, int]:
        """Seeded uniform pick (optionally within one class); returns (image, label, index)."""
        pool = np.arange(len(self.dataset))
        if label is not None:
            pool = pool[self.dataset.task_labels(self.task) == label]
        if len(pool) == 0:
            raise ContractViolation(f"no target images for class {label}")
        index = int(pool[np.random.default_rng(derive_seed(seed, -1 if label is None else label)).integers(len(pool))])
        image, y = self.read(index)
        return image, y, index

    def reads_per_class(self) -> Dict[int, int]:
        labels = self.dataset.task_labels(self.task)
        counts: Dict[int, int] = {}
        for i in self.reads:
            counts[int(labels[i])] = counts.get(int(labels[i]), 0) + 1
        return counts

    def assert_single_shot(self) -> None:
        if len(set(self.reads)) != len(self.reads):
            raise ContractViolation(f"target images read more than once: {self.reads}")
        over = {c: n for c, n in self.reads_per_class().items() if n > 1}
        if over:
            raise ContractViolation(f"more than one real target image read for classes {over}")


# -----------------------------
# Procedural shapes
# -----------------------------
_WARM_HUES = (0.0, 0.06, 0.12)
_COOL_HUES = (0.33, 0.5, 0.62, 0.75)


def _hsv_to_rgb(h: float, s: float, v: float) -> Tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _draw_shape(rng: np.random.Generator, resolution: int, shape: int, large: bool, warm: bool) -> np.ndarray:
    scale = 4
    size = resolution * scale
    bg = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.05, 0.3), rng.uniform(0.7, 0.95))
    canvas = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(canvas)
    hue = float(rng.choice(_WARM_HUES if warm else _COOL_HUES)) + rng.uniform(-0.02, 0.02)
    fg = _hsv_to_rgb(hue % 1.0, rng.uniform(0.65, 1.0), rng.uniform(0.35, 0.75))
    radius = (rng.uniform(0.32, 0.42) if large else rng.uniform(0.18, 0.26)) * size
    cx = rng.uniform(radius, size - radius)
    cy = rng.uniform(radius, size - radius)
    if SHAPE_CLASSES[shape] == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=fg)
    elif SHAPE_CLASSES[shape] == "square":
        half = radius * 0.85
        draw.rectangle([cx - half, cy - half, cx + half, cy + half], fill=fg)
    else:
        angle = rng.uniform(0, 2 * np.pi / 3)
        pts = [(cx + radius * np.cos(angle + k * 2 * np.pi / 3), cy + radius * np.sin(angle + k * 2 * np.pi / 3)) for k in range(3)]
        draw.polygon(pts, fill=fg)
    img = np.asarray(canvas.resize((resolution, resolution), Image.BOX), dtype=np.int16)
    noise = rng.integers(-6, 7, size=img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def make_shapes(n: int, seed: int = 0, resolution: int = 32) -> ImageSet:
    """Balanced-ish procedural shapes; sample i depends only on (seed, i)."""
    if n < 1:
        raise ContractViolation("make_shapes needs n >= 1")
    images, labels, large, warm = [], [], [], []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        shape = int(rng.integers(len(SHAPE_CLASSES)))
        is_large = bool(rng.random() < 0.5)
        is_warm = bool(rng.random() < 0.5)
        images.append(_draw_shape(rng, resolution, shape, is_large, is_warm))
        labels.append(shape)
        large.append(int(is_large))
        warm.append(int(is_warm))
    labels = np.asarray(labels)
    return ImageSet(
        images=np.stack(images),
        labels=labels,
        attributes={"round": (labels == 0).astype(np.int64), "large": np.asarray(large), "warm": np.asarray(warm)},
        meta={"generator": "shapes", "seed": seed, "resolution": resolution},
    )


# -----------------------------
# Toy generator pre-training
# -----------------------------
class PretrainConfig(BaseModel):
    epochs: int = Field(40, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(2e-3, gt=0.0)
    latent_learning_rate: float = Field(1e-2, gt=0.0)
    feature_weight: float = Field(0.1, ge=0.0)
    prior_weight: float = Field(1.0, ge=0.0)
    task: str = "shape"
    seed: int = 0


def pretrain_toy_generator(data: ImageSet, gen: GeneratorHandle, disc: DiscriminatorHandle, cfg: Optional[PretrainConfig] = None):
    """Fit the generator to `data` by joint latent-code optimisation.

    Every image owns a learnable z; loss = pixel L1 + feature matching under the
    frozen discriminator + a moment penalty pulling the codes toward N(0, I), so
    that fresh Gaussian draws land on the learned manifold. Conditional
    generators are conditioned on the task labels. Returns (generator, losses).
    """
    cfg = cfg or PretrainConfig()
    if data.resolution != gen.descriptor.resolution:
        raise ContractViolation(f"data resolution {data.resolution} != generator resolution {gen.descriptor.resolution}")
    labels = torch.from_numpy(data.task_labels(cfg.task)) if gen.conditional else None
    if labels is not None and int(labels.max()) >= gen.descriptor.num_classes:
        raise ConfigurationError("task labels exceed the generator's class count")

    trained = gen.clone()
    module = trained.module
    device = trained.device
    x_all = images_to_tensor(data.images)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        codes = torch.randn(len(data), gen.descriptor.z_dim, device=device).requires_grad_(True)
    opt = torch.optim.Adam(
        [
            {"params": module.parameters(), "lr": cfg.learning_rate, "betas": (0.0, 0.99)},
            {"params": [codes], "lr": cfg.latent_learning_rate},
        ]
    )
    shuffler = torch_generator(cfg.seed)
    losses = []
    module.train()
    for epoch in tqdm(range(cfg.epochs), desc="pretrain G", leave=False, disable=QUIET):
        order = torch.randperm(len(data), generator=shuffler)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            x = x_all[idx].to(device)
            c = labels[idx].to(device) if labels is not None else None
            w = module.mapping(codes[idx], c)
            fake, _ = module.synthesis(w.unsqueeze(1).repeat(1, trained.num_layers, 1))
            loss = F.l1_loss(fake, x)
            if cfg.feature_weight:
                loss = loss + cfg.feature_weight * feature_l1_distance(discriminator_features(disc, fake), discriminator_features(disc, x))
            if cfg.prior_weight:
                mean, std = codes.mean(dim=0), codes.std(dim=0)
                loss = loss + cfg.prior_weight * (mean.pow(2).mean() + (std - 1.0).pow(2).mean())
            if not is_finite(loss):
                raise NonFiniteLossError(f"non-finite generator pre-training loss in epoch {epoch}", where=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    module.eval()
    if losses:
        console.print(f"[+] generator pre-trained: {len(losses)} steps, final loss {losses[-1]:.4f}")
    return trained, losses
