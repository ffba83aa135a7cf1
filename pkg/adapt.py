#!/usr/bin/env python3
"""
adapt.py

Source-free adaptation of a classifier on the curated synthetic set with the
neighbourhood reciprocity clustering objective:

    L = L_neigh + L_self + L_exp + L_div

Feature and score banks hold one row per synthetic sample. Neighbours come from
cosine similarity in the feature bank; stored scores are constants. Rows of the
current batch are overwritten after every optimiser step. Class fields in the
manifest are never read.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, Field
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from sista_common import (
    QUIET,
    ConfigurationError,
    ContractViolation,
    MissingRecordError,
    NonFiniteLossError,
    UnsupportedFormatError,
    from_uint8,
    is_finite,
    parameter_checksum,
    resolve_device,
    torch_generator,
)
from sampler import SyntheticManifest

CLASSIFIER_FORMAT = "sista-classifier"
CLASSIFIER_VERSION = 1
LOSS_COMPONENTS = ("neigh", "self", "exp", "div")


# -----------------------------
# Classifiers
# -----------------------------
class SmallConvNet(nn.Module):
    """Desk-scale stand-in for the ResNet backbone: 3 conv-BN stages + 128-d bottleneck."""

    def __init__(self, num_classes: int, feature_dim: int = 128, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.BatchNorm2d(2 * width), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.BatchNorm2d(4 * width), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


class MLPClassifier(nn.Module):
    """Flat-vector classifier; used for feature-space toy problems."""

    def __init__(self, num_classes: int, feature_dim: int = 16, in_dim: int = 2):
        super().__init__()
        self.features = nn.Sequential(nn.Flatten(), nn.Linear(in_dim, feature_dim), nn.ReLU())
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


ARCHITECTURES = {"small-conv": SmallConvNet, "mlp": MLPClassifier}


@dataclass(eq=False)
class ClassifierHandle:
    module: nn.Module
    num_classes: int
    feature_dim: int
    arch: str = "small-conv"
    arch_kwargs: Dict = field(default_factory=dict)

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.module.features(x.to(self.device))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x.to(self.device))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def clone(self) -> "ClassifierHandle":
        return ClassifierHandle(copy.deepcopy(self.module), self.num_classes, self.feature_dim, self.arch, dict(self.arch_kwargs))

    def checksum(self) -> str:
        return parameter_checksum(self.module)


def build_classifier(num_classes: int, seed: int = 0, arch: str = "small-conv", device=None, **arch_kwargs) -> ClassifierHandle:
    if num_classes < 2:
        raise ConfigurationError(f"a classifier needs >= 2 classes, got {num_classes}")
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown classifier architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ARCHITECTURES[arch](num_classes, **arch_kwargs)
    module.eval()
    return ClassifierHandle(
        module=module.to(resolve_device(device)),
        num_classes=num_classes,
        feature_dim=module.head.in_features,
        arch=arch,
        arch_kwargs=dict(arch_kwargs),
    )


def save_classifier(model: ClassifierHandle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CLASSIFIER_FORMAT,
            "version": CLASSIFIER_VERSION,
            "kind": "classifier",
            "descriptor": {"arch": model.arch, "num_classes": model.num_classes, "arch_kwargs": model.arch_kwargs},
            "state_dict": {k: v.detach().cpu() for k, v in model.module.state_dict().items()},
        },
        path,
    )
    return path


def load_classifier(path, device=None) -> ClassifierHandle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"classifier checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise UnsupportedFormatError(f"{path}: not a readable classifier checkpoint ({type(e).__name__})") from e
    if not isinstance(payload, dict) or payload.get("format") != CLASSIFIER_FORMAT or "version" not in payload:
        raise UnsupportedFormatError(f"{path}: missing {CLASSIFIER_FORMAT} format marker")
    desc = payload["descriptor"]
    model = build_classifier(desc["num_classes"], arch=desc["arch"], device="cpu", **desc.get("arch_kwargs", {}))
    try:
        model.module.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as e:
        raise UnsupportedFormatError(f"{path}: corrupt classifier payload ({e})") from e
    model.module.to(resolve_device(device))
    return model


# -----------------------------
# Data plumbing
# -----------------------------
class ManifestDataset(Dataset):
    """(image, sample id) pairs from a curated manifest; class fields are ignored."""

    def __init__(self, manifest: SyntheticManifest):
        self.manifest = manifest

    def __len__(self):
        return self.manifest.count

    def __getitem__(self, idx):
        record = self.manifest.records[idx]
        path = self.manifest.image_file(record)
        if not path.exists():
            raise MissingRecordError(f"manifest record {record.index} ({record.image_path}) is missing on disk")
        with Image.open(path) as im:
            image = from_uint8(np.asarray(im.convert("RGB"), dtype=np.uint8))
        return image, idx


def as_indexed_dataset(data: Union[SyntheticManifest, Dataset]) -> Dataset:
    if isinstance(data, SyntheticManifest):
        return ManifestDataset(data)
    if isinstance(data, Dataset):
        return data
    raise ContractViolation(f"cannot adapt on {type(data).__name__}; pass a SyntheticManifest or an (x, id) Dataset")


# -----------------------------
# Banks and loss
# -----------------------------
@dataclass
class AdaptState:
    feature_bank: torch.Tensor
    score_bank: torch.Tensor

    def __post_init__(self):
        if self.feature_bank.ndim != 2 or self.score_bank.ndim != 2 or len(self.feature_bank) != len(self.score_bank):
            raise ContractViolation("feature and score banks must be N x F and N x C")

    @property
    def num_samples(self) -> int:
        return self.feature_bank.shape[0]

    def refresh(self, ids: torch.Tensor, features: torch.Tensor, scores: torch.Tensor) -> None:
        ids = ids.to(self.feature_bank.device)
        self.feature_bank[ids] = F.normalize(features.detach(), dim=1).to(self.feature_bank)
        self.score_bank[ids] = scores.detach().to(self.score_bank)


class NRCConfig(BaseModel):
    k: int = Field(5, ge=1)
    expanded: int = Field(5, ge=1)
    non_reciprocal_affinity: float = Field(0.1, gt=0.0, le=1.0)
    expanded_affinity: float = Field(0.1, gt=0.0, le=1.0)
    epochs: int = Field(15, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    head_only: bool = False
    seed: int = 0


def _forward(model: ClassifierHandle, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    feats = model.features(x)
    return feats, F.softmax(model.module.head(feats), dim=1)


def build_banks(model: ClassifierHandle, data: Union[SyntheticManifest, Dataset], batch_size: int = 256) -> AdaptState:
    dataset = as_indexed_dataset(data)
    if len(dataset) == 0:
        raise ContractViolation("cannot build banks over an empty dataset")
    feature_bank = torch.zeros(len(dataset), model.feature_dim)
    score_bank = torch.zeros(len(dataset), model.num_classes)
    was_training = model.module.training
    model.module.eval()
    with torch.no_grad():
        for x, ids in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            feats, probs = _forward(model, x)
            feature_bank[ids] = F.normalize(feats, dim=1).cpu()
            score_bank[ids] = probs.cpu()
    model.module.train(was_training)
    return AdaptState(feature_bank=feature_bank.to(model.device), score_bank=score_bank.to(model.device))


def _check_bank_size(state: AdaptState, cfg: NRCConfig) -> None:
    need = max(cfg.k, cfg.expanded)
    if state.num_samples <= need:
        raise ConfigurationError(f"need more than {need} samples for K={cfg.k}, expanded={cfg.expanded}; have {state.num_samples}")


def _nearest(bank: torch.Tensor, queries: torch.Tensor, k: int, exclude: torch.Tensor) -> torch.Tensor:
    """Top-k cosine neighbours of each query row, never returning the excluded id."""
    sim = queries @ bank.T
    sim[torch.arange(len(queries), device=sim.device), exclude] = float("-inf")
    return torch.topk(sim, k, dim=1).indices


def _neighbourhood(state: AdaptState, ids: torch.Tensor, cfg: NRCConfig):
    bank = state.feature_bank
    ids = ids.to(bank.device)
    B, K, M = len(ids), cfg.k, cfg.expanded
    near = _nearest(bank, bank[ids], K, ids)
    flat = near.reshape(-1)
    second = _nearest(bank, bank[flat], max(K, M), flat)
    reciprocal = (second[:, :K] == ids.repeat_interleave(K)[:, None]).any(dim=1).view(B, K)
    weights = torch.where(reciprocal, torch.ones_like(reciprocal, dtype=bank.dtype), torch.full_like(reciprocal, cfg.non_reciprocal_affinity, dtype=bank.dtype))
    expanded = second[:, :M].reshape(B, K, M)
    return near, weights, expanded


def reciprocal_affinity(state: AdaptState, i: int, cfg: NRCConfig) -> Dict[int, float]:
    if state.num_samples <= cfg.k:
        raise ConfigurationError(f"need more than K={cfg.k} samples, have {state.num_samples}")
    bank = state.feature_bank
    ids = torch.tensor([int(i)], device=bank.device)
    near = _nearest(bank, bank[ids], cfg.k, ids)[0]
    back = _nearest(bank, bank[near], cfg.k, near)
    return {int(n): 1.0 if bool((back[j] == int(i)).any()) else cfg.non_reciprocal_affinity for j, n in enumerate(near)}


def nrc_loss(probs: torch.Tensor, ids: torch.Tensor, state: AdaptState, cfg: NRCConfig) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    if probs.ndim != 2 or len(probs) == 0:
        raise ContractViolation("nrc_loss needs a non-empty B x C prediction batch")
    _check_bank_size(state, cfg)
    near, weights, expanded = _neighbourhood(state, ids, cfg)
    scores = state.score_bank.detach()
    ids = ids.to(scores.device)
    num_classes = probs.shape[1]

    s_near = scores[near]
    neigh = -(weights * (s_near * probs[:, None, :]).sum(-1)).sum(1).mean()
    self_term = -(scores[ids] * probs).sum(-1).mean()
    s_exp = scores[expanded]
    exp = -(cfg.expanded_affinity * (s_exp * probs[:, None, None, :]).sum(-1)).sum((1, 2)).mean()
    mean_pred = probs.mean(dim=0)
    # KL(mean prediction || uniform) = sum p log(p C)
    div = torch.xlogy(mean_pred, mean_pred * num_classes).sum().clamp_min(0.0)

    components = {"neigh": neigh, "self": self_term, "exp": exp, "div": div}
    for name, value in components.items():
        if not is_finite(value):
            raise NonFiniteLossError(f"non-finite NRC component '{name}'", where=name)
    return neigh + self_term + exp + div, components


# -----------------------------
# Training / evaluation
# -----------------------------
@dataclass
class AdaptResult:
    classifier: ClassifierHandle
    history: Dict[str, List[float]]
    state: AdaptState

    @property
    def steps(self) -> int:
        return len(self.history["total"])


def adapt_classifier(model: ClassifierHandle, data: Union[SyntheticManifest, Dataset], cfg: Optional[NRCConfig] = None) -> AdaptResult:
    cfg = cfg or NRCConfig()
    dataset = as_indexed_dataset(data)
    adapted = model.clone()
    state = build_banks(adapted, dataset)
    _check_bank_size(state, cfg)

    module = adapted.module
    if cfg.head_only:
        module.features.requires_grad_(False)
        params = list(module.head.parameters())
    else:
        params = list(module.parameters())
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=torch_generator(cfg.seed))

    history: Dict[str, List[float]] = {name: [] for name in (*LOSS_COMPONENTS, "total")}
    # batch-norm statistics follow the adaptation set unless the backbone is frozen
    module.train()
    if cfg.head_only:
        module.features.eval()
    for _ in tqdm(range(cfg.epochs), desc="adapt", leave=False, disable=QUIET):
        for x, ids in loader:
            feats, probs = _forward(adapted, x)
            total, components = nrc_loss(probs, ids, state, cfg)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            state.refresh(ids, feats, probs)
            for name, value in components.items():
                history[name].append(float(value.detach()))
            history["total"].append(float(total.detach()))
    module.eval()
    module.requires_grad_(True)
    return AdaptResult(classifier=adapted, history=history, state=state)


def evaluate(model: ClassifierHandle, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent over a labeled (x, y) dataset."""
    if len(dataset) == 0:
        raise ContractViolation("cannot evaluate on an empty dataset")
    correct = 0
    model.module.eval()
    with torch.no_grad():
        for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            correct += int((model.logits(x).argmax(dim=1).cpu() == y.cpu()).sum())
    return 100.0 * correct / len(dataset)
