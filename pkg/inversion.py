#!/usr/bin/env python3
"""
inversion.py

Optimisation-based projection of the single-shot target image into the source
generator's extended style space (all L rows of w+ are free variables).

Default objective: pixel L2 + 0.8 x discriminator-feature L1. Two optimisers:
Adam (default) and plain gradient descent with step-size backtracking
(`monotone=True`), whose loss trace never increases.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from sista_common import QUIET, ConfigurationError, ContractViolation, NonFiniteLossError, is_finite
from stylegen import (
    DiscriminatorHandle,
    GeneratorHandle,
    check_extended_latent,
    discriminator_features,
    draw_latent,
    feature_l1_distance,
    mean_latent,
    synthesize_batch,
)


class InversionConfig(BaseModel):
    steps: int = Field(300, ge=1)
    step_size: float = Field(0.05, ge=0.0)
    pixel_weight: float = Field(1.0, ge=0.0)
    feature_weight: float = Field(0.8, ge=0.0)
    init: Literal["mean-latent", "random"] = "mean-latent"
    mean_latent_samples: int = Field(10000, ge=1)
    monotone: bool = False
    max_backtracks: int = Field(20, ge=0)
    # restrict the conditional class search to the classifier's top-k guesses
    top_k: Optional[int] = Field(None, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _weights(self):
        if self.pixel_weight == 0 and self.feature_weight == 0:
            raise ValueError("pixel_weight and feature_weight cannot both be zero")
        return self


@dataclass
class InversionResult:
    w_plus: torch.Tensor
    condition: Optional[int]
    final_loss: float
    loss_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.loss_trace and self.final_loss != self.loss_trace[-1]:
            raise ContractViolation("final loss must equal the last trace entry")
        if self.final_loss < 0:
            raise ContractViolation("inversion loss cannot be negative")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "w_plus": self.w_plus.detach().cpu().tolist(),
            "condition": self.condition,
            "final_loss": self.final_loss,
            "loss_trace": self.loss_trace,
        }
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "InversionResult":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            w_plus=torch.tensor(doc["w_plus"], dtype=torch.float32),
            condition=doc.get("condition"),
            final_loss=float(doc["final_loss"]),
            loss_trace=[float(v) for v in doc.get("loss_trace", [])],
        )


def _check_target(x_t: torch.Tensor, gen: GeneratorHandle) -> None:
    res = gen.descriptor.resolution
    if x_t.ndim != 3 or tuple(x_t.shape) != (3, res, res):
        raise ContractViolation(f"target image must be 3 x {res} x {res}, got {tuple(x_t.shape)}")


def _initial_latent(gen: GeneratorHandle, cfg: InversionConfig, condition: Optional[int]) -> torch.Tensor:
    if cfg.init == "mean-latent":
        return mean_latent(gen, samples=cfg.mean_latent_samples, condition=condition, seed=cfg.seed)
    return draw_latent(gen, seed=cfg.seed, condition=condition)


def _run_inversion(x_t, gen, disc, cfg: InversionConfig, condition: Optional[int]) -> InversionResult:
    _check_target(x_t, gen)
    x_t = x_t.to(gen.device)
    target_feats = [f.detach() for f in discriminator_features(disc, x_t)] if cfg.feature_weight else None

    def loss_at(w):
        image = synthesize_batch(gen, w.unsqueeze(0))[0]
        loss = image.new_zeros(())
        if cfg.pixel_weight:
            loss = loss + cfg.pixel_weight * F.mse_loss(image, x_t)
        if cfg.feature_weight:
            loss = loss + cfg.feature_weight * feature_l1_distance(discriminator_features(disc, image), target_feats)
        return loss

    def checked(loss, step):
        if not is_finite(loss):
            raise NonFiniteLossError(f"non-finite inversion loss at step {step}", where=step)
        return loss

    w = _initial_latent(gen, cfg, condition).clone().to(gen.device)
    check_extended_latent(w, gen)
    trace: List[float] = []
    steps = tqdm(range(cfg.steps), desc="invert", leave=False, disable=QUIET)

    if cfg.monotone:
        with torch.no_grad():
            current = float(checked(loss_at(w), 0))
        for step in steps:
            w_req = w.detach().requires_grad_(True)
            loss = checked(loss_at(w_req), step)
            (grad,) = torch.autograd.grad(loss, [w_req])
            step_len = cfg.step_size
            with torch.no_grad():
                for _ in range(cfg.max_backtracks + 1):
                    cand = w - step_len * grad
                    cand_loss = float(checked(loss_at(cand), step))
                    if cand_loss <= current:
                        w, current = cand, cand_loss
                        break
                    step_len *= 0.5
            trace.append(current)
    else:
        w = w.requires_grad_(True)
        opt = torch.optim.Adam([w], lr=cfg.step_size)
        for step in steps:
            loss = checked(loss_at(w), step)
            # gradient w.r.t. the latent only; generator/discriminator grads never accumulate
            (grad,) = torch.autograd.grad(loss, [w])
            w.grad = grad
            opt.step()
            with torch.no_grad():
                trace.append(float(checked(loss_at(w), step)))

    return InversionResult(w_plus=w.detach(), condition=condition, final_loss=trace[-1], loss_trace=trace)


def invert(x_t: torch.Tensor, gen: GeneratorHandle, disc: DiscriminatorHandle, cfg: Optional[InversionConfig] = None) -> InversionResult:
    if gen.conditional:
        raise ConfigurationError("invert() needs an unconditional generator; use invert_conditional()")
    return _run_inversion(x_t, gen, disc, cfg or InversionConfig(), condition=None)


def invert_conditional(
    x_t: torch.Tensor,
    gen: GeneratorHandle,
    disc: DiscriminatorHandle,
    cfg: Optional[InversionConfig] = None,
    label: Optional[int] = None,
    classifier=None,
) -> InversionResult:
    """Recover (w+, c). With a label only w+ is optimised; otherwise every candidate class is tried."""
    cfg = cfg or InversionConfig()
    if not gen.conditional:
        raise ConfigurationError("invert_conditional() needs a conditional generator")
    num_classes = gen.descriptor.num_classes or 0
    if num_classes < 1:
        raise ConfigurationError("conditional generator declares no classes")
    if label is not None:
        if not 0 <= int(label) < num_classes:
            raise ConfigurationError(f"label {label} outside [0, {num_classes})")
        return _run_inversion(x_t, gen, disc, cfg, condition=int(label))

    candidates = list(range(num_classes))
    if cfg.top_k is not None and classifier is not None and cfg.top_k < num_classes:
        with torch.no_grad():
            probs = classifier.predict_proba(x_t.unsqueeze(0))[0]
        candidates = sorted(int(c) for c in torch.topk(probs, cfg.top_k).indices)

    results = [_run_inversion(x_t, gen, disc, cfg, condition=c) for c in candidates]
    return min(results, key=lambda r: (r.final_loss, r.condition))
