#!/usr/bin/env python3
"""
finetune.py

Single-shot generator fine-tuning. Every iteration draws a fresh random style
latent, swaps it into the style rows of the inverted target latent and takes one
Adam step on the frozen-discriminator feature-matching loss. The multi-class
driver cycles the shared generator through the supplied class examples; the
per-class driver fine-tunes one generator per class independently.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import torch
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from sista_common import QUIET, ConfigurationError, ContractViolation, NonFiniteLossError, console, derive_seed, is_finite
from stylegen import (
    DiscriminatorHandle,
    GeneratorHandle,
    StyleLayerSet,
    check_extended_latent,
    discriminator_features,
    draw_latent,
    feature_l1_distance,
    mean_latent,
    synthesize_batch,
)
from inversion import InversionConfig, InversionResult, invert, invert_conditional


class FinetuneConfig(BaseModel):
    iterations: int = Field(300, ge=0)
    learning_rate: float = Field(2e-3, ge=0.0)
    beta1: float = Field(0.0, ge=0.0, lt=1.0)
    beta2: float = Field(0.99, ge=0.0, lt=1.0)
    style_layers: StyleLayerSet = StyleLayerSet(layer_indices=(2, 3))
    seed: int = 0
    truncation_psi: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _lr(self):
        if self.iterations > 0 and self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0 when iterations > 0")
        return self


@dataclass
class FinetuneReport:
    loss_trace: List[float]
    generator: GeneratorHandle
    mix_seeds: List[int] = field(default_factory=list)
    class_schedule: List[Optional[int]] = field(default_factory=list)


def style_mix(w_t_plus: torch.Tensor, r_plus: torch.Tensor, style_layers: StyleLayerSet) -> torch.Tensor:
    if w_t_plus.ndim != 2 or w_t_plus.shape != r_plus.shape:
        raise ContractViolation(f"style_mix needs two L x D latents, got {tuple(w_t_plus.shape)} and {tuple(r_plus.shape)}")
    style_layers.check_within(w_t_plus.shape[0])
    mixed = w_t_plus.clone()
    if len(style_layers):
        idx = list(style_layers.indices)
        mixed[idx] = r_plus[idx].to(mixed)
    return mixed


def feature_match_loss(x_hat: torch.Tensor, x_t: torch.Tensor, disc: DiscriminatorHandle) -> torch.Tensor:
    return feature_l1_distance(discriminator_features(disc, x_hat), discriminator_features(disc, x_t))


Target = Tuple[Optional[int], torch.Tensor, torch.Tensor]


def _finetune(targets: List[Target], G_s: GeneratorHandle, H_s: DiscriminatorHandle, cfg: FinetuneConfig) -> FinetuneReport:
    """Round-robin over `targets` (class, x_t, w_t+); one optimiser step per iteration."""
    cfg.style_layers.check_within(G_s.num_layers)
    for _, _, w_t in targets:
        check_extended_latent(w_t, G_s)
    G_t = G_s.clone()
    if cfg.iterations == 0:
        return FinetuneReport(loss_trace=[], generator=G_t)

    target_feats = [[f.detach() for f in discriminator_features(H_s, x_t.to(H_s.device))] for _, x_t, _ in targets]
    w_avgs = {}
    if cfg.truncation_psi != 1.0:
        for cls, _, _ in targets:
            if cls not in w_avgs:
                w_avgs[cls] = mean_latent(G_s, condition=cls, seed=cfg.seed)

    G_t.module.train()
    # r+ is mapped by G_s; only the synthesis weights of G_t are optimised
    params = []
    for name, p in G_t.module.named_parameters():
        p.requires_grad_("mapping" not in name.split("."))
        if p.requires_grad:
            params.append(p)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    trace, seeds, schedule = [], [], []
    for it in tqdm(range(cfg.iterations), desc="finetune", leave=False, disable=QUIET):
        slot = it % len(targets)
        cls, _, w_t = targets[slot]
        mix_seed = derive_seed(cfg.seed, it)
        r_plus = draw_latent(G_s, mix_seed, condition=cls, truncation_psi=cfg.truncation_psi, w_avg=w_avgs.get(cls))
        w_hat = style_mix(w_t, r_plus, cfg.style_layers)
        x_hat = synthesize_batch(G_t, w_hat.unsqueeze(0).to(G_t.device))[0]
        loss = feature_l1_distance(discriminator_features(H_s, x_hat), target_feats[slot])
        if not is_finite(loss):
            raise NonFiniteLossError(f"non-finite fine-tuning loss at iteration {it}", where=it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        seeds.append(mix_seed)
        schedule.append(cls)
    G_t.module.eval()
    return FinetuneReport(loss_trace=trace, generator=G_t, mix_seeds=seeds, class_schedule=schedule)


def sista_g_finetune(
    x_t: torch.Tensor,
    inv: InversionResult,
    G_s: GeneratorHandle,
    H_s: DiscriminatorHandle,
    cfg: Optional[FinetuneConfig] = None,
) -> FinetuneReport:
    cfg = cfg or FinetuneConfig()
    if G_s.conditional and inv.condition is None:
        raise ConfigurationError("conditional generator needs an inversion result carrying a class")
    condition = inv.condition if G_s.conditional else None
    return _finetune([(condition, x_t, inv.w_plus)], G_s, H_s, cfg)


def sista_u_finetune(
    examples: Dict[int, torch.Tensor],
    G_s: GeneratorHandle,
    H_s: DiscriminatorHandle,
    cfg: Optional[FinetuneConfig] = None,
    inversions: Optional[Dict[int, InversionResult]] = None,
    inversion_cfg: Optional[InversionConfig] = None,
) -> FinetuneReport:
    """One shared generator, class examples visited round-robin (sorted by class)."""
    cfg = cfg or FinetuneConfig()
    if not G_s.conditional:
        raise ConfigurationError("multi-class fine-tuning needs a conditional generator")
    if not examples:
        raise ConfigurationError("no class examples supplied")
    num_classes = G_s.descriptor.num_classes
    bad = [c for c in examples if not 0 <= c < num_classes]
    if bad:
        raise ConfigurationError(f"example classes {bad} outside [0, {num_classes})")
    inversions = dict(inversions or {})
    targets = []
    for cls in sorted(examples):
        if cls not in inversions:
            inversions[cls] = invert_conditional(examples[cls], G_s, H_s, inversion_cfg, label=cls)
        targets.append((cls, examples[cls], inversions[cls].w_plus))
    report = _finetune(targets, G_s, H_s, cfg)
    console.print(f"[+] multi-class fine-tune schedule: " + ", ".join(f"class {c}: {report.class_schedule.count(c)}" for c in sorted(examples)))
    return report


def per_class_finetune(
    examples: Dict[int, torch.Tensor],
    gens: Dict[int, GeneratorHandle],
    discs: Union[DiscriminatorHandle, Dict[int, DiscriminatorHandle]],
    cfg: Optional[FinetuneConfig] = None,
    inversions: Optional[Dict[int, InversionResult]] = None,
    inversion_cfg: Optional[InversionConfig] = None,
) -> Dict[int, FinetuneReport]:
    """Independent fine-tune per class; class c runs with seed cfg.seed + c."""
    cfg = cfg or FinetuneConfig()
    if set(examples) != set(gens):
        raise ConfigurationError(f"example classes {sorted(examples)} != generator classes {sorted(gens)}")
    if isinstance(discs, dict) and set(discs) != set(gens):
        raise ConfigurationError("discriminator classes do not match generator classes")
    inversions = inversions or {}
    reports = {}
    for cls in sorted(examples):
        disc = discs[cls] if isinstance(discs, dict) else discs
        inv = inversions.get(cls) or invert(examples[cls], gens[cls], disc, inversion_cfg)
        class_cfg = cfg.model_copy(update={"seed": cfg.seed + cls})
        reports[cls] = sista_g_finetune(examples[cls], inv, gens[cls], disc, class_cfg)
    return reports
