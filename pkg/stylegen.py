#!/usr/bin/env python3
"""
stylegen.py

Style-based generator / discriminator handles.

A generator handle wraps any module that exposes

    mapping(z, c)                       -> w            (N, D)
    synthesis(w_plus, directives, capture)
                                        -> (images, {layer: activation NCHW})

so the rest of the toolkit never cares whether it is talking to the bundled toy
network or an external StyleGAN checkpoint. Activations are tapped at the output
of each synthesis block (after its nonlinearity, before the next block) and
interventions are applied in layer order inside the one forward pass, so later
layers see the modified values. The toy network also accepts
`resume=(layer, activation)` to restart a pass after `layer` from an externally
modified activation.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from sista_common import (
    AlignmentError,
    ConfigurationError,
    ContractViolation,
    UnsupportedFormatError,
    parameter_checksum,
    parse_index_ranges,
    resolve_device,
    torch_generator,
)

CHECKPOINT_FORMAT = "sista-toy"
CHECKPOINT_VERSION = 1

TOY_Z_DIM = 64
TOY_W_DIM = 64
TOY_RESOLUTION = 32
TOY_GEN_CHANNELS = (64, 48, 32, 16)
TOY_DISC_CHANNELS = (16, 32, 64, 64)
TOY_DISC_FEATURES = 64


# -----------------------------
# Descriptors
# -----------------------------
class StyleLayerSet(BaseModel):
    """Ordered, de-duplicated set of style-injection layer indices (L_st)."""

    model_config = ConfigDict(frozen=True)

    layer_indices: Tuple[int, ...] = ()

    @field_validator("layer_indices", mode="before")
    @classmethod
    def _coerce(cls, v):
        if isinstance(v, str):
            v = parse_index_ranges(v)
        v = [int(i) for i in v]
        if any(i < 0 for i in v):
            raise ValueError("style layer indices must be >= 0")
        if len(set(v)) != len(v):
            raise ValueError("style layer indices must be unique")
        return tuple(sorted(v))

    @classmethod
    def parse(cls, spec: Union[str, Iterable[int]]) -> "StyleLayerSet":
        return cls(layer_indices=spec)

    @property
    def indices(self) -> Tuple[int, ...]:
        return self.layer_indices

    def __contains__(self, item) -> bool:
        return int(item) in self.layer_indices

    def __len__(self) -> int:
        return len(self.layer_indices)

    def check_within(self, num_layers: int) -> "StyleLayerSet":
        bad = [i for i in self.layer_indices if i >= num_layers]
        if bad:
            raise ContractViolation(f"style layers {bad} out of range for a generator with L={num_layers}")
        return self

    def label(self) -> str:
        return ",".join(str(i) for i in self.layer_indices)


class ArchitectureDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str = "toy-generator"
    z_dim: int = TOY_Z_DIM
    w_dim: int = TOY_W_DIM
    resolution: int = TOY_RESOLUTION
    channels: Tuple[int, ...] = TOY_GEN_CHANNELS
    # empty -> 4, 8, 16, ... doubling per block (toy layout)
    layer_resolutions: Tuple[int, ...] = ()
    # number of w+ rows; None -> one per synthesis block
    num_ws: Optional[int] = None
    num_classes: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.num_classes is not None and self.num_classes < 1:
            raise ValueError("num_classes must be >= 1 for a conditional generator")
        if self.layer_resolutions and len(self.layer_resolutions) != len(self.channels):
            raise ValueError("layer_resolutions must list one entry per synthesis layer")
        if not self.layer_resolutions and self.resolution != 4 * 2 ** (len(self.channels) - 1):
            raise ValueError("toy layout needs resolution == 4 * 2**(blocks-1)")
        return self

    @property
    def num_layers(self) -> int:
        return self.num_ws if self.num_ws is not None else len(self.channels)

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    def activation_shapes(self) -> List[Tuple[int, int, int]]:
        """(H, W, V) per synthesis layer."""
        res = self.layer_resolutions or tuple(4 * 2 ** i for i in range(len(self.channels)))
        return [(r, r, c) for r, c in zip(res, self.channels)]


class DiscriminatorDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str = "toy-discriminator"
    resolution: int = TOY_RESOLUTION
    channels: Tuple[int, ...] = TOY_DISC_CHANNELS
    feature_dim: int = TOY_DISC_FEATURES
    # index len(channels) is the pre-logit feature vector
    taps: Tuple[int, ...] = (0, 1, 2, 3, 4)

    @model_validator(mode="after")
    def _check(self):
        if not self.taps:
            raise ValueError("a discriminator needs at least one tap")
        if any(t < 0 or t > len(self.channels) for t in self.taps):
            raise ValueError(f"taps must lie in [0, {len(self.channels)}]")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("taps must be unique")
        return self


# -----------------------------
# Activations and interventions
# -----------------------------
@dataclass
class ActivationTensor:
    """One layer's feature map, stored H x W x V."""

    values: torch.Tensor
    layer_index: int

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ContractViolation(f"activation must be H x W x V, got shape {tuple(self.values.shape)}")
        if self.values.shape[0] * self.values.shape[1] < 1 or self.values.shape[2] < 1:
            raise ContractViolation("activation tensor is empty")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def to_nchw(self) -> torch.Tensor:
        return self.values.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_nchw(cls, tensor: torch.Tensor, layer_index: int) -> "ActivationTensor":
        if tensor.ndim == 4:
            if tensor.shape[0] != 1:
                raise ContractViolation("from_nchw expects a single sample")
            tensor = tensor[0]
        return cls(values=tensor.permute(1, 2, 0).contiguous(), layer_index=layer_index)


def _check_ratio(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 100.0:
        raise ContractViolation(f"pruning ratio p={p} outside [0, 100]")
    return p


def percentile_thresholds(h: torch.Tensor, p: float) -> torch.Tensor:
    """Per-sample, per-channel p-th percentile over spatial positions of an NCHW tensor.

    Linear interpolation between closest ranks. Returns shape (N, V, 1, 1).
    """
    p = _check_ratio(p)
    if h.ndim != 4 or h.shape[2] * h.shape[3] < 1:
        raise ContractViolation(f"expected a non-empty NCHW tensor, got {tuple(h.shape)}")
    flat = h.flatten(2)
    tau = torch.quantile(flat, p / 100.0, dim=-1, keepdim=True, interpolation="linear")
    return tau.unsqueeze(-1)


def prune_activations(h: torch.Tensor, p: float, replacement: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Replace entries strictly below the per-channel threshold by zero or `replacement`."""
    tau = percentile_thresholds(h, p)
    mask = h < tau
    fill = torch.zeros_like(h) if replacement is None else replacement.to(device=h.device, dtype=h.dtype)
    return torch.where(mask, fill, h)


@dataclass(frozen=True)
class ZeroDirective:
    p: float

    def __post_init__(self):
        _check_ratio(self.p)

    def apply(self, h: torch.Tensor, layer_index: int) -> torch.Tensor:
        return prune_activations(h, self.p)


@dataclass(frozen=True)
class RewindDirective:
    p: float
    reference: ActivationTensor

    def __post_init__(self):
        _check_ratio(self.p)

    def apply(self, h: torch.Tensor, layer_index: int) -> torch.Tensor:
        if self.reference.layer_index != layer_index:
            raise AlignmentError(
                f"rewind reference is from layer {self.reference.layer_index}, applied at layer {layer_index}"
            )
        ref = self.reference.to_nchw()
        if tuple(ref.shape[1:]) != tuple(h.shape[1:]):
            raise AlignmentError(
                f"rewind reference shape {tuple(ref.shape[1:])} != activation shape {tuple(h.shape[1:])} at layer {layer_index}"
            )
        return prune_activations(h, self.p, replacement=ref.expand_as(h))


Directive = Union[ZeroDirective, RewindDirective]


@dataclass
class InterventionPlan:
    """layer index -> directive (None means leave the layer alone)."""

    style_layers: StyleLayerSet
    directives: Dict[int, Optional[Directive]] = field(default_factory=dict)

    def __post_init__(self):
        outside = [i for i in self.directives if i not in self.style_layers]
        if outside:
            raise ContractViolation(f"directives on non-style layers {sorted(outside)}")

    def active(self) -> Dict[int, Directive]:
        return {i: d for i, d in sorted(self.directives.items()) if d is not None}


# -----------------------------
# Toy networks
# -----------------------------
class MappingNetwork(nn.Module):
    """Two-layer MLP z (+ class embedding) -> w."""

    def __init__(self, z_dim: int, w_dim: int, num_classes: Optional[int] = None):
        super().__init__()
        self.embed = nn.Embedding(num_classes, w_dim) if num_classes else None
        in_dim = z_dim + (w_dim if num_classes else 0)
        self.net = nn.Sequential(
            nn.Linear(in_dim, w_dim),
            nn.LeakyReLU(0.2),
            nn.Linear(w_dim, w_dim),
        )

    def forward(self, z: torch.Tensor, c: Optional[torch.Tensor] = None) -> torch.Tensor:
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        if self.embed is not None:
            z = torch.cat([z, self.embed(c)], dim=1)
        return self.net(z)


class StyleBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, w_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.style = nn.Linear(w_dim, 2 * out_ch)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.instance_norm(self.conv(x))
        gamma, beta = self.style(w).chunk(2, dim=1)
        x = x * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]
        return self.act(x)


class ToyGenerator(nn.Module):
    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        ch = descriptor.channels
        self.mapping = MappingNetwork(descriptor.z_dim, descriptor.w_dim, descriptor.num_classes)
        self.const = nn.Parameter(torch.randn(1, ch[0], 4, 4))
        self.blocks = nn.ModuleList(
            StyleBlock(ch[i - 1] if i else ch[0], ch[i], descriptor.w_dim, upsample=i > 0) for i in range(len(ch))
        )
        self.to_rgb = nn.Conv2d(ch[-1], 3, kernel_size=1)

    def synthesis(
        self,
        w_plus: torch.Tensor,
        directives: Optional[Dict[int, Directive]] = None,
        capture: Iterable[int] = (),
        resume: Optional[Tuple[int, torch.Tensor]] = None,
    ):
        """w_plus (N, L, D). `resume=(layer, activation)` restarts the pass after `layer`."""
        directives = directives or {}
        capture = set(capture)
        captured = {}
        if resume is None:
            x = self.const.expand(w_plus.shape[0], -1, -1, -1)
            start = 0
        else:
            start = resume[0] + 1
            x = resume[1]
        for idx in range(start, len(self.blocks)):
            x = self.blocks[idx](x, w_plus[:, idx])
            if idx in directives:
                x = directives[idx].apply(x, idx)
            if idx in capture:
                captured[idx] = x
        return torch.tanh(self.to_rgb(x)), captured


class ToyDiscriminator(nn.Module):
    def __init__(self, descriptor: DiscriminatorDescriptor):
        super().__init__()
        ch = descriptor.channels
        self.blocks = nn.ModuleList()
        in_ch = 3
        for out_ch in ch:
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                    nn.LeakyReLU(0.2),
                    nn.AvgPool2d(2),
                )
            )
            in_ch = out_ch
        final_res = descriptor.resolution // 2 ** len(ch)
        self.prelogit = nn.Sequential(nn.Flatten(), nn.Linear(ch[-1] * final_res * final_res, descriptor.feature_dim), nn.LeakyReLU(0.2))
        self.logit = nn.Linear(descriptor.feature_dim, 1)

    def forward_features(self, x: torch.Tensor, taps: Iterable[int]) -> List[torch.Tensor]:
        taps = tuple(taps)
        feats = {}
        for idx, block in enumerate(self.blocks):
            x = block(x)
            feats[idx] = x
        feats[len(self.blocks)] = self.prelogit(x)
        return [feats[t] for t in taps]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.logit(self.forward_features(x, (len(self.blocks),))[0])


# -----------------------------
# Handles
# -----------------------------
@dataclass(eq=False)
class GeneratorHandle:
    descriptor: ArchitectureDescriptor
    module: nn.Module

    @property
    def conditional(self) -> bool:
        return self.descriptor.conditional

    @property
    def num_layers(self) -> int:
        return self.descriptor.num_layers

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def aligned_with(self, other: "GeneratorHandle") -> bool:
        return self.descriptor == other.descriptor

    def clone(self) -> "GeneratorHandle":
        return GeneratorHandle(descriptor=self.descriptor, module=copy.deepcopy(self.module))

    def checksum(self) -> str:
        return parameter_checksum(self.module)


@dataclass(eq=False)
class DiscriminatorHandle:
    descriptor: DiscriminatorDescriptor
    module: nn.Module

    def __post_init__(self):
        self.module.requires_grad_(False)
        self.module.eval()

    @property
    def taps(self) -> Tuple[int, ...]:
        return self.descriptor.taps

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def checksum(self) -> str:
        return parameter_checksum(self.module)


def build_toy_generator(seed: int = 0, num_classes: Optional[int] = None, descriptor: Optional[ArchitectureDescriptor] = None, device=None) -> GeneratorHandle:
    descriptor = descriptor or ArchitectureDescriptor(num_classes=num_classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ToyGenerator(descriptor)
    module.eval()
    return GeneratorHandle(descriptor=descriptor, module=module.to(resolve_device(device)))


def build_toy_discriminator(seed: int = 0, taps: Optional[Iterable[int]] = None, descriptor: Optional[DiscriminatorDescriptor] = None, device=None) -> DiscriminatorHandle:
    if descriptor is None:
        descriptor = DiscriminatorDescriptor() if taps is None else DiscriminatorDescriptor(taps=tuple(taps))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ToyDiscriminator(descriptor)
    return DiscriminatorHandle(descriptor=descriptor, module=module.to(resolve_device(device)))


# -----------------------------
# Operations
# -----------------------------
def check_extended_latent(w_plus: torch.Tensor, gen: GeneratorHandle, batched: bool = False) -> None:
    expected = (gen.num_layers, gen.descriptor.w_dim)
    shape = tuple(w_plus.shape[1:]) if batched else tuple(w_plus.shape)
    if shape != expected or (batched and w_plus.ndim != 3):
        raise ContractViolation(f"extended latent must be {'N x ' if batched else ''}{expected[0]} x {expected[1]}, got {tuple(w_plus.shape)}")
    if not torch.isfinite(w_plus).all():
        raise ContractViolation("extended latent has non-finite entries")


def _condition_tensor(gen: GeneratorHandle, condition, batch: int) -> Optional[torch.Tensor]:
    if gen.conditional and condition is None:
        raise ConfigurationError("conditional generator needs a class condition")
    if not gen.conditional and condition is not None:
        raise ConfigurationError("condition supplied to an unconditional generator")
    if condition is None:
        return None
    c = torch.as_tensor(condition, dtype=torch.long, device=gen.device).reshape(-1)
    if c.numel() == 1 and batch > 1:
        c = c.expand(batch)
    if ((c < 0) | (c >= gen.descriptor.num_classes)).any():
        raise ConfigurationError(f"condition {c.tolist()} outside [0, {gen.descriptor.num_classes})")
    return c


def map_latent(z: torch.Tensor, gen: GeneratorHandle, condition=None) -> torch.Tensor:
    """z (Dz,) -> w+ (L, D), or z (N, Dz) -> (N, L, D). Rows are identical copies of w."""
    single = z.ndim == 1
    zb = z.unsqueeze(0) if single else z
    if zb.ndim != 2 or zb.shape[1] != gen.descriptor.z_dim:
        raise ContractViolation(f"latent z must have length {gen.descriptor.z_dim}, got shape {tuple(z.shape)}")
    if not torch.isfinite(zb).all():
        raise ContractViolation("latent z has non-finite entries")
    c = _condition_tensor(gen, condition, zb.shape[0])
    with torch.no_grad():
        w = gen.module.mapping(zb.to(gen.device), c)
    w_plus = w.unsqueeze(1).repeat(1, gen.num_layers, 1)
    return w_plus[0] if single else w_plus


def mean_latent(gen: GeneratorHandle, samples: int = 10000, condition=None, seed: int = 0) -> torch.Tensor:
    z = torch.randn(samples, gen.descriptor.z_dim, generator=torch_generator(seed))
    return map_latent(z, gen, condition).mean(dim=0)


def draw_latent(gen: GeneratorHandle, seed: int, condition=None, truncation_psi: float = 1.0, w_avg: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Fresh z ~ N(0, I) seeded by `seed`, mapped to w+; optional truncation toward w_avg."""
    z = torch.randn(gen.descriptor.z_dim, generator=torch_generator(seed))
    w_plus = map_latent(z, gen, condition)
    if truncation_psi != 1.0:
        if w_avg is None:
            w_avg = mean_latent(gen, condition=condition)
        w_plus = w_avg + truncation_psi * (w_plus - w_avg)
    return w_plus


def synthesize(gen: GeneratorHandle, w_plus: torch.Tensor, plan: Optional[InterventionPlan] = None, capture: Optional[Iterable[int]] = None):
    """Single-latent forward pass. Returns (image (3,H,W) in [-1,1], {layer: ActivationTensor})."""
    check_extended_latent(w_plus, gen)
    directives = {}
    if plan is not None:
        plan.style_layers.check_within(gen.num_layers)
        directives = plan.active()
    capture = sorted(set(capture or ()))
    if any(i < 0 or i >= gen.num_layers for i in capture):
        raise ContractViolation(f"capture layers {capture} out of range for L={gen.num_layers}")
    images, captured = gen.module.synthesis(w_plus.unsqueeze(0).to(gen.device), directives=directives, capture=capture)
    image = images[0]
    if not torch.isfinite(image).all():
        raise ContractViolation("synthesis produced non-finite pixels")
    return image, {idx: ActivationTensor.from_nchw(t, idx) for idx, t in captured.items()}


def synthesize_batch(gen: GeneratorHandle, w_plus: torch.Tensor) -> torch.Tensor:
    """Differentiable batched forward without interventions (training paths)."""
    check_extended_latent(w_plus, gen, batched=True)
    images, _ = gen.module.synthesis(w_plus.to(gen.device))
    return images


def discriminator_features(disc: DiscriminatorHandle, x: torch.Tensor) -> List[torch.Tensor]:
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    res = disc.descriptor.resolution
    if xb.ndim != 4 or tuple(xb.shape[1:]) != (3, res, res):
        raise ContractViolation(f"discriminator expects 3 x {res} x {res} images, got {tuple(x.shape)}")
    feats = disc.module.forward_features(xb.to(disc.device), disc.taps)
    return [f[0] for f in feats] if single else feats


def feature_l1_distance(feats_a: List[torch.Tensor], feats_b: List[torch.Tensor]) -> torch.Tensor:
    """Sum over taps of the per-tap mean absolute difference."""
    if len(feats_a) != len(feats_b):
        raise ContractViolation("feature lists differ in length")
    total = feats_a[0].new_zeros(())
    for a, b in zip(feats_a, feats_b):
        total = total + (a - b).abs().mean()
    return total


# -----------------------------
# Checkpoints
# -----------------------------
def save_checkpoint(handle: Union[GeneratorHandle, DiscriminatorHandle], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "generator" if isinstance(handle, GeneratorHandle) else "discriminator"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "descriptor": handle.descriptor.model_dump(mode="json"),
        "state_dict": {k: v.detach().cpu() for k, v in handle.module.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def _unsupported(path: Path, why: str) -> UnsupportedFormatError:
    known = ", ".join(sorted(CHECKPOINT_ADAPTERS))
    return UnsupportedFormatError(f"{path}: {why}; known adapters: {known}")


def _load_toy(path: Path, device=None, kind: Optional[str] = None):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise _unsupported(path, f"not a readable toy checkpoint ({type(e).__name__})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise _unsupported(path, "missing sista-toy format marker")
    if "version" not in payload or int(payload["version"]) > CHECKPOINT_VERSION:
        raise _unsupported(path, f"unsupported checkpoint version {payload.get('version')!r}")
    stored_kind = payload.get("kind")
    if kind is not None and stored_kind != kind:
        raise _unsupported(path, f"checkpoint holds a {stored_kind}, not a {kind}")
    if stored_kind not in ("generator", "discriminator"):
        raise _unsupported(path, f"unknown checkpoint kind {stored_kind!r}")
    try:
        if stored_kind == "generator":
            descriptor = ArchitectureDescriptor.model_validate(payload["descriptor"])
            module = ToyGenerator(descriptor)
        else:
            descriptor = DiscriminatorDescriptor.model_validate(payload["descriptor"])
            module = ToyDiscriminator(descriptor)
        module.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, ValidationError, RuntimeError) as e:
        raise _unsupported(path, f"corrupt {stored_kind} payload ({type(e).__name__}: {e})") from e
    module = module.to(resolve_device(device))
    if stored_kind == "generator":
        module.eval()
        return GeneratorHandle(descriptor=descriptor, module=module)
    return DiscriminatorHandle(descriptor=descriptor, module=module)


class ExternalStyleGANModule(nn.Module):
    """Wraps an upstream StyleGAN2-ADA `G_ema` behind the toolkit's synthesis protocol.

    Interventions go through forward hooks on the ordered SynthesisLayer modules,
    so unlike the toy network this wrapper is not safe to share across threads.
    """

    def __init__(self, G: nn.Module):
        super().__init__()
        self.G = G
        self.layers = [m for _, m in G.synthesis.named_modules() if type(m).__name__ == "SynthesisLayer"]

    def mapping(self, z, c=None):
        if c is None:
            c_in = torch.zeros(z.shape[0], self.G.c_dim, device=z.device)
        else:
            c_in = F.one_hot(c, self.G.c_dim).float()
        return self.G.mapping(z, c_in, truncation_psi=1.0)[:, 0]

    def synthesis(self, w_plus, directives=None, capture=()):
        directives = directives or {}
        capture = set(capture)
        captured = {}
        handles = []

        def make_hook(idx):
            def hook(module, inputs, output):
                out = directives[idx].apply(output, idx) if idx in directives else output
                if idx in capture:
                    captured[idx] = out
                return out
            return hook

        for idx, layer in enumerate(self.layers):
            if idx in directives or idx in capture:
                handles.append(layer.register_forward_hook(make_hook(idx)))
        try:
            images = self.G.synthesis(w_plus, noise_mode="const")
        finally:
            for h in handles:
                h.remove()
        return images, captured


def _load_stylegan2_ada(path: Path, device=None, kind: Optional[str] = None):
    try:
        import legacy  # noqa: F401  (from the stylegan2-ada-pytorch checkout)
        import dnnlib
    except ImportError as e:
        raise _unsupported(path, "stylegan2-ada adapter needs the upstream 'legacy' and 'dnnlib' modules on PYTHONPATH") from e
    if kind not in (None, "generator"):
        raise _unsupported(path, "stylegan2-ada adapter only loads generators")
    try:
        with dnnlib.util.open_url(str(path)) as fp:
            G = legacy.load_network_pkl(fp)["G_ema"]
    except Exception as e:
        raise _unsupported(path, f"not a stylegan2-ada pickle ({type(e).__name__})") from e
    module = ExternalStyleGANModule(G.eval())
    descriptor = ArchitectureDescriptor(
        kind="stylegan2-ada",
        z_dim=G.z_dim,
        w_dim=G.w_dim,
        resolution=G.img_resolution,
        channels=tuple(int(m.out_channels) for m in module.layers),
        layer_resolutions=tuple(int(m.resolution) for m in module.layers),
        num_ws=int(G.num_ws),
        num_classes=int(G.c_dim) if G.c_dim else None,
    )
    return GeneratorHandle(descriptor=descriptor, module=module.to(resolve_device(device)))


CHECKPOINT_ADAPTERS = {
    "toy": _load_toy,
    "stylegan2-ada-pkl": _load_stylegan2_ada,
}


def load_checkpoint(path, adapter: str = "toy", device=None, kind: Optional[str] = None):
    path = Path(path)
    if adapter not in CHECKPOINT_ADAPTERS:
        raise _unsupported(path, f"unknown adapter {adapter!r}")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return CHECKPOINT_ADAPTERS[adapter](path, device=device, kind=kind)
