"""Generator, mapping network, style-defect encoder and multi-task discriminator.

All modules consume batches: images ``(B, 3, H, W)``, domain ids ``(B,)`` and
return batched codes ``(B, Cfg, Hb, Wb)`` / styles ``(B, style_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ANCHOR_ID, DefectDomain, ModelConfig, validate_config

DomainArg = Union[int, DefectDomain, torch.Tensor]


def _domain_ids(y: DomainArg, batch: int, n_domains: int) -> torch.Tensor:
    if isinstance(y, DefectDomain):
        y = y.id
    if isinstance(y, int):
        y = torch.full((batch,), y, dtype=torch.long)
    y = torch.as_tensor(y, dtype=torch.long)
    if y.ndim == 0:
        y = y.expand(batch)
    if y.shape[0] != batch:
        raise ValueError(f"got {y.shape[0]} domain ids for batch of {batch}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n_domains):
        raise ValueError(f"domain id out of range [0, {n_domains})")
    return y


def zero_anchor(code: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Replace anchor-domain rows with exact zeros (also robust to inf/nan)."""
    keep = (y != ANCHOR_ID).view(-1, *([1] * (code.ndim - 1)))
    return torch.where(keep, code, torch.zeros_like(code))


def adain_modulate(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                   eps: float = 1e-5) -> torch.Tensor:
    """Instance-normalize each channel, then apply per-channel scale ``gamma`` and shift ``beta``.

    ``gamma`` and ``beta`` have shape ``(B, C)``.
    """
    if features.shape[2] * features.shape[3] < 2:
        raise ValueError("AdaIN needs at least two spatial positions per channel")
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (features - mean) / torch.sqrt(var + eps)
    return gamma[:, :, None, None] * normed + beta[:, :, None, None]


class AdaIN(nn.Module):
    def __init__(self, style_dim: int, num_features: int):
        super().__init__()
        self.fc = nn.Linear(style_dim, num_features * 2)
        with torch.no_grad():
            self.fc.bias[:num_features].fill_(1.0)
            self.fc.bias[num_features:].zero_()

    def affine(self, style):
        return self.fc(style).chunk(2, dim=1)

    def forward(self, x, style):
        gamma, beta = self.affine(style)
        return adain_modulate(x, gamma, beta)


class ResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, normalize=False, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(dim_in, affine=True) if normalize else nn.Identity()
        self.norm2 = nn.InstanceNorm2d(dim_in, affine=True) if normalize else nn.Identity()
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else nn.Identity()

    def forward(self, x):
        s = self.shortcut(x)
        if self.downsample:
            s = F.avg_pool2d(s, 2)
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return (s + h) / math.sqrt(2)


class UpBlk(nn.Module):
    """Upsampling residual block with plain instance norm (background path)."""

    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
        self.norm2 = nn.InstanceNorm2d(dim_out, affine=True)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else nn.Identity()

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return (self.shortcut(x) + h) / math.sqrt(2)


class AdaINUpBlk(nn.Module):
    """Upsampling residual block whose normalizations are style-modulated (defect path)."""

    def __init__(self, dim_in, dim_out, style_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else nn.Identity()

    def forward(self, x, style):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(F.leaky_relu(self.norm1(x, style), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, style), 0.2))
        return (self.shortcut(x) + h) / math.sqrt(2)


class NoiseInjection(nn.Module):
    """Adds per-pixel Gaussian noise scaled by one learned scalar."""

    def __init__(self, init: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.tensor(float(init)))

    def forward(self, x, generator: Optional[torch.Generator] = None, enabled: bool = True):
        if not enabled:
            return x
        noise = torch.randn(x.shape[0], 1, x.shape[2], x.shape[3], generator=generator,
                            dtype=x.dtype)
        return x + self.weight * noise


@dataclass
class GeneratorState:
    bg_features: torch.Tensor
    fg_code_extracted: torch.Tensor
    injected_code: Optional[torch.Tensor] = None
    bg_stack: Optional[torch.Tensor] = None
    fg_stack: Optional[torch.Tensor] = None


@dataclass
class DiscriminatorOutput:
    adv_logits: torch.Tensor
    fg_logits: torch.Tensor
    bg_logits: torch.Tensor


def _enc_channels(cfg: ModelConfig) -> list[int]:
    return [min(cfg.base_channels * 2 ** (i + 1), cfg.base_channels * 4) for i in range(cfg.n_down)]


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = validate_config(cfg)
        ch = cfg.base_channels
        enc = _enc_channels(cfg)
        self.from_rgb = nn.Conv2d(3, ch, 3, 1, 1)
        dims = [ch] + enc
        self.encoder = nn.ModuleList(
            ResBlk(dims[i], dims[i + 1], normalize=True, downsample=True) for i in range(cfg.n_down)
        )
        self.to_bottleneck = nn.Sequential(
            nn.InstanceNorm2d(dims[-1], affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(dims[-1], cfg.bottleneck_channels, 1),
        )
        dec = list(reversed(dims))  # e.g. [64, 32, 16]
        self.bg_in = nn.Conv2d(cfg.bg_channels, dec[0], 1)
        self.fg_in = nn.Conv2d(cfg.fg_channels, dec[0], 1)
        self.bg_decoder = nn.ModuleList(UpBlk(dec[i], dec[i + 1]) for i in range(cfg.n_down))
        self.fg_decoder = nn.ModuleList(
            AdaINUpBlk(dec[i], dec[i + 1], cfg.style_dim) for i in range(cfg.n_down)
        )
        self.to_rgb = nn.Sequential(
            nn.InstanceNorm2d(ch, affine=True), nn.LeakyReLU(0.2), nn.Conv2d(ch, 3, 1),
        )

    def encode(self, x: torch.Tensor) -> GeneratorState:
        h = self.from_rgb(x)
        for blk in self.encoder:
            h = blk(h)
        h = self.to_bottleneck(h)
        nbg = self.cfg.bg_channels
        return GeneratorState(bg_features=h[:, :nbg], fg_code_extracted=h[:, nbg:])

    def decode_background(self, bg_features: torch.Tensor) -> torch.Tensor:
        h = self.bg_in(bg_features)
        for blk in self.bg_decoder:
            h = blk(h)
        return h

    def decode_foreground(self, code: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        h = self.fg_in(code)
        for blk in self.fg_decoder:
            h = blk(h, style)
        return h

    @staticmethod
    def merge(fg_stack: torch.Tensor, bg_stack: torch.Tensor) -> torch.Tensor:
        # max over each (fg_k, bg_k) channel pair == window-2 max pool along depth
        return torch.maximum(fg_stack, bg_stack)

    def decode(self, state: GeneratorState, code: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        expected = (cfg.fg_channels, cfg.bottleneck_size, cfg.bottleneck_size)
        if tuple(code.shape[1:]) != expected:
            raise ValueError(f"defect code shape {tuple(code.shape[1:])} != {expected}")
        if style.shape[1] != cfg.style_dim:
            raise ValueError(f"style dim {style.shape[1]} != {cfg.style_dim}")
        bg_stack = self.decode_background(state.bg_features)
        fg_stack = self.decode_foreground(code, style)
        state.bg_stack, state.fg_stack, state.injected_code = bg_stack, fg_stack, code
        return torch.tanh(self.to_rgb(self.merge(fg_stack, bg_stack)))

    def forward(self, x, code, style):
        state = self.encode(x)
        return self.decode(state, code, style), state


class MappingNetwork(nn.Module):
    """Latent code -> (defect code, style) through N domain branches."""

    def __init__(self, cfg: ModelConfig, noise_init: float = 0.1):
        super().__init__()
        self.cfg = validate_config(cfg)
        hid = cfg.mapping_hidden
        self.code_ch = cfg.base_channels
        hb = cfg.bottleneck_size
        self.shared = nn.Sequential(
            nn.Linear(cfg.latent_dim, hid), nn.LeakyReLU(0.2),
            nn.Linear(hid, hid), nn.LeakyReLU(0.2),
        )
        self.style_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(hid, hid), nn.LeakyReLU(0.2), nn.Linear(hid, cfg.style_dim))
            for _ in range(cfg.n_domains)
        )
        self.code_fc = nn.ModuleList(nn.Linear(hid, self.code_ch * hb * hb) for _ in range(cfg.n_domains))
        self.code_conv1 = nn.ModuleList(
            nn.Conv2d(self.code_ch, self.code_ch, 3, 1, 1) for _ in range(cfg.n_domains))
        self.code_conv2 = nn.ModuleList(
            nn.Conv2d(self.code_ch, cfg.fg_channels, 3, 1, 1) for _ in range(cfg.n_domains))
        self.noise = nn.ModuleList(
            nn.ModuleList(NoiseInjection(noise_init) for _ in range(3)) for _ in range(cfg.n_domains)
        )

    def _branch(self, k: int, h: torch.Tensor, generator, use_noise: bool):
        hb = self.cfg.bottleneck_size
        noise = self.noise[k]
        c = self.code_fc[k](h).view(-1, self.code_ch, hb, hb)
        c = F.leaky_relu(noise[0](c, generator, use_noise), 0.2)
        c = F.leaky_relu(noise[1](self.code_conv1[k](c), generator, use_noise), 0.2)
        c = noise[2](self.code_conv2[k](c), generator, use_noise)
        return c, self.style_heads[k](h)

    def forward(self, z: torch.Tensor, y: DomainArg, generator: Optional[torch.Generator] = None,
                use_noise: bool = True):
        if not torch.isfinite(z).all():
            raise ValueError("latent code must be finite")
        y = _domain_ids(y, z.shape[0], self.cfg.n_domains)
        h = self.shared(z)
        cfg = self.cfg
        code = h.new_zeros(z.shape[0], cfg.fg_channels, cfg.bottleneck_size, cfg.bottleneck_size)
        style = h.new_zeros(z.shape[0], cfg.style_dim)
        # only the selected branches run, so unselected heads never enter the graph
        for k in torch.unique(y).tolist():
            idx = (y == k).nonzero(as_tuple=True)[0]
            c, s = self._branch(k, h[idx], generator, use_noise)
            code = code.index_put((idx,), c)
            style = style.index_put((idx,), s)
        return zero_anchor(code, y), style

    def set_noise_scale(self, value: float) -> None:
        with torch.no_grad():
            for branch in self.noise:
                for n in branch:
                    n.weight.fill_(value)


class StyleDefectEncoder(nn.Module):
    """Reference image -> (defect code, style) for a requested domain."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = validate_config(cfg)
        ch = cfg.base_channels
        dims = [ch] + _enc_channels(cfg)
        self.from_rgb = nn.Conv2d(3, ch, 3, 1, 1)
        self.trunk = nn.Sequential(
            *(ResBlk(dims[i], dims[i + 1], downsample=True) for i in range(cfg.n_down)),
            nn.LeakyReLU(0.2),
        )
        feat = dims[-1]
        self.code_heads = nn.ModuleList(nn.Conv2d(feat, cfg.fg_channels, 3, 1, 1)
                                        for _ in range(cfg.n_domains))
        self.style_heads = nn.ModuleList(nn.Linear(feat, cfg.style_dim) for _ in range(cfg.n_domains))

    def forward(self, x: torch.Tensor, y: DomainArg):
        y = _domain_ids(y, x.shape[0], self.cfg.n_domains)
        h = self.trunk(self.from_rgb(x))
        pooled = h.mean(dim=(2, 3))
        cfg = self.cfg
        code = h.new_zeros(x.shape[0], cfg.fg_channels, cfg.bottleneck_size, cfg.bottleneck_size)
        style = h.new_zeros(x.shape[0], cfg.style_dim)
        for k in torch.unique(y).tolist():
            idx = (y == k).nonzero(as_tuple=True)[0]
            code = code.index_put((idx,), self.code_heads[k](h[idx]))
            style = style.index_put((idx,), self.style_heads[k](pooled[idx]))
        return zero_anchor(code, y), style


class Discriminator(nn.Module):
    """Shared trunk with N adversarial branches, a defect classifier and a product classifier.

    The product classifier taps the trunk at half resolution; the adversarial
    and defect heads read the final trunk features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = validate_config(cfg)
        ch = cfg.base_channels
        n_down = max(1, int(round(math.log2(cfg.image_size))) - 2)  # down to 4x4
        dims = [ch] + [min(ch * 2 ** (i + 1), ch * 8) for i in range(n_down)]
        self.from_rgb = nn.Conv2d(3, ch, 3, 1, 1)
        self.stem = ResBlk(dims[0], dims[1], downsample=True)
        self.rest = nn.Sequential(*(ResBlk(dims[i], dims[i + 1], downsample=True)
                                    for i in range(1, n_down)))
        final = cfg.image_size // 2 ** n_down
        self.out = nn.Sequential(nn.LeakyReLU(0.2), nn.Conv2d(dims[-1], dims[-1], final),
                                 nn.LeakyReLU(0.2), nn.Flatten())
        self.adv_head = nn.Linear(dims[-1], cfg.n_domains)
        self.fg_head = nn.Linear(dims[-1], cfg.n_domains)
        self.bg_head = nn.Sequential(
            nn.LeakyReLU(0.2), nn.Conv2d(dims[1], dims[1], 3, 1, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(dims[1], cfg.n_products),
        )

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        early = self.stem(self.from_rgb(x))
        feat = self.out(self.rest(early))
        return DiscriminatorOutput(self.adv_head(feat), self.fg_head(feat), self.bg_head(early))

    def branch_logit(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.forward(x).adv_logits.gather(1, y.view(-1, 1)).squeeze(1)


@dataclass
class Nets:
    G: Generator
    M: MappingNetwork
    E: StyleDefectEncoder
    D: Discriminator

    def modules(self) -> dict[str, nn.Module]:
        return {"G": self.G, "M": self.M, "E": self.E, "D": self.D}


def build_nets(cfg: ModelConfig, seed: Optional[int] = None) -> Nets:
    """Construct all four networks with deterministic initialization."""
    validate_config(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        return Nets(Generator(cfg), MappingNetwork(cfg), StyleDefectEncoder(cfg), Discriminator(cfg))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# Functional wrappers matching the per-network operations.

def mapping_forward(M: MappingNetwork, z, target: DomainArg, rng: Optional[torch.Generator] = None,
                    use_noise: bool = True):
    squeeze = z.ndim == 1
    code, style = M(z.unsqueeze(0) if squeeze else z, target, rng, use_noise)
    return (code[0], style[0]) if squeeze else (code, style)


def encoder_forward(E: StyleDefectEncoder, x, domain: DomainArg):
    squeeze = x.ndim == 3
    code, style = E(x.unsqueeze(0) if squeeze else x, domain)
    return (code[0], style[0]) if squeeze else (code, style)


def generator_encode(G: Generator, x) -> GeneratorState:
    return G.encode(x if x.ndim == 4 else x.unsqueeze(0))


def generator_decode(G: Generator, state: GeneratorState, code, style):
    return G.decode(state, code if code.ndim == 4 else code.unsqueeze(0),
                    style if style.ndim == 2 else style.unsqueeze(0))


def generate(G: Generator, x, code, style):
    squeeze = x.ndim == 3
    if squeeze:
        x, code, style = x.unsqueeze(0), code.unsqueeze(0), style.unsqueeze(0)
    out, state = G(x, code, style)
    return (out[0] if squeeze else out), state


def discriminator_forward(D: Discriminator, x) -> DiscriminatorOutput:
    return D(x if x.ndim == 4 else x.unsqueeze(0))
