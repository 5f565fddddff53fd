"""U-Net split into a feature extractor ``psi`` and a segmentation head ``f``.

``psi`` holds the whole encoder and every decoder stage except the last, and
ends with the upsample + skip-concatenation that feeds the last stage. ``f`` is
that last double convolution plus the 1x1 projection to class logits. The
adversary ``f_prime`` is a structural copy of ``f``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    stages: int = 5
    base_channels: int = 16
    in_channels: int = 1
    num_classes: int = 2
    leaky_slope: float = 0.01

    def validate(self) -> None:
        if self.stages < 2:
            raise ConfigError("stages must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.stages)]

    @property
    def feature_channels(self) -> int:
        return 2 * self.base_channels

    def check_input(self, height: int, width: int) -> None:
        factor = 2 ** (self.stages - 1)
        if height % factor or width % factor:
            raise ConfigError(f"spatial size {height}x{width} not divisible by {factor}")


FULL_SCALE = UNetConfig(base_channels=64)
DESK_SCALE = UNetConfig(base_channels=16)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, slope: float):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.LeakyReLU(slope),
        )


class FeatureExtractor(nn.Module):
    """psi: encoder, all decoder stages but the last, and the final upsample+concat."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = nn.ModuleList(
            DoubleConv(cfg.in_channels if i == 0 else ch[i - 1], ch[i], cfg.leaky_slope) for i in range(cfg.stages)
        )
        # up[i] maps stage i+1 -> i channels after a nearest 2x resize
        self.up = nn.ModuleList(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1) for i in range(cfg.stages - 1))
        # decoder stages 1..stages-2; stage 0 lives in the head
        self.decoder = nn.ModuleList(
            DoubleConv(2 * ch[i], ch[i], cfg.leaky_slope) for i in range(1, cfg.stages - 1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.cfg.check_input(x.shape[-2], x.shape[-1])
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i < self.cfg.stages - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for i in range(self.cfg.stages - 2, -1, -1):
            x = self.up[i](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = torch.cat([skips[i], x], dim=1)
            if i > 0:
                x = self.decoder[i - 1](x)
        return x


class SegHead(nn.Module):
    """f / f': last decoder double conv + 1x1 class projection."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.block = DoubleConv(cfg.feature_channels, cfg.base_channels, cfg.leaky_slope)
        self.proj = nn.Conv2d(cfg.base_channels, cfg.num_classes, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.proj(self.block(z))


class ModelBundle(nn.Module):
    def __init__(self, cfg: UNetConfig, psi: FeatureExtractor, f: SegHead, f_prime: Optional[SegHead] = None):
        super().__init__()
        self.cfg = cfg
        self.psi = psi
        self.f = f
        self.f_prime = f_prime

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.f(self.psi(x))

    def parts(self) -> dict[str, nn.Module]:
        out = {"psi": self.psi, "f": self.f}
        if self.f_prime is not None:
            out["f_prime"] = self.f_prime
        return out

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self(x).argmax(dim=1)


def build_unet(cfg: UNetConfig = DESK_SCALE, seed: int = 0) -> ModelBundle:
    cfg.validate()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        psi, f = FeatureExtractor(cfg), SegHead(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return ModelBundle(cfg, psi, f)


def extract_features(psi: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
    return psi(x)


def head_forward(head: SegHead, z: torch.Tensor) -> torch.Tensor:
    if z.shape[1] != head.block[0].in_channels:
        raise ValueError(f"feature map has {z.shape[1]} channels, head expects {head.block[0].in_channels}")
    return head(z)


def duplicate_head(f: SegHead) -> SegHead:
    return copy.deepcopy(f)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(bundle.cfg),
        "psi": bundle.psi.state_dict(),
        "f": bundle.f.state_dict(),
        "f_prime": None if bundle.f_prime is None else bundle.f_prime.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> ModelBundle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = UNetConfig(**payload["config"])
    bundle = build_unet(cfg)
    bundle.psi.load_state_dict(payload["psi"])
    bundle.f.load_state_dict(payload["f"])
    if payload["f_prime"] is not None:
        bundle.f_prime = SegHead(cfg)
        bundle.f_prime.load_state_dict(payload["f_prime"])
    return bundle
