"""Interactive unlearnable-noise generator.

A frozen promptable segmentation core gets three extra decoder tokens (the
noise tokens). After the decoder has updated them they pass through a small
noise head and are dotted with the decoder's per-pixel features; tanh of that
product, scaled by a per-pixel budget map, is the noise field. The bound holds
by construction, nothing is clipped afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .datagen import MaskPrompt
from .segmodel import PromptableSegModel, SegConfig, _hyper

NUM_NOISE_TOKENS = 3
POINT_RADIUS = 3


@dataclass(frozen=True)
class NoiseBudget:
    eps_target: float = 8 / 255
    eps_unrelated: float = 2 / 255
    train_scale: int = 4

    def __post_init__(self):
        if not 0 < self.eps_target <= 1:
            raise ValueError("eps_target must lie in (0, 1]")
        if not 0 <= self.eps_unrelated <= self.eps_target:
            raise ValueError("eps_unrelated must lie in [0, eps_target]")
        if int(self.train_scale) != self.train_scale or self.train_scale < 1:
            raise ValueError("train_scale must be a positive integer")

    def scale(self, mode: str) -> int:
        if mode == "infer":
            return 1
        if mode == "train":
            return int(self.train_scale)
        raise ValueError(f"unknown mode {mode!r}")


def prompt_region(prompt: MaskPrompt) -> np.ndarray:
    """Pixels that receive the target budget: the mask, the filled box, or a disk around the point."""
    if prompt.kind != "point":
        return np.asarray(prompt.mask, dtype=bool)
    ys, xs = np.nonzero(prompt.mask)
    h, w = prompt.mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    region = np.zeros((h, w), dtype=bool)
    for y, x in zip(ys, xs):
        region |= (yy - y) ** 2 + (xx - x) ** 2 <= POINT_RADIUS ** 2
    return region


def eps_map(region, budget: NoiseBudget):
    """Per-pixel budget: eps_target inside ``region`` and eps_unrelated elsewhere (same type as region)."""
    if isinstance(region, torch.Tensor):
        r = region.to(torch.float64)
    else:
        r = np.asarray(region, dtype=np.float64)
    return budget.eps_unrelated + (budget.eps_target - budget.eps_unrelated) * r


def _below_one(dtype) -> float:
    return float(np.nextafter(np.array(1.0, dtype=np.dtype(str(dtype).replace("torch.", ""))), 0))


def noise_from_features(f_dec, t_noise, eps, scale: int = 1):
    """tanh(f_dec . t_noise^T) * eps / scale.

    f_dec: (B, C, H, W); t_noise: (B, 3, C) or (3, C); eps: (B, H, W) budget map.
    Returns (B, 3, H, W). tanh rounds to exactly +-1 in float arithmetic for large
    arguments; the raw field is held one ulp inside (-1, 1) so |delta| < eps stays strict.
    """
    if t_noise.dim() == 2:
        t_noise = t_noise.unsqueeze(0).expand(f_dec.shape[0], -1, -1)
    raw = torch.tanh(torch.einsum("bchw,bkc->bkhw", f_dec, t_noise))
    lim = _below_one(raw.dtype)
    raw = raw.clamp(-lim, lim)
    eps = torch.as_tensor(eps, dtype=raw.dtype, device=raw.device)
    return raw * eps.unsqueeze(1) / scale


def apply_noise(image, delta):
    """clip(image + delta, 0, 1); works on numpy arrays and tensors of equal shape."""
    if tuple(image.shape) != tuple(delta.shape):
        raise ValueError(f"shape mismatch: image {tuple(image.shape)} vs delta {tuple(delta.shape)}")
    if isinstance(image, torch.Tensor):
        return (image + delta).clamp(0.0, 1.0)
    return np.clip(image + delta, 0.0, 1.0)


class NoiseGenerator(nn.Module):
    """Promptable core (frozen) + trainable noise tokens and noise head."""

    arch = "noise_generator"

    def __init__(self, cfg: SegConfig | None = None, core: PromptableSegModel | None = None):
        super().__init__()
        self.core = core if core is not None else PromptableSegModel(cfg)
        self.cfg = self.core.cfg
        c = self.cfg.dim
        self.noise_tokens = nn.Parameter(torch.randn(NUM_NOISE_TOKENS, c) * 0.02)
        self.noise_head = _hyper(c)

    def hparams(self) -> dict:
        return self.core.hparams()

    def freeze_core(self) -> None:
        for p in self.core.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def zero_noise(self) -> None:
        """Make the generator emit delta == 0 (final noise-head layer set to zero)."""
        with torch.no_grad():
            self.noise_head[-1].weight.zero_()
            self.noise_head[-1].bias.zero_()

    def final_tokens(self, image, prompt):
        tokens, f_dec = self.core.decode(image, prompt, extra_tokens=self.noise_tokens)
        k = self.cfg.num_output_tokens
        updated = tokens[:, k : k + NUM_NOISE_TOKENS]
        return self.noise_head(updated), f_dec

    def forward(self, image, prompt, region, budget: NoiseBudget, mode: str = "infer"):
        """Noise field (B, 3, H, W) for images (B, 3, H, W), prompt masks and budget regions (B, H, W)."""
        if not bool(prompt.flatten(1).any(dim=1).all()):
            raise ValueError("empty prompt: nothing to protect")
        if tuple(region.shape) != tuple(prompt.shape):
            raise ValueError("region and prompt shapes differ")
        t_noise, f_dec = self.final_tokens(image, prompt)
        return noise_from_features(f_dec, t_noise, eps_map(region, budget), budget.scale(mode))


def generate_noise(generator: NoiseGenerator, image: np.ndarray, prompt: MaskPrompt, budget: NoiseBudget,
                   mode: str = "infer") -> np.ndarray:
    """Single-image convenience wrapper: HxWx3 image in [0, 1] -> HxWx3 noise field."""
    if not prompt.mask.any():
        raise ValueError("empty prompt: nothing to protect")
    dtype = next(generator.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)[None]
    p = torch.as_tensor(prompt.mask, dtype=dtype)[None]
    r = torch.as_tensor(prompt_region(prompt))[None]
    with torch.no_grad():
        delta = generator(x, p, r, budget, mode)
    return delta[0].permute(1, 2, 0).numpy()


def eg_scaling_check(generator: NoiseGenerator, image: np.ndarray, prompt: MaskPrompt,
                     budget: NoiseBudget) -> bool:
    """True when the train-mode field equals the inference field divided by the scaling factor."""
    generator.eval()
    d_train = generate_noise(generator, image, prompt, budget, "train")
    d_infer = generate_noise(generator, image, prompt, budget, "infer")
    return bool(np.array_equal(d_train, d_infer / budget.train_scale))
