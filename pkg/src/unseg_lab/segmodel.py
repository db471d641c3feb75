"""Promptable segmentation model, victim models and the checkpoint container.

The promptable model is a miniature SAM: a strided-conv image encoder, a
mask-prompt encoder producing one sparse token plus a dense additive
embedding, and a two-way attention mask decoder with 4 output tokens. The
decoder's upsampled per-pixel feature map ``f_dec`` (B, C, H, W) is exposed so
the noise head can project it onto noise tokens.

Tensors use the torch layout (B, 3, H, W) for images and (B, H, W) for prompt
masks and binary logits.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SegConfig:
    image_size: int = 64
    dim: int = 64
    depth: int = 4
    heads: int = 4
    num_output_tokens: int = 4
    mlp_ratio: int = 2

    @property
    def grid(self) -> int:
        return self.image_size // 4

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


class ImageEncoder(nn.Module):
    """Strided conv stack to a (C, H/4, W/4) grid."""

    def __init__(self, cfg: SegConfig):
        super().__init__()
        c = cfg.dim
        self.stem = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.block1 = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.GELU(), nn.Conv2d(c, c, 3, padding=1))
        self.block2 = nn.Sequential(nn.Conv2d(c, c, 3, padding=2, dilation=2), nn.GELU(),
                                    nn.Conv2d(c, c, 3, padding=1))
        self.pos = nn.Parameter(torch.randn(1, c, cfg.grid, cfg.grid) * 0.02)

    def forward(self, image):
        x = self.stem(image)
        x = F.gelu(x + self.block1(x))
        x = F.gelu(x + self.block2(x))
        return x


class PromptEncoder(nn.Module):
    """Binary prompt mask -> one sparse token and a dense additive embedding.

    The mask is average-pooled to the feature grid, so point, box and mask
    prompts all share one input path.
    """

    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.grid = cfg.grid
        self.dense = nn.Conv2d(1, cfg.dim, 1)
        self.token = nn.Linear(cfg.grid * cfg.grid, cfg.dim)
        self.type_embed = nn.Parameter(torch.randn(cfg.dim) * 0.02)

    def forward(self, prompt):
        pooled = F.adaptive_avg_pool2d(prompt.unsqueeze(1).to(self.dense.weight.dtype), self.grid)
        # renormalise so a single-pixel point prompt is not washed out by pooling
        peak = pooled.flatten(1).amax(dim=1).clamp_min(1e-6)[:, None, None, None]
        pooled = pooled / peak
        tok = self.token(pooled.flatten(1)) + self.type_embed
        return tok.unsqueeze(1), self.dense(pooled)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        b, nq, c = q.shape
        h = self.heads
        q = self.q(q).view(b, nq, h, c // h).transpose(1, 2)
        k = self.k(k).view(b, -1, h, c // h).transpose(1, 2)
        v = self.v(v).view(b, -1, h, c // h).transpose(1, 2)
        attn = (q @ k.transpose(-1, -2)) / (c // h) ** 0.5
        o = attn.softmax(dim=-1) @ v
        return self.out(o.transpose(1, 2).reshape(b, nq, c))


class TwoWayBlock(nn.Module):
    """Token self-attn, token->image cross-attn, token MLP, image->token cross-attn."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, src, token_pe, src_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        tokens = self.norm2(tokens + self.t2i(tokens + token_pe, src + src_pe, src))
        tokens = self.norm3(tokens + self.mlp(tokens))
        src = self.norm4(src + self.i2t(src + src_pe, tokens + token_pe, tokens))
        return tokens, src


class MaskDecoder(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.blocks = nn.ModuleList(TwoWayBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_attn = Attention(cfg.dim, cfg.heads)
        self.final_norm = nn.LayerNorm(cfg.dim)
        c = cfg.dim
        # two stride-2 transposed convs take the grid back to full resolution
        self.up1 = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.up_norm = nn.GroupNorm(1, c)
        self.up2 = nn.ConvTranspose2d(c, c, 2, stride=2)

    def forward(self, feat, pos, tokens):
        b, c, g, _ = feat.shape
        src = feat.flatten(2).transpose(1, 2)
        src_pe = pos.flatten(2).transpose(1, 2).expand(b, -1, -1)
        token_pe = tokens
        for blk in self.blocks:
            tokens, src = blk(tokens, src, token_pe, src_pe)
        tokens = self.final_norm(tokens + self.final_attn(tokens + token_pe, src + src_pe, src))
        grid = src.transpose(1, 2).reshape(b, c, g, g)
        f_dec = F.gelu(self.up2(F.gelu(self.up_norm(self.up1(grid)))))
        return tokens, f_dec


def _hyper(dim):
    return nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))


class PromptableSegModel(nn.Module):
    arch = "promptable_seg"

    def __init__(self, cfg: SegConfig | None = None):
        super().__init__()
        self.cfg = cfg or SegConfig()
        c = self.cfg.dim
        self.image_encoder = ImageEncoder(self.cfg)
        self.prompt_encoder = PromptEncoder(self.cfg)
        self.output_tokens = nn.Parameter(torch.randn(self.cfg.num_output_tokens, c) * 0.02)
        self.decoder = MaskDecoder(self.cfg)
        self.mask_head = _hyper(c)

    def hparams(self) -> dict:
        return asdict(self.cfg)

    def check_inputs(self, image, prompt):
        s = self.cfg.image_size
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, s, s):
            raise ValueError(f"expected image (B, 3, {s}, {s}), got {tuple(image.shape)}")
        if tuple(prompt.shape) != (image.shape[0], s, s):
            raise ValueError(f"expected prompt ({image.shape[0]}, {s}, {s}), got {tuple(prompt.shape)}")

    def decode(self, image, prompt, extra_tokens=None):
        """Run encoder + decoder. Returns (updated tokens, f_dec).

        Token order: output tokens, extra (noise) tokens, prompt token.
        """
        self.check_inputs(image, prompt)
        feat = self.image_encoder(image)
        sparse, dense = self.prompt_encoder(prompt)
        b = image.shape[0]
        parts = [self.output_tokens.unsqueeze(0).expand(b, -1, -1)]
        if extra_tokens is not None:
            parts.append(extra_tokens.unsqueeze(0).expand(b, -1, -1))
        parts.append(sparse)
        tokens = torch.cat(parts, dim=1)
        return self.decoder(feat + dense, self.image_encoder.pos, tokens)

    def forward(self, image, prompt):
        tokens, f_dec = self.decode(image, prompt)
        w = self.mask_head(tokens[:, 0])
        return torch.einsum("bchw,bc->bhw", f_dec, w) / self.cfg.dim ** 0.5


def seg_loss(logits, target, label_mod: bool = False):
    """Mean pixel-wise binary cross-entropy.

    With ``label_mod`` every background 0 in the target becomes 1, so the
    target is the all-ones map.
    """
    target = torch.as_tensor(target)
    if not bool(((target == 0) | (target == 1)).all()):
        raise ValueError("seg_loss target must be binary")
    if label_mod:
        target = torch.ones_like(target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


# ------------------------------------------------------------------ victims


class ConvFCN(nn.Module):
    """6-layer dilated conv pixel classifier (DeepLab-flavoured), logits at 1/4 upsampled."""

    arch = "conv_fcn"

    def __init__(self, num_classes: int, width: int = 64, image_size: int = 64):
        super().__init__()
        self.num_classes, self.width, self.image_size = num_classes, width, image_size
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, stride=2, padding=1), nn.BatchNorm2d(w // 2), nn.ReLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=2, dilation=2), nn.BatchNorm2d(w), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=4, dilation=4), nn.BatchNorm2d(w), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(),
            nn.Conv2d(w, num_classes, 1),
        )

    def hparams(self) -> dict:
        return {"num_classes": self.num_classes, "width": self.width, "image_size": self.image_size}

    def forward(self, image):
        out = self.body(image)
        return F.interpolate(out, size=image.shape[-2:], mode="bilinear", align_corners=False)


class TokenSeg(nn.Module):
    """Promptable trunk without prompts: one query token per class (Mask2Former-flavoured)."""

    arch = "token_seg"

    def __init__(self, num_classes: int, image_size: int = 64, dim: int = 64, depth: int = 2, heads: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.cfg = SegConfig(image_size=image_size, dim=dim, depth=depth, heads=heads)
        self.image_encoder = ImageEncoder(self.cfg)
        self.class_tokens = nn.Parameter(torch.randn(num_classes, dim) * 0.02)
        self.decoder = MaskDecoder(self.cfg)
        self.head = _hyper(dim)
        self.bias = nn.Parameter(torch.zeros(num_classes))

    def hparams(self) -> dict:
        return {"num_classes": self.num_classes, "image_size": self.cfg.image_size, "dim": self.cfg.dim,
                "depth": self.cfg.depth, "heads": self.cfg.heads}

    def forward(self, image):
        feat = self.image_encoder(image)
        tokens = self.class_tokens.unsqueeze(0).expand(image.shape[0], -1, -1)
        tokens, f_dec = self.decoder(feat, self.image_encoder.pos, tokens)
        w = self.head(tokens)
        logits = torch.einsum("bchw,bkc->bkhw", f_dec, w) / self.cfg.dim ** 0.5
        return logits + self.bias[None, :, None, None]


VICTIM_ARCHS = ("conv_fcn", "token_seg")


def build_victim(arch: str, num_classes: int, image_size: int = 64, **kw) -> nn.Module:
    if arch == "conv_fcn":
        return ConvFCN(num_classes, image_size=image_size, **kw)
    if arch == "token_seg":
        return TokenSeg(num_classes, image_size=image_size, **kw)
    raise ValueError(f"unknown victim architecture {arch!r}")


# --------------------------------------------------------------- checkpoint

MAGIC = b"UNSEGCKP"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: nn.Module, *, seed: int = 0, step: int = 0, extra: dict | None = None) -> Path:
    """Write MAGIC | u32 version | u32 header length | JSON header | float32 LE arrays."""
    from .data import atomic_write_bytes

    state = model.state_dict()
    entries, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        if arr.dtype.kind == "f":
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        else:
            blobs.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    header = {
        "arch": model.arch,
        "hparams": model.hparams(),
        "seed": seed,
        "step": step,
        "extra": extra or {},
        "params": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)
    path = Path(path)
    atomic_write_bytes(path, payload)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    off = 16 + hlen
    state = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["dtype"].startswith("float"):
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
        else:
            arr = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
            off += 8 * n
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    return header, state


def build_model(arch: str, hparams: dict) -> nn.Module:
    if arch == "promptable_seg":
        return PromptableSegModel(SegConfig(**hparams))
    if arch == "noise_generator":
        from .noisegen import NoiseGenerator

        return NoiseGenerator(SegConfig(**hparams))
    if arch in VICTIM_ARCHS:
        hp = dict(hparams)
        return build_victim(arch, hp.pop("num_classes"), **hp)
    raise CheckpointError(f"unknown architecture tag {arch!r}")


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    header, state = read_checkpoint(path)
    model = build_model(header["arch"], header["hparams"])
    model.load_state_dict(state)
    return model, header
