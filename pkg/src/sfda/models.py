"""Segmentation network, fake-sample generator, patch discriminator, checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    """Small encoder-decoder: stride-8 encoder, bilinear-upsampling decoder.

    ``forward`` returns logits; use :func:`seg_forward` for (features, probs).
    """

    def __init__(
        self,
        num_classes: int = 5,
        enc_channels: tuple[int, ...] = (32, 64, 64, 128),
        dec_channels: tuple[int, ...] = (64, 32, 16),
    ):
        super().__init__()
        self.num_classes = num_classes
        self.enc_channels = tuple(enc_channels)
        self.dec_channels = tuple(dec_channels)
        strides = (2, 2, 2) + (1,) * (len(enc_channels) - 3)
        blocks, cin = [], 3
        for cout, s in zip(enc_channels, strides):
            blocks.append(conv_bn_relu(cin, cout, s))
            cin = cout
        self.encoder = nn.Sequential(*blocks)
        self.decoder = nn.ModuleList()
        for cout in dec_channels:
            self.decoder.append(conv_bn_relu(cin, cout))
            cin = cout
        self.classifier = nn.Conv2d(cin, num_classes, 1)
        self.stride = 8

    @property
    def feature_channels(self) -> int:
        return self.enc_channels[-1]

    def config(self) -> dict:
        return {
            "arch": "SegModel",
            "num_classes": self.num_classes,
            "enc_channels": list(self.enc_channels),
            "dec_channels": list(self.dec_channels),
        }

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by stride {self.stride}")
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        return self.encoder(x)

    def decode(self, feat: torch.Tensor) -> torch.Tensor:
        h = feat
        for block in self.decoder:
            h = block(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False))
        return self.classifier(h)

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.encode(x)
        return feat, self.decode(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[1]


def seg_forward(model: SegModel, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Encoder feature grid and per-pixel class probabilities."""
    feat, logits = model.forward_with_features(images)
    return feat, logits.softmax(dim=1)


def freeze(model: nn.Module) -> nn.Module:
    """Eval mode, no parameter gradients. Inputs can still receive gradients."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@contextmanager
def no_param_grad(*models: nn.Module) -> Iterator[None]:
    """Temporarily stop gradient accumulation into the given models' parameters."""
    saved = [(p, p.requires_grad) for m in models for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def bn_layers(model: nn.Module) -> list[tuple[str, nn.BatchNorm2d]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@dataclass
class BNEntry:
    layer_id: str
    mean: torch.Tensor
    var: torch.Tensor


def bn_snapshot(model: nn.Module) -> list[BNEntry]:
    """Stored running statistics of every BN layer, in forward order."""
    layers = bn_layers(model)
    if not layers:
        raise ValueError("model has no batch-normalization layers")
    return [BNEntry(name, m.running_mean.detach().clone(), m.running_var.detach().clone()) for name, m in layers]


class BNStatsRecorder:
    """Records batch mean / population variance of every BN layer's input.

    Stats keep their autograd graph so they can be used as a loss on the
    input (e.g. a generator upstream of a frozen network).
    """

    def __init__(self, model: nn.Module):
        self.layers = bn_layers(model)
        if not self.layers:
            raise ValueError("model has no batch-normalization layers")
        self.stats: list[tuple[torch.Tensor, torch.Tensor]] = []
        self._handles: list = []

    def _hook(self, module, inputs, output):
        x = inputs[0]
        if x.shape[0] < 2:
            raise ValueError("batch statistics need a batch of at least 2")
        self.stats.append((x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False)))

    def __enter__(self) -> "BNStatsRecorder":
        self.stats = []
        self._handles = [m.register_forward_hook(self._hook) for _, m in self.layers]
        return self

    def __exit__(self, *exc) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []


def batch_bn_stats(model: SegModel, images: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    if images.shape[0] < 2:
        raise ValueError("batch statistics need a batch of at least 2")
    with BNStatsRecorder(model) as rec:
        model(images)
    return rec.stats


class Generator(nn.Module):
    """DCGAN-style generator: latent vector to a 3x32x32 image in [0, 1]."""

    def __init__(self, latent_dim: int = 256, out_size: int = 32, base: int = 128):
        super().__init__()
        if out_size % 8:
            raise ValueError("out_size must be a multiple of 8")
        self.latent_dim = latent_dim
        self.out_size = out_size
        self.base = base
        init = out_size // 8
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_dim, base, init, 1, 0, bias=False),
            nn.BatchNorm2d(base),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base, base // 2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(base // 2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base // 2, base // 4, 4, 2, 1, bias=False),
            nn.BatchNorm2d(base // 4),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base // 4, 3, 4, 2, 1),
            nn.Sigmoid(),
        )

    def config(self) -> dict:
        return {"arch": "Generator", "latent_dim": self.latent_dim, "out_size": self.out_size, "base": self.base}

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent batch (B, {self.latent_dim}), got {tuple(z.shape)}")
        return self.net(z[:, :, None, None])


def generate(gen: Generator, z: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(z).all():
        raise ValueError("latent batch contains non-finite values")
    return gen(z)


class PatchDiscriminator(nn.Module):
    """Scores a C-channel prediction-map patch as easy (1) vs hard (0),
    conditioned on the patch position class ``k``.

    ``forward`` returns logits; :func:`discriminate` returns probabilities.
    """

    def __init__(self, num_classes: int, num_patch_classes: int, embed_dim: int = 256, width: int = 64, embed_channels: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.num_patch_classes = num_patch_classes
        self.embed_dim = embed_dim
        self.width = width
        self.embed_channels = embed_channels
        self.conv1 = nn.Conv2d(num_classes, width, 4, 2, 1)
        self.embed = nn.Embedding(num_patch_classes, embed_dim)
        self.embed_proj = nn.Linear(embed_dim, embed_channels)
        self.body = nn.Sequential(
            nn.Conv2d(width + embed_channels, width * 2, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, width * 2, 3, 1, 1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(width * 2, 1)

    def config(self) -> dict:
        return {
            "arch": "PatchDiscriminator",
            "num_classes": self.num_classes,
            "num_patch_classes": self.num_patch_classes,
            "embed_dim": self.embed_dim,
            "width": self.width,
            "embed_channels": self.embed_channels,
        }

    def forward(self, patches: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        if k.min() < 0 or k.max() >= self.num_patch_classes:
            raise ValueError(f"patch class out of range [0, {self.num_patch_classes})")
        h = F.leaky_relu(self.conv1(patches), 0.2)
        e = self.embed_proj(self.embed(k))[:, :, None, None].expand(-1, -1, *h.shape[-2:])
        h = self.body(torch.cat([h, e], dim=1))
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


def discriminate(disc: PatchDiscriminator, patch: torch.Tensor, k) -> torch.Tensor:
    """Probability that each patch belongs to the easy group."""
    single = patch.ndim == 3
    if single:
        patch = patch[None]
    k = torch.as_tensor(k, dtype=torch.long).reshape(-1)
    if k.numel() == 1 and patch.shape[0] > 1:
        k = k.expand(patch.shape[0])
    out = torch.sigmoid(disc(patch, k))
    return out[0] if single else out


# --- checkpoints -----------------------------------------------------------

ARCHS = {"SegModel": SegModel, "Generator": Generator, "PatchDiscriminator": PatchDiscriminator}
PARAMS_FILE = "params.npz"
META_FILE = "meta.json"


def build_from_config(config: dict) -> nn.Module:
    config = dict(config)
    cls = ARCHS[config.pop("arch")]
    for key in ("enc_channels", "dec_channels"):
        if key in config:
            config[key] = tuple(config[key])
    return cls(**config)


def save_checkpoint(model: nn.Module, path: str | os.PathLike, **meta) -> Path:
    """Directory with ``params.npz`` (state_dict name -> array) and ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    np.savez(path / PARAMS_FILE, **arrays)
    meta = {"config": model.config(), **meta}
    (path / META_FILE).write_text(json.dumps(meta, indent=2, default=str))
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not (path / PARAMS_FILE).exists() or not (path / META_FILE).exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads((path / META_FILE).read_text())
    model = build_from_config(meta["config"])
    with np.load(path / PARAMS_FILE) as archive:
        state = {name: torch.from_numpy(archive[name].copy()) for name in archive.files}
    model.load_state_dict(state)
    return model, meta


def checksum(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
