"""Compact encoder-decoder segmentation network with modulation-aware
normalization layers.

Every normalization layer carries a stable ``layer_id`` and accepts an
optional residual affine modulation (log-scale gamma, shift beta).  With no
modulation attached the layer is a literal pass-through of standard
normalization, so a zero modulation reproduces the frozen network's output
exactly.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .phantoms import ConfigError, Image, SegmentationMask

GAMMA_CLAMP = 10.0


@dataclass(frozen=True)
class ArchConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    norm: str = "batch"  # batch | layer


@dataclass(frozen=True)
class NormRegistry:
    """Ordered (layer_id, channels) entries, encoder-to-decoder."""

    entries: tuple  # of (str, int)

    def __post_init__(self):
        ids = [lid for lid, _ in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate layer_ids in registry")

    @property
    def layer_ids(self):
        return [lid for lid, _ in self.entries]

    def channels_of(self, layer_id: str) -> int:
        for lid, ch in self.entries:
            if lid == layer_id:
                return ch
        raise KeyError(layer_id)


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities with the raw logits, shape (H, W, C)."""

    probs: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        if self.probs.shape != self.logits.shape or self.probs.ndim != 3:
            raise ValueError("probs/logits must share an (H, W, C) shape")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]

    def label_map(self) -> np.ndarray:
        # argmax with lowest-index tie-break (numpy argmax convention)
        return np.argmax(self.probs, axis=-1)


def apply_channel_modulation(x: torch.Tensor, gamma: torch.Tensor,
                             beta: torch.Tensor) -> torch.Tensor:
    """Residual affine modulation exp(gamma) * x + beta over channel dim.

    gamma/beta may be (C,) shared across the batch or (B, C) per sample.
    """
    if gamma.shape != beta.shape:
        raise ValueError("gamma and beta must have identical shapes")
    C = x.shape[1]
    if gamma.shape[-1] != C:
        raise ValueError(
            f"modulation has {gamma.shape[-1]} channels, activation has {C}")
    gamma = torch.clamp(gamma, -GAMMA_CLAMP, GAMMA_CLAMP)
    if gamma.dim() == 1:
        view = (1, C, 1, 1)
    elif gamma.dim() == 2:
        view = (gamma.shape[0], C, 1, 1)
    else:
        raise ValueError("gamma must be 1D (C,) or 2D (B, C)")
    return torch.exp(gamma).view(view) * x + beta.view(view)


class ModulatedNorm2d(nn.Module):
    """Normalization layer with an optional attached residual modulation."""

    def __init__(self, channels: int, flavor: str = "batch"):
        super().__init__()
        if flavor == "batch":
            self.norm = nn.BatchNorm2d(channels)
        elif flavor == "layer":
            # layer-norm flavor: normalize over (C, H, W) per sample
            self.norm = nn.GroupNorm(1, channels)
        else:
            raise ConfigError(f"unknown norm flavor '{flavor}'")
        self.channels = channels
        self.layer_id = ""
        self._modulation = None  # (gamma, beta) tensors, or None

    def set_modulation(self, gamma, beta):
        self._modulation = (gamma, beta)

    def clear_modulation(self):
        self._modulation = None

    def forward(self, x):
        y = self.norm(x)
        if self._modulation is None:
            return y
        gamma, beta = self._modulation
        return apply_channel_modulation(y, gamma, beta)


def _block(cin, cout, flavor):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        ModulatedNorm2d(cout, flavor),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        ModulatedNorm2d(cout, flavor),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """U-Net style encoder-decoder with skip connections."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        if cfg.num_classes < 2:
            raise ConfigError("segmentation needs at least 2 classes")
        if cfg.depth < 1:
            raise ConfigError("depth must be >= 1")
        if (cfg.height % (2 ** cfg.depth) or cfg.width % (2 ** cfg.depth)
                or cfg.height // (2 ** cfg.depth) < 1
                or cfg.width // (2 ** cfg.depth) < 1):
            raise ConfigError(
                f"dims {cfg.height}x{cfg.width} collapse at depth {cfg.depth}")
        self.cfg = cfg
        w = cfg.base_width
        widths = [w * (2 ** i) for i in range(cfg.depth)]

        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for cw in widths:
            self.encoders.append(_block(cin, cw, cfg.norm))
            cin = cw
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _block(widths[-1], widths[-1] * 2, cfg.norm)

        self.up = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cprev = widths[-1] * 2
        for cw in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cprev, cw, 2, stride=2))
            self.decoders.append(_block(cw * 2, cw, cfg.norm))
            cprev = cw
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1)
        self._assign_layer_ids()

    def _assign_layer_ids(self):
        for name, mod in self.named_modules():
            if isinstance(mod, ModulatedNorm2d):
                mod.layer_id = name

    def norm_layers(self):
        return [m for m in self.modules() if isinstance(m, ModulatedNorm2d)]

    def registry(self) -> NormRegistry:
        return NormRegistry(tuple(
            (m.layer_id, m.channels) for m in self.norm_layers()))

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_backbone(cfg: ArchConfig):
    """Construct the network and enumerate its normalization layers."""
    net = SegmentationNet(cfg)
    return net, net.registry()


def attach_modulation(net: SegmentationNet, modulation) -> None:
    """Attach a modulation set to the net's norm layers (None clears)."""
    layers = {m.layer_id: m for m in net.norm_layers()}
    if modulation is None:
        for m in layers.values():
            m.clear_modulation()
        return
    if set(modulation.keys()) != set(layers.keys()):
        missing = set(layers) - set(modulation.keys())
        extra = set(modulation.keys()) - set(layers)
        raise ValueError(
            f"modulation/registry mismatch (missing={sorted(missing)}, "
            f"extra={sorted(extra)})")
    for lid, layer in layers.items():
        gamma, beta = modulation[lid]
        if gamma.shape[-1] != layer.channels:
            raise ValueError(
                f"layer {lid}: modulation channels {gamma.shape[-1]} != "
                f"{layer.channels}")
        layer.set_modulation(gamma, beta)


class modulated(object):
    """Context manager scoping a modulation set to a block of forwards."""

    def __init__(self, net, modulation):
        self.net = net
        self.modulation = modulation

    def __enter__(self):
        attach_modulation(self.net, self.modulation)
        return self.net

    def __exit__(self, *exc):
        attach_modulation(self.net, None)
        return False


def _to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    arr = image.data if isinstance(image, Image) else np.asarray(image)
    return torch.as_tensor(arr, dtype=dtype)[None, None]


def forward(net: SegmentationNet, image, modulation=None) -> ProbMap:
    """Evaluation-mode forward pass; running statistics are never updated."""
    net.eval()
    x = _to_tensor(image, dtype=next(net.parameters()).dtype)
    with torch.no_grad(), modulated(net, modulation):
        logits = net(x)[0]  # (C, H, W)
    logits = logits.permute(1, 2, 0).numpy()
    probs = _softmax_lastaxis(logits)
    return ProbMap(probs=probs, logits=logits)


def forward_logits(net: SegmentationNet, batch: torch.Tensor,
                   modulation=None) -> torch.Tensor:
    """Differentiable eval-mode forward on an (B, 1, H, W) tensor batch."""
    net.eval()
    with modulated(net, modulation):
        return net(batch)


def _softmax_lastaxis(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def freeze(net: SegmentationNet) -> None:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)


def parameter_checksum(net: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-6
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = True


class TrainingError(RuntimeError):
    pass


def _augment(img: np.ndarray, lab: np.ndarray, rng: np.random.Generator):
    if rng.uniform() < 0.5:
        img, lab = img[:, ::-1], lab[:, ::-1]
    shift = int(rng.integers(-3, 4))
    if shift:
        img, lab = np.roll(img, shift, axis=1), np.roll(lab, shift, axis=1)
    # mild contrast jitter around the mean
    c = rng.uniform(0.85, 1.15)
    img = np.clip((img - img.mean()) * c + img.mean(), 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def mean_foreground_dice(net, images, masks) -> float:
    """Mean Dice over foreground classes present in each ground truth."""
    from .metrics import dice

    scores = []
    for img, mask in zip(images, masks):
        pred = forward(net, img).label_map()
        for c in range(1, mask.num_classes):
            d = dice(pred, mask.labels, c)
            if d is not None:
                scores.append(d)
    return float(np.mean(scores)) if scores else float("nan")


def train_backbone(dataset, arch_cfg: ArchConfig, train_cfg: TrainConfig):
    """Train on (Image, SegmentationMask) pairs; returns (net, val_dice).

    The returned network is frozen (eval mode, requires_grad off).
    """
    if not dataset:
        raise TrainingError("empty training dataset")
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)

    net = SegmentationNet(arch_cfg)
    n_val = int(round(len(dataset) * train_cfg.val_fraction))
    n_val = min(n_val, len(dataset) - 1)
    train_set = dataset[: len(dataset) - n_val] if n_val else dataset
    val_set = dataset[len(dataset) - n_val:] if n_val else []

    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(train_cfg.steps, 1), eta_min=train_cfg.lr_min)

    net.train()
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(train_set), size=train_cfg.batch_size)
        imgs, labs = [], []
        for j in idx:
            img, mask = train_set[j]
            a = img.data if isinstance(img, Image) else np.asarray(img)
            l = (mask.labels if isinstance(mask, SegmentationMask)
                 else np.asarray(mask))
            if train_cfg.augment:
                a, l = _augment(a, l, rng)
            imgs.append(a)
            labs.append(l)
        xb = torch.as_tensor(np.stack(imgs), dtype=torch.float32)[:, None]
        yb = torch.as_tensor(np.stack(labs), dtype=torch.long)
        opt.zero_grad()
        loss = F.cross_entropy(net(xb), yb)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        sched.step()

    freeze(net)
    if val_set:
        val_dice = mean_foreground_dice(
            net, [img for img, _ in val_set], [m for _, m in val_set])
    else:
        val_dice = float("nan")
    return net, val_dice


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: SegmentationNet, path, extra=None) -> None:
    payload = {
        "arch": asdict(net.cfg),
        "registry": list(net.registry().entries),
        "state_dict": net.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ArchConfig(**payload["arch"])
    net = SegmentationNet(cfg)
    net.load_state_dict(payload["state_dict"])
    freeze(net)
    saved = [tuple(e) for e in payload["registry"]]
    if list(net.registry().entries) != saved:
        raise ValueError("checkpoint registry does not match rebuilt network")
    return net, payload["extra"]
