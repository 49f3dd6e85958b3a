"""Time-conditioned modulation network.

Maps a reconstruction time to one (log-scale, shift) pair per channel of
every registered normalization layer.  The sinusoidal time embedding feeds a
two-layer Swish MLP trunk; each registry entry owns a linear output head
whose weight and bias start at exactly zero, so the initial modulation is
the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import GAMMA_CLAMP, NormRegistry
from .backbone import apply_channel_modulation as apply_modulation  # noqa: F401
from .phantoms import ConfigError

log = logging.getLogger(__name__)


def sinusoidal_embedding(t, dim: int, max_period: float = 10.0):
    """Sin/cos features at geometric frequencies max_period**(-2k/dim).

    Accepts a scalar or a 1D tensor of times; returns (dim,) or (B, dim).
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    scalar = np.isscalar(t) or (torch.is_tensor(t) and t.dim() == 0)
    dtype = t.dtype if torch.is_tensor(t) else torch.get_default_dtype()
    tt = torch.as_tensor(t, dtype=dtype).reshape(-1)
    k = torch.arange(dim // 2, dtype=tt.dtype)
    freqs = float(max_period) ** (-2.0 * k / dim)
    args = tt[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


@dataclass(frozen=True)
class ModulatorConfig:
    emb_dim: int = 16
    hidden_dim: int = 64
    max_period: float = 10.0
    time_scale: float = 1.0  # times are divided by this before embedding


class ModulationSet(dict):
    """layer_id -> (gamma, beta); gamma is a log-scale, so exp(gamma) > 0."""

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(
            float(g.detach().abs().max()) <= tol
            and float(b.detach().abs().max()) <= tol
            for g, b in self.values())


class TimeModulator(nn.Module):
    def __init__(self, registry: NormRegistry, cfg: ModulatorConfig,
                 seed: int = 0):
        super().__init__()
        if not registry.entries:
            raise ConfigError("norm registry is empty")
        self.registry = registry
        self.cfg = cfg
        torch.manual_seed(seed)
        self.trunk = nn.Sequential(
            nn.Linear(cfg.emb_dim, cfg.hidden_dim),
            nn.SiLU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.SiLU(),
        )
        self.heads = nn.ModuleDict()
        for layer_id, channels in registry.entries:
            head = nn.Linear(cfg.hidden_dim, 2 * channels)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads[_safe_key(layer_id)] = head
        self._key_to_id = {_safe_key(lid): lid
                           for lid, _ in registry.entries}
        self.clamp_events = 0

    def forward(self, t) -> ModulationSet:
        """Modulation for a scalar time or a 1D batch of times."""
        tt = torch.as_tensor(
            t, dtype=next(self.parameters()).dtype) / self.cfg.time_scale
        emb = sinusoidal_embedding(tt, self.cfg.emb_dim, self.cfg.max_period)
        h = self.trunk(emb)
        out = ModulationSet()
        for key, head in self.heads.items():
            raw = head(h)
            gamma, beta = raw.chunk(2, dim=-1)
            n_clamped = int((gamma.detach().abs() > GAMMA_CLAMP).sum())
            if n_clamped:
                self.clamp_events += n_clamped
                log.warning("clamped %d gamma values at |%.0f| for layer %s",
                            n_clamped, GAMMA_CLAMP, self._key_to_id[key])
            gamma = torch.clamp(gamma, -GAMMA_CLAMP, GAMMA_CLAMP)
            out[self._key_to_id[key]] = (gamma, beta)
        return out


def _safe_key(layer_id: str) -> str:
    # ModuleDict forbids dots in keys
    return layer_id.replace(".", "__")


def init_modulator(registry: NormRegistry, emb_dim: int = 16,
                   hidden_dim: int = 64, seed: int = 0,
                   time_scale: float = 1.0,
                   max_period: float = 10.0) -> TimeModulator:
    cfg = ModulatorConfig(emb_dim=emb_dim, hidden_dim=hidden_dim,
                          max_period=max_period, time_scale=time_scale)
    return TimeModulator(registry, cfg, seed=seed)


def modulator_forward(modulator: TimeModulator, t: float) -> ModulationSet:
    return modulator(float(t))


def save_modulator(modulator: TimeModulator, path) -> None:
    torch.save({
        "registry": list(modulator.registry.entries),
        "cfg": modulator.cfg.__dict__,
        "state_dict": modulator.state_dict(),
    }, path)


def load_modulator(path, registry: NormRegistry) -> TimeModulator:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    saved = [tuple(e) for e in payload["registry"]]
    if saved != list(registry.entries):
        raise ValueError(
            "modulator checkpoint was built against a different norm registry")
    mod = TimeModulator(registry, ModulatorConfig(**payload["cfg"]))
    mod.load_state_dict(payload["state_dict"])
    return mod
