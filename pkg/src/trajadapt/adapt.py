"""Test-time adaptation of the modulation network.

Only the modulator's parameters are optimized; the segmentation backbone
stays frozen (eval mode, gradients off, running statistics untouched).
Each optimizer step forwards every selected (image, time) pair of the
current scope, so the loss curve is fully deterministic.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (ProbMap, SegmentationNet, forward_logits,
                       parameter_checksum)
from .modulator import TimeModulator
from .phantoms import ConfigError, SegmentationMask


class AdaptationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 100
    lr: float = 1e-5
    granularity: str = "per_dataset"  # per_case | per_dataset
    subset: str = "full"  # full | only_last | without_first
    loss_reduction: str = "mean_over_S"  # mean_over_S | sum_over_S
    seed: int = 0

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.granularity not in ("per_case", "per_dataset"):
            raise ConfigError(f"unknown granularity '{self.granularity}'")
        if self.subset not in ("full", "only_last", "without_first"):
            raise ConfigError(f"unknown subset '{self.subset}'")
        if self.loss_reduction not in ("mean_over_S", "sum_over_S"):
            raise ConfigError(
                f"unknown loss_reduction '{self.loss_reduction}'")


@dataclass
class AdaptReport:
    loss_curve: list = field(default_factory=list)  # (step, loss) pairs
    final_loss: float = float("nan")
    steps_run: int = 0
    clamp_events: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class AdaptResult:
    granularity: str
    modulators: dict  # case_id (or "dataset") -> TimeModulator
    reports: dict

    def for_case(self, case_id: str) -> TimeModulator:
        if self.granularity == "per_dataset":
            return self.modulators["dataset"]
        return self.modulators[case_id]


def entropy_loss(prob_maps, reduction: str = "mean_over_S") -> float:
    """Mean spatial entropy per map, combined over maps by sum or mean.

    Natural log; 0 * log 0 is taken as 0.
    """
    if not prob_maps:
        raise ValueError("prob_maps must be non-empty")
    per_map = []
    shape = None
    for pm in prob_maps:
        p = pm.probs if isinstance(pm, ProbMap) else np.asarray(pm, float)
        if shape is None:
            shape = p.shape
        elif p.shape != shape:
            raise ValueError("prob maps have inconsistent shapes")
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        per_map.append(-plogp.sum(axis=-1).mean())
    if reduction == "sum_over_S":
        return float(np.sum(per_map))
    if reduction == "mean_over_S":
        return float(np.mean(per_map))
    raise ValueError(f"unknown reduction '{reduction}'")


def _entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Spatial-mean entropy per map for an (S, C, H, W) logits tensor."""
    logp = F.log_softmax(logits, dim=1)
    ent = -(logp.exp() * logp).sum(dim=1)  # (S, H, W)
    return ent.mean(dim=(1, 2))


def _select_subset(steps, subset: str):
    if subset == "only_last":
        return [steps[-1]]
    if subset == "without_first":
        return list(steps[1:]) if len(steps) > 1 else list(steps)
    return list(steps)


def _prepare_item(traj, subset: str, dtype):
    steps = _select_subset(traj.steps, subset)
    imgs = torch.as_tensor(np.stack([x for x, _ in steps]),
                           dtype=dtype)[:, None]
    times = torch.as_tensor([t for _, t in steps], dtype=dtype)
    return traj.case_id, imgs, times


def _optimize(net: SegmentationNet, modulator: TimeModulator, items,
              cfg: AdaptConfig, per_map_loss):
    """Run cfg.steps Adam iterations over the modulator parameters.

    items: list of (case_id, images (S,1,H,W), times (S,), label or None).
    per_map_loss(logits, label) -> per-map loss vector of length S.
    """
    net.eval()
    for p in net.parameters():
        if p.requires_grad:
            raise AdaptationError("backbone parameters must be frozen")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(modulator.parameters(), lr=cfg.lr)
    clamp_before = modulator.clamp_events

    def total_loss():
        case_losses = []
        for _, imgs, times, label in items:
            mod = modulator(times)
            logits = forward_logits(net, imgs, mod)
            per_map = per_map_loss(logits, label)
            if cfg.loss_reduction == "sum_over_S":
                case_losses.append(per_map.sum())
            else:
                case_losses.append(per_map.mean())
        return torch.stack(case_losses).mean()

    report = AdaptReport()
    for step in range(cfg.steps):
        opt.zero_grad()
        loss = total_loss()
        if not torch.isfinite(loss):
            raise AdaptationError(f"non-finite loss at step {step}")
        report.loss_curve.append((step, float(loss.detach())))
        loss.backward()
        opt.step()
    with torch.no_grad():
        final = total_loss()
    if not torch.isfinite(final):
        raise AdaptationError(f"non-finite loss at step {cfg.steps}")
    report.loss_curve.append((cfg.steps, float(final)))
    report.final_loss = float(final)
    report.steps_run = cfg.steps
    report.clamp_events = modulator.clamp_events - clamp_before
    return report


def _entropy_per_map(logits, label):
    return _entropy_from_logits(logits)


def adapt(net: SegmentationNet, modulator: TimeModulator, trajectories,
          cfg: AdaptConfig) -> AdaptResult:
    """Entropy-minimization adaptation over reconstruction trajectories."""
    return _run(net, modulator, trajectories, cfg, _entropy_per_map,
                labels=None)


def supervised_adapt(net: SegmentationNet, modulator: TimeModulator,
                     trajectories, labels, cfg: AdaptConfig) -> AdaptResult:
    """Same loop with per-pixel cross-entropy against provided labels.

    labels: mapping case_id -> SegmentationMask.
    """
    missing = [t.case_id for t in trajectories if t.case_id not in labels]
    if missing:
        raise ValueError(f"labels missing for cases {missing}")

    def ce_per_map(logits, label):
        S = logits.shape[0]
        target = label.expand(S, -1, -1)
        return F.cross_entropy(logits, target,
                               reduction="none").mean(dim=(1, 2))

    return _run(net, modulator, trajectories, cfg, ce_per_map, labels=labels)


def _run(net, modulator, trajectories, cfg, per_map_loss, labels):
    cfg.validate()
    if not trajectories:
        raise ValueError("trajectories must be non-empty")
    dtype = next(net.parameters()).dtype
    theta_before = parameter_checksum(net)

    def make_items(trajs):
        out = []
        for traj in trajs:
            case_id, imgs, times = _prepare_item(traj, cfg.subset, dtype)
            label = None
            if labels is not None:
                mask = labels[case_id]
                arr = (mask.labels if isinstance(mask, SegmentationMask)
                       else np.asarray(mask))
                label = torch.as_tensor(arr, dtype=torch.long)
            out.append((case_id, imgs, times, label))
        return out

    if cfg.granularity == "per_dataset":
        mod = copy.deepcopy(modulator)
        report = _optimize(net, mod, make_items(trajectories), cfg,
                           per_map_loss)
        result = AdaptResult(cfg.granularity, {"dataset": mod},
                             {"dataset": report})
    else:
        modulators, reports = {}, {}
        for traj in trajectories:
            mod = copy.deepcopy(modulator)
            reports[traj.case_id] = _optimize(
                net, mod, make_items([traj]), cfg, per_map_loss)
            modulators[traj.case_id] = mod
        result = AdaptResult(cfg.granularity, modulators, reports)

    if parameter_checksum(net) != theta_before:
        raise AdaptationError("backbone parameters changed during adaptation")
    return result
