"""Experiment harness: dataset generation, backbone training, full runs,
and ablation sweeps.

A run directory is named by a hash of the experiment config plus mode, so
reruns with identical configs are idempotent and colliding hashes with
different content abort instead of overwriting.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import adapt as adapt_mod
from . import ensemble as ens
from . import metrics as met
from .backbone import (ArchConfig, ProbMap, TrainConfig, forward,
                       forward_logits, load_checkpoint, parameter_checksum,
                       save_checkpoint, train_backbone)
from .modulator import TimeModulator, init_modulator
from .phantoms import (PhantomConfig, ShiftConfig, apply_domain_shift,
                       generate_synthetic_case, load_case, save_case)
from .recon import (ReconConfig, get_operator, load_trajectory, reconstruct,
                    save_trajectory)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MODES = ("baseline", "last_only_adapt", "irtta", "irtta_sup")


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    n_train: int = 200
    n_test: int = 40
    root: str = "dataset"
    shift_enabled: bool = True
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)


@dataclass(frozen=True)
class ModulatorSettings:
    emb_dim: int = 16
    hidden_dim: int = 64
    max_period: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_bins: int = 15
    output_dir: str = "output"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modulator: ModulatorSettings = field(default_factory=ModulatorSettings)
    adapt: adapt_mod.AdaptConfig = field(
        default_factory=adapt_mod.AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "recon": ReconConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
    "modulator": ModulatorSettings,
    "adapt": adapt_mod.AdaptConfig,
    "eval": EvalConfig,
}


def _build_section(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.name in ("phantom", "shift"):
            sub_cls = {"phantom": PhantomConfig, "shift": ShiftConfig}[f.name]
            val = _build_section(sub_cls, val)
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[f.name] = val
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Read an experiment config from a TOML file."""
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            sections[name] = _build_section(cls, raw[name])
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return ExperimentConfig(**sections)


def _canonical(obj) -> str:
    return json.dumps(asdict(obj), sort_keys=True, default=str)


def config_hash(cfg, *parts) -> str:
    h = hashlib.sha256(_canonical(cfg).encode())
    for p in parts:
        h.update(str(p).encode())
    return h.hexdigest()[:8]


# ---------------------------------------------------------------------------
# dataset


def _train_seed(cfg: DatasetConfig, i: int) -> int:
    return cfg.seed * 1_000_000 + i


def _test_seed(cfg: DatasetConfig, i: int) -> int:
    return cfg.seed * 1_000_000 + 500_000 + i


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Write n_train source cases and n_test (optionally shifted) cases."""
    ds = cfg.dataset
    root = Path(ds.root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(
                f"{root} is not empty; pass force=True/--force to overwrite")
    for i in range(ds.n_train):
        seed = _train_seed(ds, i)
        case = generate_synthetic_case(seed, ds.phantom,
                                       case_id=f"train_{i:04d}")
        save_case(case, root / "train" / case.case_id)
    for i in range(ds.n_test):
        seed = _test_seed(ds, i)
        case = generate_synthetic_case(seed, ds.phantom,
                                       case_id=f"test_{i:04d}")
        if ds.shift_enabled:
            case = apply_domain_shift(case, ds.shift, seed=seed + 1)
        save_case(case, root / "test" / case.case_id)
    return root


def load_split(cfg: ExperimentConfig, split: str):
    root = Path(cfg.dataset.root) / split
    if not root.exists():
        raise FileNotFoundError(
            f"dataset split '{split}' missing at {root}; run generate first")
    return [load_case(p) for p in sorted(root.iterdir()) if p.is_dir()]


# ---------------------------------------------------------------------------
# training


def backbone_path(cfg: ExperimentConfig) -> Path:
    h = config_hash(cfg.dataset, _canonical(cfg.arch), _canonical(cfg.train))
    return Path(cfg.eval.output_dir) / "checkpoints" / f"backbone_{h}.pt"


def cmd_train(cfg: ExperimentConfig) -> tuple:
    """Train the source-domain backbone; returns (checkpoint path, val dice)."""
    cases = load_split(cfg, "train")
    dataset = [(c.clean, c.mask) for c in cases]
    net, val_dice = train_backbone(dataset, cfg.arch, cfg.train)
    path = backbone_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path, extra={"val_dice": val_dice})
    log.info("trained backbone: held-out source dice %.4f -> %s",
             val_dice, path)
    return path, val_dice


# ---------------------------------------------------------------------------
# trajectories


def _case_trajectory(case, recon_cfg: ReconConfig):
    op = get_operator(case.measurement.operator_id)
    per_case = dataclasses.replace(
        recon_cfg, noise_seed=recon_cfg.noise_seed + case.seed)
    return reconstruct(case.measurement, op, per_case, case_id=case.case_id)


def get_trajectories(cfg: ExperimentConfig, cases, jobs: int = 1,
                     save: bool = False):
    """Reconstruct (or load cached) trajectories for the given cases."""
    h = config_hash(cfg.recon, _canonical(cfg.dataset))
    cache = Path(cfg.eval.output_dir) / "trajectories" / h

    def one(case):
        cdir = cache / case.case_id
        if (cdir / "manifest.json").exists():
            return load_trajectory(cdir)
        traj = _case_trajectory(case, cfg.recon)
        if save:
            save_trajectory(traj, cdir)
        return traj

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunArtifact:
    run_dir: Path
    mode: str
    config_hash: str
    case_metrics: list
    summary: met.Summary
    adapt_reports: dict
    adapt_runtime_s: float


def _trajectory_probs(net, traj, modulator) -> list:
    """Per-step probability maps, modulated by the step time (if any)."""
    dtype = next(net.parameters()).dtype
    imgs = torch.as_tensor(np.stack(traj.images), dtype=dtype)[:, None]
    times = torch.as_tensor(traj.times, dtype=dtype)
    with torch.no_grad():
        mod = modulator(times) if modulator is not None else None
        logits = forward_logits(net, imgs, mod)
        probs = torch.softmax(logits, dim=1)
    probs = probs.permute(0, 2, 3, 1).numpy()
    logits = logits.permute(0, 2, 3, 1).numpy()
    return [ProbMap(probs=probs[i], logits=logits[i])
            for i in range(len(traj.steps))]


def run_dir_for(cfg: ExperimentConfig, mode: str) -> Path:
    return (Path(cfg.eval.output_dir) / "runs"
            / f"{config_hash(cfg, mode)}_{mode}")


def cmd_run(cfg: ExperimentConfig, mode: str, jobs: int = 1,
            save_trajectories: bool = False) -> RunArtifact:
    """Run one evaluation mode over the test split and write its artifacts."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'; choose from {MODES}")
    ckpt = backbone_path(cfg)
    if not ckpt.exists():
        raise FileNotFoundError(
            f"no trained checkpoint at {ckpt}; run train first")
    net, extra = load_checkpoint(ckpt)
    registry = net.registry()

    chash = config_hash(cfg, mode)
    run_dir = run_dir_for(cfg, mode)
    config_json = json.dumps(
        {"config": asdict(cfg), "mode": mode}, sort_keys=True, default=str)
    cfg_file = run_dir / "config.json"
    if cfg_file.exists():
        if cfg_file.read_text() != config_json:
            raise RuntimeError(
                f"hash collision: {run_dir} exists with different content")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_file.write_text(config_json)

    cases = load_split(cfg, "test")
    trajectories = get_trajectories(cfg, cases, jobs=jobs,
                                    save=save_trajectories)
    theta_before = parameter_checksum(net)

    t0 = time.perf_counter()
    adapt_reports = {}
    adapt_result = None
    if mode in ("last_only_adapt", "irtta", "irtta_sup"):
        base_mod = init_modulator(
            registry, emb_dim=cfg.modulator.emb_dim,
            hidden_dim=cfg.modulator.hidden_dim,
            seed=cfg.modulator.seed, time_scale=cfg.recon.T,
            max_period=cfg.modulator.max_period)
        acfg = cfg.adapt
        if mode == "last_only_adapt":
            acfg = dataclasses.replace(acfg, subset="only_last")
        if mode == "irtta_sup":
            labels = {c.case_id: c.mask for c in cases}
            adapt_result = adapt_mod.supervised_adapt(
                net, base_mod, trajectories, labels, acfg)
        else:
            adapt_result = adapt_mod.adapt(net, base_mod, trajectories, acfg)
        adapt_reports = {k: r.to_dict()
                         for k, r in adapt_result.reports.items()}

    case_metrics = []
    C = cfg.arch.num_classes
    for case, traj in zip(cases, trajectories):
        if mode == "baseline":
            pm = forward(net, traj.images[-1])
            result = ens.finalize([pm])
        else:
            modulator = adapt_result.for_case(case.case_id)
            prob_maps = _trajectory_probs(net, traj, modulator)
            result = ens.finalize(prob_maps)
        cm = met.case_metrics(case.case_id, result.mean_probs,
                              result.label_map, case.mask.labels, C,
                              n_bins=cfg.eval.n_bins)
        case_metrics.append(cm)
        _write_case_outputs(run_dir / "cases" / case.case_id, result, cm)
    runtime = time.perf_counter() - t0

    theta_after = parameter_checksum(net)
    if theta_before != theta_after:
        raise RuntimeError("frozen backbone changed during the run")

    summary = met.aggregate(case_metrics)
    row = {"mode": mode, "config_hash": chash,
           **summary.row(C), "runtime_s": f"{runtime:.2f}"}
    met.write_summary_csv(run_dir / "summary.csv", [row])
    (run_dir / "adapt_reports.json").write_text(
        json.dumps(adapt_reports, indent=2))
    (run_dir / "log.txt").write_text(
        f"mode={mode}\nconfig_hash={chash}\n"
        f"theta_checksum_before={theta_before}\n"
        f"theta_checksum_after={theta_after}\n"
        f"source_val_dice={extra.get('val_dice')}\n"
        f"adapt_and_inference_runtime_s={runtime:.3f}\n")
    return RunArtifact(run_dir=run_dir, mode=mode, config_hash=chash,
                       case_metrics=case_metrics, summary=summary,
                       adapt_reports=adapt_reports, adapt_runtime_s=runtime)


def _write_case_outputs(cdir: Path, result, cm) -> None:
    cdir.mkdir(parents=True, exist_ok=True)
    np.save(cdir / "label_map.npy", result.label_map)
    np.save(cdir / "entropy_map.npy", result.entropy_map)
    try:
        from PIL import Image as PILImage

        PILImage.fromarray(ens.render_grayscale(result.entropy_map)).save(
            cdir / "entropy_map.png")
    except ImportError:
        pass
    (cdir / "metrics.json").write_text(json.dumps({
        "case_id": cm.case_id,
        "dice_per_class": {str(k): v for k, v in cm.dice_per_class.items()},
        "ece": cm.ece,
        "prauc": cm.prauc,
    }, indent=2))


def cmd_report(run_dir) -> met.Summary:
    """Rebuild the summary from per-case outputs (idempotent aggregation)."""
    run_dir = Path(run_dir)
    cms = []
    for mfile in sorted(run_dir.glob("cases/*/metrics.json")):
        d = json.loads(mfile.read_text())
        cms.append(met.CaseMetrics(
            case_id=d["case_id"],
            dice_per_class={int(k): v
                            for k, v in d["dice_per_class"].items()},
            ece=d["ece"], prauc=d["prauc"]))
    if not cms:
        raise FileNotFoundError(f"no per-case metrics under {run_dir}")
    return met.aggregate(cms)


# ---------------------------------------------------------------------------
# ablations

ABLATION_AXES = ("emb_size", "steps", "S", "subset", "granularity")


def _override(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "emb_size":
        return cfg.replace(modulator=dataclasses.replace(
            cfg.modulator, emb_dim=int(value)))
    if axis == "steps":
        return cfg.replace(adapt=dataclasses.replace(
            cfg.adapt, steps=int(value)))
    if axis == "S":
        return cfg.replace(recon=dataclasses.replace(cfg.recon, S=int(value)))
    if axis == "subset":
        return cfg.replace(adapt=dataclasses.replace(
            cfg.adapt, subset=str(value)))
    if axis == "granularity":
        return cfg.replace(adapt=dataclasses.replace(
            cfg.adapt, granularity=str(value)))
    raise ValueError(f"unknown ablation axis '{axis}'; "
                     f"choose from {ABLATION_AXES}")


def cmd_ablate(cfg: ExperimentConfig, axis: str, values,
               mode: str = "irtta", jobs: int = 1):
    """One run per axis value; collates summary rows with wall-clock time."""
    if not values:
        raise ValueError("values list must be non-empty")
    rows = []
    artifacts = []
    for v in values:
        sub = _override(cfg, axis, v)
        art = cmd_run(sub, mode, jobs=jobs)
        row = {"axis": axis, "value": str(v),
               **art.summary.row(cfg.arch.num_classes),
               "runtime_s": f"{art.adapt_runtime_s:.2f}"}
        rows.append(row)
        artifacts.append(art)
    out = (Path(cfg.eval.output_dir)
           / f"ablation_{axis}_{config_hash(cfg, axis, *values)}.csv")
    met.write_summary_csv(out, rows)
    return rows, artifacts
