"""Iterative reconstruction: forward operators, time schedules, and the
trajectory-producing solver.

The solver alternates a denoising prediction with a gradient step on the
quadratic data-fidelity term D(x, m) = 0.5 * ||A x - m||^2, then re-injects
schedule-scaled noise.  Intermediate images are recorded *after* the
data-consistency step, each paired with its schedule time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np
from scipy.ndimage import gaussian_filter

from .phantoms import ConfigError, Image, Measurement


@dataclass(frozen=True)
class TimeSchedule:
    times: tuple
    horizon: float

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) == 0:
            raise ConfigError("schedule must contain at least one time")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("schedule times must be strictly decreasing")
        if ts[0] > self.horizon or ts[-1] < 0:
            raise ConfigError("schedule times must lie in [0, horizon]")
        object.__setattr__(self, "times", ts)

    @property
    def num_steps(self) -> int:
        return len(self.times)


def make_schedule(S: int, T: float, decay: float = 0.5) -> TimeSchedule:
    """Geometric schedule from T down to exactly 0 at the last step."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    if T <= 0:
        raise ConfigError("horizon T must be positive")
    if not 0 < decay < 1:
        raise ConfigError("decay must lie in (0, 1)")
    if S == 1:
        return TimeSchedule((0.0,), T)
    times = [T * decay ** i for i in range(S - 1)] + [0.0]
    return TimeSchedule(tuple(times), T)


class ForwardOperator:
    """Linear measurement model A with explicit adjoint and right inverse."""

    def __init__(self, operator_id: str, apply, adjoint, pinv,
                 measurement_shape):
        self.operator_id = operator_id
        self.apply = apply
        self.adjoint = adjoint
        self.pinv = pinv
        self.measurement_shape = measurement_shape


def _avgpool(x: np.ndarray, k: int) -> np.ndarray:
    H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"dims {x.shape} not divisible by pool factor {k}")
    return x.reshape(H // k, k, W // k, k).mean(axis=(1, 3))


def _avgpool_adjoint(m: np.ndarray, k: int) -> np.ndarray:
    # adjoint of block-averaging spreads each value uniformly over its block
    return np.kron(m, np.ones((k, k))) / (k * k)


def _avgpool_pinv(m: np.ndarray, k: int) -> np.ndarray:
    # nearest-neighbour upsampling is a right inverse of block averaging
    return np.kron(m, np.ones((k, k)))


def _make_pool_operator(k: int) -> ForwardOperator:
    return ForwardOperator(
        operator_id=f"avgpool{k}",
        apply=lambda x, k=k: _avgpool(np.asarray(x, float), k),
        adjoint=lambda m, k=k: _avgpool_adjoint(np.asarray(m, float), k),
        pinv=lambda m, k=k: _avgpool_pinv(np.asarray(m, float), k),
        measurement_shape=lambda shape, k=k: (shape[0] // k, shape[1] // k),
    )


_OPERATORS = {
    "identity": ForwardOperator(
        operator_id="identity",
        apply=lambda x: np.asarray(x, float).copy(),
        adjoint=lambda m: np.asarray(m, float).copy(),
        pinv=lambda m: np.asarray(m, float).copy(),
        measurement_shape=lambda shape: shape,
    ),
    "avgpool2": _make_pool_operator(2),
    "avgpool4": _make_pool_operator(4),
}


def get_operator(operator_id: str) -> ForwardOperator:
    try:
        return _OPERATORS[operator_id]
    except KeyError:
        raise ConfigError(
            f"unknown operator '{operator_id}'; "
            f"registered: {sorted(_OPERATORS)}") from None


def registered_operators():
    return dict(_OPERATORS)


def data_consistency_value(x: np.ndarray, m: np.ndarray,
                           A: ForwardOperator) -> float:
    r = A.apply(x) - m
    return 0.5 * float(np.sum(r * r))


def data_consistency_grad(x, m, A: ForwardOperator) -> np.ndarray:
    """Gradient of 0.5 * ||A x - m||^2, i.e. A^T (A x - m)."""
    x = x.data if isinstance(x, Image) else np.asarray(x, float)
    m = m.data if isinstance(m, Measurement) else np.asarray(m, float)
    Ax = A.apply(x)
    if Ax.shape != m.shape:
        raise ValueError(
            f"measurement shape {m.shape} incompatible with A(x) {Ax.shape}")
    return A.adjoint(Ax - m)


@dataclass(frozen=True)
class ReconConfig:
    S: int = 10
    T: float = 1.0
    tau: float = 0.7
    init_mode: str = "pseudoinverse"  # noise | pseudoinverse | mixture
    noise_seed: int = 0
    denoiser_blur: float = 1.5
    injected_noise_std: float = 0.05
    schedule_decay: float = 0.5

    def validate(self):
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.T <= 0:
            raise ConfigError("T must be positive")
        if self.init_mode not in ("noise", "pseudoinverse", "mixture"):
            raise ConfigError(f"unknown init_mode '{self.init_mode}'")


@dataclass(frozen=True)
class Trajectory:
    """Post-data-consistency iterates (x_i, t_i), times strictly decreasing."""

    steps: tuple  # of (np.ndarray, float)
    horizon: float
    case_id: str = ""

    def __post_init__(self):
        ts = [t for _, t in self.steps]
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory times must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def images(self):
        return [x for x, _ in self.steps]

    @property
    def times(self):
        return [t for _, t in self.steps]


class ReferenceDenoiser:
    """Deterministic stand-in for a learned denoiser.

    Blends the current iterate toward a fixed smoothed back-projection of the
    measurement, with blend weight t / T; at t = 0 it is the identity.
    """

    def __init__(self, m: np.ndarray, A: ForwardOperator, T: float,
                 blur: float = 1.5):
        self.T = float(T)
        self.target = gaussian_filter(A.adjoint(np.asarray(m, float)),
                                      sigma=blur)

    def predict(self, z: np.ndarray, t: float) -> np.ndarray:
        if not 0.0 <= t <= self.T:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        w = t / self.T
        return (1.0 - w) * z + w * self.target


def reference_denoiser(z, t: float, m, A: ForwardOperator,
                       T: float = 1.0, blur: float = 1.5) -> np.ndarray:
    z = z.data if isinstance(z, Image) else np.asarray(z, float)
    m = m.data if isinstance(m, Measurement) else np.asarray(m, float)
    return ReferenceDenoiser(m, A, T, blur).predict(z, t)


def reconstruct(m, A: ForwardOperator, cfg: ReconConfig,
                denoiser=None, case_id: str = "") -> Trajectory:
    """Run the iterative solver and record post-data-consistency iterates."""
    cfg.validate()
    m = m.data if isinstance(m, Measurement) else np.asarray(m, float)
    schedule = make_schedule(cfg.S, cfg.T, cfg.schedule_decay)
    if denoiser is None:
        denoiser = ReferenceDenoiser(m, A, cfg.T, cfg.denoiser_blur)

    rng = np.random.default_rng(cfg.noise_seed)
    img_shape = A.pinv(m).shape
    if cfg.init_mode == "noise":
        z = rng.standard_normal(img_shape)
    elif cfg.init_mode == "pseudoinverse":
        z = A.pinv(m)
    else:
        z = 0.5 * A.pinv(m) + 0.5 * rng.standard_normal(img_shape)

    steps = []
    times = schedule.times
    for i, t in enumerate(times):
        xbar = denoiser.predict(z, t)
        x = xbar - cfg.tau * data_consistency_grad(xbar, m, A)
        steps.append((x, t))
        if i + 1 < len(times):
            # re-inject noise with std proportional to the next time level
            level = times[i + 1] / cfg.T
            z = x + cfg.injected_noise_std * level * rng.standard_normal(
                x.shape)
    return Trajectory(tuple(steps), horizon=cfg.T, case_id=case_id)


def save_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, (x, _) in enumerate(traj.steps):
        np.save(path / f"step_{i:03d}.npy", x)
    manifest = {
        "case_id": traj.case_id,
        "horizon": traj.horizon,
        "times": [t for _, t in traj.steps],
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    steps = []
    for i, t in enumerate(manifest["times"]):
        steps.append((np.load(path / f"step_{i:03d}.npy"), float(t)))
    return Trajectory(tuple(steps), horizon=float(manifest["horizon"]),
                      case_id=manifest["case_id"])
