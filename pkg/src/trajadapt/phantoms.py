"""Synthetic layered phantoms with blob lesions, plus case persistence.

A case bundles a clean image, its segmentation mask, and a simulated
measurement.  The clean image is a stack of horizontal intensity bands
(mimicking layered anatomy); each foreground class adds elliptical lesions
with a class-specific appearance so that the segmentation task is learnable
from intensity/texture alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class ConfigError(ValueError):
    """Invalid phantom or pipeline configuration."""


class CaseIOError(IOError):
    """Case directory is missing, truncated, or inconsistent."""


@dataclass(frozen=True)
class Image:
    """2D intensity image, nominal range [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SegmentationMask:
    """Integer label map; class 0 is background."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {arr.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if arr.min() < 0 or arr.max() >= self.num_classes:
            raise ValueError(
                f"labels out of range [0, {self.num_classes - 1}]"
            )
        object.__setattr__(self, "labels", arr)


@dataclass(frozen=True)
class Measurement:
    """Observed data produced by a forward operator (may be smaller than the image)."""

    data: np.ndarray
    operator_id: str

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("measurement contains non-finite values")
        if not self.operator_id:
            raise ValueError("operator_id must be non-empty")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class Volume:
    """Ordered stack of same-sized slices belonging to one case."""

    slices: tuple
    case_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        shapes = {s.data.shape for s in self.slices}
        if len(shapes) > 1:
            raise ValueError(f"slices have mixed shapes: {shapes}")


@dataclass(frozen=True)
class SyntheticCase:
    clean: Image
    mask: SegmentationMask
    measurement: Measurement
    seed: int
    case_id: str = ""


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    n_bands_range: tuple = (4, 6)
    lesions_per_class: tuple = (1, 3)
    lesion_radius_range: tuple = (3, 10)
    # probability that a given foreground class is entirely absent
    class_absent_prob: float = 0.25
    noise_std: float = 0.01
    operator_id: str = "identity"
    edge_blur: float = 0.6

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background + lesions)")
        if self.height <= 0 or self.width <= 0:
            raise ConfigError("phantom dimensions must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass(frozen=True)
class ShiftConfig:
    """Target-domain shift applied to measurements: gamma remap plus extra noise."""

    gamma: float = 1.2
    scale: float = 0.85
    noise_std: float = 0.02


# class appearance: (base intensity, speckle amplitude) per foreground class,
# cycled if C - 1 exceeds the table
_CLASS_APPEARANCE = [
    (0.03, 0.0),   # dark fluid-like blob
    (0.97, 0.0),   # bright deposit-like blob
    (0.10, 0.20),  # dark speckled blob
    (0.90, 0.15),
    (0.30, 0.10),
]


def _draw_ellipse(rng: np.random.Generator, H: int, W: int,
                  radius_range: tuple) -> np.ndarray:
    cy = rng.uniform(0.15 * H, 0.85 * H)
    cx = rng.uniform(0.15 * W, 0.85 * W)
    ry = rng.uniform(*radius_range)
    rx = rng.uniform(*radius_range)
    phi = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:H, 0:W]
    y = yy - cy
    x = xx - cx
    c, s = np.cos(phi), np.sin(phi)
    u = (c * x + s * y) / rx
    v = (-s * x + c * y) / ry
    return (u ** 2 + v ** 2) <= 1.0


def generate_synthetic_case(seed: int, config: PhantomConfig,
                            case_id: str = "") -> SyntheticCase:
    """Deterministically generate one phantom case from (seed, config)."""
    config.validate()
    rng = np.random.default_rng(seed)
    H, W, C = config.height, config.width, config.num_classes

    # layered background: horizontal bands of distinct intensity
    n_bands = int(rng.integers(config.n_bands_range[0],
                               config.n_bands_range[1] + 1))
    cuts = np.sort(rng.choice(np.arange(4, H - 4), size=n_bands - 1,
                              replace=False))
    edges = np.concatenate([[0], cuts, [H]])
    band_vals = rng.permutation(np.linspace(0.2, 0.8, n_bands))
    clean = np.zeros((H, W), dtype=np.float64)
    for b in range(n_bands):
        clean[edges[b]:edges[b + 1], :] = band_vals[b]

    # elliptical lesions, one appearance per foreground class
    labels = np.zeros((H, W), dtype=np.int64)
    for c in range(1, C):
        if rng.uniform() < config.class_absent_prob:
            continue
        n_lesions = int(rng.integers(config.lesions_per_class[0],
                                     config.lesions_per_class[1] + 1))
        base, speckle = _CLASS_APPEARANCE[(c - 1) % len(_CLASS_APPEARANCE)]
        for _ in range(n_lesions):
            blob = _draw_ellipse(rng, H, W, config.lesion_radius_range)
            labels[blob] = c
            tex = base + speckle * rng.standard_normal((H, W))
            clean[blob] = tex[blob]

    if config.edge_blur > 0:
        clean = gaussian_filter(clean, sigma=config.edge_blur)
    clean = np.clip(clean, 0.0, 1.0)

    from .recon import get_operator  # local import to avoid cycle

    op = get_operator(config.operator_id)
    meas = op.apply(clean) + config.noise_std * rng.standard_normal(
        op.measurement_shape((H, W)))

    cid = case_id or f"case_{seed:06d}"
    return SyntheticCase(
        clean=Image(clean),
        mask=SegmentationMask(labels, C),
        measurement=Measurement(meas, config.operator_id),
        seed=seed,
        case_id=cid,
    )


def apply_domain_shift(case: SyntheticCase, shift: ShiftConfig,
                       seed: int) -> SyntheticCase:
    """Remap the measurement's intensity histogram and add target-domain noise."""
    rng = np.random.default_rng(seed)
    m = np.clip(case.measurement.data, 0.0, 1.0)
    m = shift.scale * np.power(m, shift.gamma)
    m = m + shift.noise_std * rng.standard_normal(m.shape)
    return SyntheticCase(
        clean=case.clean,
        mask=case.mask,
        measurement=Measurement(m, case.measurement.operator_id),
        seed=case.seed,
        case_id=case.case_id,
    )


def save_case(case: SyntheticCase, path) -> None:
    """Write a case as raw .npy arrays plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "clean.npy", case.clean.data)
    np.save(path / "mask.npy", case.mask.labels)
    np.save(path / "measurement.npy", case.measurement.data)
    manifest = {
        "case_id": case.case_id,
        "seed": case.seed,
        "height": case.clean.height,
        "width": case.clean.width,
        "num_classes": case.mask.num_classes,
        "operator_id": case.measurement.operator_id,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_case(path) -> SyntheticCase:
    """Load a case written by :func:`save_case`, validating the manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CaseIOError(f"{path}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CaseIOError(f"{manifest_path}: corrupt manifest ({e})") from e
    arrays = {}
    for name in ("clean", "mask", "measurement"):
        f = path / f"{name}.npy"
        if not f.exists():
            raise CaseIOError(f"{path}: missing {name}.npy")
        try:
            arrays[name] = np.load(f)
        except Exception as e:
            raise CaseIOError(f"{f}: corrupt array file ({e})") from e
    C = int(manifest["num_classes"])
    if C < 2:
        raise CaseIOError(f"{path}: manifest declares num_classes={C} < 2")
    if arrays["clean"].shape != (manifest["height"], manifest["width"]):
        raise CaseIOError(
            f"{path}: clean image shape {arrays['clean'].shape} does not "
            f"match manifest dims")
    if arrays["mask"].shape != arrays["clean"].shape:
        raise CaseIOError(f"{path}: mask/image shape mismatch")
    return SyntheticCase(
        clean=Image(arrays["clean"]),
        mask=SegmentationMask(arrays["mask"], C),
        measurement=Measurement(arrays["measurement"],
                                manifest["operator_id"]),
        seed=int(manifest["seed"]),
        case_id=manifest["case_id"],
    )


def cases_equal(a: SyntheticCase, b: SyntheticCase) -> bool:
    return (
        np.array_equal(a.clean.data, b.clean.data)
        and np.array_equal(a.mask.labels, b.mask.labels)
        and a.mask.num_classes == b.mask.num_classes
        and np.array_equal(a.measurement.data, b.measurement.data)
        and a.measurement.operator_id == b.measurement.operator_id
        and a.seed == b.seed
        and a.case_id == b.case_id
    )
