"""Configuration: environment defaults and the validated run configuration."""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger("qpi-explain")

# ============================================================================
# CONFIG
# ============================================================================

# Root directory for run directories (runs/<id>/...)
RUNS_DIR = os.environ.get("QPI_RUNS_DIR", os.path.join(os.getcwd(), "runs"))

# Worker cap for fan-out (variational passes, per-sample explanations)
THREADS = os.environ.get("QPI_THREADS", "")

LOG_LEVEL = os.environ.get("QPI_LOG_LEVEL", "INFO")

CLASS_NAMES = ("monocyte", "lymphocyte", "neutrophil", "eosinophil")

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of workers allowed by QPI_THREADS (defaults to the CPU count)."""
    if THREADS:
        try:
            return max(1, int(THREADS))
        except ValueError:
            logger.warning(f"ignoring non-integer QPI_THREADS={THREADS!r}")
    return max(1, os.cpu_count() or 1)


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None) -> List[R]:
    """Map ``fn`` over ``items`` on a thread pool; results keep input order."""
    n = workers or worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

class ArchitectureConfig(BaseModel):
    """Which network to build and how the 50x50 patches are fed to it."""

    name: str = "lenet5"
    input_extent: Optional[int] = Field(default=None, ge=8)
    channels: Optional[int] = Field(default=None, ge=1)
    dropout: float = Field(default=0.25, ge=0.0, lt=1.0)
    n_classes: int = Field(default=4, ge=2)
    widths: Optional[List[int]] = None

    @model_validator(mode="after")
    def _fill_defaults(self) -> "ArchitectureConfig":
        defaults = {
            "lenet5": (32, 1, [6, 16, 120, 84]),
            "alexnet_mini": (57, 3, [8, 16, 24, 24, 16, 128]),
        }
        if self.name in defaults:
            extent, channels, widths = defaults[self.name]
            if self.widths is None:
                self.widths = widths
            if self.input_extent is None:
                self.input_extent = extent
            if self.channels is None:
                self.channels = channels
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class LimeConfig(BaseModel):
    """Weighted multi-segmentation LIME settings (four SLIC parameter sets)."""

    segmentations: List[Tuple[int, float, float]] = Field(
        default_factory=lambda: [(15, 10.0, 3.0), (25, 10.0, 2.5), (35, 25.0, 3.0), (50, 15.0, 5.0)]
    )
    n_samples: int = Field(default=1000, ge=2)
    kernel_width: float = Field(default=0.25, gt=0)
    ridge_alpha: float = Field(default=1.0, gt=0)
    batch_size: int = Field(default=250, ge=1)

    @model_validator(mode="after")
    def _enough_samples(self) -> "LimeConfig":
        largest = max(seg[0] for seg in self.segmentations) if self.segmentations else 0
        if self.n_samples <= largest:
            raise ValueError(
                f"n_samples={self.n_samples} must exceed the largest segment count {largest}"
            )
        return self


class PreprocessConfig(BaseModel):
    background_window: int = Field(default=100, ge=1)
    threshold: float = 0.2
    min_area: int = Field(default=12, ge=1)
    pitch_um: float = Field(default=0.2, gt=0)
    wavelength_nm: float = Field(default=528.0, gt=0)
    min_diameter_um: float = 4.0
    min_circularity: float = 0.85
    clip_low: float = 0.2
    clip_high: float = 4.0
    patch_size: int = Field(default=50, ge=2)

    @field_validator("clip_high")
    @classmethod
    def _clip_order(cls, v: float, info) -> float:
        low = info.data.get("clip_low", 0.2)
        if v <= low:
            raise ValueError("clip_high must be greater than clip_low")
        return v


class SynthConfig(BaseModel):
    n_per_class: int = Field(default=500, ge=1)
    ood_per_kind: int = Field(default=200, ge=1)
    n_frames: int = Field(default=20, ge=1)
    cells_per_frame: int = Field(default=10, ge=0)
    label_noise: float = Field(default=0.02, ge=0, lt=1)


class ExplainConfig(BaseModel):
    n_samples: int = Field(default=40, ge=1)
    occlusion_size: int = Field(default=6, ge=1, le=50)
    occlusion_stride: int = Field(default=1, ge=1)
    meta_bins: int = Field(default=6, ge=1)
    perplexity: float = Field(default=30.0, gt=0)
    tsne_iters: int = Field(default=1000, ge=300)


class RunConfig(BaseModel):
    """Complete configuration of one experiment (snapshotted into every run dir)."""

    name: str = "qpi"
    seed: int = 0
    repeat: int = Field(default=15, ge=1)
    runs_dir: str = RUNS_DIR
    architectures: List[ArchitectureConfig] = Field(
        default_factory=lambda: [
            ArchitectureConfig(name="lenet5", dropout=0.25),
            ArchitectureConfig(name="alexnet_mini", dropout=0.5),
        ]
    )
    train: TrainConfig = Field(default_factory=TrainConfig)
    passes: int = Field(default=100, ge=2)
    vi_metric: Literal["mean", "median"] = "mean"
    bins: int = Field(default=10, ge=1)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    mislabel_threshold: float = Field(default=0.95, ge=0, le=1)
    mislabel_folds: int = Field(default=5, ge=2)
    ood_source: Literal["vi_std", "softmax_max"] = "vi_std"
    lime: LimeConfig = Field(default_factory=LimeConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    corpus_dir: Optional[str] = None
    frames_manifest: Optional[str] = None
    mnist_idx: Optional[str] = None

    def check_paths(self) -> None:
        """Every referenced input path must exist."""
        for field in ("corpus_dir", "frames_manifest", "mnist_idx"):
            value = getattr(self, field)
            if value and not os.path.exists(value):
                raise ConfigError(
                    f"{field} does not exist: {value}",
                    hint=f"Fix '{field}' in the config file or drop it to use the defaults.",
                )

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def validate(model_cls: type, data: Dict[str, Any]):
    """Validate ``data`` against ``model_cls``; pydantic errors become ConfigError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or model_cls.__name__
        raise ConfigError(
            f"invalid config at '{where}': {first.get('msg')}",
            hint="See config/default.json for a valid layout.",
        ) from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON run configuration and apply CLI overrides."""
    data: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}", hint="Pass --config <path> to an existing JSON file.")
        try:
            with open(p, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return validate(RunConfig, data)
