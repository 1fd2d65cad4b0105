"""Synthetic phase data: four leukocyte-like classes, multi-cell frames, OOD sets.

Cells are flat-topped Gaussian bumps ``h * exp(-(r/s)^4 / 2)`` whose 0.2 rad
iso-line sits at the drawn radius R, plus a membrane ring, band-limited
interior texture and sensor noise (sigma 0.02). Everything is raw phase in
radians; ``preprocess.normalize`` maps it to model input.

Class cues: size separates monocytes (large) from lymphocytes (small);
interior texture separates eosinophils (granular) from neutrophils.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .config import CLASS_NAMES, PreprocessConfig, parallel_map
from .errors import ConfigError, DegenerateContourError, MissingArtifactError
from .preprocess import PhaseFrame, filter_cells, patch_features
from .tensor_io import load_tensor, read_csv, save_tensor, write_csv

logger = logging.getLogger("qpi-explain")

PATCH = 50
FRAME_SHAPE = (382, 512)
SENSOR_NOISE = 0.02
ISO_LEVEL = 0.2
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)
MAX_REDRAWS = 100
OOD_KINDS = ("erythrocyte_like", "defocused", "aggregate", "ruptured", "digit_like", "noise", "thrombocyte_like")


@dataclass
class SynthClassSpec:
    name: str
    radius: float  # px, mean
    radius_std: float = 1.0
    texture: float = 0.05  # rad, interior texture amplitude
    ring: float = 0.2  # rad, membrane ring contrast
    height: float = 2.2  # rad, peak phase

    def __post_init__(self):
        if self.radius <= 0 or self.radius_std < 0:
            raise ConfigError(f"{self.name}: radius must be > 0 and radius_std >= 0")
        if self.texture < 0 or self.ring < 0 or self.height <= ISO_LEVEL:
            raise ConfigError(f"{self.name}: amplitudes must be >= 0 and height > {ISO_LEVEL}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


DEFAULT_SPECS = (
    SynthClassSpec("monocyte", radius=19.0, texture=0.06, ring=0.25, height=2.2),
    SynthClassSpec("lymphocyte", radius=13.0, texture=0.05, ring=0.10, height=2.6),
    SynthClassSpec("neutrophil", radius=16.0, texture=0.10, ring=0.30, height=2.0),
    SynthClassSpec("eosinophil", radius=16.0, texture=0.45, ring=0.30, height=2.4),
)


@dataclass
class Corpus:
    patches: np.ndarray  # [N, 50, 50] raw phase
    labels: np.ndarray
    ids: np.ndarray
    split: np.ndarray  # "train" | "val" | "test"
    radii: np.ndarray
    class_names: Tuple[str, ...] = CLASS_NAMES

    def subset(self, name: str) -> "Corpus":
        m = self.split == name
        return Corpus(self.patches[m], self.labels[m], self.ids[m], self.split[m], self.radii[m], self.class_names)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class FrameSet:
    frames: List[PhaseFrame]
    truths: List[List[Tuple[float, float, int]]] = field(default_factory=list)  # (x, y, class) per frame


# ============================================================================
# CELL RENDERING
# ============================================================================

def _grid(shape: Tuple[int, int], cx: float, cy: float, aspect: float = 1.0, angle: float = 0.0):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, (-s * dx + c * dy) / aspect
    return np.hypot(u, v), np.arctan2(v, u)


def render_cell(spec: SynthClassSpec, rng: np.random.Generator, shape: Tuple[int, int] = (PATCH, PATCH),
                center: Optional[Tuple[float, float]] = None, scale: float = 1.0) -> Tuple[np.ndarray, float]:
    """Noise-free cell on an empty canvas; returns (phase, drawn radius)."""
    radius = max(4.0, rng.normal(spec.radius, spec.radius_std) * scale)
    height = spec.height * scale * rng.uniform(0.9, 1.1)
    if center is None:
        center = ((shape[1] - 1) / 2 + rng.uniform(-2, 2), (shape[0] - 1) / 2 + rng.uniform(-2, 2))
    r, _ = _grid(shape, center[0], center[1], aspect=rng.uniform(0.93, 1.0), angle=rng.uniform(0, math.pi))
    s = radius / (2 * math.log(height / ISO_LEVEL)) ** 0.25
    body = height * np.exp(-0.5 * (r / s) ** 4)
    envelope = body / height
    ring = spec.ring * np.exp(-0.5 * ((r - 0.8 * radius) / 1.5) ** 2) * envelope
    texture = gaussian_filter(rng.normal(size=shape), 1.2)
    texture *= spec.texture / max(texture.std(), 1e-12)
    return body + ring + texture * envelope ** 2, radius


def _finish(phase: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.maximum(phase + rng.normal(0.0, SENSOR_NOISE, size=phase.shape), 0.0)


def _shifted(spec: SynthClassSpec, donor_shift: float) -> SynthClassSpec:
    if not donor_shift:
        return spec
    return SynthClassSpec(spec.name, spec.radius * (1 + donor_shift), spec.radius_std,
                          spec.texture, spec.ring, spec.height * (1 + donor_shift))


# ============================================================================
# CORPUS
# ============================================================================

def split_labels(labels: Sequence[int], seed: int, fractions: Tuple[float, float, float] = SPLIT_FRACTIONS) -> np.ndarray:
    """Class-stratified train/val/test assignment."""
    labels = np.asarray(labels)
    split = np.empty(len(labels), dtype=object)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[np.random.default_rng([seed, int(k), 1]).permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        split[idx[:n_train]] = "train"
        split[idx[n_train:n_train + n_val]] = "val"
        split[idx[n_train + n_val:]] = "test"
    return split.astype(str)


def passes_gate(patch: np.ndarray, gate: Optional[PreprocessConfig] = None) -> bool:
    """True when the patch's largest object survives the morphology filter."""
    gate = gate or PreprocessConfig()
    try:
        features = patch_features(patch, gate)
    except DegenerateContourError:
        return False
    return features is not None and filter_cells(features, gate.min_diameter_um, gate.min_circularity)


def generate_corpus(specs: Optional[Sequence[SynthClassSpec]] = None, n_per_class: int = 500, seed: int = 0,
                    donor_shift: float = 0.0, gate: Optional[PreprocessConfig] = None) -> Corpus:
    """Balanced labelled patches, bitwise identical for a given seed.

    Every patch passes the preprocessing gate (``gate``, default
    ``PreprocessConfig()``): a cell whose contour fails the diameter or
    circularity filter is redrawn from the next RNG stream, up to
    ``MAX_REDRAWS`` times.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    specs = list(specs or DEFAULT_SPECS)
    gate = gate or PreprocessConfig()
    jobs = [(k, i) for k in range(len(specs)) for i in range(n_per_class)]

    def one(job):
        k, i = job
        spec = _shifted(specs[k], donor_shift)
        for attempt in range(MAX_REDRAWS):
            rng = np.random.default_rng([seed, k, i] if attempt == 0 else [seed, k, i, attempt])
            phase, radius = render_cell(spec, rng)
            patch = _finish(phase, rng)
            if passes_gate(patch, gate):
                if attempt:
                    logger.debug(f"corpus: {spec.name} #{i} redrawn {attempt} time(s)")
                return patch, radius
        raise ConfigError(f"{spec.name}: no cell passed the preprocessing gate in {MAX_REDRAWS} draws",
                          hint="Check the class spec against preprocess.min_diameter_um and min_circularity.")

    rendered = parallel_map(one, jobs)
    labels = np.array([k for k, _ in jobs], dtype=np.int64)
    return Corpus(
        patches=np.stack([p for p, _ in rendered]),
        labels=labels,
        ids=np.arange(len(jobs), dtype=np.int64),
        split=split_labels(labels, seed),
        radii=np.array([r for _, r in rendered]),
        class_names=tuple(s.name for s in specs),
    )


def flip_labels(labels: Sequence[int], fraction: float, seed: int, n_classes: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Plant label noise: returns (noisy labels, sorted flipped indices)."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    rng = np.random.default_rng([seed, 2])
    n_flip = int(round(fraction * len(labels)))
    flipped = np.sort(rng.choice(len(labels), size=n_flip, replace=False))
    for i in flipped:
        labels[i] = (labels[i] + rng.integers(1, n_classes)) % n_classes
    return labels, flipped


def write_corpus(directory: Union[str, Path], corpus: Corpus) -> None:
    directory = Path(directory)
    save_tensor(directory / "patches.qpit", corpus.patches)
    rows = [[int(i), int(y), corpus.class_names[y], s, float(r)]
            for i, y, s, r in zip(corpus.ids, corpus.labels, corpus.split, corpus.radii)]
    write_csv(directory / "manifest.csv", ["id", "label", "class", "split", "radius"], rows)


def load_corpus(directory: Union[str, Path]) -> Corpus:
    directory = Path(directory)
    for name in ("patches.qpit", "manifest.csv"):
        if not (directory / name).exists():
            raise MissingArtifactError(str(directory / name), "synth")
    rows = read_csv(directory / "manifest.csv")
    names: Dict[int, str] = {int(r["label"]): r["class"] for r in rows}
    return Corpus(
        patches=load_tensor(directory / "patches.qpit"),
        labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
        ids=np.array([int(r["id"]) for r in rows], dtype=np.int64),
        split=np.array([r["split"] for r in rows]),
        radii=np.array([float(r["radius"]) for r in rows]),
        class_names=tuple(names[k] for k in sorted(names)) or CLASS_NAMES,
    )


# ============================================================================
# FRAMES
# ============================================================================

def _background(shape: Tuple[int, int], seed: int) -> np.ndarray:
    """Static optical background shared by all frames of a stack."""
    rng = np.random.default_rng([seed, 3])
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]] / max(shape)
    tilt = rng.uniform(0.1, 0.4) * xx + rng.uniform(0.1, 0.4) * yy
    speckle = gaussian_filter(rng.normal(size=shape), 8)
    return tilt + speckle * (0.05 / max(speckle.std(), 1e-12))


def generate_frames(specs: Optional[Sequence[SynthClassSpec]] = None, n_frames: int = 20, cells_per_frame: int = 10,
                    seed: int = 0, shape: Tuple[int, int] = FRAME_SHAPE, background: bool = True) -> FrameSet:
    """Multi-cell frames with known centroids; overlapping placements are redrawn up to 100 times."""
    specs = list(specs or DEFAULT_SPECS)
    bg = _background(shape, seed) if background else np.zeros(shape)
    frames: List[PhaseFrame] = []
    truths: List[List[Tuple[float, float, int]]] = []
    for f in range(n_frames):
        rng = np.random.default_rng([seed, 4, f])
        phase = bg.copy()
        placed: List[Tuple[float, float, float, int]] = []
        for c in range(cells_per_frame):
            k = int(rng.integers(len(specs)))
            reach = specs[k].radius + 3 * specs[k].radius_std + 2
            for _ in range(100):
                x = rng.uniform(reach + 1, shape[1] - reach - 1)
                y = rng.uniform(reach + 1, shape[0] - reach - 1)
                if all(math.hypot(x - px, y - py) > reach + pr + 4 for px, py, pr, _ in placed):
                    placed.append((x, y, reach, k))
                    break
            else:
                logger.warning(f"frame {f}: could not place cell {c + 1}/{cells_per_frame}; keeping {len(placed)}")
                break
        for x, y, _, k in placed:
            cell, _ = render_cell(specs[k], rng, shape=shape, center=(x, y))
            phase += cell
        frames.append(PhaseFrame(f, phase + rng.normal(0.0, SENSOR_NOISE, size=shape)))
        truths.append([(x, y, k) for x, y, _, k in placed])
    return FrameSet(frames, truths)


# ============================================================================
# OUT-OF-DISTRIBUTION SETS
# ============================================================================

def _erythrocyte(rng):
    r, _ = _grid((PATCH, PATCH), 24.5 + rng.uniform(-2, 2), 24.5 + rng.uniform(-2, 2), aspect=rng.uniform(0.9, 1.0))
    r0, width = rng.uniform(9, 12), rng.uniform(3, 4)
    return rng.uniform(1.2, 1.6) * np.exp(-0.5 * ((r - r0) / width) ** 2) + 0.3 * np.exp(-0.5 * (r / r0) ** 4)


def _defocused(rng):
    phase, _ = render_cell(DEFAULT_SPECS[int(rng.integers(4))], rng)
    return gaussian_filter(phase, rng.uniform(2.5, 4.0)) * rng.uniform(0.6, 0.8)


def _aggregate(rng):
    a, b = DEFAULT_SPECS[int(rng.integers(4))], DEFAULT_SPECS[int(rng.integers(4))]
    angle = rng.uniform(0, 2 * math.pi)
    offset = 0.45 * (a.radius + b.radius)
    c1 = (24.5 - 0.5 * offset * math.cos(angle), 24.5 - 0.5 * offset * math.sin(angle))
    c2 = (24.5 + 0.5 * offset * math.cos(angle), 24.5 + 0.5 * offset * math.sin(angle))
    p1, _ = render_cell(a, rng, center=c1, scale=0.8)
    p2, _ = render_cell(b, rng, center=c2, scale=0.8)
    return np.maximum(p1, p2)


def _ruptured(rng):
    spec = DEFAULT_SPECS[int(rng.integers(4))]
    r, theta = _grid((PATCH, PATCH), 24.5, 24.5)
    lobes = int(rng.integers(4, 8))
    rim = spec.radius * (1 + 0.4 * np.cos(lobes * theta + rng.uniform(0, 2 * math.pi)))
    s = rim / (2 * math.log(spec.height / ISO_LEVEL)) ** 0.25
    body = spec.height * np.exp(-0.5 * (r / s) ** 4)
    debris = gaussian_filter(rng.normal(size=(PATCH, PATCH)), 1.0)
    return body + 0.3 * debris * (body > ISO_LEVEL)


def _leukocyte_height(rng):
    heights = [s.height for s in DEFAULT_SPECS]
    return rng.uniform(min(heights), max(heights))


def _digit(rng):
    canvas = np.zeros((PATCH, PATCH), dtype=np.uint8)
    text = str(int(rng.integers(10)))
    org = (int(rng.integers(10, 16)), int(rng.integers(38, 44)))
    cv2.putText(canvas, text, org, cv2.FONT_HERSHEY_SIMPLEX, rng.uniform(1.1, 1.4), 255,
                thickness=int(rng.integers(4, 6)), lineType=cv2.LINE_AA)
    return gaussian_filter(canvas / 255.0, 0.8) * _leukocyte_height(rng)


def _noise(rng):
    return rng.random((PATCH, PATCH))


def _thrombocyte(rng):
    spec = SynthClassSpec("thrombocyte", radius=rng.uniform(4.0, 6.0), radius_std=0.3,
                          texture=0.02, ring=0.0, height=rng.uniform(0.8, 1.2))
    return render_cell(spec, rng)[0]


_OOD = {
    "erythrocyte_like": _erythrocyte,
    "defocused": _defocused,
    "aggregate": _aggregate,
    "ruptured": _ruptured,
    "digit_like": _digit,
    "noise": _noise,
    "thrombocyte_like": _thrombocyte,
}


def mnist_patches(images: np.ndarray) -> np.ndarray:
    """Center [N, h, w] digit images in [0, 1] on 50x50 patches (no rescaling)."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if h > PATCH or w > PATCH:
        raise ConfigError(f"digit images {h}x{w} exceed the {PATCH}x{PATCH} patch")
    out = np.zeros((n, PATCH, PATCH))
    t, l = (PATCH - h) // 2, (PATCH - w) // 2
    out[:, t:t + h, l:l + w] = images
    return out


def generate_ood(kind: str, n: int, seed: int = 0, digits: Optional[np.ndarray] = None) -> np.ndarray:
    """[n, 50, 50] raw-phase patches of one out-of-distribution kind.

    With ``digits`` (patches from ``mnist_patches``), ``digit_like`` samples
    real handwritten digits instead of rendered glyphs.
    """
    if kind not in _OOD:
        raise ConfigError(f"unknown OOD kind '{kind}'", hint=f"Use one of {', '.join(OOD_KINDS)}.")
    code = OOD_KINDS.index(kind)
    use_digits = kind == "digit_like" and digits is not None and len(digits) > 0

    def one(i):
        rng = np.random.default_rng([seed, 5, code, i])
        if use_digits:
            phase = gaussian_filter(digits[int(rng.integers(len(digits)))], 0.8) * _leukocyte_height(rng)
        else:
            phase = _OOD[kind](rng)
        return phase if kind == "noise" else _finish(phase, rng)

    out = parallel_map(one, list(range(n)))
    return np.stack(out) if out else np.zeros((0, PATCH, PATCH))
