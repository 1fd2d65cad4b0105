"""Phase frames -> single-cell patches with morphological features.

Pipeline per frame::

    background median (window of frames) -> threshold -> outer contours (Suzuki)
    -> features (P, A, d, V, L, C) -> diameter/circularity gate -> 50x50 crop

Units: pitch in um/px, wavelength in nm, phase in rad. Optical volume is
``sum(phi) * lambda / (2 pi) * pitch^2`` in um^3.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .config import PreprocessConfig, parallel_map
from .errors import DataError, DegenerateContourError
from .tensor_io import load_tensor, write_csv

logger = logging.getLogger("qpi-explain")

FEATURE_COLUMNS = ["frame", "contour", "P", "A", "d", "V", "L", "C", "keep"]
MAX_CIRCULARITY = 1.05


@dataclass
class PhaseFrame:
    frame_id: int
    phase: np.ndarray

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.phase.ndim != 2 or min(self.phase.shape) == 0:
            raise DataError(f"frame {self.frame_id}: expected a non-empty 2-D array, got {self.phase.shape}")
        if not np.all(np.isfinite(self.phase)):
            raise DataError(f"frame {self.frame_id}: non-finite phase values")


@dataclass
class Contour:
    """Outer border of one connected foreground region."""

    contour_id: int
    points: np.ndarray  # [M, 2] (x, y), CHAIN_APPROX_NONE
    origin: Tuple[int, int]  # (x0, y0) of ``mask`` in frame coordinates
    mask: np.ndarray  # filled region, bool
    centroid: Tuple[float, float]  # (x, y)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class CellPatch:
    data: np.ndarray
    frame_id: int = -1
    contour_id: int = -1
    centroid: Tuple[float, float] = (0.0, 0.0)


@dataclass
class MorphFeatures:
    P: int
    A: float
    d: float
    V: float
    L: float
    C: float
    wavelength_nm: float = 528.0
    pitch_um: float = 0.2

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ProcessResult:
    patches: List[CellPatch] = field(default_factory=list)
    rows: List[List[Any]] = field(default_factory=list)
    features: List[MorphFeatures] = field(default_factory=list)

    @property
    def kept(self) -> int:
        return len(self.patches)


def _as_frames(frames: Sequence[Union[PhaseFrame, np.ndarray]]) -> List[PhaseFrame]:
    return [f if isinstance(f, PhaseFrame) else PhaseFrame(i, f) for i, f in enumerate(frames)]


def subtract_background(frames: Sequence[Union[PhaseFrame, np.ndarray]], window: int = 100) -> List[PhaseFrame]:
    """Subtract the per-pixel median of each block of ``window`` frames; clamp at 0.

    A trailing block shorter than ``window`` is folded into the previous one.
    """
    frames = _as_frames(frames)
    if not frames:
        raise DataError("subtract_background needs at least one frame")
    shapes = {f.phase.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"frames differ in shape: {sorted(shapes)}")
    n = len(frames)
    if n < window:
        logger.warning(f"only {n} frames for a background window of {window}; using all of them")
    bounds = list(range(0, n, window)) if n >= window else [0]
    if len(bounds) > 1 and n - bounds[-1] < window:
        bounds.pop()
    bounds.append(n)
    out: List[PhaseFrame] = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        stack = np.stack([f.phase for f in frames[lo:hi]])
        background = np.median(stack, axis=0)
        for f in frames[lo:hi]:
            out.append(PhaseFrame(f.frame_id, np.maximum(f.phase - background, 0.0)))
    return out


def segment(frame: Union[PhaseFrame, np.ndarray], threshold: float = 0.2, min_area: int = 12) -> List[Contour]:
    """Outer contours of the pixels strictly above ``threshold``, smallest area dropped."""
    phase = frame.phase if isinstance(frame, PhaseFrame) else np.asarray(frame, dtype=np.float64)
    binary = (phase > threshold).astype(np.uint8)
    if not binary.any():
        return []
    found, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    contours: List[Contour] = []
    for raw in found:
        pts = raw.reshape(-1, 2)
        x0, y0 = int(pts[:, 0].min()), int(pts[:, 1].min())
        w, h = int(pts[:, 0].max()) - x0 + 1, int(pts[:, 1].max()) - y0 + 1
        canvas = np.zeros((h, w), dtype=np.uint8)
        cv2.drawContours(canvas, [raw - np.array([x0, y0], dtype=raw.dtype)], -1, 1, thickness=cv2.FILLED)
        mask = canvas.astype(bool)
        if mask.sum() < min_area:
            continue
        m = cv2.moments(canvas, binaryImage=True)
        centroid = (x0 + m["m10"] / m["m00"], y0 + m["m01"] / m["m00"])
        contours.append(Contour(-1, pts, (x0, y0), mask, centroid))
    contours.sort(key=lambda c: (c.origin[1], c.origin[0]))
    for i, c in enumerate(contours):
        c.contour_id = i
    return contours


def extract_patch(frame: Union[PhaseFrame, np.ndarray], contour: Contour, size: int = 50) -> CellPatch:
    """``size`` x ``size`` crop centred on the contour centroid, zero-padded at frame edges."""
    pf = frame if isinstance(frame, PhaseFrame) else PhaseFrame(-1, frame)
    cx, cy = int(round(contour.centroid[0])), int(round(contour.centroid[1]))
    padded = np.pad(pf.phase, size)
    top, left = cy - size // 2 + size, cx - size // 2 + size
    data = padded[top:top + size, left:left + size].copy()
    return CellPatch(data=data, frame_id=pf.frame_id, contour_id=contour.contour_id, centroid=contour.centroid)


def morph_features(contour: Contour, frame: Union[PhaseFrame, np.ndarray],
                   pitch: float = 0.2, wavelength_nm: float = 528.0) -> MorphFeatures:
    phase = frame.phase if isinstance(frame, PhaseFrame) else np.asarray(frame, dtype=np.float64)
    if len(contour.points) < 3:
        raise DegenerateContourError(f"contour {contour.contour_id} has {len(contour.points)} point(s)")
    length_px = cv2.arcLength(contour.points.reshape(-1, 1, 2).astype(np.int32), True)
    if length_px <= 0:
        raise DegenerateContourError(f"contour {contour.contour_id} has zero perimeter")
    x0, y0 = contour.origin
    h, w = contour.mask.shape
    region = phase[y0:y0 + h, x0:x0 + w][contour.mask]
    p = int(contour.mask.sum())
    area = p * pitch ** 2
    perimeter = length_px * pitch
    volume = float(region.sum()) * (wavelength_nm * 1e-3) / (2 * math.pi) * pitch ** 2
    circularity = min(4 * math.pi * area / perimeter ** 2, MAX_CIRCULARITY)
    return MorphFeatures(
        P=p,
        A=area,
        d=math.sqrt(4 * area / math.pi),
        V=volume,
        L=perimeter,
        C=circularity,
        wavelength_nm=wavelength_nm,
        pitch_um=pitch,
    )


def filter_cells(features: MorphFeatures, min_diameter: float = 4.0, min_circularity: float = 0.85) -> bool:
    return features.d >= min_diameter and features.C >= min_circularity


def normalize(patch: np.ndarray, low: float = 0.2, high: float = 4.0) -> np.ndarray:
    x = np.clip(np.asarray(patch, dtype=np.float64), low, high)
    return (x - low) / (high - low)


def patch_features(patch: np.ndarray, config: Optional[PreprocessConfig] = None) -> Optional[MorphFeatures]:
    """Features of the largest object in a raw (un-normalised) patch, or None."""
    config = config or PreprocessConfig()
    contours = segment(patch, config.threshold, config.min_area)
    if not contours:
        return None
    largest = max(contours, key=lambda c: c.pixel_count)
    return morph_features(largest, patch, config.pitch_um, config.wavelength_nm)


# ============================================================================
# FRAME PIPELINE
# ============================================================================

def _process_one(frame: PhaseFrame, config: PreprocessConfig):
    patches, rows, feats = [], [], []
    for contour in segment(frame, config.threshold, config.min_area):
        try:
            f = morph_features(contour, frame, config.pitch_um, config.wavelength_nm)
        except DegenerateContourError as e:
            logger.debug(f"frame {frame.frame_id}: {e}")
            continue
        keep = filter_cells(f, config.min_diameter_um, config.min_circularity)
        rows.append([frame.frame_id, contour.contour_id, f.P, f.A, f.d, f.V, f.L, f.C, keep])
        feats.append(f)
        if keep:
            patches.append(extract_patch(frame, contour, config.patch_size))
    return patches, rows, feats


def process_frames(frames: Sequence[Union[PhaseFrame, np.ndarray]],
                   config: Optional[PreprocessConfig] = None) -> ProcessResult:
    """Background subtraction, segmentation, features, gate and crop for a frame stack."""
    config = config or PreprocessConfig()
    corrected = subtract_background(frames, config.background_window)
    result = ProcessResult()
    for patches, rows, feats in parallel_map(lambda f: _process_one(f, config), corrected):
        result.patches.extend(patches)
        result.rows.extend(rows)
        result.features.extend(feats)
    logger.info(f"preprocess: {len(result.rows)} contours, {result.kept} cells kept from {len(corrected)} frames")
    return result


def write_features(path: Union[str, Path], rows: List[List[Any]]) -> None:
    write_csv(path, FEATURE_COLUMNS, rows)


def load_frames(manifest_path: Union[str, Path]) -> List[PhaseFrame]:
    """Load frames listed in a JSON manifest.

    Entries are ``{"id": int, "path": str, "scale": float}``; ``.png`` files are
    read as 16-bit grayscale and multiplied by ``scale`` (rad per level), any
    other file is read as a tensor file.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    frames = []
    for i, entry in enumerate(manifest.get("frames", [])):
        path = manifest_path.parent / entry["path"]
        if not path.exists():
            raise DataError(f"frame file not found: {path}", hint="Fix the path in the frames manifest.")
        if path.suffix.lower() == ".png":
            img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if img is None or img.ndim != 2:
                raise DataError(f"not a single-channel PNG: {path}")
            if "scale" not in entry:
                raise DataError(f"PNG frame {path.name} has no 'scale' (rad per level) in the manifest")
            phase = img.astype(np.float64) * float(entry["scale"])
        else:
            phase = load_tensor(path)
        frames.append(PhaseFrame(int(entry.get("id", i)), phase))
    if not frames:
        raise DataError(f"no frames listed in {manifest_path}")
    return frames
