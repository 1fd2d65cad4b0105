"""Per-sample visual explanations on 50x50 patches.

Methods: occlusion, saliency (vanilla backprop), Grad-CAM, guided
backpropagation (optionally multiplied with Grad-CAM) and LIME fused over
several SLIC segmentations.

A "model" is either a ``Network`` (patches are resized and channel-replicated
with ``models.prepare``) or any callable mapping [N, 50, 50] patches to [N, K]
probabilities. Gradient methods need a ``Network``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from skimage.segmentation import relabel_sequential, slic as _skimage_slic
from sklearn.linear_model import Ridge
from sklearn.metrics import pairwise_distances

from .config import ExplainConfig, LimeConfig, parallel_map
from .errors import CapabilityError, ConfigError, MissingArtifactError
from .models import prepare, prepare_adjoint, resize_patch
from .nn import Network, softmax
from .tensor_io import load_tensor, read_json, save_tensor, write_csv, write_json

logger = logging.getLogger("qpi-explain")

METHODS = ("lime", "occlusion", "saliency", "grad_cam", "guided_backprop", "guided_grad_cam")
PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class ExplanationMap:
    values: np.ndarray  # [H, W] signed attributions
    method: str
    model: str
    sample_id: int = -1
    target: int = 0

    def meta(self) -> Dict[str, Any]:
        return {"method": self.method, "model": self.model, "sample_id": self.sample_id, "target": self.target,
                "shape": list(self.values.shape)}

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        save_tensor(path, self.values)
        write_json(path.with_suffix(".json"), self.meta())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExplanationMap":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(str(path), "explain")
        meta = read_json(path.with_suffix(".json"))
        return cls(load_tensor(path), meta["method"], meta["model"], meta["sample_id"], meta["target"])


@dataclass
class SegmentationMask:
    labels: np.ndarray  # [H, W] in 0..S-1
    segmenter: int = 0

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class LimeSurrogate:
    segmentation: SegmentationMask
    weights: np.ndarray  # per segment
    intercept: float
    score: float  # weighted R^2 of the ridge fit


def predictor(model: Union[Network, PredictFn]) -> PredictFn:
    """Batched patch -> probability function for a network or a plain callable."""
    if isinstance(model, Network):
        return lambda patches: softmax(model.forward(prepare(model, patches), mode="eval"))
    if callable(model):
        return model
    raise ConfigError(f"cannot explain a {type(model).__name__}; pass a Network or a callable")


def _model_name(model) -> str:
    return model.name if isinstance(model, Network) else getattr(model, "__name__", "callable")


def _batched(predict: PredictFn, images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([predict(images[s:s + batch_size]) for s in range(0, len(images), batch_size)])


# ============================================================================
# OCCLUSION
# ============================================================================

def occlusion(model: Union[Network, PredictFn], patch: np.ndarray, target: int, patch_size: int = 6,
              stride: int = 1, sample_id: int = -1, batch_size: int = 256) -> ExplanationMap:
    """Mean drop of the target probability over all occluder windows covering a pixel.

    The occluder is filled with the patch mean.
    """
    img = np.asarray(patch, dtype=np.float64)
    h, w = img.shape
    if patch_size > min(h, w) or patch_size < 1 or stride < 1:
        raise ConfigError(f"occluder size {patch_size} / stride {stride} does not fit a {h}x{w} patch")
    predict = predictor(model)
    base = predict(img[None])[0, target]
    fill = img.mean()
    tops = list(range(0, h - patch_size + 1, stride))
    lefts = list(range(0, w - patch_size + 1, stride))
    windows = [(t, l) for t in tops for l in lefts]
    images = np.repeat(img[None], len(windows), axis=0)
    for i, (t, l) in enumerate(windows):
        images[i, t:t + patch_size, l:l + patch_size] = fill
    probs = _batched(predict, images, batch_size)[:, target]
    total = np.zeros_like(img)
    cover = np.zeros_like(img)
    for (t, l), p in zip(windows, probs):
        total[t:t + patch_size, l:l + patch_size] += base - p
        cover[t:t + patch_size, l:l + patch_size] += 1
    values = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    return ExplanationMap(values, "occlusion", _model_name(model), sample_id, target)


# ============================================================================
# GRADIENT METHODS
# ============================================================================

def _gradient(network: Network, patch: np.ndarray, target: int, guided: bool = False):
    img = np.asarray(patch, dtype=np.float64)
    x = prepare(network, img[None])
    logits, tape = network.trace(x, mode="eval")
    seed = np.zeros_like(logits)
    seed[0, target] = 1.0
    dx = tape.backward(seed, guided=guided, param_grads=False)
    return prepare_adjoint(network, dx, img.shape[-1])[0], tape


def _require_network(model, method: str) -> Network:
    if not isinstance(model, Network):
        raise CapabilityError(f"{method} needs a gradient-capable Network, got {type(model).__name__}")
    return model


def saliency(model: Network, patch: np.ndarray, target: int, sample_id: int = -1) -> ExplanationMap:
    """d(logit_target)/d(patch), channels summed."""
    network = _require_network(model, "saliency")
    grad, _ = _gradient(network, patch, target)
    return ExplanationMap(grad, "saliency", network.name, sample_id, target)


def cam_layer(network: Network) -> int:
    """Index of the last conv activation; CapabilityError if it has no spatial extent."""
    idx = network.last_conv_index()
    if idx is None:
        raise CapabilityError(f"{network.name} has no convolution layer; Grad-CAM needs one")
    shape = network.shapes[idx]
    if shape[1] <= 1 or shape[2] <= 1:
        raise CapabilityError(
            f"{network.name}: last conv activation is {shape[1]}x{shape[2]}; Grad-CAM needs a spatial map",
            hint="Use alexnet_mini, or occlusion/saliency/LIME for this model.",
        )
    return idx


def cam_from(activations: np.ndarray, grads: np.ndarray, extent: int) -> np.ndarray:
    """ReLU(sum_k alpha_k A_k), alpha_k = spatial mean of dA_k, upsampled to ``extent``."""
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)
    return np.maximum(resize_patch(cam, extent), 0.0)


def grad_cam(model: Network, patch: np.ndarray, target: int, sample_id: int = -1) -> ExplanationMap:
    network = _require_network(model, "grad_cam")
    layer = cam_layer(network)
    img = np.asarray(patch, dtype=np.float64)
    _, tape = _gradient(network, img, target)
    cam = cam_from(tape.activations[layer][0], tape.output_grads[layer][0], img.shape[-1])
    return ExplanationMap(cam, "grad_cam", network.name, sample_id, target)


def guided_backprop(model: Network, patch: np.ndarray, target: int, combine_with_cam: bool = True,
                    sample_id: int = -1) -> ExplanationMap:
    """Guided gradient w.r.t. the patch, optionally times the upsampled Grad-CAM."""
    network = _require_network(model, "guided_backprop")
    if combine_with_cam:
        cam_layer(network)
    guided, _ = _gradient(network, patch, target, guided=True)
    if not combine_with_cam:
        return ExplanationMap(guided, "guided_backprop", network.name, sample_id, target)
    cam = grad_cam(network, patch, target).values
    return ExplanationMap(guided * cam, "guided_grad_cam", network.name, sample_id, target)


# ============================================================================
# LIME
# ============================================================================

def slic(patch: np.ndarray, n_segments: int, compactness: float, sigma: float, segmenter: int = 0) -> SegmentationMask:
    """SLIC superpixels (10 k-means iterations, connectivity enforced), labels 0..S-1."""
    img = np.asarray(patch, dtype=np.float64)
    if n_segments < 1 or n_segments > img.size:
        raise ConfigError(f"n_segments must be in [1, {img.size}], got {n_segments}")
    labels = _skimage_slic(img, n_segments=n_segments, compactness=compactness, sigma=sigma, max_num_iter=10,
                           enforce_connectivity=True, channel_axis=None, start_label=0)
    labels, _, _ = relabel_sequential(labels + 1)
    return SegmentationMask(labels.astype(np.int64) - 1, segmenter)


def lime_surrogates(model: Union[Network, PredictFn], patch: np.ndarray, target: int,
                    config: Optional[LimeConfig] = None, seed: int = 0, sample_id: int = 0) -> List[LimeSurrogate]:
    """One weighted ridge surrogate per configured segmentation.

    Off segments take the patch mean. Samples are weighted by
    exp(-D^2 / width^2), D the cosine distance of z' to the all-on vector.
    """
    config = config or LimeConfig()
    img = np.asarray(patch, dtype=np.float64)
    predict = predictor(model)
    fill = img.mean()
    out = []
    for s, (n_segments, compactness, sigma) in enumerate(config.segmentations):
        seg = slic(img, n_segments, compactness, sigma, segmenter=s)
        n_feat = seg.n_segments
        rng = np.random.default_rng([seed, sample_id, s])
        z = rng.integers(0, 2, size=(config.n_samples, n_feat))
        z[0] = 1
        images = np.where(z[:, seg.labels].astype(bool), img[None], fill)
        y = _batched(predict, images, config.batch_size)[:, target]
        d = pairwise_distances(z, np.ones((1, n_feat)), metric="cosine").ravel()
        weights = np.exp(-(d ** 2) / config.kernel_width ** 2)
        ridge = Ridge(alpha=config.ridge_alpha, fit_intercept=True)
        ridge.fit(z, y, sample_weight=weights)
        score = float(ridge.score(z, y, sample_weight=weights)) if np.ptp(y) > 0 else 0.0
        out.append(LimeSurrogate(seg, ridge.coef_.astype(np.float64), float(ridge.intercept_), score))
    return out


def lime_explain(model: Union[Network, PredictFn], patch: np.ndarray, target: int,
                 config: Optional[LimeConfig] = None, seed: int = 0, sample_id: int = 0) -> ExplanationMap:
    """Mean over segmentations of the surrogate weights painted onto their segments."""
    surrogates = lime_surrogates(model, patch, target, config, seed, sample_id)
    painted = [s.weights[s.segmentation.labels] for s in surrogates]
    return ExplanationMap(np.mean(painted, axis=0), "lime", _model_name(model), sample_id, target)


# ============================================================================
# BATCH + EXPORT
# ============================================================================

def explain_one(model, patch: np.ndarray, target: int, method: str, sample_id: int = -1, seed: int = 0,
                lime: Optional[LimeConfig] = None, explain: Optional[ExplainConfig] = None) -> ExplanationMap:
    explain = explain or ExplainConfig()
    if method == "lime":
        return lime_explain(model, patch, target, lime, seed, sample_id)
    if method == "occlusion":
        return occlusion(model, patch, target, explain.occlusion_size, explain.occlusion_stride, sample_id)
    if method == "saliency":
        return saliency(model, patch, target, sample_id)
    if method == "grad_cam":
        return grad_cam(model, patch, target, sample_id)
    if method == "guided_backprop":
        return guided_backprop(model, patch, target, combine_with_cam=False, sample_id=sample_id)
    if method == "guided_grad_cam":
        return guided_backprop(model, patch, target, combine_with_cam=True, sample_id=sample_id)
    raise ConfigError(f"unknown explanation method '{method}'", hint=f"Use one of {', '.join(METHODS)}.")


def explain_batch(model, patches: np.ndarray, targets: Sequence[int], method: str, ids: Optional[Sequence[int]] = None,
                  seed: int = 0, lime: Optional[LimeConfig] = None,
                  explain: Optional[ExplainConfig] = None) -> List[ExplanationMap]:
    """Explain many patches in parallel; output order follows input order."""
    ids = list(range(len(patches))) if ids is None else [int(i) for i in ids]
    jobs = list(zip(range(len(patches)), ids, [int(t) for t in targets]))
    maps = parallel_map(
        lambda job: explain_one(model, patches[job[0]], job[2], method, job[1], seed, lime, explain), jobs
    )
    logger.info(f"explained {len(maps)} patches with {method}")
    return maps


def write_map_csv(path: Union[str, Path], emap: ExplanationMap) -> None:
    """Per-pixel table (row, col, value) for plotting."""
    h, w = emap.values.shape
    rows = ([r, c, emap.values[r, c]] for r in range(h) for c in range(w))
    write_csv(path, ["row", "col", "value"], rows)
