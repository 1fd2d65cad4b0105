"""Network builders and the patch -> network-input adapter.

lenet5 (1 x 32 x 32)::

    conv5(6) relu pool2 | conv5(16) relu pool2 | conv5(120) relu  (1 x 1 map)
    fc(84) relu dropout | fc(K)

alexnet_mini (3 x 57 x 57), AlexNet's layer sequence at reduced width with
the last conv block kept at 13 x 13::

    conv5/2(w1) relu pool3/2 | conv5 pad2(w2) relu | conv3 pad1(w3) relu
    conv3 pad1(w4) relu | conv3 pad1(w5) relu pool3/2
    fc(f) relu dropout | fc(f) relu dropout | fc(K)

Patches are 50 x 50; ``prepare`` resizes them bilinearly to the network's
extent and replicates the gray channel, ``prepare_adjoint`` maps gradients
w.r.t. the network input back onto the patch grid.
"""

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .config import ArchitectureConfig
from .errors import ConfigError, MissingArtifactError
from .nn import LayerSpec, Network
from .tensor_io import load_checkpoint, save_checkpoint, write_json

logger = logging.getLogger("qpi-explain")

ARCHITECTURES = ("lenet5", "alexnet_mini")


def _lenet5(cfg: ArchitectureConfig) -> List[LayerSpec]:
    c1, c2, c5, f6 = cfg.widths
    e = cfg.input_extent
    s = ((e - 4) // 2 - 4) // 2
    if s < 1:
        raise ConfigError(f"lenet5 needs an input extent of at least 14, got {e}")
    return [
        LayerSpec("conv2d", kernel=5, in_channels=cfg.channels, out_channels=c1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=2, stride=2),
        LayerSpec("conv2d", kernel=5, in_channels=c1, out_channels=c2),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=2, stride=2),
        LayerSpec("conv2d", kernel=s, in_channels=c2, out_channels=c5),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("fullyconnected", in_features=c5, out_features=f6),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=cfg.dropout),
        LayerSpec("fullyconnected", in_features=f6, out_features=cfg.n_classes),
    ]


def _alexnet_mini(cfg: ArchitectureConfig) -> List[LayerSpec]:
    w1, w2, w3, w4, w5, f = cfg.widths
    e = cfg.input_extent
    grid = ((e - 5) // 2 + 1 - 3) // 2 + 1
    if grid < 3:
        raise ConfigError(f"alexnet_mini needs an input extent of at least 17, got {e}")
    pooled = (grid - 3) // 2 + 1
    return [
        LayerSpec("conv2d", kernel=5, stride=2, in_channels=cfg.channels, out_channels=w1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=3, stride=2),
        LayerSpec("conv2d", kernel=5, padding=2, in_channels=w1, out_channels=w2),
        LayerSpec("relu"),
        LayerSpec("conv2d", kernel=3, padding=1, in_channels=w2, out_channels=w3),
        LayerSpec("relu"),
        LayerSpec("conv2d", kernel=3, padding=1, in_channels=w3, out_channels=w4),
        LayerSpec("relu"),
        LayerSpec("conv2d", kernel=3, padding=1, in_channels=w4, out_channels=w5),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=3, stride=2),
        LayerSpec("flatten"),
        LayerSpec("fullyconnected", in_features=w5 * pooled * pooled, out_features=f),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=cfg.dropout),
        LayerSpec("fullyconnected", in_features=f, out_features=f),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=cfg.dropout),
        LayerSpec("fullyconnected", in_features=f, out_features=cfg.n_classes),
    ]


_BUILDERS = {"lenet5": (_lenet5, 4), "alexnet_mini": (_alexnet_mini, 6)}


def build(config: ArchitectureConfig, seed: int = 0) -> Network:
    """Build an initialised network for ``config`` (He-normal weights from ``seed``)."""
    if config.name not in _BUILDERS:
        raise ConfigError(
            f"unknown architecture '{config.name}'",
            hint=f"Use one of {', '.join(ARCHITECTURES)}.",
        )
    builder, n_widths = _BUILDERS[config.name]
    if len(config.widths) != n_widths:
        raise ConfigError(f"{config.name} takes {n_widths} widths, got {len(config.widths)}")
    specs = builder(config)
    shape = (config.channels, config.input_extent, config.input_extent)
    net = Network.from_specs(specs, shape, seed=seed, name=config.name)
    net.architecture = config
    logger.debug(f"built {config.name}: {net.parameter_count()} parameters, output {net.output_shape}")
    return net


# ============================================================================
# RESIZING
# ============================================================================

@lru_cache(maxsize=32)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] linear-interpolation matrix (half-pixel centres, edge clamp)."""
    if n_out < 1 or n_in < 1:
        raise ConfigError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        m.setflags(write=False)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def resize_patch(patch: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of the last two axes to ``target`` x ``target``."""
    img = np.asarray(patch, dtype=np.float64)
    rh = interp_matrix(img.shape[-2], target)
    rw = interp_matrix(img.shape[-1], target)
    return np.einsum("ij,...jk,lk->...il", rh, img, rw, optimize=True)


def resize_adjoint(grad: np.ndarray, source_extent: int) -> np.ndarray:
    """Transpose of ``resize_patch``: pulls gradients back onto the source grid."""
    g = np.asarray(grad, dtype=np.float64)
    rh = interp_matrix(source_extent, g.shape[-2])
    rw = interp_matrix(source_extent, g.shape[-1])
    return np.einsum("ij,...ik,kl->...jl", rh, g, rw, optimize=True)


def prepare(network: Network, patches: np.ndarray) -> np.ndarray:
    """[N, H, W] patches -> [N, C, E, E] network input."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    channels, extent, _ = network.input_shape
    if x.shape[-1] != extent or x.shape[-2] != extent:
        x = resize_patch(x, extent)
    return np.repeat(x[:, None], channels, axis=1)


def prepare_adjoint(network: Network, grad_input: np.ndarray, source_extent: int) -> np.ndarray:
    """[N, C, E, E] input gradients -> [N, H, W] patch gradients (channels summed)."""
    g = np.asarray(grad_input, dtype=np.float64).sum(axis=1)
    if g.shape[-1] != source_extent:
        g = resize_adjoint(g, source_extent)
    return g


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_model(path: Union[str, Path], network: Network) -> None:
    """Write ``<path>`` (QPIC checkpoint) and ``<path>.json`` (architecture)."""
    path = Path(path)
    save_checkpoint(path, network.state_dict())
    arch = network.architecture.model_dump() if network.architecture is not None else {"name": network.name}
    write_json(path.with_suffix(path.suffix + ".json"), arch)


def load_model(path: Union[str, Path], producer: str = "train") -> Network:
    path = Path(path)
    meta = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not meta.exists():
        raise MissingArtifactError(str(path), producer)
    with open(meta, encoding="utf-8") as f:
        arch = ArchitectureConfig.model_validate(json.load(f))
    net = build(arch)
    net.load_state_dict(load_checkpoint(path))
    return net


def parameter_counts(configs: Optional[List[ArchitectureConfig]] = None) -> Dict[str, int]:
    configs = configs or [ArchitectureConfig(name=n) for n in ARCHITECTURES]
    return {c.name: build(c).parameter_count() for c in configs}
