"""Minibatch ADAM training loop."""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .errors import DataError
from .nn import AdamState, Network, adam_step, backward, cross_entropy, softmax

logger = logging.getLogger("qpi-explain")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    steps: int
    clamped: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def fit(network: Network, inputs: np.ndarray, labels: Sequence[int],
        config: Optional[TrainConfig] = None, seed: int = 0,
        max_steps: Optional[int] = None) -> List[EpochStats]:
    """Train ``network`` in place on model-shaped ``inputs``; returns per-epoch stats.

    Batches are drawn from a per-epoch permutation seeded by (seed, epoch);
    dropout masks use (seed, global step).
    """
    config = config or TrainConfig()
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise DataError(f"{len(x)} inputs but {len(y)} labels")
    if len(x) == 0:
        raise DataError("cannot train on an empty set")

    params = dict(network.parameters())
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    history: List[EpochStats] = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(x))
        total_loss, correct, seen, clamped = 0.0, 0, 0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            network.zero_grad()
            logits = network.forward(x[idx], mode="train", rng_seed=seed, pass_index=step, record=True)
            probs = softmax(logits)
            loss = cross_entropy(probs, y[idx])
            grads = backward(network, loss)
            adam_step(state, params, grads)
            step += 1
            total_loss += loss.value * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
            clamped += loss.clamp_count
            if max_steps is not None and step >= max_steps:
                break
        stats = EpochStats(epoch=epoch, loss=total_loss / seen, accuracy=correct / seen, steps=step, clamped=clamped)
        history.append(stats)
        logger.info(f"{network.name} epoch {epoch + 1}/{config.epochs}: loss={stats.loss:.4f} acc={stats.accuracy:.3f}")
        if max_steps is not None and step >= max_steps:
            break
    return history

