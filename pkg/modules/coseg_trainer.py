"""
Coseg Trainer Module

This module provides functionality to train the co-segmentation network on lesion pairs with
pixel-wise cross-entropy and Adam, select the checkpoint with the best validation Dice, and
persist checkpoints and loss curves.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from tqdm import tqdm

from modules.autograd_ops import add, mul, pixel_cross_entropy
from modules.coseg_network import CosegNetwork, ParamStore, infer, stack_images
from modules.image_grid import SeededRng
from modules.lesion_clusterer import PairSet
from modules.segmentation_metrics import confusion, dice

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CSEG'
CHECKPOINT_VERSION = 1


class TrainingError(ValueError):
    """Raised for unusable training inputs or corrupt checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization recipe. Defaults are the full-scale values; pipeline configs override them
    for CPU-sized runs.
    """

    batch_size: int = 20
    epochs: int = 2
    iterations_per_epoch: int = 12000
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    val_interval: int = 100
    val_pair_limit: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.iterations_per_epoch < 0 or self.val_interval < 1:
            raise ValueError("batch_size and val_interval must be positive, epochs and iterations non-negative")
        if self.learning_rate <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and eps must be positive, weight_decay non-negative")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> 'AdamState':
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update in place; L2 regularization enters as weight_decay·θ added
    to the gradient.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name in params:
        theta = params[name].data
        g = grads[name] + state.weight_decay * theta
        m = state.first_moment.get(name, np.zeros_like(theta))
        v = state.second_moment.get(name, np.zeros_like(theta))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name], state.second_moment[name] = m, v
        params[name].data = theta - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


@dataclass
class LossRecord:
    iteration: int
    train_loss: float
    val_dice: Optional[float] = None


@dataclass
class TrainResult:
    params: ParamStore
    curve: List[LossRecord]
    best_iteration: int
    best_val_dice: Optional[float]


class PairBatcher:
    """Seeded, epoch-wise reshuffled batches of pair indices."""

    def __init__(self, count: int, batch_size: int, rng: SeededRng):
        self.count = count
        self.batch_size = batch_size
        self.gen = rng.generator
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        picked = []
        while len(picked) < self.batch_size:
            if self._cursor >= self._order.size:
                self._order = self.gen.permutation(self.count)
                self._cursor = 0
            take = min(self.batch_size - len(picked), self._order.size - self._cursor)
            picked.extend(self._order[self._cursor:self._cursor + take].tolist())
            self._cursor += take
        return np.array(picked, dtype=np.int64)


def _check_members(pairs: Sequence[Tuple[str, str, int]], images: Dict[str, np.ndarray],
                   masks: Dict[str, np.ndarray]) -> None:
    missing = sorted({lid for a, b, _ in pairs for lid in (a, b) if lid not in images or lid not in masks})
    if missing:
        raise TrainingError(f"pair members without image or mask: {missing[:10]}")


def pair_loss(network: CosegNetwork, params: ParamStore, images: Dict[str, np.ndarray],
              masks: Dict[str, np.ndarray], batch: Sequence[Tuple[str, str, int]]):
    """Mean of the two branches' pixel cross-entropies over one batch of pairs."""
    ids_a = [a for a, _, _ in batch]
    ids_b = [b for _, b, _ in batch]
    x_a, x_b = stack_images([images[i] for i in ids_a]), stack_images([images[i] for i in ids_b])
    t_a = np.stack([masks[i] for i in ids_a]).astype(np.int64)
    t_b = np.stack([masks[i] for i in ids_b]).astype(np.int64)
    if network.config.single_branch:
        logits_a, logits_b = network.forward_single(x_a, params), network.forward_single(x_b, params)
    else:
        logits_a, logits_b = network.forward_siamese(x_a, x_b, params)
    return mul(add(pixel_cross_entropy(logits_a, t_a), pixel_cross_entropy(logits_b, t_b)), 0.5)


def validation_dice(network: CosegNetwork, params: ParamStore, images: Dict[str, np.ndarray],
                    masks: Dict[str, np.ndarray], pairs: Sequence[Tuple[str, str, int]],
                    batch_size: int = 8) -> float:
    """Mean Dice of thresholded predictions over both members of every validation pair."""
    scores = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        ids_a = [a for a, _, _ in chunk]
        ids_b = [b for _, b, _ in chunk]
        x_a, x_b = stack_images([images[i] for i in ids_a]), stack_images([images[i] for i in ids_b])
        prob_a, prob_b = infer(network, params, x_a, x_b)
        if prob_b is None:
            prob_b, _ = infer(network, params, x_b)
        for ids, probs in ((ids_a, prob_a), (ids_b, prob_b)):
            for lid, prob in zip(ids, probs):
                scores.append(dice(confusion(prob > 0.5, masks[lid])))
    return float(np.mean(scores))


def train(network: CosegNetwork, pairs: PairSet, images: Dict[str, np.ndarray], masks: Dict[str, np.ndarray],
          cfg: TrainConfig, rng: SeededRng, val_pairs: Optional[PairSet] = None,
          params: Optional[ParamStore] = None, progress: bool = True) -> TrainResult:
    """
    Train on within-cluster pairs and keep the snapshot with the best validation Dice.

    Args:
        network: Network topology
        pairs: Training pairs
        images: Lesion id → preprocessed (H, W) image
        masks: Lesion id → (H, W) training mask (initial GrabCut mask)
        cfg: Optimization recipe
        rng: Seed source for initialization and batch order
        val_pairs: Optional validation pairs for checkpoint selection
        params: Optional starting parameters; initialized from rng otherwise
        progress: Show a tqdm progress bar

    Returns:
        TrainResult with the selected parameters and the loss curve
    """
    if len(pairs) == 0:
        raise TrainingError("empty pair set: nothing to train on")
    train_pairs = list(pairs.pairs)
    _check_members(train_pairs, images, masks)
    checked_val = list(val_pairs.pairs) if val_pairs is not None else []
    if cfg.val_pair_limit is not None:
        checked_val = checked_val[:cfg.val_pair_limit]
    _check_members(checked_val, images, masks)

    params = params.copy() if params is not None else network.init_params(rng.spawn('init'))
    state = AdamState.from_config(cfg)
    batcher = PairBatcher(len(train_pairs), cfg.batch_size, rng.spawn('batches'))
    curve: List[LossRecord] = []
    best_params, best_dice, best_iteration = params.copy(), None, 0
    total = cfg.total_iterations

    for iteration in tqdm(range(1, total + 1), desc='train', disable=not progress or total == 0):
        batch = [train_pairs[i] for i in batcher.next_batch()]
        params.zero_grad()
        loss = pair_loss(network, params, images, masks, batch)
        loss.backward()
        adam_step(params, params.gradients(), state)
        record = LossRecord(iteration, float(loss.data))
        logger.debug("iteration %d: loss %.6f", iteration, record.train_loss)

        if checked_val and (iteration % cfg.val_interval == 0 or iteration == total):
            record.val_dice = validation_dice(network, params, images, masks, checked_val)
            logger.info("iteration %d: train loss %.4f, validation Dice %.4f",
                        iteration, record.train_loss, record.val_dice)
            if best_dice is None or record.val_dice > best_dice:
                best_params, best_dice, best_iteration = params.copy(), record.val_dice, iteration
        curve.append(record)

    if not checked_val and total > 0:
        best_params, best_iteration = params.copy(), total
    return TrainResult(best_params, curve, best_iteration, best_dice)


# Checkpoint and curve persistence

def save_checkpoint(params: ParamStore, path: Union[str, Path]) -> None:
    """
    Flat little-endian layout: magic, version, count, then per parameter the name length,
    UTF-8 name, rank, extents and float32 payload.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(params))]
    for name in params:
        data = params[name].data
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f'<I{data.ndim}I', data.ndim, *data.shape))
        chunks.append(data.astype('<f4').tobytes(order='C'))
    Path(path).write_bytes(b''.join(chunks))


def load_checkpoint(path: Union[str, Path]) -> ParamStore:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    if len(blob) < 12:
        raise TrainingError(f"{path}: truncated checkpoint")
    version, count = struct.unpack_from('<II', blob, 4)
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    try:
        offset = 12
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<I', blob, offset)
            shape = struct.unpack_from(f'<{rank}I', blob, offset + 4)
            offset += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(blob, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            entries.append((name, values.astype(np.float64).reshape(shape)))
    except (struct.error, ValueError) as e:
        raise TrainingError(f"{path}: truncated checkpoint") from e
    if offset != len(blob):
        raise TrainingError(f"{path}: {len(blob) - offset} trailing bytes after last parameter")
    tensors = {}
    for name, value in entries:
        if name in tensors:
            raise TrainingError(f"{path}: duplicate parameter {name!r}")
        tensors[name] = value
    return ParamStore(tensors)


def save_loss_curve(curve: List[LossRecord], csv_path: Union[str, Path], png_path: Union[str, Path]) -> None:
    frame = pd.DataFrame([(r.iteration, r.train_loss, r.val_dice) for r in curve],
                         columns=['iteration', 'train_loss', 'val_dice'])
    frame.to_csv(csv_path, index=False, float_format='%.8f')

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame['iteration'], frame['train_loss'], color='tab:blue', label='train loss')
    ax.set_xlabel('iteration')
    ax.set_ylabel('cross-entropy')
    val = frame.dropna(subset=['val_dice'])
    if not val.empty:
        twin = ax.twinx()
        twin.plot(val['iteration'], val['val_dice'], 'o-', color='tab:red', label='val Dice')
        twin.set_ylabel('validation Dice')
    ax.set_title('Training curve')
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={'Software': None})
    plt.close(fig)
