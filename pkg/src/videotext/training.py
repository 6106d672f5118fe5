"""Joint contrastive + captioning objective, optimizer, tuning regimes,
minibatch dataset mixing and the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .model import PAD_ID, VideoTextModel
from .params import COMPONENT_TAGS, ParameterStore
from .tensor import Tensor

TEMPERATURE_RANGE = (0.01, 100.0)

TUNING_MODES = ("FT", "Frozen", "FrozenThenFT", "LiT")


# ------------------------------------------------------------------- objectives


def contrastive_loss(video_emb: Tensor, text_emb: Tensor, temperature: Tensor) -> Tensor:
    """Symmetric InfoNCE over a batch of aligned (video, text) pairs.

    Both embedding matrices must be row-wise unit-norm; ``temperature``
    divides the cosine similarities before the softmax.
    """
    b = video_emb.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 (no negatives)")
    if video_emb.shape != text_emb.shape:
        raise T.ShapeError(
            f"embedding shapes differ: {video_emb.shape} vs {text_emb.shape}"
        )
    sims = T.matmul(video_emb, T.transpose(text_emb)) / temperature
    targets = np.arange(b)
    v2t = T.cross_entropy_logits(sims, targets)
    t2v = T.cross_entropy_logits(T.transpose(sims), targets)
    return (v2t + t2v) * 0.5


def captioning_loss(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Mean cross-entropy over non-pad target positions.

    ``targets`` are the input ids shifted left by one.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise T.ShapeError(
            f"target shape {targets.shape} does not match logits {logits.shape}"
        )
    keep = targets != pad_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("captioning loss: every target position is padding")
    nll = -T.take_along_last(T.log_softmax(logits, axis=-1), np.where(keep, targets, 0))
    return T.sum_(nll * keep.astype(nll.data.dtype)) * (1.0 / n_kept)


def total_loss(con: Tensor, cap: Tensor, weight_con: float, weight_cap: float) -> Tensor:
    if weight_con < 0 or weight_cap < 0:
        raise ValueError("loss weights must be non-negative")
    return con * weight_con + cap * weight_cap


def shift_targets(ids: np.ndarray, pad_id: int = PAD_ID) -> np.ndarray:
    """Next-token targets: inputs shifted left by one, final position padded."""
    targets = np.full_like(ids, pad_id)
    targets[:, :-1] = ids[:, 1:]
    return targets


# -------------------------------------------------------------------- optimizer


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    warmup_steps: int = 1000
    total_steps: int = 5000
    clip_norm: float = 1.0
    ema_decay: float = 0.99

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup from 0 to base, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: Dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most clip_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if math.isfinite(clip_norm) and total > clip_norm > 0:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


class Optimizer:
    """Adam-style moments with decoupled weight decay.

    The second moment is kept in full rather than factored; frozen parameters
    receive neither updates nor weight decay.
    """

    def __init__(self, store: ParameterStore, cfg: OptimizerConfig):
        self.store = store
        self.cfg = cfg
        self.steps_taken = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        for name in self.store.trainable_names():
            g = grads.get(name)
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
        self.steps_taken += 1
        t = self.steps_taken
        for name in self.store.trainable_names():
            g = grads.get(name)
            if g is None:
                continue
            param = self.store[name]
            data = param.data
            if cfg.weight_decay > 0:
                data -= lr * cfg.weight_decay * data
            m = self._m.setdefault(name, np.zeros_like(data))
            v = self._v.setdefault(name, np.zeros_like(data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        self._clamp_temperature()

    def _clamp_temperature(self) -> None:
        if "log_temperature" in self.store:
            log_t = self.store["log_temperature"].data
            np.clip(
                log_t,
                math.log(TEMPERATURE_RANGE[0]),
                math.log(TEMPERATURE_RANGE[1]),
                out=log_t,
            )


# ---------------------------------------------------------------- tuning modes


def freeze_mask(mode: str, step: int = 0, switch_step: int = 0) -> frozenset:
    """Trainable component tags for a tuning regime at a given step.

    The task head, when present, is always trainable.
    """
    if mode not in TUNING_MODES:
        raise ValueError(f"unknown tuning mode: {mode}")
    every = frozenset(COMPONENT_TAGS)
    frozen_set = frozenset({"gen_pooler", "con_pooler", "loss", "task_head"})
    if mode == "FT":
        return every
    if mode == "Frozen":
        return frozen_set
    if mode == "FrozenThenFT":
        return frozen_set if step < switch_step else every
    return every - {"encoder"}  # LiT


# --------------------------------------------------------------- batch mixing


def mix_batches(
    source_a: Sequence,
    source_b: Sequence,
    ratio: float,
    batch_size: int,
    seed: int,
) -> Iterator[List]:
    """Endless stream of minibatches drawing round(ratio*batch_size) items
    from ``source_a`` and the remainder from ``source_b``; deterministic
    given seed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {ratio}")
    n_a = round(ratio * batch_size)
    n_b = batch_size - n_a
    if n_a > 0 and len(source_a) == 0:
        raise ValueError("source_a is empty but has a nonzero share")
    if n_b > 0 and len(source_b) == 0:
        raise ValueError("source_b is empty but has a nonzero share")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        if n_a:
            batch.extend(source_a[i] for i in rng.integers(0, len(source_a), n_a))
        if n_b:
            batch.extend(source_b[i] for i in rng.integers(0, len(source_b), n_b))
        yield batch


# ------------------------------------------------------------------- train loop


@dataclass
class TrainConfig:
    tuning_mode: str = "FT"
    switch_step: int = 0
    weight_con: float = 1.0
    weight_cap: float = 2.0
    batch_size: int = 16
    frames_per_clip: int = 8
    seed: int = 0
    eval_with_ema: bool = False

    def __post_init__(self):
        if self.tuning_mode not in TUNING_MODES:
            raise ValueError(f"unknown tuning mode: {self.tuning_mode}")


STEP_LOG_FIELDS = ("step", "total", "con", "cap", "lr", "grad_norm", "tau")


def format_step_record(record: Dict[str, float]) -> str:
    """One tab-separated log line per training step."""
    return "\t".join(
        f"{record[key]:d}" if key == "step" else f"{record[key]:.8g}"
        for key in STEP_LOG_FIELDS
    )


def joint_forward(model: VideoTextModel, batch: Dict) -> Dict[str, Tensor]:
    """Forward pass from either raw frames or precomputed frame embeddings."""
    if "frame_embeddings" in batch:
        pooled = model.adapt_cached(
            batch["frame_embeddings"], batch["batch_size"], batch["frames_per_clip"]
        )
    else:
        pooled = model.encode_video(batch["frames"])
    states, cls_emb = model.decode_unimodal(batch["ids"])
    logits = model.decode_multimodal(states, pooled.generative)
    return {
        "video_embedding": pooled.contrastive,
        "text_embedding": cls_emb,
        "logits": logits,
    }


def train_step(
    model: VideoTextModel,
    optimizer: Optimizer,
    batch: Dict,
    train_cfg: TrainConfig,
    step: int,
) -> Dict[str, float]:
    """One optimization step: forward, backward, clip, update, EMA."""
    store = model.store
    store.set_frozen(
        freeze_mask(train_cfg.tuning_mode, step, train_cfg.switch_step)
    )
    store.zero_grads()

    out = joint_forward(model, batch)
    temperature = T.exp(store["log_temperature"])
    con = contrastive_loss(out["video_embedding"], out["text_embedding"], temperature)
    cap = captioning_loss(out["logits"], shift_targets(batch["ids"]))
    loss = total_loss(con, cap, train_cfg.weight_con, train_cfg.weight_cap)
    loss.backward()

    grads = {name: g for name, g in store.gradient_map().items()}
    grad_norm = clip_gradients(
        {name: grads[name] for name in store.trainable_names()},
        optimizer.cfg.clip_norm,
    )
    lr = lr_schedule(min(step, optimizer.cfg.total_steps), optimizer.cfg)
    optimizer.step(grads, lr)
    store.ema_update(optimizer.cfg.ema_decay)

    return {
        "step": step,
        "total": loss.item(),
        "con": con.item(),
        "cap": cap.item(),
        "lr": lr,
        "grad_norm": grad_norm,
        "tau": float(np.exp(store["log_temperature"].item())),
    }


def train(
    model: VideoTextModel,
    batches: Iterable[Dict],
    opt_cfg: OptimizerConfig,
    train_cfg: TrainConfig,
    n_steps: int,
    log_fh=None,
) -> List[Dict[str, float]]:
    """Run ``n_steps`` of training, optionally appending TSV step records."""
    optimizer = Optimizer(model.store, opt_cfg)
    records = []
    iterator = iter(batches)
    for step in range(n_steps):
        batch = next(iterator)
        record = train_step(model, optimizer, batch, train_cfg, step)
        records.append(record)
        if log_fh is not None:
            log_fh.write(format_step_record(record) + "\n")
    return records
