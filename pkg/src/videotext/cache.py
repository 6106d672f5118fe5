"""Frozen-encoder embedding cache.

Frame token embeddings are computed once and stored in a single binary file;
training with a frozen encoder then reads tokens from the cache instead of
re-running the encoder. A fingerprint over the encoder-relevant part of the
model config guards against feeding a model embeddings produced by a
different encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, sample_video_frames
from .model import ModelConfig, VideoTextModel

CACHE_MAGIC = b"VCCA"
CACHE_VERSION = 1

# patch order is part of the contract: changing it must invalidate caches
ENCODER_FINGERPRINT_KEYS = (
    "height",
    "width",
    "channels",
    "patch_h",
    "patch_w",
    "d_model",
    "encoder_layers",
    "n_heads",
)
PATCH_ORDER = "row_major"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def encoder_fingerprint(config: ModelConfig) -> int:
    """64-bit FNV-1a over the canonical 'key=value;' encoder config string."""
    values = config.to_dict()
    canonical = "".join(f"{key}={values[key]};" for key in ENCODER_FINGERPRINT_KEYS)
    canonical += f"patch_order={PATCH_ORDER};"
    return fnv1a64(canonical.encode("utf-8"))


@dataclass
class EmbeddingCache:
    n_tokens: int  # tokens per frame
    width: int
    frames_per_clip: int
    fingerprint: int
    embeddings: Dict[int, np.ndarray]  # video id -> (T, N, d) float32

    def get(self, video_id: int) -> np.ndarray:
        return self.embeddings[video_id]

    def batch(self, video_ids: Sequence[int]) -> np.ndarray:
        """Stack per-video tokens into ((B*T), N, d) in manifest frame order."""
        return np.concatenate([self.embeddings[int(i)] for i in video_ids])


def precompute_cache(
    dataset: Dataset,
    model: VideoTextModel,
    t: int,
    indices: Optional[Sequence[int]] = None,
) -> EmbeddingCache:
    """Encode every video once with the current (frozen) encoder."""
    cfg = model.config
    if indices is None:
        indices = range(len(dataset))
    embeddings: Dict[int, np.ndarray] = {}
    for i in indices:
        frames = sample_video_frames(dataset.videos[i], t, cfg.height, cfg.width)
        tokens = model.patchify(frames[None])
        encoded = model.encode_frames(model.add_spatial_positions(tokens))
        embeddings[int(i)] = encoded.data.astype(np.float32)
    return EmbeddingCache(
        n_tokens=cfg.n_patches,
        width=cfg.d_model,
        frames_per_clip=t,
        fingerprint=encoder_fingerprint(cfg),
        embeddings=embeddings,
    )


def write_cache(path, cache: EmbeddingCache) -> None:
    ids = sorted(cache.embeddings)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIQ",
                CACHE_VERSION,
                cache.n_tokens,
                cache.width,
                cache.frames_per_clip,
                cache.fingerprint,
            )
        )
        fh.write(struct.pack("<I", len(ids)))
        offset = 0
        for video_id in ids:
            arr = cache.embeddings[video_id]
            fh.write(struct.pack("<IQI", video_id, offset, arr.shape[0]))
            offset += arr.size * 4
        for video_id in ids:
            fh.write(np.ascontiguousarray(cache.embeddings[video_id], "<f4").tobytes())


def read_cache(path, expected_config: Optional[ModelConfig] = None) -> EmbeddingCache:
    """Load a cache file; refuses files whose fingerprint does not match
    ``expected_config``'s encoder."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"not an embedding cache file (magic {magic!r})")
        version, n_tokens, width, frames_per_clip, fingerprint = struct.unpack(
            "<IIIIQ", fh.read(24)
        )
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        if expected_config is not None:
            expected = encoder_fingerprint(expected_config)
            if expected != fingerprint:
                raise ValueError(
                    "embedding cache fingerprint mismatch: cache "
                    f"{fingerprint:#018x} vs model {expected:#018x}; "
                    "the cache was produced by a different encoder configuration"
                )
        (n_videos,) = struct.unpack("<I", fh.read(4))
        index: List = []
        last_offset = -1
        for _ in range(n_videos):
            video_id, offset, n_frames = struct.unpack("<IQI", fh.read(16))
            if offset <= last_offset:
                raise ValueError("cache index offsets must be strictly increasing")
            last_offset = offset
            index.append((video_id, offset, n_frames))
        payload = fh.read()
    embeddings = {}
    for video_id, offset, n_frames in index:
        count = n_frames * n_tokens * width
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        embeddings[video_id] = data.reshape(n_frames, n_tokens, width).copy()
    expected_len = sum(arr.size * 4 for arr in embeddings.values())
    if len(payload) != expected_len:
        raise ValueError("cache payload length inconsistent with index")
    return EmbeddingCache(n_tokens, width, frames_per_clip, fingerprint, embeddings)


def to_cached_batch(batch: Dict, cache: EmbeddingCache) -> Dict:
    """Replace a batch's raw frames with cached frame token embeddings."""
    if cache.frames_per_clip != batch["frames_per_clip"]:
        raise ValueError(
            f"cache holds {cache.frames_per_clip} frames per clip, "
            f"batch expects {batch['frames_per_clip']}"
        )
    cached = dict(batch)
    cached.pop("frames", None)
    cached["frame_embeddings"] = cache.batch(batch["indices"])
    return cached


def require_cache_mode(tuning_mode: str) -> None:
    """Cache-fed training is defined only when the encoder never updates."""
    if tuning_mode != "LiT":
        raise ValueError(
            f"cache-fed training requires the LiT tuning mode, got {tuning_mode}: "
            "any mode that updates the encoder would invalidate the cache"
        )
