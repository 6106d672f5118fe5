"""Video-text contrastive captioner: frame encoder, video adaptors, cascaded
text decoder, answer-classification head, caption generation, FLOP accounting
and checkpoint serialization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .params import ParameterStore
from .tensor import ShapeError, Tensor

ADAPTOR_MODES = (
    "attentional_pooler",
    "mean_pooling",
    "factorized_encoder",
    "joint_space_time",
)

PAD_ID, BOS_ID, EOS_ID, CLS_ID = 0, 1, 2, 3

CHECKPOINT_MAGIC = b"VCCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    patch_h: int = 8
    patch_w: int = 8
    d_model: int = 64
    encoder_layers: int = 4
    temporal_layers: int = 4
    unimodal_layers: int = 2
    multimodal_layers: int = 2
    n_query_gen: int = 16
    n_query_con: int = 1
    vocab_size: int = 64
    max_text_len: int = 16
    max_frames: int = 16
    n_heads: int = 4
    adaptor: str = "attentional_pooler"

    def __post_init__(self):
        if self.adaptor not in ADAPTOR_MODES:
            raise ValueError(f"unknown adaptor mode: {self.adaptor}")
        if self.n_query_con != 1:
            raise ValueError("the contrastive pooler uses exactly one query")
        if self.n_query_gen < 1:
            raise ValueError("n_query_gen must be >= 1")
        if self.n_patches < 1:
            raise ValueError("frame geometry yields zero patches")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_h) * (self.width // self.patch_w)

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                raw = values[f.name]
                kwargs[f.name] = str(raw) if f.type == "str" else int(raw)
        return cls(**kwargs)


@dataclass
class PooledRepresentation:
    """Adaptor output: caption-side tokens plus a unit-norm retrieval vector."""

    generative: Tensor  # (B, n_gen_tokens, d)
    contrastive: Tensor  # (B, d), rows L2-normalized


def uniform_repeat_positions(spatial: Tensor, t: int) -> Tensor:
    """Tile an (N, d) position table t times along the token axis."""
    n, d = spatial.shape
    return T.reshape(T.broadcast_to(spatial, (t, n, d)), (t * n, d))


class VideoTextModel:
    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        store: Optional[ParameterStore] = None,
    ):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        if store is None:
            self._init_parameters(np.random.default_rng(seed))

    def _init_parameters(self, rng) -> None:
        cfg = self.config
        store = self.store
        d = cfg.d_model

        nn.init_linear(store, "patch_proj", cfg.patch_dim, d, "encoder", rng)
        store.add(
            "spatial_pos", rng.normal(0.0, nn.INIT_STD, (cfg.n_patches, d)), "encoder"
        )
        for i in range(cfg.encoder_layers):
            nn.init_transformer_block(store, f"enc.block{i}", d, cfg.n_heads, "encoder", rng)

        nn.init_pooler(store, "gen_pooler", cfg.n_query_gen, d, cfg.n_heads, "gen_pooler", rng)
        nn.init_pooler(store, "con_pooler", 1, d, cfg.n_heads, "con_pooler", rng)

        if cfg.adaptor == "factorized_encoder":
            store.add(
                "temporal_pos",
                rng.normal(0.0, nn.INIT_STD, (cfg.max_frames, d)),
                "adaptor_extra",
            )
            for i in range(cfg.temporal_layers):
                nn.init_transformer_block(
                    store, f"temporal.block{i}", d, cfg.n_heads, "adaptor_extra", rng
                )

        store.add(
            "token_embedding", rng.normal(0.0, nn.INIT_STD, (cfg.vocab_size, d)), "decoder"
        )
        store.add("text_pos", rng.normal(0.0, nn.INIT_STD, (cfg.max_text_len, d)), "decoder")
        for i in range(cfg.unimodal_layers):
            nn.init_transformer_block(store, f"uni.block{i}", d, cfg.n_heads, "decoder", rng)
        for i in range(cfg.multimodal_layers):
            nn.init_cross_block(store, f"multi.block{i}", d, cfg.n_heads, "decoder", rng)
        nn.init_layer_norm(store, "decoder_norm", d, "decoder")
        nn.init_linear(store, "vocab_proj", d, cfg.vocab_size, "decoder", rng)

        store.add("log_temperature", np.log(0.07), "loss")

    # ------------------------------------------------------------------ vision

    def patchify(self, frames: np.ndarray) -> Tensor:
        """Cut frames into a floor grid of non-overlapping patches and project.

        frames: (B, T, H, W, C) -> tokens ((B*T), N, d), patches in row-major
        order; residual pixels beyond the grid are dropped.
        """
        cfg = self.config
        frames = np.asarray(frames)
        if frames.ndim != 5:
            raise ShapeError(f"expected (B, T, H, W, C) frames, got {frames.shape}")
        b, t, h, w, c = frames.shape
        if h < cfg.patch_h or w < cfg.patch_w:
            raise ShapeError(
                f"frame {h}x{w} smaller than patch {cfg.patch_h}x{cfg.patch_w}"
            )
        gh, gw = h // cfg.patch_h, w // cfg.patch_w
        cropped = frames[:, :, : gh * cfg.patch_h, : gw * cfg.patch_w]
        patches = cropped.reshape(b * t, gh, cfg.patch_h, gw, cfg.patch_w, c)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(
            b * t, gh * gw, cfg.patch_h * cfg.patch_w * c
        )
        return nn.linear(self.store, "patch_proj", Tensor(patches))

    def add_spatial_positions(self, tokens: Tensor) -> Tensor:
        pos = self.store["spatial_pos"]
        if tokens.shape[1] != pos.shape[0]:
            raise ShapeError(
                f"token count {tokens.shape[1]} != position table {pos.shape[0]}"
            )
        return tokens + pos

    def encode_frames(self, tokens: Tensor) -> Tensor:
        """Per-frame encoder: blocks applied independently to each frame's tokens."""
        h = tokens
        for i in range(self.config.encoder_layers):
            h = nn.transformer_block(self.store, f"enc.block{i}", h, self.config.n_heads)
        return h

    def flatten_temporal(self, frame_tokens: Tensor, batch: int, t: int) -> Tensor:
        """((B*T), N, d) -> (B, T*N, d); token (t, n) lands at index t*N + n."""
        bt, n, d = frame_tokens.shape
        if bt != batch * t:
            raise ShapeError(f"leading extent {bt} != batch {batch} * frames {t}")
        return T.reshape(frame_tokens, (batch, t * n, d))

    def _pool_pair(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        gen = nn.attentional_pool(self.store, "gen_pooler", tokens, self.config.n_heads)
        con = nn.attentional_pool(self.store, "con_pooler", tokens, self.config.n_heads)
        return gen, T.reshape(con, (con.shape[0], con.shape[2]))

    def adapt(self, frame_tokens: Tensor, batch: int, t: int) -> PooledRepresentation:
        """Turn per-frame encoder tokens into a video-level representation.

        Dispatches on the configured adaptor mode; joint_space_time is handled
        upstream in encode_video because it changes the encoder input itself.
        """
        if t < 1:
            raise ValueError("adapt needs at least one frame")
        cfg = self.config
        mode = cfg.adaptor

        if mode in ("attentional_pooler", "joint_space_time"):
            flat = self.flatten_temporal(frame_tokens, batch, t)
            gen, con = self._pool_pair(flat)
        elif mode == "mean_pooling":
            gen_f, con_f = self._pool_pair(frame_tokens)
            gen = T.mean(
                T.reshape(gen_f, (batch, t, cfg.n_query_gen, cfg.d_model)), axis=1
            )
            con = T.mean(T.reshape(con_f, (batch, t, cfg.d_model)), axis=1)
        elif mode == "factorized_encoder":
            if t > cfg.max_frames:
                raise ShapeError(
                    f"{t} frames exceed the temporal position table ({cfg.max_frames})"
                )
            _, con_f = self._pool_pair(frame_tokens)
            per_frame = T.reshape(con_f, (batch, t, cfg.d_model))
            h = per_frame + T.embedding(self.store["temporal_pos"], np.arange(t))
            for i in range(cfg.temporal_layers):
                h = nn.transformer_block(self.store, f"temporal.block{i}", h, cfg.n_heads)
            gen = h
            con = T.mean(h, axis=1)
        else:  # pragma: no cover - guarded by ModelConfig
            raise ValueError(f"unknown adaptor mode: {mode}")

        return PooledRepresentation(gen, T.l2_normalize(con))

    def encode_video(self, frames: np.ndarray) -> PooledRepresentation:
        """Full vision path: patchify, position, encode, adapt."""
        frames = np.asarray(frames)
        b, t = frames.shape[0], frames.shape[1]
        if t < 1:
            raise ValueError("encode_video needs at least one frame")
        tokens = self.patchify(frames)
        if self.config.adaptor == "joint_space_time":
            n, d = self.config.n_patches, self.config.d_model
            flat = T.reshape(tokens, (b, t * n, d))
            positions = uniform_repeat_positions(self.store["spatial_pos"], t)
            encoded = self.encode_frames(flat + positions)
            return self.adapt(T.reshape(encoded, (b * t, n, d)), b, t)
        z = self.add_spatial_positions(tokens)
        return self.adapt(self.encode_frames(z), b, t)

    def encode_image(self, frames: np.ndarray) -> PooledRepresentation:
        """Single-frame path; identical computation to encode_video at T=1."""
        frames = np.asarray(frames)
        if frames.ndim != 4:
            raise ShapeError(f"expected (B, H, W, C) frames, got {frames.shape}")
        return self.encode_video(frames[:, None])

    def adapt_cached(self, frame_tokens: np.ndarray, batch: int, t: int) -> PooledRepresentation:
        """Adapt precomputed frame token embeddings (the frozen-encoder path)."""
        if self.config.adaptor == "joint_space_time":
            raise ValueError(
                "cached frame embeddings are undefined for the joint space-time "
                "adaptor: it re-encodes the full token sequence"
            )
        return self.adapt(Tensor(np.asarray(frame_tokens)), batch, t)

    # -------------------------------------------------------------------- text

    def _unimodal_states(self, ids: np.ndarray) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"expected (B, len) token ids, got {ids.shape}")
        if ids.shape[1] > cfg.max_text_len:
            raise ShapeError(
                f"text length {ids.shape[1]} exceeds max_text_len {cfg.max_text_len}"
            )
        h = T.embedding(self.store["token_embedding"], ids)
        h = h + T.embedding(self.store["text_pos"], np.arange(ids.shape[1]))
        mask = nn.causal_mask(ids.shape[1])
        for i in range(cfg.unimodal_layers):
            h = nn.transformer_block(self.store, f"uni.block{i}", h, cfg.n_heads, mask)
        return h

    def decode_unimodal(self, ids: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Causal text encoding; returns (token states, unit-norm [CLS] embedding)."""
        ids = np.asarray(ids)
        cls_counts = (ids == CLS_ID).sum(axis=1)
        if (cls_counts != 1).any():
            raise ValueError("every text row must contain the [CLS] token exactly once")
        states = self._unimodal_states(ids)
        cls_positions = (ids == CLS_ID).argmax(axis=1)
        cls_emb = T.l2_normalize(T.gather_rows(states, cls_positions))
        return states, cls_emb

    def decode_multimodal(self, states: Tensor, generative: Tensor) -> Tensor:
        """Cross-attend text states over adaptor tokens; returns vocab logits."""
        cfg = self.config
        if states.shape[-1] != generative.shape[-1]:
            raise ShapeError(
                f"width mismatch: text {states.shape[-1]} vs visual {generative.shape[-1]}"
            )
        mask = nn.causal_mask(states.shape[1])
        h = states
        for i in range(cfg.multimodal_layers):
            h = nn.cross_block(self.store, f"multi.block{i}", h, generative, cfg.n_heads, mask)
        h = nn.apply_layer_norm(self.store, "decoder_norm", h)
        return nn.linear(self.store, "vocab_proj", h)

    def forward(self, frames: np.ndarray, ids: np.ndarray) -> Dict[str, Tensor]:
        """Joint forward pass for training: pooled video + text + vocab logits."""
        pooled = self.encode_video(frames)
        states, cls_emb = self.decode_unimodal(ids)
        logits = self.decode_multimodal(states, pooled.generative)
        return {
            "generative": pooled.generative,
            "video_embedding": pooled.contrastive,
            "text_embedding": cls_emb,
            "logits": logits,
        }

    # --------------------------------------------------------------- task head

    def add_vqa_head(self, n_answers: int, seed: int = 0) -> None:
        """Task-specific single-query pooler plus a linear map to answer logits."""
        if n_answers < 2:
            raise ValueError("answer classification needs at least two classes")
        rng = np.random.default_rng(seed)
        nn.init_pooler(
            self.store, "vqa_pooler", 1, self.config.d_model, self.config.n_heads,
            "task_head", rng,
        )
        nn.init_linear(
            self.store, "vqa_proj", self.config.d_model, n_answers, "task_head", rng,
            zero=True,
        )

    def vqa_logits(self, frames: np.ndarray, ids: np.ndarray) -> Tensor:
        """Pool decoder states with the task pooler, then a single linear map."""
        if "vqa_proj.weight" not in self.store:
            raise RuntimeError("call add_vqa_head before vqa_logits")
        pooled = self.encode_video(frames)
        states, _ = self.decode_unimodal(ids)
        decoded = self.decode_multimodal_states(states, pooled.generative)
        summary = nn.attentional_pool(self.store, "vqa_pooler", decoded, self.config.n_heads)
        summary = T.reshape(summary, (summary.shape[0], summary.shape[2]))
        return nn.linear(self.store, "vqa_proj", summary)

    def decode_multimodal_states(self, states: Tensor, generative: Tensor) -> Tensor:
        """Multimodal decoder states before the vocabulary projection."""
        cfg = self.config
        mask = nn.causal_mask(states.shape[1])
        h = states
        for i in range(cfg.multimodal_layers):
            h = nn.cross_block(self.store, f"multi.block{i}", h, generative, cfg.n_heads, mask)
        return nn.apply_layer_norm(self.store, "decoder_norm", h)

    # --------------------------------------------------------------- captioning

    def generate_caption(self, frames: np.ndarray, max_len: Optional[int] = None) -> List[int]:
        """Greedy argmax decoding from [BOS]; stops at [EOS] or max_len tokens."""
        if max_len is None:
            max_len = self.config.max_text_len - 2
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        frames = np.asarray(frames)
        if frames.ndim == 4:
            frames = frames[None]
        pooled = self.encode_video(frames[:1])
        ids = [BOS_ID]
        generated: List[int] = []
        for _ in range(max_len):
            states = self._unimodal_states(np.asarray([ids]))
            logits = self.decode_multimodal(states, pooled.generative)
            next_id = int(np.argmax(logits.data[0, -1]))
            generated.append(next_id)
            if next_id == EOS_ID:
                break
            ids.append(next_id)
            if len(ids) >= self.config.max_text_len:
                break
        return generated


# ------------------------------------------------------------------ accounting


def estimate_flops(config: ModelConfig, t: int) -> Dict[str, object]:
    """Closed-form multiply-add counts per component for a single video.

    Formula sheet (per layer, sequence length S, width d):
      attention: 2*S^2*d (scores + weighted sum) + 4*S*d^2 (q/k/v/o projections)
      mlp:       8*S*d^2
      pooler:    2*n_query*S*d (cross attention) + (2*S + 2*n_query)*d^2 (projections)
    Counts are summed per component: encoder, adaptor, decoder.
    """
    d = config.d_model
    n = config.n_patches

    def block(s: int) -> float:
        return 2.0 * s * s * d + 4.0 * s * d * d + 8.0 * s * d * d

    def pooler(n_query: int, s: int) -> float:
        return 2.0 * n_query * s * d + (2.0 * s + 2.0 * n_query) * d * d

    if config.adaptor == "joint_space_time":
        encoder = config.encoder_layers * block(t * n)
    else:
        encoder = t * config.encoder_layers * block(n)
    encoder += t * n * 2.0 * config.patch_dim * d  # patch projection

    mode = config.adaptor
    if mode in ("attentional_pooler", "joint_space_time"):
        adaptor = pooler(config.n_query_gen, t * n) + pooler(1, t * n)
        gen_tokens = config.n_query_gen
    elif mode == "mean_pooling":
        adaptor = t * (pooler(config.n_query_gen, n) + pooler(1, n))
        gen_tokens = config.n_query_gen
    else:  # factorized_encoder
        adaptor = t * pooler(1, n) + config.temporal_layers * block(t)
        gen_tokens = t

    s_text = config.max_text_len
    decoder = config.unimodal_layers * block(s_text)
    decoder += config.multimodal_layers * (
        block(s_text) + 2.0 * s_text * gen_tokens * d + (2.0 * s_text + 2.0 * gen_tokens) * d * d
    )
    decoder += 2.0 * s_text * d * config.vocab_size

    return {
        "encoder": encoder,
        "adaptor": adaptor,
        "decoder": decoder,
        "total": encoder + adaptor + decoder,
        "formulas": {
            "attention_per_layer": "2*S^2*d + 4*S*d^2",
            "mlp_per_layer": "8*S*d^2",
            "pooler": "2*n_query*S*d + (2*S + 2*n_query)*d^2",
        },
    }


# ---------------------------------------------------------------- checkpointing


def save_checkpoint(path, config: ModelConfig, store: ParameterStore) -> None:
    """Single binary file; round-trips bitwise exactly."""
    config_blob = "\n".join(
        f"{key} = {value}" for key, value in sorted(config.to_dict().items())
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        arrays = store.state_arrays()
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config_values = {}
        for line in fh.read(blob_len).decode("utf-8").splitlines():
            key, _, value = line.partition(" = ")
            config_values[key] = value
        config = ModelConfig.from_dict(config_values)
        (n_params,) = struct.unpack("<I", fh.read(4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            arrays[name] = data.copy()
    return config, arrays


def load_model(path, seed: int = 0) -> VideoTextModel:
    config, arrays = load_checkpoint(path)
    model = VideoTextModel(config, seed=seed)
    extra = set(arrays) - set(model.store.names())
    if extra:
        # task-head parameters are created on demand before loading
        if any(name.startswith("vqa_") for name in extra):
            n_answers = arrays["vqa_proj.bias"].shape[0]
            model.add_vqa_head(n_answers)
    model.store.load_state_arrays(arrays)
    return model
