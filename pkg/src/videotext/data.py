"""Deterministic synthetic video-text corpus, toy tokenizer, frame sampling
and the raw on-disk formats (manifest, vocabulary, video payloads).

The default corpus is built so that class labels require temporal reasoning:
the left/right and up/down class pairs are exact time reversals of each
other, so any representation that discards frame order cannot tell them
apart. The remaining classes hide their evidence in brief flashes of two
marker shapes that appear either in the same frames or in disjoint ones;
telling those apart rewards pooling that can single out a few tokens, since
a plain average over frames nearly cancels the co-occurrence signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import BOS_ID, CLS_ID, EOS_ID, PAD_ID

VIDEO_MAGIC = b"VCCV"
VIDEO_VERSION = 1

SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[CLS]")

# class id -> (name used as the zero-shot label, caption, multi-label ids)
# multi-labels index into LABEL_CATEGORIES: shape label(s) + motion label.
LABEL_CATEGORIES = (
    "square",
    "cross",
    "ring",
    "bar",
    "dot",
    "rightward",
    "leftward",
    "downward",
    "upward",
    "flashing",
)

DEFAULT_CLASSES = (
    ("square moving right", "the square moves right", (0, 5)),
    ("square moving left", "the square moves left", (0, 6)),
    ("square moving down", "the square moves down", (0, 7)),
    ("square moving up", "the square moves up", (0, 8)),
    ("cross and ring flashing together", "the cross and ring flash at once", (1, 2, 9)),
    ("cross and ring flashing apart", "the cross and ring flash separately", (1, 2, 9)),
    ("bar and dot flashing together", "the bar and dot flash at once", (3, 4, 9)),
    ("bar and dot flashing apart", "the bar and dot flash separately", (3, 4, 9)),
)


@dataclass
class SynthSpec:
    videos_per_class: int = 64
    n_frames: int = 16
    height: int = 36
    width: int = 36
    channels: int = 1
    noise: float = 0.04
    seed: int = 0
    classes: Tuple = DEFAULT_CLASSES

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("frame geometry too small for the motion patterns")


@dataclass
class Dataset:
    videos: List[np.ndarray]  # each (F, H, W, C) float32 in [0, 1]
    captions: List[str]
    class_ids: List[int]
    label_sets: List[Tuple[int, ...]]
    class_names: List[str]
    vocabulary: List[str]

    def __len__(self) -> int:
        return len(self.videos)


# ------------------------------------------------------------------- drawing


def _draw_square(frame: np.ndarray, y: int, x: int, size: int = 6) -> None:
    frame[y : y + size, x : x + size] = 1.0


def _draw_cross(frame: np.ndarray, y: int, x: int, size: int = 10) -> None:
    mid = size // 2
    frame[y + mid - 1 : y + mid + 1, x : x + size] = 1.0
    frame[y : y + size, x + mid - 1 : x + mid + 1] = 1.0


def _draw_ring(frame: np.ndarray, y: int, x: int, size: int = 10) -> None:
    frame[y : y + size, x : x + size] = 1.0
    frame[y + 2 : y + size - 2, x + 2 : x + size - 2] = 0.0


def _draw_bar(frame: np.ndarray, y: int, x: int, size: int = 10) -> None:
    for i in range(size):
        frame[y + i, x + max(0, i - 1) : x + i + 2] = 1.0


def _draw_dot(frame: np.ndarray, y: int, x: int, size: int = 4) -> None:
    frame[y : y + size, x : x + size] = 1.0


_MARKERS = {
    "cross": _draw_cross,
    "ring": _draw_ring,
    "bar": _draw_bar,
    "dot": _draw_dot,
}


def _motion_clip(spec: SynthSpec, axis: str, rng) -> np.ndarray:
    """Square traversing the frame; 'left'/'up' classes reverse these clips."""
    f, h, w = spec.n_frames, spec.height, spec.width
    size = 6
    clip = np.zeros((f, h, w, spec.channels), dtype=np.float32)
    span_max = (w if axis == "x" else h) - size
    fixed = int(rng.integers(4, (h if axis == "x" else w) - size - 4))
    positions = np.linspace(0, span_max, f)
    jitter = int(rng.integers(-2, 3))
    for i in range(f):
        pos = int(round(positions[i]))
        frame = clip[i, :, :, 0]
        if axis == "x":
            _draw_square(frame, np.clip(fixed + jitter, 0, h - size), pos, size)
        else:
            _draw_square(frame, pos, np.clip(fixed + jitter, 0, w - size), size)
    return clip


def _pair_clip(
    spec: SynthSpec, first: str, second: str, together: bool, rng
) -> np.ndarray:
    """Static centered square everywhere; two markers flash for short runs.

    ``together`` draws both markers over one shared run of frames; otherwise
    each marker gets its own run in opposite halves of the clip. The marker
    set and spatial layout are identical across the two cases, so they differ
    only in whether the markers ever share a frame. A plain average over
    frame features nearly cancels that difference, while a pooler that can
    weight individual frames sees a both-markers frame directly.
    """
    f, h, w = spec.n_frames, spec.height, spec.width
    clip = np.zeros((f, h, w, spec.channels), dtype=np.float32)
    cy, cx = h // 2 - 3, w // 2 - 3
    for i in range(f):
        _draw_square(clip[i, :, :, 0], cy, cx, 6)
    span = min(4, max(1, f // 4))
    half = f // 2
    if together:
        start = int(rng.integers(0, f - span + 1))
        starts = (start, start)
    else:
        starts = (
            int(rng.integers(0, max(1, half - span + 1))),
            half + int(rng.integers(0, max(1, half - span + 1))),
        )
    # vertical bands above and below the centered square keep the two markers
    # from overlapping each other or the square
    y_top = int(rng.integers(1, max(2, cy - 10)))
    y_bot = int(rng.integers(min(h - 12, cy + 7), h - 11))
    placements = (
        (first, starts[0], y_top, int(rng.integers(1, w - 11))),
        (second, starts[1], y_bot, int(rng.integers(1, w - 11))),
    )
    for marker, start, my, mx in placements:
        for i in range(start, start + span):
            _MARKERS[marker](clip[i, :, :, 0], my, mx)
    return clip


def _add_noise(clip: np.ndarray, spec: SynthSpec, rng) -> np.ndarray:
    if spec.noise > 0:
        clip = clip + rng.uniform(0.0, spec.noise, size=clip.shape).astype(np.float32)
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Generate the full corpus; byte-deterministic given spec.seed.

    Paired motion classes are built from the same trajectories: the second
    class of each pair is the exact frame-order reversal of the first, noise
    included, so their frame multisets match.
    """
    from .metrics import DEFAULT_PROMPTS  # lazy: metrics imports this module

    videos: List[np.ndarray] = []
    captions: List[str] = []
    class_ids: List[int] = []
    label_sets: List[Tuple[int, ...]] = []

    caption_rng = np.random.default_rng(spec.seed ^ 0x9E3779B9)
    for class_id, (name, caption, labels) in enumerate(spec.classes):
        for j in range(spec.videos_per_class):
            index = class_id * spec.videos_per_class + j
            if "moving left" in name or "moving up" in name:
                # reversal twin: reuse the forward clip of the paired class
                axis = "x" if "left" in name else "y"
                twin_index = (class_id - 1) * spec.videos_per_class + j
                rng = np.random.default_rng(spec.seed ^ (twin_index + 1))
                clip = _add_noise(_motion_clip(spec, axis, rng), spec, rng)[::-1].copy()
            elif "moving" in name:
                axis = "x" if "right" in name else "y"
                rng = np.random.default_rng(spec.seed ^ (index + 1))
                clip = _add_noise(_motion_clip(spec, axis, rng), spec, rng)
            else:
                first, second = (w for w in name.split() if w in _MARKERS)
                rng = np.random.default_rng(spec.seed ^ (index + 1))
                clip = _add_noise(
                    _pair_clip(spec, first, second, name.endswith("together"), rng),
                    spec,
                    rng,
                )
            videos.append(clip)
            # per-video caption from the class grammar: a template around the
            # class name, so described content varies in phrasing but not class
            template = DEFAULT_PROMPTS[int(caption_rng.integers(len(DEFAULT_PROMPTS)))]
            captions.append(template.format(label=name))
            class_ids.append(class_id)
            label_sets.append(tuple(labels))

    class_names = [name for name, _, _ in spec.classes]
    base_captions = [caption for _, caption, _ in spec.classes]
    vocabulary = build_vocabulary(captions, class_names, extra_texts=base_captions)
    return Dataset(videos, captions, class_ids, label_sets, class_names, vocabulary)


# ----------------------------------------------------------------- tokenizer


def build_vocabulary(
    captions: Sequence[str],
    class_names: Sequence[str],
    extra_texts: Sequence[str] = (),
) -> List[str]:
    """Closed vocabulary: specials first, then words in first-seen order."""
    from .metrics import DEFAULT_PROMPTS  # words used by prompt templates

    words: List[str] = []
    seen = set(SPECIAL_TOKENS)
    texts = list(captions) + list(class_names) + list(extra_texts)
    texts += [t.replace("{label}", "") for t in DEFAULT_PROMPTS]
    for text in texts:
        for word in text.split():
            if word not in seen:
                seen.add(word)
                words.append(word)
    return list(SPECIAL_TOKENS) + words


class Tokenizer:
    """Whitespace split plus closed-vocabulary lookup."""

    def __init__(self, vocabulary: Sequence[str]):
        self.vocabulary = list(vocabulary)
        self._index = {word: i for i, word in enumerate(self.vocabulary)}
        for i, special in enumerate(SPECIAL_TOKENS):
            if self._index.get(special) != i:
                raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")

    def tokenize(self, text: str) -> List[int]:
        ids = []
        for word in text.split():
            if word not in self._index:
                raise KeyError(f"word not in vocabulary: {word!r}")
            ids.append(self._index[word])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.vocabulary):
                raise IndexError(f"token id out of range: {i}")
            word = self.vocabulary[i]
            if word in SPECIAL_TOKENS:
                continue
            words.append(word)
        return " ".join(words)

    def encode_row(self, text: str, max_len: int) -> np.ndarray:
        """[BOS] words [EOS] [CLS] then pad to max_len."""
        ids = self.tokenize(text)
        if len(ids) + 3 > max_len:
            raise ValueError(f"caption too long for max_len {max_len}: {text!r}")
        row = [BOS_ID] + ids + [EOS_ID, CLS_ID]
        row += [PAD_ID] * (max_len - len(row))
        return np.asarray(row, dtype=np.int64)

    def encode_batch(self, texts: Sequence[str], max_len: int) -> np.ndarray:
        return np.stack([self.encode_row(t, max_len) for t in texts])


# ------------------------------------------------------------ frame handling


def uniform_sample_frames(n_frames: int, t: int) -> np.ndarray:
    """index_i = floor((i + 0.5) * F / T); duplicates allowed when T > F."""
    if t < 1 or n_frames < 1:
        raise ValueError("frame counts must be positive")
    return np.floor((np.arange(t) + 0.5) * n_frames / t).astype(np.int64)


def center_crop(frame: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Symmetric crop of the trailing spatial axes; odd remainders keep the
    top/left pixel."""
    h, w = frame.shape[-3], frame.shape[-2]
    if target_h > h or target_w > w:
        raise ValueError(f"crop {target_h}x{target_w} larger than source {h}x{w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    return frame[..., top : top + target_h, left : left + target_w, :]


def sample_video_frames(
    video: np.ndarray, t: int, target_h: int, target_w: int
) -> np.ndarray:
    indices = uniform_sample_frames(video.shape[0], t)
    return center_crop(video[indices], target_h, target_w)


def assemble_batch(
    dataset: Dataset,
    indices: Sequence[int],
    tokenizer: Tokenizer,
    t: int,
    target_h: int,
    target_w: int,
    max_text_len: int,
) -> Dict:
    frames = np.stack(
        [sample_video_frames(dataset.videos[i], t, target_h, target_w) for i in indices]
    )
    ids = tokenizer.encode_batch([dataset.captions[i] for i in indices], max_text_len)
    return {
        "frames": frames,
        "ids": ids,
        "indices": np.asarray(indices),
        "batch_size": len(indices),
        "frames_per_clip": t,
    }


def batch_stream(
    dataset: Dataset,
    tokenizer: Tokenizer,
    batch_size: int,
    t: int,
    target_h: int,
    target_w: int,
    max_text_len: int,
    seed: int,
    indices: Optional[Sequence[int]] = None,
):
    """Endless deterministic stream of shuffled minibatches."""
    rng = np.random.default_rng(seed)
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    while True:
        order = pool[rng.permutation(len(pool))]
        for start in range(0, len(pool) - batch_size + 1, batch_size):
            chosen = order[start : start + batch_size]
            yield assemble_batch(
                dataset, chosen, tokenizer, t, target_h, target_w, max_text_len
            )


def train_eval_split(dataset: Dataset, eval_per_class: int) -> Tuple[List[int], List[int]]:
    """Per class, the last ``eval_per_class`` videos form the eval split."""
    by_class: Dict[int, List[int]] = {}
    for i, class_id in enumerate(dataset.class_ids):
        by_class.setdefault(class_id, []).append(i)
    train_idx: List[int] = []
    eval_idx: List[int] = []
    for class_id in sorted(by_class):
        members = by_class[class_id]
        if eval_per_class >= len(members):
            raise ValueError("eval_per_class leaves no training videos")
        train_idx.extend(members[: len(members) - eval_per_class])
        eval_idx.extend(members[len(members) - eval_per_class :])
    return train_idx, eval_idx


# ----------------------------------------------------------------- disk format


def write_video_file(path, video: np.ndarray) -> None:
    video = np.ascontiguousarray(video, dtype="<f4")
    f, h, w, c = video.shape
    header = struct.pack(
        "<4sIIIII8x", VIDEO_MAGIC, VIDEO_VERSION, f, h, w, c
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(video.tobytes())


def read_video_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(32)
        magic, version, f, h, w, c = struct.unpack("<4sIIIII8x", header)
        if magic != VIDEO_MAGIC:
            raise ValueError(f"not a video payload file (magic {magic!r})")
        if version != VIDEO_VERSION:
            raise ValueError(f"unsupported video payload version {version}")
        data = np.frombuffer(fh.read(4 * f * h * w * c), dtype="<f4")
    return data.reshape(f, h, w, c).copy()


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    with open(out / "vocab.txt", "w") as fh:
        fh.write("\n".join(dataset.vocabulary) + "\n")
    with open(out / "classes.txt", "w") as fh:
        fh.write("\n".join(dataset.class_names) + "\n")
    with open(out / "manifest.tsv", "w") as fh:
        for i, video in enumerate(dataset.videos):
            rel = f"videos/vid_{i:05d}.bin"
            write_video_file(out / rel, video)
            labels = ",".join(str(l) for l in dataset.label_sets[i])
            fh.write(
                f"{i}\t{rel}\t{dataset.class_ids[i]}\t{labels}\t{dataset.captions[i]}\n"
            )


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    vocabulary = (root / "vocab.txt").read_text().splitlines()
    class_names = (root / "classes.txt").read_text().splitlines()
    videos, captions, class_ids, label_sets = [], [], [], []
    for line in (root / "manifest.tsv").read_text().splitlines():
        _vid, rel, class_id, labels, caption = line.split("\t")
        videos.append(read_video_file(root / rel))
        captions.append(caption)
        class_ids.append(int(class_id))
        label_sets.append(tuple(int(l) for l in labels.split(",")))
    return Dataset(videos, captions, class_ids, label_sets, class_names, vocabulary)
