"""Evaluation protocols: prompt-ensembled zero-shot classification,
bidirectional retrieval recall, multi-label mean average precision, BLEU-4
and the frames-count ablation harness.

All metrics are pure functions with deterministic tie-breaking by lower
index.
"""

from __future__ import annotations

from collections import Counter
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, Tokenizer, sample_video_frames
from .model import VideoTextModel

DEFAULT_PROMPTS = (
    "a video of {label}",
    "a clip of {label}",
    "a short video showing {label}",
    "footage of {label}",
    "there is {label} in the video",
    "a video clip of {label}",
    "this clip shows {label}",
    "a recording of {label}",
)


def build_class_embeddings(
    labels: Sequence[str],
    prompts: Sequence[str],
    model: VideoTextModel,
    tokenizer: Tokenizer,
) -> np.ndarray:
    """Per class: embed each filled template, average, re-normalize."""
    if not labels or not prompts:
        raise ValueError("labels and prompts must both be non-empty")
    for template in prompts:
        if template.count("{label}") != 1:
            raise ValueError(f"template must contain one {{label}} slot: {template!r}")
    rows = []
    for label in labels:
        texts = [template.format(label=label) for template in prompts]
        ids = tokenizer.encode_batch(texts, model.config.max_text_len)
        _, cls_emb = model.decode_unimodal(ids)
        mean = cls_emb.data.mean(axis=0)
        rows.append(mean / max(np.linalg.norm(mean), 1e-12))
    return np.stack(rows)


def zero_shot_classify(
    video_embeddings: np.ndarray,
    class_matrix: np.ndarray,
    true_classes: Sequence[int],
    k: int = 5,
) -> Dict[str, object]:
    """Cosine-similarity argmax classification; ties go to the lower index."""
    n_classes = class_matrix.shape[0]
    if k > n_classes:
        raise ValueError(f"top-{k} undefined with only {n_classes} classes")
    sims = np.asarray(video_embeddings) @ np.asarray(class_matrix).T
    # stable argsort ascending on -sims => ties broken by lower class index
    ranked = np.argsort(-sims, axis=1, kind="stable")
    true = np.asarray(true_classes)
    top1 = float((ranked[:, 0] == true).mean())
    topk = float((ranked[:, :k] == true[:, None]).any(axis=1).mean())
    return {"top1": top1, f"top{k}": topk, "predictions": ranked[:, :k]}


def recall_at_k(
    similarities: np.ndarray,
    ground_truth: Sequence[Iterable[int]],
    k: int,
) -> float:
    """Fraction of query rows whose any true column ranks within the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = np.asarray(similarities)
    hits = 0
    for row, truth in zip(sims, ground_truth):
        truth = set(truth)
        if not truth:
            raise ValueError("every query needs at least one ground-truth column")
        top = np.argsort(-row, kind="stable")[:k]
        if truth.intersection(top.tolist()):
            hits += 1
    return hits / sims.shape[0]


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP over a ranked list: mean of precision at each positive's rank."""
    order = np.argsort(-scores, kind="stable")
    relevant = positives[order]
    if not relevant.any():
        raise ValueError("average precision undefined with zero positives")
    ranks = np.flatnonzero(relevant) + 1
    precisions = np.cumsum(relevant)[relevant.astype(bool)] / ranks
    return float(precisions.mean())


def mean_average_precision(
    scores: np.ndarray, label_sets: Sequence[Iterable[int]], n_classes: int
) -> float:
    """Class-wise (macro) mAP: rank queries per class, average the APs."""
    scores = np.asarray(scores)
    membership = np.zeros((scores.shape[0], n_classes), dtype=bool)
    for q, labels in enumerate(label_sets):
        for label in labels:
            membership[q, label] = True
    aps = []
    for c in range(n_classes):
        if not membership[:, c].any():
            raise ValueError(f"class {c} has no positive queries")
        aps.append(average_precision(scores[:, c], membership[:, c]))
    return float(np.mean(aps))


def _ngram_counts(ids: Sequence[int], n: int) -> Counter:
    return Counter(tuple(ids[i : i + n]) for i in range(len(ids) - n + 1))


def bleu4(candidate: Sequence[int], reference: Sequence[int]) -> float:
    """Geometric mean of modified 1-4-gram precisions times brevity penalty.

    No smoothing: candidates shorter than 4 tokens score 0.
    """
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    if len(candidate) < 4:
        return 0.0
    log_precision = 0.0
    for n in range(1, 5):
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        clipped = sum(min(count, ref[gram]) for gram, count in cand.items())
        total = sum(cand.values())
        if clipped == 0:
            return 0.0
        log_precision += np.log(clipped / total)
    brevity = 1.0
    if len(candidate) < len(reference):
        brevity = np.exp(1.0 - len(reference) / len(candidate))
    return float(brevity * np.exp(log_precision / 4.0))


# --------------------------------------------------------------- harnesses


def embed_videos(
    model: VideoTextModel, dataset: Dataset, indices: Sequence[int], t: int
) -> np.ndarray:
    cfg = model.config
    rows = []
    chunk = 32
    for start in range(0, len(indices), chunk):
        frames = np.stack(
            [
                sample_video_frames(dataset.videos[i], t, cfg.height, cfg.width)
                for i in indices[start : start + chunk]
            ]
        )
        rows.append(model.encode_video(frames).contrastive.data)
    return np.concatenate(rows)


def embed_texts(
    model: VideoTextModel, tokenizer: Tokenizer, texts: Sequence[str]
) -> np.ndarray:
    ids = tokenizer.encode_batch(texts, model.config.max_text_len)
    _, cls_emb = model.decode_unimodal(ids)
    return cls_emb.data.copy()


def evaluate_classification(
    model: VideoTextModel,
    dataset: Dataset,
    tokenizer: Tokenizer,
    indices: Sequence[int],
    t: int,
    prompts: Sequence[str] = DEFAULT_PROMPTS,
) -> Dict[str, object]:
    class_matrix = build_class_embeddings(dataset.class_names, prompts, model, tokenizer)
    video_embeddings = embed_videos(model, dataset, indices, t)
    true = [dataset.class_ids[i] for i in indices]
    return zero_shot_classify(video_embeddings, class_matrix, true)


def evaluate_retrieval(
    model: VideoTextModel,
    dataset: Dataset,
    tokenizer: Tokenizer,
    indices: Sequence[int],
    t: int,
    ks: Sequence[int] = (1, 5, 10),
) -> Dict[str, float]:
    """Bidirectional retrieval; each caption is its own text query.

    Captions describe their video's class rather than the individual clip, so
    any gallery item of the query's class counts as ground truth in both
    directions.
    """
    video_embeddings = embed_videos(model, dataset, indices, t)
    captions = [dataset.captions[i] for i in indices]
    text_embeddings = embed_texts(model, tokenizer, captions)
    sims = text_embeddings @ video_embeddings.T
    classes = [dataset.class_ids[i] for i in indices]
    truth = [
        [g for g, cls in enumerate(classes) if cls == classes[q]]
        for q in range(len(indices))
    ]
    report = {}
    for k in ks:
        report[f"t2v_r@{k}"] = recall_at_k(sims, truth, k)
        report[f"v2t_r@{k}"] = recall_at_k(sims.T, truth, k)
    return report


def evaluate_captioning(
    model: VideoTextModel,
    dataset: Dataset,
    tokenizer: Tokenizer,
    indices: Sequence[int],
    t: int,
) -> Dict[str, float]:
    cfg = model.config
    scores = []
    for i in indices:
        frames = sample_video_frames(dataset.videos[i], t, cfg.height, cfg.width)
        generated = model.generate_caption(frames[None])
        candidate = [g for g in generated if g > 3]
        reference = tokenizer.tokenize(dataset.captions[i])
        scores.append(bleu4(candidate, reference))
    return {"bleu4": float(np.mean(scores))}


def frames_ablation(
    model: VideoTextModel,
    dataset: Dataset,
    tokenizer: Tokenizer,
    indices: Sequence[int],
    t_values: Sequence[int],
) -> List[Dict[str, float]]:
    """Re-evaluate one checkpoint with re-sampled frames for each T."""
    rows = []
    for t in t_values:
        cls = evaluate_classification(model, dataset, tokenizer, indices, t)
        ret = evaluate_retrieval(model, dataset, tokenizer, indices, t, ks=(1, 5))
        rows.append(
            {
                "t": t,
                "top1": cls["top1"],
                "top5": cls["top5"],
                "t2v_r@1": ret["t2v_r@1"],
                "t2v_r@5": ret["t2v_r@5"],
            }
        )
    return rows


def format_report(rows: Dict[str, float], split: str = "eval") -> str:
    """Line-delimited metric records: name, split, value."""
    lines = []
    for name, value in rows.items():
        if isinstance(value, (int, float, np.floating)):
            lines.append(f"{name}\t{split}\t{value:.6f}")
    return "\n".join(lines)
