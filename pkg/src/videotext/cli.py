"""Command-line surface wiring data generation, training, caching and
evaluation together. Every run writes its artifacts under a run directory
with the resolved configuration echoed to ``config.resolved``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import data as data_mod
from . import metrics, training
from .config import RunConfig, load_config
from .data import SynthSpec, Tokenizer
from .model import VideoTextModel, load_model, save_checkpoint


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override must be KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _load_run_config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _prepare_run_dir(args, cfg: RunConfig, subcommand: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / subcommand
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    return out


def _synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(
        videos_per_class=cfg.data.videos_per_class,
        n_frames=cfg.data.native_frames,
        height=cfg.data.native_height,
        width=cfg.data.native_width,
        channels=cfg.model.channels,
        noise=cfg.data.noise,
        seed=cfg.data.data_seed,
    )


def _load_dataset(args):
    dataset = data_mod.load_dataset(args.data)
    return dataset, Tokenizer(dataset.vocabulary)


def _load_model_for_eval(args, cfg: RunConfig) -> VideoTextModel:
    if args.ckpt:
        return load_model(args.ckpt)
    return VideoTextModel(cfg.model, seed=cfg.train.seed)


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = _prepare_run_dir(args, cfg, "gen-data")
    dataset = data_mod.synth_generate(_synth_spec(cfg))
    data_mod.save_dataset(dataset, out)
    print(f"wrote {len(dataset)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "train")

    model = VideoTextModel(cfg.model, seed=cfg.train.seed)
    model.store.init_ema()
    train_idx, _ = data_mod.train_eval_split(dataset, cfg.data.eval_per_class)
    stream = data_mod.batch_stream(
        dataset,
        tokenizer,
        cfg.train.batch_size,
        cfg.train.frames_per_clip,
        cfg.model.height,
        cfg.model.width,
        cfg.model.max_text_len,
        cfg.train.seed,
        indices=train_idx,
    )
    if args.cache:
        cache_mod.require_cache_mode(cfg.train.tuning_mode)
        cache = cache_mod.read_cache(args.cache, expected_config=cfg.model)
        raw_stream = stream
        stream = (cache_mod.to_cached_batch(batch, cache) for batch in raw_stream)

    before = model.store.component_checksums()
    with open(out / "train_log.tsv", "w") as log_fh:
        log_fh.write("\t".join(training.STEP_LOG_FIELDS) + "\n")
        training.train(
            model, stream, cfg.optimizer, cfg.train, cfg.optimizer.total_steps, log_fh
        )
    after = model.store.component_checksums()
    with open(out / "checksums.tsv", "w") as fh:
        fh.write("component\tbefore\tafter\tchanged\n")
        for tag in before:
            fh.write(f"{tag}\t{before[tag]}\t{after[tag]}\t{before[tag] != after[tag]}\n")
    save_checkpoint(out / "model.ckpt", cfg.model, model.store)
    print(f"trained {cfg.optimizer.total_steps} steps; artifacts in {out}")
    return 0


def cmd_precompute_cache(args) -> int:
    cfg = _load_run_config(args)
    dataset, _ = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "precompute-cache")
    model = _load_model_for_eval(args, cfg)
    cache = cache_mod.precompute_cache(dataset, model, cfg.train.frames_per_clip)
    cache_mod.write_cache(out / "cache.bin", cache)
    print(f"cached {len(cache.embeddings)} videos to {out / 'cache.bin'}")
    return 0


def _eval_indices(cfg: RunConfig, dataset) -> list:
    _, eval_idx = data_mod.train_eval_split(dataset, cfg.data.eval_per_class)
    return eval_idx


def _maybe_ema(model: VideoTextModel, cfg: RunConfig):
    if cfg.train.eval_with_ema:
        return model.store.swap_in_ema()
    return {}


def cmd_eval_cls(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "eval-cls")
    model = _load_model_for_eval(args, cfg)
    report = metrics.evaluate_classification(
        model, dataset, tokenizer, _eval_indices(cfg, dataset), cfg.train.frames_per_clip
    )
    text = metrics.format_report(report)
    (out / "report.tsv").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "eval-retrieval")
    model = _load_model_for_eval(args, cfg)
    report = metrics.evaluate_retrieval(
        model, dataset, tokenizer, _eval_indices(cfg, dataset), cfg.train.frames_per_clip
    )
    text = metrics.format_report(report)
    (out / "report.tsv").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval_caption(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "eval-caption")
    model = _load_model_for_eval(args, cfg)
    report = metrics.evaluate_captioning(
        model, dataset, tokenizer, _eval_indices(cfg, dataset), cfg.train.frames_per_clip
    )
    text = metrics.format_report(report)
    (out / "report.tsv").write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate_frames(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "ablate-frames")
    model = _load_model_for_eval(args, cfg)
    t_values = [int(v) for v in args.t_list.split(",")]
    rows = metrics.frames_ablation(
        model, dataset, tokenizer, _eval_indices(cfg, dataset), t_values
    )
    lines = ["t\ttop1\ttop5\tt2v_r@1\tt2v_r@5"]
    for row in rows:
        lines.append(
            f"{row['t']}\t{row['top1']:.6f}\t{row['top5']:.6f}"
            f"\t{row['t2v_r@1']:.6f}\t{row['t2v_r@5']:.6f}"
        )
    (out / "report.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_vqa_train(args) -> int:
    cfg = _load_run_config(args)
    dataset, tokenizer = _load_dataset(args)
    out = _prepare_run_dir(args, cfg, "vqa-train")
    model = _load_model_for_eval(args, cfg)
    n_answers = len(dataset.class_names)
    model.add_vqa_head(n_answers, seed=cfg.train.seed)
    model.store.init_ema()

    # phrased from words the closed vocabulary is guaranteed to contain
    question = "this video shows"
    train_idx, eval_idx = data_mod.train_eval_split(dataset, cfg.data.eval_per_class)
    optimizer = training.Optimizer(model.store, cfg.optimizer)
    rng = np.random.default_rng(cfg.train.seed)
    question_ids = tokenizer.encode_batch(
        [question] * cfg.train.batch_size, cfg.model.max_text_len
    )
    with open(out / "train_log.tsv", "w") as log_fh:
        log_fh.write("step\tloss\tlr\n")
        for step in range(cfg.optimizer.total_steps):
            chosen = rng.choice(train_idx, size=cfg.train.batch_size, replace=False)
            frames = np.stack(
                [
                    data_mod.sample_video_frames(
                        dataset.videos[i],
                        cfg.train.frames_per_clip,
                        cfg.model.height,
                        cfg.model.width,
                    )
                    for i in chosen
                ]
            )
            answers = np.asarray([dataset.class_ids[i] for i in chosen])
            model.store.set_frozen(
                training.freeze_mask(
                    cfg.train.tuning_mode, step, cfg.train.switch_step
                )
            )
            model.store.zero_grads()
            logits = model.vqa_logits(frames, question_ids)
            loss = training.T.cross_entropy_logits(logits, answers)
            loss.backward()
            grads = model.store.gradient_map()
            training.clip_gradients(
                {n: grads[n] for n in model.store.trainable_names()},
                cfg.optimizer.clip_norm,
            )
            lr = training.lr_schedule(step, cfg.optimizer)
            optimizer.step(grads, lr)
            model.store.ema_update(cfg.optimizer.ema_decay)
            log_fh.write(f"{step}\t{loss.item():.8g}\t{lr:.8g}\n")

    # eval accuracy on the held-out split
    correct = 0
    q_eval = tokenizer.encode_batch([question], cfg.model.max_text_len)
    for i in eval_idx:
        frames = data_mod.sample_video_frames(
            dataset.videos[i],
            cfg.train.frames_per_clip,
            cfg.model.height,
            cfg.model.width,
        )[None]
        logits = model.vqa_logits(frames, q_eval)
        if int(np.argmax(logits.data[0])) == dataset.class_ids[i]:
            correct += 1
    accuracy = correct / len(eval_idx)
    (out / "report.tsv").write_text(f"vqa_top1\teval\t{accuracy:.6f}\n")
    save_checkpoint(out / "model.ckpt", cfg.model, model.store)
    print(f"vqa_top1\teval\t{accuracy:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videotext",
        description="toy video-text contrastive captioner workbench",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_data=False, needs_ckpt=False):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE"
        )
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory")
        if needs_ckpt:
            p.add_argument("--ckpt", default=None, help="model checkpoint")

    common(sub.add_parser("gen-data", help="generate the synthetic corpus"))
    p = sub.add_parser("train", help="train on a generated corpus")
    common(p, needs_data=True)
    p.add_argument("--cache", default=None, help="embedding cache (LiT only)")
    p = sub.add_parser("precompute-cache", help="precompute frame embeddings")
    common(p, needs_data=True, needs_ckpt=True)
    common(sub.add_parser("eval-cls", help="zero-shot classification"), True, True)
    common(sub.add_parser("eval-retrieval", help="bidirectional retrieval"), True, True)
    common(sub.add_parser("eval-caption", help="caption generation quality"), True, True)
    p = sub.add_parser("ablate-frames", help="vary the sampled frame count")
    common(p, needs_data=True, needs_ckpt=True)
    p.add_argument("--t-list", default="1,2,4,8")
    common(sub.add_parser("vqa-train", help="train the answer head"), True, True)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "precompute-cache": cmd_precompute_cache,
    "eval-cls": cmd_eval_cls,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-caption": cmd_eval_caption,
    "ablate-frames": cmd_ablate_frames,
    "vqa-train": cmd_vqa_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.subcommand](args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
