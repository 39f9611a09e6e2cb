"""Experiment runner CLI.

Subcommands: gen-synth, init-codebook, train, eval, export-assignments,
word-contributions, confusion-diff, fuse-scores. Every command is
deterministic given --seed; execution is serial throughout, so
--deterministic only records intent. Failures exit nonzero with a
machine-readable "error<TAB>category<TAB>message" line on stderr.
"""

import argparse
import json
import struct
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import analysis, data_io, evaluation, fusion, synthetic, training
from .aggregation import pool_descriptor
from .codebook import kmeans_init
from .errors import ConfigError, ManifestError, VladError
from .features import FeatureMap
from .fusion import ScoreVector
from .training import TrainConfig

DESCRIPTOR_SAMPLE_LIMIT = 100_000

ASSIGN_MAGIC = b"AVA1"


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="assert deterministic execution (always true: runs are serial and seeded)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vladpool",
        description="Learnable VLAD pooling over video feature maps: "
        "codebook building, two-stage training, evaluation and analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic sub-action benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=12)
    p.add_argument("--words-per-class", type=int, default=3)
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--locations", type=int, default=9)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--train-per-class", type=int, default=40)
    p.add_argument("--val-per-class", type=int, default=10)
    p.add_argument(
        "--two-stream", action="store_true",
        help="also generate a second feature stream and a paired manifest",
    )
    _add_seed(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("init-codebook", help="k-means initialize a codebook checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--k", type=int, default=64, help="codebook size")
    p.add_argument("--alpha", type=float, default=1000.0, help="assignment sharpness")
    p.add_argument("--pooling", choices=["vlad", "avg", "max"], default="vlad")
    p.add_argument(
        "--fusion", choices=["none", "concat", "early"], default="none",
        help="cluster the feature space that will actually be pooled",
    )
    p.add_argument("--stream", choices=["a", "b"], default="a")
    _add_seed(p)
    p.set_defaults(func=cmd_init_codebook)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint-in", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--epochs", type=int, default=None, help="override stage epoch count")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--accumulation-steps", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--lr", type=float, default=None, help="override the stage learning rate")
    p.add_argument("--pooling", choices=["vlad", "avg", "max"], default=None)
    p.add_argument("--tie-anchors", action="store_true",
                   help="keep assignment anchors tied to residual anchors in stage 2")
    p.add_argument("--metrics-out", default=None, help="write metrics lines to this file")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval",
        help="evaluate a checkpoint on a manifest split",
        description="Evaluate a checkpoint: accuracy, per-class accuracy, a "
        "confusion matrix, and one-vs-rest mean/weighted average precision. "
        "AP uses the all-points (interpolation-free) definition: the mean of "
        "precision at each positive's rank, ties broken by input order.",
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--checkpoint-b", default=None, help="second-stream checkpoint for late fusion")
    p.add_argument("--split", choices=list(data_io.SPLITS), default="test")
    p.add_argument("--pooling", choices=["vlad", "avg", "max"], default=None,
                   help="override the pooling mode stored in the checkpoint")
    p.add_argument("--fusion", choices=["none", "concat", "early", "late"], default=None)
    p.add_argument("--fusion-weight", type=float, default=0.5)
    p.add_argument("--multicrop", action="store_true",
                   help="pool sibling crop files <stem>.crop*<suffix> together with each video")
    p.add_argument("--external-scores", default=None,
                   help="score file fused into model scores by min-max weighted average")
    p.add_argument("--score-kind", choices=["prob", "logit"], default="prob",
                   help="score values used for reports and fusion")
    p.add_argument("--out", default=None, help="write the JSON report here")
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-assignments", help="write per-video argmax assignment maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=list(data_io.SPLITS) + ["all"], default="all")
    p.add_argument("--format", choices=["text", "binary"], default="text")
    _add_seed(p)
    p.set_defaults(func=cmd_export_assignments)

    p = sub.add_parser("word-contributions",
                       help="rank codebook words by their contribution to a class logit")
    p.add_argument("--features", required=True, help="feature file of one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-index", type=int, required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_word_contributions)

    p = sub.add_parser("confusion-diff",
                       help="row-normalized difference of two report confusion matrices")
    p.add_argument("--report-a", required=True, help="JSON report (e.g. VLAD run)")
    p.add_argument("--report-b", required=True, help="JSON report (e.g. baseline run)")
    p.add_argument("--out", required=True, help="output TSV matrix")
    p.set_defaults(func=cmd_confusion_diff)

    p = sub.add_parser("fuse-scores", help="weighted average of two per-video score files")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--weight", type=float, default=0.5,
                   help="weight of the first score file in [0, 1]")
    p.add_argument("--min-max", action="store_true",
                   help="min-max normalize both sides per video before averaging "
                        "(use for externally computed raw scores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse_scores)

    return parser


def cmd_gen_synth(args):
    cfg = synthetic.SynthConfig(
        num_classes=args.classes,
        vocab_size=args.vocab_size,
        words_per_class=args.words_per_class,
        frames=args.frames,
        locations=args.locations,
        dim=args.dim,
        noise=args.noise,
        train_per_class=args.train_per_class,
        val_per_class=args.val_per_class,
        seed=args.seed,
    )
    dataset = synthetic.synth_generate(cfg)
    second = None
    if args.two_stream:
        second = synthetic.synth_generate(replace(cfg, seed=args.seed + 1))

    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, videos in (("train", dataset.train), ("val", dataset.val)):
        if second is None:
            pair_source = None
        else:
            pair_source = second.train if split_name == "train" else second.val
        counters = {}
        for index, (feature_map, label) in enumerate(videos):
            counters[label] = counters.get(label, 0) + 1
            stem = f"{split_name}_c{label:02d}_v{counters[label] - 1:03d}"
            rel = f"features/{stem}.avf"
            data_io.write_feature_file(feature_map, out / rel)
            if second is not None:
                rel_b = f"features/{stem}_b.avf"
                data_io.write_feature_file(pair_source[index][0], out / rel_b)
                rows.append((rel, rel_b, label, split_name))
            else:
                rows.append((rel, label, split_name))
    data_io.write_manifest(rows, out / "manifest.tsv")
    meta = {"config": _jsonable(asdict(cfg)), "class_multisets": dataset.class_multisets}
    (out / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} videos to {out / 'manifest.tsv'}")


def _jsonable(mapping):
    out = {}
    for key, value in mapping.items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        out[key] = value
    return out


def _expand_crops(path: Path):
    crops = sorted(path.parent.glob(path.stem + ".crop*" + path.suffix))
    return [path] + crops


def _load_video(entry, fusion_mode: str, stream: str, multicrop: bool) -> FeatureMap:
    paths = _expand_crops(entry.path) if multicrop else [entry.path]
    crops = []
    for path in paths:
        feature_map = data_io.read_feature_file(path)
        if fusion_mode in ("concat", "early"):
            if entry.path_b is None:
                raise ManifestError(
                    f"{entry.path}: {fusion_mode} fusion needs a paired second stream"
                )
            other = data_io.read_feature_file(entry.path_b)
            if fusion_mode == "concat":
                feature_map = fusion.concat_fuse(feature_map, other)
            else:
                feature_map = fusion.early_fuse(feature_map, other)
        elif stream == "b":
            if entry.path_b is None:
                raise ManifestError(f"{entry.path}: manifest has no second stream")
            feature_map = data_io.read_feature_file(entry.path_b)
        crops.append(feature_map)
    return crops[0] if len(crops) == 1 else fusion.multicrop_pool(crops)


def _load_split(manifest, split: str, fusion_mode: str = "none", stream: str = "a",
                multicrop: bool = False):
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"split {split!r} has no videos")
    videos = [
        (_load_video(entry, fusion_mode, stream, multicrop), entry.label)
        for entry in entries
    ]
    ids = [entry.path.stem for entry in entries]
    return videos, ids


def cmd_init_codebook(args):
    if args.k < 1:
        raise ConfigError("--k must be at least 1")
    manifest = data_io.load_manifest(args.manifest)
    videos, _ = _load_split(manifest, "train", args.fusion, args.stream)
    stacks = [feature_map.descriptors for feature_map, _ in videos]
    samples = np.concatenate(stacks, axis=0)
    if samples.shape[0] > DESCRIPTOR_SAMPLE_LIMIT:
        rng = np.random.default_rng(args.seed)
        keep = rng.choice(samples.shape[0], size=DESCRIPTOR_SAMPLE_LIMIT, replace=False)
        samples = samples[np.sort(keep)]
    codebook = kmeans_init(samples, args.k, alpha=args.alpha, seed=args.seed)
    config = TrainConfig(
        alpha=args.alpha,
        num_words=args.k,
        seed=args.seed,
        pooling=args.pooling,
        fusion=args.fusion,
        stream=args.stream,
    )
    data_io.save_checkpoint(args.out, config, codebook)
    print(f"codebook: {args.k} words x {codebook.dim} dims -> {args.out}")


def cmd_train(args):
    manifest = data_io.load_manifest(args.manifest)
    checkpoint = data_io.load_checkpoint(args.checkpoint_in)
    config = checkpoint.config
    overrides = {"seed": args.seed, "tie_assign_anchors": args.tie_anchors}
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.accumulation_steps is not None:
        overrides["accumulation_steps"] = args.accumulation_steps
    if args.dropout is not None:
        overrides["dropout"] = args.dropout
    if args.clip_norm is not None:
        overrides["clip_norm"] = args.clip_norm
    if args.pooling is not None:
        overrides["pooling"] = args.pooling
    if args.epochs is not None:
        overrides["stage1_epochs" if args.stage == 1 else "stage2_epochs"] = args.epochs
    if args.lr is not None:
        overrides["stage1_lr" if args.stage == 1 else "stage2_lr"] = args.lr
    config = replace(config, **overrides).validate()

    train_videos, _ = _load_split(manifest, "train", config.fusion, config.stream)
    try:
        val_videos, _ = _load_split(manifest, "val", config.fusion, config.stream)
    except ConfigError:
        val_videos = []

    if args.stage == 1:
        model, history = training.train_stage1(
            train_videos, checkpoint.codebook, config,
            val_set=val_videos, num_classes=manifest.num_classes,
        )
        codebook = checkpoint.codebook
    else:
        if checkpoint.model is None:
            raise ConfigError(
                "stage 2 requires a stage-1 checkpoint that already has a classifier"
            )
        codebook, model, history = training.train_stage2(
            train_videos, checkpoint.codebook, checkpoint.model, config,
            val_set=val_videos,
        )
    lines = [record.metrics_line() for record in history]
    for line in lines:
        print(line)
    if args.metrics_out:
        Path(args.metrics_out).write_text("\n".join(lines) + ("\n" if lines else ""))
    data_io.save_checkpoint(args.out, config, codebook, model=model)
    print(f"stage {args.stage} checkpoint -> {args.out}")


def _video_scores(feature_map, checkpoint, pooling: str, score_kind: str) -> ScoreVector:
    rep = pool_descriptor(feature_map, checkpoint.codebook, pooling)
    logits = training.classifier_forward(rep, checkpoint.model)
    if score_kind == "prob":
        return ScoreVector(training.softmax(logits), is_probability=True)
    return ScoreVector(logits, is_probability=False)


def cmd_eval(args):
    watch = evaluation.Stopwatch()
    manifest = data_io.load_manifest(args.manifest)
    checkpoint = data_io.load_checkpoint(args.checkpoint)
    if checkpoint.model is None:
        raise ConfigError("checkpoint has no classifier; run training first")
    config = checkpoint.config
    pooling = args.pooling or config.pooling
    fusion_mode = args.fusion if args.fusion is not None else config.fusion
    if not 0.0 <= args.fusion_weight <= 1.0:
        raise ConfigError("--fusion-weight must lie in [0, 1]")

    if fusion_mode == "late":
        if args.checkpoint_b is None:
            raise ConfigError("late fusion needs --checkpoint-b for the second stream")
        checkpoint_b = data_io.load_checkpoint(args.checkpoint_b)
        if checkpoint_b.model is None:
            raise ConfigError("second-stream checkpoint has no classifier")
        videos_a, ids = _load_split(manifest, args.split, "none", "a", args.multicrop)
        videos_b, _ = _load_split(manifest, args.split, "none", "b", args.multicrop)
        score_rows = []
        for (map_a, _), (map_b, _) in zip(videos_a, videos_b):
            sa = _video_scores(map_a, checkpoint, pooling, args.score_kind)
            sb = _video_scores(map_b, checkpoint_b, checkpoint_b.config.pooling, args.score_kind)
            score_rows.append(fusion.late_fuse(sa, sb, args.fusion_weight).values)
        labels = [label for _, label in videos_a]
    else:
        videos, ids = _load_split(
            manifest, args.split, fusion_mode, config.stream, args.multicrop
        )
        score_rows = [
            _video_scores(feature_map, checkpoint, pooling, args.score_kind).values
            for feature_map, _ in videos
        ]
        labels = [label for _, label in videos]

    if args.external_scores:
        external = data_io.read_score_file(args.external_scores)
        fused_rows = []
        for vid, row in zip(ids, score_rows):
            if vid not in external:
                raise ManifestError(f"external scores are missing video {vid!r}")
            fused = fusion.score_fuse_external(
                ScoreVector(row), ScoreVector(external[vid]), args.fusion_weight
            )
            fused_rows.append(fused.values)
        score_rows = fused_rows

    report = evaluation.build_report(
        labels, np.stack(score_rows), split=args.split, wall_time_s=watch.elapsed()
    )
    print(report.to_text())
    if args.out:
        evaluation.save_report(report, args.out)


def cmd_export_assignments(args):
    manifest = data_io.load_manifest(args.manifest)
    checkpoint = data_io.load_checkpoint(args.checkpoint)
    config = checkpoint.config
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest.entries if args.split == "all" else manifest.split(args.split)
    if not entries:
        raise ConfigError(f"split {args.split!r} has no videos")
    for entry in entries:
        feature_map = _load_video(entry, config.fusion, config.stream, False)
        grid = analysis.assignment_map(feature_map, checkpoint.codebook)
        stem = entry.path.stem
        if args.format == "text":
            lines = [" ".join(str(int(v)) for v in row) for row in grid]
            (out_dir / f"{stem}.assign.txt").write_text("\n".join(lines) + "\n")
        else:
            payload = ASSIGN_MAGIC + struct.pack("<II", *grid.shape)
            payload += grid.astype("<u4").tobytes()
            (out_dir / f"{stem}.assign.bin").write_bytes(payload)
    print(f"wrote {len(entries)} assignment maps to {out_dir}")


def cmd_word_contributions(args):
    checkpoint = data_io.load_checkpoint(args.checkpoint)
    if checkpoint.model is None:
        raise ConfigError("checkpoint has no classifier; run training first")
    feature_map = data_io.read_feature_file(args.features)
    order, contributions, bias, logit = analysis.ranked_word_contributions(
        feature_map, checkpoint.codebook, checkpoint.model, args.class_index
    )
    for rank, word in enumerate(order):
        print(f"{rank}\t{int(word)}\t{contributions[word]:.12g}")
    print(f"bias\t{bias:.12g}")
    print(f"logit\t{logit:.12g}")


def cmd_confusion_diff(args):
    matrix_a = evaluation.load_report_confusion(args.report_a)
    matrix_b = evaluation.load_report_confusion(args.report_b)
    diff = evaluation.confusion_diff(matrix_a, matrix_b)
    lines = ["\t".join(f"{v:.9f}" for v in row) for row in diff]
    Path(args.out).write_text("\n".join(lines) + "\n")
    gains = np.argsort(-np.diag(diff), kind="stable")
    top = ", ".join(f"class {c}: {diff[c, c]:+.3f}" for c in gains[:3])
    print(f"largest diagonal gains: {top}")


def cmd_fuse_scores(args):
    scores_a = data_io.read_score_file(args.scores_a)
    scores_b = data_io.read_score_file(args.scores_b)
    if set(scores_a) != set(scores_b):
        raise ManifestError("score files cover different video ids")
    fused = {}
    for vid in scores_a:
        sa, sb = ScoreVector(scores_a[vid]), ScoreVector(scores_b[vid])
        if args.min_max:
            fused[vid] = fusion.score_fuse_external(sa, sb, args.weight).values
        else:
            fused[vid] = fusion.late_fuse(sa, sb, args.weight).values
    data_io.write_score_file(fused, args.out)
    print(f"fused {len(fused)} videos -> {args.out}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except VladError as exc:
        print(f"error\t{exc.category}\t{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
