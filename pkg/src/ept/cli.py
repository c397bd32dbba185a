"""Command-line interface: one subcommand per pipeline stage plus runners."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classify, core, encode, normalize, pipeline, trajpool, videopool
from .core import Direction, PoolingKind
from .errors import EptError, ValidationError


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ept",
        description="Trajectory-aligned pooling of feature-map volumes with rank pooling, "
        "Fisher Vector encoding, video-level pooling, and linear classification.",
        epilog="The EPT_THREADS environment variable caps worker threads.",
    )
    parser.add_argument("--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="normalize a feature-map volume")
    p.add_argument("--kind", choices=["in-channel", "in-voxel"], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("traj-pool", help="pool trajectories into descriptors")
    p.add_argument("--kind", choices=[k.value for k in PoolingKind], required=True)
    p.add_argument("--direction", choices=[d.value for d in Direction], default="forward")
    p.add_argument("--window", type=int, default=1, help="cell window side length (odd)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--volume", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-pca", help="fit the PCA part of an encoding model")
    p.add_argument("--descriptors", nargs="+", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--max-samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-gmm", help="fit the mixture part of an encoding model")
    p.add_argument("--model", required=True, help="model file holding the fitted PCA")
    p.add_argument("--descriptors", nargs="+", required=True)
    p.add_argument("--components", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="encode descriptors as Fisher Vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--per-frame", action="store_true",
                   help="one row per frame instead of a single aggregate row")
    p.add_argument("--frames", type=int, default=None,
                   help="frame count; defaults to max assigned frame + 1")
    p.add_argument("--out", required=True)

    p = sub.add_parser("video-pool", help="pool per-frame Fisher Vectors into one vector")
    p.add_argument("--method", choices=["ap", "hap", "rp"], required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--direction", choices=[d.value for d in Direction], default="forward")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fuse", help="fuse unit-norm video vectors by kernel averaging")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", type=float, nargs="+", default=None)
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("train", help="train one-vs-all linear SVMs on video vectors")
    p.add_argument("--c", type=float, default=100.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--features", nargs="+", required=True,
                   help="video vector files; video ids are the file stems")
    p.add_argument("--labels", required=True)
    p.add_argument("--model-out", required=True)

    p = sub.add_parser("predict", help="write per-video class probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate predictions on the test split")
    p.add_argument("--metric", choices=["map", "top1"], required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", default=None, help="report file prefix (.txt and .kv)")

    p = sub.add_parser("synth", help="run the synthetic order-discrimination experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--videos-per-class", type=int, default=8)
    p.add_argument("--trajectories-per-video", type=int, default=40)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--pca-dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--data-only", action="store_true",
                   help="generate the dataset files without running the pipelines")

    p = sub.add_parser("run", help="run the full pipeline on a data directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--data-dir", required=True,
                   help="directory with <id>.eptv, <id>.eptt, and labels.txt")
    p.add_argument("--out", required=True, help="working directory for artifacts and reports")
    for flag, kind in (
        ("--normalization", str), ("--pooling", str), ("--window-cells", int),
        ("--rank-lambda", float), ("--pca-dim", int), ("--pca-max-samples", int),
        ("--gmm-components", int), ("--video-method", str), ("--hap-window", int),
        ("--hap-stride", int), ("--svm-c", float), ("--metric", str), ("--seed", int),
    ):
        p.add_argument(flag, type=kind, default=None)
    return parser


def _read_features(paths):
    ids = [Path(p).stem for p in paths]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate video ids among feature files")
    rows = [videopool.load_video_vector(p) for p in paths]
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise ValidationError(f"feature files have mismatched dimensions: {sorted(dims)}")
    return ids, np.stack(rows)


def _write_report(report, out_prefix):
    text = report.to_text()
    print(text)
    if out_prefix:
        Path(f"{out_prefix}.txt").write_text(text + "\n")
        Path(f"{out_prefix}.kv").write_text(report.to_key_values() + "\n")


def _cmd_normalize(args):
    volume = core.read_volume(args.input)
    core.write_volume(normalize.normalize_volume(volume, args.kind), args.out)


def _cmd_traj_pool(args):
    volume = core.read_volume(args.volume)
    trajectories = core.read_trajectories(args.trajectories, volume)
    config = trajpool.RankPoolConfig(
        lambda_=args.lambda_, max_iters=args.max_iters, tolerance=args.tolerance,
        direction=args.direction,
    )
    dset = trajpool.pool_trajectories(
        volume, trajectories, args.kind, direction=Direction(args.direction),
        window_cells=args.window, rank_config=config, threads=args.threads,
    )
    trajpool.write_descriptors(dset, args.out)


def _stack_descriptor_vectors(paths):
    stacks = [trajpool.read_descriptors(p).vectors for p in paths]
    nonempty = [s for s in stacks if len(s)]
    if not nonempty:
        raise ValidationError("descriptor files contain no rows")
    return np.concatenate(nonempty, axis=0)


def _cmd_fit_pca(args):
    samples = _stack_descriptor_vectors(args.descriptors)
    pca = encode.fit_pca(samples, args.dim, max_samples=args.max_samples, seed=args.seed)
    encode.save_model(encode.EncodingModel(pca=pca), args.out)


def _cmd_fit_gmm(args):
    model = encode.load_model(args.model)
    samples = _stack_descriptor_vectors(args.descriptors)
    projected = encode.pca_transform(model.pca, samples)
    gmm = encode.fit_gmm(projected, args.components, seed=args.seed,
                         max_iters=args.max_iters, tol=args.tol)
    encode.save_model(encode.EncodingModel(pca=model.pca, gmm=gmm), args.out)


def _cmd_encode(args):
    model = encode.load_model(args.model)
    dset = trajpool.read_descriptors(args.descriptors)
    if args.per_frame:
        frames = args.frames
        if frames is None:
            frames = int(dset.assigned_frames.max()) + 1 if len(dset) else 1
        values = encode.frame_fisher_vectors(model, dset, frames)
    else:
        projected = encode.pca_transform(model.pca, dset.vectors) if len(dset) else dset.vectors
        values = encode.fisher_vector(model.gmm, projected).values[None, :]
    encode.save_frame_fvs(values, args.out)


def _cmd_video_pool(args):
    frames = encode.load_frame_fvs(args.input)
    if args.method == "ap":
        vector = videopool.video_ap(frames, alpha=args.alpha)
    elif args.method == "hap":
        vector = videopool.video_hap(frames, window=args.window, stride=args.stride,
                                     alpha=args.alpha)
    else:
        vector = videopool.video_rp(frames, direction=Direction(args.direction),
                                    alpha=args.alpha)
    if vector.warning:
        print(f"warning: {vector.warning}", file=sys.stderr)
    videopool.save_video_vector(vector, args.out)


def _cmd_fuse(args):
    blocks = [
        videopool.VideoVector(values=videopool.load_video_vector(p),
                              provenance=videopool.Provenance.FUSED)
        for p in args.inputs
    ]
    videopool.save_video_vector(videopool.fuse(blocks, weights=args.weights), args.out)


def _cmd_train(args):
    ids, features = _read_features(args.features)
    table = core.read_label_table(args.labels)
    train_ids = [v for v in ids if table.entries.get(v) and table.entries[v].split == "train"]
    if not train_ids:
        raise ValidationError("no feature files belong to the training split")
    rows = features[[ids.index(v) for v in train_ids]]
    labels = table.single_labels(train_ids)
    model = classify.train_ovr(rows, labels, C=args.c, tol=args.tol, max_iters=args.max_iters)
    classify.save_svm_model(model, args.model_out)
    print(f"trained {model.n_classes} one-vs-all classifiers on {len(train_ids)} videos")


def _cmd_predict(args):
    model = classify.load_svm_model(args.model)
    ids, features = _read_features(args.features)
    probs = classify.predict_probs(model, features)
    lines = [f"{vid} " + " ".join(repr(float(p)) for p in row)
             for vid, row in zip(ids, probs)]
    Path(args.out).write_text("\n".join(lines) + "\n")


def _read_predictions(path):
    ids, rows = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) < 2:
                raise ValidationError(f"malformed prediction line {lineno}")
            ids.append(tokens[0])
            rows.append([float(t) for t in tokens[1:]])
    return ids, np.array(rows)


def _cmd_eval(args):
    ids, scores = _read_predictions(args.predictions)
    table = core.read_label_table(args.labels)
    test_ids = [v for v in ids if v in table.entries and table.entries[v].split == "test"]
    if not test_ids:
        raise ValidationError("no predictions belong to the test split")
    rows = scores[[ids.index(v) for v in test_ids]]
    if args.metric == "top1":
        report = classify.top1_accuracy(rows, table.single_labels(test_ids))
    else:
        report = classify.mean_average_precision(rows, table.positives_matrix(test_ids))
    _write_report(report, args.out)


def _cmd_synth(args):
    out = Path(args.out)
    if args.data_only:
        pipeline.write_synth_dataset(
            out / "data", args.seed, args.videos_per_class, args.trajectories_per_video,
            args.length, args.dim, args.noise,
        )
        print(f"wrote synthetic dataset under {out / 'data'}")
        return
    rank_report, average_report = pipeline.synth_experiment(
        seed=args.seed, workdir=out, videos_per_class=args.videos_per_class,
        trajectories_per_video=args.trajectories_per_video, length=args.length,
        dim=args.dim, gmm_components=args.components, pca_dim=args.pca_dim,
        noise_scale=args.noise,
    )
    print((out / "experiment.kv").read_text().strip())
    print(f"rank-pooled accuracy {rank_report.mean_value:.3f}, "
          f"averaging baseline {average_report.mean_value:.3f}")


def _cmd_run(args):
    file_values = None
    if args.config:
        file_values = json.loads(Path(args.config).read_text())
    overrides = {
        "normalization": args.normalization,
        "pooling": args.pooling,
        "window_cells": args.window_cells,
        "rank_lambda": args.rank_lambda,
        "pca_dim": args.pca_dim,
        "pca_max_samples": args.pca_max_samples,
        "gmm_components": args.gmm_components,
        "video_method": args.video_method,
        "hap_window": args.hap_window,
        "hap_stride": args.hap_stride,
        "svm_c": args.svm_c,
        "metric": args.metric,
        "seed": args.seed,
    }
    config = pipeline.PipelineConfig.from_sources(file_values=file_values, overrides=overrides)
    volume_paths, trajectory_paths, labels_path = pipeline.discover_dataset(args.data_dir)
    report = pipeline.run_pipeline(config, volume_paths, trajectory_paths,
                                   labels_path, args.out)
    print(report.to_text())


_COMMANDS = {
    "normalize": _cmd_normalize,
    "traj-pool": _cmd_traj_pool,
    "fit-pca": _cmd_fit_pca,
    "fit-gmm": _cmd_fit_gmm,
    "encode": _cmd_encode,
    "video-pool": _cmd_video_pool,
    "fuse": _cmd_fuse,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "run": _cmd_run,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except (EptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
