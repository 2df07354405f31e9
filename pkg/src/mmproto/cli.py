"""Command-line entry point: corpus generation, pretraining, probes,
Sinkhorn demo, and gradient verification.

Every run writes a JSON manifest next to its primary output with the fully
resolved configuration, so any result can be reproduced from the manifest
alone. Exit codes: 0 success, 1 I/O error, 2 usage error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .data import (ConfigurationError, CorpusSpec, FormatError, generate,
                   load_corpus, save_corpus)
from .evaluation import cluster_agreement, knn_probe, linear_probe
from .gradcheck import TOLERANCE, run_suite
from .sinkhorn import SinkhornConfig, compute_codes, converged_config
from .trainer import (NumericalAbort, TrainConfig, config_from_dict,
                      config_from_text, config_to_text, load_checkpoint,
                      save_checkpoint, train)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _write_manifest(path, command: str, config: dict, paths: dict, seed):
    manifest = {"command": command, "config": config, "paths": paths,
                "seed": seed, "version": __version__}
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmproto",
        description="Two-modality swapped-prediction clustering engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    g.add_argument("--n", type=int, default=2000,
                   help="number of samples (default: %(default)s)")
    g.add_argument("--clusters", type=int, default=8,
                   help="latent clusters (default: %(default)s)")
    g.add_argument("--latent-dim", type=int, default=16,
                   help="latent dimensionality (default: %(default)s)")
    g.add_argument("--d1", type=int, default=32,
                   help="modality-1 dimensionality (default: %(default)s)")
    g.add_argument("--d2", type=int, default=32,
                   help="modality-2 dimensionality (default: %(default)s)")
    g.add_argument("--sigma", type=float, default=0.05,
                   help="gaussian noise level (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0,
                   help="generator seed (default: %(default)s)")
    g.add_argument("--out", required=True, help="output corpus path")

    defaults = TrainConfig()
    p = sub.add_parser("pretrain", help="train encoder and prototypes")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--metrics", help="append-only metrics file (JSON lines)")
    p.add_argument("--epochs", type=int,
                   help=f"training epochs (default: {defaults.epochs})")
    p.add_argument("--batch-size", type=int,
                   help=f"batch size (default: {defaults.batch_size})")
    p.add_argument("--lr", type=float,
                   help=f"base learning rate (default: {defaults.base_lr})")
    p.add_argument("--momentum", type=float,
                   help=f"SGD momentum (default: {defaults.momentum})")
    p.add_argument("--k", type=int,
                   help=f"number of prototypes (default: {defaults.k_prototypes})")
    p.add_argument("--temperature", type=float,
                   help=f"softmax temperature (default: {defaults.loss.temperature})")
    p.add_argument("--epsilon", type=float,
                   help="Sinkhorn regularization "
                        f"(default: {defaults.loss.sinkhorn.epsilon})")
    p.add_argument("--queue-length", type=int,
                   help=f"feature queue capacity (default: {defaults.loss.queue_length})")
    p.add_argument("--embed-dim", type=int,
                   help=f"embedding dimensionality (default: {defaults.encoder.embed_dim})")
    p.add_argument("--hidden-dims",
                   help="comma-separated hidden widths "
                        f"(default: {','.join(map(str, defaults.encoder.hidden_dims))})")
    p.add_argument("--seed", type=int,
                   help=f"training seed (default: {defaults.seed})")
    p.add_argument("--stop-after", type=int,
                   help="stop after this many total steps, keeping the "
                        "full schedule; resume later with --resume "
                        "(default: run to completion)")

    r = sub.add_parser("probe", help="evaluate a checkpoint")
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--data", required=True, help="labeled corpus file")
    r.add_argument("--probe", required=True,
                   choices=["linear", "knn", "cluster"],
                   help="probe kind")
    r.add_argument("--seed", type=int, default=0,
                   help="train/test split seed (default: %(default)s)")
    r.add_argument("--modality", default="m1", choices=["m1", "m2", "both"],
                   help="embeddings to probe (default: %(default)s)")
    r.add_argument("--knn-k", type=int, default=5,
                   help="neighbors for the knn probe (default: %(default)s)")
    r.add_argument("--results", help="append report to this file")

    c = sub.add_parser("codes", help="Sinkhorn demo on a CSV score matrix")
    c.add_argument("--scores", required=True,
                   help="CSV file, one score row per line")
    c.add_argument("--epsilon", type=float, default=0.05,
                   help="entropy regularization (default: %(default)s)")
    c.add_argument("--iters", type=int, default=3,
                   help="normalization sweeps (default: %(default)s)")
    c.add_argument("--converged", action="store_true",
                   help="iterate to the fixed point instead of --iters")

    d = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    d.add_argument("--seed", type=int, default=0,
                   help="suite seed (default: %(default)s)")
    d.add_argument("--perturb", default=None,
                   help="testing hook: corrupt the named op's gradient")
    return parser


def _flags_to_config(args) -> tuple[TrainConfig, dict]:
    """Resolve defaults < --config file < inline flags; returns the config
    and the set of inline overrides for the manifest."""
    kv: dict = {}
    if args.config:
        base = config_from_text(open(args.config).read())
        kv = {k: v for k, v in
              (line.split("=", 1) for line in
               config_to_text(base).strip().splitlines())}
    overrides = {}
    flag_map = {
        "epochs": "epochs", "batch_size": "batch_size", "lr": "base_lr",
        "momentum": "momentum", "k": "k_prototypes",
        "temperature": "loss.temperature", "epsilon": "loss.sinkhorn.epsilon",
        "queue_length": "loss.queue_length",
        "embed_dim": "encoder.embed_dim", "hidden_dims": "encoder.hidden_dims",
        "seed": "seed",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            kv[key] = str(value)
            overrides[key] = str(value)
    return config_from_dict(kv), overrides


def _cmd_gen_data(args) -> int:
    spec = CorpusSpec(n_samples=args.n, n_latent_clusters=args.clusters,
                      latent_dim=args.latent_dim, d1=args.d1, d2=args.d2,
                      noise_sigma=args.sigma, seed=args.seed)
    corpus = generate(spec)
    save_corpus(corpus, args.out)
    _write_manifest(
        args.out + ".manifest.json", "gen-data",
        {"n": args.n, "clusters": args.clusters,
         "latent_dim": args.latent_dim, "d1": args.d1, "d2": args.d2,
         "sigma": args.sigma}, {"out": args.out}, args.seed)
    print(f"wrote {args.out}: {corpus.n_samples} samples, "
          f"dims {args.d1}/{args.d2}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    config, overrides = _flags_to_config(args)
    corpus = load_corpus(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        config = resume.config

    sink = None
    metrics_file = None
    if args.metrics:
        metrics_file = open(args.metrics, "a")

        def sink(record):
            metrics_file.write(json.dumps(record.to_dict()) + "\n")

    # adopt the corpus dimensionality unless explicitly configured
    d1, d2 = corpus.modality1.shape[1], corpus.modality2.shape[1]
    if config.encoder.input_dims != (d1, d2):
        from dataclasses import replace
        config = replace(config, encoder=replace(
            config.encoder, input_dims=(d1, d2)))

    try:
        ckpt, metrics = train(corpus, config, resume_from=resume,
                              metrics_sink=sink, stop_after=args.stop_after)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if metrics_file:
            metrics_file.close()

    save_checkpoint(ckpt, args.out)
    _write_manifest(
        args.out + ".manifest.json", "pretrain",
        {"resolved": config_to_text(config).strip().splitlines(),
         "inline_overrides": overrides},
        {"data": args.data, "out": args.out, "config": args.config,
         "resume": args.resume, "metrics": args.metrics}, config.seed)
    final = metrics[-1] if metrics else None
    if final:
        print(f"trained {len(metrics)} steps; final loss {final.loss:.6f}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    if args.probe == "linear":
        report = linear_probe(ckpt, corpus, args.seed, args.modality)
    elif args.probe == "knn":
        report = knn_probe(ckpt, corpus, args.knn_k, args.seed, args.modality)
    else:
        report = cluster_agreement(ckpt, corpus)
    line = json.dumps(report.to_dict(), sort_keys=True)
    print(line)
    if args.results:
        with open(args.results, "a") as f:
            f.write(line + "\n")
    return EXIT_OK


def _cmd_codes(args) -> int:
    scores = np.loadtxt(args.scores, delimiter=",", ndmin=2)
    if args.converged:
        config = converged_config(args.epsilon)
    else:
        config = SinkhornConfig(epsilon=args.epsilon,
                                n_iterations=args.iters)
    codes = compute_codes(scores, config)
    for row in codes.q:
        print(",".join(f"{v:.9g}" for v in row))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, perturb=args.perturb)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.op:<20s} max_rel_err={r.max_relative_error:.3e}")
        ok = ok and r.passed
    print(f"gradcheck: {'all gradients within' if ok else 'exceeded'} "
          f"tolerance {TOLERANCE}")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE

    handlers = {"gen-data": _cmd_gen_data, "pretrain": _cmd_pretrain,
                "probe": _cmd_probe, "codes": _cmd_codes,
                "gradcheck": _cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, (FormatError,)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
