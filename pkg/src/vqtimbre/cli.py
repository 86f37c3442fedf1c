"""Command-line entry point: ``vqtimbre <command> [options]``.

Every command writes into ``--out`` using a fixed layout::

    checkpoints/  model checkpoints (.ckpt)
    audio/        rendered WAV files
    logs/         training log CSV
    reports/      maps, code sequences, evaluation tables

Exit codes: 0 success, 1 usage error (bad flags, missing config or
checkpoint), 2 data error (unreadable audio, corrupt checkpoint, empty
corpus), 3 numeric failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import audio, checkpoint, dsp, evalharness, transfer, trainer
from .config import ConfigError, RunConfig
from .model import NonFiniteLoss, TimbreModel
from .tensor import NonFiniteGradient

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("vqtimbre")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(path, *subdirs) -> Path:
    out = Path(path)
    for sub in subdirs:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig.parse("", overrides=args.set)
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return RunConfig.load(args.config, args.set)


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return checkpoint.load_model(path)


def _read_input(path) -> np.ndarray:
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")
    w, _ = audio.read_wav(path)
    return w


def _training_sources(run: dict) -> list:
    if run["corpus"]:
        return [p.strip() for p in run["corpus"].split(",") if p.strip()]
    choice = run["synth_class"] or "all"
    names = [r.name for r in evalharness.RECIPES]
    if choice != "all" and choice not in names:
        raise UsageError(f"synth_class must be 'all' or one of {names}, got {choice!r}")
    synth = evalharness.synth_corpus(len(names), run["synth_seconds"], run["synth_seed"])
    return [(n, w) for n, w in zip(synth.names, synth.audio) if choice in ("all", n)]


# -- commands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for key in ("iters", "synth_class", "corpus", "lr", "batch", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={','.join(value) if isinstance(value, list) else value}")
    args.set = overrides
    cfg = _load_config(args)
    if args.resume is not None and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    out = _out_dir(args.out, "checkpoints", "logs")
    model_cfg = cfg.model.baseline() if args.baseline else cfg.model
    model = TimbreModel(model_cfg, cfg.train.seed)
    percep = None
    if cfg.run["percep_weights"]:
        from .percepdist import load_weights
        percep = load_weights(cfg.run["percep_weights"])
    corpus = trainer.build_corpus(_training_sources(cfg.run), cfg.run["split_frac"], cfg.train.seed)
    train_s, test_s = corpus.seconds
    log.info("corpus: %.1f s train, %.1f s test, %d skipped", train_s, test_s, len(corpus.skipped))
    every = max(1, cfg.train.iters // 20)

    def report(row):
        if row["iter"] % every == 0:
            log.info("iter %d  stft %.4f  total %.4f  codes %d", row["iter"], row["stft"], row["total"],
                     row["codes_used"])

    (out / "logs" / "config.txt").write_text(cfg.dumps())
    result = trainer.train(model, corpus, cfg.train, out, resume=args.resume, percep=percep, callback=report,
                           extra={"run_config": cfg.to_dict()})
    export = checkpoint.save_model(out / "checkpoints" / "model.ckpt", model, step=result.step,
                                   extra={"run_config": cfg.to_dict()})
    print(f"trained {result.step} steps; checkpoint {export}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    w = _read_input(args.input)
    out = _out_dir(args.out, "audio", "reports")
    res = transfer.transfer(w, model, seed=args.seed, silence_db=None)
    stem = Path(args.input).stem
    audio.write_wav(out / "audio" / f"{stem}_recon.wav", res.waveform, model.config.sample_rate)
    lsd = dsp.lsd(w[:res.waveform.size], res.waveform)
    with open(out / "reports" / f"{stem}_recon.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([["input", "lsd"], [args.input, repr(lsd)]])
    print(f"LSD {lsd:.4f}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    w = _read_input(args.input)
    out = _out_dir(args.out, "audio", "reports")
    res = transfer.transfer(w, model, seed=args.seed)
    stem = Path(args.input).stem
    audio.write_wav(out / "audio" / f"{stem}_transfer.wav", res.waveform, model.config.sample_rate)
    with open(out / "reports" / f"{stem}_codes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "code_index", "gain"])
        for i, g in enumerate(res.gains):
            code = -1 if res.indices is None else int(res.indices[i])
            writer.writerow([i, code, repr(float(g))])
    print(f"wrote {out / 'audio' / (stem + '_transfer.wav')}")
    return EXIT_OK


def cmd_map(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    out = _out_dir(args.out, "reports")
    dmap = transfer.map_codebook(model, args.descriptor, args.length, seed=args.seed)
    path = out / "reports" / f"map_{args.descriptor}.csv"
    dmap.to_csv(path)
    print(f"{int(dmap.valid.sum())}/{len(dmap)} codes mapped; wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    if (args.ramp is None) == (args.targets is None):
        raise UsageError("give exactly one of --ramp or --targets")
    try:
        targets = transfer.parse_ramp(args.ramp) if args.ramp else transfer.read_targets_csv(args.targets)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out, "audio", "reports")
    if args.map:
        dmap = transfer.DescriptorMap.from_csv(args.map)
        if dmap.descriptor != args.descriptor:
            raise UsageError(f"map is for {dmap.descriptor!r}, not {args.descriptor!r}")
    else:
        dmap = transfer.map_codebook(model, args.descriptor, seed=args.seed)
        dmap.to_csv(out / "reports" / f"map_{args.descriptor}.csv")
    res = transfer.synth_from_targets(targets, dmap, model, seed=args.seed)
    audio.write_wav(out / "audio" / f"synth_{args.descriptor}.wav", res.waveform, model.config.sample_rate)
    transfer.write_synthesis_csv(out / "reports" / f"synth_{args.descriptor}.csv", res)
    ok = np.isfinite(res.achieved)
    if ok.sum() >= 2 and np.ptp(res.targets[ok]) > 0:
        rho = spearmanr(res.targets[ok], res.achieved[ok]).statistic
        print(f"Spearman(target, achieved) = {rho:.3f} over {int(ok.sum())} frames")
    print(f"code sequence: {' '.join(str(int(k)) for k in res.indices)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    names = [r.name for r in evalharness.RECIPES]
    if len(args.models) != len(names):
        raise UsageError(f"--models needs one checkpoint per class ({', '.join(names)})")
    if args.baselines and len(args.baselines) != len(names):
        raise UsageError(f"--baselines needs one checkpoint per class ({', '.join(names)})")
    vq = [_load_checkpoint(p)[0] for p in args.models]
    base = [_load_checkpoint(p)[0] for p in args.baselines or []]
    out = _out_dir(args.out, "reports")
    run = cfg.run
    synth = evalharness.synth_corpus(len(names), run["synth_seconds"], run["synth_seed"])
    splits = [trainer.build_corpus([(n, w)], run["split_frac"], cfg.train.seed)
              for n, w in zip(synth.names, synth.audio)]
    clf, clf_report = evalharness.train_classifier([s.train for s in splits], [s.test for s in splits],
                                                   evalharness.ClassifierConfig(seed=cfg.train.seed))
    print(f"classifier held-out frame accuracy {clf_report.accuracy:.4f}")
    tables = []
    for label, models in (("vq-vae", vq), ("baseline", base)):
        if not models:
            continue
        report = evalharness.transfer_report(label, models, synth.names, [s.test for s in splits], clf,
                                             cfg.train.seed)
        report.to_csv(out / "reports" / f"eval_{label}.csv")
        tables.append(report.to_table())
    text = "\n\n".join(tables) + "\n"
    (out / "reports" / "eval_table.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, meta, arrays = _load_checkpoint(args.checkpoint)
    info = {"meta": meta, "parameters": model.parameter_count(),
            "tensors": {k: list(v.shape) for k, v in sorted(arrays.items())}}
    if model.codebook is not None:
        usage = model.codebook.usage_counts
        order = np.argsort(-usage, kind="stable")
        info["codebook"] = {"size": model.codebook.size, "used": int(np.count_nonzero(usage)),
                            "usage": {int(k): int(usage[k]) for k in order if usage[k] > 0}}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqtimbre", description="Vector-quantized noise-filtering timbre model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=False, ckpt=True, out=True):
        if config:
            p.add_argument("--config", help="key = value run configuration file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if ckpt:
            p.add_argument("--checkpoint", required=True)
        if out:
            p.add_argument("--out", default="run", help="output directory (default: run)")
        p.add_argument("--seed", type=int, default=0, help="noise seed")

    p = sub.add_parser("train", help="train a model")
    common(p, config=True, ckpt=False)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--synth-class", dest="synth_class", help="bundled synthetic class name or 'all'")
    p.add_argument("--corpus", nargs="+", help="WAV files to train on instead of the synthetic corpus")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--baseline", action="store_true", help="train the auto-encoder without quantization")
    p.set_defaults(func=cmd_train)
    p.set_defaults(seed=None)

    p = sub.add_parser("reconstruct", help="auto-encode a WAV file and report LSD")
    common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("transfer", help="transfer a WAV file into the model's timbre")
    common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("map-descriptors", help="map every codebook entry to a descriptor value")
    common(p)
    p.add_argument("--descriptor", default="centroid", choices=sorted(dsp.DESCRIPTORS))
    p.add_argument("--length", type=int, default=transfer.MAP_LENGTH, help="frames decoded per code")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("synth-descriptor", help="synthesize from a descriptor target sequence")
    common(p)
    p.add_argument("--descriptor", default="centroid", choices=sorted(dsp.DESCRIPTORS))
    p.add_argument("--ramp", help="start:end:steps")
    p.add_argument("--targets", help="CSV with a 'target' column")
    p.add_argument("--map", help="descriptor map CSV (computed when omitted)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="transfer benchmark on the synthetic classes")
    common(p, config=True, ckpt=False)
    p.add_argument("--models", nargs="+", required=True, help="one VQ checkpoint per class, in class order")
    p.add_argument("--baselines", nargs="+", help="one baseline checkpoint per class, in class order")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint metadata and codebook usage")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (audio.WavError, checkpoint.CheckpointError, trainer.CorpusError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
