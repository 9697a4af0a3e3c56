"""Command line entry point: ``wstan <command> [options]``.

Every command reads a flat ``key=value`` config (``--config``) whose keys can
also be given as flags of the same name, e.g. ``--lr 0.01 --cb false``.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import os

# Single-threaded BLAS keeps runs bit-reproducible across machines.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402
from . import pipeline as P  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint  # noqa: E402
from .config import RunConfig  # noqa: E402
from .evaluation import ProtocolError, UndefinedMetricError  # noqa: E402
from .gradcheck import run_suite  # noqa: E402
from .moment_map import InsufficientFramesError, pool_clips  # noqa: E402
from .synth import (CorpusParseError, GenerationError, SamplingError, gen_corpus,  # noqa: E402
                    load_corpus, save_corpus)
from .text import EmptySentenceError, VocabularyError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (OSError, GenerationError, SamplingError, CorpusParseError, CheckpointError,
               P.CompatibilityError, EmptySentenceError, VocabularyError,
               InsufficientFramesError, UndefinedMetricError, ProtocolError,
               json.JSONDecodeError)
NUMERIC_ERRORS = (P.TrainingError, ad.NumericError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class NumericFailure(Exception):
    pass


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    grp = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        grp.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V", default=None)


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return RunConfig.from_mapping(overrides, cfg) if overrides else cfg


def _corpus_files(corpus: Path) -> dict[str, Path]:
    return {"train": corpus / "train.jsonl", "test": corpus / "test.jsonl",
            "fingerprint": corpus / "fingerprint", "config": corpus / "config.txt"}


def _corpus_fingerprint(corpus: Path) -> str:
    return _corpus_files(corpus)["fingerprint"].read_text().strip()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_defaults(args) -> int:
    sys.stdout.write(RunConfig().to_text())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    train, test, _ = gen_corpus(cfg.data_config(), cfg.seed)
    files = _corpus_files(out)
    save_corpus(train, files["train"])
    save_corpus(test, files["test"])
    files["fingerprint"].write_text(cfg.data_fingerprint() + "\n")
    cfg.save(files["config"])
    print(f"wrote {len(train)} train / {len(test)} test episodes to {out} "
          f"(data fingerprint {cfg.data_fingerprint()})")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = Path(args.corpus)
    files = _corpus_files(corpus)
    base = RunConfig.load(files["config"]) if files["config"].exists() else None
    cfg = _resolve_config(args, base)
    if _corpus_fingerprint(corpus) != cfg.data_fingerprint():
        raise P.CompatibilityError(
            f"corpus {corpus} was generated with a different data config "
            f"({_corpus_fingerprint(corpus)} != {cfg.data_fingerprint()})")
    episodes = load_corpus(files["train"])
    log_path = args.log or f"{args.ckpt}.log.csv"

    def progress(epoch, summary, _model):
        print(f"epoch {epoch + 1}/{cfg.epochs}  mil {summary['mil']:.4f}  "
              f"total {summary['total']:.4f}  ({summary['seconds']:.1f}s)", flush=True)

    model, vocab, _ = P.train(cfg, episodes, log_path=log_path, progress=progress)
    P.save_model(args.ckpt, model, vocab, cfg)
    print(f"saved {args.ckpt} ({cfg.variant}, fingerprint {cfg.fingerprint()}); log {log_path}")
    return EXIT_OK


def _metric_paths(prefix: str) -> tuple[str, str, str]:
    return f"{prefix}.csv", f"{prefix}.json", f"{prefix}.predictions.jsonl"


def cmd_eval(args) -> int:
    model, vocab, cfg = P.load_model(args.ckpt)
    corpus = Path(args.corpus)
    _, meta = load_checkpoint(args.ckpt)
    if _corpus_fingerprint(corpus) != meta.get("data_fingerprint"):
        raise P.CompatibilityError(
            f"checkpoint was trained on data {meta.get('data_fingerprint')}, "
            f"corpus {corpus} has {_corpus_fingerprint(corpus)}")
    episodes = load_corpus(_corpus_files(corpus)[args.split])
    result = P.evaluate(model, vocab, episodes, cfg, workers=args.workers)
    csv_path, json_path, pred_path = _metric_paths(args.out)
    result.report.to_csv(csv_path)
    result.report.to_json(json_path)
    P.write_predictions(pred_path, result.predictions)
    print(result.report.summary())
    print(f"wrote {csv_path}, {json_path}, {pred_path}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    corpus = Path(args.corpus)
    cfg = RunConfig.load(_corpus_files(corpus)["config"])
    episodes = load_corpus(_corpus_files(corpus)[args.split])
    report = P.random_baseline(episodes, cfg, seeds=range(args.seeds))
    csv_path, json_path, _ = _metric_paths(args.out)
    report.to_csv(csv_path)
    report.to_json(json_path)
    print(report.summary())
    return EXIT_OK


def load_video(path) -> tuple[np.ndarray, float, bool]:
    """``(features, duration, is_clips)`` from a JSON video file.

    The file holds ``duration`` and either ``clips`` (``N x d_v``) or
    ``frames`` (``T x d_v``, max-pooled to ``N`` clips by the caller).
    """
    data = json.loads(Path(path).read_text())
    if "duration" not in data or ("clips" in data) == ("frames" in data):
        raise CorpusParseError(1, "video file needs 'duration' and exactly one of 'clips'/'frames'")
    key = "clips" if "clips" in data else "frames"
    feats = np.asarray(data[key], dtype=np.float64)
    duration = float(data["duration"])
    if feats.ndim != 2 or duration <= 0:
        raise CorpusParseError(1, f"'{key}' must be a 2-d array and duration positive")
    return feats, duration, key == "clips"


def cmd_infer(args) -> int:
    model, vocab, cfg = P.load_model(args.ckpt)
    feats, duration, is_clips = load_video(args.video)
    clips = feats if is_clips else pool_clips(feats, cfg.n_clips)
    if clips.shape != (cfg.n_clips, cfg.d_v):
        raise CorpusParseError(1, f"expected {cfg.n_clips}x{cfg.d_v} clip features, got "
                                  f"{clips.shape[0]}x{clips.shape[1]}")
    (s, e), score, score_map = P.infer(model, vocab, cfg, clips, duration, args.sentence)
    print(json.dumps({"start": s, "end": e, "score": score, "fingerprint": cfg.fingerprint()}))
    if args.heatmap:
        P.write_pgm(args.heatmap, score_map, cfg.fingerprint())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(points=args.points, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<28} max_rel_err={r.max_error:.3e}  "
              f"points={r.points}  {r.seconds:.2f}s")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericFailure("gradient check failed for: " + ", ".join(r.name for r in failed))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wstan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("defaults", help="print the default config")
    p.set_defaults(fn=cmd_defaults)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="existing output directory")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True, help="directory written by gen-data")
    p.add_argument("--ckpt", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log CSV (default <ckpt>.log.csv)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True, help="prefix for .csv, .json and .predictions.jsonl")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="random-scoring baseline on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("infer", help="ground one sentence in one video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="JSON file with duration and clips or frames")
    p.add_argument("--sentence", required=True)
    p.add_argument("--heatmap", help="write the score map as a P2 PGM image")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="central-difference checks of every operation")
    p.add_argument("--points", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.fn(args)
    except (UsageError, ad.ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, *NUMERIC_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
