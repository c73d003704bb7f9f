"""``lidkit`` command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .config import load_config
from .corpus import SynthSpec, generate_synthetic_corpus, load_manifest
from .errors import ConfigError, DataError, NumericError
from .pipeline import Pipeline, StageError, evaluate_scores, score_records, write_report
from .scores import read_scores_tsv, write_scores_tsv

log = logging.getLogger("lidkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# subcommand -> last pipeline stage it runs
STAGE_COMMANDS = {
    "features": "features",
    "train-ubm": "ubm",
    "stats": "stats",
    "train-tv": "tv",
    "ivectors": "ivectors",
    "train-backend": "backends",
    "fuse": "fusion",
    "run": "eval",
}


def _config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["experiment"]["seed"] = args.seed
    return cfg


def cmd_synth(args):
    if args.config:
        cfg = _config(args)
        s = cfg["synth"]
        seed, out = cfg.seed, args.out or s["out_dir"]
    else:
        s = {"n_languages": args.languages, "languages_per_cluster": args.per_cluster, "train": args.train,
             "dev": args.dev, "eval": args.eval, "min_duration_s": args.min_duration,
             "max_duration_s": args.max_duration, "sample_rate_hz": args.sample_rate}
        seed, out = args.seed or 0, args.out or "corpus"
    try:
        spec = SynthSpec(s["n_languages"], s["languages_per_cluster"],
                         {"train": s["train"], "dev": s["dev"], "eval": s["eval"]},
                         (s["min_duration_s"], s["max_duration_s"]), seed, s["sample_rate_hz"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(generate_synthetic_corpus(spec, out))
    return EXIT_OK


def cmd_stage(args):
    cfg = _config(args)
    pipe = Pipeline(cfg, force=args.force, jobs=args.jobs).run(STAGE_COMMANDS[args.command])
    if args.command == "run":
        with open(pipe.path("report.txt"), encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    else:
        done = ", ".join(pipe.recomputed) or "nothing (all cached)"
        print(f"recomputed: {done}")
    return EXIT_OK


def _records(cfg, manifest, split):
    recs = load_manifest(manifest or cfg.manifest)
    return [r for r in recs if split is None or r.split == split]


def cmd_score(args):
    cfg = _config(args)
    records = _records(cfg, args.manifest, args.split)
    languages = args.languages.split(",") if args.languages else None
    fused, skipped = score_records(cfg, records, args.jobs or os.cpu_count() or 1, languages)
    write_scores_tsv(fused, args.out)
    for utt, reason in skipped.items():
        print(f"skipped {utt}: {reason}", file=sys.stderr)
    print(f"scored {len(fused)} utterances, skipped {len(skipped)}; wrote {args.out}")
    return EXIT_OK


def cmd_eval(args):
    if args.scores is None:
        cfg = _config(args)
        pipe = Pipeline(cfg, force=args.force, jobs=args.jobs).run("eval")
        with open(pipe.path("report.txt"), encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
        return EXIT_OK
    manifest = args.manifest
    if manifest is None:
        manifest = _config(args).manifest
    records = load_manifest(manifest)
    scores = read_scores_tsv(args.scores)
    report = evaluate_scores(scores, records, args.split)
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file")
    common.add_argument("--force", action="store_true", help="recompute cached stages")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="lidkit", description="Spoken language identification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--languages", type=int, default=5)
    p.add_argument("--per-cluster", type=int, default=3)
    p.add_argument("--train", type=int, default=60)
    p.add_argument("--dev", type=int, default=20)
    p.add_argument("--eval", type=int, default=20)
    p.add_argument("--min-duration", type=float, default=3.0)
    p.add_argument("--max-duration", type=float, default=10.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.set_defaults(func=cmd_synth)

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=f"run the pipeline up to the {stage} stage")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("score", parents=[common], help="score audio with the trained system")
    p.add_argument("--manifest", help="manifest to score (default: the experiment manifest)")
    p.add_argument("--split", choices=("train", "dev", "eval"), help="only score this split")
    p.add_argument("--languages", help="comma-separated column order (must match the model)")
    p.add_argument("--out", required=True, help="output score TSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="metrics for a score TSV")
    p.add_argument("--scores", help="score TSV (default: run the pipeline and print its report)")
    p.add_argument("--manifest", help="manifest with labels (default: the experiment manifest)")
    p.add_argument("--split", choices=("train", "dev", "eval"),
                   help="split whose unscored utterances count as skipped")
    p.add_argument("--out", help="also write the report here (plus a .tsv table)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None and args.jobs < 1:
        print("lidkit: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    stage = None
    try:
        try:
            return args.func(args)
        except StageError as exc:
            stage = exc.stage
            raise exc.cause from None
    except (ConfigError, ValueError) as exc:
        # ValueError here means an out-of-range parameter value
        code, msg = EXIT_CONFIG, str(exc)
    except (DataError, OSError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    where = f" in stage {stage}" if stage else ""
    print(f"lidkit: error{where}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
