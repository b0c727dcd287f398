"""Command-line entry point covering the full experiment lifecycle:

    carmmi generate-data  -> synthetic corpus file
    carmmi train          -> checkpoints + metrics CSV + loss-curve figure
    carmmi train-oracle   -> frozen evaluation recognizer
    carmmi make-texts     -> held-out token sequences for UER measurement
    carmmi eval-uer       -> utterance-error-rate CSV
    carmmi analyze-ed     -> teacher-forcing distance table CSV
    carmmi ab             -> objective/reduction/drop-frame comparison grid
    carmmi decode         -> synthesize one utterance from a checkpoint

Exit codes: 0 success, 2 configuration error, 3 runtime abort (non-finite
loss), 4 oracle unfit. The CARMMI_OUT_DIR environment variable sets the
default output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import report as report_mod
from . import trainer as trainer_mod
from .losses import LossConfig
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ORACLE = 4

ORACLE_ACCURACY = 0.99


def _out_dir():
    return os.environ.get("CARMMI_OUT_DIR", ".")


def _out_path(value, default_name):
    if value is not None:
        return value
    return os.path.join(_out_dir(), default_name)


def _load_experiment(args):
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config)
    else:
        cfg = config_mod.default_config()
    if getattr(args, "lam", None) is not None:
        cfg.loss.lambda_ctc = args.lam
    if getattr(args, "rf", None) is not None:
        cfg.pipeline.reduction = args.rf
    if getattr(args, "dfr", None) is not None:
        cfg.pipeline.drop_frame_rate = args.dfr
    if getattr(args, "seed", None) is not None:
        cfg.corpus.seed = args.seed
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _read_texts(path):
    texts = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                texts.append([int(t) for t in line.split()])
    return texts


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args):
    cfg = _load_experiment(args)
    corpus = data_mod.generate_corpus(cfg.corpus)
    # every corpus must be usable at the coarsest reduction factor
    data_mod.validate_corpus(corpus, 5)
    out = _out_path(args.out, "corpus.bin")
    data_mod.save_corpus(corpus, out, extra_manifest={
        "config_hash": cfg.hash(), "seed": cfg.corpus.seed})
    print(f"wrote {len(corpus.utterances)} utterances to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_experiment(args)
    corpus = data_mod.load_corpus(args.corpus)
    out_dir = _out_path(args.out_dir, "run")
    os.makedirs(out_dir, exist_ok=True)
    tr = trainer_mod.Trainer(corpus, cfg.pipeline, cfg.train, cfg.loss,
                             out_dir=out_dir,
                             build_recognizer=cfg.loss.lambda_ctc > 0,
                             config_hash=cfg.hash())
    resume_path = os.path.join(out_dir, "ckpt_last")
    if args.resume:
        if not os.path.exists(resume_path + ".json"):
            print(f"no checkpoint to resume at {resume_path}", file=sys.stderr)
            return EXIT_CONFIG
        tr.restore(resume_path)
        print(f"resumed at step {tr.step}")
    try:
        metrics = tr.train(progress=_print_metrics_row if args.verbose else None)
    except trainer_mod.NanAbortError as e:
        print(f"aborted: {e}; last checkpoint: {e.checkpoint_path}",
              file=sys.stderr)
        return EXIT_RUNTIME
    report_mod.plot_loss_curves(metrics, os.path.join(out_dir, "loss_curves.svg"))
    last = metrics[-1]
    print(f"finished at step {last['step']}: val mel L1 {last['val_mel_l1']}, "
          f"outputs in {out_dir}")
    return EXIT_OK


def _print_metrics_row(row):
    print("  step %s train_mel %s val_mel %s" % (
        row["step"], row["train_mel_l1"], row["val_mel_l1"]))


def cmd_train_oracle(args):
    cfg = _load_experiment(args)
    corpus = data_mod.load_corpus(args.corpus)
    try:
        oracle = eval_mod.train_oracle(corpus, seed=args.seed or 1234,
                                       max_steps=args.max_steps,
                                       required_accuracy=ORACLE_ACCURACY)
    except eval_mod.OracleUnfitError as e:
        print(f"oracle-unfit: {e}", file=sys.stderr)
        return EXIT_ORACLE
    out = _out_path(args.out, "oracle")
    oracle.save(out)
    print(f"oracle held-out accuracy {oracle.accuracy:.4f}, saved to {out}")
    return EXIT_OK


def cmd_make_texts(args):
    corpus = data_mod.load_corpus(args.corpus)
    texts = eval_mod.make_test_texts(corpus, n=args.n, seed=args.seed)
    out = _out_path(args.out, "texts.txt")
    with open(out, "w") as f:
        f.write(f"# seed={args.seed} n={args.n}\n")
        for t in texts:
            f.write(" ".join(map(str, t)) + "\n")
    print(f"wrote {len(texts)} held-out texts to {out}")
    return EXIT_OK


def _load_oracle(path):
    oracle = eval_mod.OracleRecognizer.load(path)
    if oracle.accuracy < ORACLE_ACCURACY:
        raise eval_mod.OracleUnfitError(oracle.accuracy, ORACLE_ACCURACY)
    return oracle


def cmd_eval_uer(args):
    model, _, _, _, manifest = trainer_mod.load_checkpoint(args.checkpoint)
    try:
        oracle = _load_oracle(args.oracle)
    except eval_mod.OracleUnfitError as e:
        print(f"oracle-unfit: {e}", file=sys.stderr)
        return EXIT_ORACLE
    texts = _read_texts(args.texts)
    corpus_cfg = data_mod.SynthCorpusConfig(**manifest["configs"]["corpus"])
    report = eval_mod.measure_uer(model, oracle, texts,
                                  eval_mod.default_max_frames(corpus_cfg))
    out = _out_path(args.out, "uer.csv")
    report.write_csv(out, manifest.get("config_hash", ""),
                     manifest["configs"]["train"]["seed"])
    counts = report.class_counts()
    detail = " ".join(f"{k}={v}" for k, v in counts.items())
    print(f"UER {report.uer:.4f} over {len(texts)} texts ({detail}); {out}")
    return EXIT_OK


def cmd_analyze_ed(args):
    if args.features_dir:
        files = sorted(os.listdir(args.features_dir))
        feats = [data_mod.load_matrix(os.path.join(args.features_dir, f))
                 for f in files if f.endswith(".bin")]
        if not feats:
            print(f"no .bin matrices in {args.features_dir}", file=sys.stderr)
            return EXIT_CONFIG
        rows = eval_mod.ed_table(feats)
        config_hash, seed = "external", 0
    else:
        corpus = data_mod.load_corpus(args.corpus)
        rows = eval_mod.ed_table_from_corpus(corpus)
        config_hash, seed = "", corpus.config.seed
    out = _out_path(args.out, "ed.csv")
    eval_mod.write_ed_csv(rows, out, config_hash, seed)
    for r, shift, ed in rows:
        print(f"  r={r} shift={shift}: {ed:.4f}")
    print(out)
    return EXIT_OK


def cmd_ab(args):
    cfg = _load_experiment(args)
    corpus = data_mod.load_corpus(args.corpus)
    try:
        oracle = _load_oracle(args.oracle)
    except eval_mod.OracleUnfitError as e:
        print(f"oracle-unfit: {e}", file=sys.stderr)
        return EXIT_ORACLE
    seeds = [int(s) for s in args.seeds.split(",")]
    texts = eval_mod.make_test_texts(corpus, n=args.n_texts)
    out_dir = _out_path(args.out_dir, "ab")
    os.makedirs(out_dir, exist_ok=True)
    cells = eval_mod.GRID_CELLS
    if args.cells:
        cells = []
        for spec in args.cells.split(";"):
            objective, r, dfr = spec.split(",")
            cells.append((objective, int(r), float(dfr)))
    result = eval_mod.ab_compare(
        corpus, seeds, oracle, texts, cfg.train, cells=cells, out_dir=out_dir,
        config_hash=cfg.hash(), jobs=args.jobs,
        progress=lambda a: print(f"  {a.objective} rf{a.reduction} "
                                 f"dfr{a.dfr} seed {a.seed}: UER {a.uer:.4f}"))
    out = result.write_csv(os.path.join(out_dir, "ab.csv"), cfg.hash())
    _plot_ab_gaps(result, out_dir)
    stat, p = result.wilcoxon()
    print(f"grid written to {out}; paired rf2/dfr0 rank statistic {stat:.1f} "
          f"(p={p:.4f})")
    return EXIT_OK


def _plot_ab_gaps(result, out_dir):
    runs = []
    for arm in result.arms:
        if (arm.reduction, arm.dfr) != (2, 0.0):
            continue
        arm_dir = os.path.join(
            out_dir, f"{arm.objective}_rf{arm.reduction}_dfr{arm.dfr}_s{arm.seed}")
        metrics_path = os.path.join(arm_dir, "metrics.csv")
        if os.path.exists(metrics_path):
            runs.append((f"{arm.objective} seed {arm.seed}",
                         trainer_mod.read_metrics(metrics_path)))
    if runs:
        report_mod.plot_gap_comparison(runs, os.path.join(out_dir, "gaps.svg"))


def cmd_decode(args):
    model, _, _, _, manifest = trainer_mod.load_checkpoint(args.checkpoint)
    tokens = [int(t) for t in args.text.split()]
    corpus_cfg = data_mod.SynthCorpusConfig(**manifest["configs"]["corpus"])
    result = model.synthesize(tokens,
                              eval_mod.default_max_frames(corpus_cfg))
    out = _out_path(args.out, "decoded")
    data_mod.save_matrix(result.mel, out + ".mel.bin")
    data_mod.save_matrix(result.linear, out + ".linear.bin")
    decoded = None
    if args.oracle:
        decoded = _load_oracle(args.oracle).decode([result.mel])[0]
    elif model.has_recognizer:
        from . import ctc as ctc_mod
        lp = model.recognize(Tensor(result.mel[None])).values[0]
        decoded = ctc_mod.ctc_greedy_decode(lp, model.config.vocab_size)
    print(f"halt-reason: {result.halt_reason}")
    print(f"frames: {result.n_frames}")
    if decoded is not None:
        print("decoded tokens: " + " ".join(map(str, decoded)))
    print(f"features: {out}.mel.bin {out}.linear.bin")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="carmmi",
        description="conditional-autoregressive synthesizer with a "
                    "mutual-information auxiliary objective")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data,
            help="sample a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("train", cmd_train, help="train a synthesizer")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="CTC weight; 0 disables the auxiliary recognizer")
    p.add_argument("--rf", type=int, choices=(1, 2, 5),
                   help="reduction factor (frames per decoder step)")
    p.add_argument("--dfr", type=float, help="drop frame rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--verbose", action="store_true")

    p = add("train-oracle", cmd_train_oracle,
            help="fit the evaluation recognizer on ground-truth features")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, default=6000)

    p = add("make-texts", cmd_make_texts,
            help="sample held-out token sequences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=999)
    p.add_argument("--out")

    p = add("eval-uer", cmd_eval_uer, help="measure utterance error rate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--out")

    p = add("analyze-ed", cmd_analyze_ed,
            help="teacher-forcing distance table over reduction and shift")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--corpus")
    g.add_argument("--features-dir")
    p.add_argument("--out")

    p = add("ab", cmd_ab, help="run the objective comparison grid")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--n-texts", type=int, default=100)
    p.add_argument("--cells", help="semicolon-separated objective,rf,dfr "
                                   "triples; default is the full grid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir")

    p = add("decode", cmd_decode, help="synthesize one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True,
                   help="space-separated token ids")
    p.add_argument("--oracle")
    p.add_argument("--out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config_mod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
