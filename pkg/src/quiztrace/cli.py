"""Command line entry point.

Subcommands: ``stats``, ``train``, ``ablate``, ``eval``, ``synth``.
Every option can also come from a config file of ``key = value`` lines
(``--config``); explicit command line flags win over the file. Each run
echoes its effective configuration to ``<out>/config.txt``, which is
itself a valid ``--config`` file, so any result can be reproduced from
its artifacts. When ``--out`` is omitted the output root comes from the
``QUIZTRACE_OUT`` environment variable (default ``runs``).

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import training as training_mod
from .errors import ConfigError, DataError, NumericError, QuizTraceError, UndefinedMetricError
from .model import ModelConfig, QuizNet, load_checkpoint, save_checkpoint

ENV_OUTPUT_ROOT = "QUIZTRACE_OUT"

ABLATION_VARIANTS = [
    # (label, use_influence, use_substitution, use_complementarity, use_recency)
    ("no_influence", False, True, True, True),
    ("no_substitution", True, False, True, True),
    ("no_complementarity", True, True, False, True),
    ("no_recency", True, True, True, False),
    ("full", True, True, True, True),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _str2bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


# (name, type, default, help); default None with required=True marks must-provide
_COMMON = [
    ("out", str, None, "output directory (default: $QUIZTRACE_OUT/<command>)"),
    ("seed", int, 0, "base random seed"),
]
_DATA_OPTS = [
    ("interactions", str, None, "interaction log CSV"),
    ("qmatrix", str, None, "exercise-to-concept CSV"),
    ("gap_seconds", int, data_mod.DEFAULT_GAP_SECONDS, "time-gap threshold for quiz-id-free logs"),
]
_MODEL_OPTS = [
    ("d", int, 128, "embedding dimension"),
    ("l_cap", int, 30, "max interactions kept per quiz"),
    ("j_cap", int, 30, "max quizzes kept per student"),
    ("gamma", float, 1e-5, "recency scale of the attention shift"),
    ("lambda_reg", float, 1e-5, "L2 coefficient"),
]
_FLAG_OPTS = [
    ("use_influence", _str2bool, True, "adjacent-gate blending of neighbouring interactions"),
    ("use_substitution", _str2bool, True, "gated recurrence over quiz vectors"),
    ("use_complementarity", _str2bool, True, "self-attention pooling over quiz vectors"),
    ("use_recency", _str2bool, True, "recency shift inside the attention"),
]
_TRAIN_OPTS = [
    ("epochs", int, 30, "training epochs per fold"),
    ("batch_size", int, 32, "students per optimizer step"),
    ("lr", float, 1e-3, "initial learning rate"),
    ("lr_decay", float, 0.5, "learning-rate decay factor"),
    ("lr_decay_every", int, 3, "epochs between decays"),
    ("target_policy", str, "last_quiz", "last_quiz or rolling"),
    ("folds", int, 5, "number of cross-validation folds"),
    ("fold", int, -1, "train only this fold index (-1 = all)"),
    ("resume", str, "", "checkpoint to initialize parameters from (single fold only)"),
]
_SYNTH_OPTS = [
    ("students", int, 500, "number of students"),
    ("kcs", int, 20, "number of knowledge concepts"),
    ("exercises_per_kc", int, 10, "exercise pool size per concept"),
    ("quizzes_per_student", int, 10, "quizzes per student"),
    ("quiz_length", int, 10, "interactions per quiz"),
    ("p_learn", float, 0.3, "mastery switch-on probability after a quiz"),
    ("p_guess", float, 0.1, "correct probability while unmastered"),
    ("p_slip", float, 0.1, "error probability while mastered"),
    ("p_revisit", float, 0.5, "probability a quiz revisits an already-seen concept"),
]

_COMMAND_OPTS = {
    "stats": _COMMON + _DATA_OPTS,
    "train": _COMMON + _DATA_OPTS + _MODEL_OPTS + _FLAG_OPTS + _TRAIN_OPTS,
    "ablate": _COMMON + _DATA_OPTS + _MODEL_OPTS + _TRAIN_OPTS,
    "eval": _COMMON + _DATA_OPTS + [("checkpoint", str, None, "checkpoint file to evaluate"),
                                    ("d", int, 0, "if nonzero, must match the checkpoint dimension")],
    "synth": _COMMON + _SYNTH_OPTS,
}
_REQUIRED = {
    "stats": ("interactions", "qmatrix"),
    "train": ("interactions", "qmatrix"),
    "ablate": ("interactions", "qmatrix"),
    "eval": ("interactions", "qmatrix", "checkpoint"),
    "synth": (),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="quiztrace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for command, opts in _COMMAND_OPTS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value file supplying any option")
        for name, typ, _default, hlp in opts:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ,
                           default=None, help=hlp)
    return parser


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def resolve_options(args, command) -> dict:
    """Merge command line > config file > built-in defaults."""
    file_values = read_config_file(args.config) if args.config else {}
    resolved = {}
    for name, typ, default, _hlp in _COMMAND_OPTS[command]:
        cli_value = getattr(args, name)
        if cli_value is not None:
            resolved[name] = cli_value
        elif name in file_values:
            resolved[name] = typ(file_values[name])
        else:
            resolved[name] = default
    for name in _REQUIRED[command]:
        if not resolved.get(name):
            raise ConfigError(f"{command}: --{name.replace('_', '-')} is required")
    return resolved


def _prepare_out(opts, command) -> str:
    out = opts["out"] or os.path.join(os.environ.get(ENV_OUTPUT_ROOT, "runs"), command)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"command = {command}\n")
        for key, value in opts.items():
            if key != "out":
                fh.write(f"{key} = {value}\n")
        fh.write(f"out = {out}\n")
    return out


def _load_corpus(opts):
    corpus, parsed = data_mod.load_corpus(opts["interactions"], opts["qmatrix"],
                                          gap_seconds=opts["gap_seconds"])
    if parsed.dropped_missing_kc:
        print(f"warning: dropped {parsed.dropped_missing_kc} rows whose exercise has no concept",
              file=sys.stderr)
    if parsed.empty_file:
        print("warning: interaction log is empty", file=sys.stderr)
    return corpus


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stats(opts) -> int:
    out = _prepare_out(opts, "stats")
    corpus = _load_corpus(opts)
    stats = data_mod.corpus_stats(corpus)
    if stats.empty:
        print("warning: no interactions; statistics are zeroed", file=sys.stderr)
    print(f"# of students              {stats.n_students}")
    print(f"# of exercises             {stats.n_exercises}")
    print(f"# of KCs                   {stats.n_kcs}")
    print(f"# of interactions          {stats.n_interactions}")
    print(f"Avg. interactions per student  {stats.avg_interactions_per_student:.2f}")
    print(f"Avg. quizzes per student       {stats.avg_quizzes_per_student:.2f}")
    print(f"Avg. interactions per quiz     {stats.avg_interactions_per_quiz:.2f}")
    for fname, hist in (("quiz_length_hist.csv", stats.quiz_length_hist),
                        ("quiz_count_hist.csv", stats.quiz_count_hist)):
        with open(os.path.join(out, fname), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "count"])
            for bucket, count in hist.items():
                w.writerow([bucket, count])
    print(f"histograms written to {out}")
    return 0


def _model_config(opts, qmatrix, seed, flags=None) -> ModelConfig:
    flags = flags or {name: opts[name] for name, *_ in _FLAG_OPTS}
    return ModelConfig(
        n_exercises=qmatrix.n_exercises, n_kcs=qmatrix.n_kcs, d=opts["d"],
        l_cap=opts["l_cap"], j_cap=opts["j_cap"], gamma=opts["gamma"],
        lambda_reg=opts["lambda_reg"], seed=seed, **flags,
    ).validate()


def _train_config(opts, seed) -> training_mod.TrainConfig:
    return training_mod.TrainConfig(
        batch_size=opts["batch_size"], lr0=opts["lr"], decay_factor=opts["lr_decay"],
        decay_every_epochs=opts["lr_decay_every"], epochs=opts["epochs"],
        lambda_reg=opts["lambda_reg"], seed=seed, target_policy=opts["target_policy"],
    ).validate()


def run_folds(prepared, opts, out, flags=None, subdir="", quiet=False):
    """Train/evaluate each requested fold; returns the fold EvalResults.

    Writes fold{i}/checkpoint.bin and fold{i}/epochs.csv under out/subdir.
    """
    folds = data_mod.split_folds(len(prepared.students), k=opts["folds"], seed=opts["seed"])
    only = opts["fold"]
    if only >= len(folds):
        raise ConfigError(f"--fold {only} out of range for {len(folds)} folds")
    if opts["resume"] and only < 0:
        raise ConfigError("--resume needs --fold: resuming applies to a single fold")
    results = []
    for i, (train_idx, test_idx) in enumerate(folds):
        if only >= 0 and i != only:
            continue
        fold_seed = opts["seed"] * 1009 + i
        mcfg = _model_config(opts, prepared.qmatrix, fold_seed, flags)
        if opts["resume"]:
            ck_cfg, params = load_checkpoint(opts["resume"])
            if dataclasses.asdict(ck_cfg) != dataclasses.asdict(mcfg):
                raise ConfigError("--resume checkpoint config does not match this run")
            net = QuizNet(mcfg, params, prepared.qmatrix.kc_ids)
        else:
            net = QuizNet.init(mcfg, prepared.qmatrix.kc_ids)
        train_students = [prepared.students[j] for j in train_idx]
        test_students = [prepared.students[j] for j in test_idx]
        result = training_mod.train(net, train_students, test_students, _train_config(opts, fold_seed))
        fold_dir = os.path.join(out, subdir, f"fold{i}")
        os.makedirs(fold_dir, exist_ok=True)
        best_net = QuizNet(mcfg, result.params, prepared.qmatrix.kc_ids)
        save_checkpoint(os.path.join(fold_dir, "checkpoint.bin"), result.params, mcfg)
        training_mod.write_epoch_log(os.path.join(fold_dir, "epochs.csv"), result.log)
        fold_eval = metrics_mod.evaluate(best_net, test_students)
        results.append(fold_eval)
        if not quiet:
            print(f"fold {i}: auc={fold_eval.auc:.4f} rmse={fold_eval.rmse:.4f} "
                  f"r2={fold_eval.r2:.4f} (best epoch {result.best_epoch})")
    return results


def cmd_train(opts) -> int:
    out = _prepare_out(opts, "train")
    corpus = _load_corpus(opts)
    prepared = data_mod.apply_protocol(corpus, opts["l_cap"], opts["j_cap"])
    results = run_folds(prepared, opts, out)
    summary = metrics_mod.summarize_folds(results)
    rows = [("model", summary)]
    table = metrics_mod.format_results_table(rows)
    print(table)
    metrics_mod.write_results_csv(os.path.join(out, "results.csv"), rows)
    with open(os.path.join(out, "results.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    return 0


def cmd_ablate(opts) -> int:
    out = _prepare_out(opts, "ablate")
    corpus = _load_corpus(opts)
    prepared = data_mod.apply_protocol(corpus, opts["l_cap"], opts["j_cap"])
    rows = []
    marks = []
    for label, infl, subst, comp, rec in ABLATION_VARIANTS:
        flags = {"use_influence": infl, "use_substitution": subst,
                 "use_complementarity": comp, "use_recency": rec}
        results = run_folds(prepared, opts, out, flags=flags, subdir=label, quiet=True)
        summary = metrics_mod.summarize_folds(results)
        rows.append((label, summary))
        marks.append((label, infl, subst, comp, rec, summary))
        print(f"{label}: auc={summary.auc_mean:.4f}±{summary.auc_std:.4f}")

    def tick(b):
        return "✓" if b else "✗"

    header = (f"{'method':<20}{'influence':>10}{'substitution':>13}{'complementarity':>16}"
              f"{'recency':>9}{'AUC':>15}{'RMSE':>15}{'r2':>15}")
    lines = [header, "-" * len(header)]
    for label, infl, subst, comp, rec, s in marks:
        lines.append(f"{label:<20}{tick(infl):>10}{tick(subst):>13}{tick(comp):>16}{tick(rec):>9}"
                     f"{100 * s.auc_mean:>9.2f}±{100 * s.auc_std:<5.2f}"
                     f"{100 * s.rmse_mean:>9.2f}±{100 * s.rmse_std:<5.2f}"
                     f"{100 * s.r2_mean:>9.2f}±{100 * s.r2_std:<5.2f}")
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    with open(os.path.join(out, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "influence", "substitution", "complementarity", "recency"]
                   + metrics_mod.RESULT_COLUMNS)
        for label, infl, subst, comp, rec, s in marks:
            w.writerow([label, int(infl), int(subst), int(comp), int(rec),
                        repr(s.auc_mean), repr(s.auc_std), repr(s.rmse_mean), repr(s.rmse_std),
                        repr(s.r2_mean), repr(s.r2_std), len(s.folds)])
    return 0


def cmd_eval(opts) -> int:
    out = _prepare_out(opts, "eval")
    config, params = load_checkpoint(opts["checkpoint"])
    if opts["d"] and opts["d"] != config.d:
        raise ConfigError(f"checkpoint dimension {config.d} does not match requested --d {opts['d']}")
    corpus = _load_corpus(opts)
    prepared = data_mod.apply_protocol(corpus, config.l_cap, config.j_cap)
    if prepared.qmatrix.n_exercises > config.n_exercises or prepared.qmatrix.n_kcs > config.n_kcs:
        raise ConfigError("corpus vocabulary exceeds the checkpoint's; they are incompatible")
    # a smaller eval vocabulary is fine; unreferenced tail ids get empty concept lists
    kc_ids = prepared.qmatrix.kc_ids + [[] for _ in range(config.n_exercises - prepared.qmatrix.n_exercises)]
    net = QuizNet(config, params, kc_ids)
    result = metrics_mod.evaluate(net, prepared.students)
    summary = metrics_mod.summarize_folds([result])
    rows = [("checkpoint", summary)]
    table = metrics_mod.format_results_table(rows)
    print(table)
    print(f"targets scored: {result.n_targets}")
    metrics_mod.write_results_csv(os.path.join(out, "results.csv"), rows)
    return 0


def cmd_synth(opts) -> int:
    out = _prepare_out(opts, "synth")
    spec = data_mod.SyntheticSpec(
        students=opts["students"], kcs=opts["kcs"], exercises_per_kc=opts["exercises_per_kc"],
        quizzes_per_student=opts["quizzes_per_student"], quiz_length=opts["quiz_length"],
        p_learn=opts["p_learn"], p_guess=opts["p_guess"], p_slip=opts["p_slip"],
        p_revisit=opts["p_revisit"], seed=opts["seed"],
    )
    corpus, trace = data_mod.generate_synthetic(spec)
    data_mod.write_corpus(corpus,
                          os.path.join(out, "interactions.csv"),
                          os.path.join(out, "qmatrix.csv"),
                          trace, os.path.join(out, "mastery.csv"))
    n = sum(len(q.interactions) for s in corpus.sequences for q in s.quizzes)
    print(f"wrote {len(corpus.sequences)} students / {n} interactions to {out}")
    return 0


_DISPATCH = {"stats": cmd_stats, "train": cmd_train, "ablate": cmd_ablate,
             "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        opts = resolve_options(args, args.command)
        return _DISPATCH[args.command](opts)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, UndefinedMetricError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except QuizTraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
