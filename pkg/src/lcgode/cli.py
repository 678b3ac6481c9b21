"""``lcode`` command-line entry point.

Subcommands::

    lcode generate --trials N --epochs M --seed S --out data.jsonl [--noise 0.02]
    lcode split    --data data.jsonl --test-fraction 0.2 --seed S --train-out a.jsonl --test-out b.jsonl
    lcode train    --data a.jsonl --metric test_accuracy --cond-len 10 --latent-dim 16 \\
                   --epochs 400 --seed S --out model.json [--ablate-graph]
    lcode predict  --ckpt model.json --data b.jsonl --samples K --out preds/
    lcode rank     --ckpt model.json --data b.jsonl --out rank/   (or --pred preds/)
    lcode eval     --pred preds/ --data b.jsonl --pred-lens 80,140,200 --out eval/

Any long option can also come from ``--config FILE``: one ``key = value`` per
line (``#`` starts a comment, keys use dashes or underscores).  Precedence is
command-line flag, then config file, then built-in default.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetError,
    SyntheticConfig,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    split,
)
from .evaluation import (
    evaluate_curves,
    kendall_tau,
    pearson,
    regret_and_ranking,
    speedup,
)
from .model import (
    TrainConfig,
    TrainingError,
    extrapolate_trials,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .seeding import stream

log = logging.getLogger("lcode")

PREDICT_CHUNK = 64


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, args, inputs, outputs, timings) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_values")}
    doc = {
        "command": args.command,
        "version": __version__,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "timings_seconds": timings,
    }
    Path(path).write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create directory for {path}: {exc}") from None


def _load(path) -> list:
    if not Path(path).is_file():
        raise CliError(f"dataset not found: {path}")
    return load_dataset(path)


def _check_grid(model, trials) -> None:
    metric = model.config.metric
    for t in trials:
        curve = t.curves.get(metric)
        if curve is None:
            raise CliError(f"trial {t.trial_id!r} has no {metric!r} curve required by the checkpoint")
        if curve.m != model.m:
            raise CliError(f"grid mismatch: checkpoint expects m={model.m} epochs, trial {t.trial_id!r} has m={curve.m}")
        if abs(curve.t_max - model.config.t_max) > 1e-12:
            raise CliError(
                f"grid mismatch: checkpoint expects t_max={model.config.t_max}, trial {t.trial_id!r} has t_max={curve.t_max}"
            )


def _predict(model, trials, samples: int, seed: int, threads: int):
    """Chunked extrapolation; noise streams depend on chunk index only."""
    chunks = [trials[i : i + PREDICT_CHUNK] for i in range(0, len(trials), PREDICT_CHUNK)]

    def run(k):
        rng = stream(seed, "predict", k) if samples > 1 else None
        return extrapolate_trials(model, chunks[k], samples, rng)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(len(chunks))))
    else:
        parts = [run(k) for k in range(len(chunks))]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _write_predictions(path, model, trials, mean, std) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, mu, sd in zip(trials, mean, std):
            doc = {
                "trial_id": t.trial_id,
                "metric": model.config.metric,
                "condition_length": model.config.condition_length,
                "m": model.m,
                "t_max": model.config.t_max,
                "mean": mu.tolist(),
                "std": sd.tolist(),
            }
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def _read_predictions(path) -> list[dict]:
    if not Path(path).is_file():
        raise CliError(f"predictions not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    t0 = time.perf_counter()
    out = Path(args.out)
    _ensure_parent(out)
    config = SyntheticConfig(
        m=args.epochs,
        t_max=args.t_max,
        noise=args.noise,
        unit_range=(16, args.max_units),
    )
    try:
        trials = generate_synthetic_dataset(args.trials, args.seed, config, threads=args.threads)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    try:
        save_dataset(out, trials)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from None
    write_manifest(f"{out}.manifest.json", args, [], [out], {"total": time.perf_counter() - t0})
    log.info("wrote %d trials to %s", len(trials), out)


def cmd_split(args) -> None:
    t0 = time.perf_counter()
    trials = _load(args.data)
    train_set, test_set = split(trials, args.test_fraction, stream(args.seed, "split"))
    for path, part in ((args.train_out, train_set), (args.test_out, test_set)):
        _ensure_parent(Path(path))
        save_dataset(path, part)
    write_manifest(
        f"{args.train_out}.manifest.json",
        args,
        [args.data],
        [args.train_out, args.test_out],
        {"total": time.perf_counter() - t0},
    )


def cmd_train(args) -> None:
    t0 = time.perf_counter()
    trials = _load(args.data)
    missing = [t.trial_id for t in trials if args.metric not in t.curves]
    if missing:
        raise CliError(f"dataset has no {args.metric!r} curve for trial {missing[0]!r}")
    t_max = {t.curves[args.metric].t_max for t in trials}
    if len(t_max) != 1:
        raise CliError("dataset mixes curves with different t_max")
    config = TrainConfig(
        latent_dim=args.latent_dim,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        condition_length=args.cond_len,
        t_max=t_max.pop(),
        kl_weight=args.kl_weight,
        obs_noise=args.obs_noise,
        patience=args.patience,
        seed=args.seed,
        weight_decay=args.weight_decay,
        metric=args.metric,
        pooling=args.pooling,
        decoder_hidden=args.decoder_hidden,
        ablate_graph=args.ablate_graph,
    )
    out = Path(args.out)
    _ensure_parent(out)

    def progress(entry):
        if entry["epoch"] % 25 == 0:
            log.info("epoch %d  loss %.4f  val MAPE %.5f", entry["epoch"], entry["train_loss"], entry["val_mape"])

    t1 = time.perf_counter()
    model = train(trials, config, progress=progress)
    t2 = time.perf_counter()
    save_checkpoint(out, model)
    log_path = Path(f"{out}.log.csv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_mape,skipped_steps\n")
        for e in model.log:
            fh.write(f"{e['epoch']},{e['train_loss']!r},{e['val_mape']!r},{e['skipped_steps']}\n")
    write_manifest(
        f"{out}.manifest.json",
        args,
        [args.data],
        [out, log_path],
        {"train": t2 - t1, "total": time.perf_counter() - t0},
    )


def cmd_predict(args) -> None:
    t0 = time.perf_counter()
    model = load_checkpoint(args.ckpt)
    trials = _load(args.data)
    _check_grid(model, trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t1 = time.perf_counter()
    mean, std = _predict(model, trials, args.samples, args.seed, args.threads)
    infer = time.perf_counter() - t1
    path = out / "predictions.jsonl"
    _write_predictions(path, model, trials, mean, std)
    write_manifest(
        out / "manifest.json", args, [args.ckpt, args.data], [path], {"inference": infer, "total": time.perf_counter() - t0}
    )


def _prediction_table(preds: list[dict], trials: dict) -> tuple[list[str], np.ndarray, np.ndarray, str, int]:
    """Align a predictions file with the dataset: ids, truth ``(k, m)``, means ``(k, m - n)``."""
    if not preds:
        raise CliError("no predictions found")
    metric = preds[0]["metric"]
    n = preds[0]["condition_length"]
    ids, truth, mean = [], [], []
    for doc in preds:
        tid = doc["trial_id"]
        if tid not in trials:
            raise CliError(f"prediction for unknown trial {tid!r}")
        curve = trials[tid].curves.get(metric)
        if curve is None:
            raise CliError(f"trial {tid!r} has no {metric!r} curve")
        if curve.m != doc["m"] or len(doc["mean"]) != curve.m - n:
            raise CliError(f"grid mismatch for trial {tid!r}: predictions cover m={doc['m']}, data has m={curve.m}")
        ids.append(tid)
        truth.append(curve.values)
        mean.append(doc["mean"])
    return ids, np.array(truth), np.array(mean, dtype=np.float64), metric, n


def cmd_rank(args) -> None:
    t0 = time.perf_counter()
    if (args.ckpt is None) == (args.pred is None):
        raise CliError("rank needs exactly one of --ckpt or --pred")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.ckpt is not None:
        model = load_checkpoint(args.ckpt)
        trials = _load(args.data)
        _check_grid(model, trials)
        t1 = time.perf_counter()
        mean, std = _predict(model, trials, 1, args.seed, args.threads)
        infer = time.perf_counter() - t1
        pred_path = out / "predictions.jsonl"
        _write_predictions(pred_path, model, trials, mean, std)
        outputs.append(pred_path)
        inputs = [args.ckpt, args.data]
        preds = _read_predictions(pred_path)
    else:
        pred_file = Path(args.pred) / "predictions.jsonl"
        preds = _read_predictions(pred_file)
        manifest = Path(args.pred) / "manifest.json"
        infer = 0.0
        if manifest.is_file():
            infer = json.loads(manifest.read_text(encoding="utf-8"))["timings_seconds"].get("inference", 0.0)
        inputs = [pred_file, args.data]
    ids, truth, mean, metric, n = _prediction_table(preds, {t.trial_id: t for t in _load(args.data)})
    maximize = metric == "test_accuracy"
    best = np.max if maximize else np.min
    # the observed prefix is known, so the predicted optimum covers the whole curve
    predicted = {i: float(best(np.concatenate([y[:n], p]))) for i, y, p in zip(ids, truth, mean)}
    actual = {i: float(best(y)) for i, y in zip(ids, truth)}
    regret, ranking, pick = regret_and_ranking(predicted, actual, maximize, return_pick=True)
    true_scores = [actual[i] for i in ids]
    pred_scores = [predicted[i] for i in ids]
    m = truth.shape[1]
    full = len(ids) * m * args.sgd_epoch_seconds
    cond = len(ids) * n * args.sgd_epoch_seconds
    summary = {
        "metric": metric,
        "trials": len(ids),
        "predicted_best": pick,
        "regret": regret,
        "ranking": ranking,
        "ranking_fraction": ranking / len(ids),
        "pearson": pearson(true_scores, pred_scores),
        "kendall_tau": kendall_tau(true_scores, pred_scores),
        "speedup": speedup(full, cond, infer),
        "speedup_inputs": {"full_sgd_seconds": full, "cond_sgd_seconds": cond, "inference_seconds": infer},
        "seed": args.seed,
    }
    summary_path = out / "rank_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(summary_path)
    write_manifest(out / "manifest.json", args, inputs, outputs, {"inference": infer, "total": time.perf_counter() - t0})


def cmd_eval(args) -> None:
    t0 = time.perf_counter()
    pred_dir = Path(args.pred)
    preds = _read_predictions(pred_dir / "predictions.jsonl")
    trials = {t.trial_id: t for t in _load(args.data)}
    ids, truth, pred, metric, n = _prediction_table(preds, trials)
    lens = [int(s) for s in args.pred_lens.split(",")] if args.pred_lens else [len(truth[0])]
    try:
        report = evaluate_curves(ids, truth, pred, n, lens, metric)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.extra["predictions"] = str(pred_dir)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval_summary.json")
    write_manifest(
        out / "manifest.json",
        args,
        [pred_dir / "predictions.jsonl", args.data],
        [out / "eval.csv", out / "eval_summary.json"],
        {"total": time.perf_counter() - t0},
    )


# ---------------------------------------------------------------------------
# parser


def _flag(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {value!r}")


def build_parser() -> argparse.ArgumentParser:
    defaults = TrainConfig()
    parser = argparse.ArgumentParser(prog="lcode", description="Architecture-aware learning-curve extrapolation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file with option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("generate", help="synthetic gradient-flow dataset")
    common(p)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--t-max", type=float, default=1.0)
    p.add_argument("--max-units", type=int, default=1024, help="upper end of the per-layer width range")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="hold out whole trials")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit LC-GODE")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=("test_accuracy", "test_loss"), default=defaults.metric)
    p.add_argument("--cond-len", type=int, default=defaults.condition_length)
    p.add_argument("--latent-dim", type=int, default=defaults.latent_dim)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--kl-weight", type=float, default=defaults.kl_weight)
    p.add_argument("--obs-noise", type=float, default=defaults.obs_noise)
    p.add_argument("--patience", type=int, default=defaults.patience)
    p.add_argument("--pooling", choices=("mean", "max", "learnable"), default=defaults.pooling)
    p.add_argument("--decoder-hidden", type=int, default=defaults.decoder_hidden)
    p.add_argument("--ablate-graph", type=_flag, nargs="?", const=True, default=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="extrapolate curves with uncertainty")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("rank", help="pick the best configuration from partial curves")
    common(p)
    p.add_argument("--ckpt", help="rank with this checkpoint's posterior-mean predictions")
    p.add_argument("--pred", help="rank an existing predictions directory instead")
    p.add_argument("--data", required=True)
    p.add_argument("--sgd-epoch-seconds", type=float, default=1.0, help="assumed cost of one source-task epoch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="MAPE / RMSE reports")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pred-lens", default=None, help="comma-separated last epochs, e.g. 80,140,200")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = read_config(args.config)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except CliError as exc:
            parser.error(str(exc))
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        # config values become defaults, so explicit flags still win
        for action in subparser._actions:
            if action.dest in values:
                action.required = False
        subparser.set_defaults(**{k: known[k].type(v) if known[k].type else v for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("lcode: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (CliError, DatasetError, TrainingError, ValueError, OSError) as exc:
        print(f"lcode {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
