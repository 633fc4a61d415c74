"""``shdp-tcn`` command-line interface.

Configuration precedence for ``train``: built-in defaults, then the JSON
config file (``--config``; a run manifest works too), then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    HeatSeries,
    Normalizer,
    SplitSpec,
    SyntheticSpec,
    add_months,
    category_summary,
    compute_heat_series,
    dominant_topic,
    dominant_topics_from_series,
    generate_synthetic,
    load_embeddings,
    make_windows,
    month_index,
    monthly_topic_features,
    read_records_csv,
    read_series_csv,
    write_series_csv,
)
from .model import ConfigError, ModelConfig, build, model_from_json, model_to_json, predict_horizon
from .tensor import ShapeError
from .training import (
    TrainConfig,
    evaluate,
    predict_samples,
    persistence,
    report_table,
    seasonal_naive,
    train,
    validate_report,
)

log = logging.getLogger("shdp_tcn")


class CliError(Exception):
    pass


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_dominant(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["month"]: (r["topic"] or None) for r in csv.DictReader(fh)}


def _topic_features(series: HeatSeries, topic_dim: int, dominant_path, embeddings_path):
    if topic_dim == 0:
        return None
    if dominant_path:
        dominant = _read_dominant(dominant_path)
    else:
        dominant = {m: series.topic for m in series.months}
    emb = load_embeddings(embeddings_path) if embeddings_path else None
    return monthly_topic_features(dominant, topic_dim, emb)


# --- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise CliError(f"cannot read synthetic spec {args.spec}: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suite = generate_synthetic(spec)
    if not suite:
        log.warning("spec declares zero topics; nothing written")
        return 0
    for s in suite:
        write_series_csv(s.series, out / f"{s.series.topic}.csv")
    truth = {"spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
             "series": [s.components() for s in suite]}
    _atomic_write(out / "ground_truth.json", json.dumps(truth, indent=1, sort_keys=True))
    dom = dominant_topics_from_series([s.series for s in suite])
    _atomic_write(out / "dominant_topics.csv",
                  _csv_text(["month", "topic"], [(m, t or "") for m, t in dom.items()]))
    print(f"wrote {len(suite)} series to {out}")
    return 0


def cmd_ingest(args) -> int:
    records = read_records_csv(args.records)
    if not records:
        raise CliError(f"{args.records}: no records")
    months = sorted({r.month for r in records}, key=month_index)
    start = args.start or months[0]
    end = args.end or months[-1]
    series = compute_heat_series(records, args.topic, start, end)
    write_series_csv(series, args.out)
    if args.dominant_out:
        rows = [(m, dominant_topic(records, m) or "") for m in series.months]
        _atomic_write(args.dominant_out, _csv_text(["month", "topic"], rows))
    print(f"{'Category id':<12}{'Num':>8}  Category")
    for cid, n, name in category_summary(records):
        print(f"{cid:<12}{n:>8}  {name}")
    print(f"{args.topic}: {int(series.values.sum())} occurrences over {len(series)} months -> {args.out}")
    return 0


_MODEL_FLAGS = {
    "window_len": "window_len", "topic_dim": "topic_dim", "channels": "channels",
    "kernel_size": "kernel_size", "num_blocks": "num_blocks", "dropout": "dropout_rate",
    "seed": "seed",
}
_TRAIN_FLAGS = {
    "batch_size": "batch_size", "epochs": "epochs", "lr": "learning_rate",
    "optimizer": "optimizer", "shuffle_seed": "shuffle_seed",
}


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig, SplitSpec, dict]:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_doc = {**ModelConfig().to_dict(), **doc.get("model", {})}
    train_doc = {**TrainConfig().to_dict(), **doc.get("train", {})}
    split_doc = {"cutoff_month": SplitSpec().cutoff_month, **doc.get("split", {})}
    for flag, key in _MODEL_FLAGS.items():
        if getattr(args, flag) is not None:
            model_doc[key] = getattr(args, flag)
    if args.no_attention:
        model_doc["use_attention"] = False
    for flag, key in _TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            train_doc[key] = getattr(args, flag)
    if args.cutoff is not None:
        split_doc["cutoff_month"] = args.cutoff
    month_index(split_doc["cutoff_month"])
    data_doc = doc.get("data", {})
    return (ModelConfig.from_dict(model_doc), TrainConfig.from_dict(train_doc),
            SplitSpec(split_doc["cutoff_month"]), data_doc)


def cmd_train(args) -> int:
    mcfg, tcfg, split, data_doc = resolve_configs(args)
    series_path = args.series or data_doc.get("series")
    if not series_path:
        raise CliError("no series CSV given (positional argument or data.series in --config)")
    dominant = args.dominant or data_doc.get("dominant")
    embeddings = args.embeddings or data_doc.get("embeddings")
    series = read_series_csv(series_path)
    feats = _topic_features(series, mcfg.topic_dim, dominant, embeddings)
    win = make_windows(series, mcfg.window_len, split, mcfg.topic_dim, feats)
    print(f"train samples: {len(win.train)}  test samples: {len(win.test)}")

    model = build(mcfg)
    history = train(model, win.train, tcfg)

    model_out = Path(args.model_out)
    stem = model_out.with_suffix("")
    loss_out = Path(args.loss_out) if args.loss_out else stem.with_name(stem.name + ".loss.csv")
    manifest_out = (Path(args.manifest_out) if args.manifest_out
                    else stem.with_name(stem.name + ".manifest.json"))
    extra = {
        "normalizer": win.normalizer.to_dict(),
        "trend_epsilon": win.trend_epsilon,
        "split": {"cutoff_month": split.cutoff_month},
    }
    _atomic_write(model_out, model_to_json(model, extra))
    _atomic_write(loss_out, _csv_text(["epoch", "loss"],
                                      [(i + 1, repr(v)) for i, v in enumerate(history)]))
    manifest = {
        "tool": "shdp-tcn",
        "version": __version__,
        "command": "train",
        "variant": "SHDP-TCN" if mcfg.use_attention and mcfg.topic_dim > 0 else (
            "TCN" if not mcfg.use_attention and mcfg.topic_dim == 0 else "partial ablation"),
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "split": {"cutoff_month": split.cutoff_month},
        "data": {"series": str(series_path), "series_sha256": _sha256(series_path),
                 "dominant": str(dominant) if dominant else None,
                 "embeddings": str(embeddings) if embeddings else None},
        "seeds": {"model": mcfg.seed, "shuffle": tcfg.shuffle_seed},
        "samples": {"train": len(win.train), "test": len(win.test)},
        "artifacts": {"model": str(model_out), "loss_history": str(loss_out),
                      "model_sha256": _sha256(model_out)},
    }
    _atomic_write(manifest_out, json.dumps(manifest, indent=1, sort_keys=True))
    print(f"final loss {history[-1]:.6g}; model -> {model_out}")
    return 0


def _load_model(path):
    try:
        return model_from_json(Path(path).read_text(encoding="utf-8"))
    except (ShapeError, ConfigError, KeyError) as exc:
        raise CliError(f"config mismatch in {path}: {exc}") from None


def cmd_evaluate(args) -> int:
    model, meta = _load_model(args.model)
    cfg = model.config
    series = read_series_csv(args.series)
    split = SplitSpec(meta.get("split", {}).get("cutoff_month", SplitSpec().cutoff_month))
    feats = _topic_features(series, cfg.topic_dim, args.dominant, args.embeddings)
    win = make_windows(series, cfg.window_len, split, cfg.topic_dim, feats)
    if not win.test:
        raise CliError(f"no test months after {split.cutoff_month}")
    report = evaluate(model, win.test, win.trend_epsilon, name=args.name)

    extra = []
    if args.baseline_model:
        base, _ = _load_model(args.baseline_model)
        bcfg = base.config
        if bcfg.window_len != cfg.window_len:
            raise CliError("baseline model uses a different window_len")
        bfeats = _topic_features(series, bcfg.topic_dim, args.dominant, args.embeddings)
        bwin = make_windows(series, bcfg.window_len, split, bcfg.topic_dim, bfeats)
        brep = evaluate(base, bwin.test, win.trend_epsilon, name="TCN")
        extra.append(("TCN", brep, bcfg.topic_dim > 0))

    doc = report.to_dict()
    validate_report(doc)
    if extra:
        doc_out = {**doc, "comparisons": {n: r.to_dict() for n, r, _ in extra}}
    else:
        doc_out = doc
    _atomic_write(args.report_out, json.dumps(doc_out, indent=1, sort_keys=True))

    preds = predict_samples(model, win.test)
    norm = win.normalizer
    rows = []
    for s, p in zip(win.test, preds):
        sn = "" if s.seasonal_value is None else repr(float(norm.inverse(seasonal_naive(s))))
        rows.append((s.target_month, repr(float(norm.inverse(s.target))), repr(float(norm.inverse(p))),
                     repr(float(norm.inverse(persistence(s)))), sn))
    out = Path(args.report_out)
    pred_path = out.with_name(out.stem + ".predictions.csv")
    _atomic_write(pred_path, _csv_text(["month", "actual", "predicted", "persistence", "seasonal_naive"], rows))

    print(report_table(report, cfg.topic_dim > 0, extra))
    print()
    print(f"MSE {report.model.mse:.6g}  MAE {report.model.mae:.6g}  (normalised scale, "
          f"{report.n_samples} test months)")
    for name, m in report.baselines.items():
        print(f"  {name}: MSE {m.mse:.6g}  MAE {m.mae:.6g}")
    return 0


def cmd_forecast(args) -> int:
    model, meta = _load_model(args.model)
    cfg = model.config
    series = read_series_csv(args.series)
    if len(series) < cfg.window_len:
        raise CliError(f"series has {len(series)} months; the model needs at least {cfg.window_len}")
    norm = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else Normalizer.fit(series.values)
    feature = None
    if cfg.topic_dim > 0:
        feats = _topic_features(series, cfg.topic_dim, args.dominant, args.embeddings)
        feature = feats.get(series.end_month, np.zeros(cfg.topic_dim))
    preds = predict_horizon(model, series, args.steps, norm, feature)
    rows = [(add_months(series.end_month, i + 1), repr(p.denormalized)) for i, p in enumerate(preds)]
    text = _csv_text(["month", "predicted_value"], rows)
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import format_results, run_all

    results = run_all(args.seed)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("%d check(s) failed: %s", len(failed), ", ".join(failed))
        return 1
    return 0


def cmd_ablation(args) -> int:
    from .benchmark import FULL_MODEL, PLAIN_TCN, run_ablation

    seeds = list(range(args.seeds))
    res = run_ablation(seeds, window_len=args.window_len, topic_dim=args.topic_dim)
    table = res.table()
    print(table)
    print()
    full, plain = res.mean_macro_f1(FULL_MODEL.name), res.mean_macro_f1(PLAIN_TCN.name)
    print(f"mean macro-F1: {FULL_MODEL.name} {full:.4f}  {PLAIN_TCN.name} {plain:.4f}  gap {full - plain:+.4f}")
    if args.report_out:
        _atomic_write(args.report_out, json.dumps(res.to_dict(), indent=1, sort_keys=True))
    if full < plain:
        log.error("ablation ordering violated: %s trails %s by %.4f macro-F1",
                  FULL_MODEL.name, PLAIN_TCN.name, plain - full)
        return 1
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="shdp-tcn", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic topic-heat series", formatter_class=fmt)
    g.add_argument("spec", help="synthetic spec JSON (fields of SyntheticSpec)")
    g.add_argument("out_dir", help="directory for <topic>.csv, ground_truth.json, dominant_topics.csv")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", help="records CSV -> monthly heat series CSV", formatter_class=fmt)
    i.add_argument("records", help="CSV with header month,category_id,topic_words")
    i.add_argument("--topic", required=True, help="topic word to count")
    i.add_argument("--out", required=True, help="output series CSV (month,value)")
    i.add_argument("--start", default=None, help="first month YYYY-MM (default: earliest record)")
    i.add_argument("--end", default=None, help="last month YYYY-MM (default: latest record)")
    i.add_argument("--dominant-out", default=None, help="also write month,topic of each month's hottest word")
    i.set_defaults(func=cmd_ingest)

    md, td = ModelConfig(), TrainConfig()
    # train flags default to None so config-file values survive; the help
    # strings carry the effective defaults instead
    t = sub.add_parser("train", help="train a model on a series CSV")
    t.add_argument("series", nargs="?", default=None,
                   help="series CSV (default: data.series from --config)")
    t.add_argument("--model-out", required=True, help="model JSON path")
    t.add_argument("--config", default=None,
                   help="JSON with optional model/train/split/data blocks; a manifest works")
    t.add_argument("--loss-out", default=None, help="loss history CSV (default: <model>.loss.csv)")
    t.add_argument("--manifest-out", default=None, help="manifest JSON (default: <model>.manifest.json)")
    t.add_argument("--window-len", type=int, default=None, help=f"history window (default {md.window_len})")
    t.add_argument("--topic-dim", type=int, default=None,
                   help=f"topic feature length, 0 disables (default {md.topic_dim})")
    t.add_argument("--channels", type=int, default=None, help="hidden channels (default: input channels)")
    t.add_argument("--kernel-size", type=int, default=None, help=f"kernel size (default {md.kernel_size})")
    t.add_argument("--num-blocks", type=int, default=None,
                   help=f"residual blocks, dilations 1,2,4,... (default {md.num_blocks})")
    t.add_argument("--dropout", type=float, default=None, help=f"dropout rate (default {md.dropout_rate})")
    t.add_argument("--no-attention", action="store_true", help="drop the self-attention encoder")
    t.add_argument("--seed", type=int, default=None, help=f"initialisation seed (default {md.seed})")
    t.add_argument("--batch-size", type=int, default=None, help=f"mini-batch size (default {td.batch_size})")
    t.add_argument("--epochs", type=int, default=None, help=f"training epochs (default {td.epochs})")
    t.add_argument("--lr", type=float, default=None, help=f"learning rate (default {td.learning_rate})")
    t.add_argument("--optimizer", choices=["adam", "sgd"], default=None, help=f"optimiser (default {td.optimizer})")
    t.add_argument("--shuffle-seed", type=int, default=None, help=f"batch shuffling seed (default {td.shuffle_seed})")
    t.add_argument("--cutoff", default=None, help=f"last training month (default {SplitSpec().cutoff_month})")
    t.add_argument("--dominant", default=None, help="month,topic CSV of dominant topics")
    t.add_argument("--embeddings", default=None, help="topic -> vector JSON (default: hash stub)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a model on the test months", formatter_class=fmt)
    e.add_argument("model", help="model JSON from train")
    e.add_argument("series", help="series CSV")
    e.add_argument("--report-out", required=True, help="report JSON; predictions CSV goes alongside")
    e.add_argument("--baseline-model", default=None, help="plain-TCN model JSON to add as a row")
    e.add_argument("--name", default="SHDP-TCN", help="row label of the evaluated model")
    e.add_argument("--dominant", default=None, help="month,topic CSV of dominant topics")
    e.add_argument("--embeddings", default=None, help="topic -> vector JSON (default: hash stub)")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="roll the model forward past the series end", formatter_class=fmt)
    f.add_argument("model", help="model JSON from train")
    f.add_argument("series", help="series CSV")
    f.add_argument("--steps", type=int, default=1, help="months to forecast")
    f.add_argument("--out", default=None, help="output CSV (default: stdout)")
    f.add_argument("--dominant", default=None, help="month,topic CSV of dominant topics")
    f.add_argument("--embeddings", default=None, help="topic -> vector JSON (default: hash stub)")
    f.set_defaults(func=cmd_forecast)

    c = sub.add_parser("gradcheck", help="finite-difference check of all ops and layers", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="seed for random test points")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablation", help="plain TCN vs full model on the synthetic suite", formatter_class=fmt)
    a.add_argument("--seeds", type=int, default=5, help="number of suite seeds (0..n-1)")
    a.add_argument("--window-len", type=int, default=12, help="history window")
    a.add_argument("--topic-dim", type=int, default=50, help="topic feature length of the full model")
    a.add_argument("--report-out", default=None, help="write all reports as JSON")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
