"""Batch command line: synth | scatter | train | predict | evaluate | ablate |
ensemble-curve | filterbank dump.

Exit codes: 0 success, 1 usage, 2 I/O, 3 undefined metric or degenerate
data, 4 numerical divergence.

Seeds: every stage seed is ``derive_seed(top_seed, stage)`` with stages
``synth``, ``partition``, ``model-init`` and ``train``; section-level seed
fields in the config are overwritten.
"""
import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .config import load_config
from .ensemble import (
    arousal_score,
    average_posteriors,
    list_prediction_dirs,
    load_prediction,
    save_prediction,
)
from .errors import ArousalError, InputError, MalformedHeaderError
from .filterbank import build_filterbank, dump_filterbank
from .metrics import gross_metrics
from .model import load_model, save_model, write_history
from .pipeline import derive_seed, normalize_all, predict_probs, scatter_records, train_bdc
from .scattering import (
    apply_normalizer,
    fit_normalizer,
    list_feature_dirs,
    load_features,
    load_normalizer,
    save_features,
    save_normalizer,
)

log = logging.getLogger("scatarousal")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump_json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _emit(obj, out=None, name=None):
    text = _dump_json(obj)
    if out is not None and name is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    sys.stdout.write(text)


def _require_dir(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise MalformedHeaderError(f"{what} directory {p} does not exist")
    return p


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise MalformedHeaderError(f"{what} file {p} does not exist")
    return p


def _writable(out):
    if out is None:
        raise UsageError("--out is required")
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise MalformedHeaderError(f"cannot create output directory {p}: {e}") from e
    return p


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.synth = replace(cfg.synth, seed=derive_seed(cfg.seed, "synth"))
    cfg.model = replace(cfg.model, seed=derive_seed(cfg.seed, "model-init"))
    cfg.train = replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
    for key in ("hidden_units",):
        v = getattr(args, key, None)
        if v is not None:
            cfg.model = replace(cfg.model, **{key: v})
    for key in ("max_epochs", "patience", "learning_rate", "max_length", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.train = replace(cfg.train, **{key: v})
    if getattr(args, "auto_class_weight", False):
        cfg.train = replace(cfg.train, auto_class_weight=True)
    return cfg


def _load_feature_set(root, channels=None):
    dirs = list_feature_dirs(_require_dir(root, "features"))
    if not dirs:
        raise InputError(f"no feature containers under {root}")
    feats = [load_features(d) for d in dirs]
    if channels:
        names = D.resolve_group(channels)
        feats = [f.select_channels([n for n in f.channel_names if n in names]) for f in feats]
        if any(f.n_channels != len(names) for f in feats):
            raise D.ChannelLookupError(f"features lack channels of group {channels!r}")
    return {f.record_id: f for f in feats}


def _select_ids(all_ids, index_path, split, fold):
    if split in (None, "all"):
        return sorted(all_ids)
    index = D.load_index(_require_file(index_path, "index"))
    if split == "hot":
        ids = index.hot
    else:
        train, val, test = index.split(fold)
        ids = {"train": train, "val": val, "test": test, "heldout": test + index.hot}[split]
    missing = sorted(set(ids) - set(all_ids))
    if missing:
        raise InputError(f"records missing from feature set: {missing[:5]}")
    return sorted(ids)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    cfg = _config(args)
    if args.n_records is not None:
        cfg.synth = replace(cfg.synth, n_records=args.n_records)
    if args.duration is not None:
        cfg.synth = replace(cfg.synth, duration_s=args.duration)
    out = _writable(args.out)
    records = D.synth_generate(cfg.synth)
    for r in records:
        D.save_record(r, out / "records" / r.id)
    index = D.partition([r.id for r in records], derive_seed(cfg.seed, "partition"))
    D.save_index(index, out / "index.json")
    (out / "synth.json").write_text(_dump_json(cfg.synth.to_dict()))
    fr = [float((r.targets == 2).mean()) for r in records]
    _emit({"n_records": len(records), "records": [r.id for r in records],
           "mean_prevalence": float(np.mean(fr)), "index": str(out / "index.json"),
           "hot": index.hot})
    return EXIT_OK


def cmd_scatter(args):
    cfg = _config(args)
    rec_root = _require_dir(args.records, "records")
    out = _writable(args.out)
    dirs = D.list_record_dirs(rec_root)
    if not dirs:
        raise InputError(f"no record containers under {rec_root}")
    records = [D.load_record(d) for d in dirs]
    if args.channels:
        records = [D.select_channels(r, args.channels) for r in records]
    fb = build_filterbank(cfg.filterbank)
    feats = scatter_records(records, fb, jobs=args.jobs)
    summary = {"n_records": len(feats), "n_channels": feats[0].n_channels,
               "coefficients_per_channel": feats[0].n_paths,
               "frame_rate": feats[0].frame_rate,
               "reduction_ratio": cfg.filterbank.T / feats[0].n_paths}
    if args.normalize:
        index = D.load_index(_require_file(args.index, "index"))
        train_ids, _, _ = index.split(args.fold)
        by_id = {f.record_id: f for f in feats}
        norm = fit_normalizer([by_id[i] for i in train_ids])
        feats = normalize_all(feats, norm)
        save_normalizer(norm, out / "normalizer.json")
        summary["normalized"] = True
    for f in feats:
        save_features(f, out / f.record_id)
    _emit(summary)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    feats = _load_feature_set(args.features, args.channels)
    index = D.load_index(_require_file(args.index, "index"))
    out = _writable(args.out)
    train_ids, val_ids, test_ids = index.split(args.fold)
    result, norm, mcfg, tcfg = train_bdc(
        [feats[i] for i in train_ids], [feats[i] for i in val_ids], cfg.model, cfg.train,
        log=lambda e, tl, vl: log.info("epoch %d train %.5f val %.5f", e, tl, vl))
    meta = {
        "model_id": out.name,
        "epoch": result.best_epoch,
        "val_loss": result.best_val_loss,
        "seed": cfg.seed,
        "fold": args.fold,
        "epochs_run": len(result.history),
        "channel_names": feats[train_ids[0]].channel_names,
        "paths": [p.as_triple() for p in feats[train_ids[0]].paths],
        "train_config": tcfg.to_dict(),
        "normalizer": "normalizer.json" if norm is not None else None,
    }
    save_model(out, result.params, mcfg, meta)
    if norm is not None:
        save_normalizer(norm, out / "normalizer.json")
    write_history(out / "history.csv", result.history)
    _emit({"model": str(out), "best_epoch": result.best_epoch,
           "best_val_loss": result.best_val_loss, "epochs_run": len(result.history),
           "class_weights": tcfg.class_weights, "max_length": tcfg.max_length})
    return EXIT_OK


def _load_models(model_dirs):
    if not model_dirs:
        raise UsageError("at least one --model is required")
    models = []
    for d in sorted(model_dirs, key=lambda p: Path(p).name):
        d = _require_dir(d, "model")
        params, mcfg, header = load_model(d)
        norm = load_normalizer(d / header["normalizer"]) if header.get("normalizer") else None
        models.append((header.get("model_id", d.name), params, mcfg, norm,
                       header.get("channel_names")))
    return models


def _member_probs(models, feat):
    out = []
    for _, params, mcfg, norm, names in models:
        f = feat.select_channels(names) if names and names != feat.channel_names else feat
        out.append(predict_probs(params, mcfg, norm, f))
    return out


def cmd_predict(args):
    models = _load_models(args.model)
    feats = _load_feature_set(args.features)
    out = _writable(args.out)
    ids = _select_ids(feats, args.index, args.split, args.fold)
    for rid in ids:
        probs = average_posteriors(_member_probs(models, feats[rid]))
        save_prediction(out / rid, rid, probs, len(models), feats[rid].frame_rate)
    _emit({"n_records": len(ids), "n_members": len(models),
           "members": [m[0] for m in models], "out": str(out)})
    return EXIT_OK


def _curve_csv(path, header, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(a), repr(b)] for a, b in points)


def cmd_evaluate(args):
    pred_dirs = list_prediction_dirs(_require_dir(args.predictions, "predictions"))
    if not pred_dirs:
        raise InputError(f"no predictions under {args.predictions}")
    feats = _load_feature_set(args.features)
    pairs = []
    for d in pred_dirs:
        h, probs = load_prediction(d)
        rid = h["record_id"]
        if rid not in feats or feats[rid].frame_targets is None:
            raise InputError(f"no frame targets for record {rid}")
        pairs.append((rid, arousal_score(probs.astype(np.float64)), feats[rid].frame_targets))
    pairs.sort(key=lambda t: t[0])
    report = gross_metrics([(s, y) for _, s, y in pairs])
    doc = {**report.to_dict(), "n_records": len(pairs)}
    out = None
    if args.out:
        out = _writable(args.out)
        if args.curves:
            _curve_csv(out / "roc.csv", ["fpr", "tpr"], report.roc_points)
            _curve_csv(out / "pr.csv", ["recall", "precision"], report.pr_points)
    _emit(doc, out, "report.json")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args)
    root = _require_dir(args.dataset, "dataset")
    index = D.load_index(_require_file(args.index or root / "index.json", "index"))
    out = _writable(args.out)
    if args.features:
        feats = _load_feature_set(args.features)
    else:
        records = [D.load_record(d) for d in D.list_record_dirs(root)]
        fb = build_filterbank(cfg.filterbank)
        feats = {f.record_id: f for f in scatter_records(records, fb, jobs=args.jobs)}
    train_ids, val_ids, test_ids = index.split(args.fold)
    held = sorted(test_ids + index.hot)
    groups = args.groups or list(D.CHANNEL_GROUPS)
    rows = []
    for g in groups:
        names = D.resolve_group(g)

        def sub(ids):
            return [feats[i].select_channels(names) for i in ids]

        result, norm, mcfg, _ = train_bdc(sub(train_ids), sub(val_ids), cfg.model, cfg.train)
        probs = {f.record_id: predict_probs(result.params, mcfg, norm, f) for f in sub(held)}
        report = gross_metrics([(arousal_score(probs[i]), feats[i].frame_targets) for i in held],
                               curves=False)
        rows.append((g, len(names), report.auroc, report.auprc))
        log.info("ablate %s auroc %.4f auprc %.4f", g, report.auroc, report.auprc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n_channels", "auroc", "auprc"])
    w.writerows([g, n, repr(a), repr(p)] for g, n, a, p in rows)
    (out / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_ensemble_curve(args):
    models = _load_models(args.model)
    feats = _load_feature_set(args.features)
    out = _writable(args.out)
    ids = _select_ids(feats, args.index, args.split, args.fold)
    member_probs = {rid: _member_probs(models, feats[rid]) for rid in ids}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "auroc", "auprc", "members"])
    for k in range(1, len(models) + 1):
        pairs = [(arousal_score(average_posteriors(member_probs[rid][:k])),
                  feats[rid].frame_targets) for rid in ids]
        r = gross_metrics(pairs, curves=False)
        w.writerow([k, repr(r.auroc), repr(r.auprc), ";".join(m[0] for m in models[:k])])
    (out / "ensemble_curve.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_filterbank_dump(args):
    cfg = _config(args)
    out = _writable(args.out)
    manifest = dump_filterbank(build_filterbank(cfg.filterbank), out)
    _emit({k: manifest[k] for k in ("n_filters", "centers_hz", "frame_bounds",
                                    "covered_frame_bounds")})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="scatarousal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n-records", type=int)
    s.add_argument("--duration", type=float, help="record duration in seconds")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("scatter", parents=[common], help="compute scattering features")
    s.add_argument("--records", required=True, help="dataset or records directory")
    s.add_argument("--channels", help="channel group or channel name")
    s.add_argument("--normalize", action="store_true",
                   help="fit log-median normalizer on the fold's training records")
    s.add_argument("--index")
    s.add_argument("--fold", type=int, default=0)
    s.set_defaults(func=cmd_scatter)

    def train_flags(s):
        s.add_argument("--hidden-units", type=int)
        s.add_argument("--max-epochs", type=int)
        s.add_argument("--patience", type=int)
        s.add_argument("--learning-rate", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--max-length", type=int)
        s.add_argument("--auto-class-weight", action="store_true",
                       help="derive the arousal weight from training prevalence")

    s = sub.add_parser("train", parents=[common], help="train one classifier on a fold")
    s.add_argument("--features", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--channels", help="restrict to a channel group")
    train_flags(s)
    s.set_defaults(func=cmd_train)

    def split_flags(s):
        s.add_argument("--index")
        s.add_argument("--split", choices=["all", "hot", "test", "val", "train", "heldout"],
                       default="all")
        s.add_argument("--fold", type=int, default=0)

    s = sub.add_parser("predict", parents=[common], help="per-frame posteriors")
    s.add_argument("--model", action="append", required=True, help="model directory (repeat)")
    s.add_argument("--features", required=True)
    split_flags(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="gross AUROC/AUPRC")
    s.add_argument("--predictions", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--curves", action="store_true", help="write roc.csv and pr.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="channel-group experiment")
    s.add_argument("--dataset", required=True)
    s.add_argument("--index")
    s.add_argument("--features", help="pre-computed all-channel features")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--groups", nargs="+", help="channel groups (default: all, in order)")
    train_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("ensemble-curve", parents=[common], help="AUPRC vs ensemble size")
    s.add_argument("--model", action="append", required=True)
    s.add_argument("--features", required=True)
    split_flags(s)
    s.set_defaults(func=cmd_ensemble_curve)

    s = sub.add_parser("filterbank", help="filter bank utilities")
    fsub = s.add_subparsers(dest="fb_command", parser_class=_Parser)
    fsub.required = True
    d = fsub.add_parser("dump", parents=[common], help="write filter spectra")
    d.set_defaults(func=cmd_filterbank_dump)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"usage error: {e}\n")
        return EXIT_USAGE
    except ArousalError as e:
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code
    except OSError as e:
        sys.stderr.write(f"I/O error: {e}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
