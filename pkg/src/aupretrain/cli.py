"""Command-line entry point: ``aupt synth | pretrain | finetune | eval | ablate | report``.

Every command takes ``--config FILE`` (plain ``key = value`` lines) and any
number of ``--set key=value`` overrides; the effective configuration is
echoed to stderr and written next to the outputs, and its hash is embedded
in every artifact. Relative input paths that do not exist are looked up
under ``$AUPT_DATA_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datapipe import load_manifest
from .errors import ConfigError, FormatError, ManifestError
from .metrics import FoldPredictions, build_report, bundled_tables, load_bundled_table, read_score_table
from .network import build_vgg13
from .splits import subject_kfold
from .synthgen import generate_dataset
from .trainer import evaluate_model, finetune, pretrain

DATA_ROOT_ENV = "AUPT_DATA_ROOT"
INCOMPLETE_MARKER = "INCOMPLETE"

log = logging.getLogger("aupt")


class CLIError(Exception):
    pass


def resolve_path(path):
    """``path`` as given if it exists, else relative to ``$AUPT_DATA_ROOT``."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def _require(path, what):
    p = resolve_path(path)
    if not p.exists():
        hint = f" (also looked under ${DATA_ROOT_ENV})" if os.environ.get(DATA_ROOT_ENV) else ""
        raise CLIError(f"{what} not found: {path}{hint}")
    return p


def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class OutputDir:
    """Output directory carrying an ``INCOMPLETE`` marker until the run succeeds."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / INCOMPLETE_MARKER).write_text("run did not finish\n", encoding="utf-8")
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.path / INCOMPLETE_MARKER).unlink()
        return False


def build_config(command, args):
    cfg = RunConfig(command)
    if args.config:
        cfg.update_from_file(_require(args.config, "config file"))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    sys.stderr.write(f"# effective config ({command}, hash {cfg.hash()})\n{cfg.dump()}")
    return cfg


def _load_data(path, cfg):
    manifest = load_manifest(_require(path, "manifest"), cfg["label_kind"])
    if cfg["au_columns"]:
        manifest = manifest.select_columns(cfg["au_columns"])
    return manifest


def _write_config(out, cfg):
    _atomic_text(Path(out) / "config.txt", f"# config_hash={cfg.hash()}\ncommand = {cfg.command}\n" + cfg.dump())


# -- predictions file -------------------------------------------------------

def predictions_csv(preds, au_names, config_hash, seed=None, threshold=None):
    buf = io.StringIO()
    prov = {"config_hash": config_hash, "seed": seed, "threshold": threshold}
    buf.write("# " + ",".join(f"{k}={v}" for k, v in prov.items() if v is not None) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "sample_id", "subject_id", *(f"score_{a}" for a in au_names), *(f"label_{a}" for a in au_names)])
    for fp in preds:
        subjects = fp.subject_ids or [""] * len(fp.sample_ids)
        for sid, subj, s, y in zip(fp.sample_ids, subjects, fp.scores, fp.labels):
            w.writerow([fp.fold, sid, subj, *(repr(float(v)) for v in s), *(int(v) for v in y)])
    return buf.getvalue()


def read_predictions(path):
    """(au_names, [FoldPredictions], provenance) from a predictions CSV."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    prov = {}
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for kv in ln[1:].strip().split(","):
                if "=" in kv:
                    k, v = kv.split("=", 1)
                    prov[k.strip()] = v.strip()
        else:
            body.append(ln)
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("predictions file is empty", row=1) from None
    if header[:3] != ["fold", "sample_id", "subject_id"] or (len(header) - 3) % 2:
        raise ManifestError("unexpected predictions header", row=1)
    n = (len(header) - 3) // 2
    au_names = tuple(h[len("score_"):] for h in header[3:3 + n])
    folds = {}
    for row_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ManifestError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
        try:
            fold = int(row[0])
            scores = [float(v) for v in row[3:3 + n]]
            labels = [int(v) for v in row[3 + n:]]
        except ValueError as exc:
            raise ManifestError(str(exc), row=row_no) from None
        entry = folds.setdefault(fold, ([], [], [], []))
        entry[0].append(int(row[1]) if row[1].lstrip("-").isdigit() else row[1])
        entry[1].append(row[2])
        entry[2].append(scores)
        entry[3].append(labels)
    preds = [
        FoldPredictions(f, ids, np.asarray(s, dtype=np.float64).reshape(-1, n), np.asarray(y, dtype=np.int64).reshape(-1, n), subj)
        for f, (ids, subj, s, y) in sorted(folds.items())
    ]
    return au_names, preds, prov


def _write_report(out, report, preds, au_names, cfg, prefix=""):
    out = Path(out)
    text = predictions_csv(preds, au_names, cfg.hash(), cfg["seed"], cfg["threshold"])
    _atomic_text(out / f"{prefix}predictions.csv", text)
    _atomic_text(out / f"{prefix}report.csv", report.to_csv())
    _atomic_text(out / f"{prefix}report.txt", report.to_text())


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    cfg = build_config("synth", args)
    with OutputDir(args.out) as out:
        manifest = generate_dataset(cfg.synth_spec(), out)
        _write_config(out, cfg)
    print(f"wrote {len(manifest)} images of {len(manifest.subjects())} subjects to {out}")
    return 0


def cmd_pretrain(args):
    cfg = build_config("pretrain", args)
    data = _load_data(args.manifest, cfg)
    out = Path(args.out)
    if args.init:
        net = load_checkpoint(_require(args.init, "checkpoint"))
    else:
        net = build_vgg13(cfg["in_channels"], len(data.au_columns), cfg["seed"], cfg["width_multiplier"], init=cfg["init"],
                              dropout_scale=cfg["dropout_scale"])
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log.jsonl")
    net, history = pretrain(net, data, cfg.train_config("pretrain"), log_path=log_path)
    meta = {"config_hash": cfg.hash(), "au_names": list(data.au_columns), "stage": "pretrain",
            "stop_reason": history.stop_reason, "epochs": len(history.epochs)}
    save_checkpoint(net, out, metadata=meta)
    _atomic_text(out.with_name(out.name + ".config.txt"), f"# config_hash={cfg.hash()}\n" + cfg.dump())
    print(f"pre-trained {len(history.epochs)} epochs ({history.stop_reason}); checkpoint {out}")
    return 0


def cmd_finetune(args):
    cfg = build_config("finetune", args)
    data = _load_data(args.manifest, cfg)
    net = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if net.in_channels != cfg["in_channels"]:
        raise ConfigError(f"checkpoint expects {net.in_channels} channels, config has in_channels={cfg['in_channels']}")
    folds = subject_kfold(data, cfg["folds"], cfg["seed"])
    h = cfg.hash()
    with OutputDir(args.out) as out:
        _write_config(out, cfg)
        result = finetune(net, data, folds, cfg.train_config("finetune"), log_dir=out)
        for f, fold_net in enumerate(result.networks):
            meta = {"config_hash": h, "au_names": list(data.au_columns), "stage": "finetune", "fold": f,
                    "best_epoch": result.histories[f].best_epoch, "stop_reason": result.histories[f].stop_reason}
            save_checkpoint(fold_net, out / f"fold{f}.aupt", metadata=meta)
        report = build_report(result.predictions, data.au_columns, {"config_hash": h, "seed": cfg["seed"]}, cfg["threshold"])
        _write_report(out, report, result.predictions, data.au_columns, cfg)
    print(report.to_text(), end="")
    return 0


def cmd_eval(args):
    cfg = build_config("eval", args)
    data = _load_data(args.manifest, cfg)
    net = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    h = cfg.hash()
    with OutputDir(args.out) as out:
        _write_config(out, cfg)
        scores, labels = evaluate_model(net, data)
        preds = [FoldPredictions(0, list(range(len(data))), scores, labels, list(data.subject_ids))]
        report = build_report(preds, data.au_columns, {"config_hash": h, "seed": cfg["seed"]}, cfg["threshold"])
        _write_report(out, report, preds, data.au_columns, cfg)
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args):
    cfg = build_config("ablate", args)
    if args.axis:
        cfg.set("axis", args.axis)
    if args.grid:
        cfg.set("grid", args.grid)
    axis = cfg["axis"]
    if axis not in ablation.AXES:
        raise ConfigError(f"axis must be one of {ablation.AXES}, got {axis!r}")
    grid = [ablation.parse_grid_value(v) for v in (cfg["grid"] or ablation.DEFAULT_GRIDS[axis])]
    pool = load_manifest(_require(args.pool, "pre-training manifest"), "binary")
    ft = _load_data(args.finetune, cfg)
    folds = subject_kfold(ft, cfg["folds"], cfg["seed"])
    h = cfg.hash()
    pre_cfg, ft_cfg = cfg.train_config("pretrain"), cfg.train_config("finetune")
    cache = {}
    with OutputDir(args.out) as out:
        _write_config(out, cfg)
        writer = ablation.SeriesWriter(out / f"series_{axis}.csv", h)
        for value in grid:
            for seed in cfg["seeds"]:
                point_dir = out / "points" / f"{axis}_{value}_seed{seed}"
                point_dir.mkdir(parents=True, exist_ok=True)
                point, report = ablation.run_point(
                    pool, ft, folds, axis, value, seed, pre_cfg, ft_cfg, cfg["width_multiplier"], cache,
                    cfg["gender_balanced"], cfg["images_per_point"], h, log_dir=point_dir, init=cfg["init"],
                    dropout_scale=cfg["dropout_scale"], pretrain_budget=cfg["pretrain_budget"],
                )
                _atomic_text(point_dir / "report.csv", report.to_csv())
                writer.add(point)
                print(f"{axis}={value} seed={seed} images={point.n_images} subjects={point.n_subjects} "
                      f"f1={point.f1:.4f} roc_auc={point.roc_auc:.4f} pr_auc={point.pr_auc:.4f}", flush=True)
        writer.close()
    return 0


def cmd_report(args):
    if args.list:
        print("\n".join(bundled_tables()))
        return 0
    if args.table:
        p = resolve_path(args.table)
        if p.suffix == ".csv" and p.exists():
            table = read_score_table(p.read_text(encoding="utf-8"))
        elif args.table in bundled_tables():
            table = load_bundled_table(args.table)
        else:
            raise CLIError(f"no score table file or bundled table named {args.table!r}; try --list")
        print(table.render())
        return 0
    if args.predictions:
        au_names, preds, prov = read_predictions(_require(args.predictions, "predictions file"))
        threshold = float(prov.pop("threshold", 0.5))
        prov.pop("folds", None)
        report = build_report(preds, au_names, prov, threshold)
        text = report.to_csv() if args.format == "csv" else report.to_text()
        if args.out:
            _atomic_text(args.out, text)
        else:
            print(text, end="")
        return 0
    if args.series:
        points = ablation.read_series(_require(args.series, "series file"))
        for metric in ("f1", "roc_auc", "pr_auc"):
            med = ablation.median_by_value(points, metric)
            print(f"{metric}: " + "  ".join(f"{v}={100 * m:.1f}" for v, m in med.items()))
        return 0
    raise CLIError("report needs one of --table, --predictions, --series or --list")


# -- parser -----------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aupt",
        description="Noisy-label pre-training and fine-tuning of a VGG13 action-unit detector.",
        epilog=f"Relative input paths that do not exist are resolved under ${DATA_ROOT_ENV}. "
               "Output directories hold an INCOMPLETE marker until the command succeeds.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted labels")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train on a noisy binary manifest and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh network")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="k-fold subject-independent fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep pre-training set size by images or subjects")
    p.add_argument("--pool", required=True, help="noisy pre-training manifest")
    p.add_argument("--finetune", required=True, help="clean fine-tuning manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--axis", choices=ablation.AXES)
    p.add_argument("--grid", help="comma-separated grid values; 0 = no pre-training, all = whole pool")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render tables from stored predictions, series or score tables")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--table", help="bundled table name or per-AU score CSV")
    g.add_argument("--predictions", help="predictions.csv written by finetune/eval")
    g.add_argument("--series", help="series CSV written by ablate")
    g.add_argument("--list", action="store_true", help="list bundled tables")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, FormatError, ManifestError, OSError, ValueError) as exc:
        print(f"aupt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
