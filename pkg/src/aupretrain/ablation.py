"""Pre-training set-size ablations.

Each grid point pre-trains a fresh network on a subset of the noisy pool,
chosen either by image count or by subject count, then runs the same
fine-tuning protocol on the clean set. A point value of ``0`` skips
pre-training (random initialization); ``"all"`` uses the whole pool.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError
from .metrics import build_report
from .network import build_vgg13
from .splits import sample_by_images, sample_by_subjects, spread_over_subjects
from .trainer import finetune, pretrain

AXES = ("images", "subjects")
DEFAULT_GRIDS = {
    "images": (1000, 2000, 10000, "all"),
    "subjects": (12, 200, 600, 1000, "all"),
}
INCOMPLETE = "# INCOMPLETE"


def parse_grid_value(value):
    if isinstance(value, str):
        if value.strip().lower() == "all":
            return "all"
        value = int(value.replace(",", "").replace("_", ""))
    if value < 0:
        raise ConfigError(f"grid values must be non-negative, got {value}")
    return int(value)


def ablation_subset(pool, axis, value, seed=0, gender_balanced=True, images_per_point=None):
    """Subset of ``pool`` for one grid point; ``None`` for the random-init point.

    On the subject axis ``images_per_point`` fixes the image count: after the
    subjects are drawn, that many of their images are taken, spread evenly
    over the chosen subjects.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")
    value = parse_grid_value(value)
    if value == 0:
        return None
    if value == "all":
        return pool
    if axis == "images":
        return sample_by_images(pool, value, gender_balanced, seed)
    chosen = sample_by_subjects(pool, value, gender_balanced, seed)
    if images_per_point is not None:
        chosen = spread_over_subjects(chosen, images_per_point, seed)
    return chosen


@dataclass(frozen=True)
class AblationPoint:
    axis: str
    value: str
    seed: int
    n_images: int
    n_subjects: int
    f1: float
    roc_auc: float
    pr_auc: float
    config_hash: str


SERIES_FIELDS = tuple(f.name for f in fields(AblationPoint))


def budget_epochs(budget, n_images):
    """Epochs needed to show ``budget`` images from a set of ``n_images``."""
    if budget < 1 or n_images < 1:
        raise ConfigError(f"pretrain_budget and subset size must be positive, got {budget}, {n_images}")
    return -(-int(budget) // int(n_images))


def run_point(pool, finetune_data, folds, axis, value, seed, pre_cfg, ft_cfg,
              width_multiplier=1.0, cache=None, gender_balanced=True, images_per_point=None,
              config_hash="", log_dir=None, init="he_uniform", dropout_scale=1.0, pretrain_budget=None):
    """Pre-train (unless the point is ``0``), fine-tune over ``folds`` and score.

    With ``pretrain_budget`` every point sees about the same number of
    training images: the epoch cap becomes ``ceil(budget / subset size)``.

    Returns the :class:`AblationPoint` and the pooled metrics report.
    """
    subset = ablation_subset(pool, axis, value, seed, gender_balanced, images_per_point)
    net = build_vgg13(pre_cfg.in_channels, len(pool.au_columns), seed, width_multiplier, init=init,
                      dropout_scale=dropout_scale)
    if subset is not None:
        log_path = Path(log_dir) / "pretrain.jsonl" if log_dir is not None else None
        cfg = replace(pre_cfg, seed=seed)
        if pretrain_budget is not None:
            cfg = replace(cfg, max_epochs=budget_epochs(pretrain_budget, len(subset)))
        pretrain(net, subset, cfg, cache=cache, log_path=log_path)
    result = finetune(net, finetune_data, folds, replace(ft_cfg, seed=seed), cache=cache, log_dir=log_dir)
    report = build_report(result.predictions, finetune_data.au_columns, {"config_hash": config_hash, "seed": seed})
    point = AblationPoint(
        axis=axis,
        value=str(parse_grid_value(value)),
        seed=int(seed),
        n_images=0 if subset is None else len(subset),
        n_subjects=0 if subset is None else len(subset.subjects()),
        f1=float(report.macro["f1"]),
        roc_auc=float(report.macro["roc_auc"]),
        pr_auc=float(report.macro["pr_auc"]),
        config_hash=config_hash,
    )
    return point, report


def _row(point):
    d = asdict(point)
    for k in ("f1", "roc_auc", "pr_auc"):
        d[k] = f"{d[k]:.6f}"
    return [d[k] for k in SERIES_FIELDS]


class SeriesWriter:
    """Appends points to a series CSV as they finish.

    The file starts with an ``# INCOMPLETE`` marker line that is replaced by
    the provenance line once :meth:`close` is called after the last point.
    """

    def __init__(self, path, config_hash):
        self.path = Path(path)
        self.config_hash = config_hash
        self.points = []
        self._flush(complete=False)

    def add(self, point):
        self.points.append(point)
        self._flush(complete=False)

    def close(self):
        self._flush(complete=True)

    def _flush(self, complete):
        self.path.write_text(series_csv(self.points, self.config_hash, complete), encoding="utf-8")


def series_csv(points, config_hash, complete=True):
    buf = io.StringIO()
    if not complete:
        buf.write(INCOMPLETE + "\n")
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_FIELDS)
    for p in points:
        w.writerow(_row(p))
    return buf.getvalue()


def read_series(path):
    """Points of a series CSV; raises if the file is marked incomplete."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and lines[0] == INCOMPLETE:
        raise ManifestError("series file is marked INCOMPLETE", row=1)
    body = [ln for ln in lines if not ln.startswith("#")]
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != SERIES_FIELDS:
        raise ManifestError(f"unexpected series header {reader.fieldnames}", row=1)
    out = []
    for r in reader:
        out.append(AblationPoint(
            axis=r["axis"], value=r["value"], seed=int(r["seed"]), n_images=int(r["n_images"]),
            n_subjects=int(r["n_subjects"]), f1=float(r["f1"]), roc_auc=float(r["roc_auc"]),
            pr_auc=float(r["pr_auc"]), config_hash=r["config_hash"],
        ))
    return out


def median_by_value(points, metric="f1"):
    """{grid value: median of ``metric`` over seeds}, in first-seen order."""
    groups = {}
    for p in points:
        groups.setdefault(p.value, []).append(getattr(p, metric))
    return {v: float(np.median(s)) for v, s in groups.items()}


def count_inversions(series, tolerance=0.0):
    """Adjacent decreases in ``series``; returns (count, largest drop).

    Drops no larger than ``tolerance`` are not counted.
    """
    drops = [a - b for a, b in zip(series[:-1], series[1:]) if a - b > tolerance]
    return len(drops), max(drops, default=0.0)


def directional_ok(series, max_inversions=1, max_drop=0.02):
    """Non-decreasing, allowing ``max_inversions`` drops each at most ``max_drop``."""
    drops = [a - b for a, b in zip(series[:-1], series[1:]) if a > b]
    return len(drops) <= max_inversions and all(d <= max_drop for d in drops)
