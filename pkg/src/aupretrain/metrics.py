"""Per-AU F1, ROC-AUC and PR-AUC plus table-style reports.

Undefined metrics (ROC-AUC with a single class, PR-AUC without positives)
are reported as NaN, rendered as ``NA``, and skipped by macro averages.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

METRICS = ("f1", "roc_auc", "pr_auc")
NA = "NA"


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_2d(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ContractError(f"scores dims {s.shape} differ from labels dims {y.shape}")
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.ndim != 2:
        raise ContractError(f"expected (samples, labels) arrays, got dims {s.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be binary")
    return s, y.astype(bool)


def confusion_counts(scores, labels, threshold=0.5):
    """Per-column counts; a sample is predicted positive iff score >= threshold."""
    s, y = _as_2d(scores, labels)
    pred = s >= threshold
    return ConfusionCounts(
        tp=(pred & y).sum(axis=0),
        fp=(pred & ~y).sum(axis=0),
        tn=(~pred & ~y).sum(axis=0),
        fn=(~pred & y).sum(axis=0),
    )


def f1_score(counts):
    """2 tp / (2 tp + fp + fn), with 0 where the denominator vanishes."""
    tp = np.asarray(counts.tp, dtype=np.float64)
    denom = 2 * tp + counts.fp + counts.fn
    out = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(out) if out.ndim == 0 else out


def roc_auc(scores, labels):
    """Mann-Whitney statistic P(pos > neg) + P(tie) / 2, or NaN for a single class."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ContractError(f"scores dims {s.shape} differ from labels dims {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels):
    """Average precision: sum over thresholds of precision times the recall increment."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ContractError(f"scores dims {s.shape} differ from labels dims {y.shape}")
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last position of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_t = tp[ends]
    precision = tp_t / (ends + 1.0)
    recall = tp_t / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def per_au_metrics(scores, labels, threshold=0.5):
    s, y = _as_2d(scores, labels)
    return {
        "f1": np.asarray(f1_score(confusion_counts(s, y, threshold)), dtype=np.float64).reshape(-1),
        "roc_auc": np.array([roc_auc(s[:, j], y[:, j]) for j in range(s.shape[1])]),
        "pr_auc": np.array([pr_auc(s[:, j], y[:, j]) for j in range(s.shape[1])]),
    }


def macro(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")


@dataclass
class FoldPredictions:
    fold: int
    sample_ids: list
    scores: np.ndarray
    labels: np.ndarray
    subject_ids: list = field(default_factory=list)


@dataclass
class MetricsReport:
    au_names: tuple
    values: dict  # metric -> per-AU array (pooled over folds)
    macro: dict  # metric -> macro average of the pooled values
    fold_macro: dict  # metric -> mean over folds of each fold's macro average
    provenance: dict

    @property
    def f1(self):
        return self.values["f1"]

    @property
    def roc_auc(self):
        return self.values["roc_auc"]

    @property
    def pr_auc(self):
        return self.values["pr_auc"]

    def rows(self):
        out = [(m, list(self.values[m]) + [self.macro[m]]) for m in METRICS]
        out += [(f"{m}_fold_mean", [float("nan")] * len(self.au_names) + [self.fold_macro[m]]) for m in METRICS]
        return out

    def provenance_line(self):
        return "# " + ",".join(f"{k}={self.provenance[k]}" for k in sorted(self.provenance))

    def to_csv(self):
        buf = io.StringIO()
        buf.write(self.provenance_line() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.au_names, "Avg"])
        for name, vals in self.rows():
            w.writerow([name, *(fmt_pct(v) for v in vals)])
        return buf.getvalue()

    def to_text(self):
        return self.provenance_line() + "\n" + render_table(self.rows(), self.au_names, first_header="Metric") + "\n"


def fmt_pct(value):
    """Format a [0, 1] metric as a percentage with one decimal."""
    return NA if not np.isfinite(value) else f"{100.0 * value:.1f}"


def build_report(folds, au_names, provenance=None, threshold=0.5):
    """Pool per-fold test predictions and compute per-AU and macro metrics."""
    folds = list(folds)
    if not folds:
        raise ContractError("no fold predictions given")
    seen = {}
    for fp in folds:
        for sid in fp.sample_ids:
            if sid in seen:
                raise ContractError(f"sample {sid!r} predicted in folds {seen[sid]} and {fp.fold}")
            seen[sid] = fp.fold
        if np.asarray(fp.scores).shape[1] != len(au_names):
            raise ContractError(f"fold {fp.fold} has {np.asarray(fp.scores).shape[1]} score columns, expected {len(au_names)}")
    scores = np.concatenate([np.asarray(f.scores, dtype=np.float64) for f in folds])
    labels = np.concatenate([np.asarray(f.labels) for f in folds])
    values = per_au_metrics(scores, labels, threshold)
    per_fold = [per_au_metrics(f.scores, f.labels, threshold) for f in folds]
    prov = {"folds": ";".join(str(f.fold) for f in folds), "threshold": threshold}
    prov.update(provenance or {})
    return MetricsReport(
        au_names=tuple(au_names),
        values=values,
        macro={m: macro(values[m]) for m in METRICS},
        fold_macro={m: macro([macro(p[m]) for p in per_fold]) for m in METRICS},
        provenance=prov,
    )


def render_table(rows, au_names, first_header="", scale=100.0):
    """Aligned text table; ``rows`` are (label, values incl. trailing Avg)."""
    header = [first_header, *au_names, "Avg"]
    body = []
    for label, vals in rows:
        cells = [NA if not np.isfinite(v) else f"{scale * v:.1f}" for v in vals]
        body.append([str(label), *cells])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = [" | ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)) for r in [header, *body]]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


# -- bundled per-AU score tables ------------------------------------------

@dataclass
class ScoreTable:
    """Per-AU scores in percent, one row per method or configuration."""

    name: str
    au_names: tuple
    rows: list  # (label, per-AU values in percent)

    def means(self):
        return {label: float(np.mean(vals)) for label, vals in self.rows}

    def render(self):
        rows = [(label, [v / 100.0 for v in vals] + [np.mean(vals) / 100.0]) for label, vals in self.rows]
        return render_table(rows, self.au_names, first_header=self.name)


def read_score_table(text, name=""):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = [(r[0], [float(v) for v in r[1:]]) for r in reader if r]
    return ScoreTable(name or header[0], tuple(header[1:]), rows)


def bundled_tables():
    """Names of the score tables shipped with the package."""
    files = resources.files("aupretrain") / "fixtures"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".csv"))


def load_bundled_table(name):
    text = (resources.files("aupretrain") / "fixtures" / f"{name}.csv").read_text(encoding="utf-8")
    return read_score_table(text)
