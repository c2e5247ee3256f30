"""Classification metrics, confusion matrices, and CSV/SVG emission.

Class order everywhere is (-1, 0, +1): confusion rows are true classes,
columns predictions. Precision or recall with a zero denominator is
defined as 0 and the class is flagged rather than dropped; macro averages
run over all three classes, weighted averages use true-class support.
Emission is dependency-free and byte-deterministic: fixed float
formatting, sorted iteration, a fixed 800x480 SVG viewport.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSES = (-1, 0, 1)

_SVG_W, _SVG_H = 800, 480
_MARGIN = 50
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def confusion(y_true, y_pred):
    """3x3 count matrix, rows true (-1, 0, +1), columns predicted."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        bad = ~np.isin(arr, CLASSES)
        if bad.any():
            raise ValueError(f"foreign {name} label {arr[bad][0]!r}; alphabet is {CLASSES}")
    cm = np.zeros((3, 3), dtype=np.int64)
    np.add.at(cm, (y_true + 1, y_pred + 1), 1)
    return cm


def micro_recall(cm):
    """Micro-averaged recall; algebraically equals accuracy."""
    return float(np.trace(cm) / cm.sum())


@dataclass
class ClassificationReport:
    accuracy: float
    precision: dict
    recall: dict
    f1: dict
    support: dict
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division: list = field(default_factory=list)  # (class, metric) pairs


def report(cm):
    """Per-class precision/recall/F1 plus macro and weighted aggregates."""
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.shape != (3, 3) or (cm < 0).any():
        raise ValueError("confusion matrix must be 3x3 with non-negative counts")
    if total == 0:
        raise ValueError("empty confusion matrix")
    precision, recall, f1, support = {}, {}, {}, {}
    flagged = []
    for i, cls in enumerate(CLASSES):
        tp = cm[i, i]
        col = cm[:, i].sum()
        row = cm[i, :].sum()
        if col == 0:
            precision[cls] = 0.0
            flagged.append((cls, "precision"))
        else:
            precision[cls] = float(tp / col)
        if row == 0:
            recall[cls] = 0.0
            flagged.append((cls, "recall"))
        else:
            recall[cls] = float(tp / row)
        denom = precision[cls] + recall[cls]
        f1[cls] = 2.0 * precision[cls] * recall[cls] / denom if denom > 0 else 0.0
        support[cls] = int(row)
    weights = {cls: support[cls] / total for cls in CLASSES}
    return ClassificationReport(
        accuracy=float(np.trace(cm) / total),
        precision=precision, recall=recall, f1=f1, support=support,
        macro_precision=float(np.mean([precision[c] for c in CLASSES])),
        macro_recall=float(np.mean([recall[c] for c in CLASSES])),
        macro_f1=float(np.mean([f1[c] for c in CLASSES])),
        weighted_precision=float(sum(weights[c] * precision[c] for c in CLASSES)),
        weighted_recall=float(sum(weights[c] * recall[c] for c in CLASSES)),
        weighted_f1=float(sum(weights[c] * f1[c] for c in CLASSES)),
        zero_division=flagged)


# -- emission --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(c) for c in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_csv(path, reports):
    """reports: {(k, asset): ClassificationReport} -> one row per entry."""
    header = ["k", "asset", "accuracy",
              "precision_down", "precision_hold", "precision_up",
              "recall_down", "recall_hold", "recall_up",
              "f1_down", "f1_hold", "f1_up",
              "macro_precision", "macro_recall", "macro_f1",
              "weighted_precision", "weighted_recall", "weighted_f1"]
    rows = []
    for (k, asset) in sorted(reports):
        r = reports[(k, asset)]
        rows.append([k, asset, r.accuracy]
                    + [r.precision[c] for c in CLASSES]
                    + [r.recall[c] for c in CLASSES]
                    + [r.f1[c] for c in CLASSES]
                    + [r.macro_precision, r.macro_recall, r.macro_f1,
                       r.weighted_precision, r.weighted_recall, r.weighted_f1])
    _write_csv(path, header, rows)


def write_confusion_csv(path, cm):
    header = ["true\\pred", "down", "hold", "up"]
    names = ["down", "hold", "up"]
    rows = [[names[i]] + [int(v) for v in cm[i]] for i in range(3)]
    _write_csv(path, header, rows)


def write_summary_csv(path, summaries):
    """summaries: {strategy: PortfolioSummary} in the usual benchmark columns."""
    header = ["strategy", "expected_return", "mean_return", "standard_deviation",
              "sharpe_ratio", "pos_neg_ratio"]
    rows = []
    for name in sorted(summaries):
        s = summaries[name]
        rows.append([name, s.expected_return, s.mean_return, s.std_return,
                     s.sharpe if s.sharpe_defined else "undefined",
                     s.pos_neg_ratio if s.pos_neg_finite else "inf"])
    _write_csv(path, header, rows)


def cumlog_svg(series):
    """Line chart of cumulative log returns, one polyline per strategy.

    ``series`` maps strategy name -> 1D array. Output is a fixed-viewport
    SVG string; identical input yields identical bytes.
    """
    names = sorted(series)
    if not names:
        raise ValueError("no series to plot")
    all_y = np.concatenate([np.asarray(series[n], dtype=np.float64) for n in names])
    n_pts = max(len(series[n]) for n in names)
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    plot_w = _SVG_W - 2 * _MARGIN
    plot_h = _SVG_H - 2 * _MARGIN

    def sx(i):
        return _MARGIN + plot_w * (i / max(n_pts - 1, 1))

    def sy(v):
        return _SVG_H - _MARGIN - plot_h * ((v - y_lo) / (y_hi - y_lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
             f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
             f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
             f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
             f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
             f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
             f'<text x="{_MARGIN - 45}" y="{_MARGIN}" font-size="12">{y_hi:.4g}</text>',
             f'<text x="{_MARGIN - 45}" y="{_SVG_H - _MARGIN}" font-size="12">{y_lo:.4g}</text>']
    for j, name in enumerate(names):
        y = np.asarray(series[name], dtype=np.float64)
        color = _PALETTE[j % len(_PALETTE)]
        points = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points}"/>')
        parts.append(f'<text x="{_SVG_W - _MARGIN - 150}" y="{_MARGIN + 16 * j}" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(out_dir, reports=None, confusions=None, summaries=None, cumlog=None):
    """Write the standard artifact set into ``out_dir``; returns the paths.

    reports:    {(k, asset): ClassificationReport} -> report.csv
    confusions: {(k, asset): 3x3 matrix}           -> confusion_k{K}_{asset}.csv
    summaries:  {strategy: PortfolioSummary}       -> summary.csv
    cumlog:     {strategy: value series}           -> cumlog.svg
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if reports is not None:
        path = out / "report.csv"
        write_report_csv(path, reports)
        written.append(path)
    if confusions is not None:
        for (k, asset) in sorted(confusions):
            path = out / f"confusion_k{k}_{asset}.csv"
            write_confusion_csv(path, confusions[(k, asset)])
            written.append(path)
    if summaries is not None:
        path = out / "summary.csv"
        write_summary_csv(path, summaries)
        written.append(path)
    if cumlog:
        path = out / "cumlog.svg"
        log_series = {}
        for name, values in cumlog.items():
            values = np.asarray(values, dtype=np.float64)
            if (values <= 0).any():
                raise ValueError(f"non-positive portfolio value in series {name!r}")
            log_series[name] = np.log(values / values[0])
        path.write_text(cumlog_svg(log_series))
        written.append(path)
    return written
