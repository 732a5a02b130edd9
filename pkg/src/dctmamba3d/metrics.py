"""Confusion matrix, OA / AA / Kappa / per-class F1, and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def confusion(preds, labels, k: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} out of range [0, {k})")
    return np.bincount(labels * k + preds, minlength=k * k).reshape(k, k)


@dataclass
class Scores:
    oa: float
    aa: float
    kappa: float
    recall: np.ndarray
    precision: np.ndarray
    f1: np.ndarray
    n: int
    expected_agreement: float


def scores(cm) -> Scores:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    oa = tp.sum() / total
    recall = np.divide(tp, rows, out=np.zeros_like(tp), where=rows > 0)
    precision = np.divide(tp, cols, out=np.zeros_like(tp), where=cols > 0)
    aa = float(recall[rows > 0].mean())
    pe = float(np.sum(rows * cols) / total ** 2)
    # a single populated class that is always predicted leaves Kappa undefined; report 0
    kappa = (oa - pe) / (1 - pe) if pe < 1 else 0.0
    denom = rows + cols
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return Scores(float(oa), aa, float(kappa), recall, precision, f1, int(total), pe)


def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def report(sc: Scores, class_names, destination) -> tuple[Path, Path]:
    """Write ``metrics.csv`` (class, recall, f1) and ``summary.json`` (oa, aa, kappa, n)."""
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(sc.recall))]
    csv_path = dest / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "recall", "f1"])
        for name, r, f in zip(names, sc.recall, sc.f1):
            w.writerow([name, pct(r), pct(f)])
    json_path = dest / "summary.json"
    # hand-formatted so percentages keep two decimals ("100.00")
    json_path.write_text("{" + ", ".join([f'"oa": {pct(sc.oa)}', f'"aa": {pct(sc.aa)}',
                                          f'"kappa": {pct(sc.kappa)}', f'"n": {sc.n}']) + "}\n")
    return csv_path, json_path


def read_report(destination) -> tuple[list, dict]:
    dest = Path(destination)
    with open(dest / "metrics.csv", newline="") as fh:
        rows = [(r["class"], float(r["recall"]), float(r["f1"])) for r in csv.DictReader(fh)]
    return rows, json.loads((dest / "summary.json").read_text())
