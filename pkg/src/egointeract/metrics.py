"""Per-frame average precision and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Items are ranked by descending score; ties keep their input order.
    Returns None when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.nonzero(hits)[0] + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


@dataclass
class EvalReport:
    classes: dict[str, list[str]]
    ap: dict[str, dict[str, float | None]]
    mAP: dict[str, float]
    n_frames: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"classes": self.classes, "ap": self.ap, "mAP": self.mAP, "n_frames": self.n_frames,
                "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "class", "ap"])
        for head, classes in self.classes.items():
            for c in classes:
                v = self.ap[head][c]
                w.writerow([head, c, "" if v is None else repr(v)])
            w.writerow([head, "mAP", repr(self.mAP[head])])
        return buf.getvalue()


def head_map(ap: dict[str, float | None]) -> float:
    """Mean AP over foreground classes that have positives; background is excluded."""
    vals = [v for c, v in ap.items() if c != "background" and v is not None]
    return float(np.mean(vals)) if vals else 0.0


def report_from_scores(classes: dict[str, list[str]], scores: dict[str, np.ndarray],
                       labels: dict[str, np.ndarray]) -> EvalReport:
    """``scores[h]`` is (frames, C) and ``labels[h]`` is (frames,) class indices."""
    ap, maps, n, notes = {}, {}, 0, []
    for h, names in classes.items():
        s, y = scores[h], labels[h]
        n = len(y)
        ap[h] = {c: average_precision(s[:, k], y == k) for k, c in enumerate(names)}
        maps[h] = head_map(ap[h])
        notes += [f"{h}/{c}: no positive frames, skipped" for c, v in ap[h].items() if v is None]
    return EvalReport(classes, ap, maps, n, {"notes": notes})
