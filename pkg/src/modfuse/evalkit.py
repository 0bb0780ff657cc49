"""AUROC computation, grouped macro averaging, and report emission.

AUROC uses the rank-sum (Mann-Whitney) formulation with average ranks
for ties, which equals the probability that a random positive outscores
a random negative with ties worth 1/2, and equals trapezoidal ROC area.
Labels whose evaluation column holds a single class are skipped and
excluded from group means rather than backfilled with 0.5.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import LabelSpace
from .errors import ConfigurationError, DegenerateEvaluationError, SingleClassError

GROUPS = ("all", "acute", "mixed", "chronic")
REGIMES = ("paired", "fallback")


def auroc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ConfigurationError(f"auroc: bad input shapes {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ConfigurationError("auroc: labels must be 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(n_pos, n_neg)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and sorted_s[j] == sorted_s[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average 1-based rank of the tie block
        i = j
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class LabelEval:
    index: int
    name: str
    group: str
    auroc: float | None
    skipped: str | None = None


@dataclass
class EvalReport:
    labels: list[LabelEval]
    macro: dict[str, float | None]
    n_samples: int
    n_skipped: int
    regime: str
    per_label: dict[str, float | None] = field(init=False)

    def __post_init__(self):
        self.per_label = {e.name: e.auroc for e in self.labels}

    def to_json_dict(self) -> dict:
        return {
            "regime": self.regime,
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "macro": self.macro,
            "labels": [
                {"index": e.index, "name": e.name, "group": e.group,
                 "auroc": e.auroc, "skipped": e.skipped}
                for e in self.labels
            ],
        }


def macro_auroc(scores: np.ndarray, labels: np.ndarray, label_space: LabelSpace,
                regime: str = "paired") -> EvalReport:
    """Per-label AUROC over an eval set plus group means (all/acute/mixed/chronic)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_task = len(label_space.task_labels)
    if scores.ndim != 2 or scores.shape[1] != n_task or scores.shape != labels.shape:
        raise ConfigurationError(
            f"macro_auroc: expected [n, {n_task}] scores/labels, got {scores.shape}/{labels.shape}"
        )
    entries: list[LabelEval] = []
    for k in range(n_task):
        name = label_space.task_labels[k]
        group = label_space.task_groups[k]
        try:
            value = auroc(scores[:, k], labels[:, k])
            entries.append(LabelEval(k, name, group, value))
        except SingleClassError as exc:
            reason = f"single-class: {exc.n_pos} positives, {exc.n_neg} negatives"
            entries.append(LabelEval(k, name, group, None, skipped=reason))

    n_skipped = sum(1 for e in entries if e.skipped is not None)
    if n_skipped == n_task:
        raise DegenerateEvaluationError("every label was skipped")

    macro: dict[str, float | None] = {}
    for group in GROUPS:
        vals = [e.auroc for e in entries
                if e.auroc is not None and (group == "all" or e.group == group)]
        macro[group] = float(np.mean(vals)) if vals else None
    return EvalReport(entries, macro, n_samples=scores.shape[0],
                      n_skipped=n_skipped, regime=regime)


def evaluate_pairs(bundle, pairs, data, label_space: LabelSpace, regime: str) -> EvalReport:
    """Score timestamp-matched pairs (sorted by stay id) under one regime.

    `paired` uses the unified prediction; `fallback` withholds every image
    and therefore reduces to the ehr-branch forward pass.
    """
    from .trainer import predict_batch  # deferred: trainer imports this module

    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    if not pairs:
        raise ConfigurationError("evaluate: empty pair set")
    ordered = sorted(pairs, key=lambda p: p.episode.stay_id)
    episodes = [data.disc[p.episode.stay_id] for p in ordered]
    images = None
    if regime == "paired":
        images = [p.image.pixels[None] for p in ordered]
    scores = predict_batch(bundle, episodes, images)
    labels = np.stack([p.episode.labels for p in ordered])
    return macro_auroc(scores, labels, label_space, regime=regime)


def evaluate(bundle, data, split: str, regime: str) -> EvalReport:
    """Evaluate one split's pairs; see `evaluate_pairs`."""
    pairs = data.pairs_of(split)
    if not pairs:
        raise ConfigurationError(f"evaluate: split {split!r} has no pairs")
    return evaluate_pairs(bundle, pairs, data, data.label_space, regime)


def write_report(report: EvalReport, json_path, csv_path):
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "group", "auroc", "skipped"])
        for e in report.labels:
            writer.writerow([
                e.name, e.group,
                "" if e.auroc is None else repr(e.auroc),
                e.skipped or "",
            ])
