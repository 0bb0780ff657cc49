"""The dynamic training loop, its three baselines, and inference.

One `unified` iteration runs two phases. The modality phase samples an
unpaired radiograph batch and an unpaired physiological batch, computes
each branch's BCE against its own label set, backpropagates their sum,
and steps exactly the four modality groups (both encoders, both modality
heads). The unified phase samples a paired batch, concatenates the
encoders' features (image first), and steps exactly the unified head -
classifier-only, so the encoder forwards run off-tape.

Baselines: `ehr_only` trains just the sequence branch; `joint_i` trains
encoders plus unified head end-to-end on pairs from scratch; `joint_ii`
first pretrains both branches on their unpaired streams, then fine-tunes
end-to-end on pairs like joint_i.

Gradient hygiene is explicit: every phase zeroes its own group's
gradients before backward, and each optimizer zeroes them again after
stepping, so interleaved phases never leak gradient mass into each other.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Adam, Graph, Tensor, add, bce_loss, concat, concat_rows, mul, zero_grads
from .encoders import ModelBundle, head_forward, img_encode_batch, seq_encode_batch
from .errors import ConfigurationError, DivergenceError, UnsupportedInputError
from .evalkit import evaluate_pairs
from .ingest import CohortData, Streams, assemble_cxr, assemble_ehr, assemble_pairs, group_by_length

MODES = ("unified", "joint_i", "joint_ii", "ehr_only")
MODALITY_GROUPS = ("seq_enc", "img_enc", "head_ehr", "head_cxr")
JOINT_GROUPS = ("seq_enc", "img_enc", "head_unified")


@dataclass
class TrainConfig:
    """One training run. Per-modality loss weights default to 1/1; the
    recorded L_cxr/L_ehr include their weights so L_sum = L_cxr + L_ehr
    holds for every run."""
    mode: str
    n_iters: int
    batch_cxr: int = 16
    batch_ehr: int = 16
    batch_pair: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 100
    patience: int | None = None
    seed: int = 0
    pretrain_iters: int | None = None  # joint_ii only; defaults to n_iters
    loss_weight_cxr: float = 1.0
    loss_weight_ehr: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_iters < 1:
            raise ConfigurationError("n_iters must be >= 1")
        if min(self.batch_cxr, self.batch_ehr, self.batch_pair) < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")


@dataclass
class IterRecord:
    iteration: int
    l_cxr: float | None = None
    l_ehr: float | None = None
    l_sum: float | None = None
    l_cat: float | None = None
    val_auroc: float | None = None


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[IterRecord]
    best_val: float | None
    best_iteration: int | None


def _seq_features(bundle: ModelBundle, groups: list[np.ndarray]):
    feats = [seq_encode_batch(bundle, g) for g in groups]
    return feats[0] if len(feats) == 1 else concat_rows(feats)


def _scaled(loss, weight: float):
    if weight == 1.0:
        return loss
    return mul(loss, Tensor(np.float64(weight)))


def _check_finite(values, iteration: int):
    if not all(math.isfinite(v) for v in values):
        raise DivergenceError(iteration)


def phase_modality_step(bundle: ModelBundle, optimizer: Adam, cxr_batch, ehr_batch,
                        w_cxr: float = 1.0, w_ehr: float = 1.0, iteration: int = 0):
    """Unpaired phase: both branch losses, one step on the four modality groups."""
    imgs, aux_labels = cxr_batch
    groups, task_labels = ehr_batch
    zero_grads(optimizer.params)
    with Graph() as g:
        p_cxr = head_forward(bundle, "cxr", img_encode_batch(bundle, imgs))
        l_cxr = _scaled(bce_loss(p_cxr, Tensor(aux_labels)), w_cxr)
        p_ehr = head_forward(bundle, "ehr", _seq_features(bundle, groups))
        l_ehr = _scaled(bce_loss(p_ehr, Tensor(task_labels)), w_ehr)
        l_sum = add(l_cxr, l_ehr)
    values = (l_cxr.item(), l_ehr.item(), l_sum.item())
    _check_finite(values, iteration)
    g.backward(l_sum)
    optimizer.step()
    return values


def phase_unified_step(bundle: ModelBundle, optimizer: Adam, pair_batch,
                       iteration: int = 0) -> float:
    """Paired phase: concatenated features into the unified head; only the
    classifier's parameters are updated, so encoders run off-tape."""
    groups, imgs, labels = pair_batch
    img_f = img_encode_batch(bundle, imgs)
    seq_f = _seq_features(bundle, groups)
    zero_grads(optimizer.params)
    with Graph() as g:
        fused = concat(img_f, seq_f)
        l_cat = bce_loss(head_forward(bundle, "unified", fused), Tensor(labels))
    value = l_cat.item()
    _check_finite((value,), iteration)
    g.backward(l_cat)
    optimizer.step()
    return value


def _joint_step(bundle: ModelBundle, optimizer: Adam, pair_batch, iteration: int = 0) -> float:
    """End-to-end fusion step on pairs (joint_i and joint_ii fine-tuning)."""
    groups, imgs, labels = pair_batch
    zero_grads(optimizer.params)
    with Graph() as g:
        fused = concat(img_encode_batch(bundle, imgs), _seq_features(bundle, groups))
        l_cat = bce_loss(head_forward(bundle, "unified", fused), Tensor(labels))
    value = l_cat.item()
    _check_finite((value,), iteration)
    g.backward(l_cat)
    optimizer.step()
    return value


def _ehr_step(bundle: ModelBundle, optimizer: Adam, ehr_batch, iteration: int = 0) -> float:
    groups, task_labels = ehr_batch
    zero_grads(optimizer.params)
    with Graph() as g:
        p_ehr = head_forward(bundle, "ehr", _seq_features(bundle, groups))
        l_ehr = bce_loss(p_ehr, Tensor(task_labels))
    value = l_ehr.item()
    _check_finite((value,), iteration)
    g.backward(l_ehr)
    optimizer.step()
    return value


def predict(bundle: ModelBundle, episode: np.ndarray | None,
            image: np.ndarray | None = None) -> np.ndarray:
    """Task-label probabilities for one sample.

    `episode` is a discretized [T, 34] tensor (the base modality, always
    required); `image` is [1, side, side] pixels or None. With an image
    the unified head scores the concatenated features; without one the
    prediction falls back to the ehr branch's own head.
    """
    if episode is None:
        raise UnsupportedInputError("the base modality (ehr episode) is required")
    from .encoders import img_encode, seq_encode

    seq_f = seq_encode(bundle, np.asarray(episode, dtype=np.float64))
    if image is None:
        return head_forward(bundle, "ehr", seq_f).data.copy()
    img_f = img_encode(bundle, np.asarray(image, dtype=np.float64))
    return head_forward(bundle, "unified", concat(img_f, seq_f)).data.copy()


def predict_batch(bundle: ModelBundle, episodes: list, images: list | None = None) -> np.ndarray:
    """Vectorized `predict` over many samples; rows follow input order."""
    n = len(episodes)
    n_task = bundle.groups["head_ehr"]["w"].data.shape[1]
    scores = np.empty((n, n_task))
    if n == 0:
        return scores
    groups, order = group_by_length([np.asarray(e, dtype=np.float64) for e in episodes])
    pos = 0
    for grp in groups:
        b = grp.shape[0]
        idxs = order[pos:pos + b]
        seq_f = seq_encode_batch(bundle, grp)
        if images is None:
            p = head_forward(bundle, "ehr", seq_f)
        else:
            imgs = np.stack([np.asarray(images[i], dtype=np.float64) for i in idxs])
            p = head_forward(bundle, "unified", concat(img_encode_batch(bundle, imgs), seq_f))
        scores[idxs] = p.data
        pos += b
    return scores


def validation_regime(mode: str) -> str:
    return "fallback" if mode == "ehr_only" else "paired"


def train(bundle: ModelBundle, data: CohortData, streams: Streams,
          config: TrainConfig) -> TrainResult:
    """Run one configured mode; returns the best-validation bundle and history.

    Validation macro-AUROC (all 25 labels) is measured on the val split's
    pairs every `eval_interval` iterations and at the last one; the
    checkpoint with the best score wins. `patience` counts evaluations
    without improvement before stopping early.
    """
    opt_args = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    val_pairs = data.pairs_of("val")
    regime = validation_regime(config.mode)
    history: list[IterRecord] = []
    best: dict | None = None
    stale = 0

    def run_validation(record: IterRecord):
        nonlocal best, stale
        if not val_pairs:
            return False
        report = evaluate_pairs(bundle, val_pairs, data, data.label_space, regime)
        score = report.macro["all"]
        record.val_auroc = score
        if best is None or score > best["score"]:
            best = {"score": score, "iteration": record.iteration, "state": bundle.copy_state()}
            stale = 0
        else:
            stale += 1
        return config.patience is not None and stale >= config.patience

    def eval_due(step: int, total: int) -> bool:
        return (step + 1) % config.eval_interval == 0 or step == total - 1

    if config.mode == "unified":
        opt_mod = Adam(bundle.params(*MODALITY_GROUPS), **opt_args)
        opt_uni = Adam(bundle.params("head_unified"), **opt_args)
        for i in range(config.n_iters):
            l_cxr, l_ehr, l_sum = phase_modality_step(
                bundle, opt_mod,
                assemble_cxr(data, streams.cxr.next_batch()),
                assemble_ehr(data, streams.ehr.next_batch()),
                config.loss_weight_cxr, config.loss_weight_ehr, i)
            l_cat = phase_unified_step(
                bundle, opt_uni, assemble_pairs(data, streams.pairs.next_batch()), i)
            record = IterRecord(i, l_cxr=l_cxr, l_ehr=l_ehr, l_sum=l_sum, l_cat=l_cat)
            history.append(record)
            if eval_due(i, config.n_iters) and run_validation(record):
                break

    elif config.mode == "ehr_only":
        opt = Adam(bundle.params("seq_enc", "head_ehr"), **opt_args)
        for i in range(config.n_iters):
            l_ehr = _ehr_step(bundle, opt, assemble_ehr(data, streams.ehr.next_batch()), i)
            record = IterRecord(i, l_ehr=l_ehr)
            history.append(record)
            if eval_due(i, config.n_iters) and run_validation(record):
                break

    elif config.mode == "joint_i":
        opt = Adam(bundle.params(*JOINT_GROUPS), **opt_args)
        for i in range(config.n_iters):
            l_cat = _joint_step(bundle, opt, assemble_pairs(data, streams.pairs.next_batch()), i)
            record = IterRecord(i, l_cat=l_cat)
            history.append(record)
            if eval_due(i, config.n_iters) and run_validation(record):
                break

    elif config.mode == "joint_ii":
        n_pre = config.pretrain_iters if config.pretrain_iters is not None else config.n_iters
        opt_pre = Adam(bundle.params(*MODALITY_GROUPS), **opt_args)
        for i in range(n_pre):
            l_cxr, l_ehr, l_sum = phase_modality_step(
                bundle, opt_pre,
                assemble_cxr(data, streams.cxr.next_batch()),
                assemble_ehr(data, streams.ehr.next_batch()),
                config.loss_weight_cxr, config.loss_weight_ehr, i)
            history.append(IterRecord(i, l_cxr=l_cxr, l_ehr=l_ehr, l_sum=l_sum))
        # Fresh optimizer for the fine-tune group set; selection starts here.
        opt_ft = Adam(bundle.params(*JOINT_GROUPS), **opt_args)
        for j in range(config.n_iters):
            i = n_pre + j
            l_cat = _joint_step(bundle, opt_ft,
                                assemble_pairs(data, streams.pairs.next_batch()), i)
            record = IterRecord(i, l_cat=l_cat)
            history.append(record)
            if eval_due(j, config.n_iters) and run_validation(record):
                break

    if best is not None:
        bundle.load_state(best["state"])
        return TrainResult(bundle, history, best["score"], best["iteration"])
    return TrainResult(bundle, history, None, None)


def write_history(path, history: list[IterRecord]):
    """History CSV: iter,L_cxr,L_ehr,L_sum,L_cat,val_auroc_all (blank = n/a)."""

    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "L_cxr", "L_ehr", "L_sum", "L_cat", "val_auroc_all"])
        for r in history:
            writer.writerow([r.iteration, fmt(r.l_cxr), fmt(r.l_ehr),
                             fmt(r.l_sum), fmt(r.l_cat), fmt(r.val_auroc)])
