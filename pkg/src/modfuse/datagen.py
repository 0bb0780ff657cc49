"""Synthetic multi-modal cohort generation with a planted, auditable
complementary signal.

Every stay draws a latent vector z. The physiological series only reads
the seq-visible coordinates (AR(1) processes whose means are a linear
readout of z_S), the radiograph only encodes the img-visible coordinates
(Gaussian blobs whose amplitudes follow z_V), and the 25 task labels are
Bernoulli draws of sigmoid(W_task . z). Task labels are assigned weight
profiles in a fixed rotation - seq-supported, fully-supported, and
img-private - so that labels exist whose signal reaches the data only
through the image. `planted_signal_audit` verifies that construction
from the emitted files alone (plus the latents sidecar) with logistic
fits, before any model training happens.

Outputs are byte-identical for a fixed seed: per-subject RNG streams
hang off spawn keys, so parallel generation would not change the files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .ingest import N_FEATURES, write_pgm

N_TASK = 25
N_AUX = 14
TASK_GROUPS = ["acute"] * 12 + ["mixed"] * 5 + ["chronic"] * 8
AUDIT_MARGIN = 0.05


@dataclass(frozen=True)
class CohortConfig:
    """Knobs of the synthetic cohort; defaults plant a complementary signal."""
    n_subjects: int
    seed: int
    stays_min: int = 1
    stays_max: int = 3
    pairing_rate: float = 0.25
    latent_dim: int = 8
    seq_visible: tuple = (0, 1, 2, 3, 4, 5)
    img_visible: tuple = (4, 5, 6, 7)
    task_weight_scale: float = 3.0
    aux_weight_scale: float = 3.0
    ar_coeff: float = 0.5
    ar_noise: float = 0.8
    obs_rate: float = 0.8
    img_noise: float = 0.05
    blob_amp: float = 0.15
    image_side: int = 64
    stay_hours: float = 48.0
    split_fracs: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigurationError("n_subjects must be >= 1")
        if not 0.0 <= self.pairing_rate <= 1.0:
            raise ConfigurationError(f"pairing_rate must be in [0, 1], got {self.pairing_rate}")
        if not 1 <= self.stays_min <= self.stays_max:
            raise ConfigurationError("need 1 <= stays_min <= stays_max")
        coords = set(range(self.latent_dim))
        if set(self.seq_visible) | set(self.img_visible) != coords:
            raise ConfigurationError("seq_visible and img_visible must cover all latent coords")
        if abs(sum(self.split_fracs) - 1.0) > 1e-9 or len(self.split_fracs) != 3:
            raise ConfigurationError("split_fracs must be three fractions summing to 1")

    @property
    def img_private(self) -> tuple:
        return tuple(sorted(set(self.img_visible) - set(self.seq_visible)))


def _unit_rows(rng, shape, scale):
    w = rng.standard_normal(shape)
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    return scale * w / np.maximum(norms, 1e-12)


def _task_weights(cfg: CohortConfig, rng) -> np.ndarray:
    """One weight row per label, rotating seq / both / img-private support."""
    d = cfg.latent_dim
    seq = list(cfg.seq_visible)
    img_private = list(cfg.img_private) or list(cfg.img_visible)
    w = np.zeros((N_TASK, d))
    for k in range(N_TASK):
        support = (seq, list(range(d)), img_private)[k % 3]
        row = np.zeros(d)
        row[support] = rng.standard_normal(len(support))
        norm = np.linalg.norm(row)
        w[k] = cfg.task_weight_scale * row / max(norm, 1e-12)
    return w


def _fmt(x: float) -> str:
    return repr(float(x))


def _blob_grid(side: int, n: int):
    """Fixed blob centers spread over the image, one per img-visible coord."""
    g = int(np.ceil(np.sqrt(n)))
    centers = []
    for i in range(n):
        r, c = divmod(i, g)
        centers.append(((r + 0.5) * side / g, (c + 0.5) * side / g))
    return centers


def generate_cohort(config: CohortConfig, out_dir) -> dict:
    """Write a full cohort under `out_dir` and return its manifest."""
    out = Path(out_dir)
    try:
        (out / "episodes").mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create cohort directory {out}: {exc}") from exc

    cohort_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(0,))
    )
    w_task = _task_weights(config, cohort_rng)
    v = list(config.img_visible)
    # Anchor the first |V| aux labels one-to-one on img coords so auxiliary
    # supervision identifies every image-visible latent.
    w_aux = _unit_rows(cohort_rng, (N_AUX, len(v)), config.aux_weight_scale)
    for r in range(min(len(v), N_AUX)):
        row = np.zeros(len(v))
        row[r] = 1.0
        w_aux[r] = config.aux_weight_scale * row
    a_seq = _unit_rows(cohort_rng, (N_FEATURES, len(config.seq_visible)), 1.0)
    feat_offset = cohort_rng.standard_normal(N_FEATURES)

    split_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,))
    )
    subjects = [f"s{i:05d}" for i in range(config.n_subjects)]
    perm = split_rng.permutation(config.n_subjects)
    n_train = int(np.floor(config.split_fracs[0] * config.n_subjects))
    n_val = int(np.floor(config.split_fracs[1] * config.n_subjects))
    split_of = {}
    for pos, idx in enumerate(perm):
        split_of[subjects[idx]] = ("train" if pos < n_train
                                   else "val" if pos < n_train + n_val else "test")

    centers = _blob_grid(config.image_side, len(v))
    sigma = config.image_side / 10.0
    yy, xx = np.mgrid[0:config.image_side, 0:config.image_side]
    blob_maps = [np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2 * sigma ** 2))
                 for cy, cx in centers]

    list_rows = []
    meta_rows = []
    latent_rows = []
    counts = {s: {"cxr": 0, "ehr": 0, "pairs": 0} for s in ("train", "val", "test")}
    n_hours = int(config.stay_hours)

    for idx, subject in enumerate(subjects):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(1000 + idx,))
        )
        split = split_of[subject]
        n_stays = int(rng.integers(config.stays_min, config.stays_max + 1))
        for stay_idx in range(n_stays):
            stay_id = f"{subject}_e{stay_idx + 1}"
            start = stay_idx * 100.0
            end = start + config.stay_hours
            z = rng.standard_normal(config.latent_dim)
            labels = (rng.random(N_TASK) < _sigmoid(w_task @ z)).astype(int)

            # AR(1) around a z_S readout, observed on a jittered hourly grid.
            mean = a_seq @ z[list(config.seq_visible)] + feat_offset
            times = np.arange(n_hours) + rng.uniform(0.0, 1.0, size=n_hours)
            series = np.empty((n_hours, N_FEATURES))
            innov_sd = config.ar_noise * np.sqrt(max(1.0 - config.ar_coeff ** 2, 0.0))
            series[0] = mean + config.ar_noise * rng.standard_normal(N_FEATURES)
            for i in range(1, n_hours):
                series[i] = (mean + config.ar_coeff * (series[i - 1] - mean)
                             + innov_sd * rng.standard_normal(N_FEATURES))
            observed = rng.random((n_hours, N_FEATURES)) < config.obs_rate
            if not observed.any():
                observed[0, 0] = True
            row_keep = observed.any(axis=1)

            with open(out / "episodes" / f"{stay_id}.csv", "w", encoding="utf-8",
                      newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["hour"] + [f"f{j + 1}" for j in range(N_FEATURES)])
                for i in np.flatnonzero(row_keep):
                    cells = [_fmt(times[i])]
                    cells += [_fmt(series[i, j]) if observed[i, j] else ""
                              for j in range(N_FEATURES)]
                    writer.writerow(cells)

            list_rows.append([stay_id, subject, _fmt(start), _fmt(end)]
                             + [str(x) for x in labels])
            latent_rows.append([stay_id] + [_fmt(x) for x in z])
            counts[split]["ehr"] += 1

            if rng.random() < config.pairing_rate:
                image_id = f"{stay_id}_x1"
                z_v = z[v]
                px = 0.5 + config.img_noise * rng.standard_normal(
                    (config.image_side, config.image_side))
                for coord, blob in zip(z_v, blob_maps):
                    px += config.blob_amp * coord * blob
                grid = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
                write_pgm(out / "images" / f"{image_id}.pgm", grid)
                taken_at = start + rng.uniform(1.0, config.stay_hours - 1.0)
                aux = (rng.random(N_AUX) < _sigmoid(w_aux @ z_v)).astype(int)
                meta_rows.append([image_id, subject, _fmt(taken_at)]
                                 + [str(x) for x in aux])
                counts[split]["cxr"] += 1
                counts[split]["pairs"] += 1

    _write_csv(out / "listfile.csv",
               ["stay_id", "subject_id", "start_h", "end_h"]
               + [f"y{i}" for i in range(1, N_TASK + 1)], list_rows)
    _write_csv(out / "cxr_metadata.csv",
               ["image_id", "subject_id", "taken_at_h"]
               + [f"r{i}" for i in range(1, N_AUX + 1)], meta_rows)
    _write_csv(out / "label_groups.csv", ["label_index", "group"],
               [[str(i + 1), TASK_GROUPS[i]] for i in range(N_TASK)])
    _write_csv(out / "splits.csv", ["subject_id", "split"],
               [[s, split_of[s]] for s in subjects])
    _write_csv(out / "latents.csv",
               ["stay_id"] + [f"z{i + 1}" for i in range(config.latent_dim)],
               latent_rows)

    manifest = {
        "config": asdict(config),
        "counts": counts,
        "paths": {
            "listfile": "listfile.csv",
            "episodes": "episodes",
            "images": "images",
            "cxr_metadata": "cxr_metadata.csv",
            "label_groups": "label_groups.csv",
            "splits": "splits.csv",
            "latents": "latents.csv",
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


@dataclass
class LabelAudit:
    index: int
    name: str
    auroc_seq: float | None
    auroc_full: float | None

    @property
    def delta(self) -> float | None:
        if self.auroc_seq is None or self.auroc_full is None:
            return None
        return self.auroc_full - self.auroc_seq


@dataclass
class AuditReport:
    labels: list[LabelAudit]
    complementary: list[int] = field(init=False)
    margin: float = AUDIT_MARGIN

    def __post_init__(self):
        self.complementary = [e.index for e in self.labels
                              if e.delta is not None and e.delta >= self.margin]

    @property
    def passed(self) -> bool:
        return bool(self.complementary)


def planted_signal_audit(cohort_dir) -> AuditReport:
    """Check the generated files for an image-only predictive signal.

    For every task label, fit logistic models on the train-split oracle
    latents - once on the seq-visible coordinates, once on all coordinates -
    and compare their test-split AUROCs. A label counts as complementary
    when including the image-visible coordinates lifts AUROC by >= 0.05.
    """
    from sklearn.linear_model import LogisticRegression

    from .evalkit import auroc
    from .errors import SingleClassError

    root = Path(cohort_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    seq_visible = list(manifest["config"]["seq_visible"])

    with open(root / "latents.csv", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        z_names = [c for c in reader.fieldnames if c != "stay_id"]
        latents = {row["stay_id"]: np.array([float(row[c]) for c in z_names])
                   for row in reader}

    split_of = {}
    with open(root / "splits.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            split_of[row["subject_id"]] = row["split"]

    stay_ids, subjects, labels = [], [], []
    with open(root / "listfile.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            stay_ids.append(row["stay_id"])
            subjects.append(row["subject_id"])
            labels.append([int(row[f"y{i}"]) for i in range(1, N_TASK + 1)])
    labels = np.array(labels)
    z = np.stack([latents[sid] for sid in stay_ids])
    splits = np.array([split_of[s] for s in subjects])

    train, test = splits == "train", splits == "test"
    entries = []
    for k in range(N_TASK):
        y_tr, y_te = labels[train, k], labels[test, k]
        if y_tr.min() == y_tr.max() or y_te.min() == y_te.max():
            entries.append(LabelAudit(k, f"y{k + 1}", None, None))
            continue
        scores = {}
        for tag, cols in (("seq", seq_visible), ("full", list(range(z.shape[1])))):
            model = LogisticRegression(max_iter=1000)
            model.fit(z[train][:, cols], y_tr)
            s = model.predict_proba(z[test][:, cols])[:, 1]
            try:
                scores[tag] = auroc(s, y_te)
            except SingleClassError:
                scores[tag] = None
        entries.append(LabelAudit(k, f"y{k + 1}", scores["seq"], scores["full"]))
    return AuditReport(entries)
