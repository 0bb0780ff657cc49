"""On-disk cohort ingestion and the three training streams.

File formats (UTF-8, LF endings):
  listfile.csv        stay_id,subject_id,start_h,end_h,y1,...,y25
  episodes/<id>.csv   hour,f1,...,f17 (empty cell = unobserved)
  cxr_metadata.csv    image_id,subject_id,taken_at_h,r1,...,r14
  images/<id>.pgm     binary PGM (P5), maxval 255
  label_groups.csv    label_index,group (1-based index; acute|mixed|chronic)
  splits.csv          subject_id,split (train|val|test)

Episodes are discretized into two-hour bins: within a bin the last
observation of a feature wins, gaps carry the previous bin forward,
leading gaps take the training-split median, and every value is
standardized with training-split moments. The 17 observation masks ride
along as extra channels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import LabelSpace, N_AUX_LABELS, N_TASK_LABELS
from .errors import ConfigurationError, EmptySequenceError

N_FEATURES = 17
BIN_HOURS = 2.0
T_MAX = 24  # 48h at 2h per bin
STD_FLOOR = 1e-6


@dataclass
class EhrEpisode:
    """One ICU stay's irregular physiological series plus task labels."""
    stay_id: str
    subject_id: str
    start_h: float
    end_h: float
    hours: np.ndarray    # [n_rows], offsets from stay start
    values: np.ndarray   # [n_rows, 17], NaN where unobserved
    labels: np.ndarray   # [25] in {0,1}

    def __post_init__(self):
        length = self.end_h - self.start_h
        if self.hours.size and (self.hours.min() < 0 or self.hours.max() > length):
            raise ConfigurationError(
                f"stay {self.stay_id}: event hour outside [0, {length}]"
            )
        if not np.isfinite(self.values[~np.isnan(self.values)]).all():
            raise ConfigurationError(f"stay {self.stay_id}: non-finite feature value")
        if self.hours.size == 0 or np.isnan(self.values).all():
            raise ConfigurationError(f"stay {self.stay_id}: no observed values")


@dataclass
class CxrSample:
    """One chest radiograph with its auxiliary labels."""
    image_id: str
    subject_id: str
    taken_at_h: float
    pixels: np.ndarray      # [side, side] in [0, 1]
    aux_labels: np.ndarray  # [14] in {0,1}

    def __post_init__(self):
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ConfigurationError(f"image {self.image_id}: pixels outside [0, 1]")


@dataclass
class PairedSample:
    """A stay matched with one in-window radiograph of the same subject."""
    episode: EhrEpisode
    image: CxrSample

    @property
    def labels(self) -> np.ndarray:
        return self.episode.labels


@dataclass
class DiscretizedEpisode:
    tensor: np.ndarray  # [T, 34]: 17 standardized values + 17 masks


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray


def compute_norm_stats(train_episodes) -> NormStats:
    """Per-feature mean/std/median over observed raw training values only."""
    pools: list[list[float]] = [[] for _ in range(N_FEATURES)]
    for ep in train_episodes:
        obs = ~np.isnan(ep.values)
        for j in range(N_FEATURES):
            if obs[:, j].any():
                pools[j].extend(ep.values[obs[:, j], j].tolist())
    mean = np.zeros(N_FEATURES)
    std = np.zeros(N_FEATURES)
    median = np.zeros(N_FEATURES)
    for j, pool in enumerate(pools):
        if not pool:
            raise ConfigurationError(f"feature f{j + 1} never observed in the training split")
        arr = np.asarray(pool)
        mean[j] = arr.mean()
        std[j] = max(arr.std(), STD_FLOOR)
        median[j] = np.median(arr)
    return NormStats(mean, std, median)


def discretize(episode: EhrEpisode, stats: NormStats,
               bin_hours: float = BIN_HOURS, t_max: int = T_MAX) -> DiscretizedEpisode:
    """Bin an episode into [T, 34]; see the module docstring for the rules."""
    if episode.hours.size == 0:
        raise EmptySequenceError(f"stay {episode.stay_id}: zero event rows")
    length = episode.end_h - episode.start_h
    n_stay_bins = max(1, math.ceil(length / bin_hours))
    t = min(n_stay_bins, t_max)

    raw = np.full((t, N_FEATURES), np.nan)
    mask = np.zeros((t, N_FEATURES))
    order = np.argsort(episode.hours, kind="mergesort")  # stable: row order breaks time ties
    for r in order:
        k = int(episode.hours[r] // bin_hours)
        k = min(k, n_stay_bins - 1)  # an event at exactly stay end joins the last bin
        if k >= t:
            continue  # beyond the 48h horizon
        row = episode.values[r]
        obs = ~np.isnan(row)
        raw[k, obs] = row[obs]
        mask[k, obs] = 1.0

    # Carry forward, then fill leading gaps with the training median.
    for j in range(N_FEATURES):
        last = np.nan
        for k in range(t):
            if mask[k, j]:
                last = raw[k, j]
            elif not np.isnan(last):
                raw[k, j] = last
            else:
                raw[k, j] = stats.median[j]

    values = (raw - stats.mean) / stats.std
    return DiscretizedEpisode(np.hstack([values, mask]))


def match_pairs(episodes, images) -> list[PairedSample]:
    """Match stays to radiographs by subject id and in-window timestamp.

    Stays are processed in ascending stay-id order; among a stay's
    candidate images the latest taken-at wins, ties broken by smallest
    image id; each image pairs with at most one stay.
    """
    by_subject: dict[str, list[CxrSample]] = {}
    for img in images:
        by_subject.setdefault(img.subject_id, []).append(img)
    used: set[str] = set()
    pairs: list[PairedSample] = []
    for ep in sorted(episodes, key=lambda e: e.stay_id):
        candidates = [
            img for img in by_subject.get(ep.subject_id, ())
            if img.image_id not in used and ep.start_h <= img.taken_at_h <= ep.end_h
        ]
        if not candidates:
            continue
        best = min(candidates, key=lambda img: (-img.taken_at_h, img.image_id))
        used.add(best.image_id)
        pairs.append(PairedSample(ep, best))
    return pairs


def write_pgm(path, grid: np.ndarray):
    """Write a uint8 grid as binary PGM (P5, maxval 255)."""
    if grid.dtype != np.uint8 or grid.ndim != 2:
        raise ConfigurationError(f"write_pgm expects a uint8 matrix, got {grid.dtype}{grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by `write_pgm`; returns float64 in [0, 1]."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ConfigurationError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise ConfigurationError(f"{path}: unsupported maxval {parts[2]!r}")
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)
    return data.astype(np.float64) / 255.0


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_label_space(root: Path, task_names, aux_names) -> LabelSpace:
    rows = _read_csv(root / "label_groups.csv")
    if len(rows) != N_TASK_LABELS:
        raise ConfigurationError(f"label_groups.csv has {len(rows)} rows, expected {N_TASK_LABELS}")
    groups = [""] * N_TASK_LABELS
    for row in rows:
        idx = int(row["label_index"])
        if not 1 <= idx <= N_TASK_LABELS:
            raise ConfigurationError(f"label_groups.csv: index {idx} out of range")
        groups[idx - 1] = row["group"]
    return LabelSpace(tuple(task_names), tuple(groups), tuple(aux_names))


class CohortData:
    """A loaded cohort: episodes, images, splits, stats, pairs, tensors."""

    def __init__(self, root, label_space, episodes, images, split_of, stats, disc, pairs):
        self.root = Path(root)
        self.label_space = label_space
        self.episodes: dict[str, EhrEpisode] = episodes
        self.images: dict[str, CxrSample] = images
        self.split_of: dict[str, str] = split_of
        self.stats: NormStats = stats
        self.disc: dict[str, np.ndarray] = disc  # stay_id -> [T, 34]
        self._pairs: list[PairedSample] = pairs

    def stay_ids(self, split: str) -> list[str]:
        return sorted(s for s, ep in self.episodes.items()
                      if self.split_of[ep.subject_id] == split)

    def image_ids(self, split: str) -> list[str]:
        return sorted(i for i, img in self.images.items()
                      if self.split_of[img.subject_id] == split)

    def pairs_of(self, split: str) -> list[PairedSample]:
        return [p for p in self._pairs
                if self.split_of[p.episode.subject_id] == split]

    def counts(self, split: str) -> dict[str, int]:
        return {
            "cxr": len(self.image_ids(split)),
            "ehr": len(self.stay_ids(split)),
            "pairs": len(self.pairs_of(split)),
        }


def load_cohort(root) -> CohortData:
    root = Path(root)
    if not (root / "listfile.csv").exists():
        raise ConfigurationError(f"{root}: no listfile.csv (not a cohort directory)")

    list_rows = _read_csv(root / "listfile.csv")
    task_names = [f"y{i}" for i in range(1, N_TASK_LABELS + 1)]
    episodes: dict[str, EhrEpisode] = {}
    for row in list_rows:
        stay_id = row["stay_id"]
        ep_rows = _read_csv(root / "episodes" / f"{stay_id}.csv")
        hours = np.array([float(r["hour"]) for r in ep_rows])
        values = np.full((len(ep_rows), N_FEATURES), np.nan)
        for i, r in enumerate(ep_rows):
            for j in range(N_FEATURES):
                cell = r[f"f{j + 1}"]
                if cell != "":
                    values[i, j] = float(cell)
        episodes[stay_id] = EhrEpisode(
            stay_id=stay_id,
            subject_id=row["subject_id"],
            start_h=float(row["start_h"]),
            end_h=float(row["end_h"]),
            hours=hours,
            values=values,
            labels=np.array([int(row[name]) for name in task_names], dtype=np.int64),
        )

    aux_names = [f"r{i}" for i in range(1, N_AUX_LABELS + 1)]
    images: dict[str, CxrSample] = {}
    for row in _read_csv(root / "cxr_metadata.csv"):
        image_id = row["image_id"]
        images[image_id] = CxrSample(
            image_id=image_id,
            subject_id=row["subject_id"],
            taken_at_h=float(row["taken_at_h"]),
            pixels=read_pgm(root / "images" / f"{image_id}.pgm"),
            aux_labels=np.array([int(row[name]) for name in aux_names], dtype=np.int64),
        )

    split_of = {row["subject_id"]: row["split"] for row in _read_csv(root / "splits.csv")}
    bad = set(split_of.values()) - {"train", "val", "test"}
    if bad:
        raise ConfigurationError(f"splits.csv: unknown split names {sorted(bad)}")
    for ep in episodes.values():
        if ep.subject_id not in split_of:
            raise ConfigurationError(f"subject {ep.subject_id} missing from splits.csv")

    label_space = _load_label_space(root, task_names, aux_names)
    train_eps = [ep for ep in episodes.values() if split_of[ep.subject_id] == "train"]
    if not train_eps:
        raise ConfigurationError("training split has no episodes")
    stats = compute_norm_stats(train_eps)
    disc = {sid: discretize(ep, stats).tensor for sid, ep in sorted(episodes.items())}
    pairs = match_pairs(episodes.values(), images.values())
    return CohortData(root, label_space, episodes, images, split_of, stats, disc, pairs)


class CyclingSampler:
    """Shuffles its pool and cycles independently of other samplers.

    Epochs of different pools never synchronize; a batch that outruns the
    current permutation takes the remainder and continues into a fresh
    shuffle, so every element's draw count stays within +/-1 of uniform.
    """

    def __init__(self, items: list, batch_size: int, rng: np.random.Generator):
        if not items:
            raise ConfigurationError("sampler pool is empty")
        if batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
        self.items = list(items)
        self.batch_size = batch_size
        self._rng = rng
        self._perm = self._rng.permutation(len(self.items))
        self._cursor = 0

    def next_batch(self) -> list:
        out = []
        while len(out) < self.batch_size:
            if self._cursor == len(self._perm):
                self._perm = self._rng.permutation(len(self.items))
                self._cursor = 0
            take = min(self.batch_size - len(out), len(self._perm) - self._cursor)
            out.extend(self.items[i] for i in self._perm[self._cursor:self._cursor + take])
            self._cursor += take
        return out


class Streams:
    """The three independently cycling samplers one split feeds a trainer.

    Samplers build lazily so a mode that never touches a stream does not
    trip over that stream's empty pool.
    """

    _SPAWN = {"cxr": 0, "ehr": 1, "pairs": 2}

    def __init__(self, data: CohortData, split: str, batch_sizes: tuple, seed: int):
        if split not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split {split!r}")
        self._data = data
        self._split = split
        self._batch_sizes = batch_sizes
        self._seed = seed
        self._samplers: dict[str, CyclingSampler] = {}

    def _pool(self, name: str) -> list:
        if name == "cxr":
            return self._data.image_ids(self._split)
        if name == "ehr":
            return self._data.stay_ids(self._split)
        return self._data.pairs_of(self._split)

    def _get(self, name: str) -> CyclingSampler:
        if name not in self._samplers:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self._seed, spawn_key=(self._SPAWN[name],))
            )
            size = self._batch_sizes[self._SPAWN[name]]
            pool = self._pool(name)
            if not pool:
                raise ConfigurationError(f"{name} pool is empty in split {self._split!r}")
            self._samplers[name] = CyclingSampler(pool, size, rng)
        return self._samplers[name]

    @property
    def cxr(self) -> CyclingSampler:
        return self._get("cxr")

    @property
    def ehr(self) -> CyclingSampler:
        return self._get("ehr")

    @property
    def pairs(self) -> CyclingSampler:
        return self._get("pairs")


def make_streams(data: CohortData, split: str, batch_sizes: tuple, seed: int) -> Streams:
    """Build the (cxr, ehr, pairs) samplers for one split."""
    return Streams(data, split, batch_sizes, seed)


def group_by_length(tensors: list[np.ndarray]):
    """Group same-T tensors for batched recurrent encoding.

    Returns (stacked_groups, order) where `order` maps grouped positions
    back to the original indices; callers must permute labels/images with
    the same order.
    """
    by_t: dict[int, list[int]] = {}
    for i, arr in enumerate(tensors):
        by_t.setdefault(arr.shape[0], []).append(i)
    groups = []
    order = []
    for t in sorted(by_t):
        idxs = by_t[t]
        groups.append(np.stack([tensors[i] for i in idxs]))
        order.extend(idxs)
    return groups, order


def assemble_ehr(data: CohortData, stay_ids: list[str]):
    """EHR batch: grouped [b, T, 34] tensors plus labels in grouped order."""
    tensors = [data.disc[sid] for sid in stay_ids]
    groups, order = group_by_length(tensors)
    labels = np.stack([data.episodes[stay_ids[i]].labels for i in order]).astype(np.float64)
    return groups, labels


def assemble_cxr(data: CohortData, image_ids: list[str]):
    """CXR batch: stacked [b, 1, side, side] pixels plus aux labels."""
    imgs = np.stack([data.images[iid].pixels[None] for iid in image_ids])
    labels = np.stack([data.images[iid].aux_labels for iid in image_ids]).astype(np.float64)
    return imgs, labels


def assemble_pairs(data: CohortData, pairs: list[PairedSample]):
    """Pair batch: grouped episode tensors, images and labels in grouped order."""
    tensors = [data.disc[p.episode.stay_id] for p in pairs]
    groups, order = group_by_length(tensors)
    imgs = np.stack([pairs[i].image.pixels[None] for i in order])
    labels = np.stack([pairs[i].episode.labels for i in order]).astype(np.float64)
    return groups, imgs, labels
