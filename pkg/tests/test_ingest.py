"""Discretization, normalization stats, pair matching, and samplers."""

import math

import numpy as np
import pytest

from modfuse.errors import ConfigurationError, EmptySequenceError
from modfuse.ingest import (
    CxrSample, CyclingSampler, EhrEpisode, NormStats, compute_norm_stats,
    discretize, group_by_length, match_pairs, read_pgm, write_pgm,
)

IDENTITY_STATS = NormStats(mean=np.zeros(17), std=np.ones(17), median=np.zeros(17))


def make_episode(stay_id="e1", subject="s1", start=0.0, end=6.0, events=None, labels=None):
    """events: iterable of (hour, feature_index, value) triples."""
    if events is None:
        events = [(0.5, 0, 1.0)]
    rows = {}
    for hour, j, v in events:
        rows.setdefault(hour, {})[j] = v
    hours = np.array(sorted(rows))
    values = np.full((len(hours), 17), np.nan)
    for i, h in enumerate(hours):
        for j, v in rows[h].items():
            values[i, j] = v
    if labels is None:
        labels = np.zeros(25, dtype=np.int64)
    return EhrEpisode(stay_id, subject, start, end, hours, values, labels)


def make_image(image_id="x1", subject="s1", taken_at=3.0):
    return CxrSample(image_id, subject, taken_at,
                     np.zeros((4, 4)), np.zeros(14, dtype=np.int64))


class TestDiscretize:
    def test_last_wins_and_carry_forward_golden(self):
        # f1 at 0.5->a, 1.9->b, 2.1->c over a 6h stay: bins [b, c, c], masks [1, 1, 0]
        a, b, c = 4.0, 7.0, -2.0
        ep = make_episode(events=[(0.5, 0, a), (1.9, 0, b), (2.1, 0, c)])
        out = discretize(ep, IDENTITY_STATS)
        values, masks = out.tensor[:, 0], out.tensor[:, 17]
        assert out.tensor.shape == (3, 34)
        assert np.array_equal(values, [b, c, c])
        assert np.array_equal(masks, [1.0, 1.0, 0.0])

    def test_fully_observed_constant_feature(self):
        ep = make_episode(events=[(h, 2, 5.0) for h in (0.5, 2.5, 4.5)])
        out = discretize(ep, IDENTITY_STATS)
        assert np.all(out.tensor[:, 2] == 5.0)
        assert np.all(out.tensor[:, 17 + 2] == 1.0)

    def test_never_observed_feature_takes_normalized_median(self):
        stats = NormStats(mean=np.full(17, 2.0), std=np.full(17, 4.0), median=np.full(17, 3.0))
        ep = make_episode(events=[(0.5, 0, 1.0)])
        out = discretize(ep, stats)
        expected = (3.0 - 2.0) / 4.0
        assert np.all(out.tensor[:, 5] == expected)
        assert np.all(out.tensor[:, 17 + 5] == 0.0)

    def test_bin_count_follows_stay_length_capped(self):
        ep = make_episode(end=48.0, events=[(0.5, 0, 1.0)])
        assert discretize(ep, IDENTITY_STATS).tensor.shape == (24, 34)
        ep = make_episode(end=120.0, events=[(0.5, 0, 1.0)])
        assert discretize(ep, IDENTITY_STATS).tensor.shape == (24, 34)
        ep = make_episode(end=5.0, events=[(0.5, 0, 1.0)])
        assert discretize(ep, IDENTITY_STATS).tensor.shape == (3, 34)

    def test_event_at_stay_end_joins_last_bin(self):
        ep = make_episode(end=6.0, events=[(0.5, 0, 1.0), (6.0, 0, 9.0)])
        out = discretize(ep, IDENTITY_STATS)
        assert out.tensor[2, 0] == 9.0
        assert out.tensor[2, 17] == 1.0

    def test_events_beyond_horizon_dropped(self):
        ep = make_episode(end=120.0, events=[(0.5, 0, 1.0), (60.0, 0, 9.0)])
        out = discretize(ep, IDENTITY_STATS)
        assert np.all(out.tensor[:, 0] == 1.0)  # carry of the hour-0.5 value

    def test_normalization_applied(self):
        stats = NormStats(mean=np.full(17, 1.0), std=np.full(17, 2.0), median=np.zeros(17))
        ep = make_episode(events=[(0.5, 0, 5.0)])
        out = discretize(ep, stats)
        assert out.tensor[0, 0] == 2.0

    def test_empty_episode_rejected(self):
        ep = make_episode(events=[(0.5, 0, 1.0)])
        ep.hours = np.zeros(0)
        ep.values = np.zeros((0, 17))
        with pytest.raises(EmptySequenceError):
            discretize(ep, IDENTITY_STATS)

    def test_idempotent_rediscretization(self):
        rng = np.random.default_rng(0)
        events = [(float(h) + rng.uniform(0, 1), j, float(rng.standard_normal()))
                  for h in range(0, 12, 2) for j in rng.integers(0, 17, size=5)]
        ep = make_episode(end=12.0, events=events)
        stats = NormStats(mean=rng.standard_normal(17),
                          std=np.abs(rng.standard_normal(17)) + 0.5,
                          median=rng.standard_normal(17))
        first = discretize(ep, stats)
        # Rebuild an event list from observed slots (de-normalized), re-bin.
        values, masks = first.tensor[:, :17], first.tensor[:, 17:]
        rebuilt = []
        for k in range(values.shape[0]):
            for j in range(17):
                if masks[k, j]:
                    rebuilt.append((k * 2.0 + 0.5, j, values[k, j] * stats.std[j] + stats.mean[j]))
        ep2 = make_episode(end=12.0, events=rebuilt)
        second = discretize(ep2, stats)
        assert np.array_equal(second.tensor[:, 17:], masks)
        np.testing.assert_allclose(second.tensor[:, :17], values, rtol=0, atol=1e-12)


class TestNormStats:
    def test_constant_feature_hits_std_floor(self):
        events = [(0.5, 0, 1.0), (2.5, 0, 1.0), (4.5, 0, 1.0)]
        events += [(0.1, j, float(j)) for j in range(1, 17)]
        stats = compute_norm_stats([make_episode(events=events)])
        assert stats.mean[0] == 1.0
        assert stats.std[0] == 1e-6

    def test_two_point_feature(self):
        events = [(0.5, 1, 0.0), (2.5, 1, 10.0)]
        events += [(0.1, j, float(j)) for j in range(17) if j != 1]
        stats = compute_norm_stats([make_episode(events=events)])
        assert stats.mean[1] == 5.0
        assert stats.median[1] == 5.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        episodes = []
        for i in range(6):
            events = [(float(h) + 0.1, int(j), float(rng.standard_normal()))
                      for h in range(6) for j in rng.integers(0, 17, size=4)]
            events.append((0.2, i % 17, float(rng.standard_normal())))
            episodes.append(make_episode(stay_id=f"e{i}", end=6.0, events=events))
        # Make sure every feature shows up at least once.
        episodes.append(make_episode(stay_id="efill", end=6.0,
                                     events=[(0.3, j, 1.0 + j) for j in range(17)]))
        stats = compute_norm_stats(episodes)

        pools = [[] for _ in range(17)]
        for ep in episodes:
            for i in range(len(ep.hours)):
                for j in range(17):
                    if not math.isnan(ep.values[i, j]):
                        pools[j].append(ep.values[i, j])
        for j in range(17):
            n = len(pools[j])
            mean = sum(pools[j]) / n
            var = sum((x - mean) ** 2 for x in pools[j]) / n
            assert abs(stats.mean[j] - mean) < 1e-12
            assert abs(stats.std[j] - max(math.sqrt(var), 1e-6)) < 1e-12
            assert abs(stats.median[j] - float(np.median(pools[j]))) < 1e-12

    def test_never_observed_feature_names_it(self):
        eps = [make_episode(events=[(0.5, 0, 1.0)])]
        with pytest.raises(ConfigurationError) as exc:
            compute_norm_stats(eps)
        assert "f2" in str(exc.value)

    def test_stats_ignore_other_split_episodes(self):
        # Poison a non-training episode with sentinels; stats must not move.
        train = [make_episode(events=[(0.5, j, float(j)) for j in range(17)])]
        stats_a = compute_norm_stats(train)
        _poisoned = make_episode(stay_id="evil",
                                 events=[(0.5, j, 1e9) for j in range(17)])
        stats_b = compute_norm_stats(train)
        for arr_a, arr_b in ((stats_a.mean, stats_b.mean), (stats_a.std, stats_b.std)):
            assert np.array_equal(arr_a, arr_b)


class TestMatchPairs:
    def test_in_window_image_pairs(self):
        pairs = match_pairs([make_episode()], [make_image(taken_at=3.0)])
        assert len(pairs) == 1
        assert pairs[0].image.image_id == "x1"

    def test_out_of_window_image_unpaired(self):
        pairs = match_pairs([make_episode(end=6.0)], [make_image(taken_at=7.5)])
        assert pairs == []

    def test_latest_image_wins(self):
        ep = make_episode(end=48.0)
        imgs = [make_image("a", taken_at=10.0), make_image("b", taken_at=30.0)]
        pairs = match_pairs([ep], imgs)
        assert len(pairs) == 1
        assert pairs[0].image.image_id == "b"

    def test_timestamp_tie_breaks_to_smallest_id(self):
        ep = make_episode(end=48.0)
        imgs = [make_image("zz", taken_at=30.0), make_image("aa", taken_at=30.0)]
        assert match_pairs([ep], imgs)[0].image.image_id == "aa"

    def test_each_image_pairs_once_in_stay_id_order(self):
        e1 = make_episode(stay_id="e1", start=0.0, end=48.0)
        e2 = make_episode(stay_id="e2", start=0.0, end=48.0)
        img = make_image("only", taken_at=20.0)
        pairs = match_pairs([e2, e1], [img])
        assert len(pairs) == 1
        assert pairs[0].episode.stay_id == "e1"

    def test_subject_mismatch_never_pairs(self):
        pairs = match_pairs([make_episode(subject="s1")],
                            [make_image(subject="s2", taken_at=3.0)])
        assert pairs == []

    def test_invariant_to_image_list_order(self):
        rng = np.random.default_rng(2)
        eps = [make_episode(stay_id=f"e{i}", subject=f"s{i % 3}", start=0.0, end=48.0)
               for i in range(6)]
        imgs = [make_image(f"x{i}", subject=f"s{i % 3}", taken_at=float(rng.uniform(0, 60)))
                for i in range(10)]
        ref = [(p.episode.stay_id, p.image.image_id) for p in match_pairs(eps, imgs)]
        for _ in range(5):
            shuffled = list(imgs)
            rng.shuffle(shuffled)
            got = [(p.episode.stay_id, p.image.image_id) for p in match_pairs(eps, shuffled)]
            assert got == ref

    def test_pair_timestamps_inside_stay_window(self):
        rng = np.random.default_rng(3)
        eps = [make_episode(stay_id=f"e{i}", subject=f"s{i % 4}",
                            start=float(i * 10), end=float(i * 10 + 48)) for i in range(8)]
        imgs = [make_image(f"x{i}", subject=f"s{i % 4}", taken_at=float(rng.uniform(0, 120)))
                for i in range(20)]
        for p in match_pairs(eps, imgs):
            assert p.episode.start_h <= p.image.taken_at_h <= p.episode.end_h


class TestCyclingSampler:
    def test_draw_counts_stay_within_one_of_uniform(self):
        for size in (10, 7, 3):
            rng = np.random.default_rng(4)
            sampler = CyclingSampler(list(range(size)), 2, rng)
            tallies = {i: 0 for i in range(size)}
            for draw in range(1, 36):
                for item in sampler.next_batch():
                    tallies[item] += 1
                expected = draw * 2 / size
                lo, hi = math.floor(expected) - 1, math.ceil(expected) + 1
                assert all(lo <= c <= hi for c in tallies.values()), (size, draw, tallies)

    def test_same_seed_same_sequence(self):
        def draws(seed):
            rng = np.random.default_rng(seed)
            s = CyclingSampler(list(range(9)), 4, rng)
            return [tuple(s.next_batch()) for _ in range(10)]

        assert draws(5) == draws(5)
        assert draws(5) != draws(6)

    def test_empty_pool_rejected(self):
        with pytest.raises(ConfigurationError):
            CyclingSampler([], 2, np.random.default_rng(0))

    def test_every_element_seen_each_epoch(self):
        rng = np.random.default_rng(7)
        s = CyclingSampler(list("abcde"), 5, rng)
        for _ in range(4):
            assert sorted(s.next_batch()) == list("abcde")


class TestLoaderIsolation:
    def test_poisoned_val_test_rows_leave_stats_unchanged(self, tiny_cohort_dir, tmp_path):
        import csv as csv_mod
        import shutil

        from modfuse.ingest import load_cohort

        root = tmp_path / "poisoned"
        shutil.copytree(tiny_cohort_dir, root)
        clean = load_cohort(tiny_cohort_dir)

        # Overwrite every non-training episode with sentinel values.
        split_of = {}
        with open(root / "splits.csv", newline="") as fh:
            for row in csv_mod.DictReader(fh):
                split_of[row["subject_id"]] = row["split"]
        poisoned = 0
        with open(root / "listfile.csv", newline="") as fh:
            for row in csv_mod.DictReader(fh):
                if split_of[row["subject_id"]] == "train":
                    continue
                path = root / "episodes" / f"{row['stay_id']}.csv"
                with open(path, "w", newline="") as out:
                    w = csv_mod.writer(out, lineterminator="\n")
                    w.writerow(["hour"] + [f"f{j}" for j in range(1, 18)])
                    w.writerow(["0.5"] + ["999999.0"] * 17)
                poisoned += 1
        assert poisoned > 0

        dirty = load_cohort(root)
        assert np.array_equal(clean.stats.mean, dirty.stats.mean)
        assert np.array_equal(clean.stats.std, dirty.stats.std)
        assert np.array_equal(clean.stats.median, dirty.stats.median)


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        grid = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        write_pgm(path, grid)
        back = read_pgm(path)
        assert back.shape == (16, 16)
        assert np.array_equal(np.round(back * 255).astype(np.uint8), grid)
        assert back.min() >= 0.0 and back.max() <= 1.0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(ConfigurationError):
            read_pgm(path)


class TestGroupByLength:
    def test_order_maps_back(self):
        tensors = [np.zeros((3, 2)), np.zeros((5, 2)), np.zeros((3, 2)) + 7]
        groups, order = group_by_length(tensors)
        assert [g.shape for g in groups] == [(2, 3, 2), (1, 5, 2)]
        assert order == [0, 2, 1]
        assert np.all(groups[0][1] == 7)
