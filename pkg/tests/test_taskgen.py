import numpy as np
import pytest

from dithub.taskgen import (
    GenConfig,
    fewshot_subsample,
    generate_stream,
    stream_digest,
    stream_from_jsonl,
    stream_to_jsonl,
)

SMALL = dict(samples_per_class=30, zero_shot_samples_per_class=10)


def small_cfg(**kw):
    raw = dict(SMALL)
    raw.update(kw)
    return GenConfig(**raw)


def streams_equal(a, b) -> bool:
    if [t.task_id for t in a.tasks] != [t.task_id for t in b.tasks]:
        return False
    for ta, tb in zip(a.tasks, b.tasks):
        if ta.class_ids != tb.class_ids or ta.rare_class_ids != tb.rare_class_ids:
            return False
        for xs, ys in ((ta.train, tb.train), (ta.test, tb.test)):
            if len(xs) != len(ys):
                return False
            for sa, sb in zip(xs, ys):
                if sa.present_classes != sb.present_classes:
                    return False
                if sa.features.tobytes() != sb.features.tobytes():
                    return False
    for xs, ys in ((a.zero_shot_set, b.zero_shot_set), (a.base_train, b.base_train)):
        if any(sa.features.tobytes() != sb.features.tobytes() for sa, sb in zip(xs, ys)):
            return False
    return True


class TestDeterminism:
    def test_equal_configs_give_equal_streams(self):
        cfg = small_cfg(seed=123)
        assert streams_equal(generate_stream(cfg), generate_stream(small_cfg(seed=123)))

    def test_different_seeds_differ(self):
        a = generate_stream(small_cfg(seed=1))
        b = generate_stream(small_cfg(seed=2))
        assert not streams_equal(a, b)

    def test_export_bytes_identical(self, tmp_path):
        cfg = small_cfg(seed=5)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        stream_to_jsonl(generate_stream(cfg), p1)
        stream_to_jsonl(generate_stream(cfg), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_jsonl_round_trip_exact(self, tmp_path):
        cfg = small_cfg(seed=5)
        stream = generate_stream(cfg)
        path = tmp_path / "s.jsonl"
        stream_to_jsonl(stream, path)
        loaded = stream_from_jsonl(path)
        assert streams_equal(stream, loaded)
        assert loaded.config == cfg
        for tid, m in stream.transforms.items():
            assert loaded.transforms[tid].tobytes() == m.tobytes()


class TestRegimes:
    def test_overlapped_every_class_twice(self):
        stream = generate_stream(small_cfg(seed=3, regime="overlapped"))
        counts = {}
        for task in stream.tasks:
            for c in task.class_ids:
                counts[c] = counts.get(c, 0) + 1
        assert min(counts.values()) >= 2

    def test_overlapped_uses_distinct_domains(self):
        stream = generate_stream(small_cfg(seed=3, regime="overlapped"))
        domains = [t.domain_id for t in stream.tasks]
        assert len(set(domains)) == len(domains)

    def test_disjoint_zero_pairwise_overlap(self):
        stream = generate_stream(small_cfg(seed=3))
        digest = stream_digest(stream)
        overlap = np.asarray(digest["overlap_matrix"])
        off_diag = overlap - np.diag(np.diag(overlap))
        assert off_diag.max() == 0

    def test_base_classes_reused_in_tasks(self):
        stream = generate_stream(small_cfg(seed=3, overlap_fraction_with_base=0.25))
        digest = stream_digest(stream)
        assert len(digest["base_classes_in_tasks"]) == 2

    def test_odd_by_odd_overlapped_rejected(self):
        with pytest.raises(ValueError):
            generate_stream(small_cfg(regime="overlapped", num_task_classes=3, num_tasks=5))


class TestSamples:
    def test_train_and_test_disjoint_objects(self):
        stream = generate_stream(small_cfg(seed=9))
        for task in stream.tasks:
            train_ids = {id(s) for s in task.train}
            assert all(id(s) not in train_ids for s in task.test)

    def test_present_classes_nonempty_and_within_task(self):
        stream = generate_stream(small_cfg(seed=9))
        for task in stream.tasks:
            for sample in task.train + task.test:
                assert len(sample.present_classes) >= 1
                assert set(sample.present_classes) <= set(task.class_ids)

    def test_noise_free_singletons_equal_moved_prototype(self):
        cfg = small_cfg(seed=4, noise_sigma=0.0, max_classes_per_sample=1)
        stream = generate_stream(cfg)
        for task in stream.tasks:
            transform = stream.transforms[task.task_id]
            for sample in task.train:
                assert len(sample.present_classes) == 1
                expected = transform @ stream.prototypes[sample.present_classes[0]]
                assert sample.features.tobytes() == expected.tobytes()

    def test_noise_free_nearest_prototype_is_perfect(self):
        cfg = small_cfg(seed=4, noise_sigma=0.0, max_classes_per_sample=1)
        stream = generate_stream(cfg)
        for task in stream.tasks:
            transform = stream.transforms[task.task_id]
            moved = {c: transform @ stream.prototypes[c] for c in task.class_ids}
            for sample in task.test:
                best = max(task.class_ids, key=lambda c: float(sample.features @ moved[c]))
                assert best == sample.present_classes[0]

    def test_rare_classes_get_fewer_samples(self):
        stream = generate_stream(small_cfg(seed=9, samples_per_class=40))
        for task in stream.tasks:
            counts = {c: 0 for c in task.class_ids}
            for s in task.train:
                for c in s.present_classes:
                    counts[c] += 1
            for rare in task.rare_class_ids:
                regular = [counts[c] for c in task.class_ids if c not in task.rare_class_ids]
                assert counts[rare] < min(regular)


class TestTransforms:
    def test_rotation_preserves_norms(self):
        stream = generate_stream(small_cfg(seed=2, domain_transform="rotation"))
        digest = stream_digest(stream)
        for info in digest["per_task"].values():
            assert info["min_scale"] == pytest.approx(1.0, abs=1e-9)
            assert info["max_scale"] == pytest.approx(1.0, abs=1e-9)

    def test_diagonal_scales_bounded(self):
        stream = generate_stream(small_cfg(seed=2, domain_transform="diagonal_scale"))
        for m in stream.transforms.values():
            diag = np.diag(m)
            assert np.all(diag > 0)
            assert np.all(diag >= 0.5) and np.all(diag <= 2.0)
            assert np.allclose(m, np.diag(diag))

    def test_identity_kind(self):
        stream = generate_stream(small_cfg(seed=2, domain_transform="identity"))
        for m in stream.transforms.values():
            assert np.array_equal(m, np.eye(stream.config.d))

    def test_task_order_seed_shuffles(self):
        base = generate_stream(small_cfg(seed=2))
        shuffled = generate_stream(small_cfg(seed=2, task_order_seed=99))
        assert {t.task_id for t in base.tasks} == {t.task_id for t in shuffled.tasks}
        assert [t.task_id for t in base.tasks] != [t.task_id for t in shuffled.tasks]


class TestFewshot:
    def test_large_k_is_identity(self):
        stream = generate_stream(small_cfg(seed=7))
        task = stream.tasks[0]
        out = fewshot_subsample(task, 10_000, seed=1)
        assert len(out.train) == len(task.train)
        assert out.test is task.test

    def test_counts_capped(self):
        stream = generate_stream(small_cfg(seed=7, samples_per_class=40))
        for k in (1, 5, 10):
            for task in stream.tasks:
                out = fewshot_subsample(task, k, seed=3)
                counts = {}
                for s in out.train:
                    for c in s.present_classes:
                        counts[c] = counts.get(c, 0) + 1
                assert max(counts.values()) <= k

    def test_one_shot_covers_every_class(self):
        stream = generate_stream(small_cfg(seed=7))
        for task in stream.tasks:
            out = fewshot_subsample(task, 1, seed=3)
            covered = {c for s in out.train for c in s.present_classes}
            assert set(task.class_ids) <= covered

    def test_deterministic(self):
        stream = generate_stream(small_cfg(seed=7))
        task = stream.tasks[0]
        a = fewshot_subsample(task, 5, seed=3)
        b = fewshot_subsample(task, 5, seed=3)
        assert [id_ for id_ in map(lambda s: s.features.tobytes(), a.train)] == [
            s.features.tobytes() for s in b.train
        ]

    def test_k_validation(self):
        stream = generate_stream(small_cfg(seed=7))
        with pytest.raises(ValueError):
            fewshot_subsample(stream.tasks[0], 0, seed=1)


class TestConfigValidation:
    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            GenConfig(rare_class_fraction=1.5)

    def test_bad_transform(self):
        with pytest.raises(ValueError):
            GenConfig(domain_transform="mirror")

    def test_bad_regime(self):
        with pytest.raises(ValueError):
            GenConfig(regime="chaotic")

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            GenConfig(num_tasks=0)
