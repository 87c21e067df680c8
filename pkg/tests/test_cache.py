import numpy as np
import pytest

from iterpl.cache import CacheFullError, CacheNotReadyError, PLCache, PLCacheEntry
from iterpl.ctc import TokenSeq


def _entry(cache, version=0, tag=0):
    return cache.make_entry(
        batch=[np.full((3, 2), float(tag))],
        pls=[TokenSeq([tag % 5])],
        model_version=version,
        utt_ids=[f"utt-{tag}"],
    )


def _fill(cache, version=0):
    for i in range(cache.capacity):
        cache.insert(_entry(cache, version=version, tag=i))
    return cache


class TestFill:
    def test_insert_to_capacity_then_error(self):
        cache = PLCache(capacity=3)
        for i in range(3):
            cache.insert(_entry(cache, tag=i))
        assert cache.full
        with pytest.raises(CacheFullError):
            cache.insert(_entry(cache, tag=99))

    def test_entry_ids_unique_across_lifetime(self):
        cache = _fill(PLCache(capacity=4))
        rng = np.random.default_rng(0)
        seen = {e.entry_id for e in cache.entries}
        for _ in range(200):
            cache.draw_and_maybe_replace(1.0, lambda: _entry(cache, tag=7), rng)
            for e in cache.entries:
                assert e.entry_id not in seen or e.entry_id in {x.entry_id for x in cache.entries}
            seen |= {e.entry_id for e in cache.entries}
        # every id ever created was distinct
        assert cache.next_entry_id == 4 + cache.replacements

    def test_draw_before_full_rejected(self):
        cache = PLCache(capacity=3)
        cache.insert(_entry(cache))
        with pytest.raises(CacheNotReadyError):
            cache.draw_and_maybe_replace(0.5, lambda: _entry(cache), np.random.default_rng(0))


class TestDraw:
    def test_p_zero_never_mutates(self):
        cache = _fill(PLCache(capacity=5))
        ids = [e.entry_id for e in cache.entries]
        rng = np.random.default_rng(1)
        for _ in range(500):
            cache.draw_and_maybe_replace(0.0, lambda: _entry(cache), rng)
        assert [e.entry_id for e in cache.entries] == ids
        assert cache.replacements == 0

    def test_p_one_always_replaces_drawn(self):
        cache = _fill(PLCache(capacity=5))
        rng = np.random.default_rng(2)
        for _ in range(300):
            before = {e.entry_id for e in cache.entries}
            drawn = cache.draw_and_maybe_replace(1.0, lambda: _entry(cache, tag=1), rng)
            after = {e.entry_id for e in cache.entries}
            assert drawn.entry_id in before
            assert drawn.entry_id not in after  # evicted, yet returned
            assert len(after) == 5
        assert cache.replacements == cache.draws == 300

    def test_replacement_fraction_concentrates(self):
        # 1e5 draws at p=0.1: empirical fraction within 3 binomial sigmas
        cache = _fill(PLCache(capacity=8))
        rng = np.random.default_rng(3)
        n = 100_000
        for _ in range(n):
            cache.draw_and_maybe_replace(0.1, lambda: _entry(cache, tag=2), rng)
        frac = cache.replacements / cache.draws
        assert abs(frac - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / n)

    def test_draw_uniformity(self):
        # p=0 keeps contents fixed; each of C=10 slots drawn ~uniformly
        cache = _fill(PLCache(capacity=10))
        rng = np.random.default_rng(4)
        n = 100_000
        counts: dict[int, int] = {e.entry_id: 0 for e in cache.entries}
        for _ in range(n):
            got = cache.draw_and_maybe_replace(0.0, lambda: _entry(cache), rng)
            counts[got.entry_id] += 1
        bound = 3 * np.sqrt(0.1 * 0.9 / n)
        for c in counts.values():
            assert abs(c / n - 0.1) <= bound

    def test_size_constant_after_fill(self):
        cache = _fill(PLCache(capacity=4))
        rng = np.random.default_rng(5)
        for _ in range(100):
            cache.draw_and_maybe_replace(0.5, lambda: _entry(cache), rng)
            assert len(cache.entries) == 4

    def test_deterministic_under_seed(self):
        def run():
            cache = _fill(PLCache(capacity=6))
            rng = np.random.default_rng(77)
            return [
                cache.draw_and_maybe_replace(0.3, lambda: _entry(cache), rng).entry_id
                for _ in range(50)
            ]

        assert run() == run()


class TestAgeStats:
    def test_fresh_fill_has_bounded_staleness(self):
        cache = PLCache(capacity=4)
        for i in range(4):
            cache.insert(_entry(cache, version=i, tag=i))  # filled over 4 updates
        stats = cache.age_stats(current_version=3)
        assert stats["max"] <= 3
        assert stats["mean"] == pytest.approx((3 + 2 + 1 + 0) / 4)

    def test_empty_cache_rejected(self):
        with pytest.raises(CacheNotReadyError):
            PLCache(capacity=2).age_stats(0)

    def test_steady_state_mean_staleness_is_capacity_over_p(self):
        """Each draw touches one uniform slot and replaces it with prob p, so
        a slot's age at steady state is geometric with mean C/p draws. The
        long-run time average of mean staleness must land within 20%."""
        C, p = 100, 0.1
        cache = _fill(PLCache(capacity=C, ), version=0)
        rng = np.random.default_rng(8)
        step = 0

        def fresh():
            return cache.make_entry([np.zeros((1, 1))], [TokenSeq([])], step, ["u"])

        for _ in range(10_000):  # burn-in ~ 10 relaxation times
            step += 1
            cache.draw_and_maybe_replace(p, fresh, rng)
        samples = []
        for _ in range(20_000):
            step += 1
            cache.draw_and_maybe_replace(p, fresh, rng)
            if step % 100 == 0:
                samples.append(cache.age_stats(step)["mean"])
        got = float(np.mean(samples))
        assert abs(got - C / p) <= 0.2 * C / p


class TestSnapshot:
    def test_round_trip_bit_exact(self, tmp_path):
        cache = _fill(PLCache(capacity=3), version=5)
        rng = np.random.default_rng(9)
        for _ in range(10):
            cache.draw_and_maybe_replace(0.5, lambda: _entry(cache, version=6, tag=3), rng)
        path = tmp_path / "cache.bin"
        cache.save(path)
        back = PLCache.load(path)
        assert back.capacity == cache.capacity
        assert back.draws == cache.draws
        assert back.replacements == cache.replacements
        assert back.next_entry_id == cache.next_entry_id
        assert len(back.entries) == len(cache.entries)
        for a, b in zip(cache.entries, back.entries):
            assert a.entry_id == b.entry_id
            assert a.model_version == b.model_version
            assert a.utt_ids == b.utt_ids
            assert a.pls == b.pls
            for ma, mb in zip(a.batch, b.batch):
                np.testing.assert_array_equal(ma, mb)
