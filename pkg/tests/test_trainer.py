import numpy as np
import pytest

from iterpl.ctc import InvalidConfigError, TokenSeq
from iterpl.data import Utterance
from iterpl.metrics import MetricsRecord, MetricsSink, stream_fingerprint
from iterpl.model import load_model
from iterpl.trainer import (
    TrainConfig,
    detect_divergence,
    load_run_state,
    resume,
    run,
    sustained,
)

from helpers import tiny_augment_config, tiny_corpus, tiny_model_config, tiny_train_config


class Recorder:
    def __init__(self):
        self.events = []

    def __call__(self, event, info):
        self.events.append((event, info))

    def of(self, kind):
        return [info for event, info in self.events if event == kind]


class TestPhases:
    def test_phase_order_and_update_decomposition(self, tmp_path):
        cfg = tiny_train_config(pretrain_updates=6, cache_size=3, max_updates=30)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        assert res.pretrain_end_update == 6
        assert res.fill_end_update == 9  # one supervised update per insertion
        phases = [r.phase for r in res.records]
        # never goes backwards
        order = {"pretrain": 0, "fill": 1, "main": 2}
        ranks = [order[p] for p in phases]
        assert ranks == sorted(ranks)
        assert res.total_updates == 30
        assert res.done_reason == "max_updates"

    def test_supervised_only_is_flat_baseline(self, tmp_path):
        # the baseline never leaves pretrain: labeled-only updates at
        # dropout_initial for the whole run, no M, no dropout switch
        rec = Recorder()
        cfg = tiny_train_config(variant="supervised_only", max_updates=20)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r", probe=rec)
        assert res.pretrain_end_update is None
        assert res.fill_end_update is None
        assert all(r.phase == "pretrain" for r in res.records)
        assert all(s["kind"] == "supervised" for s in rec.of("train_step"))
        assert not rec.of("pl_generate")
        final = load_model(res.final_model_path)
        assert final.dropout == cfg.dropout_initial

    def test_no_cache_variant_skips_fill(self, tmp_path):
        cfg = tiny_train_config(variant="naive_no_cache", pretrain_updates=5, max_updates=20)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        assert res.fill_end_update is None
        assert all(r.phase in ("pretrain", "main") for r in res.records)

    def test_supervised_prefix_property(self, tmp_path):
        # slimIPL's first M updates are bit-identical to supervised_only
        m_cfg = tiny_model_config()
        corpus = tiny_corpus()
        a = run(tiny_train_config(pretrain_updates=10, max_updates=40),
                m_cfg, corpus, tmp_path / "a", stop_after_update=10)
        b = run(tiny_train_config(variant="supervised_only", pretrain_updates=10,
                                  max_updates=40),
                m_cfg, corpus, tmp_path / "b", stop_after_update=10)
        _, sa, _ = load_run_state(a.final_checkpoint_path)
        _, sb, _ = load_run_state(b.final_checkpoint_path)
        for name in sa.model.params:
            np.testing.assert_array_equal(sa.model.params[name], sb.model.params[name])
        assert stream_fingerprint(a.records) == stream_fingerprint(b.records)

    def test_dropout_decreases_after_fill(self, tmp_path):
        cfg = tiny_train_config(pretrain_updates=5, cache_size=2, max_updates=20)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        final = load_model(res.final_model_path)
        assert final.dropout == cfg.dropout_after_pretrain


class TestModesAndCache:
    def test_pl_generation_is_eval_mode_unaugmented(self, tmp_path):
        rec = Recorder()
        cfg = tiny_train_config(pretrain_updates=4, max_updates=25)
        run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r", probe=rec)
        gens = rec.of("pl_generate")
        assert gens, "expected pseudo-label generation events"
        assert all(g["mode"] == "eval" and g["augmented"] is False for g in gens)
        steps = rec.of("train_step")
        assert steps
        assert all(s["mode"] == "train" and s["augmented"] is True for s in steps)

    def test_drawn_entry_is_trained_on_even_when_evicted(self, tmp_path):
        rec = Recorder()
        cfg = tiny_train_config(pretrain_updates=4, replace_prob=1.0, max_updates=30)
        run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r", probe=rec)
        draws = rec.of("cache_draw")
        cached_steps = [s for s in rec.of("train_step") if s["kind"] == "cached"]
        assert len(draws) == len(cached_steps) > 0
        for d, s in zip(draws, cached_steps):
            assert d["in_cache"] is False  # p=1: always evicted before training
            assert s["entry_id"] == d["entry_id"]

    def test_cached_pls_stay_fixed_at_generation(self, tmp_path):
        # with p=0 the cache contents never regenerate: model_version stays
        # at fill-time versions forever
        cfg = tiny_train_config(pretrain_updates=4, replace_prob=0.0, cache_size=2,
                                max_updates=30)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        _, st, _ = load_run_state(res.final_checkpoint_path)
        assert st.cache is not None
        assert all(e.model_version <= res.fill_end_update for e in st.cache.entries)

    def test_trainer_never_needs_hidden_references(self, tmp_path):
        corpus = tiny_corpus()
        corpus._oracle_refs.clear()  # sever the oracle entirely
        cfg = tiny_train_config(pretrain_updates=4, max_updates=20)
        res = run(cfg, tiny_model_config(), corpus, tmp_path / "r")
        assert res.done_reason == "max_updates"
        # oracle-dependent metric falls back to its no-data sentinel
        main_recs = [r for r in res.records if r.phase == "main"]
        assert all(r.pl_oracle_ter == -1.0 for r in main_recs)

    def test_filter_empty_pls_drops_empties_from_entries(self, tmp_path):
        cfg = tiny_train_config(pretrain_updates=2, filter_empty_pls=True,
                                cache_size=4, max_updates=25)
        res = run(cfg, tiny_model_config(), tiny_corpus(silence_fraction=0.5),
                  tmp_path / "r")
        _, st, _ = load_run_state(res.final_checkpoint_path)
        for entry in st.cache.entries:
            assert all(len(pl) > 0 for pl in entry.pls)


class TestCounting:
    def test_infeasible_utterances_skipped_not_fatal(self, tmp_path):
        corpus = tiny_corpus()
        # plant a labeled utterance whose reference cannot fit its frames
        bad = Utterance(
            id="labeled-bad",
            features=np.random.default_rng(0).normal(size=(4, 5)),
            reference=TokenSeq([0, 0, 1, 1, 2, 2, 0, 0]),
        )
        corpus.labeled.append(bad)
        cfg = tiny_train_config(variant="supervised_only", max_updates=30, batch_size=13)
        res = run(cfg, tiny_model_config(), corpus, tmp_path / "r")
        assert res.skipped_utterances > 0
        assert res.done_reason == "max_updates"

    def test_every_eval_index_is_a_multiple_of_eval_every(self, tmp_path):
        cfg = tiny_train_config(max_updates=23, eval_every=5)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        *aligned, last = [r.update_index for r in res.records]
        assert all(i % 5 == 0 for i in aligned)
        assert last == 23  # forced final evaluation

    def test_unlabeled_smaller_than_batch_rejected(self, tmp_path):
        corpus = tiny_corpus()
        corpus.unlabeled[:] = corpus.unlabeled[:2]
        with pytest.raises(InvalidConfigError):
            run(tiny_train_config(batch_size=4), tiny_model_config(), corpus, tmp_path / "r")

    def test_unknown_variant_rejected(self):
        with pytest.raises(InvalidConfigError):
            tiny_train_config(variant="mystery").validate()


class TestAutoPretrain:
    def test_auto_mode_ends_pretrain_on_plateau(self, tmp_path):
        cfg = tiny_train_config(
            pretrain_updates=None,
            plateau_patience=3,
            eval_every=50,  # slow cadence: survive CTC warmup, then stall
            max_updates=600,
            max_halvings=50,
        )
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        assert res.pretrain_end_update is not None
        assert res.pretrain_end_update % cfg.eval_every == 0
        # arming waited for the curve to move below its starting value
        first = res.records[0].dev_ter
        moved = [r for r in res.records
                 if r.update_index <= res.pretrain_end_update and r.dev_ter < first]
        assert moved

    def test_auto_mode_ignores_flat_start_stall(self, tmp_path):
        cfg = tiny_train_config(
            pretrain_updates=None,
            learning_rate=1e-9,  # frozen in place: TER never leaves its start
            plateau_patience=1,
            plateau_min_delta=0.5,
            max_updates=20,
            max_halvings=50,
        )
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        # the scheduler halved on the stall, but a curve that never improved
        # has not plateaued in the sense that arms M
        assert res.records[-1].lr < cfg.learning_rate
        assert res.pretrain_end_update is None

    def test_convergence_by_halvings(self, tmp_path):
        cfg = tiny_train_config(
            variant="supervised_only",
            plateau_patience=1,
            plateau_min_delta=0.9,
            max_halvings=3,
            max_updates=500,
        )
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        assert res.done_reason == "converged"
        assert res.total_updates < 500


class TestEmaVariants:
    def test_ema_activated_at_pretrain_end(self, tmp_path):
        cfg = tiny_train_config(variant="ema_cache", pretrain_updates=5, max_updates=25)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        _, st, _ = load_run_state(res.final_checkpoint_path)
        assert st.ema is not None
        assert st.ema.decay == cfg.ema_decay
        assert set(st.ema.shadow) == set(st.model.params)

    def test_ema_no_cache_runs_without_cache(self, tmp_path):
        cfg = tiny_train_config(variant="ema_no_cache", pretrain_updates=5, max_updates=25)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        _, st, _ = load_run_state(res.final_checkpoint_path)
        assert st.cache is None
        assert st.ema is not None

    def test_ema_decay_zero_matches_naive(self, tmp_path):
        # shadow == live params at every step, so PLs match the live model's
        corpus = tiny_corpus()
        m_cfg = tiny_model_config()
        a = run(tiny_train_config(variant="ema_no_cache", ema_decay=0.0,
                                  pretrain_updates=5, max_updates=30),
                m_cfg, corpus, tmp_path / "a")
        b = run(tiny_train_config(variant="naive_no_cache",
                                  pretrain_updates=5, max_updates=30),
                m_cfg, corpus, tmp_path / "b")
        assert stream_fingerprint(a.records) == stream_fingerprint(b.records)


class TestDeterminismAndResume:
    def test_same_seed_bit_identical(self, tmp_path):
        corpus = tiny_corpus()
        cfg = tiny_train_config(max_updates=30)
        a = run(cfg, tiny_model_config(), corpus, tmp_path / "a")
        b = run(cfg, tiny_model_config(), corpus, tmp_path / "b")
        assert stream_fingerprint(a.records) == stream_fingerprint(b.records)
        ma, mb = load_model(a.final_model_path), load_model(b.final_model_path)
        for name in ma.params:
            np.testing.assert_array_equal(ma.params[name], mb.params[name])

    def test_different_seed_differs(self, tmp_path):
        corpus = tiny_corpus()
        a = run(tiny_train_config(max_updates=30, seed=1), tiny_model_config(),
                corpus, tmp_path / "a")
        b = run(tiny_train_config(max_updates=30, seed=2), tiny_model_config(),
                corpus, tmp_path / "b")
        assert stream_fingerprint(a.records) != stream_fingerprint(b.records)

    def test_resume_reproduces_uninterrupted_stream(self, tmp_path):
        corpus = tiny_corpus()
        cfg = tiny_train_config(max_updates=30, eval_every=5)
        full = run(cfg, tiny_model_config(), corpus, tmp_path / "full")
        part = run(cfg, tiny_model_config(), corpus, tmp_path / "part",
                   stop_after_update=15)
        assert part.done_reason == "interrupted"
        resumed = resume(part.final_checkpoint_path, corpus, tmp_path / "part")
        assert resumed.done_reason == full.done_reason
        assert stream_fingerprint(resumed.records) == stream_fingerprint(full.records)
        mf, mr = load_model(full.final_model_path), load_model(resumed.final_model_path)
        for name in mf.params:
            np.testing.assert_array_equal(mf.params[name], mr.params[name])

    def test_resume_rejects_mismatched_corpus(self, tmp_path):
        corpus = tiny_corpus()
        cfg = tiny_train_config(max_updates=20)
        part = run(cfg, tiny_model_config(), corpus, tmp_path / "r", stop_after_update=10)
        other = tiny_corpus(seed=5)
        other.dev.pop()
        with pytest.raises(Exception):
            resume(part.final_checkpoint_path, other, tmp_path / "r")

    def test_run_dir_layout(self, tmp_path):
        cfg = tiny_train_config(max_updates=10, eval_every=5)
        res = run(cfg, tiny_model_config(), tiny_corpus(), tmp_path / "r")
        d = res.run_dir
        assert (d / "metrics.jsonl").exists()
        assert (d / "learning_curve.csv").exists()
        assert (d / "final_model.bin").exists()
        assert (d / "checkpoint_0000005.bin").exists()
        assert (d / "checkpoint_0000010.bin").exists()


def _rec(i, dev_ter, empty=-1.0):
    return MetricsRecord(
        update_index=i, phase="main", dev_ter=dev_ter,
        train_loss_labeled=1.0, train_loss_unlabeled=-1.0,
        pl_oracle_ter=-1.0, empty_pl_fraction=empty, lr=0.1,
        cache_mean_staleness=-1.0, wall_ms=0.0,
    )


class TestDivergence:
    def test_empty_pl_collapse_flags_immediately(self):
        records = [_rec(10, 0.5), _rec(20, 0.5, empty=0.95)]
        assert detect_divergence(records)

    def test_no_data_sentinel_does_not_flag(self):
        records = [_rec(10, 0.5), _rec(20, 0.5, empty=-1.0)]
        assert not detect_divergence(records)

    def test_healthy_run_never_flags(self):
        ters = np.linspace(0.9, 0.2, 12)
        records = [_rec((i + 1) * 10, t) for i, t in enumerate(ters)]
        for k in range(2, len(records) + 1):
            assert not detect_divergence(records[:k])

    def test_sustained_regression_flags(self):
        records = [_rec(10, 0.30), _rec(20, 0.50), _rec(30, 0.52), _rec(40, 0.55)]
        assert detect_divergence(records)

    def test_brief_regression_does_not_flag(self):
        records = [_rec(10, 0.30), _rec(20, 0.50), _rec(30, 0.31)]
        assert not detect_divergence(records)

    def test_sustained_helper(self):
        assert sustained([True, True, True])
        assert sustained([False, True, True, True, False])
        assert not sustained([True, True, False, True, True])
        assert not sustained([])
