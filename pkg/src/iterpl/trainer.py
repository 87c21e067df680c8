"""Semi-supervised CTC training loop with a dynamic pseudo-label cache.

The full variant runs three phases:

  pretrain  - supervised updates on augmented labeled batches
  fill      - generate hard pseudo-labels for fresh unlabeled batches with
              the current model (eval mode, un-augmented), insert each as a
              cache entry, and do one supervised update per insertion
  main      - dropout drops to its post-pretrain value, then rounds of
              labeled_updates_per_round supervised updates followed by
              unlabeled_updates_per_round cache draws; each draw trains on
              the drawn batch (augmented now, labels fixed from generation
              time) and with probability replace_prob swaps that slot for a
              freshly pseudo-labeled batch

The unlabeled:labeled influence ratio is realized purely through the
update-count ratio per round; no loss multiplier is applied.

Ablation variants: supervised_only is the baseline recipe, labeled data at
dropout_initial for the entire run; it never leaves the pretrain phase, and
its dev curve is what the auto-M plateau rule reads, so the dropout
decrease plus pseudo-label stream are exactly what the other variants add
on top of it. naive_no_cache skips the cache and trains on just-generated
pseudo-labels immediately; ema_cache and ema_no_cache generate
pseudo-labels from an EMA shadow of the parameters (activated when
pretraining ends) instead of the live model.

Every attempted optimization step counts as one update, including steps
rejected for non-finite gradients or because every utterance in the batch
was infeasible for CTC; rejected steps leave parameters untouched.

Four independent seeded rng streams (data, augment, dropout, cache) keep
variants comparable: switching variant never perturbs the labeled data
order or augmentation draws of the shared phases.
"""

from __future__ import annotations

import math
import time
from collections import namedtuple
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, spec_augment
from .binio import check_magic, read_array_f8, read_json, write_array_f8, write_json, write_magic
from .cache import PLCache, PLCacheEntry
from .ctc import InvalidConfigError, InvalidInputError, TokenSeq, ctc_loss, greedy_decode
from .data import CorpusSplit, Utterance, make_batches
from .metrics import MetricsRecord, MetricsSink, error_rate
from .model import (
    ModelConfig,
    ModelState,
    backward,
    forward,
    init_model,
    read_model_from,
    save_model,
    set_dropout,
    write_model_to,
    zero_grads,
)
from .optim import AdagradState, EmaState, PlateauScheduler, ema_swap_for_inference, ema_update, adagrad_step

RUNSTATE_MAGIC = b"IPLR"
RUNSTATE_VERSION = 1

VARIANTS = ("slimipl", "supervised_only", "naive_no_cache", "ema_cache", "ema_no_cache")
CACHE_VARIANTS = ("slimipl", "ema_cache")
EMA_VARIANTS = ("ema_cache", "ema_no_cache")
PHASES = ("pretrain", "fill", "main")

# rates that have no data in a window are reported as this, never NaN
NO_DATA = -1.0

# rng stream seeding tag; keeps streams clear of the per-epoch batching seeds
_STREAM_TAG = 19
_STREAM_NAMES = ("data", "augment", "dropout", "cache")


@dataclass(frozen=True)
class TrainConfig:
    variant: str
    cache_size: int
    replace_prob: float
    labeled_updates_per_round: int
    unlabeled_updates_per_round: int
    dropout_initial: float
    dropout_after_pretrain: float
    learning_rate: float
    batch_size: int
    max_updates: int
    eval_every: int
    seed: int
    augment: AugmentConfig
    pretrain_updates: int | None = None  # None = stop pretrain on dev plateau
    ema_decay: float = 0.999
    filter_empty_pls: bool = False
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    max_halvings: int = 5  # convergence: lr halved this many times

    @property
    def unlabeled_ratio(self) -> float:
        """Ratio of unlabeled to labeled updates per round (reported only)."""
        return self.unlabeled_updates_per_round / self.labeled_updates_per_round

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.labeled_updates_per_round < 1 or self.unlabeled_updates_per_round < 0:
            raise InvalidConfigError("need labeled_updates_per_round >= 1 and unlabeled >= 0")
        if not 0.0 <= self.replace_prob <= 1.0:
            raise InvalidConfigError(f"replace_prob must be in [0, 1], got {self.replace_prob}")
        if self.pretrain_updates is not None and self.pretrain_updates < 0:
            raise InvalidConfigError("pretrain_updates must be >= 0 or None")
        if self.cache_size < 1 and self.variant in CACHE_VARIANTS:
            raise InvalidConfigError("cache variants need cache_size >= 1")
        for name in ("dropout_initial", "dropout_after_pretrain"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidConfigError(f"{name} must be in [0, 1), got {v}")
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_updates < 1 or self.eval_every < 1:
            raise InvalidConfigError("batch_size, max_updates, eval_every must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidConfigError("ema_decay must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class RunState:
    """Everything the loop mutates; checkpoints serialize exactly this."""

    model: ModelState
    optimizer: AdagradState
    scheduler: PlateauScheduler
    rngs: dict[str, np.random.Generator]
    ema: EmaState | None = None
    cache: PLCache | None = None
    phase: str = "pretrain"
    update_index: int = 0
    updates_pretrain: int = 0
    updates_fill: int = 0
    updates_main: int = 0
    labeled_epoch: int = 0
    labeled_cursor: int = 0
    round_pos: int = 0
    auto_m_triggered: bool = False
    pretrain_end_update: int | None = None
    fill_end_update: int | None = None
    skipped_utterances: int = 0
    pls_generated: int = 0
    empty_pls: int = 0
    divergence_flags: list[bool] = field(default_factory=list)
    # (dev_ter, empty_pl_fraction) per eval; kept in the checkpoint so
    # divergence detection and auto-M arming survive a resume intact
    eval_history: list[tuple[float, float]] = field(default_factory=list)
    done_reason: str | None = None


@dataclass
class RunResult:
    run_dir: Path
    records: list[MetricsRecord]
    final_dev_ter: float
    best_dev_ter: float
    divergence_flags: list[bool]
    diverged: bool
    sustained_divergence: bool
    done_reason: str
    total_updates: int
    pretrain_end_update: int | None
    fill_end_update: int | None
    skipped_utterances: int
    rejected_steps: int
    pls_generated: int
    empty_pls: int
    final_model_path: Path
    final_checkpoint_path: Path


def generate_pl(model: ModelState, features_list) -> list[TokenSeq]:
    """Greedy hard labels for un-augmented features, model in eval mode."""
    out = []
    for feats in features_list:
        lp, _ = forward(model, feats, mode="eval")
        out.append(greedy_decode(lp))
    return out


# minimal view of a metrics record; detect_divergence needs only these two
_EvalPoint = namedtuple("_EvalPoint", ["dev_ter", "empty_pl_fraction"])


def detect_divergence(
    records: list[MetricsRecord],
    empty_threshold: float = 0.9,
    ter_regression: float = 0.15,
    window: int = 3,
) -> bool:
    """Divergence flag for the latest evaluation point.

    Fires immediately when the empty pseudo-label fraction passes
    empty_threshold, or when dev TER sits more than ter_regression above
    its earlier best for `window` consecutive evaluations. The run is not
    aborted on a flag; collapse is sometimes recovered from.
    """
    if len(records) < 2:
        return False
    last = records[-1]
    if last.empty_pl_fraction >= 0.0 and last.empty_pl_fraction > empty_threshold:
        return True
    if len(records) >= window + 1:
        recent = records[-window:]
        prior_best = min(r.dev_ter for r in records[:-window])
        if all(r.dev_ter > prior_best + ter_regression for r in recent):
            return True
    return False


def sustained(flags: list[bool], run_length: int = 3) -> bool:
    """True when the flag held at `run_length` consecutive eval points."""
    streak = 0
    for f in flags:
        streak = streak + 1 if f else 0
        if streak >= run_length:
            return True
    return False


class _Window:
    """Rolling per-evaluation-window statistics; reset at every eval point."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.sup_losses: list[float] = []
        self.unl_losses: list[float] = []
        self.pls = 0
        self.empty = 0
        self.pl_pairs: list[tuple[str, TokenSeq]] = []

    def mean(self, values: list[float]) -> float:
        return float(np.mean(values)) if values else NO_DATA


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        corpus: CorpusSplit,
        state: RunState,
        sink: MetricsSink,
        probe=None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus
        self.state = state
        self.sink = sink
        self.probe = probe
        self.window = _Window()
        self._labeled_batches: list[list[Utterance]] | None = None
        self._start = time.monotonic()
        self._check_corpus()

    # ---------------- corpus access ----------------

    def _check_corpus(self):
        cfg = self.cfg
        if not self.corpus.labeled:
            raise InvalidConfigError("labeled split is empty")
        if not self.corpus.dev:
            raise InvalidConfigError("dev split is empty")
        if cfg.variant != "supervised_only" and len(self.corpus.unlabeled) < cfg.batch_size:
            raise InvalidConfigError(
                f"unlabeled split has {len(self.corpus.unlabeled)} utterances, "
                f"need at least batch_size={cfg.batch_size}"
            )
        # fail before training rather than on whichever batch hits it first
        kernel = self.state.model.config.conv_kernel
        for name in ("labeled", "unlabeled", "dev", "test"):
            for u in self.corpus.split(name):
                if u.duration < kernel:
                    raise InvalidConfigError(
                        f"utterance {u.id} has {u.duration} frames but the model "
                        f"needs conv_kernel={kernel}; raise min_tokens or "
                        f"min_token_frames, or shrink the kernel"
                    )

    def _next_labeled_batch(self) -> list[Utterance]:
        st = self.state
        if self._labeled_batches is None:
            self._labeled_batches = make_batches(
                self.corpus.labeled, self.cfg.batch_size, self.cfg.seed, st.labeled_epoch
            )
        if st.labeled_cursor >= len(self._labeled_batches):
            st.labeled_epoch += 1
            st.labeled_cursor = 0
            self._labeled_batches = make_batches(
                self.corpus.labeled, self.cfg.batch_size, self.cfg.seed, st.labeled_epoch
            )
        batch = self._labeled_batches[st.labeled_cursor]
        st.labeled_cursor += 1
        return batch

    def _fresh_unlabeled_batch(self) -> list[Utterance]:
        idx = self.state.rngs["data"].choice(
            len(self.corpus.unlabeled), size=self.cfg.batch_size, replace=False
        )
        return [self.corpus.unlabeled[int(i)] for i in idx]

    # ---------------- pseudo-labels ----------------

    def _generate_entry(self) -> PLCacheEntry:
        """Fresh unlabeled batch pseudo-labeled by the current PL source."""
        st = self.state
        batch = self._fresh_unlabeled_batch()
        feats = [u.features for u in batch]
        if st.ema is not None:
            with ema_swap_for_inference(st.ema, st.model) as shadowed:
                pls = generate_pl(shadowed, feats)
            source = "ema"
        else:
            pls = generate_pl(st.model, feats)
            source = "model"
        n_empty = sum(1 for pl in pls if len(pl) == 0)
        st.pls_generated += len(pls)
        st.empty_pls += n_empty
        self.window.pls += len(pls)
        self.window.empty += n_empty
        if self.probe:
            self.probe("pl_generate", {
                "mode": "eval", "augmented": False, "source": source,
                "num_utts": len(pls), "num_empty": n_empty,
                "model_version": st.update_index,
            })
        keep = range(len(batch))
        if self.cfg.filter_empty_pls:
            keep = [i for i in keep if len(pls[i]) > 0]
        kept_feats = [feats[i] for i in keep]
        kept_pls = [pls[i] for i in keep]
        kept_ids = [batch[i].id for i in keep]
        self.window.pl_pairs.extend(zip(kept_ids, kept_pls))
        cache = st.cache
        if cache is not None:
            return cache.make_entry(kept_feats, kept_pls, st.update_index, kept_ids)
        # no-cache variants reuse the entry container for uniformity
        return PLCacheEntry(
            batch=kept_feats, pls=kept_pls, model_version=st.update_index,
            entry_id=-1, utt_ids=kept_ids,
        )

    # ---------------- optimization ----------------

    def _train_on(self, feats_list, targets, kind: str, entry_id=None) -> None:
        """One attempted update on parallel (features, target) pairs."""
        st, cfg = self.state, self.cfg
        grads = zero_grads(st.model)
        total_loss = 0.0
        n_ok = 0
        for feats, target in zip(feats_list, targets):
            aug = spec_augment(feats, cfg.augment, st.rngs["augment"])
            lp, tape = forward(st.model, aug, mode="train", rng=st.rngs["dropout"])
            loss, g_lp = ctc_loss(lp, target)
            if not math.isfinite(loss):
                st.skipped_utterances += 1
                continue
            g_params = backward(st.model, tape, g_lp)
            for name in grads:
                grads[name] += g_params[name]
            total_loss += loss
            n_ok += 1
        st.update_index += 1
        if n_ok > 0:
            for name in grads:
                grads[name] /= n_ok
            if adagrad_step(st.model, grads, st.optimizer):
                st.model.update_count += 1
        else:
            st.optimizer.rejected_steps += 1
        if st.ema is not None:
            ema_update(st.ema, st.model)
        mean_loss = total_loss / n_ok if n_ok else NO_DATA
        if kind == "supervised":
            self.window.sup_losses.append(mean_loss)
        else:
            self.window.unl_losses.append(mean_loss)
        if self.probe:
            self.probe("train_step", {
                "mode": "train", "augmented": True, "kind": kind,
                "entry_id": entry_id, "update_index": st.update_index,
                "num_utts": n_ok,
            })

    def _supervised_update(self) -> None:
        batch = self._next_labeled_batch()
        self._train_on([u.features for u in batch], [u.reference for u in batch], "supervised")

    def _unlabeled_update(self) -> None:
        st = self.state
        if st.cache is not None:
            entry = st.cache.draw_and_maybe_replace(
                self.cfg.replace_prob, self._generate_entry, st.rngs["cache"]
            )
            if self.probe:
                self.probe("cache_draw", {
                    "entry_id": entry.entry_id,
                    "in_cache": any(e.entry_id == entry.entry_id for e in st.cache.entries),
                })
            self._train_on(entry.batch, entry.pls, "cached", entry_id=entry.entry_id)
        else:
            entry = self._generate_entry()
            self._train_on(entry.batch, entry.pls, "fresh_unlabeled")

    # ---------------- evaluation ----------------

    def _dev_ter(self) -> float:
        hyps, refs = [], []
        for utt in self.corpus.dev:
            lp, _ = forward(self.state.model, utt.features, mode="eval")
            hyps.append(greedy_decode(lp))
            refs.append(utt.reference)
        return error_rate(hyps, refs)

    def _pl_oracle_ter(self) -> float:
        st = self.state
        if st.cache is not None and st.cache.entries:
            pairs = [
                (uid, pl)
                for e in st.cache.entries
                for uid, pl in zip(e.utt_ids, e.pls)
            ]
        else:
            pairs = self.window.pl_pairs
        if not pairs:
            return NO_DATA
        hyps, refs = [], []
        for uid, pl in pairs:
            try:
                refs.append(self.corpus.oracle_reference(uid))
            except InvalidInputError:
                return NO_DATA
            hyps.append(pl)
        if sum(len(r) for r in refs) == 0:
            return NO_DATA
        return error_rate(hyps, refs)

    def _evaluate(self, run_dir: Path) -> None:
        st, cfg, w = self.state, self.cfg, self.window
        record = MetricsRecord(
            update_index=st.update_index,
            phase=st.phase,
            dev_ter=self._dev_ter(),
            train_loss_labeled=w.mean(w.sup_losses),
            train_loss_unlabeled=w.mean(w.unl_losses),
            pl_oracle_ter=self._pl_oracle_ter(),
            empty_pl_fraction=(w.empty / w.pls) if w.pls else NO_DATA,
            lr=st.optimizer.lr,
            cache_mean_staleness=(
                st.cache.age_stats(st.update_index)["mean"]
                if st.cache is not None and st.cache.entries
                else NO_DATA
            ),
            wall_ms=(time.monotonic() - self._start) * 1000.0,
        )
        w.reset()
        self.sink.emit(record)
        st.scheduler.update(st.optimizer, record.dev_ter)
        st.eval_history.append((record.dev_ter, record.empty_pl_fraction))
        points = [_EvalPoint(t, e) for t, e in st.eval_history]
        st.divergence_flags.append(detect_divergence(points))
        if st.scheduler.num_halvings >= cfg.max_halvings:
            st.done_reason = "converged"
        if (
            st.phase == "pretrain"
            and cfg.variant != "supervised_only"
            and cfg.pretrain_updates is None
            and st.scheduler.num_halvings >= 1
            # a stall at the starting error rate (decoder not yet emitting)
            # is not a plateau of a curve that has moved
            and record.dev_ter < st.eval_history[0][0]
        ):
            st.auto_m_triggered = True
        save_run_state(self, run_dir / f"checkpoint_{st.update_index:07d}.bin")

    # ---------------- phase machine ----------------

    def _pretrain_done(self) -> bool:
        st, cfg = self.state, self.cfg
        if cfg.variant == "supervised_only":
            # the baseline IS the pretrain recipe; M is read off its curve
            return False
        if cfg.pretrain_updates is not None:
            return st.updates_pretrain >= cfg.pretrain_updates
        return st.auto_m_triggered

    def _maybe_transition(self) -> None:
        st, cfg = self.state, self.cfg
        if st.phase == "pretrain" and self._pretrain_done():
            st.pretrain_end_update = st.update_index
            if cfg.variant in EMA_VARIANTS:
                st.ema = EmaState.for_model(st.model, cfg.ema_decay)
            if cfg.variant in CACHE_VARIANTS:
                st.cache = PLCache(capacity=cfg.cache_size)
                st.phase = "fill"
            else:
                set_dropout(st.model, cfg.dropout_after_pretrain)
                st.phase = "main"
        elif st.phase == "fill" and st.cache is not None and st.cache.full:
            st.fill_end_update = st.update_index
            set_dropout(st.model, cfg.dropout_after_pretrain)
            st.phase = "main"

    def _step(self) -> None:
        st, cfg = self.state, self.cfg
        if st.phase == "pretrain":
            self._supervised_update()
            st.updates_pretrain += 1
        elif st.phase == "fill":
            st.cache.insert(self._generate_entry())
            self._supervised_update()
            st.updates_fill += 1
        else:
            per_round = cfg.labeled_updates_per_round + cfg.unlabeled_updates_per_round
            if st.round_pos < cfg.labeled_updates_per_round:
                self._supervised_update()
            else:
                self._unlabeled_update()
            st.round_pos = (st.round_pos + 1) % per_round
            st.updates_main += 1

    def run_loop(self, run_dir: Path, stop_after_update: int | None = None) -> None:
        st, cfg = self.state, self.cfg
        while st.done_reason is None:
            self._maybe_transition()
            self._step()
            if st.update_index % cfg.eval_every == 0:
                self._evaluate(run_dir)
            if st.done_reason is None and st.update_index >= cfg.max_updates:
                st.done_reason = "max_updates"
            if stop_after_update is not None and st.update_index >= stop_after_update:
                break


# ---------------- checkpointing ----------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_run_state(trainer: Trainer, path) -> None:
    st, cfg = trainer.state, trainer.cfg
    header = {
        "train_config": cfg.to_dict(),
        "corpus_counts": {
            name: len(trainer.corpus.split(name))
            for name in ("labeled", "unlabeled", "dev", "test")
        },
        "phase": st.phase,
        "update_index": st.update_index,
        "updates_pretrain": st.updates_pretrain,
        "updates_fill": st.updates_fill,
        "updates_main": st.updates_main,
        "labeled_epoch": st.labeled_epoch,
        "labeled_cursor": st.labeled_cursor,
        "round_pos": st.round_pos,
        "auto_m_triggered": st.auto_m_triggered,
        "pretrain_end_update": st.pretrain_end_update,
        "fill_end_update": st.fill_end_update,
        "skipped_utterances": st.skipped_utterances,
        "pls_generated": st.pls_generated,
        "empty_pls": st.empty_pls,
        "divergence_flags": st.divergence_flags,
        "eval_history": [[t, e] for t, e in st.eval_history],
        "done_reason": st.done_reason,
        "optimizer": {
            "lr": st.optimizer.lr,
            "eps": st.optimizer.eps,
            "rejected_steps": st.optimizer.rejected_steps,
            "names": sorted(st.optimizer.accumulators),
        },
        "scheduler": {
            "patience": st.scheduler.patience,
            "min_delta": st.scheduler.min_delta,
            "best_metric": st.scheduler.best_metric,
            "evals_since_best": st.scheduler.evals_since_best,
            "num_halvings": st.scheduler.num_halvings,
            "factor": st.scheduler.factor,
        },
        "rng": {name: _rng_state(st.rngs[name]) for name in _STREAM_NAMES},
        "has_ema": st.ema is not None,
        "ema_decay": st.ema.decay if st.ema is not None else None,
        "ema_names": sorted(st.ema.shadow) if st.ema is not None else [],
        "has_cache": st.cache is not None,
    }
    with open(path, "wb") as f:
        write_magic(f, RUNSTATE_MAGIC, RUNSTATE_VERSION)
        write_json(f, header)
        write_model_to(f, st.model)
        for name in header["optimizer"]["names"]:
            write_array_f8(f, st.optimizer.accumulators[name])
        if st.ema is not None:
            for name in header["ema_names"]:
                write_array_f8(f, st.ema.shadow[name])
        if st.cache is not None:
            st.cache.write_to(f)


def load_run_state(path) -> tuple[TrainConfig, RunState, dict]:
    with open(path, "rb") as f:
        check_magic(f, RUNSTATE_MAGIC, RUNSTATE_VERSION, "run state")
        header = read_json(f)
        cfg = TrainConfig.from_dict(header["train_config"])
        model = read_model_from(f)
        opt = AdagradState(
            lr=header["optimizer"]["lr"],
            eps=header["optimizer"]["eps"],
            rejected_steps=header["optimizer"]["rejected_steps"],
            accumulators={name: read_array_f8(f) for name in header["optimizer"]["names"]},
        )
        ema = None
        if header["has_ema"]:
            ema = EmaState(
                decay=header["ema_decay"],
                shadow={name: read_array_f8(f) for name in header["ema_names"]},
            )
        cache = PLCache.read_from(f) if header["has_cache"] else None
    sched = PlateauScheduler(**header["scheduler"])
    state = RunState(
        model=model,
        optimizer=opt,
        scheduler=sched,
        rngs={name: _rng_from_state(header["rng"][name]) for name in _STREAM_NAMES},
        ema=ema,
        cache=cache,
        phase=header["phase"],
        update_index=header["update_index"],
        updates_pretrain=header["updates_pretrain"],
        updates_fill=header["updates_fill"],
        updates_main=header["updates_main"],
        labeled_epoch=header["labeled_epoch"],
        labeled_cursor=header["labeled_cursor"],
        round_pos=header["round_pos"],
        auto_m_triggered=header["auto_m_triggered"],
        pretrain_end_update=header["pretrain_end_update"],
        fill_end_update=header["fill_end_update"],
        skipped_utterances=header["skipped_utterances"],
        pls_generated=header["pls_generated"],
        empty_pls=header["empty_pls"],
        divergence_flags=list(header["divergence_flags"]),
        eval_history=[(t, e) for t, e in header["eval_history"]],
        done_reason=header["done_reason"],
    )
    return cfg, state, header["corpus_counts"]


# ---------------- entry points ----------------


def _fresh_state(cfg: TrainConfig, model_cfg: ModelConfig) -> RunState:
    model = init_model(model_cfg, seed=cfg.seed)
    set_dropout(model, cfg.dropout_initial)
    return RunState(
        model=model,
        optimizer=AdagradState.for_model(model, lr=cfg.learning_rate),
        scheduler=PlateauScheduler(patience=cfg.plateau_patience, min_delta=cfg.plateau_min_delta),
        rngs={
            name: np.random.default_rng([cfg.seed, _STREAM_TAG, i])
            for i, name in enumerate(_STREAM_NAMES)
        },
    )


def _finish(trainer: Trainer, run_dir: Path) -> RunResult:
    st = trainer.state
    if st.update_index % trainer.cfg.eval_every != 0:
        trainer._evaluate(run_dir)
    final_ckpt = run_dir / f"checkpoint_{st.update_index:07d}.bin"
    if not final_ckpt.exists():
        save_run_state(trainer, final_ckpt)
    final_model = run_dir / "final_model.bin"
    save_model(st.model, final_model)
    records = trainer.sink.records
    ters = [r.dev_ter for r in records]
    return RunResult(
        run_dir=run_dir,
        records=records,
        final_dev_ter=ters[-1],
        best_dev_ter=min(ters),
        divergence_flags=list(st.divergence_flags),
        diverged=any(st.divergence_flags),
        sustained_divergence=sustained(st.divergence_flags),
        done_reason=st.done_reason or "interrupted",
        total_updates=st.update_index,
        pretrain_end_update=st.pretrain_end_update,
        fill_end_update=st.fill_end_update,
        skipped_utterances=st.skipped_utterances,
        rejected_steps=st.optimizer.rejected_steps,
        pls_generated=st.pls_generated,
        empty_pls=st.empty_pls,
        final_model_path=final_model,
        final_checkpoint_path=final_ckpt,
    )


def run(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    corpus: CorpusSplit,
    run_dir,
    probe=None,
    stop_after_update: int | None = None,
) -> RunResult:
    """Train from scratch into run_dir; returns the summarized result.

    stop_after_update halts right after that update (a checkpoint exists if
    it was an eval point) without marking the run finished; use resume() to
    continue it.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    model_cfg.validate()
    state = _fresh_state(cfg, model_cfg)
    sink = MetricsSink(run_dir)
    trainer = Trainer(cfg, corpus, state, sink, probe=probe)
    trainer.run_loop(run_dir, stop_after_update=stop_after_update)
    if stop_after_update is not None and trainer.state.done_reason is None:
        return _finish_partial(trainer, run_dir)
    return _finish(trainer, run_dir)


def resume(
    checkpoint_path,
    corpus: CorpusSplit,
    run_dir,
    probe=None,
    stop_after_update: int | None = None,
) -> RunResult:
    """Continue a run from a checkpoint, appending to run_dir's metrics."""
    run_dir = Path(run_dir)
    cfg, state, counts = load_run_state(checkpoint_path)
    for name, n in counts.items():
        if len(corpus.split(name)) != n:
            raise InvalidInputError(
                f"corpus {name} split has {len(corpus.split(name))} utterances, "
                f"checkpoint expects {n}"
            )
    sink = MetricsSink.resume(run_dir)
    trainer = Trainer(cfg, corpus, state, sink, probe=probe)
    trainer.run_loop(run_dir, stop_after_update=stop_after_update)
    if stop_after_update is not None and trainer.state.done_reason is None:
        return _finish_partial(trainer, run_dir)
    return _finish(trainer, run_dir)


def _finish_partial(trainer: Trainer, run_dir: Path) -> RunResult:
    """Summary for an interrupted run; no final artifacts are written."""
    st = trainer.state
    records = trainer.sink.records
    ters = [r.dev_ter for r in records] or [float("nan")]
    ckpt = run_dir / f"checkpoint_{st.update_index:07d}.bin"
    return RunResult(
        run_dir=run_dir,
        records=records,
        final_dev_ter=ters[-1],
        best_dev_ter=min(ters),
        divergence_flags=list(st.divergence_flags),
        diverged=any(st.divergence_flags),
        sustained_divergence=sustained(st.divergence_flags),
        done_reason="interrupted",
        total_updates=st.update_index,
        pretrain_end_update=st.pretrain_end_update,
        fill_end_update=st.fill_end_update,
        skipped_utterances=st.skipped_utterances,
        rejected_steps=st.optimizer.rejected_steps,
        pls_generated=st.pls_generated,
        empty_pls=st.empty_pls,
        final_model_path=run_dir / "final_model.bin",
        final_checkpoint_path=ckpt,
    )
