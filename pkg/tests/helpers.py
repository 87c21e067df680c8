"""Shared generators and brute-force reference implementations.

Everything here is deliberately independent of the package's own
forward-backward / beam-search code paths: the references enumerate raw
frame labelings and collapse them directly.
"""

from __future__ import annotations

import math

import numpy as np

from iterpl.ctc import LogPosteriors, TokenSeq


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def random_log_posteriors(rng, num_frames: int, vocab: int) -> LogPosteriors:
    z = rng.normal(size=(num_frames, vocab + 1))
    return LogPosteriors(values=log_softmax_rows(z), blank_index=vocab)


def all_frame_paths(num_frames: int, num_symbols: int) -> np.ndarray:
    """Every frame labeling, shape (num_symbols**num_frames, num_frames)."""
    n = num_symbols**num_frames
    grid = np.unravel_index(np.arange(n), (num_symbols,) * num_frames)
    return np.stack(grid, axis=1).astype(np.int64)


def collapse_reference(path, blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return tuple(out)


def brute_force_ctc_loss(lp: LogPosteriors, target: TokenSeq) -> float:
    """-log sum of the probabilities of every frame labeling that collapses
    to ``target``.  Vectorized path enumeration, scalar collapse matching."""
    v = lp.values
    T, K = v.shape
    blank = lp.blank_index
    want = tuple(target)
    L = len(want)

    paths = all_frame_paths(T, K)
    logp = v[np.arange(T)[None, :], paths].sum(axis=1)

    keep = np.ones(paths.shape, dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep &= paths != blank
    counts = keep.sum(axis=1)
    match = counts == L
    if L:
        pos = np.cumsum(keep, axis=1) - 1
        out = np.full((paths.shape[0], T), -1, dtype=np.int64)
        rows, cols = np.nonzero(keep)
        out[rows, pos[rows, cols]] = paths[rows, cols]
        match &= np.all(out[:, :L] == np.asarray(want), axis=1)
    if not match.any():
        return math.inf
    sel = logp[match]
    m = sel.max()
    return float(-(m + np.log(np.exp(sel - m).sum())))


def brute_force_best_sequence(lp: LogPosteriors) -> tuple[int, ...]:
    """argmax over label sequences of the summed alignment probability,
    ties broken by (shorter, lexicographically smaller)."""
    v = lp.values
    T, K = v.shape
    blank = lp.blank_index
    totals: dict[tuple[int, ...], float] = {}
    for path in all_frame_paths(T, K):
        seq = collapse_reference(path, blank)
        logp = float(v[np.arange(T), path].sum())
        if seq in totals:
            m = max(totals[seq], logp)
            totals[seq] = m + math.log(math.exp(totals[seq] - m) + math.exp(logp - m))
        else:
            totals[seq] = logp
    return min(totals, key=lambda s: (-totals[s], len(s), s))


def tiny_model_config(dropout: float = 0.0):
    """A few-hundred-parameter model, small enough for exhaustive FD checks."""
    from iterpl.model import ModelConfig

    return ModelConfig(
        feature_dim=5,
        hidden_dim=6,
        num_blocks=2,
        vocab_size=3,
        conv_kernel=3,
        conv_stride=2,
        dropout=dropout,
    )


def tiny_task_config(**overrides):
    from iterpl.data import SynthTaskConfig

    base = dict(vocab_size=3, feature_dim=5, min_token_frames=3, max_token_frames=5,
                noise_std=0.3, min_tokens=2, max_tokens=4, prototype_seed=3)
    base.update(overrides)
    return SynthTaskConfig(**base)


def tiny_corpus(silence_fraction: float = 0.0, seed: int = 0):
    from iterpl.data import generate_corpus

    cfg = tiny_task_config(silence_fraction=silence_fraction)
    return generate_corpus(cfg, 12, 30, 6, 4, seed=seed)


def tiny_augment_config():
    from iterpl.augment import AugmentConfig

    return AugmentConfig(num_freq_masks=1, freq_param=2, num_time_masks=1,
                         time_param=3, max_time_ratio=0.3)


def tiny_train_config(**overrides):
    from iterpl.trainer import TrainConfig

    base = dict(
        variant="slimipl",
        cache_size=3,
        replace_prob=0.5,
        labeled_updates_per_round=1,
        unlabeled_updates_per_round=2,
        dropout_initial=0.3,
        dropout_after_pretrain=0.1,
        learning_rate=0.1,
        batch_size=4,
        max_updates=40,
        eval_every=5,
        seed=11,
        augment=tiny_augment_config(),
        pretrain_updates=8,
    )
    base.update(overrides)
    return TrainConfig(**base)
