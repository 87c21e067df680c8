"""Synthetic corpus: token strings rendered to noisy feature frames.

Each vocabulary token owns a fixed unit-norm prototype vector. An utterance
is a token string where every token emits a uniformly random number of
frames of its prototype plus Gaussian noise, so a CTC model has to learn
alignment. Features are then normalized per utterance to zero mean and unit
variance.

The unlabeled split hides its references: the trainer's view sees
reference=None, and pseudo-label quality can only be scored through
CorpusSplit.oracle_reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .binio import (
    check_magic,
    read_array_f8,
    read_json,
    read_string,
    read_u8,
    write_array_f8,
    write_json,
    write_magic,
    write_string,
    write_u8,
)
from .ctc import InvalidConfigError, InvalidInputError, TokenSeq

CORPUS_MAGIC = b"IPLC"
CORPUS_VERSION = 1
SPLIT_NAMES = ("labeled", "unlabeled", "dev", "test")


@dataclass(frozen=True)
class SynthTaskConfig:
    vocab_size: int
    feature_dim: int
    min_token_frames: int
    max_token_frames: int
    noise_std: float
    min_tokens: int
    max_tokens: int
    prototype_seed: int = 0
    silence_fraction: float = 0.0  # share of unlabeled utts that are pure noise

    def validate(self) -> None:
        if self.vocab_size < 1 or self.feature_dim < 1:
            raise InvalidConfigError("vocab_size and feature_dim must be >= 1")
        if self.min_token_frames < 1 or self.max_token_frames < self.min_token_frames:
            raise InvalidConfigError("need 1 <= min_token_frames <= max_token_frames")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise InvalidConfigError("need 1 <= min_tokens <= max_tokens")
        if self.noise_std < 0:
            raise InvalidConfigError("noise_std must be >= 0")
        if not 0.0 <= self.silence_fraction <= 1.0:
            raise InvalidConfigError("silence_fraction must be in [0, 1]")


def letters_preset(**overrides) -> SynthTaskConfig:
    """26 letters plus apostrophe and word boundary: a 28-token vocabulary."""
    base = dict(vocab_size=28, feature_dim=16, min_token_frames=4, max_token_frames=8,
                noise_std=0.5, min_tokens=3, max_tokens=8)
    base.update(overrides)
    return SynthTaskConfig(**base)


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, F), normalized
    reference: TokenSeq | None
    flagged: bool = False  # zero-variance input, features forced to 0

    @property
    def duration(self) -> int:
        return self.features.shape[0]


@dataclass
class CorpusSplit:
    labeled: list[Utterance]
    unlabeled: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    _oracle_refs: dict[str, TokenSeq] = field(default_factory=dict, repr=False)

    def oracle_reference(self, utt_id: str) -> TokenSeq:
        """Hidden reference of an unlabeled utterance, for evaluation only."""
        try:
            return self._oracle_refs[utt_id]
        except KeyError:
            raise InvalidInputError(f"no oracle reference for {utt_id!r}") from None

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLIT_NAMES:
            raise InvalidInputError(f"unknown split {name!r}")
        return getattr(self, name)


def prototypes(cfg: SynthTaskConfig) -> np.ndarray:
    """V fixed unit-norm vectors in R^F, determined by prototype_seed."""
    rng = np.random.default_rng(cfg.prototype_seed)
    p = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def render_tokens(
    cfg: SynthTaskConfig, tokens, rng: np.random.Generator, protos: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Raw (un-normalized) features plus the true per-frame token labels."""
    if protos is None:
        protos = prototypes(cfg)
    durations = rng.integers(cfg.min_token_frames, cfg.max_token_frames + 1, size=len(tokens))
    frame_labels = np.repeat(np.asarray(tokens, dtype=np.int64), durations)
    clean = protos[frame_labels]
    noise = rng.normal(scale=cfg.noise_std, size=clean.shape) if cfg.noise_std > 0 else 0.0
    return clean + noise, frame_labels


def _render_silence(cfg: SynthTaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Pure-noise utterance with a duration typical of real ones."""
    n_tokens = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    frames = int(rng.integers(cfg.min_token_frames, cfg.max_token_frames + 1, size=n_tokens).sum())
    scale = cfg.noise_std if cfg.noise_std > 0 else 1.0
    return rng.normal(scale=scale, size=(frames, cfg.feature_dim))


def normalize(utt: Utterance) -> Utterance:
    """Zero mean, unit variance over all cells; zero-variance inputs flag."""
    x = utt.features
    if x.size <= 1:
        raise InvalidInputError("normalization needs more than one cell")
    mean = x.mean()
    var = x.var()
    if var == 0.0:
        return replace(utt, features=np.zeros_like(x), flagged=True)
    return replace(utt, features=(x - mean) / np.sqrt(var), flagged=False)


def generate_corpus(
    cfg: SynthTaskConfig,
    num_labeled: int,
    num_unlabeled: int,
    num_dev: int,
    num_test: int,
    seed: int,
) -> CorpusSplit:
    """Deterministic per (cfg, seed); silence goes to the unlabeled split only."""
    cfg.validate()
    protos = prototypes(cfg)
    rng = np.random.default_rng([seed, cfg.prototype_seed])
    splits: dict[str, list[Utterance]] = {name: [] for name in SPLIT_NAMES}
    oracle: dict[str, TokenSeq] = {}
    counts = dict(labeled=num_labeled, unlabeled=num_unlabeled, dev=num_dev, test=num_test)
    for name in SPLIT_NAMES:
        for i in range(counts[name]):
            utt_id = f"{name}-{i:05d}"
            silent = name == "unlabeled" and rng.random() < cfg.silence_fraction
            if silent:
                feats = _render_silence(cfg, rng)
                ref = TokenSeq([])
            else:
                n_tokens = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
                tokens = rng.integers(0, cfg.vocab_size, size=n_tokens)
                feats, _ = render_tokens(cfg, tokens, rng, protos)
                ref = TokenSeq(tokens)
            utt = normalize(Utterance(id=utt_id, features=feats, reference=ref))
            if name == "unlabeled":
                oracle[utt_id] = ref
                utt = replace(utt, reference=None)
            splits[name].append(utt)
    return CorpusSplit(**splits, _oracle_refs=oracle)


def make_batches(utts: list[Utterance], batch_size: int, seed: int, epoch: int) -> list[list[Utterance]]:
    """Seeded shuffle per (seed, epoch); the final short batch is kept."""
    if batch_size < 1:
        raise InvalidConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not utts:
        return []
    order = np.random.default_rng([seed, epoch]).permutation(len(utts))
    shuffled = [utts[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _write_utt(f, utt: Utterance, split_idx: int, hidden_ref: TokenSeq | None) -> None:
    write_u8(f, split_idx)
    write_string(f, utt.id)
    ref = utt.reference if utt.reference is not None else hidden_ref
    write_u8(f, 1 if utt.reference is not None else 0)
    write_json(f, list(ref) if ref is not None else None)
    write_u8(f, 1 if utt.flagged else 0)
    write_array_f8(f, utt.features)


def save_corpus(corpus: CorpusSplit, cfg: SynthTaskConfig, seed: int, path) -> None:
    path = Path(path)
    all_utts = [(n, u) for n in SPLIT_NAMES for u in corpus.split(n)]
    header = {
        "config": {k: getattr(cfg, k) for k in (
            "vocab_size", "feature_dim", "min_token_frames", "max_token_frames",
            "noise_std", "min_tokens", "max_tokens", "prototype_seed", "silence_fraction")},
        "seed": seed,
        "counts": {n: len(corpus.split(n)) for n in SPLIT_NAMES},
    }
    with open(path, "wb") as f:
        write_magic(f, CORPUS_MAGIC, CORPUS_VERSION)
        write_json(f, header)
        for name, utt in all_utts:
            hidden = corpus._oracle_refs.get(utt.id) if name == "unlabeled" else None
            _write_utt(f, utt, SPLIT_NAMES.index(name), hidden)


def load_corpus(path) -> tuple[CorpusSplit, SynthTaskConfig, int]:
    path = Path(path)
    with open(path, "rb") as f:
        check_magic(f, CORPUS_MAGIC, CORPUS_VERSION, "corpus")
        header = read_json(f)
        cfg = SynthTaskConfig(**header["config"])
        cfg.validate()
        splits: dict[str, list[Utterance]] = {name: [] for name in SPLIT_NAMES}
        oracle: dict[str, TokenSeq] = {}
        total = sum(header["counts"].values())
        for _ in range(total):
            split_idx = read_u8(f)
            name = SPLIT_NAMES[split_idx]
            utt_id = read_string(f)
            visible = read_u8(f) == 1
            ref_list = read_json(f)
            flagged = read_u8(f) == 1
            feats = read_array_f8(f)
            ref = TokenSeq(ref_list) if ref_list is not None else None
            if visible:
                utt = Utterance(id=utt_id, features=feats, reference=ref, flagged=flagged)
            else:
                utt = Utterance(id=utt_id, features=feats, reference=None, flagged=flagged)
                if ref is not None:
                    oracle[utt_id] = ref
            splits[name].append(utt)
    return CorpusSplit(**splits, _oracle_refs=oracle), cfg, header["seed"]
