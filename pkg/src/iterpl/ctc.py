"""CTC loss, greedy and prefix beam-search decoding, and a character n-gram LM.

Conventions used throughout:
  * the blank symbol always sits at the LAST index (``vocab_size``), so token
    indices 0..V-1 stay stable as the vocabulary grows;
  * every probability is kept in log space (nats); sums of path probabilities
    use log-sum-exp, never a probability-domain fallback;
  * argmax ties are broken toward the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -math.inf

# Context sentinels for the n-gram LM.  Sequence-start padding appears only
# inside contexts; the end marker is a real event the LM assigns mass to.
LM_START = -1
LM_END = -2


class InvalidConfigError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSeq:
    """An immutable label sequence over token indices 0..V-1 (no blanks)."""

    tokens: tuple[int, ...]

    def __init__(self, tokens=()):
        object.__setattr__(self, "tokens", tuple(int(t) for t in tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]


@dataclass
class LogPosteriors:
    """Per-frame log-probabilities over tokens plus blank, shape (T, V+1)."""

    values: np.ndarray
    blank_index: int

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1] - 1

    def validate(self, tol: float = 1e-6) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise InvalidInputError(f"log-posterior matrix has bad shape {v.shape}")
        if self.blank_index != v.shape[1] - 1:
            raise InvalidInputError("blank must be the last index")
        if np.any(v > tol):
            raise InvalidInputError("log-probabilities must be <= 0")
        rows = logsumexp_rows(v)
        if np.any(np.abs(rows) > tol):
            raise InvalidInputError("rows must normalize (log-sum-exp 0)")


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, -1) + np.log(np.sum(np.exp(a - m), axis=-1))


def min_frames_for(target: TokenSeq) -> int:
    """Fewest frames that can emit ``target``: one per token plus one blank
    between each adjacent repeated pair."""
    toks = target.tokens
    reps = sum(1 for i in range(1, len(toks)) if toks[i] == toks[i - 1])
    return len(toks) + reps


def _extended_labels(target: TokenSeq, blank: int) -> np.ndarray:
    ext = np.empty(2 * len(target) + 1, dtype=np.int64)
    ext[0::2] = blank
    ext[1::2] = target.tokens
    return ext


def ctc_loss(lp: LogPosteriors, target: TokenSeq) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` summed over all alignments.

    Returns ``(loss, grad)`` where ``grad[t, v]`` is the partial derivative of
    the loss with respect to the log-posterior entry ``lp.values[t, v]``
    treated as a free variable.  Each row of ``-grad`` is the posterior
    distribution over emitted symbols at that frame, so rows of ``grad`` sum
    to -1.

    Infeasible targets (too few frames) are not an error: they yield
    ``(inf, zeros)`` so a training loop can skip and count them.
    """
    v = lp.values
    T, K = v.shape
    blank = lp.blank_index
    grad = np.zeros((T, K))

    if len(target) == 0:
        # Only the all-blank path remains.
        loss = -float(np.sum(v[:, blank]))
        grad[:, blank] = -1.0
        return loss, grad

    if T < min_frames_for(target):
        return math.inf, grad

    ext = _extended_labels(target, blank)
    S = ext.size
    emit = v[:, ext]  # (T, S)

    # skip[s]: a path may jump from s-2 to s (possible only onto a token that
    # differs from the previous token two slots back)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        jump = np.where(skip, jump, NEG_INF)
        alpha[t] = _lse3(stay, step, jump) + emit[t]

    loss_log = _lse2(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else NEG_INF)
    if not np.isfinite(loss_log):
        return math.inf, grad

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        # the jump INTO s+2 is allowed when skip[s+2]
        jump_ok = np.zeros(S, dtype=bool)
        jump_ok[:-2] = skip[2:]
        jump = np.where(jump_ok, jump, NEG_INF)
        beta[t] = _lse3(stay, step, jump) + emit[t]

    # Occupancy of slot s at frame t; alpha and beta both include the frame-t
    # emission, so divide it out once.  Slots with zero path mass (alpha or
    # beta at -inf) contribute nothing.
    mass = alpha + beta
    with np.errstate(invalid="ignore"):
        post = np.where(np.isfinite(mass), np.exp(mass - emit - loss_log), 0.0)
    for s in range(S):
        grad[:, ext[s]] -= post[:, s]
    return float(-loss_log), grad


def _lse2(a, b):
    return np.logaddexp(a, b)


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def collapse_path(path, blank: int) -> TokenSeq:
    """CTC collapse: merge adjacent repeats, then strip blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return TokenSeq(out)


def greedy_decode(lp: LogPosteriors) -> TokenSeq:
    """Per-frame argmax (lowest index wins ties), CTC-collapsed."""
    path = np.argmax(lp.values, axis=1)
    return collapse_path(path, lp.blank_index)


# ---------------------------------------------------------------------------
# character n-gram language model
# ---------------------------------------------------------------------------


@dataclass
class CharNGramLM:
    """Additively smoothed n-gram model over token sequences.

    ``vocab_size`` counts the V real tokens plus the end marker; the next-
    symbol distribution for any context therefore spans {0..V-1, LM_END}.
    Contexts are the ``order - 1`` preceding symbols, padded with LM_START.
    Contexts never observed in training back off to the smoothed unigram.
    """

    order: int
    delta: float
    vocab_size: int  # V + 1 (end marker included)
    counts: dict[tuple[int, ...], dict[int, int]] = field(default_factory=dict)

    def _symbols(self):
        return list(range(self.vocab_size - 1)) + [LM_END]

    def _table(self, context: tuple[int, ...]) -> dict[int, int]:
        tab = self.counts.get(context)
        if tab is None:
            tab = self.counts.get(())
        return tab if tab is not None else {}

    def logp_next(self, history, symbol: int) -> float:
        """log p(symbol | history); history is the raw token sequence so far."""
        ctx = self._context(history)
        tab = self._table(ctx)
        total = sum(tab.values())
        num = tab.get(int(symbol), 0) + self.delta
        den = total + self.delta * self.vocab_size
        return math.log(num / den)

    def next_distribution(self, history) -> dict[int, float]:
        return {s: math.exp(self.logp_next(history, s)) for s in self._symbols()}

    def _context(self, history) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        hist = [int(t) for t in history]
        padded = [LM_START] * max(0, n - len(hist)) + hist[len(hist) - n :]
        return tuple(padded)

    def score(self, seq: TokenSeq) -> float:
        """log p(seq), including the end-of-sequence event."""
        total = 0.0
        hist: list[int] = []
        for tok in seq:
            total += self.logp_next(hist, tok)
            hist.append(int(tok))
        total += self.logp_next(hist, LM_END)
        return total

    def save(self, path) -> None:
        """Line format: one header, then ``context<TAB>token<TAB>count``.

        Contexts are comma-joined ints (LM_START appears as -1); the empty
        unigram context is the empty field.  Round-trips exactly.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"#charlm\torder={self.order}\tdelta={self.delta!r}"
                f"\tvocab={self.vocab_size}\n"
            )
            for ctx in sorted(self.counts):
                tab = self.counts[ctx]
                ctx_str = ",".join(str(c) for c in ctx)
                for tok in sorted(tab):
                    fh.write(f"{ctx_str}\t{tok}\t{tab[tok]}\n")

    @classmethod
    def load(cls, path) -> "CharNGramLM":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if not header or header[0] != "#charlm":
                raise InvalidInputError(f"{path}: not a charlm file")
            fields = dict(part.split("=", 1) for part in header[1:])
            lm = cls(
                order=int(fields["order"]),
                delta=float(fields["delta"]),
                vocab_size=int(fields["vocab"]),
            )
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                ctx_str, tok, count = line.split("\t")
                ctx = tuple(int(c) for c in ctx_str.split(",")) if ctx_str else ()
                lm.counts.setdefault(ctx, {})[int(tok)] = int(count)
        return lm


def train_ngram_lm(corpus, order: int, delta: float) -> CharNGramLM:
    """Count-based fit on a list of TokenSeq; vocab inferred from the corpus.

    Populates the full-order context table plus the unigram table used for
    unseen-context backoff.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("LM training corpus is empty")
    if order < 1:
        raise InvalidConfigError(f"order must be >= 1, got {order}")
    if delta <= 0:
        raise InvalidConfigError(f"smoothing delta must be > 0, got {delta}")

    max_tok = -1
    for seq in corpus:
        for t in seq:
            max_tok = max(max_tok, int(t))
    lm = CharNGramLM(order=order, delta=delta, vocab_size=max_tok + 2)

    n = order - 1
    for seq in corpus:
        events = [int(t) for t in seq] + [LM_END]
        hist = [LM_START] * n
        for sym in events:
            ctx = tuple(hist[len(hist) - n :]) if n else ()
            lm.counts.setdefault(ctx, {})
            lm.counts[ctx][sym] = lm.counts[ctx].get(sym, 0) + 1
            if n:
                lm.counts.setdefault((), {})
                lm.counts[()][sym] = lm.counts[()].get(sym, 0) + 1
            hist.append(sym)
    return lm


# ---------------------------------------------------------------------------
# prefix beam search
# ---------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    beam_size: int
    lm_weight: float = 0.0
    length_bonus: float = 0.0
    lm: CharNGramLM | None = None

    def validate(self) -> None:
        if self.beam_size < 1:
            raise InvalidConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.lm_weight < 0:
            raise InvalidConfigError("lm_weight must be >= 0")
        if self.lm is None and self.lm_weight != 0:
            raise InvalidConfigError("lm_weight > 0 requires an LM")


class _Hyp:
    """Per-prefix path mass, split by whether the last frame was blank."""

    __slots__ = ("p_blank", "p_token", "lm_logp")

    def __init__(self, lm_logp=0.0):
        self.p_blank = NEG_INF
        self.p_token = NEG_INF
        self.lm_logp = lm_logp

    def total(self):
        return _flse(self.p_blank, self.p_token)


def _flse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def beam_search_decode(lp: LogPosteriors, cfg: DecoderConfig) -> TokenSeq:
    """Prefix beam search maximizing
    ``acoustic + lm_weight * lm + length_bonus * |y|``.

    The acoustic term is the total alignment mass of the collapsed prefix
    (both blank- and token-ending paths), so with ``lm_weight = 0``,
    ``length_bonus = 0`` and a beam at least as large as the surviving prefix
    count the result is the exact argmax over label sequences.  The LM term
    scores tokens as they extend a prefix; the end-of-sequence event is added
    when hypotheses are ranked at the end.
    """
    cfg.validate()
    v = lp.values
    T, K = v.shape
    blank = lp.blank_index
    alpha, beta = cfg.lm_weight, cfg.length_bonus
    lm = cfg.lm

    beams: dict[tuple[int, ...], _Hyp] = {}
    root = _Hyp(lm_logp=0.0)
    root.p_blank = 0.0
    beams[()] = root

    for t in range(T):
        row = v[t]
        nxt: dict[tuple[int, ...], _Hyp] = {}

        for prefix, hyp in beams.items():
            total = hyp.total()

            # stay on this prefix via a blank frame
            ext = nxt.get(prefix)
            if ext is None:
                ext = _Hyp(lm_logp=hyp.lm_logp)
                nxt[prefix] = ext
            ext.p_blank = _flse(ext.p_blank, total + row[blank])

            for c in range(K):
                if c == blank:
                    continue
                pc = row[c]
                if prefix and prefix[-1] == c:
                    # same token again without a separating blank extends the
                    # current run: prefix unchanged
                    ext.p_token = _flse(ext.p_token, hyp.p_token + pc)
                    # a blank-separated repeat starts a new token
                    mass = hyp.p_blank + pc
                else:
                    mass = total + pc
                if mass == NEG_INF:
                    continue
                new_prefix = prefix + (c,)
                grown = nxt.get(new_prefix)
                if grown is None:
                    lm_logp = hyp.lm_logp
                    if lm is not None:
                        lm_logp += lm.logp_next(prefix, c)
                    grown = _Hyp(lm_logp=lm_logp)
                    nxt[new_prefix] = grown
                grown.p_token = _flse(grown.p_token, mass)

        if len(nxt) > cfg.beam_size:
            scored = sorted(
                nxt.items(),
                key=lambda kv: (
                    -(kv[1].total() + alpha * kv[1].lm_logp + beta * len(kv[0])),
                    len(kv[0]),
                    kv[0],
                ),
            )
            nxt = dict(scored[: cfg.beam_size])
        beams = nxt

    def final_score(item):
        prefix, hyp = item
        s = hyp.total() + beta * len(prefix)
        if lm is not None:
            s += alpha * (hyp.lm_logp + lm.logp_next(prefix, LM_END))
        return s

    best = min(beams.items(), key=lambda kv: (-final_score(kv), len(kv[0]), kv[0]))
    return TokenSeq(best[0])
