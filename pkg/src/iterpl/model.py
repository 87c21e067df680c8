"""Small differentiable acoustic model with hand-derived backpropagation.

Architecture: strided 1-D convolution over feature frames, ReLU, dropout,
then a stack of feedforward blocks (affine, ReLU, dropout, affine), an
output projection, and a log-softmax. Frame rate drops by the conv stride:
T input frames become ceil(T / stride) output frames.

All gradients are computed by an explicit reverse pass over a ForwardTape;
there is no autodiff anywhere in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import FormatError, check_magic, read_array_f8, read_json, write_array_f8, write_json, write_magic
from .ctc import InvalidConfigError, InvalidInputError, LogPosteriors

CHECKPOINT_MAGIC = b"IPLM"
CHECKPOINT_VERSION = 1


class InputTooShortError(InvalidInputError):
    """Utterance has fewer frames than the convolution kernel."""


class StaleTapeError(RuntimeError):
    """A ForwardTape was passed to backward a second time."""


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden_dim: int
    num_blocks: int
    vocab_size: int
    conv_kernel: int = 7
    conv_stride: int = 3
    dropout: float = 0.0

    def validate(self) -> None:
        if self.conv_kernel % 2 != 1 or self.conv_kernel < 1:
            raise InvalidConfigError(f"conv_kernel must be odd and >= 1, got {self.conv_kernel}")
        if self.conv_stride < 1:
            raise InvalidConfigError(f"conv_stride must be >= 1, got {self.conv_stride}")
        if self.hidden_dim < 1 or self.num_blocks < 1:
            raise InvalidConfigError("hidden_dim and num_blocks must be >= 1")
        if self.feature_dim < 1 or self.vocab_size < 1:
            raise InvalidConfigError("feature_dim and vocab_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1  # blank is the last index


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F, k, C = cfg.hidden_dim, cfg.feature_dim, cfg.conv_kernel, cfg.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "conv_w": (H, k * F),
        "conv_b": (H,),
    }
    for i in range(cfg.num_blocks):
        shapes[f"block{i}_w1"] = (H, H)
        shapes[f"block{i}_b1"] = (H,)
        shapes[f"block{i}_w2"] = (H, H)
        shapes[f"block{i}_b2"] = (H,)
    shapes["out_w"] = (C, H)
    shapes["out_b"] = (C,)
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    dropout: float
    update_count: int = 0

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ForwardTape:
    """Intermediates from one forward call; consumed by exactly one backward."""

    windows: np.ndarray
    conv_pre: np.ndarray
    conv_mask: np.ndarray | None
    block_inputs: list[np.ndarray]
    block_pre: list[np.ndarray]
    block_hidden: list[np.ndarray]
    block_masks: list[np.ndarray | None]
    final_hidden: np.ndarray
    probs: np.ndarray
    consumed: bool = field(default=False)


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Uniform fan-in-scaled weight init, zero biases, deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg).items():
        if len(shape) == 1:  # biases start at zero
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(config=cfg, params=params, dropout=cfg.dropout, update_count=0)


def set_dropout(m: ModelState, rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise InvalidConfigError(f"dropout must be in [0, 1), got {rate}")
    m.dropout = rate


def output_length(num_frames: int, stride: int) -> int:
    return -(-num_frames // stride)


def _make_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Zero-padded 'same' windows: one flattened k*F row per output frame."""
    T, F = x.shape
    half = (kernel - 1) // 2
    padded = np.zeros((T + 2 * half, F))
    padded[half : half + T] = x
    out_T = output_length(T, stride)
    idx = np.arange(out_T)[:, None] * stride + np.arange(kernel)[None, :]
    return padded[idx].reshape(out_T, kernel * F)


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    # inverted dropout: surviving units scaled so the expectation matches eval
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(
    m: ModelState,
    utt_features: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[LogPosteriors, ForwardTape]:
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = m.config
    x = np.asarray(utt_features, dtype=float)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise InvalidInputError(f"expected (T, {cfg.feature_dim}) features, got {x.shape}")
    if x.shape[0] < cfg.conv_kernel:
        raise InputTooShortError(
            f"need at least {cfg.conv_kernel} frames, got {x.shape[0]}"
        )
    use_dropout = mode == "train" and m.dropout > 0.0
    if use_dropout and rng is None:
        raise InvalidInputError("train-mode forward with dropout needs an rng")

    windows = _make_windows(x, cfg.conv_kernel, cfg.conv_stride)
    conv_pre = windows @ m.params["conv_w"].T + m.params["conv_b"]
    h = np.maximum(conv_pre, 0.0)
    conv_mask = _dropout_mask(h.shape, m.dropout, rng) if use_dropout else None
    if conv_mask is not None:
        h = h * conv_mask

    block_inputs, block_pre, block_hidden, block_masks = [], [], [], []
    for i in range(cfg.num_blocks):
        block_inputs.append(h)
        pre = h @ m.params[f"block{i}_w1"].T + m.params[f"block{i}_b1"]
        block_pre.append(pre)
        hid = np.maximum(pre, 0.0)
        mask = _dropout_mask(hid.shape, m.dropout, rng) if use_dropout else None
        if mask is not None:
            hid = hid * mask
        block_masks.append(mask)
        block_hidden.append(hid)
        h = hid @ m.params[f"block{i}_w2"].T + m.params[f"block{i}_b2"]

    logits = h @ m.params["out_w"].T + m.params["out_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lp = shifted - log_z
    probs = np.exp(lp)

    tape = ForwardTape(
        windows=windows,
        conv_pre=conv_pre,
        conv_mask=conv_mask,
        block_inputs=block_inputs,
        block_pre=block_pre,
        block_hidden=block_hidden,
        block_masks=block_masks,
        final_hidden=h,
        probs=probs,
    )
    return LogPosteriors(values=lp, blank_index=cfg.vocab_size), tape


def backward(m: ModelState, tape: ForwardTape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(grad_out * log_posteriors) wrt every parameter."""
    if tape.consumed:
        raise StaleTapeError("ForwardTape already consumed by a previous backward")
    tape.consumed = True
    cfg = m.config
    g = np.asarray(grad_out, dtype=float)
    if g.shape != tape.probs.shape:
        raise InvalidInputError(f"grad_out shape {g.shape} != output shape {tape.probs.shape}")
    grads: dict[str, np.ndarray] = {}

    # log-softmax: d logits = g - probs * row_sum(g)
    d_logits = g - tape.probs * g.sum(axis=1, keepdims=True)
    grads["out_w"] = d_logits.T @ tape.final_hidden
    grads["out_b"] = d_logits.sum(axis=0)
    d_h = d_logits @ m.params["out_w"]

    for i in reversed(range(cfg.num_blocks)):
        grads[f"block{i}_w2"] = d_h.T @ tape.block_hidden[i]
        grads[f"block{i}_b2"] = d_h.sum(axis=0)
        d_hid = d_h @ m.params[f"block{i}_w2"]
        if tape.block_masks[i] is not None:
            d_hid = d_hid * tape.block_masks[i]
        d_pre = d_hid * (tape.block_pre[i] > 0.0)
        grads[f"block{i}_w1"] = d_pre.T @ tape.block_inputs[i]
        grads[f"block{i}_b1"] = d_pre.sum(axis=0)
        d_h = d_pre @ m.params[f"block{i}_w1"]

    if tape.conv_mask is not None:
        d_h = d_h * tape.conv_mask
    d_conv_pre = d_h * (tape.conv_pre > 0.0)
    grads["conv_w"] = d_conv_pre.T @ tape.windows
    grads["conv_b"] = d_conv_pre.sum(axis=0)
    return grads


def zero_grads(m: ModelState) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in m.params.items()}


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: p.copy() for name, p in params.items()}


def write_model_to(f, m: ModelState) -> None:
    """JSON header plus named f8 tensors, for embedding in containers."""
    names = sorted(m.params)
    header = {
        "config": {
            "feature_dim": m.config.feature_dim,
            "hidden_dim": m.config.hidden_dim,
            "num_blocks": m.config.num_blocks,
            "vocab_size": m.config.vocab_size,
            "conv_kernel": m.config.conv_kernel,
            "conv_stride": m.config.conv_stride,
            "dropout": m.config.dropout,
        },
        "dropout": m.dropout,
        "update_count": m.update_count,
        "tensors": names,
    }
    write_json(f, header)
    for name in names:
        write_array_f8(f, m.params[name])


def read_model_from(f) -> ModelState:
    header = read_json(f)
    cfg = ModelConfig(**header["config"])
    cfg.validate()
    params = {name: read_array_f8(f) for name in header["tensors"]}
    expected = _param_shapes(cfg)
    if set(params) != set(expected):
        raise FormatError("checkpoint tensor names do not match the model config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {params[name].shape}, expected {shape}")
    return ModelState(
        config=cfg,
        params=params,
        dropout=header["dropout"],
        update_count=header["update_count"],
    )


def save_model(m: ModelState, path) -> None:
    """Binary container: magic, version, JSON header, then named f8 tensors."""
    with open(Path(path), "wb") as f:
        write_magic(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        write_model_to(f, m)


def load_model(path) -> ModelState:
    with open(Path(path), "rb") as f:
        check_magic(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "model checkpoint")
        return read_model_from(f)
