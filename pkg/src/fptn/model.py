"""The forecasting network: sensor-token embeddings, encoder stack, output head.

An input sample is a matrix X of shape (N, T): one row per sensor holding
that sensor's T-step history. Each row is embedded to width d_model (so the
token width never depends on the sensor count), summed with a time embedding
and a positional embedding, pushed through L encoder layers (multi-head
self-attention over the N sensor tokens, a GELU feed-forward block, and
post-norm residual batch normalization), and mapped to K forecast steps per
sensor by a final affine head. Training minimizes mean absolute error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tape, Tensor
from .errors import ConfigurationError, DimensionError

POSITIONAL_MODES = ("none", "fixed", "learnable")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``n_layers == 0`` is a degenerate head-only configuration permitted for
    testing; real models use at least one encoder layer.
    """

    n_sensors: int
    input_steps: int          # T
    horizon: int              # K
    d_model: int
    n_heads: int
    n_layers: int
    use_time_embedding: bool = True
    positional_mode: str = "learnable"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_sensors, self.input_steps, self.horizon, self.n_heads) < 1:
            raise ConfigurationError("n_sensors, input_steps, horizon and n_heads must all be >= 1")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_model <= self.input_steps:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must exceed input_steps ({self.input_steps})")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigurationError(
                f"positional_mode must be one of {POSITIONAL_MODES}, got {self.positional_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_width(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_width(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        return {
            "n_sensors": self.n_sensors,
            "input_steps": self.input_steps,
            "horizon": self.horizon,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "use_time_embedding": self.use_time_embedding,
            "positional_mode": self.positional_mode,
            "dropout": self.dropout,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table: channel 2i uses sin(p / 10000^(2i/d)),
    channel 2i+1 the matching cos."""
    pe = np.zeros((n, d))
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, idx / d)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


def positional_embedding(mode: str, n_sensors: int, d_model: int,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Initial positional table: zeros, fixed sinusoids, or N(0, 0.02^2) draws."""
    if mode == "none":
        return np.zeros((n_sensors, d_model))
    if mode == "fixed":
        return sinusoidal_positions(n_sensors, d_model)
    if mode == "learnable":
        if rng is None:
            raise ConfigurationError("learnable positional embedding needs an rng")
        return rng.normal(0.0, 0.02, size=(n_sensors, d_model))
    raise ConfigurationError(f"unknown positional mode {mode!r}")


class ModelParams:
    """All learnable arrays, name-addressable, plus batch-norm running stats.

    Creation order (and therefore optimizer iteration order) is fixed by the
    config, which makes runs bitwise reproducible for a given seed.
    """

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        self.norm_states: list[tuple[BatchNormState, BatchNormState]] = [
            (BatchNormState(), BatchNormState()) for _ in range(config.n_layers)
        ]
        self.fixed_positional: np.ndarray | None = (
            sinusoidal_positions(config.n_sensors, config.d_model)
            if config.positional_mode == "fixed" else None
        )
        if init:
            self._initialize()

    def _initialize(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, t, k = cfg.d_model, cfg.input_steps, cfg.horizon

        self._param("embed_traffic.weight", _glorot(rng, t, d))
        self._param("embed_traffic.bias", np.zeros(d))
        if cfg.use_time_embedding:
            self._param("time_embed.weight", _glorot(rng, 3 * t, d))
            self._param("time_embed.bias", np.zeros(d))
        if cfg.positional_mode == "learnable":
            self._param("pos_embed", positional_embedding("learnable", cfg.n_sensors, d, rng))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            for name in ("wq", "wk", "wv", "wo"):
                self._param(p + "attn." + name, _glorot(rng, d, d))
            self._param(p + "ffn.w1", _glorot(rng, d, cfg.ffn_width))
            self._param(p + "ffn.b1", np.zeros(cfg.ffn_width))
            self._param(p + "ffn.w2", _glorot(rng, cfg.ffn_width, d))
            self._param(p + "ffn.b2", np.zeros(d))
            for norm in ("norm1", "norm2"):
                self._param(p + norm + ".gamma", np.ones(d))
                self._param(p + norm + ".beta", np.zeros(d))
        self._param("head.weight", _glorot(rng, d, k))
        self._param("head.bias", np.zeros(k))

    def _param(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = Tensor(value, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        dup = ModelParams(self.config, init=False)
        for name, t in self.tensors.items():
            dup.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
        dup.norm_states = [(s1.copy(), s2.copy()) for s1, s2 in self.norm_states]
        return dup


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable scalar count from the layer shapes."""
    d, t, k = config.d_model, config.input_steps, config.horizon
    count = t * d + d                                   # traffic embedding
    if config.use_time_embedding:
        count += 3 * t * d + d
    if config.positional_mode == "learnable":
        count += config.n_sensors * d
    per_layer = 4 * d * d                               # q, k, v, o projections
    per_layer += d * 4 * d + 4 * d + 4 * d * d + d      # feed-forward
    per_layer += 4 * d                                  # two norms, gamma + beta
    count += config.n_layers * per_layer
    count += d * k + k                                  # output head
    return count


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def embed_traffic(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Project each sensor's T-step history row to width d_model."""
    x = ad.as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"input history length {x.shape[-1]} does not match embedding width {weight.shape[0]}")
    return ad.affine(x, weight, bias)


def build_time_embedding(tf, weight: Tensor, bias: Tensor) -> Tensor:
    """Project the concatenated (day, hour, minute) feature rows to d_model."""
    tf = ad.as_tensor(tf)
    if tf.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"time feature width {tf.shape[-1]} does not match embedding width {weight.shape[0]}")
    return ad.affine(tf, weight, bias)


def compose_input(s: Tensor, te: Tensor, pe: Tensor) -> Tensor:
    """Elementwise sum of the three embeddings (ablated terms are zeros)."""
    for other in (te, pe):
        if other.shape[-2:] != s.shape[-2:]:
            raise DimensionError(f"embedding shapes differ: {s.shape} vs {other.shape}")
    return ad.add(ad.add(s, te), pe)


def scaled_dot_attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(D)) v over the key axis; no masking."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    width = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.swap_last_axes(k)), 1.0 / math.sqrt(width))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights.data
    return out


def multi_head_attention(e: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         n_heads: int, return_weights: bool = False):
    """Fused-projection multi-head attention over the sensor-token axis.

    The d_model x d_model projections are sliced per head; head outputs are
    concatenated and mixed by the output projection.
    """
    d = e.shape[-1]
    if d % n_heads != 0:
        raise DimensionError(f"head count {n_heads} does not divide model width {d}")
    width = d // n_heads
    q, k, v = ad.matmul(e, wq), ad.matmul(e, wk), ad.matmul(e, wv)
    heads, all_weights = [], []
    for i in range(n_heads):
        lo, hi = i * width, (i + 1) * width
        out, w = scaled_dot_attention(
            ad.slice_columns(q, lo, hi), ad.slice_columns(k, lo, hi),
            ad.slice_columns(v, lo, hi), return_weights=True)
        heads.append(out)
        all_weights.append(w)
    mixed = ad.matmul(ad.concat_columns(heads), wo)
    if return_weights:
        return mixed, np.stack(all_weights, axis=-3)  # (..., heads, N, N)
    return mixed


def feed_forward(x, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two affine maps with a GELU between; inner width is 4 * d_model."""
    return ad.affine(ad.gelu(ad.affine(x, w1, b1)), w2, b2)


def encoder_layer(x: Tensor, params: ModelParams, index: int, mode: str,
                  rng: np.random.Generator | None = None,
                  return_weights: bool = False):
    """Post-norm residual encoder layer on a (B, N, d_model) tensor."""
    cfg = params.config
    p = f"layers.{index}."
    state1, state2 = params.norm_states[index]
    attn, weights = multi_head_attention(
        x, params[p + "attn.wq"], params[p + "attn.wk"],
        params[p + "attn.wv"], params[p + "attn.wo"],
        cfg.n_heads, return_weights=True)
    if cfg.dropout > 0.0 and mode == "train":
        attn = ad.dropout(attn, cfg.dropout, rng)
    a = ad.batch_norm(ad.add(x, attn), params[p + "norm1.gamma"], params[p + "norm1.beta"],
                      state1, mode)
    ff = feed_forward(a, params[p + "ffn.w1"], params[p + "ffn.b1"],
                      params[p + "ffn.w2"], params[p + "ffn.b2"])
    if cfg.dropout > 0.0 and mode == "train":
        ff = ad.dropout(ff, cfg.dropout, rng)
    y = ad.batch_norm(ad.add(a, ff), params[p + "norm2.gamma"], params[p + "norm2.beta"],
                      state2, mode)
    if return_weights:
        return y, weights
    return y


def forward(x, tf, params: ModelParams, mode: str = "eval",
            rng: np.random.Generator | None = None,
            return_attention: bool = False):
    """Full forward pass: (B, N, T) histories to (B, N, K) forecasts.

    ``tf`` carries the (B, N, 3T) time-feature rows. A single sample may be
    passed without the batch axis; the output then drops it too. With
    ``return_attention`` the per-layer attention weights (values only,
    shape (B, heads, N, N)) are returned alongside the forecasts.
    """
    cfg = params.config
    x = ad.as_tensor(x)
    tf = ad.as_tensor(tf)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
        tf = ad.reshape(tf, (1,) + tf.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.n_sensors, cfg.input_steps):
        raise DimensionError(
            f"input must be (batch, {cfg.n_sensors}, {cfg.input_steps}), got {x.shape}")
    if tf.shape != x.shape[:2] + (3 * cfg.input_steps,):
        raise DimensionError(
            f"time features must be {x.shape[:2] + (3 * cfg.input_steps,)}, got {tf.shape}")
    if cfg.dropout > 0.0 and mode == "train" and rng is None:
        raise ConfigurationError("dropout > 0 in train mode requires an rng")

    s = embed_traffic(x, params["embed_traffic.weight"], params["embed_traffic.bias"])
    if cfg.use_time_embedding:
        te = build_time_embedding(tf, params["time_embed.weight"], params["time_embed.bias"])
    else:
        te = Tensor(np.zeros(s.shape[-2:]))
    if cfg.positional_mode == "learnable":
        pe = params["pos_embed"]
    elif cfg.positional_mode == "fixed":
        pe = Tensor(params.fixed_positional)
    else:
        pe = Tensor(np.zeros(s.shape[-2:]))

    e = compose_input(s, te, pe)
    attention = []
    for i in range(cfg.n_layers):
        e, w = encoder_layer(e, params, i, mode, rng=rng, return_weights=True)
        attention.append(w)
    yhat = ad.affine(e, params["head.weight"], params["head.bias"])
    if squeeze:
        yhat = ad.reshape(yhat, yhat.shape[1:])
        attention = [w[0] for w in attention]
    if return_attention:
        return yhat, attention
    return yhat


def mae_loss(yhat, y) -> Tensor:
    """Mean absolute error over every entry (batch mean of per-sample averages)."""
    yhat, y = ad.as_tensor(yhat), ad.as_tensor(y)
    if yhat.shape != y.shape:
        raise DimensionError(f"loss shapes differ: predictions {yhat.shape}, targets {y.shape}")
    return ad.reduce_mean(ad.absolute(ad.subtract(y, yhat)))


# ---------------------------------------------------------------------------
# whole-model gradient verification
# ---------------------------------------------------------------------------

@dataclass
class ModelGradCheck:
    """Result of checking the full loss gradient against central differences."""

    report: ad.FiniteDiffReport
    config: ModelConfig
    corrupted: str | None = None

    @property
    def passed(self) -> bool:
        return self.report.passed


def gradient_check_model(config: ModelConfig, step: float = 1e-5,
                         tolerance: float = 1e-4, seed: int = 0,
                         corrupt: str | None = None) -> ModelGradCheck:
    """Finite-difference check of d(mae_loss . forward)/d(theta) for every parameter.

    Runs one train-mode batch first so eval-mode normalization statistics
    exist, then checks in eval mode (the loss is then a pure function of the
    parameters). ``corrupt`` names a parameter whose analytic gradient is
    deliberately poisoned; the check must then fail, which makes the
    negative path testable.

    Resolution limit: central differences on an O(1) loss cannot resolve
    gradients below roughly 1e-10 absolute, so a coordinate whose true
    gradient is ~1e-9 (a feed-forward unit stuck far in the GELU tail)
    can report a spurious failure against the 1e-8-floored relative error.
    With two or more sensors the check problem averages over enough
    positions that this does not occur; degenerate single-sensor configs
    may need a different seed.
    """
    params = ModelParams(config)
    rng = np.random.default_rng(seed)
    # Odd batch size: positional-row gradients contain per-sensor sums of
    # residual signs over the batch, and an odd count of +/-1 cannot cancel.
    batch = 3
    x = rng.standard_normal((batch, config.n_sensors, config.input_steps))
    tf = rng.random((batch, config.n_sensors, 3 * config.input_steps))

    if config.n_layers > 0:
        # Prime running statistics with a batch disjoint from the check batch:
        # normalizing a batch by its own statistics zeroes per-channel sums
        # exactly, which would put exact zeros into the head gradients.
        x_prime = rng.standard_normal(x.shape)
        tf_prime = rng.random(tf.shape)
        forward(x_prime, tf_prime, params, mode="train")

    # Keep every residual well away from the |.| kink so central differences
    # never straddle it: targets sit 0.5..1.5 off the current predictions.
    # The output-bias gradient is a per-column mean of residual signs, so an
    # exactly balanced column would make it exactly 0 and the relative-error
    # floor would then amplify finite-difference noise; unbalance each column.
    base = forward(x, tf, params, mode="eval").data
    signs = rng.choice([-1.0, 1.0], size=base.shape)
    per_column = signs.reshape(-1, config.horizon)
    for col in range(config.horizon):
        if per_column[:, col].sum() == 0:
            per_column[0, col] = -per_column[0, col]
    y = base + rng.uniform(0.5, 1.5, size=base.shape) * signs

    def loss_fn(tensors):
        del tensors  # perturbations land in params.tensors, shared objects
        return mae_loss(forward(x, tf, params, mode="eval"), y)

    report = ad.finite_diff_check(loss_fn, params.tensors, step=step, tolerance=tolerance)
    if corrupt is not None:
        if corrupt not in report.per_parameter:
            raise ConfigurationError(f"unknown parameter group {corrupt!r}")
        report.per_parameter[corrupt] = max(report.per_parameter[corrupt], 1.0)
    return ModelGradCheck(report=report, config=config, corrupted=corrupt)


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used by verification entry points."""
    base = dict(n_sensors=3, input_steps=4, horizon=2, d_model=8,
                n_heads=2, n_layers=1, seed=0)
    base.update(overrides)
    return ModelConfig(**base)
