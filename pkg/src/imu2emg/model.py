"""GEGLU-Transformer for cycle-level IMU-to-EMG regression.

Conv1D embedding (GroupNorm, GELU) -> fixed sinusoidal positions ->
pre-norm encoder layers with multi-head self-attention and a gated GELU
feed-forward -> final LayerNorm -> linear head. The head is linear: outputs
are unconstrained and only clipped at metric time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .tensor import ConfigError, RngState, ShapeError, Tensor

FFN_GEGLU = "geglu"
FFN_GELU = "gelu"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 24
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 8
    conv_kernel: int = 5
    ffn_hidden: int = 512
    output_dim: int = 10
    dropout_rate: float = 0.1
    groupnorm_groups: int = 8
    seq_len: int = 101
    ffn: str = FFN_GEGLU
    ln_eps: float = 1e-5

    def errors(self) -> list[str]:
        errs = []
        for name in ("input_dim", "d_model", "n_layers", "n_heads", "conv_kernel",
                     "ffn_hidden", "output_dim", "groupnorm_groups", "seq_len"):
            if getattr(self, name) < 1:
                errs.append(f"model.{name} must be a positive integer")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            errs.append(f"model.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.groupnorm_groups >= 1 and self.d_model % self.groupnorm_groups:
            errs.append(
                f"model.d_model={self.d_model} not divisible by groupnorm_groups={self.groupnorm_groups}"
            )
        if self.conv_kernel % 2 == 0:
            errs.append(f"model.conv_kernel={self.conv_kernel} must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append(f"model.dropout_rate={self.dropout_rate} must lie in [0, 1)")
        if self.ffn not in (FFN_GEGLU, FFN_GELU):
            errs.append(f"model.ffn must be {FFN_GEGLU!r} or {FFN_GELU!r}, got {self.ffn!r}")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def nongated(self) -> "ModelConfig":
        """Plain GELU feed-forward variant with a parameter-matched width."""
        d = dict(self.to_dict(), ffn=FFN_GELU, ffn_hidden=matched_gelu_hidden(self.d_model, self.ffn_hidden))
        return ModelConfig(**d)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def matched_gelu_hidden(d_model: int, geglu_hidden: int) -> int:
    """Hidden width whose GELU FFN has (nearly) the GEGLU FFN's parameter count.

    GEGLU: W1, W2 (d x H, no bias) + Wo (H x d) + bo = 3dH + d.
    GELU:  W1 (d x h) + b1 + Wo (h x d) + bo        = 2dh + h + d.
    """
    target = 3 * d_model * geglu_hidden
    h = target / (2 * d_model + 1)
    lo, hi = math.floor(h), math.ceil(h)
    return min((max(lo, 1), hi), key=lambda c: (abs((2 * d_model + 1) * c - target), c))


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    c = config
    d, h = c.d_model, c.ffn_hidden
    embed = c.input_dim * d * c.conv_kernel + d + 2 * d
    attn = 4 * (d * d + d)
    ffn = 3 * d * h + d if c.ffn == FFN_GEGLU else 2 * d * h + h + d
    layer = 2 * d + attn + 2 * d + ffn
    head = 2 * d + d * c.output_dim + c.output_dim
    return embed + c.n_layers * layer + head


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) for every trainable tensor."""
    c = config
    d, h = c.d_model, c.ffn_hidden
    out = [
        ("embed.conv.w", (d, c.input_dim, c.conv_kernel)),
        ("embed.conv.b", (d,)),
        ("embed.gn.gamma", (d,)),
        ("embed.gn.beta", (d,)),
    ]
    for i in range(c.n_layers):
        p = f"layers.{i}."
        out += [(p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,))]
        for m in ("q", "k", "v", "o"):
            out += [(p + f"attn.w{m}", (d, d)), (p + f"attn.b{m}", (d,))]
        out += [(p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,))]
        if c.ffn == FFN_GEGLU:
            out += [(p + "ffn.w1", (d, h)), (p + "ffn.w2", (d, h))]
        else:
            out += [(p + "ffn.w1", (d, h)), (p + "ffn.b1", (h,))]
        out += [(p + "ffn.wo", (h, d)), (p + "ffn.bo", (d,))]
    out += [
        ("final_ln.gamma", (d,)),
        ("final_ln.beta", (d,)),
        ("head.w", (d, c.output_dim)),
        ("head.b", (c.output_dim,)),
    ]
    return out


class ModelParams:
    """Named trainable tensors, in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def bit_equal(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(
            a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self, other)
        )


def init_params(config: ModelConfig, rng: RngState, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights, unit norm gains, zero biases."""
    config.validate()
    gen = rng.generator
    out = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name == "embed.conv.w" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = gen.uniform(-bound, bound, size=shape)
        out[name] = Tensor(arr.astype(dtype), requires_grad=True)
    rng.sync()
    return ModelParams(out)


_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_encoding(seq_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal table ``[seq_len, d_model]`` (sin on even, cos on odd columns)."""
    key = (seq_len, d_model, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(seq_len, dtype=np.float64)[:, None]
        i = np.arange(0, d_model, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, i / d_model)
        pe = np.zeros((seq_len, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
        pe.setflags(write=False)
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


# ----------------------------------------------------------------- building blocks


def geglu_ff(x: Tensor, w1: Tensor, w2: Tensor, wo: Tensor, bo: Tensor | None = None) -> Tensor:
    """``Wo (GELU(W1 x) * (W2 x)) + bo`` applied per position."""
    return tn.linear(tn.mul(tn.gelu(tn.matmul(x, w1)), tn.matmul(x, w2)), wo, bo)


def gelu_ff(x: Tensor, w1: Tensor, b1: Tensor, wo: Tensor, bo: Tensor) -> Tensor:
    return tn.linear(tn.gelu(tn.linear(x, w1, b1)), wo, bo)


def multi_head_attention(x: Tensor, p: ModelParams, prefix: str, n_heads: int) -> Tensor:
    """Bidirectional scaled dot-product attention over ``[B, T, d]``."""
    bsz, t, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = tn.linear(x, p[prefix + "w" + name], p[prefix + "b" + name])
        return tn.transpose(tn.reshape(y, (bsz, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = tn.mul(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = tn.matmul(tn.softmax(scores, axis=-1), v)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return tn.linear(ctx, p[prefix + "wo"], p[prefix + "bo"])


def encoder_layer(
    x: Tensor, p: ModelParams, index: int, config: ModelConfig, training: bool, rng: RngState | None
) -> Tensor:
    """Pre-norm block: x + Drop(MHA(LN(x))), then + Drop(FFN(LN(.)))."""
    pre = f"layers.{index}."
    eps = config.ln_eps
    a = tn.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], eps)
    a = multi_head_attention(a, p, pre + "attn.", config.n_heads)
    x = tn.add(x, tn.dropout(a, config.dropout_rate, training, rng))
    f = tn.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], eps)
    if config.ffn == FFN_GEGLU:
        f = geglu_ff(f, p[pre + "ffn.w1"], p[pre + "ffn.w2"], p[pre + "ffn.wo"], p[pre + "ffn.bo"])
    else:
        f = gelu_ff(f, p[pre + "ffn.w1"], p[pre + "ffn.b1"], p[pre + "ffn.wo"], p[pre + "ffn.bo"])
    return tn.add(x, tn.dropout(f, config.dropout_rate, training, rng))


def forward(
    params: ModelParams,
    x,
    config: ModelConfig,
    training: bool = False,
    rng: RngState | None = None,
    positional: bool = True,
) -> Tensor:
    """Map inputs ``[B, T, input_dim]`` (or ``[T, input_dim]``) to ``[..., T, output_dim]``."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype))
    squeeze = xt.data.ndim == 2
    if squeeze:
        xt = tn.reshape(xt, (1,) + xt.shape)
    if xt.data.ndim != 3 or xt.shape[-1] != config.input_dim:
        raise ShapeError(f"expected input [B, T, {config.input_dim}], got {x.shape}")
    t = xt.shape[1]

    h = tn.conv1d(tn.transpose(xt, (0, 2, 1)), params["embed.conv.w"], params["embed.conv.b"])
    h = tn.group_norm(h, config.groupnorm_groups, params["embed.gn.gamma"], params["embed.gn.beta"])
    h = tn.transpose(tn.gelu(h), (0, 2, 1))
    if positional:
        h = tn.add(h, positional_encoding(t, config.d_model, h.dtype))
    for i in range(config.n_layers):
        h = encoder_layer(h, params, i, config, training, rng)
    h = tn.layer_norm(h, params["final_ln.gamma"], params["final_ln.beta"], config.ln_eps)
    y = tn.linear(h, params["head.w"], params["head.b"])
    return tn.reshape(y, y.shape[1:]) if squeeze else y


def forward_nongated(params, x, config: ModelConfig, training: bool = False, rng=None, positional=True) -> Tensor:
    """Forward pass of the ablation baseline (plain GELU feed-forward)."""
    if config.ffn != FFN_GELU:
        config = config.nongated()
    return forward(params, x, config, training, rng, positional)


def predict(params: ModelParams, x, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode forward over a stack of cycles without recording a graph."""
    arr = np.asarray(x, dtype=params.dtype)
    outs = []
    with tn.no_grad():
        for i in range(0, arr.shape[0], batch_size):
            outs.append(forward(params, arr[i : i + batch_size], config).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, config.seq_len, config.output_dim))
