"""Parameter initialization and transformer building blocks on the tape.

All functions operate on single sequences shaped (tokens, channels); batching
is done by the caller. Parameters live in a flat ``dict[str, Tensor]`` so the
training module can group, freeze, and checksum them by name.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Tensor

ParamDict = dict[str, Tensor]


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones_init(shape) -> Tensor:
    return Tensor(np.ones(shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / tape.sqrt(var + eps) * gain + bias


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: -inf above the diagonal."""
    return np.triu(np.full((n, n), -1e30), k=1)


def init_attention(rng, dim: int, prefix: str, params: ParamDict) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = normal_init(rng, (dim, dim))
        params[f"{prefix}.{name[-1]}b"] = zeros_init((dim,))


def attention(x: Tensor, params: ParamDict, prefix: str, heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over a (tokens, dim) sequence."""
    n, dim = x.shape
    if dim % heads != 0:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    dh = dim // heads

    def split(t: Tensor) -> Tensor:  # (n, dim) -> (heads, n, dh)
        return tape.swapaxes(t.reshape(n, heads, dh), 0, 1)

    q = split(linear(x, params[f"{prefix}.wq"], params[f"{prefix}.qb"]))
    k = split(linear(x, params[f"{prefix}.wk"], params[f"{prefix}.kb"]))
    v = split(linear(x, params[f"{prefix}.wv"], params[f"{prefix}.vb"]))

    scores = (q @ tape.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + tape.constant(mask)
    attn = tape.softmax(scores, axis=-1)
    out = tape.swapaxes(attn @ v, 0, 1).reshape(n, dim)
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.ob"])


def init_block(rng, dim: int, mlp_dim: int, prefix: str, params: ParamDict) -> None:
    params[f"{prefix}.ln1.g"] = ones_init((dim,))
    params[f"{prefix}.ln1.b"] = zeros_init((dim,))
    init_attention(rng, dim, f"{prefix}.attn", params)
    params[f"{prefix}.ln2.g"] = ones_init((dim,))
    params[f"{prefix}.ln2.b"] = zeros_init((dim,))
    params[f"{prefix}.mlp.w1"] = normal_init(rng, (dim, mlp_dim))
    params[f"{prefix}.mlp.b1"] = zeros_init((mlp_dim,))
    params[f"{prefix}.mlp.w2"] = normal_init(rng, (mlp_dim, dim))
    params[f"{prefix}.mlp.b2"] = zeros_init((dim,))


def block(x: Tensor, params: ParamDict, prefix: str, heads: int,
          mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)); x + mlp(ln(x))."""
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + attention(h, params, f"{prefix}.attn", heads, mask)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])
    h = tape.gelu(h)
    h = linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return x + h
