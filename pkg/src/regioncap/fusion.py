"""Grid reconciliation and feature fusion between the three encoders.

The mask-aware sequence (class token + flattened patch grid) is projected
onto the high-resolution grid by dropping the class token, reshaping to its
patch grid, and bilinearly interpolating (corner-aligned). The default
fusion concatenates the three feature maps channel-wise in the fixed order
[mask-aware | hr-conv | hr-transformer]; the two ablation variants (a small
cross-source attention block, and appending along the token axis) accept the
same inputs and are selected purely by configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tape
from .errors import ConfigError, ShapeError
from .nn import ParamDict
from .tape import Tensor, as_tensor

FUSION_VARIANTS = ("channel", "self_attention", "sequence_append")


def bilinear_weights_1d(src: int, dst: int) -> np.ndarray:
    """(dst, src) corner-aligned linear interpolation weights."""
    w = np.zeros((dst, src))
    if dst == 1 or src == 1:
        # Degenerate axes: sample the first source position.
        w[:, 0] = 1.0
        return w
    scale = (src - 1) / (dst - 1)
    for i in range(dst):
        x = i * scale
        i0 = int(np.floor(x))
        i1 = min(i0 + 1, src - 1)
        t = x - i0
        w[i, i0] += 1.0 - t
        w[i, i1] += t
    return w


def bilinear_weights(src_grid: int, dst_grid: int) -> np.ndarray:
    """(dst^2, src^2) interpolation matrix acting on row-major flattened
    square grids. Rows sum to 1, so constants are preserved exactly."""
    w = bilinear_weights_1d(src_grid, dst_grid)
    return np.kron(w, w)


def interpolate_grid(tokens: Tensor | np.ndarray, src_grid: int, dst_grid: int) -> Tensor:
    """Bilinear interpolation of a (src^2, C) token grid to (dst^2, C)."""
    tokens = as_tensor(tokens)
    if tokens.shape[0] != src_grid * src_grid:
        raise ShapeError(f"{tokens.shape[0]} tokens do not form a {src_grid}x{src_grid} grid")
    return tape.constant(bilinear_weights(src_grid, dst_grid)) @ tokens


def project_mask_features(fm: Tensor | np.ndarray, target_grid: int) -> Tensor:
    """Drop the class token, reshape the remaining patch tokens to their
    square grid, and interpolate to target_grid x target_grid."""
    fm = as_tensor(fm)
    n = fm.shape[0] - 1
    src_grid = int(round(np.sqrt(n)))
    if src_grid * src_grid != n:
        raise ShapeError(f"{n} patch tokens do not form a square grid")
    return interpolate_grid(fm[1:], src_grid, target_grid)


def fuse_channels(f_mask: Tensor | np.ndarray, f_hr1: Tensor | np.ndarray,
                  f_hr2: Tensor | np.ndarray) -> Tensor:
    """Per-token channel concatenation in the fixed order
    [mask-aware | hr-conv | hr-transformer]."""
    f_mask, f_hr1, f_hr2 = as_tensor(f_mask), as_tensor(f_hr1), as_tensor(f_hr2)
    if not (f_mask.shape[0] == f_hr1.shape[0] == f_hr2.shape[0]):
        raise ShapeError(
            f"token counts differ: {f_mask.shape[0]}, {f_hr1.shape[0]}, {f_hr2.shape[0]}"
        )
    return tape.concat([f_mask, f_hr1, f_hr2], axis=1)


def fused_channel_slices(c_mask: int, c_hr1: int, c_hr2: int) -> dict[str, slice]:
    return {
        "mask": slice(0, c_mask),
        "hr1": slice(c_mask, c_mask + c_hr1),
        "hr2": slice(c_mask + c_hr1, c_mask + c_hr1 + c_hr2),
    }


@dataclass(frozen=True)
class FusedFeatures:
    """Channel-fused features with the layout [mask-aware | hr1 | hr2]."""

    data: np.ndarray
    c_mask: int
    c_hr1: int
    c_hr2: int

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    def slice(self, which: str) -> np.ndarray:
        return self.data[:, fused_channel_slices(self.c_mask, self.c_hr1, self.c_hr2)[which]]


class SelfAttentionFusion:
    """Ablation variant: one attention block across the three per-token
    source vectors. Each source is first projected to a common width; a
    single-head attention over the 3-element source axis mixes them and the
    result is averaged over the source axis and projected out.

    All projections are bias-free so a zero value projection yields exactly
    zero output.
    """

    def __init__(self, source_dims: tuple[int, int, int], dim: int,
                 out_channels: int | None = None,
                 params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "fuse"):
        self.source_dims = source_dims
        self.dim = dim
        self.out_channels = out_channels if out_channels is not None else dim
        self.prefix = prefix
        self.params = params if params is not None else {}
        if f"{prefix}.src0.w" not in self.params:
            rng = rng or np.random.default_rng(0)
            for i, c in enumerate(source_dims):
                self.params[f"{prefix}.src{i}.w"] = nn.normal_init(rng, (c, dim))
            for name in ("wq", "wk", "wv"):
                self.params[f"{prefix}.{name}"] = nn.normal_init(rng, (dim, dim))
            self.params[f"{prefix}.wo"] = nn.normal_init(rng, (dim, self.out_channels))

    def forward(self, f_mask, f_hr1, f_hr2) -> Tensor:
        sources = [as_tensor(f) for f in (f_mask, f_hr1, f_hr2)]
        n = sources[0].shape[0]
        if any(s.shape[0] != n for s in sources):
            raise ShapeError("token counts differ between fusion sources")
        p, pre = self.params, self.prefix
        z = tape.stack(
            [s @ p[f"{pre}.src{i}.w"] for i, s in enumerate(sources)], axis=1
        )  # (tokens, 3, dim)
        q, k, v = z @ p[f"{pre}.wq"], z @ p[f"{pre}.wk"], z @ p[f"{pre}.wv"]
        scores = (q @ tape.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.dim))
        mixed = tape.softmax(scores, axis=-1) @ v  # (tokens, 3, dim)
        return tape.mean(mixed, axis=1) @ p[f"{pre}.wo"]


def fuse_sequence_append(f_mask, f_hr1, f_hr2) -> Tensor:
    """Ablation variant: concatenate along the token axis, order
    [mask-aware; hr1; hr2]. All sources must already share one width."""
    sources = [as_tensor(f) for f in (f_mask, f_hr1, f_hr2)]
    widths = {s.shape[1] for s in sources}
    if len(widths) != 1:
        raise ShapeError(f"sequence append needs one common width, got {sorted(widths)}")
    return tape.concat(sources, axis=0)


class Adapter:
    """Tokenwise two-layer projection into the decoder embedding space."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int,
                 activation: str = "gelu",
                 params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "adapter"):
        if activation not in ("gelu", "relu", "identity"):
            raise ConfigError(f"unknown adapter activation: {activation!r}")
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.activation = activation
        self.prefix = prefix
        self.params = params if params is not None else {}
        if f"{prefix}.w1" not in self.params:
            rng = rng or np.random.default_rng(0)
            self.params[f"{prefix}.w1"] = nn.normal_init(rng, (in_dim, hidden))
            self.params[f"{prefix}.b1"] = nn.zeros_init((hidden,))
            self.params[f"{prefix}.w2"] = nn.normal_init(rng, (hidden, out_dim))
            self.params[f"{prefix}.b2"] = nn.zeros_init((out_dim,))

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"adapter expects width {self.in_dim}, got {x.shape[-1]}")
        p, pre = self.params, self.prefix
        h = nn.linear(x, p[f"{pre}.w1"], p[f"{pre}.b1"])
        if self.activation == "gelu":
            h = tape.gelu(h)
        elif self.activation == "relu":
            h = _relu(h)
        return nn.linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])


def _relu(x: Tensor) -> Tensor:
    gate = tape.constant((x.data > 0).astype(np.float64))
    return x * gate


def adapt(f_fusion: Tensor | np.ndarray, adapter: Adapter) -> Tensor:
    """Apply the adapter tokenwise."""
    return adapter.forward(f_fusion)
