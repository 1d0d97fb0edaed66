"""Mask-aware low-resolution encoder and the two high-resolution encoders.

The low-resolution path embeds RGB patches and, in parallel, embeds the
binary region mask through a separate single-channel convolution with the
same patch geometry; the two embeddings are summed, a class token and
positional embeddings are added, and a transformer trunk produces the
mask-aware feature sequence (num_patches + 1 tokens).

The high-resolution paths are structural stand-ins for pretrained detail
backbones: a strided-convolution stack and a patch transformer whose native
grid is mean-pooled down, both emitting the same hr_grid x hr_grid token
grid so channel fusion is well-defined. Pretrained weights are out of scope;
``load_weights`` is the hook for dropping real ones in.

All forward passes run on the autodiff tape so training can reach every
parameter, including the mask (alpha) convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Literal

import numpy as np

from . import nn, tape
from .errors import ConfigError, ShapeError
from .geometry import BinaryMask, EmptyRegionError, mask_to_bbox, rasterize_box
from .nn import ParamDict
from .tape import Tensor

ReferralFormat = Literal["mask", "bbox", "contour"]
REFERRAL_FORMATS = ("mask", "bbox", "contour")


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and width settings for all three encoders.

    Defaults reproduce the full-scale token geometry (336/14 -> 24x24 = 576
    patches; 1024 -> 32x32 = 1024 high-resolution tokens); channel counts and
    transformer size stay configurable so tests can run tiny instances.
    """

    lr_size: int = 336
    hr_size: int = 1024
    patch_size: int = 14
    lr_channels: int = 32
    hr1_channels: int = 32
    hr2_channels: int = 32
    hr_grid: int = 32
    depth: int = 2
    heads: int = 4
    seed: int = 0
    mlp_ratio: int = 4
    hr2_pool: int = 2
    normalize_mean: tuple[float, float, float] | None = None
    normalize_std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.lr_size % self.patch_size != 0:
            raise ConfigError(f"lr_size {self.lr_size} not divisible by patch_size {self.patch_size}")
        if self.hr_size % self.hr_grid != 0:
            raise ConfigError(f"hr_size {self.hr_size} not divisible by hr_grid {self.hr_grid}")
        if self.hr_size % (self.hr_grid * self.hr2_pool) != 0:
            raise ConfigError("hr2 native grid (hr_grid * hr2_pool) must divide hr_size")
        for name in ("lr_channels", "hr1_channels", "hr2_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr_channels % self.heads != 0 or self.hr2_channels % self.heads != 0:
            raise ConfigError("transformer channel counts must be divisible by heads")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def lr_grid(self) -> int:
        return self.lr_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.lr_grid * self.lr_grid

    @property
    def hr_tokens(self) -> int:
        return self.hr_grid * self.hr_grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        cleaned = dict(obj)
        for key in ("normalize_mean", "normalize_std"):
            if cleaned.get(key) is not None:
                cleaned[key] = tuple(cleaned[key])
        return cls(**cleaned)

    @classmethod
    def from_file(cls, path) -> "EncoderConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class FeatureMap:
    """Spatially indexed features: grid_h * grid_w tokens in row-major order
    (plus an optional leading class token)."""

    grid_h: int
    grid_w: int
    data: np.ndarray
    class_token: bool = False

    def __post_init__(self):
        expected = self.grid_h * self.grid_w + (1 if self.class_token else 0)
        if self.data.ndim != 2 or self.data.shape[0] != expected:
            raise ShapeError(
                f"feature map has {self.data.shape} tokens, expected {expected}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def patchify(x: Tensor, patch: int) -> Tensor:
    """(H, W, C) -> (H/p, W/p, p*p*C); within a patch, entries are ordered
    (row, col, channel) row-major. Patch embedding weights use this layout."""
    h, w = x.shape[0], x.shape[1]
    c = x.shape[2] if x.ndim == 3 else 1
    if x.ndim == 2:
        x = x.reshape(h, w, 1)
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} input not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(gh, patch, gw, patch, c)
    x = tape.transpose(x, (0, 2, 1, 3, 4))
    return x.reshape(gh, gw, patch * patch * c)


def combine_and_flatten(e_patch: Tensor, e_mask: Tensor) -> Tensor:
    """Elementwise sum of the patch and mask embedding grids, flattened
    row-major to a (num_patches, channels) sequence."""
    if e_patch.shape != e_mask.shape:
        raise ShapeError(f"grid shapes differ: {e_patch.shape} vs {e_mask.shape}")
    gh, gw, c = e_patch.shape
    return (e_patch + e_mask).reshape(gh * gw, c)


def add_class_and_positional(seq: Tensor, class_emb: Tensor, pos_emb: Tensor) -> Tensor:
    """Prepend the class token and add positional embeddings (length N+1)."""
    n, c = seq.shape
    if pos_emb.shape != (n + 1, c):
        raise ShapeError(f"positional embeddings {pos_emb.shape}, expected {(n + 1, c)}")
    if class_emb.shape != (c,):
        raise ShapeError(f"class embedding {class_emb.shape}, expected {(c,)}")
    return tape.concat([class_emb.reshape(1, c), seq], axis=0) + pos_emb


def _normalize(img: Tensor, cfg: EncoderConfig) -> Tensor:
    if cfg.normalize_mean is not None:
        img = img - tape.constant(np.asarray(cfg.normalize_mean))
    if cfg.normalize_std is not None:
        img = img / tape.constant(np.asarray(cfg.normalize_std))
    return img


def _check_image(img: np.ndarray, size: int, what: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (size, size, 3):
        raise ConfigError(f"{what} image must be {size}x{size}x3, got {img.shape}")
    return img


class MaskAwareEncoder:
    """CLIP-style patch transformer with a parallel mask-embedding path.

    The mask convolution shares the patch geometry and output width of the
    RGB patch embedding but takes a single input channel; its weights and
    bias start at zero, so a freshly initialized encoder is exactly
    mask-blind (the documented warm-start behavior).
    """

    def __init__(self, cfg: EncoderConfig, params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "lr"):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params if params is not None else {}
        if f"{prefix}.patch.w" not in self.params:
            self._init_params(rng or np.random.default_rng(cfg.seed))

    def _init_params(self, rng) -> None:
        cfg, p, pre = self.cfg, self.params, self.prefix
        psq = cfg.patch_size * cfg.patch_size
        c = cfg.lr_channels
        p[f"{pre}.patch.w"] = nn.normal_init(rng, (psq * 3, c))
        p[f"{pre}.patch.b"] = nn.zeros_init((c,))
        p[f"{pre}.alpha.w"] = nn.zeros_init((psq, c))
        p[f"{pre}.alpha.b"] = nn.zeros_init((c,))
        p[f"{pre}.cls"] = nn.normal_init(rng, (c,))
        p[f"{pre}.pos"] = nn.normal_init(rng, (cfg.num_patches + 1, c))
        for i in range(cfg.depth):
            nn.init_block(rng, c, c * cfg.mlp_ratio, f"{pre}.block{i}", p)
        p[f"{pre}.ln_f.g"] = nn.ones_init((c,))
        p[f"{pre}.ln_f.b"] = nn.zeros_init((c,))

    def embed_patches(self, img: np.ndarray | Tensor) -> Tensor:
        """RGB patch embedding: (lr, lr, 3) -> (grid, grid, channels)."""
        if not isinstance(img, Tensor):
            img = tape.constant(_check_image(img, self.cfg.lr_size, "low-resolution"))
        img = _normalize(img, self.cfg)
        patches = patchify(img, self.cfg.patch_size)
        return nn.linear(patches, self.params[f"{self.prefix}.patch.w"],
                         self.params[f"{self.prefix}.patch.b"])

    def embed_mask(self, mask: BinaryMask | np.ndarray | Tensor) -> Tensor:
        """Mask (alpha) embedding with the same patch geometry as
        :meth:`embed_patches`. Accepts real-valued planes so linearity in the
        mask is well-defined."""
        if isinstance(mask, BinaryMask):
            mask = mask.pixels.astype(np.float64)
        if not isinstance(mask, Tensor):
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != (self.cfg.lr_size, self.cfg.lr_size):
                raise ConfigError(
                    f"mask must be {self.cfg.lr_size}x{self.cfg.lr_size}, got {mask.shape}"
                )
            mask = tape.constant(mask)
        patches = patchify(mask, self.cfg.patch_size)
        return nn.linear(patches, self.params[f"{self.prefix}.alpha.w"],
                         self.params[f"{self.prefix}.alpha.b"])

    def forward(self, img, mask) -> Tensor:
        """Full mask-aware encoding: (num_patches + 1, channels) sequence."""
        seq = combine_and_flatten(self.embed_patches(img), self.embed_mask(mask))
        x = add_class_and_positional(seq, self.params[f"{self.prefix}.cls"],
                                     self.params[f"{self.prefix}.pos"])
        for i in range(self.cfg.depth):
            x = nn.block(x, self.params, f"{self.prefix}.block{i}", self.cfg.heads)
        return nn.layer_norm(x, self.params[f"{self.prefix}.ln_f.g"],
                             self.params[f"{self.prefix}.ln_f.b"])

    def encode(self, img, mask) -> FeatureMap:
        g = self.cfg.lr_grid
        return FeatureMap(g, g, self.forward(img, mask).data, class_token=True)


def _factor_strides(total: int) -> list[int]:
    strides = []
    while total > 1:
        for f in (4, 3, 2):
            if total % f == 0:
                strides.append(f)
                total //= f
                break
        else:
            strides.append(total)
            total = 1
    return strides or [1]


class ConvStackEncoder:
    """High-resolution detail encoder: a stack of non-overlapping strided
    convolutions (kernel = stride) with GELU between stages, reaching the
    shared hr_grid x hr_grid output grid."""

    def __init__(self, cfg: EncoderConfig, params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "hr1"):
        self.cfg = cfg
        self.prefix = prefix
        self.strides = _factor_strides(cfg.hr_size // cfg.hr_grid)
        n = len(self.strides)
        self.channels = [max(1, cfg.hr1_channels >> (n - 1 - i)) for i in range(n - 1)]
        self.channels.append(cfg.hr1_channels)
        self.params = params if params is not None else {}
        if f"{prefix}.stage0.w" not in self.params:
            self._init_params(rng or np.random.default_rng(cfg.seed + 1))

    def _init_params(self, rng) -> None:
        cin = 3
        for i, (s, cout) in enumerate(zip(self.strides, self.channels)):
            self.params[f"{self.prefix}.stage{i}.w"] = nn.normal_init(rng, (s * s * cin, cout))
            self.params[f"{self.prefix}.stage{i}.b"] = nn.zeros_init((cout,))
            cin = cout

    def forward(self, img) -> Tensor:
        """(hr, hr, 3) image -> (hr_grid^2, hr1_channels) token sequence."""
        if not isinstance(img, Tensor):
            img = tape.constant(_check_image(img, self.cfg.hr_size, "high-resolution"))
        x = _normalize(img, self.cfg)
        last = len(self.strides) - 1
        for i, s in enumerate(self.strides):
            x = nn.linear(patchify(x, s), self.params[f"{self.prefix}.stage{i}.w"],
                          self.params[f"{self.prefix}.stage{i}.b"])
            if i != last:
                x = tape.gelu(x)
        g = self.cfg.hr_grid
        return x.reshape(g * g, self.channels[-1])

    def encode(self, img) -> FeatureMap:
        g = self.cfg.hr_grid
        return FeatureMap(g, g, self.forward(img).data)


class PatchTransformerEncoder:
    """High-resolution encoder in the segmentation-backbone style: a patch
    transformer without a class token on a finer native grid, mean-pooled
    down to hr_grid x hr_grid so both HR encoders share one token grid."""

    def __init__(self, cfg: EncoderConfig, params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "hr2"):
        self.cfg = cfg
        self.prefix = prefix
        self.native_grid = cfg.hr_grid * cfg.hr2_pool
        self.patch = cfg.hr_size // self.native_grid
        self.params = params if params is not None else {}
        if f"{prefix}.patch.w" not in self.params:
            self._init_params(rng or np.random.default_rng(cfg.seed + 2))

    def _init_params(self, rng) -> None:
        cfg, p, pre = self.cfg, self.params, self.prefix
        c = cfg.hr2_channels
        p[f"{pre}.patch.w"] = nn.normal_init(rng, (self.patch * self.patch * 3, c))
        p[f"{pre}.patch.b"] = nn.zeros_init((c,))
        p[f"{pre}.pos"] = nn.normal_init(rng, (self.native_grid * self.native_grid, c))
        for i in range(cfg.depth):
            nn.init_block(rng, c, c * cfg.mlp_ratio, f"{pre}.block{i}", p)
        p[f"{pre}.ln_f.g"] = nn.ones_init((c,))
        p[f"{pre}.ln_f.b"] = nn.zeros_init((c,))

    def forward(self, img) -> Tensor:
        """(hr, hr, 3) image -> (hr_grid^2, hr2_channels) token sequence."""
        if not isinstance(img, Tensor):
            img = tape.constant(_check_image(img, self.cfg.hr_size, "high-resolution"))
        img = _normalize(img, self.cfg)
        ng, c = self.native_grid, self.cfg.hr2_channels
        x = nn.linear(patchify(img, self.patch), self.params[f"{self.prefix}.patch.w"],
                      self.params[f"{self.prefix}.patch.b"])
        x = x.reshape(ng * ng, c) + self.params[f"{self.prefix}.pos"]
        for i in range(self.cfg.depth):
            x = nn.block(x, self.params, f"{self.prefix}.block{i}", self.cfg.heads)
        x = nn.layer_norm(x, self.params[f"{self.prefix}.ln_f.g"],
                          self.params[f"{self.prefix}.ln_f.b"])
        g, pool = self.cfg.hr_grid, self.cfg.hr2_pool
        x = x.reshape(g, pool, g, pool, c)
        x = tape.mean(x, axis=(1, 3))
        return x.reshape(g * g, c)

    def encode(self, img) -> FeatureMap:
        g = self.cfg.hr_grid
        return FeatureMap(g, g, self.forward(img).data)


def mask_boundary(mask: BinaryMask) -> np.ndarray:
    """Set pixels with at least one 4-neighbor outside the mask (the image
    border counts as outside). Boolean (h, w) array."""
    px = mask.pixels.astype(bool)
    padded = np.pad(px, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return px & ~interior


def render_referral(
    mask: BinaryMask,
    referral: ReferralFormat,
    img: np.ndarray,
    contour_color: tuple[float, float, float] = (1.0, 0.0, 0.0),
) -> tuple[np.ndarray, BinaryMask]:
    """Re-express the region referral in one of the ablation formats.

    mask    -> image and mask unchanged;
    bbox    -> mask replaced by its rasterized bounding box;
    contour -> the 1-pixel-wide mask boundary is drawn onto the image and the
               mask is replaced by all-ones (the referral lives in the pixels).
    """
    if mask.area == 0:
        raise EmptyRegionError("referral rendering needs a non-empty mask")
    if referral == "mask":
        return img.copy(), mask
    if referral == "bbox":
        return img.copy(), rasterize_box(mask_to_bbox(mask), mask.height, mask.width)
    if referral == "contour":
        out = np.array(img, dtype=np.float64, copy=True)
        boundary = mask_boundary(mask)
        out[boundary] = np.asarray(contour_color)
        return out, BinaryMask.ones(mask.height, mask.width)
    raise ConfigError(f"unknown referral format: {referral!r}")
