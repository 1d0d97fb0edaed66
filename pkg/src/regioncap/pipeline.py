"""End-to-end captioning pipeline: encoders, fusion, adapter, decoder.

Holds every parameter in one flat name -> Tensor dict, grouped into the six
trainable components (mask/alpha convolution, low-resolution trunk, the two
high-resolution encoders, adapter+fusion, decoder) that the staged training
schedule freezes and thaws. Checkpoints are single ``.npz`` archives holding
the parameter arrays, the configuration, the vocabulary, and the data-order
RNG state, so a later stage resumes exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape
from .data import (RegionCaptionSample, build_instruction, effective_mask,
                   load_image, ATTRIBUTE_NAMES, INSTRUCTION_TEMPLATES)
from .decoder import (CaptionDecoder, DecodeParams, DecoderConfig, DecoderInput,
                      Vocabulary, END_ID)
from .encoders import (ConvStackEncoder, EncoderConfig, MaskAwareEncoder,
                       PatchTransformerEncoder, REFERRAL_FORMATS, render_referral)
from .errors import ConfigError
from .fusion import (Adapter, FUSION_VARIANTS, SelfAttentionFusion, fuse_channels,
                     fuse_sequence_append, project_mask_features)
from .geometry import BinaryMask
from .nn import ParamDict, normal_init
from .tape import Tensor

COMPONENTS = ("alpha_conv", "lr_encoder_trunk", "hr_encoder_1", "hr_encoder_2",
              "adapter", "decoder")


def component_of(param_name: str) -> str:
    """Map a parameter name to its trainable component."""
    if param_name.startswith("lr.alpha."):
        return "alpha_conv"
    if param_name.startswith("lr."):
        return "lr_encoder_trunk"
    if param_name.startswith("hr1."):
        return "hr_encoder_1"
    if param_name.startswith("hr2."):
        return "hr_encoder_2"
    if param_name.startswith(("adapter.", "fuse.")):
        return "adapter"
    if param_name.startswith("dec."):
        return "decoder"
    raise KeyError(f"parameter {param_name!r} belongs to no component")


@dataclass(frozen=True)
class AdapterConfig:
    hidden: int = 64
    activation: str = "gelu"

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "activation": self.activation}

    @classmethod
    def from_dict(cls, obj: dict) -> "AdapterConfig":
        return cls(**obj)


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fusion: str = "channel"
    referral: str = "mask"
    fusion_dim: int | None = None

    def __post_init__(self):
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion must be one of {FUSION_VARIANTS}")
        if self.referral not in REFERRAL_FORMATS:
            raise ConfigError(f"referral must be one of {REFERRAL_FORMATS}")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "adapter": self.adapter.to_dict(),
            "fusion": self.fusion,
            "referral": self.referral,
            "fusion_dim": self.fusion_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        return cls(
            encoder=EncoderConfig.from_dict(obj.get("encoder", {})),
            decoder=DecoderConfig.from_dict(obj.get("decoder", {})),
            adapter=AdapterConfig.from_dict(obj.get("adapter", {})),
            fusion=obj.get("fusion", "channel"),
            referral=obj.get("referral", "mask"),
            fusion_dim=obj.get("fusion_dim"),
        )


@dataclass
class PreparedSample:
    """A sample turned into arrays the model consumes directly."""

    lr_img: np.ndarray
    hr_img: np.ndarray
    mask: BinaryMask
    instruction_ids: list[int]
    target_ids: list[int]


def vocabulary_for_samples(sample_lists) -> Vocabulary:
    """Corpus vocabulary: every caption plus every instruction the three
    task templates can produce."""
    texts = [INSTRUCTION_TEMPLATES["RDC"], INSTRUCTION_TEMPLATES["CGIC"]]
    texts += [build_instruction("AARC", a) for a in ATTRIBUTE_NAMES]
    for samples in sample_lists:
        texts += [s.caption for s in samples]
    return Vocabulary.from_texts(texts)


class CaptionPipeline:
    """The assembled model. Forward passes run on the autodiff tape."""

    def __init__(self, cfg: PipelineConfig, vocab: Vocabulary,
                 params: ParamDict | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.params: ParamDict = params if params is not None else {}
        rng = rng or np.random.default_rng(cfg.encoder.seed)
        ec = cfg.encoder

        self.lr_encoder = MaskAwareEncoder(ec, self.params, rng)
        self.hr1_encoder = ConvStackEncoder(ec, self.params, rng)
        self.hr2_encoder = PatchTransformerEncoder(ec, self.params, rng)

        dims = (ec.lr_channels, ec.hr1_channels, ec.hr2_channels)
        self.fusion_dim = cfg.fusion_dim or max(dims)
        if cfg.fusion == "channel":
            self.attn_fusion = None
            adapter_in = sum(dims)
        elif cfg.fusion == "self_attention":
            self.attn_fusion = SelfAttentionFusion(dims, self.fusion_dim,
                                                   params=self.params, rng=rng)
            adapter_in = self.attn_fusion.out_channels
        else:  # sequence_append
            self.attn_fusion = None
            for i, c in enumerate(dims):
                key = f"fuse.src{i}.w"
                if key not in self.params:
                    self.params[key] = normal_init(rng, (c, self.fusion_dim))
            adapter_in = self.fusion_dim
        self.adapter = Adapter(adapter_in, cfg.adapter.hidden, cfg.decoder.embed_dim,
                               cfg.adapter.activation, self.params, rng)
        self.decoder = CaptionDecoder(cfg.decoder, len(vocab), self.params, rng)

    # forward ---------------------------------------------------------
    def visual_tokens(self, lr_img: np.ndarray, hr_img: np.ndarray,
                      mask: BinaryMask) -> Tensor:
        """Adapted visual token sequence for the decoder."""
        if self.cfg.referral != "mask":
            lr_img, mask = render_referral(mask, self.cfg.referral, lr_img)
        f_m = self.lr_encoder.forward(lr_img, mask)
        f_m_grid = project_mask_features(f_m, self.cfg.encoder.hr_grid)
        f_hr1 = self.hr1_encoder.forward(hr_img)
        f_hr2 = self.hr2_encoder.forward(hr_img)
        if self.cfg.fusion == "channel":
            fused = fuse_channels(f_m_grid, f_hr1, f_hr2)
        elif self.cfg.fusion == "self_attention":
            fused = self.attn_fusion.forward(f_m_grid, f_hr1, f_hr2)
        else:
            projected = [
                src @ self.params[f"fuse.src{i}.w"]
                for i, src in enumerate((f_m_grid, f_hr1, f_hr2))
            ]
            fused = fuse_sequence_append(*projected)
        return self.adapter.forward(fused)

    def sample_loss(self, prepared: PreparedSample) -> Tensor:
        visual = self.visual_tokens(prepared.lr_img, prepared.hr_img, prepared.mask)
        inp = DecoderInput(visual, prepared.instruction_ids, prepared.target_ids)
        logprobs = self.decoder.forward_teacher_forcing(inp)
        return self.decoder.nll_loss(logprobs, prepared.target_ids)

    def batch_loss(self, batch: list[PreparedSample]) -> Tensor:
        """Per-sample token-sum NLL, averaged over the batch."""
        if not batch:
            raise ValueError("empty batch")
        losses = [self.sample_loss(p) for p in batch]
        total = losses[0]
        for item in losses[1:]:
            total = total + item
        return total * tape.as_tensor(1.0 / len(batch))

    def caption(self, lr_img: np.ndarray, hr_img: np.ndarray, mask: BinaryMask,
                instruction: str, decode: DecodeParams | None = None) -> str:
        decode = decode or DecodeParams()
        visual = self.visual_tokens(lr_img, hr_img, mask)
        ids = self.decoder.generate(tape.constant(visual.data),
                                    self.vocab.encode(instruction), decode)
        return self.vocab.decode(ids)

    # data preparation --------------------------------------------------
    def prepare(self, sample: RegionCaptionSample, image_root=".",
                force_full_mask: bool = False) -> PreparedSample:
        ec = self.cfg.encoder
        path = Path(image_root) / sample.image
        return PreparedSample(
            lr_img=load_image(path, ec.lr_size),
            hr_img=load_image(path, ec.hr_size),
            mask=effective_mask(sample, ec.lr_size, force_full=force_full_mask),
            instruction_ids=self.vocab.encode(sample.instruction()),
            target_ids=self.vocab.encode(sample.caption) + [END_ID],
        )

    # parameter bookkeeping ----------------------------------------------
    def component_params(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {c: [] for c in COMPONENTS}
        for name in sorted(self.params):
            groups[component_of(name)].append(name)
        return groups

    def load_weights(self, mapping: dict[str, np.ndarray]) -> None:
        """Hook for substituting pretrained weights; shapes must match."""
        for name, arr in mapping.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.params[name].data.shape:
                raise ConfigError(
                    f"{name}: shape {arr.shape} != {self.params[name].data.shape}"
                )
            self.params[name].data = arr

    # checkpointing -------------------------------------------------------
    def save_checkpoint(self, path, rng_state: dict | None = None) -> None:
        arrays = {f"param:{k}": v.data for k, v in self.params.items()}
        arrays["config"] = np.array(json.dumps(self.cfg.to_dict()))
        arrays["vocab"] = np.array(json.dumps(list(self.vocab.tokens)))
        arrays["rng_state"] = np.array(json.dumps(rng_state or {}))
        np.savez(path, **arrays)

    @classmethod
    def load_checkpoint(cls, path) -> tuple["CaptionPipeline", dict]:
        with np.load(path, allow_pickle=False) as archive:
            cfg = PipelineConfig.from_dict(json.loads(str(archive["config"])))
            vocab = Vocabulary(tuple(json.loads(str(archive["vocab"]))))
            rng_state = json.loads(str(archive["rng_state"]))
            params = {
                k[len("param:"):]: Tensor(archive[k])
                for k in archive.files if k.startswith("param:")
            }
        return cls(cfg, vocab, params=params), rng_state
