"""Toy causal language decoder conditioned on adapted visual tokens.

The conditioning sequence is [visual tokens | instruction tokens | begin,
caption tokens]; a standard causal mask means every caption position sees
all visual and instruction tokens plus the caption prefix, and nothing else.
Teacher-forced training scores the caption tokens one step ahead; the loss
is the negative log-likelihood summed over a sample's caption tokens and
averaged over the batch by the caller.

Tokenization at this scale is the shared lowercase alphanumeric splitter
(:mod:`regioncap.text`) with a corpus-built vocabulary; a pretrained decoder
can be substituted through ``load_weights`` on the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn, tape
from .errors import ConfigError, ShapeError
from .nn import ParamDict
from .tape import Tensor, as_tensor
from .text import tokenize, detokenize


class VocabError(ValueError):
    """A token or token id is outside the vocabulary."""


class EmptyTargetError(ValueError):
    """Every target position is padding; the loss is undefined."""


PAD, BEGIN, END, IMAGE = "<pad>", "<s>", "</s>", "<image>"
RESERVED = (PAD, BEGIN, END, IMAGE)
PAD_ID, BEGIN_ID, END_ID, IMAGE_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token <-> id map with the four reserved ids first."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise VocabError(f"first four tokens must be {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls(tuple(RESERVED) + tuple(words))

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in tokenize(text):
            if w not in self.index:
                raise VocabError(f"token {w!r} not in vocabulary")
            ids.append(self.index[w])
        return ids

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise VocabError(f"id {i} out of range")
            if int(i) >= 4:  # reserved ids render as nothing
                words.append(self.tokens[int(i)])
        return detokenize(words)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls(tuple(line.rstrip("\n") for line in fh if line.rstrip("\n")))


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 48
    depth: int = 2
    heads: int = 2
    max_len: int = 128
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "DecoderConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown decoder config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class DecoderInput:
    """One conditioning instance: visual tokens first, then text."""

    visual: Tensor | np.ndarray
    instruction_ids: list[int]
    target_ids: list[int] | None = None


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 32
    mode: str = "greedy"  # or "sample"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


class CaptionDecoder:
    """Small causal transformer over [visual | instruction | caption]."""

    def __init__(self, cfg: DecoderConfig, vocab_size: int,
                 params: ParamDict | None = None,
                 rng: np.random.Generator | None = None, prefix: str = "dec"):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.prefix = prefix
        self.params = params if params is not None else {}
        if f"{prefix}.tok" not in self.params:
            self._init_params(rng or np.random.default_rng(cfg.seed))

    def _init_params(self, rng) -> None:
        cfg, p, pre = self.cfg, self.params, self.prefix
        d = cfg.embed_dim
        p[f"{pre}.tok"] = nn.normal_init(rng, (self.vocab_size, d))
        p[f"{pre}.pos"] = nn.normal_init(rng, (cfg.max_len, d))
        for i in range(cfg.depth):
            nn.init_block(rng, d, d * cfg.mlp_ratio, f"{pre}.block{i}", p)
        p[f"{pre}.ln_f.g"] = nn.ones_init((d,))
        p[f"{pre}.ln_f.b"] = nn.zeros_init((d,))
        p[f"{pre}.head.w"] = nn.normal_init(rng, (d, self.vocab_size))
        p[f"{pre}.head.b"] = nn.zeros_init((self.vocab_size,))

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(list(ids), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabError(f"token id out of range for vocab size {self.vocab_size}")
        return ids

    def _trunk(self, x: Tensor) -> Tensor:
        mask = nn.causal_mask(x.shape[0])
        for i in range(self.cfg.depth):
            x = nn.block(x, self.params, f"{self.prefix}.block{i}", self.cfg.heads, mask)
        return nn.layer_norm(x, self.params[f"{self.prefix}.ln_f.g"],
                             self.params[f"{self.prefix}.ln_f.b"])

    def _embed_sequence(self, visual: Tensor, text_ids: np.ndarray) -> Tensor:
        p, pre = self.params, self.prefix
        n_vis = visual.shape[0]
        total = n_vis + len(text_ids)
        if total > self.cfg.max_len:
            raise ShapeError(f"sequence length {total} exceeds max_len {self.cfg.max_len}")
        if visual.shape[1] != self.cfg.embed_dim:
            raise ShapeError(
                f"visual width {visual.shape[1]} != decoder embed_dim {self.cfg.embed_dim}"
            )
        parts = [visual]
        if len(text_ids):
            parts.append(tape.embedding(p[f"{pre}.tok"], text_ids))
        x = tape.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        return x + p[f"{pre}.pos"][:total]

    def forward_teacher_forcing(self, inp: DecoderInput) -> Tensor:
        """Log-probabilities (targets, vocab) at the caption positions."""
        if inp.target_ids is None or len(inp.target_ids) == 0:
            raise EmptyTargetError("teacher forcing needs at least one target token")
        visual = as_tensor(inp.visual)
        instr = self._check_ids(inp.instruction_ids)
        targets = self._check_ids(inp.target_ids)
        text = np.concatenate([instr, [BEGIN_ID], targets[:-1]])
        x = self._trunk(self._embed_sequence(visual, text))
        start = visual.shape[0] + len(instr)  # position of <s>
        logits = nn.linear(x[start : start + len(targets)],
                           self.params[f"{self.prefix}.head.w"],
                           self.params[f"{self.prefix}.head.b"])
        return tape.log_softmax(logits, axis=-1)

    def nll_loss(self, logprobs: Tensor, target_ids, pad_id: int = PAD_ID) -> Tensor:
        """Negative log-likelihood summed over non-padding target positions."""
        targets = self._check_ids(target_ids)
        if len(targets) != logprobs.shape[0]:
            raise ShapeError("targets and log-probabilities are misaligned")
        keep = targets != pad_id
        if not keep.any():
            raise EmptyTargetError("all target positions are padding")
        picked = logprobs[np.arange(len(targets)), targets]
        return -tape.sum_(picked * tape.constant(keep.astype(np.float64)))

    def generate(self, visual, instruction_ids, decode: DecodeParams) -> list[int]:
        """Autoregressive decoding; returns caption ids without begin/end."""
        visual = as_tensor(visual)
        instr = self._check_ids(instruction_ids)
        rng = np.random.default_rng(decode.seed)
        out: list[int] = []
        for _ in range(decode.max_new_tokens):
            text = np.concatenate([instr, [BEGIN_ID], out]).astype(np.int64)
            x = self._trunk(self._embed_sequence(visual, text))
            logits = nn.linear(x[-1:], self.params[f"{self.prefix}.head.w"],
                               self.params[f"{self.prefix}.head.b"]).data[0]
            if decode.mode == "greedy":
                nxt = int(np.argmax(logits))
            else:
                z = logits / decode.temperature
                probs = np.exp(z - z.max())
                probs /= probs.sum()
                nxt = int(rng.choice(len(probs), p=probs))
            if nxt == END_ID:
                break
            out.append(nxt)
        return out
