"""Region-caption dataset schema, instruction templates, and statistics.

Records are newline-delimited JSON with the keys
``{"image", "w", "h", "entity", "mask": {h, w, counts} | null, "task",
"attribute", "caption", "split"}``. Tasks come in three granularities:

* ``AARC`` - describe one named compositional attribute of the masked region
  (attribute id 1-18 required);
* ``RDC``  - free-form detailed description of the masked region;
* ``CGIC`` - description of the entire image (no mask; implied all-ones).

External corpora used by the training mixtures are modeled as named sources
with the same schema; acquiring the real data is out of scope here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .geometry import BinaryMask, RunLengthEncoding, decode_rle, mask_area_ratio, resize_mask

ATTRIBUTE_NAMES: dict[int, str] = {
    1: "Category Name",
    2: "Body Shape",
    3: "Skin Texture and Color",
    4: "Clothing, Shoes, Accessories",
    5: "Interaction with Other Objects",
    6: "Body Pose/Gesture",
    7: "Other Attributes",
    8: "Relative Location with Other Objects",
    9: "Color",
    10: "Materials/Texture",
    11: "Camera Viewpoint",
    12: "Associative Visual Effect",
    13: "Shape",
    14: "Facial Expression",
    15: "Hair",
    16: "Age Range",
    17: "Object Pose for Deformable Objects",
    18: "Style",
}

TASKS = ("AARC", "RDC", "CGIC")
SPLITS = ("train", "test")

INSTRUCTION_TEMPLATES = {
    "AARC": "Describe the {attribute} of the masked region.",
    "RDC": "Provide a detailed description of the masked region.",
    "CGIC": "Provide a comprehensive description of the entire image.",
}


class TemplateError(ValueError):
    """Task and attribute arguments are inconsistent."""


class IngestionError(ValueError):
    """A dataset record failed to parse or validate."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


def attribute_name(attribute_id: int) -> str:
    if attribute_id not in ATTRIBUTE_NAMES:
        raise TemplateError(f"attribute id {attribute_id} outside 1-18")
    return ATTRIBUTE_NAMES[attribute_id]


def build_instruction(task: str, attribute: int | None = None,
                      templates: dict[str, str] | None = None) -> str:
    """Instruction text for one task; AARC requires an attribute id."""
    templates = templates or INSTRUCTION_TEMPLATES
    if task not in TASKS:
        raise TemplateError(f"unknown task {task!r}")
    if task == "AARC":
        if attribute is None:
            raise TemplateError("AARC needs an attribute id")
        return templates["AARC"].format(attribute=attribute_name(attribute))
    if attribute is not None:
        raise TemplateError(f"{task} does not take an attribute")
    return templates[task]


@dataclass(frozen=True)
class RegionCaptionSample:
    """One (image, mask, task, attribute, caption) record."""

    image: str
    width: int
    height: int
    caption: str
    task: str
    split: str
    entity: str | None = None
    mask: RunLengthEncoding | None = None
    attribute: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.task == "AARC":
            if self.attribute not in ATTRIBUTE_NAMES:
                raise ValueError("AARC sample needs attribute id 1-18")
        if self.task == "CGIC":
            if self.mask is not None:
                raise ValueError("CGIC sample must not carry a mask")
        elif self.mask is None:
            raise ValueError(f"{self.task} sample needs a mask")
        if self.mask is not None:
            if (self.mask.height, self.mask.width) != (self.height, self.width):
                raise ValueError(
                    f"mask {self.mask.height}x{self.mask.width} does not match "
                    f"image {self.height}x{self.width}"
                )
            self.mask.validate()
        if not isinstance(self.caption, str) or not self.caption:
            raise ValueError("caption must be a non-empty string")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RegionCaptionSample":
        mask = obj.get("mask")
        return cls(
            image=obj["image"],
            width=int(obj["w"]),
            height=int(obj["h"]),
            entity=obj.get("entity"),
            mask=RunLengthEncoding.from_json(mask) if mask is not None else None,
            task=obj["task"],
            attribute=obj.get("attribute"),
            caption=obj["caption"],
            split=obj["split"],
        )

    def to_json_obj(self) -> dict:
        return {
            "image": self.image,
            "w": self.width,
            "h": self.height,
            "entity": self.entity,
            "mask": self.mask.to_json() if self.mask is not None else None,
            "task": self.task,
            "attribute": self.attribute,
            "caption": self.caption,
            "split": self.split,
        }

    def instruction(self) -> str:
        return build_instruction(self.task, self.attribute if self.task == "AARC" else None)


@dataclass
class LoadResult:
    samples: list[RegionCaptionSample]
    errors: list[IngestionError]

    def raise_if_errors(self) -> "LoadResult":
        if self.errors:
            raise self.errors[0]
        return self


def load_samples(path) -> LoadResult:
    """Read a JSONL dataset; invalid records become located errors and the
    valid ones are returned in file order."""
    samples: list[RegionCaptionSample] = []
    errors: list[IngestionError] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(IngestionError(lineno, f"malformed JSON: {exc.msg}"))
                continue
            try:
                samples.append(RegionCaptionSample.from_json_obj(obj))
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(IngestionError(lineno, str(exc)))
    return LoadResult(samples, errors)


def save_samples(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json_obj()) + "\n")


def effective_mask(sample: RegionCaptionSample, lr_size: int,
                   force_full: bool = False) -> BinaryMask:
    """The mask actually fed to the encoder, at the low-resolution size.

    CGIC samples (and any sample during full-image pretraining, via
    ``force_full``) highlight the whole image.
    """
    if force_full or sample.task == "CGIC" or sample.mask is None:
        return BinaryMask.ones(lr_size, lr_size)
    decoded = decode_rle(sample.mask)
    return resize_mask(decoded, lr_size, lr_size)


# image / mask file IO ------------------------------------------------

def load_image(path, size: int) -> np.ndarray:
    """Load PNG/JPEG, convert to RGB in [0,1], bilinear-resize to size x size."""
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def mask_to_png(mask: BinaryMask, path) -> None:
    """Store a mask as single-channel PNG, 255 = set."""
    Image.fromarray(mask.pixels * np.uint8(255), mode="L").save(path)


def mask_from_png(path) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask((arr >= 128).astype(np.uint8))


# statistics -----------------------------------------------------------

@dataclass
class StatsReport:
    """Exact dataset counts plus the two standard histograms."""

    n_captions: int
    n_images: int
    n_entities: int
    task_counts: dict[str, int]
    attribute_counts: dict[int, int]
    resolution_counts: dict[str, int]
    entities_per_image: dict[str, int]
    mask_ratio_edges: list[float]
    mask_ratio_counts: list[int]

    def to_dict(self) -> dict:
        return {
            "n_captions": self.n_captions,
            "n_images": self.n_images,
            "n_entities": self.n_entities,
            "task_counts": dict(self.task_counts),
            "attribute_counts": {str(k): v for k, v in sorted(self.attribute_counts.items())},
            "resolution_counts": dict(sorted(self.resolution_counts.items())),
            "entities_per_image": dict(sorted(self.entities_per_image.items())),
            "mask_ratio_edges": list(self.mask_ratio_edges),
            "mask_ratio_counts": list(self.mask_ratio_counts),
        }


def dataset_stats(samples, mask_bins: int = 20) -> StatsReport:
    """Counts per attribute/task/resolution plus the mask-area-ratio
    histogram (``mask_bins`` equal bins on [0,1]); permutation-invariant."""
    samples = list(samples)
    task_counts = {t: 0 for t in TASKS}
    attribute_counts: dict[int, int] = {}
    resolution_counts: dict[str, int] = {}
    images = set()
    entities = set()
    per_image_entities: dict[str, set] = {}
    ratios = []
    for s in samples:
        task_counts[s.task] += 1
        if s.attribute is not None:
            attribute_counts[s.attribute] = attribute_counts.get(s.attribute, 0) + 1
        key = f"{s.width}x{s.height}"
        resolution_counts[key] = resolution_counts.get(key, 0) + 1
        images.add(s.image)
        if s.entity is not None:
            entities.add((s.image, s.entity))
            per_image_entities.setdefault(s.image, set()).add(s.entity)
        if s.mask is not None:
            ratios.append(mask_area_ratio(decode_rle(s.mask)))
    edges = np.linspace(0.0, 1.0, mask_bins + 1)
    counts, _ = np.histogram(ratios, bins=edges)
    return StatsReport(
        n_captions=len(samples),
        n_images=len(images),
        n_entities=len(entities),
        task_counts=task_counts,
        attribute_counts=attribute_counts,
        resolution_counts=resolution_counts,
        entities_per_image={img: len(es) for img, es in per_image_entities.items()},
        mask_ratio_edges=[float(e) for e in edges],
        mask_ratio_counts=[int(c) for c in counts],
    )


# training mixtures ----------------------------------------------------

STAGE1_SOURCES = ("llava_pretrain",)
STAGE2_SOURCES = ("compositioncap", "grand", "refcoco", "refcoco_plus", "refcocog")
STAGE3_SOURCES = ("compositioncap",)


@dataclass(frozen=True)
class SourceRef:
    name: str
    weight: float
    split: str | None = None
    task: str | None = None

    def __post_init__(self):
        if self.weight <= 0:
            raise ConfigError("source weights must be positive")


@dataclass(frozen=True)
class DatasetSpec:
    """A weighted mixture over named sources, with optional filters and the
    full-image-mask override used by caption pretraining."""

    sources: tuple[SourceRef, ...]
    force_full_mask: bool = False

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("a dataset spec needs at least one source")
        total = sum(s.weight for s in self.sources)
        normalized = tuple(
            SourceRef(s.name, s.weight / total, s.split, s.task) for s in self.sources
        )
        object.__setattr__(self, "sources", normalized)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.sources])


def stage_mixture(stage: int, registry: dict) -> DatasetSpec:
    """The per-stage data mixture.

    Stage 1 trains on full-image caption data with all-ones masks; stage 2 on
    the union of the region-caption sources at equal weight; stage 3 on the
    region-attribute train split alone.
    """
    if stage == 1:
        names, force_full, split = STAGE1_SOURCES, True, "train"
    elif stage == 2:
        names, force_full, split = STAGE2_SOURCES, False, "train"
    elif stage == 3:
        names, force_full, split = STAGE3_SOURCES, False, "train"
    else:
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage!r}")
    missing = [n for n in names if n not in registry]
    if missing:
        raise ConfigError(f"stage {stage} mixture needs sources {missing}")
    refs = tuple(SourceRef(n, 1.0 / len(names), split=split) for n in names)
    return DatasetSpec(refs, force_full_mask=force_full)


class MixtureSampler:
    """Seed-deterministic sampling: draw a source by weight, then a sample
    uniformly within it."""

    def __init__(self, spec: DatasetSpec, registry: dict, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.pools: list[list[RegionCaptionSample]] = []
        for ref in spec.sources:
            if ref.name not in registry:
                raise ConfigError(f"source {ref.name!r} not in registry")
            pool = [
                s for s in registry[ref.name]
                if (ref.split is None or s.split == ref.split)
                and (ref.task is None or s.task == ref.task)
            ]
            if not pool:
                raise ConfigError(f"source {ref.name!r} has no samples after filtering")
            self.pools.append(pool)
        self.weights = spec.weights

    def draw(self) -> tuple[RegionCaptionSample, bool]:
        src = int(self.rng.choice(len(self.pools), p=self.weights))
        pool = self.pools[src]
        sample = pool[int(self.rng.integers(len(pool)))]
        return sample, self.spec.force_full_mask
