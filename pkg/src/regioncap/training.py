"""Three-stage training orchestration with per-stage freeze plans.

Stage 1 aligns the adapter on full-image caption data (everything else
frozen); stage 2 aligns image and mask features by training only the
mask-aware encoder (alpha convolution + low-resolution trunk); stage 3
fine-tunes everything on the region-attribute data. Parameters marked
non-trainable for a stage are bit-identical before and after it, and runs
are deterministic given the stage seed.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .data import DatasetSpec, MixtureSampler
from .errors import ConfigError
from .pipeline import COMPONENTS, CaptionPipeline, PreparedSample, component_of


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def freeze_plan(stage: int) -> dict[str, bool]:
    """Which components receive gradient updates in each stage."""
    if stage == 1:
        trainable = {"adapter"}
    elif stage == 2:
        trainable = {"alpha_conv", "lr_encoder_trunk"}
    elif stage == 3:
        trainable = set(COMPONENTS)
    else:
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage!r}")
    return {c: c in trainable for c in COMPONENTS}


@dataclass(frozen=True)
class StageConfig:
    """One stage: data mixture, trainability map, and optimizer settings."""

    stage: int
    data: DatasetSpec
    steps: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    trainable: dict[str, bool] | None = None

    def __post_init__(self):
        plan = freeze_plan(self.stage)
        if self.trainable is None:
            object.__setattr__(self, "trainable", plan)
        elif self.trainable != plan:
            raise ConfigError(f"stage {self.stage} trainability map must be {plan}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainingReport:
    stage: int
    losses: list[float]
    wall_time_s: float
    final_checksum: str

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "losses": self.losses,
            "wall_time_s": self.wall_time_s,
            "final_checksum": self.final_checksum,
        }


def params_checksum(params) -> str:
    """Order-independent digest of all parameter arrays."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, trainable: set[str]) -> None:
        self.t += 1
        for name in sorted(trainable):
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                         + self.weight_decay * p.data)


def run_stage(pipeline: CaptionPipeline, cfg: StageConfig, registry: dict,
              image_root=".") -> TrainingReport:
    """Run one stage; frozen parameters are never touched."""
    trainable_names = {
        n for n in pipeline.params if cfg.trainable[component_of(n)]
    }
    opt = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sampler = MixtureSampler(cfg.data, registry, seed=cfg.seed)
    cache: dict[int, PreparedSample] = {}
    losses: list[float] = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            sample, force_full = sampler.draw()
            key = id(sample)
            if key not in cache:
                cache[key] = pipeline.prepare(sample, image_root, force_full)
            batch.append(cache[key])
        tape.zero_grads(pipeline.params.values())
        loss = pipeline.batch_loss(batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(step, value)
        tape.backward(loss)
        opt.step(pipeline.params, trainable_names)
        losses.append(value)
    return TrainingReport(
        stage=cfg.stage,
        losses=losses,
        wall_time_s=time.perf_counter() - start,
        final_checksum=params_checksum(pipeline.params),
    )


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_component: dict[str, float]
    entries: list[tuple[str, int, float, float, float]] = field(repr=False, default_factory=list)
    # entries: (param name, flat index, analytic, finite-difference, rel error)


def grad_check(pipeline: CaptionPipeline, sample: PreparedSample,
               epsilon: float = 1e-5, n_per_component: int = 10, seed: int = 0,
               gradient_hook=None) -> GradCheckResult:
    """Compare analytic gradients against central finite differences on
    randomly chosen parameters of every component.

    ``gradient_hook(name, grad) -> grad`` intercepts analytic gradients (a
    fault-injection seam for testing the checker itself).
    """
    rng = np.random.default_rng(seed)

    def loss_value() -> float:
        return float(pipeline.batch_loss([sample]).data)

    tape.zero_grads(pipeline.params.values())
    loss = pipeline.batch_loss([sample])
    tape.backward(loss)

    groups = pipeline.component_params()
    entries = []
    per_component: dict[str, float] = {}
    for component, names in groups.items():
        names = [n for n in names if pipeline.params[n].data.size > 0]
        if not names:
            continue
        worst = 0.0
        for _ in range(n_per_component):
            name = names[int(rng.integers(len(names)))]
            p = pipeline.params[name]
            idx = int(rng.integers(p.data.size))
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if gradient_hook is not None:
                grad = gradient_hook(name, grad)
            analytic = float(np.asarray(grad).flat[idx])
            original = p.data.flat[idx]
            p.data.flat[idx] = original + epsilon
            up = loss_value()
            p.data.flat[idx] = original - epsilon
            down = loss_value()
            p.data.flat[idx] = original
            fd = (up - down) / (2 * epsilon)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, rel)
            entries.append((name, idx, analytic, fd, rel))
        per_component[component] = worst
    return GradCheckResult(
        max_rel_error=max(per_component.values()),
        per_component=per_component,
        entries=entries,
    )
