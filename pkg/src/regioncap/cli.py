"""Command-line entry point: train / caption / evaluate / judge / stats.

Every subcommand writes a run manifest (command, config, seed, git-style
content hashes of its inputs) into the output directory before any output,
and uses the shared exit-code convention: 0 success, 1 partial failure
(e.g. unparsed judge verdicts), 2 usage or configuration errors.

The training config file is JSON::

    {
      "pipeline": {"encoder": {...}, "decoder": {...}, "adapter": {...},
                   "fusion": "channel", "referral": "mask"},
      "sources": {"llava_pretrain": "pretrain.jsonl",
                  "compositioncap": "cc.jsonl", ...},
      "image_root": ".",
      "stages": {"1": {"steps": 30, "learning_rate": 1e-3, "batch_size": 8,
                        "seed": 0, "weight_decay": 0.0}, "2": {...}, "3": {...}}
    }

Relative paths inside a config resolve against the config file's directory.
Prediction files are JSONL ``{"id": ..., "caption": ...}``; for dataset-joined
commands (judge) the id of a dataset record is its 0-based line ordinal.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import (ATTRIBUTE_NAMES, IngestionError, TemplateError, build_instruction,
                   dataset_stats, load_image, load_samples, mask_from_png,
                   stage_mixture)
from .decoder import DecodeParams, VocabError
from .errors import ConfigError, ShapeError
from .geometry import BinaryMask, MalformedEncodingError, RunLengthEncoding, decode_rle, resize_mask
from .judge import HttpJudgeClient, JudgeRequest, MockJudgeClient, judge_run, render_judge_image
from .metrics import (AlignmentError, EmptyEvalError, EvalPair, bert_score, bleu4,
                      cider, meteor, rouge_l)
from .pipeline import CaptionPipeline, PipelineConfig, vocabulary_for_samples
from .training import StageConfig, TrainingError, run_stage

USAGE_ERROR = 2
PARTIAL_FAILURE = 1

METRIC_FUNCS = {
    "bleu4": bleu4,
    "rouge_l": rouge_l,
    "meteor": meteor,
    "cider": cider,
    "bert_score": bert_score,
}


def git_blob_sha1(path: Path) -> str:
    data = path.read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    out_dir: Path
    inputs: dict[str, str]
    started_at: str
    finished_at: str | None = None

    @classmethod
    def start(cls, command: str, out_dir: Path, inputs: list[Path],
              config: str | None = None, seed: int | None = None) -> "RunManifest":
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = cls(
            command=command,
            config=config,
            seed=seed,
            out_dir=out_dir,
            # input paths are stored relative to the manifest's directory
            inputs={
                os.path.relpath(p, out_dir): git_blob_sha1(Path(p))
                for p in inputs if Path(p).is_file()
            },
            started_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        )
        manifest.write()
        return manifest

    def write(self) -> None:
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    def finish(self) -> None:
        self.finished_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.write()


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return USAGE_ERROR


def _load_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# train ----------------------------------------------------------------

def _load_run_config(path: Path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    base = path.parent
    cfg["image_root"] = str(base / cfg.get("image_root", "."))
    cfg["sources"] = {k: str(base / v) for k, v in cfg.get("sources", {}).items()}
    return cfg

def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        return _fail(f"config not found: {config_path}")
    run_cfg = _load_run_config(config_path)
    stage = args.stage
    stage_opts = run_cfg.get("stages", {}).get(str(stage))
    if stage_opts is None:
        return _fail(f"config has no settings for stage {stage}")

    out_dir = Path(args.out)
    prior = out_dir / f"stage{stage - 1}" / "checkpoint.npz"
    if stage > 1 and not prior.is_file():
        return _fail(f"stage {stage} needs the stage {stage - 1} checkpoint at {prior}")

    source_paths = {name: Path(p) for name, p in run_cfg["sources"].items()}
    missing = [str(p) for p in source_paths.values() if not p.is_file()]
    if missing:
        return _fail(f"missing source files: {missing}")

    registry = {}
    for name, p in source_paths.items():
        result = load_samples(p)
        if result.errors:
            return _fail(f"source {name}: {result.errors[0]}")
        registry[name] = result.samples

    stage_dir = out_dir / f"stage{stage}"
    manifest = RunManifest.start(
        f"train --stage {stage}", stage_dir,
        [config_path, *source_paths.values()],
        config=str(config_path), seed=args.seed,
    )

    try:
        if stage == 1:
            pipeline = CaptionPipeline(
                PipelineConfig.from_dict(run_cfg.get("pipeline", {})),
                vocabulary_for_samples(registry.values()),
            )
        else:
            pipeline, _ = CaptionPipeline.load_checkpoint(prior)
        stage_cfg = StageConfig(
            stage=stage,
            data=stage_mixture(stage, registry),
            steps=int(stage_opts["steps"]),
            learning_rate=float(stage_opts.get("learning_rate", 1e-3)),
            batch_size=int(stage_opts.get("batch_size", 8)),
            seed=int(args.seed if args.seed is not None else stage_opts.get("seed", 0)),
            weight_decay=float(stage_opts.get("weight_decay", 0.0)),
        )
        report = run_stage(pipeline, stage_cfg, registry, run_cfg["image_root"])
    except (ConfigError, VocabError) as exc:
        return _fail(str(exc))
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return PARTIAL_FAILURE

    pipeline.save_checkpoint(stage_dir / "checkpoint.npz",
                             rng_state={"seed": stage_cfg.seed, "steps": stage_cfg.steps})
    with open(stage_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    manifest.finish()
    last = report.losses[-1] if report.losses else float("nan")
    print(f"stage {stage}: {len(report.losses)} steps, final loss {last:.4f}, "
          f"checkpoint {stage_dir / 'checkpoint.npz'}")
    return 0


# caption ----------------------------------------------------------------

def _read_mask(path: Path) -> BinaryMask:
    if path.suffix.lower() == ".png":
        return mask_from_png(path)
    with open(path) as fh:
        return decode_rle(RunLengthEncoding.from_json(json.load(fh)))


def cmd_caption(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        return _fail(f"checkpoint not found: {checkpoint}")
    task = args.task
    try:
        attribute = int(args.attribute) if args.attribute is not None else None
        instruction = build_instruction(task, attribute)
    except (TemplateError, ValueError) as exc:
        return _fail(str(exc))
    if task in ("AARC", "RDC") and args.mask is None:
        return _fail(f"task {task} needs --mask")

    pipeline, _ = CaptionPipeline.load_checkpoint(checkpoint)
    lr = pipeline.cfg.encoder.lr_size
    try:
        if args.mask is not None:
            mask = resize_mask(_read_mask(Path(args.mask)), lr, lr)
        else:
            mask = BinaryMask.ones(lr, lr)
        lr_img = load_image(args.image, lr)
        hr_img = load_image(args.image, pipeline.cfg.encoder.hr_size)
    except (FileNotFoundError, MalformedEncodingError) as exc:
        return _fail(str(exc))
    decode = DecodeParams(max_new_tokens=args.max_new_tokens, mode=args.decode,
                          temperature=args.temperature, seed=args.seed or 0)
    print(pipeline.caption(lr_img, hr_img, mask, instruction, decode))
    return 0


# evaluate ----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    pred_path, ref_path = Path(args.predictions), Path(args.references)
    for p in (pred_path, ref_path):
        if not p.is_file():
            return _fail(f"file not found: {p}")
    predictions = {str(r["id"]): r["caption"] for r in _load_jsonl(pred_path)}
    references = {str(r["id"]): r["references"] for r in _load_jsonl(ref_path)}
    missing_refs = sorted(set(predictions) - set(references))
    missing_preds = sorted(set(references) - set(predictions))
    if missing_refs or missing_preds:
        return _fail(
            f"id mismatch: predictions without references {missing_refs}; "
            f"references without predictions {missing_preds}"
        )
    metric_names = [m for m in (args.metrics or "").split(",") if m]
    unknown = [m for m in metric_names if m not in METRIC_FUNCS]
    if unknown:
        return _fail(f"unknown metrics {unknown}; available: {sorted(METRIC_FUNCS)}")

    out_dir = Path(args.out)
    manifest = RunManifest.start("evaluate", out_dir, [pred_path, ref_path],
                                 seed=args.seed)
    pairs = [EvalPair(i, predictions[i], tuple(references[i])) for i in predictions]
    reports = {}
    for name in metric_names:
        try:
            report = METRIC_FUNCS[name](pairs)
        except (EmptyEvalError, ConfigError) as exc:
            return _fail(f"{name}: {exc}")
        reports[name] = report.to_dict()
        score = report.corpus_score
        print(f"{name}: {'skipped' if score is None else f'{score:.6f}'}")
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(reports, fh, indent=2)
        fh.write("\n")
    manifest.finish()
    return 0


# stats ----------------------------------------------------------------

def _plot_bar(path, labels, values, title, rotate=False):
    fig, ax = plt.subplots(figsize=(10, 4))
    if len(labels):
        ax.bar(range(len(labels)), values)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60 if rotate else 0, ha="right" if rotate else "center",
                           fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_stats(args) -> int:
    dataset_path = Path(args.dataset)
    if not dataset_path.is_file():
        return _fail(f"dataset not found: {dataset_path}")
    result = load_samples(dataset_path)
    if result.errors:
        for err in result.errors:
            print(f"error: {err}", file=sys.stderr)
        return USAGE_ERROR
    out_dir = Path(args.out)
    manifest = RunManifest.start("stats", out_dir, [dataset_path])
    stats = dataset_stats(result.samples, mask_bins=args.mask_bins)
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2)
        fh.write("\n")

    total_attr = sum(stats.attribute_counts.values())
    attr_labels = [ATTRIBUTE_NAMES[i] for i in sorted(ATTRIBUTE_NAMES)]
    attr_props = [
        stats.attribute_counts.get(i, 0) / total_attr if total_attr else 0.0
        for i in sorted(ATTRIBUTE_NAMES)
    ]
    _plot_bar(out_dir / "attributes.png", attr_labels, attr_props,
              "Attribute proportions", rotate=True)

    res_items = sorted(stats.resolution_counts.items())
    _plot_bar(out_dir / "resolutions.png", [k for k, _ in res_items],
              [v for _, v in res_items], "Image resolutions", rotate=True)

    per_image = sorted(stats.entities_per_image.values())
    fig, ax = plt.subplots(figsize=(6, 4))
    if per_image:
        ax.hist(per_image, bins=range(1, max(per_image) + 2))
    ax.set_title("Entities per image")
    fig.tight_layout()
    fig.savefig(out_dir / "entities.png", dpi=110)
    plt.close(fig)

    centers = 0.5 * (np.array(stats.mask_ratio_edges[:-1]) + np.array(stats.mask_ratio_edges[1:]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, stats.mask_ratio_counts, width=centers[1] - centers[0] if len(centers) > 1 else 0.05)
    ax.set_title("Mask area ratio")
    ax.set_xlabel("mask area / image area")
    fig.tight_layout()
    fig.savefig(out_dir / "mask_ratio.png", dpi=110)
    plt.close(fig)

    manifest.finish()
    print(f"stats for {stats.n_captions} records written to {out_dir}")
    return 0


# judge ----------------------------------------------------------------

def _judge_client(endpoint_cfg: dict):
    kind = endpoint_cfg.get("type", "http")
    if kind == "mock":
        return MockJudgeClient(endpoint_cfg.get("script", []))
    if kind == "http":
        return HttpJudgeClient(endpoint_cfg["url"], endpoint_cfg.get("model", "judge"))
    raise ConfigError(f"unknown judge endpoint type {kind!r}")


def cmd_judge(args) -> int:
    dataset_path, pred_path = Path(args.dataset), Path(args.predictions)
    endpoint_path = Path(args.endpoint)
    for p in (dataset_path, pred_path, endpoint_path):
        if not p.is_file():
            return _fail(f"file not found: {p}")
    result = load_samples(dataset_path)
    if result.errors:
        return _fail(str(result.errors[0]))
    predictions = {str(r["id"]): r["caption"] for r in _load_jsonl(pred_path)}
    with open(endpoint_path) as fh:
        endpoint_cfg = json.load(fh)
    try:
        client = _judge_client(endpoint_cfg)
    except (ConfigError, KeyError) as exc:
        return _fail(f"bad endpoint config: {exc}")

    image_root = Path(args.image_root) if args.image_root else dataset_path.parent
    requests_ = []
    for ordinal, sample in enumerate(result.samples):
        sid = str(ordinal)
        if sid not in predictions or sample.task != "AARC":
            continue
        mask = decode_rle(sample.mask) if sample.mask is not None else None
        image = render_judge_image(image_root / sample.image, mask)
        requests_.append(JudgeRequest(
            sample_id=sid,
            image=image,
            prediction=predictions[sid],
            reference=sample.caption,
            attribute=ATTRIBUTE_NAMES[sample.attribute],
        ))

    out_dir = Path(args.out)
    manifest = RunManifest.start("judge", out_dir,
                                 [dataset_path, pred_path, endpoint_path],
                                 seed=None)
    run = judge_run(requests_, client, concurrency=args.concurrency,
                    retries=args.retries)
    with open(out_dir / "verdicts.jsonl", "w") as fh:
        for v in run.verdicts:
            fh.write(json.dumps(v.to_json_obj()) + "\n")
    with open(out_dir / "judge_summary.json", "w") as fh:
        json.dump(run.to_dict(), fh, indent=2)
        fh.write("\n")
    manifest.finish()
    acc = "null" if run.accuracy is None else f"{run.accuracy:.6f}"
    print(f"accuracy: {acc} (parsed {run.parsed}, unparsed {run.unparsed}, "
          f"transport failures {run.transport_failures})")
    return PARTIAL_FAILURE if (run.unparsed or run.transport_failures) else 0


# parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regioncap",
        description="Mask-referred compositional region captioning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption a region of an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", default=None, help="mask PNG (255=set) or RLE JSON")
    p.add_argument("--task", required=True, choices=("AARC", "RDC", "CGIC"))
    p.add_argument("--attribute", default=None, help="attribute id 1-18 (AARC)")
    p.add_argument("--decode", default="greedy", choices=("greedy", "sample"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--metrics", default="bleu4,rouge_l,meteor,cider")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="dataset statistics and figures")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-bins", type=int, default=20)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("judge", help="run the binary attribute judge")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--endpoint", required=True, help="endpoint config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--image-root", default=None)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--retries", type=int, default=2)
    p.set_defaults(func=cmd_judge)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, TemplateError, IngestionError,
            AlignmentError, VocabError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
