"""Mask-referred compositional region captioning toolkit.

A numpy library covering the full pipeline: region geometry (masks, boxes,
run-length encoding), a mask-aware low-resolution encoder with two
high-resolution companions, channel-wise feature fusion with an adapter into
a small causal caption decoder, the three-stage training schedule, caption
metrics with independent-oracle validation, and the binary judge protocol.
"""

from .geometry import (BinaryMask, Box, RunLengthEncoding, decode_rle, encode_rle,
                       iou_boxes, iou_mask_box, mask_area_ratio, mask_to_bbox,
                       rasterize_box, resize_mask)
from .encoders import (ConvStackEncoder, EncoderConfig, FeatureMap, MaskAwareEncoder,
                       PatchTransformerEncoder, render_referral)
from .fusion import (Adapter, FusedFeatures, SelfAttentionFusion, adapt, fuse_channels,
                     fuse_sequence_append, interpolate_grid, project_mask_features)
from .decoder import (CaptionDecoder, DecodeParams, DecoderConfig, DecoderInput,
                      Vocabulary)
from .data import (ATTRIBUTE_NAMES, DatasetSpec, MixtureSampler, RegionCaptionSample,
                   StatsReport, build_instruction, dataset_stats, effective_mask,
                   load_samples, save_samples, stage_mixture)
from .pipeline import (AdapterConfig, CaptionPipeline, PipelineConfig, PreparedSample,
                       component_of, vocabulary_for_samples)
from .training import (AdamW, GradCheckResult, StageConfig, TrainingReport, freeze_plan,
                       grad_check, params_checksum, run_stage)
from .metrics import (CorpusDF, EvalPair, MetricReport, bert_score, bleu4,
                      build_corpus_df, cider, grounding_acc, meteor, rouge_l)
from .judge import (HttpJudgeClient, JudgeRequest, JudgeRunResult, MockJudgeClient,
                    Verdict, build_judge_prompt, judge_run, parse_verdict)

__version__ = "0.1.0"
