"""Masked knowledge distillation with bootstrapped teachers, desk scale.

A student ViT reconstructs a frozen teacher's patch representations from
masked input; at stage breakpoints the teacher takes the trained student's
encoder weights and the student restarts. The package also ships the
representation-analysis toolkit (attention distances, SVD spectra, spectral
localization) and linear-probe/fine-tune evaluation.
"""

from .analysis import (AttentionDistanceReport, BoundingBox, SvdSpectrumReport,
                       attention_distance_report, avg_attention_distance, corloc, iou,
                       localize_report, performance_std, svd_spectrum_report,
                       topk_singular_percentage, unsup_localize)
from .checkpoint import load_checkpoint, load_run_state, load_store, save_checkpoint, \
    save_run_state, save_store
from .config import (AugmentConfig, DataConfig, DistillConfig, ModelConfig, MomentumPolicy,
                     OptimConfig, ProbeConfig, RunConfig)
from .data import (Batch, DatasetManifest, DatasetRecord, build_dataset, denormalize_image,
                   load_dataset, make_batches, normalize_image, random_resized_crop,
                   split_manifest, synthetic_blobs, synthetic_colors, synthetic_gratings)
from .errors import ConfigError, DataError, DegenerateFeaturesError, NumericsError
from .masking import (PatchMask, gather_visible, sample_mask, sample_mask_batch,
                      scatter_with_mask_tokens, visible_count)
from .model import (AttentionRecord, TokenSequence, forward_decoder, forward_encoder,
                    forward_teacher, patchify, pixel_targets, pos_embed_table,
                    project_to_teacher_dim, student_backward, student_forward, unpatchify)
from .objective import mkd_loss, mkd_loss_and_grad, neg_cosine, smooth_l1
from .pipeline import (PipelineResult, PipelineState, advance_breakpoint,
                       momentum_coefficient, new_pipeline_state, run_pipeline, stage_seed,
                       update_teacher)
from .probe import ProbeHead, evaluate_accuracy, pooled_features, softmax_cross_entropy, \
    train_probe
from .store import ParameterStore, init_model, param_shapes
from .teachers import (LiveTeacherProvider, PixelTargetProvider, PrecomputedTeacherProvider,
                       import_teacher, load_feature_archive, make_target_provider,
                       save_feature_archive)
from .trainer import (OptimizerState, adamw_step, clip_grads, layer_decay_factor, lr_at,
                      scale_lr, train_stage)

__version__ = "0.1.0"
