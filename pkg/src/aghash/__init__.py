"""Attention-guided hashing for image retrieval.

Two-stage pipeline: an attention network and a first hashing network are
trained jointly on pairwise labels with a tanh continuation of the sign
function; the resulting attention-guided binary codes then supervise a
second hashing network through a per-bit cross-entropy, which produces the
final codes for gallery and out-of-sample queries. Packed codes are ranked
by Hamming distance and scored with standard retrieval metrics.
"""

__version__ = "0.1.0"

from .attention import (AttentionConfig, AttentionNet, apply_attention,
                        attention_forward, normalize_map)
from .datasets import (Dataset, DatasetSplits, ImageSample, PairBatch, SplitSpec,
                       generate_synthetic, load_cifar10, load_dataset, pair_batches,
                       pairwise_label, save_dataset, synthetic_splits)
from .hashnet import (BetaSchedule, HashNet, HashNetConfig, atanh_activate,
                      encode_attention_guided, encode_final, hash_forward,
                      load_checkpoint, save_checkpoint, sign_quantize)
from .losses import (LossValue, attention_loss, guide_grad, guide_loss,
                     half_inner_product, semantic_loss, stage1_loss)
from .metrics import (EvalReport, average_precision, bit_correlation, evaluate_codes,
                      mean_average_precision, pr_curve, precision_at_hamming2,
                      precision_at_topn, relevance_matrix)
from .retrieval import (PackedCodes, RankingResult, hamming_distance, load_codes,
                        pack, rank_gallery, save_codes, unpack, within_radius)
from .trainer import (ModelConfig, TrainConfig, TrainState, TrainingDivergenceError,
                      extract_attention_codes, run_pipeline, train_stage1, train_stage2)
