"""Language-guided few-shot semantic segmentation with pseudo-mask
distillation, distributed prototype supervision and complementary
correlation matching.
"""

__version__ = "0.1.0"

from .ccm import (AttentionConfig, CorrelationStack, cross_attention,
                  focused_prototype, full_correlation_map, roi_correlation_map)
from .core import (EmptyMaskError, FeatureMap, IoUReport, Mask,
                   ShapeMismatchError, ZeroPrototypeError, binarize,
                   cosine_map, masked_average_pool, mean_iou, pairwise_cosine,
                   pixel_accuracy, resample_mask)
from .dps import (ClusterConfig, InsufficientForegroundError,
                  SuperpixelCentroids, association_map, cluster_superpixels,
                  place_seeds, rectify_seeds)
from .episodes import (Episode, EpisodeSample, SegmentationDataset,
                       SyntheticSpec, build_episode, generate_synthetic,
                       sample_episodes, split_folds)
from .model import (BackboneConfig, Decoder, DecoderConfig, ToyConvBackbone,
                    bce_loss, build_backbone, load_checkpoint, save_checkpoint)
from .pipeline import (EpisodeContext, Pipeline, TrainConfig, Trainer,
                       VariantConfig, evaluate)
from .vlmd import (RecordedScorer, RefinerConfig, ScoreRequest, SourceConfig,
                   background_prototype_field, generate_initial_masks,
                   mix_foreground_prototypes, refine_masks)
