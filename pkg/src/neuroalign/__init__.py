"""Multi-modal neural-to-image alignment: multi-granularity signal encoders,
a soft-routed mixture-of-experts projection into a shared image-embedding
space, contrastive/regression/diffusion-prior objectives, round-robin
multi-modality training, and a retrieval/RSA evaluation suite.
"""

__version__ = "0.1.0"

from .data import (ImageEmbedding, ModalityKind, NeuralSample, PairedDataset,
                   SyntheticSpec, concept_of, datasets_equal, generate_synthetic,
                   load_dataset, save_dataset, split_zero_shot)
from .encoder import (EncoderConfig, EncoderOutput, GranularityTokens,
                      SignalEncoder, patch_multi_granularity)
from .errors import (ConfigurationError, FormatError, IntegrityError,
                     NeuroalignError, NormalizationError, NotFittedError,
                     NumericsError, StageOrderError, ValidationError)
from .evalsuite import (ConceptSpace, RetrievalReport, RSMReport,
                        collapse_by_stimulus, export_embedding_map,
                        forward_backward_retrieval, kway_retrieval,
                        render_retrieval_table, retrieval_report, rsa)
from .model import AlignmentModel, EmbeddedSplit
from .objectives import (BlurDifferencePerceptual, LossConfig, ToyLinearDecoder,
                         compound_loss, lowlevel_loss, mse_loss, softclip_loss)
from .prior import (ConditionalDenoiser, DiffusionPrior, PriorConfig,
                    prior_loss, sample_prior)
from .projector import MoEConfig, MoEProjector, RoutingWeights
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainResult, fit_prior, staged_train, train

__all__ = [
    "__version__",
    # data
    "ModalityKind", "NeuralSample", "ImageEmbedding", "PairedDataset",
    "SyntheticSpec", "concept_of", "generate_synthetic", "split_zero_shot",
    "save_dataset", "load_dataset", "datasets_equal",
    # encoder
    "EncoderConfig", "EncoderOutput", "GranularityTokens", "SignalEncoder",
    "patch_multi_granularity",
    # projector
    "MoEConfig", "MoEProjector", "RoutingWeights",
    # objectives
    "LossConfig", "softclip_loss", "mse_loss", "compound_loss", "lowlevel_loss",
    "ToyLinearDecoder", "BlurDifferencePerceptual",
    # prior
    "PriorConfig", "ConditionalDenoiser", "DiffusionPrior", "prior_loss",
    "sample_prior",
    # model / checkpoint / trainer
    "AlignmentModel", "EmbeddedSplit", "Checkpoint", "save_checkpoint",
    "load_checkpoint", "TrainConfig", "TrainResult", "train", "staged_train",
    "fit_prior",
    # evaluation
    "kway_retrieval", "RetrievalReport", "retrieval_report",
    "render_retrieval_table", "forward_backward_retrieval", "ConceptSpace",
    "collapse_by_stimulus", "RSMReport", "rsa", "export_embedding_map",
    # errors
    "NeuroalignError", "ValidationError", "FormatError", "IntegrityError",
    "ConfigurationError", "NormalizationError", "NumericsError",
    "NotFittedError", "StageOrderError",
]
