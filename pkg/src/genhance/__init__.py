"""Self-supervised visual pre-training from generator-corrupted images.

A frozen discrete tokenizer plus a small trainable masked-token generator
corrupt input images by stochastic visual-token replacement; an enhancer
network (ViT or small CNN) is pre-trained on the corrupted images with either
a pixel-residual regression or a replaced-token-detection objective, then
evaluated by linear probing and fine-tuning.
"""

__version__ = "0.1.0"

from .backbones import (
    GeneratorConfig,
    MaskedTokenGenerator,
    MiniResNet,
    MiniResNetConfig,
    SharedStem,
    ViTConfig,
    VisionTransformer,
    build_backbone_pair,
    build_shared_stem,
)
from .corruption import (
    CorruptionConfig,
    CorruptionSample,
    GeneratorOutput,
    MaskSet,
    apply_mask,
    compose_corrupted,
    corrupt,
    corrupt_batch,
    corrupt_random_erase,
    generator_predict,
    mim_loss,
    replacement_flags,
    sample_mask_blockwise,
    sample_mask_random,
    sample_replacements,
)
from .data import LabeledDataset, augment, generate_shapes, iterate_batches, load_image_folder
from .evaluation import (
    FinetuneConfig,
    ProbeConfig,
    ProbeResult,
    finetune,
    linear_probe,
    revdet_metrics,
)
from .objectives import (
    NormalizedTarget,
    nonoverlap_normalize,
    normalize_target,
    respix_loss,
    revdet_loss,
    sliding_window_normalize,
)
from .tokenizer import (
    ImageTokenizer,
    TokenizerConfig,
    load_token_grid,
    load_tokenizer,
    save_token_grid,
    save_tokenizer,
    train_tokenizer,
)
from .training import (
    TrainConfig,
    joint_step,
    load_checkpoint,
    lr_at,
    pretrain,
    save_checkpoint,
)
