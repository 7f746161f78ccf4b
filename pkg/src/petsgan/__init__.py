"""Single-image generation with an external-prior low-res generator, an
internal-prior patch-transfer restoration network and a multi-scale patch
discriminator."""

from .depnet import DepNetD, DepNetG, TrainingDivergence, collapse_penalty, positional_encoding
from .dipnet import AttentionMap, DIPNet, IrNet, PatchEmbedder, attention, fit_dipnet, patch_transfer, restore
from .eval_apps import EvalReport, RandomConvFeatures, diversity, hires_upscale, manipulate, sifid
from .external_prior import (
    DirectoryProvider,
    GeneratorProvider,
    LatentCode,
    LinearGenerator,
    SyntheticProvider,
    invert,
    perturb_and_sample,
)
from .imaging import ImageTensor, Rng, load_image, preprocess, resize, save_image
from .patch_disc import MultiScaleD, patch_adv_loss, receptive_fields
from .patchdist import (
    PatchConfig,
    PatchDistribution,
    PatchSet,
    extract_patches_1d,
    extract_patches_2d,
    patch_distance,
    verify_proposition1,
)
from .trainer import (
    Checkpoint,
    ModelBundle,
    RunConfig,
    generate_samples,
    load_checkpoint,
    preset,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
