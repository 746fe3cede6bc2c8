"""fanfill: extends the lateral field of view of sector-scan ultrasound frames.

The pipeline: cone-mask geometry -> patient-level dataset handling ->
shrink-the-fan augmentation -> adversarial training of a mask-conditioned
U-Net -> compositing outpainter -> image metrics and paired area statistics.
"""

from fanfill.geometry import (
    APEX_BOTTOM,
    APEX_TOP,
    ConeSpec,
    DetectionError,
    cut_region_mask,
    detect_apex,
    make_cone_mask,
    shrink_cone,
)
from fanfill.data import Frame, FrameRecord, Manifest, build_manifest, load_frame, make_synthetic_dataset
from fanfill.augment import AugmentedSample, augment, sample_cut
from fanfill.networks import (
    Checkpoint,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from fanfill.losses import LossBundle, combined_g_loss, d_loss, g_adv_loss, lpips
from fanfill.training import TrainConfig, TrainingDiverged, fit, train_step
from fanfill.outpaint import batch_outpaint, outpaint
from fanfill.metrics import MetricReport, evaluate, fid, pixel_metrics, ssim
from fanfill.area_stats import (
    PairedAreaStudy,
    mask_area,
    permutation_test_paired,
    run_study,
    shapiro_wilk,
)

__version__ = "0.1.0"

__all__ = [
    "APEX_BOTTOM",
    "APEX_TOP",
    "AugmentedSample",
    "Checkpoint",
    "ConeSpec",
    "DetectionError",
    "Discriminator",
    "DiscriminatorConfig",
    "Frame",
    "FrameRecord",
    "Generator",
    "GeneratorConfig",
    "LossBundle",
    "Manifest",
    "MetricReport",
    "PairedAreaStudy",
    "TrainConfig",
    "TrainingDiverged",
    "augment",
    "batch_outpaint",
    "build_manifest",
    "combined_g_loss",
    "count_parameters",
    "cut_region_mask",
    "d_loss",
    "detect_apex",
    "evaluate",
    "fid",
    "fit",
    "g_adv_loss",
    "load_checkpoint",
    "load_frame",
    "lpips",
    "make_cone_mask",
    "make_synthetic_dataset",
    "mask_area",
    "outpaint",
    "permutation_test_paired",
    "pixel_metrics",
    "run_study",
    "sample_cut",
    "save_checkpoint",
    "shapiro_wilk",
    "shrink_cone",
    "ssim",
    "train_step",
    "__version__",
]
