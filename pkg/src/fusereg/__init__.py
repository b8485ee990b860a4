"""fusereg: multi-contrast MRI fusion and deformable registration."""

from .volume import (
    BrainMask,
    DisplacementField,
    LandmarkSet,
    MultiContrastStudy,
    Volume3D,
    brain_mask,
    histogram_match,
    znorm_brain,
)
from .io import (
    VolumeIOError,
    load_field,
    load_landmarks,
    load_volume,
    save_field,
    save_landmarks,
    save_volume,
)
from .edges import GaussianKernel3, SobelBank, edge_map, gaussian_blur3, gaussian_kernel3, sobel_bank, sobel_response
from .losses import LossReport, LossWeights, diffusion_loss, edge_loss, mse_loss, total_loss
from .fusion import FusionConfig, FusionPipeline, InceptionBlock3d, InceptionConfig, fuse_contrasts
from .backbone import BackboneConfig, DisplacementBackbone, init_params, predict_displacement
from .model import RegistrationCascade, build_cascade, init_parameters
from .warp import (
    AffineConfig,
    AffineRegistration,
    AffineTransform,
    affine_register,
    affine_to_field,
    compose_affine_after,
    transform_points,
    warp,
    warp_tensor,
)
from .metrics import CaseScore, jacobian_det, landmark_errors, neg_jacobian_fraction, summarize
from .synth import SyntheticCase, load_case_dir, make_synthetic_case, save_case
from .harness import (
    CasePair,
    Checkpoint,
    SuiteResult,
    TrainConfig,
    evaluate_suite,
    preprocess_pair,
    register_case,
    train,
)

__version__ = "0.1.0"
