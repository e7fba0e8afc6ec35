"""Quantized Fourier feature neural fields on a small numpy autodiff engine."""

from .autodiff import ContractError, ParamTensor, ShapeError, Tape, Var, zero_grads
from .checkpoint import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config, parse_config
from .encoding import (
    ConfigurationError,
    EncodedVector,
    EncodingConfig,
    FeatureBank,
    InvalidInputError,
    Variant,
    bank_shapes,
    bin_coords,
    encode,
    encode_on_tape,
    encode_with_jacobian,
    encoded_width,
    plane_lookup,
    positional_encode,
    qff_3d_encode,
    qff_lite_encode,
    qff_lite_lookup,
)
from .mlp import FieldModel, MlpConfig, count_params, mlp_forward
from .optim import Adam, ParamGroup, adam_step, make_task_groups
from .tasks import (
    Box,
    ImageTask,
    NumericalError,
    SdfTask,
    Sphere,
    Torus,
    TrainRun,
    bench_convergence,
    fit_image,
    fit_sdf,
    image_model,
    mse,
    psnr,
    render,
    sdf_model,
)

__version__ = "0.1.0"
