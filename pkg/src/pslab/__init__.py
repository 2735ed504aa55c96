"""Desk-scale photometric stereo lab.

Synthetic multi-light rendering, the classical least-squares baseline,
and a three-stage fusion network with gradient-masked training, all on a
small float64 autodiff core.
"""

from .autodiff import (
    BatchNormState,
    GradCheckReport,
    ParamGroup,
    Tensor,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    finite_diff_check,
    gelu,
    leaky_relu,
    set_max_pool,
    sigmoid,
)
from .dataio import ImageSet, Light, NormalMap, load_capture, save_capture
from .errors import ConfigError, DataError, NumericalError, PslabError
from .evaluation import EvalReport, angular_error_map, evaluate, render_error_map, summarize
from .l2solver import L2Solution, solve_l2
from .network import MsfConfig, MsfNet, StageOutputs, load_checkpoint, save_checkpoint
from .preprocess import normalize_observations
from .render import (
    Material,
    NoiseModel,
    Scene,
    make_paraboloid,
    make_sphere,
    make_wave,
    render_scene,
    sample_lights,
    scene_from_height,
    shade_pixel,
)
from .training import FreezeSchedule, TrainConfig, cosine_loss, default_schedule, staged_loss, train

__version__ = "0.1.0"
