"""Deep neural patchworks: hierarchical coarse-to-fine patch segmentation in numpy."""
from .errors import *  # noqa: F401,F403
from .geometry import AugmentParams, Patch
from .infer import InferConfig, IdentityModel, format_output, predict
from .model import ModelSpec, PatchworkModel, load_checkpoint, save_checkpoint
from .resample import PatchData, crop, finalize, reconstruct_identity, scatter
from .sampler import Scheme, resolve_scheme
from .train import BalanceSpec, TrainConfig, TrainingImage, fit
from .volume import LabelSpec, Volume, read_nifti, write_nifti

__version__ = "0.1.0"
