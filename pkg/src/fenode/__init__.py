"""Function encoders whose basis functions are neural ODEs."""

from .data import Normalizer, TrajectoryDataset
from .encoder import (Coefficients, EncoderModel, estimate_coefficients_ip, estimate_coefficients_ls,
                      gram_matrix, identify, init_model, integrate_basis, integrate_combined, predict_delta)
from .errors import (ConfigError, CorruptFileError, DivergenceError, FenodeError, NumericError,
                     PlanningError, ShapeError, VersionMismatchError)
from .integrate import IntegrationSpec, rk4_delta, rollout
from .io import load_dataset, load_model, save_dataset, save_model
from .systems import GenConfig, generate_datasets, make_family, quad2d_field, vdp_field
from .training import Arch, TrainConfig, train, train_residuals

__version__ = "0.1.0"
