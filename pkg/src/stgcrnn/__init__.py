"""Graph-convolutional recurrent forecasting of signals on sensor graphs."""
from .config import RunConfig, load_config
from .data import GraphSignalSequence, WindowSpec, synthetic_generate
from .gconv import GConvFilter, GraphOperator, diffusion_gconv, spectral_gconv
from .graph import StationGraph, build_adjacency, laplacian, scale_laplacian, transition_set
from .metrics import evaluate, r_squared, rmse, sp_rmse
from .model import GCRNNModel, ModelConfig, count_parameters, forward
from .train import TrainConfig, fit, lr_schedule

__version__ = "0.1.0"
