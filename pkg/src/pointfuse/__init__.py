"""Multi-view pointmap reconstruction at desk scale.

One forward pass maps N images to per-view pointmaps in two frames (each
camera's own and the first camera's), with confidences. Cameras are then
recovered by PnP on the global pointmaps, and local pointmaps can be aligned
onto the global frame for a denser reconstruction.
"""

from .errors import PointfuseError
from .evaluation import align_local_to_global, pose_metrics, reconstruction_metrics, weighted_umeyama
from .losses import LossConfig, loss_and_gradients, total_loss
from .model import ModelConfig, PredictionBundle, backward, forward, init_params
from .pose import RansacConfig, estimate_all_cameras
from .synthgen import make_sample, read_dataset, write_dataset
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
