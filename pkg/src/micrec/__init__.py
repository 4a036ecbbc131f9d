"""Two-tower retrieval with cross-channel contrastive training (numpy)."""

from .channels import ChannelConfig, build_index, knn_query, retrieve_i2i, retrieve_u2i, retrieve_u2u
from .encoder import EncoderConfig, TwoTowerEncoder
from .evalkit import EvalReport, run_eval
from .objective import LossWeights, loss_total
from .trainer import TrainConfig, Trainer, TrainingData, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
