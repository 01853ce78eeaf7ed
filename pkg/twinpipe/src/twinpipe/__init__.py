"""Twin-pipe non-local CNN-GCN artery/vein classifier."""

from .data import PatchDataset, load_dataset, make_batch, pipe_node_ids
from .infer import infer_pipe, load_model
from .model import NonLocalBlock, PipeNet
from .train import TrainSettings, train_pipe

__version__ = "0.1.0"
