"""Patch-based brain-lesion segmentation with small from-scratch CNNs."""
from .data import VolumeSet, generate_phantom, preprocess_volume, read_volume, write_volume
from .errors import NexusError
from .evaluation import evaluate, morph_cleanup, segment_volume
from .models import ARCHITECTURES, ModelConfig, build_model, check_dims, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"
