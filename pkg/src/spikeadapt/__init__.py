"""Conversion of ReLU networks to integrate-and-fire networks and their
online, unsupervised adaptation on corrupted input streams."""
from .adapt import AdaptConfig, adapt_batch, adapt_stream, bn_refresh, bptt_grad, online_pass, online_step_grad
from .convert import AnnModel, CalibrationProfile, calibrate_max_activations, convert
from .corrupt import CorruptionSpec, apply_corruption, cloud_field, corrupt_batch, diamond_square
from .detect import DetectionEntropy, WeightingParams, confidence_weight, detection_entropy, toy_head_forward
from .energy import EnergyProfile, count_ann_macs, count_snn_synops, estimate_energy
from .io import load_dataset, load_model, save_dataset, save_model
from .netcore import LayerSpec, SpikingNetwork, SurrogateConfig, forward

__version__ = "0.1.0"
