"""Desk-scale speaker identification toolkit.

From-scratch pipeline: WAV decoding, silence trimming, loop extension,
mel-spectrogram features at three image geometries, a VGG-style embedding
network with global average pooling, and softmax/CosFace/ArcFace
classification heads with exact gradients.
"""

from .audio import AudioClip, TrimPolicy, decode_wav, encode_wav, loop_to_duration, trim_silence
from .dataset import Manifest, ManifestEntry, SynthSpec, build_manifest, generate_synthetic
from .features import (FeatureTensor, Geometry, MelConfig, StftConfig,
                       mel_filterbank, mel_spectrogram, stft_power, to_feature_tensor)
from .losses import LossConfig, arcface_logits, cosface_logits, loss_forward_backward, softmax_ce
from .network import EmbeddingNetwork, NetworkConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, EpochRecord, train
from .identification import EnrollmentDB, evaluate, identify_cosine, top1_accuracy

__version__ = "0.1.0"
