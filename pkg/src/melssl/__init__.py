"""Desk-scale masked-prediction speech pre-training on Mel spectrograms."""

from .audio import (AlignmentFile, Manifest, ManifestEntry, WaveBuffer,
                    read_wav, synth_corpus, write_wav)
from .autodiff import Value, backward, grad_check
from .cluster import Codebook, LabelSeq, PurityReport, assign, kmeans_fit, purity
from .encoder import (CeHead, Encoder, EncoderConfig, EncoderOutput, HubertHead,
                      MaskPolicy, apply_mask, loss_ce, loss_hubert)
from .features import (FeatureMatrix, MelConfig, NormStats, apply_norm,
                       compute_logmel, concat_frames, estimate_norm_stats)
from .macs import ArchSpec, MacsReport, arch_preset, macs_count
from .probes import ProbeConfig, estimate_f0, probe_train, weighted_sum
from .similarity import CcaConfig, cca_score, mel_cca, phone_cca
from .training import (Adam, Checkpoint, StagePlan, TrainConfig, extract_hidden,
                       make_targets, pretrain, relabel)

__version__ = "0.1.0"
