"""Crack segmentation with closed-loop adversarial feedback."""

from crackclf.adversary import Critic, CriticConfig, adversarial_loss, critic_features, mask_input, multiscale_l1
from crackclf.attention import (
    CBAMPlus,
    UCBAM,
    cbam_plus,
    channel_attention,
    global_attention_pooling,
    spatial_attention,
    ucbam,
)
from crackclf.complexity import ComplexityReport, complexity, count_flops, count_params
from crackclf.data_io import CrackDataset, DatasetManifest, synthetic_dataset
from crackclf.metrics import ConfusionCounts, MetricsReport, evaluate, ods, ois, prf, tolerant_confusion
from crackclf.segnet import SegNet, SegNetConfig, SideOutputs, predict
from crackclf.supervision import LossReport, LossWeights, class_balance, total_loss, weighted_bce
from crackclf.trainer import TrainConfig, TrainState, critic_step, fit, segmenter_step, wrap_with_clf

__version__ = "0.1.0"
