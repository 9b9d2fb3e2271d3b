"""Task-agnostic feature-mimicry adversarial attacks on small numpy vision models."""

from .attack import AttackConfig, AttackResult, MimicryAttack, mimic_loss, run_attack
from .campaign import CampaignSpec, ReportRecord, run_campaign
from .data import SyntheticSample, synth_dataset
from .extractors import InvertibleExtractor, PlainCnnExtractor
from .heads import ClassifierHead, QaHead, SeqDecoderHead, TaskOutput, outputs_match
from .metrics import MetricsReport, bleu, bleu_n, feature_mse, psnr, ssim
from .models import ModelBundle, train_bundle
from .ppm import read_ppm, write_ppm

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "MimicryAttack", "mimic_loss", "run_attack",
    "CampaignSpec", "ReportRecord", "run_campaign",
    "SyntheticSample", "synth_dataset",
    "InvertibleExtractor", "PlainCnnExtractor",
    "ClassifierHead", "QaHead", "SeqDecoderHead", "TaskOutput", "outputs_match",
    "MetricsReport", "bleu", "bleu_n", "feature_mse", "psnr", "ssim",
    "ModelBundle", "train_bundle",
    "read_ppm", "write_ppm",
]
