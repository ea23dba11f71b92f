"""Multi-stage, multi-scale time-domain target speaker extraction."""

from .dataset import Manifest, MixtureExample, generate_corpus
from .multistage import PipelineOutput, SpExPlusPlus, forward_pipeline
from .network import ModelConfig
from .signal_core import FusionWeights, Waveform, improvement, sdr, si_sdr
from .training import TrainConfig, fit

__all__ = ["FusionWeights", "Manifest", "MixtureExample", "ModelConfig", "PipelineOutput",
           "SpExPlusPlus", "TrainConfig", "Waveform", "fit", "forward_pipeline",
           "generate_corpus", "improvement", "sdr", "si_sdr"]
__version__ = "0.1.0"
