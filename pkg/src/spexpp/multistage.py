"""K-stage extraction where each stage reuses the previous fused estimate.

Stage 1 is a plain single-stage extractor conditioned on the reference
utterance. From stage 2 on, the previous estimate strengthens the
utterance-level embedding (time-concatenated after the reference) and is
also encoded frame by frame as a second, time-aligned reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .network import (ModelConfig, SpeakerEncoder, SpeakerExtractor, SpeechDecoder,
                      SpeechEncoder)
from .signal_core import Waveform, fuse_signals


@dataclass
class StageOutput:
    per_scale_estimates: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    fused: torch.Tensor
    speaker_logits: torch.Tensor
    utt_embedding: torch.Tensor
    frame_embedding: Optional[torch.Tensor] = None


@dataclass
class PipelineOutput:
    stages: List[StageOutput]

    @property
    def final(self) -> torch.Tensor:
        return self.stages[-1].fused

    def __len__(self):
        return len(self.stages)


class SpExPlusPlus(nn.Module):
    """Speech and speaker encoders are shared by all stages; each stage owns
    its extractor, decoder and fusion weights."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = SpeechEncoder(config)
        self.speaker_encoder = SpeakerEncoder(config)
        self.extractors = nn.ModuleList(SpeakerExtractor(config) for _ in range(config.num_stages))
        self.decoders = nn.ModuleList(SpeechDecoder(config) for _ in range(config.num_stages))
        self.fusion = nn.ParameterList(
            nn.Parameter(torch.tensor(config.fusion_init)) for _ in range(config.num_stages))

    @property
    def num_stages(self) -> int:
        return len(self.extractors)

    def fusion_weights(self) -> List[List[float]]:
        return [w.detach().cpu().tolist() for w in self.fusion]

    def forward(self, mixture: torch.Tensor, reference: torch.Tensor,
                num_stages: Optional[int] = None) -> PipelineOutput:
        return forward_pipeline(mixture, reference, self, num_stages)


def _as_batch(x, dtype) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = torch.as_tensor(x.samples)
    elif not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x))
    x = x.to(dtype)
    return x.unsqueeze(0) if x.dim() == 1 else x


def match_level(estimate: torch.Tensor, reference: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Rescale ``estimate`` to the RMS level of ``reference`` (per batch item).

    The SI-SDR objective leaves the output scale free, so a stage's estimate
    can drift in level; later stages see it at the reference's level.
    """
    ref_rms = reference.pow(2).mean(dim=-1, keepdim=True).sqrt()
    est_rms = estimate.pow(2).mean(dim=-1, keepdim=True).sqrt()
    return estimate * (ref_rms / (est_rms + eps))


def refine_references(reference: torch.Tensor, prev_estimate: torch.Tensor, model: SpExPlusPlus):
    """Utterance embedding of ``[reference, prev_estimate]`` and the frame-level
    encoding of ``prev_estimate`` alone.

    ``prev_estimate`` is level-matched to the reference first. Returns
    ``(utt_embedding, logits, frame_embedding)``.
    """
    prev_estimate = match_level(prev_estimate, reference)
    joined = torch.cat([reference, prev_estimate], dim=-1)
    utt, logits = model.speaker_encoder(model.encoder(joined))
    frame = model.encoder(prev_estimate).concat()
    return utt, logits, frame


def run_stage(k: int, mixture: torch.Tensor, reference: torch.Tensor,
              prev: Optional[StageOutput], model: SpExPlusPlus,
              mix_enc=None, first_utt=None) -> StageOutput:
    """Run stage ``k`` (1-based). ``mix_enc`` and ``first_utt`` are optional
    caches of the mixture encoding and the stage-1 speaker embedding."""
    if k < 1 or k > model.num_stages:
        raise ValueError(f"stage {k} out of range 1..{model.num_stages}")
    if (k == 1) != (prev is None):
        raise ValueError("stage 1 takes no previous output; later stages require one")
    cfg = model.config
    if mix_enc is None:
        mix_enc = model.encoder(mixture)

    frame = None
    if k == 1:
        utt, logits = first_utt if first_utt is not None else model.speaker_encoder(model.encoder(reference))
    else:
        if cfg.use_utt or cfg.use_frame:
            r_utt, r_logits, r_frame = refine_references(reference, prev.fused, model)
        if cfg.use_utt:
            utt, logits = r_utt, r_logits
        else:
            utt, logits = first_utt if first_utt is not None else model.speaker_encoder(model.encoder(reference))
        if cfg.use_frame:
            frame = r_frame
            if frame.shape[-1] != mix_enc.frame_count:
                raise ValueError(
                    f"frame embedding ({frame.shape[-1]} frames) misaligned with mixture "
                    f"encoding ({mix_enc.frame_count} frames)")

    masks = model.extractors[k - 1](mix_enc, utt, frame)
    estimates = model.decoders[k - 1](mix_enc, masks, mixture.shape[-1])
    fused = fuse_signals(estimates, model.fusion[k - 1])
    return StageOutput(tuple(estimates), fused, logits, utt, frame)


def forward_pipeline(mixture, reference, model: SpExPlusPlus,
                     num_stages: Optional[int] = None) -> PipelineOutput:
    """Run stages 1..K, feeding each fused estimate into the next stage."""
    dtype = next(model.parameters()).dtype
    mixture = _as_batch(mixture, dtype)
    reference = _as_batch(reference, dtype)
    if mixture.shape[0] != reference.shape[0]:
        raise ValueError(
            f"batch mismatch: {mixture.shape[0]} mixtures vs {reference.shape[0]} references")
    k_max = model.num_stages if num_stages is None else num_stages
    mix_enc = model.encoder(mixture)
    first_utt = model.speaker_encoder(model.encoder(reference))
    stages: List[StageOutput] = []
    prev = None
    for k in range(1, k_max + 1):
        prev = run_stage(k, mixture, reference, prev, model, mix_enc=mix_enc, first_utt=first_utt)
        stages.append(prev)
    return PipelineOutput(stages)
