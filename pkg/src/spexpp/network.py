"""Single-stage building blocks: multi-scale speech encoder, speaker encoder,
TCN speaker extractor and multi-scale decoders.

All modules take batched tensors: waveforms are ``(batch, samples)`` and
feature maps ``(batch, channels, frames)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    filter_lengths: Tuple[int, int, int] = (20, 80, 160)
    encoder_channels: int = 64
    tcn_blocks_per_stack: int = 4
    tcn_stacks: int = 2
    tcn_channels: int = 128
    bottleneck_channels: int = 64
    tcn_kernel: int = 3
    resnet_blocks: Tuple[int, ...] = (32, 32, 64)
    embed_dim: int = 32
    num_speakers: int = 4
    num_stages: int = 2
    fusion_init: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    multitask_gamma: float = 0.5
    # ablation switches for stages k >= 2
    use_utt: bool = True
    use_frame: bool = True

    def __post_init__(self):
        self.filter_lengths = tuple(int(x) for x in self.filter_lengths)
        self.resnet_blocks = tuple(int(x) for x in self.resnet_blocks)
        self.fusion_init = tuple(float(x) for x in self.fusion_init)
        self.validate()

    def validate(self):
        if len(self.filter_lengths) != 3:
            raise ValueError("filter_lengths needs exactly three entries")
        l1, l2, l3 = self.filter_lengths
        if not l1 < l2 < l3:
            raise ValueError(f"filter lengths must increase, got {self.filter_lengths}")
        if l1 % 2:
            raise ValueError(f"L1 must be even (stride = L1/2), got {l1}")
        if l2 % (l1 // 2) or l3 % (l1 // 2):
            raise ValueError(f"L2 and L3 must be multiples of L1/2 = {l1 // 2}")
        counts = dict(encoder_channels=self.encoder_channels,
                      tcn_blocks_per_stack=self.tcn_blocks_per_stack,
                      tcn_stacks=self.tcn_stacks, tcn_channels=self.tcn_channels,
                      bottleneck_channels=self.bottleneck_channels, embed_dim=self.embed_dim,
                      num_speakers=self.num_speakers, num_stages=self.num_stages)
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not self.resnet_blocks or min(self.resnet_blocks) < 1:
            raise ValueError(f"resnet_blocks must be non-empty positive widths, got {self.resnet_blocks}")
        if len(self.fusion_init) != 3:
            raise ValueError("fusion_init needs exactly three weights")
        if self.tcn_kernel % 2 == 0:
            raise ValueError("tcn_kernel must be odd")

    @property
    def stride(self) -> int:
        return self.filter_lengths[0] // 2

    def frame_count(self, length: int) -> int:
        return (length - self.filter_lengths[0]) // self.stride + 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-size network: 2.5/10/20 ms filters at 8 kHz, 4x8 TCN blocks."""
        base = dict(filter_lengths=(20, 80, 160), encoder_channels=256, tcn_blocks_per_stack=8,
                    tcn_stacks=4, tcn_channels=512, bottleneck_channels=256,
                    resnet_blocks=(256, 256, 512), embed_dim=256, num_speakers=101,
                    num_stages=3)
        base.update(overrides)
        return cls(**base)


@dataclass
class MultiScaleEncoding:
    features: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    frame_stride: int

    @property
    def frame_count(self) -> int:
        return self.features[0].shape[-1]

    def concat(self) -> torch.Tensor:
        return torch.cat(self.features, dim=1)


class GlobalLayerNorm(nn.GroupNorm):
    """Normalise each example over (channels, frames)."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__(1, channels, eps=eps)


class SpeechEncoder(nn.Module):
    """Three parallel bias-free 1-D convolutions with a shared stride of L1/2.

    Longer filters see the input zero-padded on the right by ``L_i - L1``
    samples, which gives every scale the same frame count.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n = config.encoder_channels
        self.convs = nn.ModuleList(
            nn.Conv1d(1, n, length, stride=config.stride, bias=False)
            for length in config.filter_lengths)

    def forward(self, wave: torch.Tensor) -> MultiScaleEncoding:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        length = wave.shape[-1]
        l1 = self.config.filter_lengths[0]
        if length < self.config.filter_lengths[-1]:
            raise ValueError(
                f"input of {length} samples is shorter than the longest filter "
                f"({self.config.filter_lengths[-1]})")
        x = wave.unsqueeze(1)
        feats = []
        for conv, size in zip(self.convs, self.config.filter_lengths):
            feats.append(F.relu(conv(F.pad(x, (0, size - l1)))))
        return MultiScaleEncoding(tuple(feats), self.config.stride)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, 1)
        self.norm1 = GlobalLayerNorm(out_ch)
        self.act1 = nn.PReLU()
        self.conv2 = nn.Conv1d(out_ch, out_ch, 1)
        self.norm2 = GlobalLayerNorm(out_ch)
        self.shortcut = nn.Conv1d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()
        self.act2 = nn.PReLU()
        self.pool = nn.MaxPool1d(3, ceil_mode=True)

    def forward(self, x):
        y = self.norm2(self.conv2(self.act1(self.norm1(self.conv1(x)))))
        return self.pool(self.act2(y + self.shortcut(x)))


class SpeakerEncoder(nn.Module):
    """ResNet over concatenated scales, mean-pooled into one embedding.

    Returns ``(embedding, logits)``; the classifier head is shared by every
    stage that calls this encoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        in_ch = 3 * config.encoder_channels
        widths = config.resnet_blocks
        self.norm = GlobalLayerNorm(in_ch)
        self.proj = nn.Conv1d(in_ch, widths[0], 1)
        blocks = []
        prev = widths[0]
        for width in widths:
            blocks.append(ResBlock(prev, width))
            prev = width
        self.blocks = nn.Sequential(*blocks)
        self.embed = nn.Linear(prev, config.embed_dim)
        self.classifier = nn.Linear(config.embed_dim, config.num_speakers)

    def forward(self, enc: MultiScaleEncoding):
        x = self.blocks(self.proj(self.norm(enc.concat())))
        emb = self.embed(x.mean(dim=-1))
        return emb, self.classifier(emb)


class TCNBlock(nn.Module):
    """1x1 conv, PReLU, gLN, dilated depthwise conv, PReLU, gLN, 1x1 conv, residual.

    ``extra`` input channels (the repeated speaker embedding) enter the first
    1x1 conv only; the residual path carries the first ``channels`` inputs.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int, extra: int = 0):
        super().__init__()
        self.channels = channels
        self.inp = nn.Conv1d(channels + extra, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = GlobalLayerNorm(hidden)
        self.depthwise = nn.Conv1d(hidden, hidden, kernel, groups=hidden, dilation=dilation,
                                   padding=dilation * (kernel - 1) // 2)
        self.act2 = nn.PReLU()
        self.norm2 = GlobalLayerNorm(hidden)
        self.out = nn.Conv1d(hidden, channels, 1)

    def forward(self, x):
        y = self.norm1(self.act1(self.inp(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x[:, :self.channels] + self.out(y)


class SpeakerExtractor(nn.Module):
    """Estimate one non-negative mask per scale.

    Input is the channel concatenation of a frame-level reference (zeros when
    absent) and the mixture encoding; the utterance embedding is repeated
    over time and concatenated at the start of every TCN stack.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n3 = 3 * config.encoder_channels
        o = config.bottleneck_channels
        self.norm = GlobalLayerNorm(2 * n3)
        self.bottleneck = nn.Conv1d(2 * n3, o, 1)
        self.stacks = nn.ModuleList()
        for _ in range(config.tcn_stacks):
            self.stacks.append(nn.ModuleList(
                TCNBlock(o, config.tcn_channels, config.tcn_kernel, 2 ** b,
                         extra=config.embed_dim if b == 0 else 0)
                for b in range(config.tcn_blocks_per_stack)))
        self.mask_heads = nn.ModuleList(
            nn.Conv1d(o, config.encoder_channels, 1) for _ in range(3))

    def forward(self, mix_enc: MultiScaleEncoding, utt_emb: torch.Tensor,
                frame_emb: Optional[torch.Tensor] = None):
        mix = mix_enc.concat()
        if frame_emb is None:
            frame_emb = torch.zeros_like(mix)
        elif frame_emb.shape[-1] != mix.shape[-1]:
            raise ValueError(
                f"frame embedding has {frame_emb.shape[-1]} frames but the mixture "
                f"encoding has {mix.shape[-1]}")
        elif frame_emb.shape != mix.shape:
            raise ValueError(
                f"frame embedding shape {tuple(frame_emb.shape)} does not match mixture "
                f"encoding {tuple(mix.shape)}")
        x = self.bottleneck(self.norm(torch.cat([frame_emb, mix], dim=1)))
        cond = utt_emb.unsqueeze(-1).expand(-1, -1, x.shape[-1])
        for stack in self.stacks:
            x = stack[0](torch.cat([x, cond], dim=1))
            for block in stack[1:]:
                x = block(x)
        return tuple(F.relu(head(x)) for head in self.mask_heads)


class SpeechDecoder(nn.Module):
    """Per-scale bias-free transposed convolutions back to the waveform."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose1d(config.encoder_channels, 1, length, stride=config.stride,
                               bias=False)
            for length in config.filter_lengths)

    def forward(self, mix_enc: MultiScaleEncoding, masks: Sequence[torch.Tensor],
                original_length: int) -> List[torch.Tensor]:
        if len(masks) != 3:
            raise ValueError(f"expected three masks, got {len(masks)}")
        outputs = []
        for deconv, feat, mask in zip(self.deconvs, mix_enc.features, masks):
            if mask.shape != feat.shape:
                raise ValueError(
                    f"mask shape {tuple(mask.shape)} does not match encoding {tuple(feat.shape)}")
            wave = deconv(feat * mask).squeeze(1)
            if wave.shape[-1] >= original_length:
                wave = wave[..., :original_length]
            else:
                wave = F.pad(wave, (0, original_length - wave.shape[-1]))
            outputs.append(wave)
        return outputs
