"""16-bit PCM mono WAV reading and writing at the corpus sample rate."""

import wave
from pathlib import Path

import numpy as np

from .signal_core import Waveform

SAMPLE_RATE = 8000
_FULL_SCALE = 32768.0


class WavFormatError(ValueError):
    """Raised when a WAV file does not match PCM16 / mono / 8 kHz."""

    def __init__(self, path, field, found, expected):
        self.path = str(path)
        self.field = field
        super().__init__(f"{path}: unsupported {field} {found!r} (expected {expected!r})")


def save_wav(wave_: Waveform, path) -> None:
    if wave_.sample_rate != SAMPLE_RATE:
        raise WavFormatError(path, "sample_rate", wave_.sample_rate, SAMPLE_RATE)
    pcm = np.clip(np.round(wave_.samples * _FULL_SCALE), -32768, 32767).astype("<i2")
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    try:
        fh = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise WavFormatError(path, "container", str(exc), "RIFF/WAVE PCM") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise WavFormatError(path, "channels", fh.getnchannels(), 1)
        if fh.getsampwidth() != 2:
            raise WavFormatError(path, "sample_width", fh.getsampwidth(), 2)
        if fh.getframerate() != SAMPLE_RATE:
            raise WavFormatError(path, "sample_rate", fh.getframerate(), SAMPLE_RATE)
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _FULL_SCALE
    return Waveform(samples, SAMPLE_RATE)
