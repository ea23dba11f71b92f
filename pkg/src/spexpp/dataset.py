"""Synthetic speaker corpus: parametric harmonic voices, two-speaker mixtures,
noise / reverberation conditions, WAV + JSONL manifest persistence.

Everything is a pure function of integer seeds, so regenerating a corpus
with the same seed reproduces every file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .signal_core import Waveform, mix_at_snr, power
from .wavio import SAMPLE_RATE, load_wav, save_wav

logger = logging.getLogger(__name__)

CONDITIONS = ("clean", "noise", "reverb", "noise_reverb")
SPLITS = ("train", "dev", "test")
MANIFEST_FIELDS = ("mixture_path", "reference_path", "target_path",
                   "speaker_id", "condition", "snr_db", "split")

F0_RANGE = (80.0, 320.0)
NUM_HARMONICS = 40
SNR_RANGE = (0.0, 5.0)
NOISE_SNR_RANGE = (0.0, 10.0)
RT60_RANGE = (0.1, 0.4)
UTTERANCE_F0_SPREAD = 0.08
UTTERANCE_TIMBRE_SPREAD = 0.3
_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0: float
    harmonic_gains: tuple
    spectral_tilt: float  # dB per octave
    jitter: float


def _formant_gains(f0: float, formants, bandwidths) -> tuple:
    freqs = f0 * np.arange(1, NUM_HARMONICS + 1)
    env = np.full(NUM_HARMONICS, 0.05)
    for fc, bw in zip(formants, bandwidths):
        env += np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    return tuple(float(g) for g in env / env.max())


def make_speaker(speaker_id: int, corpus_seed: int) -> SpeakerProfile:
    """Deterministic voice for ``speaker_id``.

    Pitches follow a golden-ratio sequence in log-frequency so that any small
    set of consecutive ids is spread over the whole range. Harmonic gains
    sample a three-formant envelope at the speaker's base pitch.
    """
    offset = np.random.default_rng([corpus_seed, 7919]).random()
    u = (offset + speaker_id * _GOLDEN) % 1.0
    f0 = F0_RANGE[0] * (F0_RANGE[1] / F0_RANGE[0]) ** u
    rng = np.random.default_rng([corpus_seed, speaker_id, 1])
    formants = (rng.uniform(300, 900), rng.uniform(1000, 2000), rng.uniform(2200, 3400))
    bandwidths = rng.uniform(80, 250, 3)
    return SpeakerProfile(
        speaker_id=int(speaker_id),
        f0=float(f0),
        harmonic_gains=_formant_gains(f0, formants, bandwidths),
        spectral_tilt=float(rng.uniform(-6.0, -2.0)),
        jitter=float(rng.uniform(0.005, 0.02)),
    )


def _syllable_envelope(n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.05) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.30) * sr)
        seg = np.hanning(length) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, pos + length)
        env[pos:end] = seg[:end - pos]
        gap = rng.uniform(0.2, 0.45) if rng.random() < 0.15 else rng.uniform(0.02, 0.12)
        pos = end + int(gap * sr)
    return env


def render_utterance(profile: SpeakerProfile, duration_s: float, utterance_seed: int,
                     sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Harmonic 'speech' with intonation, jitter, syllables and pauses."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng([profile.speaker_id, int(profile.f0 * 1000), utterance_seed])
    t = np.arange(n) / sample_rate

    # slow intonation contour: control points every 250 ms
    knots = np.arange(0.0, duration_s + 0.5, 0.25)
    contour = np.interp(t, knots, rng.normal(0.0, 0.05, len(knots)))
    jitter = np.convolve(rng.normal(0.0, profile.jitter, n), np.ones(40) / np.sqrt(40), "same")
    # each utterance sits at its own pitch around the speaker's base f0
    base = profile.f0 * np.exp(rng.normal(0.0, UTTERANCE_F0_SPREAD))
    f0_t = base * np.exp(contour + jitter)
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate

    # smooth per-utterance log-gain perturbation across harmonics
    harmonics = np.arange(1, len(profile.harmonic_gains) + 1)
    timbre = np.exp(np.interp(harmonics, np.linspace(1, len(harmonics), 6),
                              rng.normal(0.0, UTTERANCE_TIMBRE_SPREAD, 6)))

    nyquist = 0.5 * sample_rate
    voiced = np.zeros(n)
    for h, gain in enumerate(profile.harmonic_gains, start=1):
        if h * base * 1.15 >= nyquist * 0.95:
            break
        amp = gain * timbre[h - 1] * 10.0 ** (profile.spectral_tilt * np.log2(h) / 20.0)
        voiced += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    env = _syllable_envelope(n, rng, sample_rate)
    breath = 0.02 * rng.standard_normal(n) * np.max(np.abs(voiced))
    signal = (voiced + breath) * env
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal *= rng.uniform(0.5, 0.9) / peak
    return Waveform(signal, sample_rate)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(len(spectrum), dtype=np.float64)
    freqs[0] = 1.0
    noise = np.fft.irfft(spectrum / np.sqrt(freqs), n)
    return noise / np.sqrt(np.mean(noise ** 2))


def exponential_ir(rt60: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                   drr_db: float = 3.0) -> np.ndarray:
    """Unit direct path followed by an exponentially decaying noise tail.

    The tail decays by 60 dB over ``rt60`` seconds and is scaled so that
    direct-to-reverberant energy ratio equals ``drr_db``.
    """
    length = max(2, int(rt60 * sample_rate))
    t = np.arange(1, length) / sample_rate
    tail = rng.standard_normal(length - 1) * 10.0 ** (-3.0 * t / rt60)
    tail *= np.sqrt(10.0 ** (-drr_db / 10.0) / np.sum(tail ** 2))
    return np.concatenate([[1.0], tail])


@dataclass
class MixtureExample:
    mixture: Waveform
    reference: Waveform
    target: Waveform
    speaker_id: int
    condition: str = "clean"
    snr_db: float = 0.0
    # in-memory only: the components the mixture was built from
    interferer: Optional[Waveform] = None
    noise: Optional[Waveform] = None

    def __post_init__(self):
        if len(self.mixture) != len(self.target):
            raise ValueError(
                f"mixture ({len(self.mixture)}) and target ({len(self.target)}) lengths differ")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")


def simulate_mixture(target: Waveform, interferer: Waveform, reference: Waveform,
                     speaker_id: int, snr: float) -> MixtureExample:
    mixture, itf, tgt = mix_at_snr(target, interferer, snr, target.sample_rate)
    return MixtureExample(mixture, reference, tgt, speaker_id, "clean", float(snr), interferer=itf)


def add_noise(mixture: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Pink noise scaled so that mixture-to-noise ratio is ``snr`` dB."""
    noise = pink_noise(len(mixture), rng)
    return noise * np.sqrt(power(mixture) / (np.mean(noise ** 2) * 10.0 ** (snr / 10.0)))


def augment_condition(example: MixtureExample, condition: str, aug_seed: int,
                      noise_snr_db: Optional[float] = None,
                      rt60: Optional[float] = None) -> MixtureExample:
    """Derive a noisy and/or reverberant version of a clean example.

    Reverberation needs the separate sources (``example.interferer``); the
    returned target stays the dry, direct-path signal.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if example.condition != "clean":
        raise ValueError(f"can only augment clean examples, got {example.condition!r}")
    if condition == "clean":
        return example
    rng = np.random.default_rng([aug_seed, CONDITIONS.index(condition)])
    sr = example.mixture.sample_rate
    n = len(example.mixture)
    target = example.target.samples
    interferer = None if example.interferer is None else example.interferer.samples
    mixture = example.mixture.samples

    if condition in ("reverb", "noise_reverb"):
        if interferer is None:
            raise ValueError("reverberation requires the interferer signal")
        rt = rng.uniform(*RT60_RANGE) if rt60 is None else rt60
        target_rev = fftconvolve(target, exponential_ir(rt, rng, sr))[:n]
        interferer = fftconvolve(interferer, exponential_ir(rt, rng, sr))[:n]
        mixture = target_rev + interferer

    noise = None
    if condition in ("noise", "noise_reverb"):
        snr = rng.uniform(*NOISE_SNR_RANGE) if noise_snr_db is None else noise_snr_db
        noise = add_noise(mixture, snr, rng)
        mixture = mixture + noise

    peak = np.max(np.abs(mixture))
    gain = 1.0 / peak if peak > 1.0 else 1.0

    def wrap(x):
        return None if x is None else Waveform(gain * x, sr)

    return replace(example, mixture=wrap(mixture), target=wrap(target), condition=condition,
                   interferer=wrap(interferer), noise=wrap(noise))


# --------------------------------------------------------------------------
# Manifests


@dataclass
class ManifestRecord:
    mixture_path: str
    reference_path: str
    target_path: str
    speaker_id: int
    condition: str
    snr_db: float
    split: str

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_FIELDS})


@dataclass
class Manifest:
    split: str
    records: List[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                data = json.loads(line)
                missing = [k for k in MANIFEST_FIELDS if k not in data]
                if missing:
                    raise ValueError(f"{path}:{lineno}: missing fields {missing}")
                records.append(ManifestRecord(**{k: data[k] for k in MANIFEST_FIELDS}))
        split = records[0].split if records else path.stem
        return cls(split, records, path.parent)

    def speaker_ids(self) -> set:
        return {r.speaker_id for r in self.records}

    def filter(self, conditions: Sequence[str]) -> "Manifest":
        return Manifest(self.split, [r for r in self.records if r.condition in conditions], self.root)

    def load_example(self, index: int) -> MixtureExample:
        rec = self.records[index]
        return MixtureExample(
            mixture=load_wav(self.root / rec.mixture_path),
            reference=load_wav(self.root / rec.reference_path),
            target=load_wav(self.root / rec.target_path),
            speaker_id=rec.speaker_id,
            condition=rec.condition,
            snr_db=rec.snr_db,
        )


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# Corpus generation


def split_speakers(num_speakers: int, test_speakers: Optional[int] = None):
    """Train/dev share the first speakers; the last ``test_speakers`` are unseen."""
    n_test = max(2, num_speakers // 4) if test_speakers is None else test_speakers
    n_train = num_speakers - n_test
    if num_speakers < 4 or n_train < 2 or n_test < 2:
        raise ValueError(
            f"need at least 2 train and 2 test speakers for disjoint splits "
            f"(num_speakers={num_speakers}, test_speakers={n_test})")
    return list(range(n_train)), list(range(n_train, num_speakers))


def generate_corpus(num_speakers: int, utterances_per_speaker: int, corpus_seed: int, out_dir,
                    *, test_speakers: Optional[int] = None, num_train: int = 200,
                    num_dev: int = 40, num_test: int = 40, utterance_seconds: float = 2.0,
                    reference_seconds: float = 2.0,
                    conditions: Sequence[str] = ("clean",)) -> Dict[str, Manifest]:
    """Render a corpus and write ``<out_dir>/<split>/*.wav`` plus ``<split>.jsonl``.

    Train and dev mixtures use the training speakers (dev draws from a held-out
    quarter of each speaker's utterances); test mixtures use only the unseen
    speakers. Every clean mixture is written once per requested condition.
    """
    if utterances_per_speaker < 4:
        raise ValueError("utterances_per_speaker must be at least 4")
    for cond in conditions:
        if cond not in CONDITIONS:
            raise ValueError(f"unknown condition {cond!r}")
    train_spk, test_spk = split_speakers(num_speakers, test_speakers)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pool_seconds = max(utterance_seconds, reference_seconds)
    n_mix = int(round(utterance_seconds * SAMPLE_RATE))
    n_ref = int(round(reference_seconds * SAMPLE_RATE))
    profiles = {s: make_speaker(s, corpus_seed) for s in range(num_speakers)}
    pool = {s: [render_utterance(profiles[s], pool_seconds, corpus_seed * 100003 + u)
                for u in range(utterances_per_speaker)] for s in profiles}

    n_held = max(2, utterances_per_speaker // 4)
    everything = list(range(utterances_per_speaker))
    plan = {
        "train": (train_spk, everything[:-n_held], num_train),
        "dev": (train_spk, everything[-n_held:], num_dev),
        "test": (test_spk, everything, num_test),
    }

    manifests = {}
    for split_idx, split in enumerate(SPLITS):
        speakers, utt_ids, count = plan[split]
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        records = []
        for i in range(count):
            rng = np.random.default_rng([corpus_seed, split_idx, i])
            tgt_spk, itf_spk = rng.choice(speakers, size=2, replace=False)
            tgt_utt, ref_utt = rng.choice(utt_ids, size=2, replace=False)
            itf_utt = rng.choice(utt_ids)
            snr = float(rng.uniform(*SNR_RANGE))
            clean = simulate_mixture(
                Waveform(pool[tgt_spk][tgt_utt].samples[:n_mix]),
                Waveform(pool[itf_spk][itf_utt].samples[:n_mix]),
                Waveform(pool[tgt_spk][ref_utt].samples[:n_ref]),
                int(tgt_spk), snr)
            stem = f"{i:05d}"
            ref_name = f"{split}/{stem}_ref.wav"
            _write(clean.reference, out_dir / ref_name)
            for cond in conditions:
                aug_seed = int(rng.integers(2 ** 31))
                ex = augment_condition(clean, cond, aug_seed)
                mix_name = f"{split}/{stem}_{cond}_mix.wav"
                tgt_name = f"{split}/{stem}_{cond}_tgt.wav"
                _write(ex.mixture, out_dir / mix_name)
                _write(ex.target, out_dir / tgt_name)
                records.append(ManifestRecord(mix_name, ref_name, tgt_name, int(tgt_spk),
                                              cond, round(snr, 6), split))
        manifest = Manifest(split, records, out_dir)
        manifest.save(out_dir / f"{split}.jsonl")
        manifests[split] = manifest
        logger.info("%s: %d records, speakers %s", split, len(records), sorted(set(speakers)))
    return manifests


def _write(wave_: Waveform, path: Path) -> None:
    try:
        save_wav(wave_, path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc
