"""Mono audio container and 16-bit PCM WAV file I/O."""

import dataclasses

import numpy as np
from scipy.io import wavfile

PCM16_SCALE = 32767.0


@dataclasses.dataclass
class AudioSignal:
    """A mono waveform with its sample rate.

    Samples are stored as float64 with nominal range [-1, 1]. NaN/Inf
    samples and non-positive rates are rejected on construction.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM WAV file.

    Arbitrary sample rates are accepted and recorded on the returned
    signal. Multi-channel files are rejected.
    """
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels "
                         f"(shape {data.shape})")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    return AudioSignal(data.astype(np.float64) / PCM16_SCALE, rate)


def write_wav(path, signal: AudioSignal) -> None:
    """Write a signal as mono 16-bit PCM. Samples are clipped to [-1, 1]."""
    clipped = np.clip(signal.samples, -1.0, 1.0)
    pcm = np.round(clipped * PCM16_SCALE).astype(np.int16)
    wavfile.write(path, signal.sample_rate, pcm)
