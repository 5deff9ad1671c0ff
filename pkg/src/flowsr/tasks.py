"""Task conditions and the signal degradations that synthesize training pairs.

Four restoration tasks are supported: denoising, bandwidth extension, codec
artifact removal, and target speaker extraction (TSE). For the first three the
condition is simply the feature grid of the degraded signal; for TSE the first
seconds of a reference recording of the target speaker are prepended to the
mixture before analysis, and the corresponding region is trimmed from the
generated output afterwards.

The codec degradation is a mu-law quantizer standing in for a neural audio
codec: it produces comparable coding artifacts without an external model.
"""

import dataclasses
import enum

import numpy as np
from scipy.signal import firwin

from .audio import AudioSignal
from .masking import ConditionInput
from .spectral import CompressionParams, StftParams, features_from_audio


class TaskKind(enum.Enum):
    DENOISE = "denoise"
    BANDWIDTH_EXTEND = "bandwidth_extend"
    CODEC_RESTORE = "codec_restore"
    TARGET_SPEAKER_EXTRACT = "target_speaker_extract"


@dataclasses.dataclass
class TsePromptSpec:
    """Duration of the reference-speech prompt prepended to a TSE mixture."""

    prompt_seconds: float = 3.0
    sample_rate: int = 16000

    def __post_init__(self):
        # zero is allowed: a zero-length prompt makes prepend/trim the identity
        if self.prompt_seconds < 0:
            raise ValueError("prompt_seconds must be nonnegative")

    @property
    def prompt_samples(self) -> int:
        return int(round(self.prompt_seconds * self.sample_rate))


def build_condition(task: TaskKind, degraded: AudioSignal,
                    stft_params: StftParams, compression: CompressionParams,
                    reference: AudioSignal | None = None,
                    prompt: TsePromptSpec | None = None) -> ConditionInput:
    """Build the conditioning features for one utterance.

    Denoise / bandwidth-extend / codec-restore all condition on the degraded
    signal itself. TSE conditions on the prompt-trimmed reference concatenated
    before the mixture; `reference` is then required.
    """
    if task is TaskKind.TARGET_SPEAKER_EXTRACT:
        if reference is None:
            raise ValueError("target speaker extraction requires a reference signal")
        if reference.sample_rate != degraded.sample_rate:
            raise ValueError(f"reference rate {reference.sample_rate} != "
                             f"mixture rate {degraded.sample_rate}")
        prompt = prompt or TsePromptSpec(sample_rate=degraded.sample_rate)
        audio = prepend_tse_prompt(degraded, reference, prompt)
    else:
        audio = degraded
    return ConditionInput(features_from_audio(audio, stft_params, compression),
                          is_null=False)


def prepend_tse_prompt(mixture: AudioSignal, reference: AudioSignal,
                       prompt: TsePromptSpec) -> AudioSignal:
    """Concatenate the first `prompt_seconds` of the reference before the mixture."""
    n = prompt.prompt_samples
    if len(reference) < n:
        raise ValueError(f"reference of {len(reference)} samples is shorter than "
                         f"the {n}-sample prompt")
    return AudioSignal(np.concatenate([reference.samples[:n], mixture.samples]),
                       mixture.sample_rate)


def trim_tse_output(generated: AudioSignal, prompt: TsePromptSpec,
                    mixture_len: int) -> AudioSignal:
    """Drop the prompt region; return exactly `mixture_len` samples after it."""
    n = prompt.prompt_samples
    if len(generated) < n + mixture_len:
        raise ValueError(f"generated output of {len(generated)} samples cannot cover "
                         f"prompt ({n}) + mixture ({mixture_len})")
    return AudioSignal(generated.samples[n:n + mixture_len], generated.sample_rate)


def mix_at_snr(clean: AudioSignal, noise: AudioSignal, snr_db: float,
               rng: np.random.Generator) -> AudioSignal:
    """Add noise scaled to the requested SNR in dB.

    Noise longer than the clean signal is cropped at a random offset; shorter
    noise is looped. The gain g satisfies
    10 log10(||clean||^2 / ||g * noise||^2) = snr_db.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample-rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
    n = len(clean)
    if n == 0 or len(noise) == 0:
        raise ValueError("clean and noise must be nonempty")
    seg = noise.samples
    if len(seg) < n:
        seg = np.tile(seg, int(np.ceil(n / len(seg))))
    if len(seg) > n:
        offset = int(rng.integers(len(seg) - n + 1))
        seg = seg[offset:offset + n]
    clean_power = float(np.sum(clean.samples**2))
    noise_power = float(np.sum(seg**2))
    if clean_power <= 0.0 or noise_power <= 0.0:
        raise ValueError("clean and noise must have nonzero energy")
    gain = np.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    return AudioSignal(clean.samples + gain * seg, clean.sample_rate)


_RESAMPLE_TAPS = 513  # odd length keeps the filter linear-phase with integer delay
_KAISER_BETA = 8.6    # ~90 dB stopband


def _lowpass_taps(cutoff_norm: float) -> np.ndarray:
    # windowed-sinc lowpass; cutoff_norm relative to Nyquist
    return firwin(_RESAMPLE_TAPS, cutoff_norm, window=("kaiser", _KAISER_BETA))


def _filter_centered(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Linear-phase FIR with the group delay removed; same length as input."""
    full = np.convolve(x, taps, mode="full")
    delay = (len(taps) - 1) // 2
    return full[delay:delay + len(x)]


def bandwidth_reduce(signal: AudioSignal, factor: int) -> AudioSignal:
    """Decimate by `factor` and resample back, removing content above the
    reduced Nyquist.

    The anti-alias/reconstruction lowpass is a windowed-sinc with cutoff at
    0.9 of the reduced Nyquist, giving well over 40 dB of stopband rejection.
    Output has exactly the input length and sample rate.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"unsupported down-scaling factor {factor}")
    if factor == 1:
        return AudioSignal(signal.samples.copy(), signal.sample_rate)
    n = len(signal)
    cutoff = 0.9 / factor  # relative to the original Nyquist
    taps = _lowpass_taps(cutoff)
    low = _filter_centered(signal.samples, taps)
    decimated = low[::factor]
    upsampled = np.zeros(len(decimated) * factor)
    upsampled[::factor] = decimated
    restored = _filter_centered(upsampled, taps) * factor
    if len(restored) < n:
        restored = np.pad(restored, (0, n - len(restored)))
    return AudioSignal(restored[:n], signal.sample_rate)


def codec_degrade(signal: AudioSignal, bits_per_sample: int) -> AudioSignal:
    """Mu-law companded uniform quantization at the requested bit depth.

    A deterministic surrogate for low-bitrate codec artifacts: samples are
    clipped to [-1, 1], companded (mu = 255), quantized to a symmetric
    mid-tread grid of 2**bits - 1 levels, and expanded back.
    """
    if not 2 <= bits_per_sample <= 16:
        raise ValueError(f"bits_per_sample must lie in [2, 16], got {bits_per_sample}")
    mu = 255.0
    x = np.clip(signal.samples, -1.0, 1.0)
    companded = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    step = 2.0 / (2**bits_per_sample - 1)
    quantized = step * np.round(companded / step)
    expanded = np.sign(quantized) * ((1.0 + mu) ** np.abs(quantized) - 1.0) / mu
    return AudioSignal(expanded, signal.sample_rate)


def mix_two_speakers(a: AudioSignal, b: AudioSignal, rng: np.random.Generator,
                     ratio_db: float | None = None) -> tuple[AudioSignal, AudioSignal]:
    """Two-speaker mixture in min mode; returns (mixture, target).

    Both signals are cropped to the shorter length and summed with the
    interferer scaled so the target-to-interferer ratio is `ratio_db`,
    drawn uniformly from [-5, +5] dB when not given. The target is the
    cropped first signal.
    """
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample-rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    n = min(len(a), len(b))
    if n == 0:
        raise ValueError("speakers must be nonempty")
    target = a.samples[:n]
    interferer = b.samples[:n]
    target_power = float(np.sum(target**2))
    interferer_power = float(np.sum(interferer**2))
    if target_power <= 0.0 or interferer_power <= 0.0:
        raise ValueError("speaker signals must have nonzero energy")
    if ratio_db is None:
        ratio_db = float(rng.uniform(-5.0, 5.0))
    gain = np.sqrt(target_power / (interferer_power * 10.0 ** (ratio_db / 10.0)))
    mixture = AudioSignal(target + gain * interferer, a.sample_rate)
    return mixture, AudioSignal(target.copy(), a.sample_rate)
