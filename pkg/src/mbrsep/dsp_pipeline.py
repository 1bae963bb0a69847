"""Audio I/O, STFT analysis/synthesis, mel mapping and band/patch handling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.io.wavfile as wavfile

SAMPLE_RATE = 44100
N_BINS = 1025


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise AudioError("AudioClip holds mono samples only")
        if not np.isfinite(self.samples).all():
            raise AudioError("audio samples must be finite")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop: int = 512
    fft_size: int = 2048
    window: str = "hann"

    def __post_init__(self):
        if self.window != "hann":
            raise AudioError(f"unsupported window {self.window!r}")
        if self.hop > self.window_size:
            raise AudioError("hop must not exceed the window size")
        if self.fft_size < self.window_size:
            raise AudioError("fft_size must be >= window_size")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class Spectrogram:
    """Magnitude (frames x bins) with the optional phase it came with."""

    magnitude: np.ndarray
    phase: Optional[np.ndarray] = None
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.magnitude.ndim != 2 or self.magnitude.shape[1] != self.config.bins:
            raise AudioError(f"magnitude must be frames x {self.config.bins}, got {self.magnitude.shape}")
        if (self.magnitude < 0).any():
            raise AudioError("magnitudes must be non-negative")
        if self.phase is not None and self.phase.shape != self.magnitude.shape:
            raise AudioError("phase and magnitude shapes differ")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O

def load_audio(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file; stereo is averaged to mono."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: malformed or unsupported WAV: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        names = {np.dtype(np.uint8): "PCM8", np.dtype(np.int32): "PCM32/PCM24",
                 np.dtype(np.float64): "float64", np.dtype(np.int64): "PCM64"}
        raise AudioError(f"{path}: unsupported sample encoding {names.get(data.dtype, str(data.dtype))}")
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise AudioError(f"{path}: {samples.shape[1]} channels; only mono and stereo are supported")
        samples = samples.mean(axis=1)
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write mono IEEE float32."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


# ---------------------------------------------------------------------------
# STFT

def hann(n: int) -> np.ndarray:
    """Periodic Hann window; its hop n/4 overlap-add is exactly constant."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(length: int, config: StftConfig) -> int:
    return (length - config.window_size) // config.hop + 1


def stft(clip: AudioClip, config: StftConfig = StftConfig()) -> Spectrogram:
    x = clip.samples
    if len(x) < config.window_size:
        raise AudioError(f"clip has {len(x)} samples, need at least one window ({config.window_size})")
    n = n_frames_for(len(x), config)
    frames = np.lib.stride_tricks.sliding_window_view(x, config.window_size)[::config.hop][:n]
    spec = np.fft.rfft(frames * hann(config.window_size), n=config.fft_size, axis=1)
    return Spectrogram(np.abs(spec), np.angle(spec), config)


def istft(spec: Spectrogram, length: Optional[int] = None) -> AudioClip:
    """Weighted overlap-add, normalised by the summed squared window.

    Samples that no frame covers come out as zero.  ``length`` pads or trims
    the result.
    """
    if spec.phase is None:
        raise AudioError("istft needs phase")
    cfg = spec.config
    w = hann(cfg.window_size)
    frames = np.fft.irfft(spec.magnitude * np.exp(1j * spec.phase), n=cfg.fft_size, axis=1)[:, :cfg.window_size]
    total = (spec.n_frames - 1) * cfg.hop + cfg.window_size
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        s = i * cfg.hop
        out[s:s + cfg.window_size] += frame * w
        norm[s:s + cfg.window_size] += w * w
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    if length is not None:
        out = out[:length] if length <= total else np.pad(out, (0, length - total))
    return AudioClip(out)


# ---------------------------------------------------------------------------
# mel scale and bands

def mel(f):
    f = np.asarray(f, dtype=np.float64)
    if (f < 0).any():
        raise ValueError("mel() needs non-negative frequencies")
    out = 1125.0 * np.log1p(f / 700.0)
    return float(out) if out.ndim == 0 else out


def inv_mel(m):
    m = np.asarray(m, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("inv_mel() needs non-negative mel values")
    out = 700.0 * np.expm1(m / 1125.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BandSpec:
    """Half-open bin range [bin_from, bin_to) processed by one branch."""

    name: str
    bin_from: int
    bin_to: int
    stride_freq: int = 1

    def __post_init__(self):
        if not 0 <= self.bin_from < self.bin_to:
            raise ValueError(f"band {self.name}: invalid range [{self.bin_from}, {self.bin_to})")
        if self.stride_freq < 1:
            raise ValueError(f"band {self.name}: stride must be >= 1")

    @property
    def width(self) -> int:
        return self.bin_to - self.bin_from

    @property
    def strided_width(self) -> int:
        return -(-self.width // self.stride_freq)

    def hz(self, config: StftConfig = StftConfig(), sample_rate: int = SAMPLE_RATE) -> tuple[float, float]:
        """Band limits in Hz, ``bin * fs / fft_size``, capped at Nyquist."""
        step = sample_rate / config.fft_size
        nyquist = sample_rate / 2
        return (min(self.bin_from * step, nyquist), min(self.bin_to * step, nyquist))


def default_bands() -> list[BandSpec]:
    """The five overlapped bands a-e; band e is subsampled by 3 in frequency."""
    return [
        BandSpec("a", 0, 73),
        BandSpec("b", 26, 156),
        BandSpec("c", 73, 305),
        BandSpec("d", 221, 571),
        BandSpec("e", 305, 1025, stride_freq=3),
    ]


def mel_band_edges(k: int, f_lo: float, f_hi: float, bins: int = N_BINS,
                   sample_rate: int = SAMPLE_RATE) -> list[BandSpec]:
    """``k`` overlapping bands from ``k + 2`` mel-spaced points, filterbank style.

    Band ``i`` spans points ``i .. i + 2``.  For ``k == 1`` the single band
    covers the whole range.  Bin indices use ``round(f * (bins - 1) / nyquist)``
    and the upper edge is exclusive.
    """
    if k < 1:
        raise ValueError("need at least one band")
    if not 0 <= f_lo < f_hi:
        raise ValueError(f"degenerate frequency range [{f_lo}, {f_hi}]")
    nyquist = sample_rate / 2
    if f_hi > nyquist:
        raise ValueError(f"f_hi {f_hi} exceeds Nyquist {nyquist}")

    def to_bin(f):
        return int(round(f * (bins - 1) / nyquist))

    if k == 1:
        return [BandSpec("band0", to_bin(f_lo), min(to_bin(f_hi) + 1, bins))]
    points = inv_mel(np.linspace(mel(f_lo), mel(f_hi), k + 2))
    idx = [to_bin(f) for f in points]
    bands = []
    for i in range(k):
        lo, hi = idx[i], idx[i + 2]
        if hi <= lo:
            raise ValueError(f"band {i} collapses to an empty bin range; use fewer bands or more bins")
        # last band reaches the top bin inclusively
        bands.append(BandSpec(f"band{i}", lo, min(hi + (i == k - 1), bins)))
    return bands


def slice_bands(patch: np.ndarray, bands: Sequence[BandSpec]) -> list[np.ndarray]:
    """Copy each band's bins out of ``patch`` (frequency is the last axis)."""
    width = patch.shape[-1]
    out = []
    for b in bands:
        if b.bin_to > width:
            raise ValueError(f"band {b.name} [{b.bin_from}, {b.bin_to}) exceeds patch width {width}")
        out.append(patch[..., b.bin_from:b.bin_to].copy())
    return out


# ---------------------------------------------------------------------------
# patches

@dataclass
class Segmentation:
    patches: np.ndarray  # (n_patches, frames_per_patch, bins)
    padding: int  # zero frames appended at the end
    n_frames: int  # frames in the source spectrogram


def segment(magnitude: np.ndarray, frames_per_patch: int = 29, patch_hop: Optional[int] = None,
            mode: str = "train") -> Segmentation:
    """Cut a (frames x bins) matrix into patches along time.

    ``mode="train"`` drops the trailing remainder; ``mode="infer"`` zero-pads
    the tail so every frame lands in a patch and records the padding.
    """
    if isinstance(magnitude, Spectrogram):
        magnitude = magnitude.magnitude
    hop = patch_hop or frames_per_patch
    n = magnitude.shape[0]
    pad = 0
    if mode == "train":
        if n < frames_per_patch:
            raise ValueError(f"{n} frames is fewer than one patch of {frames_per_patch}")
        count = (n - frames_per_patch) // hop + 1
    elif mode == "infer":
        if n < 1:
            raise ValueError("empty spectrogram")
        count = max(1, -(-(n - frames_per_patch) // hop) + 1)
        pad = (count - 1) * hop + frames_per_patch - n
        magnitude = np.pad(magnitude, ((0, pad), (0, 0)))
    else:
        raise ValueError(f"unknown segmentation mode {mode!r}")
    patches = np.stack([magnitude[i * hop:i * hop + frames_per_patch] for i in range(count)])
    return Segmentation(patches, pad, n)


def stitch(patches: np.ndarray, n_frames: int) -> np.ndarray:
    """Inverse of non-overlapping inference segmentation."""
    flat = patches.reshape(-1, patches.shape[-1])
    return flat[:n_frames]


def reconstruct(estimated, mixture: Spectrogram, length: Optional[int] = None) -> AudioClip:
    """Pair an estimated magnitude with the mixture phase and resynthesise.

    ``estimated`` is a Spectrogram or a raw (frames x bins) array; negative
    entries of a raw array are clamped to zero.
    """
    if mixture.phase is None:
        raise AudioError("mixture spectrogram carries no phase")
    mag = estimated.magnitude if isinstance(estimated, Spectrogram) else np.asarray(estimated, dtype=np.float64)
    if mag.shape != mixture.magnitude.shape:
        raise AudioError(f"shape mismatch: estimate {mag.shape} vs mixture {mixture.magnitude.shape}")
    mag = np.maximum(mag, 0.0)
    return istft(Spectrogram(mag, mixture.phase, mixture.config), length)


def analysis_padding(config: StftConfig = StftConfig()) -> int:
    """Leading zeros so every original sample is covered by a full set of frames."""
    return config.window_size - config.hop


def padded_stft(clip: AudioClip, config: StftConfig = StftConfig()) -> Spectrogram:
    """STFT of the clip padded with ``window - hop`` zeros at both ends (tail rounded up to a hop)."""
    pad = analysis_padding(config)
    total = len(clip) + 2 * pad
    extra = (-(total - config.window_size)) % config.hop
    x = np.pad(clip.samples, (pad, pad + extra))
    return stft(AudioClip(x, clip.sample_rate), config)


def unpad(clip: AudioClip, length: int, config: StftConfig = StftConfig()) -> AudioClip:
    pad = analysis_padding(config)
    return AudioClip(clip.samples[pad:pad + length], clip.sample_rate)


def hz_to_bin(f: float, config: StftConfig = StftConfig(), sample_rate: int = SAMPLE_RATE) -> float:
    return f * config.fft_size / sample_rate


def bin_to_hz(b: float, config: StftConfig = StftConfig(), sample_rate: int = SAMPLE_RATE) -> float:
    return b * sample_rate / config.fft_size

