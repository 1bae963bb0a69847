"""Toy singing-voice dataset for desk-scale experiments.

Each song is a vocal stem (a vibrato harmonic stack sung as a sequence of
notes with rests) plus an accompaniment stem (sweeping chirps over noise
tilted toward high frequencies).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.signal

from ..dsp_pipeline import SAMPLE_RATE, AudioClip, write_wav

VOCAL_CUTOFF_HZ = 4800.0
MANIFEST_NAME = "manifest.json"


def _note_envelope(n: int, sr: int) -> np.ndarray:
    attack = min(n // 4, int(0.03 * sr))
    release = min(n // 4, int(0.08 * sr))
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
    if release:
        env[n - release:] = np.linspace(1.0, 0.0, release)
    return env


def vocal_stem(rng: np.random.Generator, n_samples: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n_samples)
    t0 = int(rng.uniform(0.0, 0.3) * sr)
    while t0 < n_samples:
        dur = int(rng.uniform(0.25, 0.9) * sr)
        n = min(dur, n_samples - t0)
        f0 = rng.uniform(150.0, 400.0)
        depth = rng.uniform(0.005, 0.02)
        rate = rng.uniform(4.5, 6.5)
        t = np.arange(n) / sr
        freq = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t))
        phase = 2 * np.pi * np.cumsum(freq) / sr
        # highest partial stays below the cutoff even at the vibrato peak
        n_partials = max(1, int(VOCAL_CUTOFF_HZ // (f0 * (1.0 + depth))))
        tilt = rng.uniform(0.8, 1.4)
        note = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** tilt for k in range(1, n_partials + 1))
        out[t0:t0 + n] += rng.uniform(0.5, 1.0) * note * _note_envelope(n, sr)
        t0 += dur + int(rng.uniform(0.05, 0.4) * sr)
    return out


def music_stem(rng: np.random.Generator, n_samples: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n_samples)
    t0 = 0
    while t0 < n_samples:
        n = min(int(rng.uniform(0.3, 1.2) * sr), n_samples - t0)
        t = np.arange(n) / sr
        f_start, f_end = np.exp(rng.uniform(np.log(200.0), np.log(18000.0), size=2))
        method = rng.choice(["linear", "logarithmic"])
        sweep = scipy.signal.chirp(t, f_start, t[-1] if n > 1 else 1.0, f_end, method=method)
        out[t0:t0 + n] += rng.uniform(0.2, 0.5) * sweep * _note_envelope(n, sr)
        t0 += n
    noise = rng.standard_normal(n_samples)
    hi = scipy.signal.sosfilt(scipy.signal.butter(4, rng.uniform(3000.0, 6000.0), "highpass", fs=sr, output="sos"),
                              noise)
    lo = scipy.signal.sosfilt(scipy.signal.butter(2, 1500.0, "lowpass", fs=sr, output="sos"), noise)
    out += 0.4 * hi + 0.05 * lo
    return out


def synthesize_song(seed: int, duration_s: float, sr: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(vocal, music)`` float32 stems scaled so the mixture peaks at 0.9."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sr))
    vocal = vocal_stem(rng, n, sr)
    music = music_stem(rng, n, sr)
    vocal *= np.sqrt(np.mean(music ** 2) / max(np.mean(vocal ** 2), 1e-20)) * rng.uniform(0.7, 1.4)
    peak = np.max(np.abs(vocal + music))
    scale = 0.9 / peak if peak > 0 else 1.0
    return (vocal * scale).astype(np.float32), (music * scale).astype(np.float32)


def split_counts(n_songs: int, test_fraction: float = 1 / 6, valid_fraction: float = 0.2) -> tuple[int, int, int]:
    """(train, valid, test) counts: test first, then valid as a fraction of the rest."""
    if n_songs < 3:
        raise ValueError(f"need at least 3 songs for train/valid/test splits, got {n_songs}")
    n_test = max(1, round(n_songs * test_fraction))
    n_valid = max(1, round((n_songs - n_test) * valid_fraction))
    n_train = n_songs - n_test - n_valid
    if n_train < 1:
        raise ValueError(f"{n_songs} songs leave no training data")
    return n_train, n_valid, n_test


def cmd_synth(out_dir, n_songs: int = 12, duration_s: float = 10.0, seed: int = 0,
              test_fraction: float = 1 / 6, valid_fraction: float = 0.2) -> dict:
    """Write ``n_songs`` toy songs and a manifest into ``out_dir``; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    n_train, n_valid, _ = split_counts(n_songs, test_fraction, valid_fraction)
    seeds = np.random.SeedSequence(seed).generate_state(n_songs)
    entries = []
    for i in range(n_songs):
        song_id = f"song_{i:03d}"
        vocal, music = synthesize_song(int(seeds[i]), duration_s)
        mixture = vocal + music
        paths = {}
        for stem, data in (("mixture", mixture), ("vocals", vocal), ("accompaniment", music)):
            paths[stem] = f"{song_id}_{stem}.wav"
            write_wav(out / paths[stem], AudioClip(data, SAMPLE_RATE))
        split = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
        entries.append({"song_id": song_id, "mixture_path": paths["mixture"], "vocal_stem_path": paths["vocals"],
                        "accompaniment_path": paths["accompaniment"], "split": split})
    manifest = {"sample_rate": SAMPLE_RATE, "entries": entries}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
