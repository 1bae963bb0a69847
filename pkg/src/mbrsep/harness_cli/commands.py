"""Implementations behind the command-line verbs."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..dsp_pipeline import (SAMPLE_RATE, AudioClip, AudioError, load_audio, padded_stft, reconstruct,
                            segment, stitch, unpad, write_wav)
from ..model_zoo import ModelSpec, WeightSet, build, format_summary, predict
from ..separation_metrics import DB_CAP, DEFAULT_FILTER_LEN, MetricError, bonferroni, bss_eval, wilcoxon_signed_rank
from .checkpoint import load_checkpoint
from .report import METRICS, plot_metric_boxes
from .training import read_manifest, split_entries

log = logging.getLogger(__name__)

BASELINE_LABEL = "mixture"
CSV_COLUMNS = ("song_id", "model", "sdr_db", "sir_db", "sar_db", "capped")


# ---------------------------------------------------------------------------
# separation


def separate_clip(spec: ModelSpec, weights: WeightSet, clip: AudioClip, normalize: bool = False,
                  batch_size: int = 16) -> AudioClip:
    """Estimate the vocal of ``clip``; the output has exactly the input length."""
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioError(f"sample rate {clip.sample_rate} Hz, the models expect {SAMPLE_RATE} Hz")
    peak = float(np.max(np.abs(clip.samples))) if normalize else 1.0
    scale = peak if peak > 0 else 1.0
    mix = padded_stft(AudioClip(clip.samples / scale, clip.sample_rate))
    seg = segment(mix.magnitude, spec.frames, spec.frames, "infer")
    est = stitch(predict(spec, weights, seg.patches, batch_size), seg.n_frames).astype(np.float64)
    audio = reconstruct(est, mix)
    out = unpad(audio, len(clip))
    return AudioClip(out.samples * scale, clip.sample_rate)


def cmd_separate(checkpoint_path, mixture_wav, out_wav, spec: Optional[ModelSpec] = None) -> AudioClip:
    spec, ckpt = load_checkpoint(checkpoint_path, spec)
    clip = load_audio(mixture_wav)
    est = separate_clip(spec, ckpt.weights, clip, bool(ckpt.config.get("normalize", False)))
    write_wav(out_wav, est)
    return est


def cmd_separate_manifest(checkpoint_path, manifest_path, out_dir, split: str = "test",
                          spec: Optional[ModelSpec] = None) -> list[Path]:
    """Separate every song of one split into ``out_dir/<song_id>.wav``."""
    spec, ckpt = load_checkpoint(checkpoint_path, spec)
    manifest, base = read_manifest(manifest_path)
    written = []
    for entry in split_entries(manifest, split):
        clip = load_audio(base / entry["mixture_path"])
        est = separate_clip(spec, ckpt.weights, clip, bool(ckpt.config.get("normalize", False)))
        path = Path(out_dir) / f"{entry['song_id']}.wav"
        write_wav(path, est)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationResult:
    rows: list[dict]
    summary: dict
    missing: list[str] = field(default_factory=list)


def _metric_row(song_id: str, model: str, estimate: np.ndarray, refs: np.ndarray, filter_len: int) -> dict:
    res = bss_eval(estimate, refs, 0, filter_len)
    sdr, sir, sar, capped = res.capped(DB_CAP)
    return {"song_id": song_id, "model": model, "sdr_db": sdr, "sir_db": sir, "sar_db": sar, "capped": capped}


def _quartiles(values: list[float]) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "n": len(values)}


def _compare(rows: list[dict], models: list[str], reference: str) -> list[dict]:
    """Paired Wilcoxon tests of every model against ``reference``, Bonferroni over all tests."""
    tests = []
    by_key = {(r["model"], r["song_id"]): r for r in rows}
    for model in models:
        if model == reference:
            continue
        songs = [s for (m, s) in by_key if m == model and (reference, s) in by_key]
        for metric in METRICS:
            a = [by_key[(model, s)][metric] for s in songs]
            b = [by_key[(reference, s)][metric] for s in songs]
            entry = {"model": model, "against": reference, "metric": metric, "n": len(songs)}
            try:
                rep = wilcoxon_signed_rank(a, b)
                entry.update(statistic=rep.statistic, p_value=rep.p_value, method=rep.method,
                             n_effective=rep.n_effective)
            except ValueError as exc:
                entry.update(p_value=None, skipped=str(exc))
            tests.append(entry)
    valid = [t for t in tests if t.get("p_value") is not None]
    for t, p in zip(valid, bonferroni([t["p_value"] for t in valid]) if valid else []):
        t["p_bonferroni"] = p
        t["significant"] = p < 0.05
    return tests


def cmd_evaluate(manifest_path, estimates: dict[str, str], out_dir, baseline: bool = True, split: str = "test",
                 filter_len: int = DEFAULT_FILTER_LEN, figures: bool = True) -> EvaluationResult:
    """Score estimate directories (label -> dir of ``<song_id>.wav``) against the split's vocals."""
    manifest, base = read_manifest(manifest_path)
    entries = split_entries(manifest, split)
    if not entries:
        raise ValueError(f"the {split} split of {manifest_path} is empty")
    rows, missing = [], []
    for entry in entries:
        song = entry["song_id"]
        mixture = load_audio(base / entry["mixture_path"])
        vocal = load_audio(base / entry["vocal_stem_path"])
        if len(mixture) != len(vocal):
            raise AudioError(f"{song}: mixture and vocal stem lengths differ")
        refs = np.stack([vocal.samples, mixture.samples - vocal.samples])
        if baseline:
            rows.append(_metric_row(song, BASELINE_LABEL, mixture.samples, refs, filter_len))
        for label, directory in estimates.items():
            path = Path(directory) / f"{song}.wav"
            if not path.is_file():
                missing.append(str(path))
                log.error("missing estimate %s", path)
                continue
            est = load_audio(path)
            if len(est) != len(vocal):
                raise AudioError(f"{path}: {len(est)} samples, reference has {len(vocal)}")
            try:
                rows.append(_metric_row(song, label, est.samples, refs, filter_len))
            except MetricError as exc:
                raise MetricError(f"{path}: {exc}") from exc

    models = list(dict.fromkeys(r["model"] for r in rows))
    summary = {"split": split, "filter_len": filter_len, "db_cap": DB_CAP, "models": {}, "missing": missing}
    for model in models:
        mrows = [r for r in rows if r["model"] == model]
        summary["models"][model] = {m: _quartiles([r[m] for r in mrows]) for m in METRICS}
        summary["models"][model]["capped_rows"] = sum(r["capped"] for r in mrows)
    if baseline and len(models) > 1:
        summary["comparisons"] = _compare(rows, models, BASELINE_LABEL)
    elif len(models) > 1:
        summary["comparisons"] = _compare(rows, models, models[0])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, **{m: f"{r[m]:.6f}" for m in METRICS}, "capped": str(r["capped"]).lower()})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, allow_nan=False) + "\n")
    if figures and rows:
        plot_metric_boxes(rows, out / "metrics.png")
    return EvaluationResult(rows, summary, missing)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"song_id": r["song_id"], "model": r["model"], **{m: float(r[m]) for m in METRICS},
                 "capped": r["capped"] == "true"} for r in csv.DictReader(fh)]


def cmd_inspect(model_name: str) -> str:
    return format_summary(build(model_name))

