"""Turn audio files into MOSF feature sequences with a pretrained SSL model.

The extractor loads a wav2vec2-style speech model (any local directory or
hub id accepted by ``transformers``), runs each clip through it in eval
mode, and writes one binary feature file per utterance plus manifest rows
in the schema the training toolkit consumes. Inputs at the wrong sample
rate are resampled rather than rejected; files that cannot be decoded are
reported and skipped while the job continues.

Feature file layout (little-endian), bit-compatible with the trainer::

    magic b"MOSF" | version 0x01 | u32 T | u32 D | T*D float32, row-major
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch
from transformers import Wav2Vec2Config, Wav2Vec2Model

MOSF_MAGIC = b"MOSF"
MOSF_VERSION = 1

#: Sample rate the published wav2vec2 checkpoints expect.
DEFAULT_SAMPLE_RATE = 16_000

AUDIO_SUFFIXES = (".wav",)


@dataclass
class ExtractionJob:
    """One batch of audio files to featurize.

    ``layer`` selects which hidden-state stack feeds the output: -1 (the
    default) is the final layer, 0 the conv-extractor projection.
    """

    audio_paths: list[Path]
    model_id: str
    out_dir: Path
    manifest_path: Path
    layer: int = -1
    sample_rate: int = DEFAULT_SAMPLE_RATE


@dataclass
class ExtractionResult:
    written: list[Path] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def write_mosf(path, frames: np.ndarray) -> None:
    """Write a T x D float32 matrix in the MOSF layout."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ValueError(f"feature matrix must be 2-D and nonempty, got {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(MOSF_MAGIC)
        f.write(struct.pack("<B", MOSF_VERSION))
        f.write(struct.pack("<II", t, d))
        f.write(frames.tobytes())


def load_model(model_id: str) -> Wav2Vec2Model:
    """Load a pretrained wav2vec2 checkpoint (local path or hub id)."""
    model = Wav2Vec2Model.from_pretrained(model_id)
    model.eval()
    return model


def expected_frames(config: Wav2Vec2Config, n_samples: int) -> int:
    """Output length implied by the conv feature extractor's geometry."""
    length = n_samples
    for kernel, stride in zip(config.conv_kernel, config.conv_stride):
        length = (length - kernel) // stride + 1
    return max(length, 0)


def load_audio(path, target_rate: int) -> np.ndarray:
    """Read a WAV file as mono float32 in [-1, 1] at the target rate."""
    rate, data = scipy.io.wavfile.read(path)
    if data.size == 0:
        raise ValueError("empty audio stream")
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max)
        data = data.astype(np.float32) / scale
    else:
        data = data.astype(np.float32)
    if rate != target_rate:
        g = np.gcd(int(rate), int(target_rate))
        data = scipy.signal.resample_poly(data, target_rate // g, rate // g)
        data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise ValueError("audio decodes to non-finite samples")
    return data


def system_id_for(path: Path, root: Path | None) -> str:
    """Guess the producing system: filename prefix, else parent directory.

    Challenge-style names encode the system before the first dash
    (``sys64e2f-utt9a2b4c.wav``); otherwise files grouped in per-system
    directories use the directory name.
    """
    stem = path.stem
    if "-" in stem:
        return stem.split("-", 1)[0]
    if root is not None and path.parent != root:
        return path.parent.name
    return "unknown"


def hidden_states_for(model: Wav2Vec2Model, audio: np.ndarray, layer: int) -> np.ndarray:
    with torch.no_grad():
        waveform = torch.from_numpy(audio).to(torch.float32).unsqueeze(0)
        out = model(waveform, output_hidden_states=True)
    stack = out.hidden_states
    if not -len(stack) <= layer < len(stack):
        raise ValueError(f"layer {layer} outside [-{len(stack)}, {len(stack) - 1}]")
    return stack[layer].squeeze(0).numpy().astype(np.float32)


def extract(job: ExtractionJob, model: Wav2Vec2Model | None = None,
            audio_root: Path | None = None) -> ExtractionResult:
    """Featurize every file in the job and append manifest rows.

    Existing manifests are appended to (the header is written once), so
    jobs can be sharded. Per-file failures are collected in the result's
    ``errors`` map and do not stop the run.
    """
    if model is None:
        model = load_model(job.model_id)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    result = ExtractionResult()
    rows = []
    for path in job.audio_paths:
        path = Path(path)
        try:
            audio = load_audio(path, job.sample_rate)
            frames = hidden_states_for(model, audio, job.layer)
            if frames.shape[1] != model.config.hidden_size:
                raise ValueError(
                    f"feature dim {frames.shape[1]} != hidden size {model.config.hidden_size}")
            if not np.isfinite(frames).all():
                raise ValueError("model produced non-finite features")
            out_path = job.out_dir / f"{path.stem}.mosf"
            write_mosf(out_path, frames)
            result.written.append(out_path)
            rows.append({
                "utterance_id": path.stem,
                "system_id": system_id_for(path, audio_root),
                "ratings": "",
                "mean_mos": "",
                "feature_path": str(out_path.relative_to(job.manifest_path.parent)
                                    if out_path.is_relative_to(job.manifest_path.parent)
                                    else out_path),
            })
        except Exception as exc:  # keep going; the job reports per-file failures
            result.errors[str(path)] = str(exc)
    _append_manifest(job.manifest_path, rows)
    return result


MANIFEST_FIELDS = ["utterance_id", "system_id", "ratings", "mean_mos", "feature_path"]


def _append_manifest(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        if fresh:
            writer.writeheader()
        writer.writerows(rows)
