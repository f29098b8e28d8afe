"""Acoustic feature backends, frame-rate alignment and the on-disk cache.

Three backends share one contract (frames x dim at a stated rate):

- ``stub``: log-mel energies pushed through a fixed, seeded random linear
  map. Training-free and deterministic, but still informative, so the whole
  pipeline can be exercised without any pretrained model.
- ``mfcc``: 13 cepstra plus first and second differences (39 dims, 100 Hz).
- ``precomputed_ssl``: frames read from a cache that an external adapter
  script fills from a pretrained speech model; this package never runs the
  model itself.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy.fft import dct

from .data import EMA_RATE_HZ, Utterance
from .errors import AudioTooShort, DimMismatch, MissingCache, ShapeMismatch

WIN_S = 0.025
HOP_S = 0.010
N_FFT = 512
N_MELS = 80
N_CEPSTRA = 13

# Seed of the stub backend's fixed projection; changing it changes every
# stub feature ever produced, so treat it as part of the format.
_STUB_PROJECTION_SEED = 731


@dataclass(frozen=True)
class FeatureBackendSpec:
    """Identity and geometry of one feature backend."""

    name: str
    dim: int
    native_rate_hz: float
    cache_dir: str | None = None

    def __post_init__(self):
        if self.dim <= 0 or self.native_rate_hz <= 0:
            raise DimMismatch("backend dim and rate must be positive")


def stub_backend(dim: int = 1024) -> FeatureBackendSpec:
    return FeatureBackendSpec("stub", dim, float(EMA_RATE_HZ))


def mfcc_backend() -> FeatureBackendSpec:
    return FeatureBackendSpec("mfcc", 3 * N_CEPSTRA, float(EMA_RATE_HZ))


def precomputed_backend(cache_dir: str | Path, dim: int = 1024,
                        native_rate_hz: float = 50.0) -> FeatureBackendSpec:
    return FeatureBackendSpec("precomputed_ssl", dim, native_rate_hz, str(cache_dir))


def backend_from_name(name: str, dim: int | None = None,
                      cache_dir: str | Path | None = None) -> FeatureBackendSpec:
    if name == "stub":
        return stub_backend(dim or 1024)
    if name == "mfcc":
        return mfcc_backend()
    if name == "precomputed_ssl":
        if cache_dir is None:
            raise DimMismatch("precomputed_ssl needs a cache directory")
        return precomputed_backend(cache_dir, dim or 1024)
    raise DimMismatch(f"unknown backend {name!r} (expected stub, mfcc or precomputed_ssl)")


@dataclass
class FeatureSequence:
    """Frame-level features: ``values`` is ``[frames, dim]``."""

    values: np.ndarray
    frame_rate_hz: float
    backend_name: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ShapeMismatch(f"features must be [T, d] with T >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatch("features contain NaN or Inf")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Signal analysis helpers
# ---------------------------------------------------------------------------

def _frame_signal(audio: np.ndarray, sr: int) -> np.ndarray:
    win = int(round(WIN_S * sr))
    hop = int(round(HOP_S * sr))
    if len(audio) < win:
        raise AudioTooShort(f"need at least {win} samples, got {len(audio)}")
    n = 1 + (len(audio) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return audio[idx]


def _mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_pts = np.linspace(to_mel(0.0), to_mel(sr / 2), n_mels + 2)
    hz_pts = from_mel(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / sr).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, ctr, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, ctr):
            fb[m - 1, k] = (k - lo) / max(ctr - lo, 1)
        for k in range(ctr, hi):
            fb[m - 1, k] = (hi - k) / max(hi - ctr, 1)
    return fb


def _log_mel(audio: np.ndarray, sr: int, n_mels: int = N_MELS) -> np.ndarray:
    frames = _frame_signal(audio.astype(np.float64), sr)
    frames = frames * np.hamming(frames.shape[1])
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spec @ _mel_filterbank(sr, N_FFT, n_mels).T
    return np.log(mel + 1e-10)


def _delta(x: np.ndarray, width: int = 2) -> np.ndarray:
    # Regression-style difference over +-width frames, edge-padded.
    denom = 2 * sum(k * k for k in range(1, width + 1))
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    out = np.zeros_like(x)
    for k in range(1, width + 1):
        out += k * (padded[width + k: width + k + len(x)] - padded[width - k: width - k + len(x)])
    return out / denom


def _mfcc_39(audio: np.ndarray, sr: int) -> np.ndarray:
    emphasized = np.append(audio[0], audio[1:] - 0.97 * audio[:-1])
    logmel = _log_mel(emphasized, sr, n_mels=26)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPSTRA]
    d1 = _delta(ceps)
    d2 = _delta(d1)
    return np.concatenate([ceps, d1, d2], axis=1)


def _stub_projection(dim: int) -> np.ndarray:
    rng = np.random.default_rng(_STUB_PROJECTION_SEED)
    return rng.standard_normal((N_MELS, dim)) / np.sqrt(N_MELS)


def _stub_features(audio: np.ndarray, sr: int, dim: int) -> np.ndarray:
    return _log_mel(audio, sr) @ _stub_projection(dim)


# ---------------------------------------------------------------------------
# Extraction, alignment, projection
# ---------------------------------------------------------------------------

def extract(spec: FeatureBackendSpec, utterance: Utterance) -> FeatureSequence:
    """Compute (or fetch) features for one utterance at the backend's rate."""
    if spec.name == "stub":
        values = _stub_features(utterance.audio, utterance.sample_rate_hz, spec.dim)
    elif spec.name == "mfcc":
        values = _mfcc_39(utterance.audio, utterance.sample_rate_hz)
    elif spec.name == "precomputed_ssl":
        if spec.cache_dir is None:
            raise MissingCache("precomputed_ssl backend has no cache directory configured")
        return cache_read(spec.cache_dir, spec.name, utterance.speaker_id,
                          utterance.utterance_id)
    else:
        raise DimMismatch(f"unknown backend {spec.name!r}")
    return FeatureSequence(values.astype(np.float32), spec.native_rate_hz, spec.name)


def align_to_ema_rate(feat: FeatureSequence, target_hz: float, target_T: int) -> FeatureSequence:
    """Linearly interpolate along time to ``target_hz``, then force ``target_T`` frames.

    Linear interpolation cannot overshoot, so per-dimension bounds are
    preserved; missing tail frames are zero-padded.
    """
    src_T = feat.n_frames
    if src_T == 1:
        resampled = np.repeat(feat.values, max(target_T, 1), axis=0)[:target_T]
    else:
        n_out = max(int(round(src_T * target_hz / feat.frame_rate_hz)), 1)
        pos = np.arange(n_out) * (feat.frame_rate_hz / target_hz)
        pos = np.clip(pos, 0.0, src_T - 1.0)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, src_T - 1)
        w = (pos - i0).astype(np.float32)[:, None]
        resampled = (1.0 - w) * feat.values[i0] + w * feat.values[i1]
    if resampled.shape[0] >= target_T:
        out = resampled[:target_T]
    else:
        out = np.zeros((target_T, feat.dim), dtype=np.float32)
        out[: resampled.shape[0]] = resampled
    return FeatureSequence(out, target_hz, feat.backend_name)


class FeatureProjection(nn.Module):
    """Single fully connected layer mapping backend features to the model width."""

    def __init__(self, in_dim: int, out_dim: int = 256):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimMismatch(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        return self.linear(x)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

def _cache_paths(cache_root: Path | str, backend: str, speaker: str, utt: str):
    d = Path(cache_root) / backend / speaker
    return d / f"{utt}.f32", d / f"{utt}.json"


def cache_write(cache_root: Path | str, speaker: str, utt: str, feat: FeatureSequence,
                source_path: Path | str | None = None) -> Path:
    """Atomically store one feature matrix plus a sidecar describing it."""
    data_path, meta_path = _cache_paths(cache_root, feat.backend_name, speaker, utt)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dim": int(feat.dim),
        "rate_hz": float(feat.frame_rate_hz),
        "backend": feat.backend_name,
        "frames": int(feat.n_frames),
    }
    if source_path is not None:
        st = os.stat(source_path)
        meta["source_mtime_ns"] = st.st_mtime_ns
        meta["source_size"] = st.st_size
    for target, payload in ((data_path, feat.values.astype("<f4").tobytes()),
                            (meta_path, json.dumps(meta).encode())):
        fd, tmp = tempfile.mkstemp(dir=str(target.parent), suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    return data_path


def cache_read(cache_root: Path | str, backend: str, speaker: str, utt: str) -> FeatureSequence:
    data_path, meta_path = _cache_paths(cache_root, backend, speaker, utt)
    if not data_path.exists() or not meta_path.exists():
        raise MissingCache(
            f"no cached {backend} features for {speaker}/{utt} under {cache_root}; "
            f"run the feature command (or the SSL adapter) first"
        )
    meta = json.loads(meta_path.read_text())
    flat = np.fromfile(data_path, dtype="<f4")
    dim = int(meta["dim"])
    if flat.size % dim != 0:
        raise MissingCache(f"{data_path}: size {flat.size} not divisible by dim {dim}")
    return FeatureSequence(flat.reshape(-1, dim), float(meta["rate_hz"]), meta["backend"])


def cache_is_fresh(cache_root: Path | str, backend: str, speaker: str, utt: str,
                   dim: int, source_path: Path | str | None = None) -> bool:
    """True when a cache entry exists, matches the geometry and its source is unchanged."""
    data_path, meta_path = _cache_paths(cache_root, backend, speaker, utt)
    if not data_path.exists() or not meta_path.exists():
        return False
    meta = json.loads(meta_path.read_text())
    if meta.get("backend") != backend or int(meta.get("dim", -1)) != dim:
        return False
    if source_path is not None and "source_mtime_ns" in meta:
        st = os.stat(source_path)
        if st.st_mtime_ns != meta["source_mtime_ns"] or st.st_size != meta["source_size"]:
            return False
    return True
