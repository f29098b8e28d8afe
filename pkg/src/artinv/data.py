"""Paired speech/EMA corpus handling.

This module owns everything that happens to data before it reaches a model:

- loading and writing the on-disk corpus layout
  (``<root>/<speaker>/<utt>/{audio.f32, ema.f32, meta.json}`` plus a
  JSON-lines manifest),
- per-speaker min-max normalization state,
- lowess trajectory smoothing and band-limited audio resampling,
- the leave-one-speaker-out split protocol,
- a deterministic synthetic corpus generator for desk-scale experiments.

All operations are pure functions of their inputs (plus an explicit seed),
so they are safe to call from parallel workers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import (
    ConstantChannel,
    DurationMismatch,
    EmptyAudio,
    ManifestError,
    ShapeMismatch,
    UnknownSpeaker,
    WindowTooLarge,
)

SENSORS = ("TR", "TB", "TT", "UL", "LL", "LI")
AXES = ("x", "y", "z")
CHANNEL_NAMES = tuple(f"{s}_{a}" for s in SENSORS for a in AXES)
N_CHANNELS = len(CHANNEL_NAMES)
EMA_RATE_HZ = 100
AUDIO_RATE_HZ = 16000

# Maximum tolerated audio/EMA duration disagreement after preprocessing.
DURATION_TOLERANCE_S = 0.05


def xz_channel_indices() -> list[int]:
    """Indices of the channels measuring front-back and up-down movement."""
    return [i for i, name in enumerate(CHANNEL_NAMES) if not name.endswith("_y")]


@dataclass
class EmaRecording:
    """Multi-channel articulator trajectory, sensor-major channel order.

    ``values`` is ``[channels, frames]``. Units are millimeters for raw
    recordings and [0, 1] once normalized; the container does not track
    which, the surrounding pipeline does.
    """

    values: np.ndarray
    frame_rate_hz: float = float(EMA_RATE_HZ)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != N_CHANNELS:
            raise ShapeMismatch(
                f"expected [{N_CHANNELS}, T] trajectory, got {self.values.shape}"
            )
        if self.values.shape[1] < 1:
            raise ShapeMismatch("trajectory must contain at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatch("trajectory contains NaN or Inf values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


@dataclass
class NormalizationState:
    """Per-channel min/max fitted on raw millimeter trajectories."""

    per_channel_min: np.ndarray
    per_channel_max: np.ndarray
    scope: str = "per_speaker"

    def __post_init__(self):
        self.per_channel_min = np.asarray(self.per_channel_min, dtype=np.float64)
        self.per_channel_max = np.asarray(self.per_channel_max, dtype=np.float64)
        if self.per_channel_min.shape != (N_CHANNELS,) or self.per_channel_max.shape != (
            N_CHANNELS,
        ):
            raise ShapeMismatch("normalization stats must have one entry per channel")
        if np.any(self.per_channel_max <= self.per_channel_min):
            raise ConstantChannel("max must exceed min on every channel")

    def to_json_dict(self) -> dict:
        return {
            "per_channel_min": self.per_channel_min.tolist(),
            "per_channel_max": self.per_channel_max.tolist(),
            "scope": self.scope,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NormalizationState":
        return cls(
            per_channel_min=np.array(d["per_channel_min"], dtype=np.float64),
            per_channel_max=np.array(d["per_channel_max"], dtype=np.float64),
            scope=d.get("scope", "per_speaker"),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path: Path | str) -> "NormalizationState":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class Utterance:
    """One paired recording: mono waveform plus its articulatory trajectory."""

    speaker_id: str
    utterance_id: str
    audio: np.ndarray
    sample_rate_hz: int
    ema: EmaRecording

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float32)
        if self.audio.ndim != 1:
            raise ShapeMismatch("audio must be a mono vector")

    @property
    def audio_duration_s(self) -> float:
        return len(self.audio) / self.sample_rate_hz

    def duration_gap_s(self) -> float:
        return abs(self.audio_duration_s - self.ema.duration_s)


@dataclass(frozen=True)
class UtteranceRef:
    """Manifest row: where one utterance lives relative to the corpus root."""

    speaker_id: str
    utterance_id: str
    directory: Path


@dataclass(frozen=True)
class SplitSpec:
    """One leave-one-speaker-out split."""

    held_out_speaker: str
    train_speakers: frozenset[str]
    seed: int

    def __post_init__(self):
        if self.held_out_speaker in self.train_speakers:
            raise UnknownSpeaker(
                f"held-out speaker {self.held_out_speaker!r} also appears in the train set"
            )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def fit_normalizer(recordings: list[EmaRecording]) -> NormalizationState:
    """Fit per-channel min/max over all frames of all given recordings.

    Raises ConstantChannel when a channel never moves (range < 1e-9 mm),
    because a min-max map is undefined there.
    """
    if not recordings:
        raise ValueError("need at least one recording to fit a normalizer")
    mins = np.full(N_CHANNELS, np.inf)
    maxs = np.full(N_CHANNELS, -np.inf)
    for rec in recordings:
        mins = np.minimum(mins, rec.values.min(axis=1))
        maxs = np.maximum(maxs, rec.values.max(axis=1))
    flat = np.flatnonzero(maxs - mins < 1e-9)
    if flat.size:
        names = ", ".join(CHANNEL_NAMES[i] for i in flat)
        raise ConstantChannel(f"constant channel(s): {names}")
    return NormalizationState(per_channel_min=mins, per_channel_max=maxs)


def normalize(ema: EmaRecording, stats: NormalizationState) -> EmaRecording:
    """Map each channel through (x - min) / (max - min), clipped to [0, 1].

    Clipping matters for unseen speakers whose trajectories can leave the
    fitted range.
    """
    lo = stats.per_channel_min[:, None]
    hi = stats.per_channel_max[:, None]
    scaled = (ema.values.astype(np.float64) - lo) / (hi - lo)
    return EmaRecording(np.clip(scaled, 0.0, 1.0), ema.frame_rate_hz)


def denormalize(ema: EmaRecording, stats: NormalizationState) -> EmaRecording:
    """Exact inverse of :func:`normalize` on in-range values, back to mm."""
    lo = stats.per_channel_min[:, None]
    hi = stats.per_channel_max[:, None]
    return EmaRecording(ema.values.astype(np.float64) * (hi - lo) + lo, ema.frame_rate_hz)


def denormalize_array(values: np.ndarray, stats: NormalizationState,
                      channel_indices: list[int] | None = None) -> np.ndarray:
    """Denormalize a bare ``[C, T]`` array, optionally for a channel subset."""
    lo = stats.per_channel_min
    hi = stats.per_channel_max
    if channel_indices is not None:
        lo = lo[channel_indices]
        hi = hi[channel_indices]
    if values.shape[0] != lo.shape[0]:
        raise ShapeMismatch(
            f"array has {values.shape[0]} channels, stats cover {lo.shape[0]}"
        )
    return values.astype(np.float64) * (hi - lo)[:, None] + lo[:, None]


# ---------------------------------------------------------------------------
# Smoothing and resampling
# ---------------------------------------------------------------------------

def lowess_smooth(ema: EmaRecording, window_frames: int = 21) -> EmaRecording:
    """Locally-weighted linear regression along time, per channel.

    Each frame is re-estimated from a window of ``window_frames`` nearest
    frames (the window shifts rather than shrinks at the edges) using
    tricube weights and a degree-1 fit, so constants and straight lines
    pass through unchanged.
    """
    if window_frames % 2 == 0 or window_frames < 3:
        raise ValueError("window_frames must be odd and >= 3")
    T = ema.n_frames
    if window_frames > T:
        raise WindowTooLarge(f"window of {window_frames} frames exceeds T={T}")

    half = window_frames // 2
    starts = np.clip(np.arange(T) - half, 0, T - window_frames)
    idx = starts[:, None] + np.arange(window_frames)[None, :]          # [T, W]
    x = idx.astype(np.float64) - np.arange(T, dtype=np.float64)[:, None]
    dist = np.abs(x)
    dmax = dist.max(axis=1, keepdims=True)
    w = (1.0 - (dist / dmax) ** 3) ** 3                                 # tricube

    y = ema.values.astype(np.float64)[:, idx]                           # [C, T, W]
    sw = w.sum(axis=1)
    swx = (w * x).sum(axis=1)
    swxx = (w * x * x).sum(axis=1)
    swy = (w[None] * y).sum(axis=2)
    swxy = (w[None] * x[None] * y).sum(axis=2)
    det = sw * swxx - swx * swx
    # Intercept of the local fit, i.e. the fit evaluated at the center frame.
    smoothed = (swxx * swy - swx * swxy) / det
    return EmaRecording(smoothed, ema.frame_rate_hz)


def resample_audio(audio: np.ndarray, from_hz: int, to_hz: int = AUDIO_RATE_HZ) -> np.ndarray:
    """Band-limited (Kaiser-windowed polyphase) resampling.

    Output length is ``round(len(audio) * to_hz / from_hz)``.
    """
    audio = np.asarray(audio)
    if audio.size == 0:
        raise EmptyAudio("cannot resample an empty waveform")
    if from_hz <= to_hz and from_hz != to_hz:
        raise ValueError("only downsampling or identity is supported")
    target_len = int(round(len(audio) * to_hz / from_hz))
    if from_hz == to_hz:
        return audio.astype(np.float32, copy=True)
    g = math.gcd(int(from_hz), int(to_hz))
    up, down = to_hz // g, from_hz // g
    out = resample_poly(audio.astype(np.float64), up, down, window=("kaiser", 8.0))
    if len(out) > target_len:
        out = out[:target_len]
    elif len(out) < target_len:
        out = np.pad(out, (0, target_len - len(out)))
    return out.astype(np.float32)


def align_audio_to_ema(utterance: Utterance) -> Utterance:
    """Trim or pad audio so it covers exactly the EMA duration.

    Rejects the utterance when the streams disagree by more than the
    tolerated 0.05 s.
    """
    gap = utterance.duration_gap_s()
    if gap > DURATION_TOLERANCE_S:
        raise DurationMismatch(
            f"{utterance.speaker_id}/{utterance.utterance_id}: audio and EMA "
            f"duration differ by {gap:.3f} s"
        )
    target = int(round(utterance.ema.duration_s * utterance.sample_rate_hz))
    audio = utterance.audio
    if len(audio) > target:
        audio = audio[:target]
    elif len(audio) < target:
        audio = np.pad(audio, (0, target - len(audio)))
    return Utterance(
        speaker_id=utterance.speaker_id,
        utterance_id=utterance.utterance_id,
        audio=audio,
        sample_rate_hz=utterance.sample_rate_hz,
        ema=utterance.ema,
    )


def normalize_corpus(utterances: list[Utterance]):
    """Fit per-speaker stats and normalize every utterance, in memory.

    Returns ``(normalized utterances, stats by speaker)``; the disk-based
    equivalent is :func:`preprocess_corpus`.
    """
    by_speaker: dict[str, list[Utterance]] = {}
    for utt in utterances:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)
    stats_by_speaker = {}
    normalized = []
    for speaker in sorted(by_speaker):
        stats = fit_normalizer([u.ema for u in by_speaker[speaker]])
        stats_by_speaker[speaker] = stats
        for u in by_speaker[speaker]:
            normalized.append(Utterance(u.speaker_id, u.utterance_id, u.audio,
                                        u.sample_rate_hz, normalize(u.ema, stats)))
    return normalized, stats_by_speaker


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def loso_split(refs: list, held_out_speaker: str, seed: int):
    """Partition a manifest into train/test by holding one speaker out.

    Every utterance of ``held_out_speaker`` goes to test; everything else
    goes to train, shuffled deterministically by ``seed``. ``refs`` can be
    any sequence of objects with a ``speaker_id`` attribute.
    """
    speakers = {r.speaker_id for r in refs}
    if held_out_speaker not in speakers:
        raise UnknownSpeaker(
            f"speaker {held_out_speaker!r} not in manifest (has: {sorted(speakers)})"
        )
    train = [r for r in refs if r.speaker_id != held_out_speaker]
    test = [r for r in refs if r.speaker_id == held_out_speaker]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    spec = SplitSpec(
        held_out_speaker=held_out_speaker,
        train_speakers=frozenset(speakers - {held_out_speaker}),
        seed=seed,
    )
    return spec, train, test


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Latent band carriers; each latent modulates the energy of one band so the
# spectral envelope of the waveform determines the trajectory.
_SYNTH_CARRIERS_HZ = (500.0, 1500.0, 3500.0)
_SYNTH_N_LATENTS = len(_SYNTH_CARRIERS_HZ)
_SYNTH_CROSS_MIX = 0.2
_SYNTH_SCALE_MM = 5.0
_SYNTH_SMOOTH_FRAMES = 15
# Trajectories trail the waveform by a few frames (articulator inertia), so
# frame-local inversion is measurably worse than contextual inversion.
_SYNTH_EMA_LAG_FRAMES = 3


def _hann_smooth(x: np.ndarray, width: int) -> np.ndarray:
    win = np.hanning(width + 2)[1:-1]
    win /= win.sum()
    pad = width // 2
    xp = np.pad(x, (pad, width - 1 - pad), mode="edge")
    return np.convolve(xp, win, mode="valid")


def _synth_utterance(speaker_idx: int, utt_idx: int, duration_s: float, seed: int,
                     centers_mm: np.ndarray):
    """Generate one synthetic utterance; returns (audio, ema_mm, latents).

    ``latents`` is the smoothed driver, one row per latent band; channel c
    tracks latent ``c % 3`` with a small admixture of the others.
    """
    rng = np.random.default_rng([seed, 202, speaker_idx, utt_idx])
    n_frames = int(round(duration_s * EMA_RATE_HZ))
    n_samples = n_frames * (AUDIO_RATE_HZ // EMA_RATE_HZ)
    t_frames = np.arange(n_frames) / EMA_RATE_HZ
    t_audio = np.arange(n_samples) / AUDIO_RATE_HZ

    z = np.zeros((_SYNTH_N_LATENTS, n_frames))
    for k in range(_SYNTH_N_LATENTS):
        amps = rng.uniform(0.5, 1.0, 3)
        amps /= amps.sum()
        freqs = rng.uniform(0.3, 2.5, 3)
        phases = rng.uniform(0.0, 2.0 * np.pi, 3)
        for a, f, p in zip(amps, freqs, phases):
            z[k] += a * np.sin(2.0 * np.pi * f * t_frames + p)

    z_smooth = np.stack([_hann_smooth(zk, _SYNTH_SMOOTH_FRAMES) for zk in z])
    lag_idx = np.clip(np.arange(n_frames) - _SYNTH_EMA_LAG_FRAMES, 0, n_frames - 1)
    z_lagged = z_smooth[:, lag_idx]

    ema = np.empty((N_CHANNELS, n_frames))
    for c in range(N_CHANNELS):
        k = c % _SYNTH_N_LATENTS
        others = sum(z_lagged[j] for j in range(_SYNTH_N_LATENTS) if j != k)
        ema[c] = centers_mm[c] + _SYNTH_SCALE_MM * (z_lagged[k] + _SYNTH_CROSS_MIX * others)

    audio = np.zeros(n_samples)
    for k, carrier in enumerate(_SYNTH_CARRIERS_HZ):
        z_up = np.interp(t_audio, t_frames, z[k])
        amp = 0.12 * np.exp(0.5 * z_up)
        audio += amp * np.sin(2.0 * np.pi * carrier * t_audio + rng.uniform(0, 2 * np.pi))
    audio += 0.001 * rng.standard_normal(n_samples)

    return audio.astype(np.float32), ema, z_smooth


def synth_dataset(n_speakers: int, n_utts: int, duration_s: float, seed: int) -> list[Utterance]:
    """Deterministic synthetic corpus of paired waveforms and trajectories.

    Trajectories are smooth functions of low-frequency latent drivers whose
    amplitudes also shape the waveform's band energies, so acoustic features
    carry the information needed to invert them. Speakers differ by fixed
    per-channel offsets, mimicking speaker-specific sensor frames.
    """
    if n_speakers < 1 or n_utts < 1 or duration_s <= 0:
        raise ValueError("n_speakers, n_utts and duration_s must be positive")
    utts = []
    for s in range(n_speakers):
        speaker_id = f"S{s + 1:02d}"
        rng_s = np.random.default_rng([seed, 101, s])
        centers = rng_s.uniform(-30.0, 30.0, N_CHANNELS)
        for u in range(n_utts):
            audio, ema, _ = _synth_utterance(s, u, duration_s, seed, centers)
            utts.append(
                Utterance(
                    speaker_id=speaker_id,
                    utterance_id=f"utt{u + 1:03d}",
                    audio=audio,
                    sample_rate_hz=AUDIO_RATE_HZ,
                    ema=EmaRecording(ema),
                )
            )
    return utts


# ---------------------------------------------------------------------------
# Corpus I/O
# ---------------------------------------------------------------------------

def write_utterance(root: Path | str, utt: Utterance) -> Path:
    """Write one utterance under ``<root>/<speaker>/<utt>/``."""
    d = Path(root) / utt.speaker_id / utt.utterance_id
    d.mkdir(parents=True, exist_ok=True)
    utt.audio.astype("<f4").tofile(d / "audio.f32")
    utt.ema.values.astype("<f4").tofile(d / "ema.f32")
    meta = {
        "sr_audio": int(utt.sample_rate_hz),
        "sr_ema": int(utt.ema.frame_rate_hz),
        "speaker": utt.speaker_id,
        "utt": utt.utterance_id,
        "T": int(utt.ema.n_frames),
    }
    (d / "meta.json").write_text(json.dumps(meta))
    return d


def write_corpus(utterances: list[Utterance], root: Path | str) -> Path:
    """Write a whole corpus plus its JSON-lines manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in utterances:
        write_utterance(root, utt)
        lines.append(
            json.dumps(
                {
                    "speaker": utt.speaker_id,
                    "utt": utt.utterance_id,
                    "dir": f"{utt.speaker_id}/{utt.utterance_id}",
                }
            )
        )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest_path: Path | str) -> list[UtteranceRef]:
    """Parse a JSON-lines manifest into utterance references."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    refs = []
    for ln, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            refs.append(
                UtteranceRef(
                    speaker_id=rec["speaker"],
                    utterance_id=rec["utt"],
                    directory=root / rec["dir"],
                )
            )
        except (KeyError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{manifest_path}:{ln}: malformed record ({exc})") from exc
    return refs


def load_utterance(ref: UtteranceRef) -> Utterance:
    """Load one utterance from disk; errors name the missing path."""
    d = ref.directory
    meta_path = d / "meta.json"
    for p in (meta_path, d / "audio.f32", d / "ema.f32"):
        if not p.exists():
            raise ManifestError(f"missing corpus file: {p}")
    meta = json.loads(meta_path.read_text())
    audio = np.fromfile(d / "audio.f32", dtype="<f4")
    ema_flat = np.fromfile(d / "ema.f32", dtype="<f4")
    T = int(meta["T"])
    if ema_flat.size != N_CHANNELS * T:
        raise ManifestError(
            f"{d / 'ema.f32'}: expected {N_CHANNELS * T} values, found {ema_flat.size}"
        )
    ema = EmaRecording(ema_flat.reshape(N_CHANNELS, T), float(meta["sr_ema"]))
    return Utterance(
        speaker_id=meta["speaker"],
        utterance_id=meta["utt"],
        audio=audio,
        sample_rate_hz=int(meta["sr_audio"]),
        ema=ema,
    )


def speaker_stats_path(root: Path | str, speaker_id: str) -> Path:
    return Path(root) / speaker_id / "norm_stats.json"


def load_speaker_stats(root: Path | str, speakers) -> dict[str, NormalizationState]:
    """Load each speaker's normalization stats file from a preprocessed corpus."""
    stats = {}
    for s in speakers:
        p = speaker_stats_path(root, s)
        if not p.exists():
            raise ManifestError(f"missing normalization stats: {p}")
        stats[s] = NormalizationState.load(p)
    return stats


def preprocess_corpus(manifest_path: Path | str, out_root: Path | str,
                      lowess_window: int = 21) -> Path:
    """Resample, smooth and normalize a raw corpus into ``out_root``.

    Audio is brought to 16 kHz and length-aligned to the trajectory;
    trajectories are lowess-smoothed and min-max normalized with stats
    fitted per speaker over that speaker's own (smoothed) data. Each
    speaker's stats are written next to their utterances. Deterministic,
    so rerunning over the same inputs rewrites identical files.
    """
    refs = read_manifest(manifest_path)
    out_root = Path(out_root)

    by_speaker: dict[str, list[UtteranceRef]] = {}
    for ref in refs:
        by_speaker.setdefault(ref.speaker_id, []).append(ref)

    processed: list[Utterance] = []
    for speaker in sorted(by_speaker):
        smoothed: list[Utterance] = []
        for ref in by_speaker[speaker]:
            utt = load_utterance(ref)
            if utt.sample_rate_hz != AUDIO_RATE_HZ:
                audio = resample_audio(utt.audio, utt.sample_rate_hz, AUDIO_RATE_HZ)
                utt = Utterance(utt.speaker_id, utt.utterance_id, audio, AUDIO_RATE_HZ, utt.ema)
            utt = align_audio_to_ema(utt)
            ema = lowess_smooth(utt.ema, lowess_window)
            smoothed.append(Utterance(utt.speaker_id, utt.utterance_id, utt.audio,
                                      utt.sample_rate_hz, ema))
        stats = fit_normalizer([u.ema for u in smoothed])
        for utt in smoothed:
            processed.append(Utterance(utt.speaker_id, utt.utterance_id, utt.audio,
                                       utt.sample_rate_hz, normalize(utt.ema, stats)))
        stats_dir = out_root / speaker
        stats_dir.mkdir(parents=True, exist_ok=True)
        stats.save(speaker_stats_path(out_root, speaker))

    return write_corpus(processed, out_root)
