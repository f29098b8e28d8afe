"""Command-line entry point wiring the whole pipeline together.

Subcommands: synth, preprocess, features, train, eval, invert, ablate.
Every run writes a resolved-config snapshot next to its outputs, and every
failure exits nonzero with a single machine-parsable ``error[Code]:`` line.
The feature-cache root can come from the ``ARTINV_CACHE`` environment
variable when not given explicitly.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, features, training
from .errors import ArtinvError, ConfigError, ManifestError
from .inverter import InverterConfig
from .mdpd import MdpdConfig
from .training import TrainConfig

_CONFIG_SECTIONS = ("data", "features", "inverter", "mdpd", "train")
_DATA_KEYS = {"manifest", "held_out"}
_FEATURE_KEYS = {"backend", "dim", "cache"}


def default_config() -> dict:
    return {
        "data": {"manifest": None, "held_out": None},
        "features": {"backend": "stub", "dim": 1024,
                     "cache": os.environ.get("ARTINV_CACHE")},
        "inverter": asdict(InverterConfig()),
        "mdpd": asdict(MdpdConfig()),
        "train": asdict(TrainConfig()),
    }


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))} "
            f"(allowed: {', '.join(sorted(allowed))})")


def load_config(path: Path | str | None, overrides=()) -> dict:
    """Merge defaults, an optional JSON/TOML file, and dotted-key overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError as exc:
                raise ConfigError("TOML configs need Python 3.11+; use JSON") from exc
            file_cfg = tomllib.loads(path.read_text())
        else:
            try:
                file_cfg = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        _check_keys("config", file_cfg, _CONFIG_SECTIONS)
        for section, body in file_cfg.items():
            if body is None:
                cfg[section] = None
            else:
                if cfg[section] is None:
                    cfg[section] = {}
                cfg[section].update(body)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw_value = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in _CONFIG_SECTIONS:
            raise ConfigError(f"override key {dotted!r} must be <section>.<key> "
                              f"with section in {', '.join(_CONFIG_SECTIONS)}")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        if cfg[parts[0]] is None:
            cfg[parts[0]] = {}
        cfg[parts[0]][parts[1]] = value

    _check_keys("data", cfg["data"], _DATA_KEYS)
    _check_keys("features", cfg["features"], _FEATURE_KEYS)
    return cfg


def _build_dataclass(cls, body: dict, section: str):
    try:
        return cls(**body)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def resolve_config(cfg: dict):
    inverter = _build_dataclass(InverterConfig, cfg["inverter"], "inverter")
    mdpd = None
    if cfg["mdpd"] is not None:
        mdpd = _build_dataclass(MdpdConfig, cfg["mdpd"], "mdpd")
    train = _build_dataclass(TrainConfig, cfg["train"], "train")
    backend = features.backend_from_name(cfg["features"]["backend"],
                                         cfg["features"].get("dim"),
                                         cfg["features"].get("cache"))
    expected_channels = 12 if train.channel_set == "xz" else 18
    if inverter.out_channels != expected_channels:
        raise ConfigError(
            f"channel_set {train.channel_set!r} needs inverter.out_channels="
            f"{expected_channels}, got {inverter.out_channels}")
    if mdpd is not None and mdpd.n_channels != expected_channels:
        raise ConfigError(
            f"channel_set {train.channel_set!r} needs mdpd.n_channels="
            f"{expected_channels}, got {mdpd.n_channels}")
    return inverter, mdpd, train, backend


def _write_snapshot(out_dir: Path, command: str, cfg: dict, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "config": cfg}
    if extra:
        snapshot.update(extra)
    (out_dir / "resolved_config.json").write_text(json.dumps(snapshot, indent=1, default=str))


def _load_normalized_corpus(manifest: Path):
    refs = data_mod.read_manifest(manifest)
    utts = [data_mod.load_utterance(r) for r in refs]
    speakers = sorted({r.speaker_id for r in refs})
    stats = data_mod.load_speaker_stats(manifest.parent, speakers)
    return refs, utts, stats


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    utts = data_mod.synth_dataset(args.speakers, args.utts, args.duration, args.seed)
    manifest = data_mod.write_corpus(utts, args.out)
    _write_snapshot(Path(args.out), "synth",
                    {"speakers": args.speakers, "utts": args.utts,
                     "duration": args.duration, "seed": args.seed})
    print(f"wrote {len(utts)} utterances, manifest at {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = data_mod.preprocess_corpus(args.manifest, args.out,
                                          lowess_window=args.lowess_window)
    _write_snapshot(Path(args.out), "preprocess",
                    {"manifest": str(args.manifest),
                     "lowess_window": args.lowess_window})
    print(f"preprocessed corpus written, manifest at {manifest}")
    return 0


def cmd_features(args) -> int:
    if args.cache is None:
        raise ConfigError("no cache root: pass --cache or set ARTINV_CACHE")
    backend = features.backend_from_name(args.backend, args.dim, args.cache)
    if backend.name == "precomputed_ssl":
        raise ConfigError("precomputed_ssl caches are filled by an external "
                          "adapter; run it against the cache layout instead")
    refs = data_mod.read_manifest(Path(args.manifest))
    written = skipped = 0
    for ref in refs:
        audio_path = ref.directory / "audio.f32"
        if not args.force and features.cache_is_fresh(
                args.cache, backend.name, ref.speaker_id, ref.utterance_id,
                backend.dim, source_path=audio_path):
            skipped += 1
            continue
        utt = data_mod.load_utterance(ref)
        feat = features.extract(backend, utt)
        features.cache_write(args.cache, ref.speaker_id, ref.utterance_id, feat,
                             source_path=audio_path)
        written += 1
    _write_snapshot(Path(args.cache), "features",
                    {"backend": backend.name, "dim": backend.dim,
                     "manifest": str(args.manifest)})
    print(f"cache ready: {written} written, {skipped} fresh")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or ())
    if args.held_out:
        cfg["data"]["held_out"] = args.held_out
    inverter_cfg, mdpd_cfg, train_cfg, backend = resolve_config(cfg)
    if cfg["data"]["manifest"] is None:
        raise ConfigError("data.manifest is required for training")
    held_out = cfg["data"]["held_out"]
    if held_out is None:
        raise ConfigError("a held-out speaker is required (data.held_out or --held-out)")

    manifest = Path(cfg["data"]["manifest"])
    refs, utts, stats = _load_normalized_corpus(manifest)
    _, train_refs, test_refs = data_mod.loso_split(refs, held_out, train_cfg.seed)
    by_key = {(u.speaker_id, u.utterance_id): u for u in utts}
    train_utts = [by_key[(r.speaker_id, r.utterance_id)] for r in train_refs]
    test_utts = [by_key[(r.speaker_id, r.utterance_id)] for r in test_refs]

    train_ex = training.prepare_examples(train_utts, backend, train_cfg.channel_set)
    val_ex = training.prepare_examples(test_utts, backend, train_cfg.channel_set)

    out_dir = Path(args.out)
    _write_snapshot(out_dir, "train", cfg, {"held_out": held_out})
    result = training.fit(train_ex, val_ex, inverter_cfg, mdpd_cfg, train_cfg,
                          backend, out_dir, stats_by_speaker=stats,
                          held_out_speaker=held_out, resume_from=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"training done: checkpoint {result.checkpoint_path}, "
          f"val_pcc={last.get('val_pcc', float('nan')):.4f}")
    return 0


def cmd_eval(args) -> int:
    loaded = training.load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    refs, utts, stats = _load_normalized_corpus(manifest)
    use_xz = args.xz or loaded.train_config.channel_set == "xz"
    channel_set = "xz" if use_xz else "all"
    examples = training.prepare_examples(utts, loaded.backend, channel_set)
    indices = data_mod.xz_channel_indices() if use_xz else None
    report = evaluation.evaluate_examples(loaded.model, examples,
                                          stats_by_speaker=stats,
                                          channel_indices=indices)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    names = ([data_mod.CHANNEL_NAMES[i] for i in indices]
             if indices is not None else list(data_mod.CHANNEL_NAMES))
    (out_dir / "per_channel_pcc.csv").write_text(report.per_channel_csv(names))
    (out_dir / "report.txt").write_text(report.format_table() + "\n")
    _write_snapshot(out_dir, "eval", {"checkpoint": str(args.checkpoint),
                                      "manifest": str(args.manifest), "xz": use_xz})
    print(report.format_table())
    return 0


def _read_audio(path: Path, raw_rate: int | None):
    if path.suffix == ".f32":
        if raw_rate is None:
            raise ConfigError("raw .f32 audio needs --rate")
        return np.fromfile(path, dtype="<f4"), raw_rate
    from scipy.io import wavfile

    rate, wav = wavfile.read(path)
    if wav.ndim > 1:
        wav = wav[:, 0]
    if wav.dtype == np.int16:
        wav = wav.astype(np.float32) / 32768.0
    elif wav.dtype == np.int32:
        wav = wav.astype(np.float32) / 2147483648.0
    else:
        wav = wav.astype(np.float32)
    return wav, rate


def cmd_invert(args) -> int:
    loaded = training.load_checkpoint(args.checkpoint)
    wav_path = Path(args.wav)
    if not wav_path.exists():
        raise ManifestError(f"audio file not found: {wav_path}")
    audio, rate = _read_audio(wav_path, args.rate)
    if rate != data_mod.AUDIO_RATE_HZ:
        print(f"note: resampling input from {rate} Hz to {data_mod.AUDIO_RATE_HZ} Hz")
        audio = data_mod.resample_audio(audio, rate, data_mod.AUDIO_RATE_HZ)

    n_frames = int(round(len(audio) / data_mod.AUDIO_RATE_HZ * data_mod.EMA_RATE_HZ))
    placeholder = data_mod.Utterance(
        speaker_id="unknown", utterance_id=wav_path.stem, audio=audio,
        sample_rate_hz=data_mod.AUDIO_RATE_HZ,
        ema=data_mod.EmaRecording(np.zeros((data_mod.N_CHANNELS, max(n_frames, 1)),
                                           dtype=np.float32)))
    feat = features.extract(loaded.backend, placeholder)
    feat = features.align_to_ema_rate(feat, data_mod.EMA_RATE_HZ, max(n_frames, 1))
    pred = loaded.model.predict(feat.values)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred.astype("<f4").tofile(out_dir / "ema.f32")
    meta = {
        "sr_ema": data_mod.EMA_RATE_HZ,
        "T": int(pred.shape[1]),
        "channels": int(pred.shape[0]),
        "units": "normalized",
        "source_audio": str(wav_path),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta))
    _write_snapshot(out_dir, "invert", {"checkpoint": str(args.checkpoint),
                                        "wav": str(args.wav)})
    print(f"predicted trajectory [{pred.shape[0]}, {pred.shape[1]}] -> {out_dir / 'ema.f32'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set or ())
    inverter_cfg, mdpd_cfg, train_cfg, backend = resolve_config(cfg)
    if cfg["data"]["manifest"] is None or cfg["data"]["held_out"] is None:
        raise ConfigError("ablations need data.manifest and data.held_out")
    manifest = Path(cfg["data"]["manifest"])
    refs, utts, stats = _load_normalized_corpus(manifest)
    _, train_refs, test_refs = data_mod.loso_split(refs, cfg["data"]["held_out"],
                                                   train_cfg.seed)
    by_key = {(u.speaker_id, u.utterance_id): u for u in utts}
    train_utts = [by_key[(r.speaker_id, r.utterance_id)] for r in train_refs]
    test_utts = [by_key[(r.speaker_id, r.utterance_id)] for r in test_refs]

    cache: dict = {}

    def examples_for(utt_list, key):
        def build(be):
            memo_key = (key, be.name, be.dim)
            if memo_key not in cache:
                cache[memo_key] = training.prepare_examples(utt_list, be,
                                                            train_cfg.channel_set)
            return cache[memo_key]
        return build

    out_dir = Path(args.out)
    _write_snapshot(out_dir, "ablate", cfg, {"variant": args.variant})
    report, params, _ = evaluation.run_ablation(
        args.variant, examples_for(train_utts, "train"), examples_for(test_utts, "val"),
        inverter_cfg, mdpd_cfg, train_cfg, backend, out_dir,
        stats_by_speaker=stats)
    report.save_json(out_dir / f"{args.variant}_report.json")
    print(f"variant={args.variant} params={params / 1e6:.2f}M "
          f"pcc={report.total_pcc:.4f} rmse={report.total_rmse:.4f} ({report.rmse_units})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="artinv",
        description="Speaker-independent acoustic-to-articulatory inversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample, smooth, normalize a raw corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lowess-window", type=int, default=21)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("features", help="populate a feature cache")
    p.add_argument("--backend", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=os.environ.get("ARTINV_CACHE"),
                   help="cache root (default: $ARTINV_CACHE)")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train on a preprocessed corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--held-out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xz", action="store_true",
                   help="score only front-back and up-down channels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("invert", help="invert one audio file to a trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=None,
                   help="sample rate for raw .f32 input")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("ablate", help="train and score one ablation variant")
    p.add_argument("--variant", required=True, choices=evaluation.ABLATION_VARIANTS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ArtinvError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error[FileNotFound]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
