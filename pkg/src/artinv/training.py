"""End-to-end adversarial training: batching, alternating updates, critic
warm start, the warm-restart learning-rate schedule, checkpointing.

Everything random is keyed on (seed, epoch, step), so a run can be resumed
from a checkpoint and continue bit-identically in single-worker mode.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import pickle
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import evaluation
from .data import NormalizationState, Utterance, xz_channel_indices
from .errors import NonFiniteLoss, ShapeMismatch
from .features import FeatureBackendSpec, FeatureProjection, align_to_ema_rate, extract
from .inverter import Inverter, InverterConfig, _mix_seed
from .losses import (LossBundle, LossWeights, adv_d_loss, adv_g_loss, compose,
                     feature_matching_loss, recon_loss)
from .mdpd import Mdpd, MdpdConfig

CHECKPOINT_FORMAT = "artinv-checkpoint-v1"


@dataclass
class TrainConfig:
    batch_size: int = 8
    segment_frames: int = 180
    crops_per_utterance: int = 1
    max_epochs: int = 10
    disc_start_epoch: int = 2
    lr: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    scheduler_t0: int = 10
    scheduler_t_mult: int = 2
    min_lr: float = 1e-6
    seed: int = 0
    w_recon: float = 1.0
    w_adv: float = 1.0
    w_fm: float = 1.0
    channel_set: str = "all"  # or "xz"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.disc_start_epoch < 0:
            raise ValueError("disc_start_epoch must be >= 0")
        if self.segment_frames % 90 != 0:
            # 90 is the least common multiple-friendly crop unit for the
            # critic's token widths; padding still covers the rest.
            raise ValueError("segment_frames must be a multiple of 90")
        if self.batch_size < 1 or self.max_epochs < 0 or self.crops_per_utterance < 1:
            raise ValueError("batch_size/crops must be >= 1 and max_epochs >= 0")
        if self.channel_set not in ("all", "xz"):
            raise ValueError("channel_set must be 'all' or 'xz'")


def cosine_warm_restart_lr(epoch: int, base_lr: float, t0: int, t_mult: int,
                           min_lr: float) -> float:
    """Closed-form cosine annealing with warm restarts, evaluated per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    e, t_i = epoch, t0
    while e >= t_i:
        e -= t_i
        t_i *= t_mult
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * e / t_i)) / 2.0


# ---------------------------------------------------------------------------
# Example preparation and batching
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    """One utterance ready for the model: aligned features + normalized target."""

    speaker_id: str
    utterance_id: str
    features: np.ndarray  # [T, d]
    ema: np.ndarray       # [C, T]


def prepare_examples(utterances: list[Utterance], backend: FeatureBackendSpec,
                     channel_set: str = "all") -> list[TrainExample]:
    """Extract and frame-align features for already-normalized utterances."""
    indices = xz_channel_indices() if channel_set == "xz" else None
    examples = []
    for utt in utterances:
        feat = extract(backend, utt)
        feat = align_to_ema_rate(feat, utt.ema.frame_rate_hz, utt.ema.n_frames)
        ema = utt.ema.values.astype(np.float32)
        if indices is not None:
            ema = ema[indices]
        examples.append(TrainExample(utt.speaker_id, utt.utterance_id,
                                     feat.values, ema))
    return examples


@dataclass
class Batch:
    features: torch.Tensor        # (B, S, d)
    ema: torch.Tensor             # (B, S, C)
    lengths: torch.Tensor         # (B,) valid frames per row
    utterance_ids: list[str]
    speaker_ids: list[str]


def make_batches(examples: list[TrainExample], segment_frames: int, batch_size: int,
                 seed: int, epoch: int, crops_per_utterance: int = 1) -> list[Batch]:
    """Random fixed-length crops, shuffled; deterministic in (seed, epoch)."""
    rng = np.random.default_rng([seed, 7919, epoch])
    crops = []
    for ex in examples:
        T = ex.features.shape[0]
        if ex.ema.shape[1] != T:
            raise ShapeMismatch(
                f"{ex.utterance_id}: features have {T} frames, target has {ex.ema.shape[1]}"
            )
        for _ in range(crops_per_utterance):
            if T > segment_frames:
                start = int(rng.integers(0, T - segment_frames + 1))
                f = ex.features[start:start + segment_frames]
                e = ex.ema[:, start:start + segment_frames]
                valid = segment_frames
            else:
                f = np.zeros((segment_frames, ex.features.shape[1]), dtype=np.float32)
                f[:T] = ex.features
                e = np.zeros((ex.ema.shape[0], segment_frames), dtype=np.float32)
                e[:, :T] = ex.ema
                valid = T
            crops.append((f, e.T, valid, ex.utterance_id, ex.speaker_id))

    order = rng.permutation(len(crops))
    batches = []
    for i in range(0, len(order), batch_size):
        chunk = [crops[j] for j in order[i:i + batch_size]]
        batches.append(
            Batch(
                features=torch.from_numpy(np.stack([c[0] for c in chunk])),
                ema=torch.from_numpy(np.stack([c[1] for c in chunk]).astype(np.float32)),
                lengths=torch.tensor([c[2] for c in chunk], dtype=torch.long),
                utterance_ids=[c[3] for c in chunk],
                speaker_ids=[c[4] for c in chunk],
            )
        )
    return batches


# ---------------------------------------------------------------------------
# Model bundle and trainer
# ---------------------------------------------------------------------------

class InversionModel(nn.Module):
    """Projection layer plus inverter trunk, trained as one parameter group."""

    def __init__(self, projection: FeatureProjection, inverter: Inverter):
        super().__init__()
        self.projection = projection
        self.inverter = inverter

    def forward(self, features: torch.Tensor, mask_seed: int | None = None) -> torch.Tensor:
        return self.inverter(self.projection(features), mask_seed=mask_seed)

    @torch.no_grad()
    def predict(self, features: np.ndarray) -> np.ndarray:
        """Eval-mode inversion of one feature matrix ``[T, d]`` to ``[C, T]``."""
        was_training = self.training
        self.eval()
        out = self(torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32)))
        if was_training:
            self.train()
        return out.numpy().T


class Trainer:
    """Owns both optimizers and performs one alternating update per batch."""

    def __init__(self, model: InversionModel, mdpd: Mdpd | None, config: TrainConfig):
        self.model = model
        self.mdpd = mdpd
        self.config = config
        self.weights = LossWeights(recon=config.w_recon, adv_g=config.w_adv,
                                   adv_d=1.0, fm=config.w_fm)
        self.opt_inverter = torch.optim.AdamW(
            model.parameters(), lr=config.lr, betas=config.betas,
            weight_decay=config.weight_decay)
        self.opt_disc = None
        if mdpd is not None:
            self.opt_disc = torch.optim.AdamW(
                mdpd.parameters(), lr=config.lr, betas=config.betas,
                weight_decay=config.weight_decay)
        self.step_count = 0
        # (speaker_id, utterance_id) pairs that contributed to any update
        self.seen_utterance_ids: set[tuple[str, str]] = set()

    def set_epoch_lr(self, epoch: int) -> float:
        lr = cosine_warm_restart_lr(epoch, self.config.lr, self.config.scheduler_t0,
                                    self.config.scheduler_t_mult, self.config.min_lr)
        for opt in (self.opt_inverter, self.opt_disc):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
        return lr

    def adversarial_active(self, epoch: int) -> bool:
        return (self.mdpd is not None
                and epoch >= self.config.disc_start_epoch
                and (self.config.w_adv > 0.0 or self.config.w_fm > 0.0))

    def train_step(self, batch: Batch, epoch: int, step: int | None = None) -> LossBundle:
        cfg = self.config
        if step is None:
            step = self.step_count
        self.model.train()
        target = batch.ema

        g_mask_seed = _mix_seed(cfg.seed, epoch, step, 1)
        ema_hat = self.model(batch.features, mask_seed=g_mask_seed)
        recon = recon_loss(ema_hat, target)

        if self.adversarial_active(epoch):
            self.mdpd.train()
            real = target.transpose(1, 2)
            fake = ema_hat.transpose(1, 2)

            # Critic phase: the inverter output is detached, so no gradient
            # can reach inverter parameters here.
            d_seed = _mix_seed(cfg.seed, epoch, step, 2)
            self.opt_disc.zero_grad(set_to_none=True)
            real_out = self.mdpd(real, mask_seed=d_seed)
            fake_out = self.mdpd(fake.detach(), mask_seed=d_seed)
            adv_d = adv_d_loss([s for s, _ in real_out], [s for s, _ in fake_out])
            _check_finite("adv_d", adv_d)
            adv_d.backward()
            self.opt_disc.step()

            # Inverter phase against the freshly updated critic. Real and
            # fake passes share one mask seed so feature matching compares
            # like with like.
            g_seed = _mix_seed(cfg.seed, epoch, step, 3)
            self.opt_inverter.zero_grad(set_to_none=True)
            real_out = self.mdpd(real, mask_seed=g_seed)
            fake_out = self.mdpd(fake, mask_seed=g_seed)
            adv_g = adv_g_loss([s for s, _ in fake_out])
            fm = feature_matching_loss([m for _, m in real_out],
                                       [m for _, m in fake_out])
            total = cfg.w_adv * adv_g + cfg.w_recon * recon + cfg.w_fm * fm
            _check_finite("inverter objective", total)
            total.backward()
            self.opt_inverter.step()
            bundle = compose(recon.detach(), adv_g.detach(), adv_d.detach(),
                             fm.detach(), self.weights)
        else:
            self.opt_inverter.zero_grad(set_to_none=True)
            loss = cfg.w_recon * recon
            _check_finite("recon", loss)
            loss.backward()
            self.opt_inverter.step()
            bundle = compose(recon.detach(), 0.0, 0.0, 0.0, self.weights)

        self.step_count += 1
        self.seen_utterance_ids.update(zip(batch.speaker_ids, batch.utterance_ids))
        return bundle


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"{name} became {float(value.detach())}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _tensors_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _tensors_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_tensors_to_numpy(v) for v in obj]
        return type(obj)(converted) if isinstance(obj, tuple) else converted
    return obj


def _numpy_to_tensors(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: _numpy_to_tensors(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_numpy_to_tensors(v) for v in obj]
        return type(obj)(converted) if isinstance(obj, tuple) else converted
    return obj


def _config_hash(*dicts) -> str:
    blob = json.dumps(dicts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: Path | str, *, model: InversionModel, mdpd: Mdpd | None,
                    trainer: Trainer, inverter_config: InverterConfig,
                    mdpd_config: MdpdConfig | None, train_config: TrainConfig,
                    backend: FeatureBackendSpec, epochs_completed: int,
                    stats_by_speaker: dict[str, NormalizationState] | None = None) -> Path:
    """Write one self-contained, deterministic checkpoint file."""
    inv_cfg = asdict(inverter_config)
    mdpd_cfg = asdict(mdpd_config) if mdpd_config is not None else None
    train_cfg = asdict(train_config)
    backend_cfg = asdict(backend)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": _config_hash(inv_cfg, mdpd_cfg, train_cfg, backend_cfg),
        "inverter_config": inv_cfg,
        "mdpd_config": mdpd_cfg,
        "train_config": train_cfg,
        "backend": backend_cfg,
        "model_state": _tensors_to_numpy(model.state_dict()),
        "mdpd_state": _tensors_to_numpy(mdpd.state_dict()) if mdpd is not None else None,
        "opt_inverter_state": _tensors_to_numpy(trainer.opt_inverter.state_dict()),
        "opt_disc_state": (_tensors_to_numpy(trainer.opt_disc.state_dict())
                           if trainer.opt_disc is not None else None),
        "epochs_completed": int(epochs_completed),
        "step_count": int(trainer.step_count),
        "torch_rng_state": torch.get_rng_state().numpy(),
        "stats_by_speaker": ({s: st.to_json_dict() for s, st in stats_by_speaker.items()}
                             if stats_by_speaker else None),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = pickle.dumps(payload, protocol=4)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


@dataclass
class LoadedCheckpoint:
    model: InversionModel
    mdpd: Mdpd | None
    inverter_config: InverterConfig
    mdpd_config: MdpdConfig | None
    train_config: TrainConfig
    backend: FeatureBackendSpec
    epochs_completed: int
    step_count: int
    stats_by_speaker: dict[str, NormalizationState] | None
    raw: dict


def load_checkpoint(path: Path | str) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {payload.get('format')!r}")

    inverter_config = InverterConfig(**payload["inverter_config"])
    mdpd_config = (MdpdConfig(**payload["mdpd_config"])
                   if payload["mdpd_config"] is not None else None)
    train_config = TrainConfig(**payload["train_config"])
    backend = FeatureBackendSpec(**payload["backend"])

    # Module construction draws from the global RNG only to initialize
    # weights that are immediately overwritten; keep loading side-effect
    # free so save -> load -> save is byte-identical.
    rng_backup = torch.get_rng_state()
    try:
        model = InversionModel(FeatureProjection(backend.dim, inverter_config.model_dim),
                               Inverter(inverter_config))
        model.load_state_dict(_numpy_to_tensors(payload["model_state"]))
        mdpd = None
        if mdpd_config is not None and payload["mdpd_state"] is not None:
            mdpd = Mdpd(mdpd_config)
            mdpd.load_state_dict(_numpy_to_tensors(payload["mdpd_state"]))
    finally:
        torch.set_rng_state(rng_backup)

    stats = None
    if payload.get("stats_by_speaker"):
        stats = {s: NormalizationState.from_json_dict(d)
                 for s, d in payload["stats_by_speaker"].items()}
    return LoadedCheckpoint(
        model=model, mdpd=mdpd, inverter_config=inverter_config,
        mdpd_config=mdpd_config, train_config=train_config, backend=backend,
        epochs_completed=payload["epochs_completed"],
        step_count=payload["step_count"], stats_by_speaker=stats, raw=payload,
    )


# ---------------------------------------------------------------------------
# The full loop
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "step", "recon", "adv_g", "adv_d", "fm", "lr",
                  "val_pcc", "val_rmse")


@dataclass
class FitResult:
    checkpoint_path: Path
    history: list[dict]
    model: InversionModel
    mdpd: Mdpd | None
    trainer: Trainer


def fit(train_examples: list[TrainExample], val_examples: list[TrainExample],
        inverter_config: InverterConfig, mdpd_config: MdpdConfig | None,
        train_config: TrainConfig, backend: FeatureBackendSpec,
        out_dir: Path | str,
        stats_by_speaker: dict[str, NormalizationState] | None = None,
        held_out_speaker: str | None = None,
        resume_from: Path | str | None = None) -> FitResult:
    """Run the training protocol and leave a checkpoint plus metrics log behind.

    The critic sits out the first ``disc_start_epoch`` epochs (the inverter
    trains on reconstruction alone), then updates alternate critic-first
    within each step. The held-out speaker, when given, must never appear
    in a batch; this is enforced, not assumed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    channel_indices = (xz_channel_indices()
                       if train_config.channel_set == "xz" else None)

    start_epoch = 0
    history: list[dict] = []
    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        model, mdpd = loaded.model, loaded.mdpd
        trainer = Trainer(model, mdpd, train_config)
        trainer.opt_inverter.load_state_dict(
            _numpy_to_tensors(loaded.raw["opt_inverter_state"]))
        if trainer.opt_disc is not None and loaded.raw["opt_disc_state"] is not None:
            trainer.opt_disc.load_state_dict(
                _numpy_to_tensors(loaded.raw["opt_disc_state"]))
        trainer.step_count = loaded.step_count
        torch.set_rng_state(torch.from_numpy(loaded.raw["torch_rng_state"].copy()))
        start_epoch = loaded.epochs_completed
        if not metrics_path.exists():
            metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
    else:
        torch.manual_seed(train_config.seed)
        model = InversionModel(
            FeatureProjection(backend.dim, inverter_config.model_dim),
            Inverter(inverter_config),
        )
        mdpd = Mdpd(mdpd_config) if mdpd_config is not None else None
        trainer = Trainer(model, mdpd, train_config)
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")

    checkpoint_path = out_dir / "checkpoint.pkl"
    for epoch in range(start_epoch, train_config.max_epochs):
        lr = trainer.set_epoch_lr(epoch)
        batches = make_batches(train_examples, train_config.segment_frames,
                               train_config.batch_size, train_config.seed, epoch,
                               train_config.crops_per_utterance)
        sums = {"recon": 0.0, "adv_g": 0.0, "adv_d": 0.0, "fm": 0.0}
        for step_in_epoch, batch in enumerate(batches):
            if held_out_speaker is not None and held_out_speaker in batch.speaker_ids:
                raise RuntimeError(
                    f"held-out speaker {held_out_speaker} leaked into a training batch"
                )
            bundle = trainer.train_step(batch, epoch)
            sums["recon"] += bundle.recon
            sums["adv_g"] += bundle.adv_g
            sums["adv_d"] += bundle.adv_d
            sums["fm"] += bundle.fm
        n = max(len(batches), 1)

        val_pcc, val_rmse = float("nan"), float("nan")
        if val_examples:
            report = evaluation.evaluate_examples(
                model, val_examples, stats_by_speaker=stats_by_speaker,
                channel_indices=channel_indices)
            val_pcc, val_rmse = report.total_pcc, report.total_rmse

        row = {
            "epoch": epoch,
            "step": trainer.step_count,
            "recon": sums["recon"] / n,
            "adv_g": sums["adv_g"] / n,
            "adv_d": sums["adv_d"] / n,
            "fm": sums["fm"] / n,
            "lr": lr,
            "val_pcc": val_pcc,
            "val_rmse": val_rmse,
        }
        history.append(row)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in METRIC_COLUMNS])

        save_checkpoint(
            checkpoint_path, model=model, mdpd=mdpd, trainer=trainer,
            inverter_config=inverter_config, mdpd_config=mdpd_config,
            train_config=train_config, backend=backend,
            epochs_completed=epoch + 1, stats_by_speaker=stats_by_speaker)

    if not checkpoint_path.exists():
        save_checkpoint(
            checkpoint_path, model=model, mdpd=mdpd, trainer=trainer,
            inverter_config=inverter_config, mdpd_config=mdpd_config,
            train_config=train_config, backend=backend,
            epochs_completed=start_epoch, stats_by_speaker=stats_by_speaker)
    return FitResult(checkpoint_path=checkpoint_path, history=history,
                     model=model, mdpd=mdpd, trainer=trainer)
