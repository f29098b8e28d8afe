"""Correlation/error metrics, per-speaker reports and the ablation harness.

Aggregation hierarchy for the correlation score: channels are averaged
within an utterance, utterances within a speaker, speakers into the total,
all by unweighted means. The error metric is pooled over every frame and
channel and reported in millimeters when normalization stats are supplied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CHANNEL_NAMES, NormalizationState, denormalize_array, xz_channel_indices
from .errors import ConstantInput, ShapeMismatch
from .inverter import count_parameters

ABLATION_VARIANTS = ("proposed", "mfcc_input", "no_pnp", "no_local", "no_global",
                     "mlp", "no_mdpd")


def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation between two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ShapeMismatch("inputs must be equal-length vectors with >= 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise ConstantInput("correlation undefined for a zero-variance input")
    return float((xc * yc).sum() / denom)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_mm(ema_hat: np.ndarray, ema: np.ndarray, stats: NormalizationState,
            channel_indices: list[int] | None = None) -> float:
    """Root mean square error in millimeters between normalized trajectories."""
    return rmse(denormalize_array(ema_hat, stats, channel_indices),
                denormalize_array(ema, stats, channel_indices))


def _utterance_channel_pccs(ema_hat: np.ndarray, ema: np.ndarray) -> np.ndarray:
    """Per-channel correlations; zero-variance channels contribute 0."""
    out = np.zeros(ema.shape[0])
    for c in range(ema.shape[0]):
        if np.ptp(ema_hat[c]) == 0.0 or np.ptp(ema[c]) == 0.0:
            out[c] = 0.0
        else:
            out[c] = pcc(ema_hat[c], ema[c])
    return out


@dataclass
class EvalReport:
    per_speaker_pcc: dict[str, float]
    total_pcc: float
    total_rmse: float
    per_channel_pcc: np.ndarray
    n_utterances: int
    rmse_units: str  # "mm" or "normalized"

    def to_json_dict(self) -> dict:
        return {
            "per_speaker_pcc": self.per_speaker_pcc,
            "total_pcc": self.total_pcc,
            "total_rmse": self.total_rmse,
            "rmse_units": self.rmse_units,
            "per_channel_pcc": self.per_channel_pcc.tolist(),
            "n_utterances": self.n_utterances,
        }

    def save_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    def format_table(self) -> str:
        speakers = sorted(self.per_speaker_pcc)
        header = ["Speakers (PCC)"] + speakers + ["Total PCC", f"RMSE ({self.rmse_units})"]
        values = [""] + [f"{self.per_speaker_pcc[s]:.3f}" for s in speakers]
        values += [f"{self.total_pcc:.3f}", f"{self.total_rmse:.3f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return line(header) + "\n" + line(values)

    def per_channel_csv(self, channel_names=None) -> str:
        names = channel_names or list(CHANNEL_NAMES)[: len(self.per_channel_pcc)]
        rows = ["channel,pcc"]
        rows += [f"{n},{v:.6f}" for n, v in zip(names, self.per_channel_pcc)]
        return "\n".join(rows) + "\n"


def evaluate_examples(model, examples, stats_by_speaker=None,
                      channel_indices=None) -> EvalReport:
    """Score a model over prepared examples.

    ``model`` needs a ``predict(features) -> [C, T]`` method running in eval
    mode. RMSE is pooled over all frames; it is reported in millimeters when
    per-speaker stats are available, otherwise in normalized units.
    """
    if not examples:
        raise ValueError("nothing to evaluate")
    per_speaker_utt_pcc: dict[str, list[float]] = {}
    per_speaker_channel: dict[str, list[np.ndarray]] = {}
    sq_sum, n_values = 0.0, 0

    for ex in examples:
        pred = model.predict(ex.features)
        if pred.shape != ex.ema.shape:
            raise ShapeMismatch(
                f"{ex.utterance_id}: prediction {pred.shape} vs target {ex.ema.shape}")
        channel_pccs = _utterance_channel_pccs(pred, ex.ema)
        per_speaker_utt_pcc.setdefault(ex.speaker_id, []).append(float(channel_pccs.mean()))
        per_speaker_channel.setdefault(ex.speaker_id, []).append(channel_pccs)
        if stats_by_speaker is not None:
            stats = stats_by_speaker[ex.speaker_id]
            diff = (denormalize_array(pred, stats, channel_indices)
                    - denormalize_array(ex.ema, stats, channel_indices))
        else:
            diff = pred.astype(np.float64) - ex.ema.astype(np.float64)
        sq_sum += float((diff ** 2).sum())
        n_values += diff.size

    per_speaker_pcc = {s: float(np.mean(v)) for s, v in per_speaker_utt_pcc.items()}
    total_pcc = float(np.mean(list(per_speaker_pcc.values())))
    per_channel = np.mean(
        [np.mean(np.stack(rows), axis=0) for rows in per_speaker_channel.values()],
        axis=0,
    )
    return EvalReport(
        per_speaker_pcc=per_speaker_pcc,
        total_pcc=total_pcc,
        total_rmse=float(np.sqrt(sq_sum / n_values)),
        per_channel_pcc=per_channel,
        n_utterances=sum(len(v) for v in per_speaker_utt_pcc.values()),
        rmse_units="mm" if stats_by_speaker is not None else "normalized",
    )


evaluate_speaker = evaluate_examples


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    name: str
    description: str


VARIANT_DESCRIPTIONS = {
    "proposed": "full model",
    "mfcc_input": "cepstral features instead of the learned representation",
    "no_pnp": "plain attention/convolution blocks everywhere",
    "no_local": "attention-only blocks (no convolution module)",
    "no_global": "convolution-only blocks (no self-attention)",
    "mlp": "per-frame multilayer perceptron trunk",
    "no_mdpd": "reconstruction loss only, critic disabled",
}


def variant_configs(name, inverter_config, mdpd_config, train_config, backend):
    """Derive the four configs that realize one ablation variant."""
    from dataclasses import replace

    from .features import mfcc_backend

    if name not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown variant {name!r}; choose one of {', '.join(ABLATION_VARIANTS)}")
    inv, mdpd, train, be = inverter_config, mdpd_config, train_config, backend
    total = len(inverter_config.resolved_layout())
    if name == "mfcc_input":
        be = mfcc_backend()
    elif name == "no_pnp":
        inv = replace(inv, block_layout=("conformer",) * total)
    elif name == "no_local":
        inv = replace(inv, block_layout=("transformer",) * total)
    elif name == "no_global":
        inv = replace(inv, block_layout=("conv",) * total)
    elif name == "mlp":
        inv = replace(inv, trunk="mlp")
    elif name == "no_mdpd":
        mdpd = None
        train = replace(train, w_adv=0.0, w_fm=0.0)
    return inv, mdpd, train, be


def inverter_side_parameter_count(inverter_config, backend_dim: int) -> int:
    """Parameters of projection + trunk + head (critic excluded)."""
    from .features import FeatureProjection
    from .inverter import Inverter

    return (count_parameters(FeatureProjection(backend_dim, inverter_config.model_dim))
            + count_parameters(Inverter(inverter_config)))


def run_ablation(name: str, train_examples_by_backend, val_examples_by_backend,
                 inverter_config, mdpd_config, train_config, backend,
                 out_dir: Path | str, stats_by_speaker=None):
    """Train and evaluate one variant.

    Feature extraction depends on the backend, so examples are supplied via
    a callable ``backend -> examples`` (memoize upstream if reused).
    Returns ``(EvalReport, inverter-side parameter count, FitResult)``.
    """
    from . import training  # deferred: training imports this module

    inv, mdpd, train, be = variant_configs(name, inverter_config, mdpd_config,
                                           train_config, backend)
    result = training.fit(
        train_examples_by_backend(be), val_examples_by_backend(be),
        inv, mdpd, train, be, Path(out_dir) / name,
        stats_by_speaker=stats_by_speaker)
    report = evaluate_examples(result.model, val_examples_by_backend(be),
                               stats_by_speaker=stats_by_speaker,
                               channel_indices=(xz_channel_indices()
                                                if train.channel_set == "xz" else None))
    params = inverter_side_parameter_count(inv, be.dim)
    return report, params, result
