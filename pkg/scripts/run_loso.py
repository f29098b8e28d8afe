#!/usr/bin/env python3
"""Full leave-one-speaker-out protocol over a preprocessed corpus.

Trains one model per speaker (that speaker held out), evaluates each on its
unseen speaker, and prints a per-speaker correlation table plus totals. With
the default desk configuration this runs on a synthetic corpus in minutes;
point it at a real preprocessed corpus and a precomputed_ssl cache for the
full-scale protocol.
"""
import argparse
import json
from pathlib import Path

from artinv import data as D
from artinv import evaluation, training
from artinv.cli import load_config, resolve_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="JSON config (see README)")
    parser.add_argument("--out", required=True)
    parser.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    args = parser.parse_args()

    cfg = load_config(args.config, args.set)
    inverter_cfg, mdpd_cfg, train_cfg, backend = resolve_config(cfg)
    manifest = Path(cfg["data"]["manifest"])
    refs = D.read_manifest(manifest)
    speakers = sorted({r.speaker_id for r in refs})
    stats = D.load_speaker_stats(manifest.parent, speakers)
    utts = {(r.speaker_id, r.utterance_id): D.load_utterance(r) for r in refs}

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    per_speaker = {}
    for held_out in speakers:
        _, train_refs, test_refs = D.loso_split(refs, held_out, train_cfg.seed)
        train_ex = training.prepare_examples(
            [utts[(r.speaker_id, r.utterance_id)] for r in train_refs],
            backend, train_cfg.channel_set)
        test_ex = training.prepare_examples(
            [utts[(r.speaker_id, r.utterance_id)] for r in test_refs],
            backend, train_cfg.channel_set)
        result = training.fit(train_ex, test_ex, inverter_cfg, mdpd_cfg, train_cfg,
                              backend, out_root / held_out, stats_by_speaker=stats,
                              held_out_speaker=held_out)
        report = evaluation.evaluate_examples(result.model, test_ex,
                                              stats_by_speaker=stats)
        per_speaker[held_out] = report.to_json_dict()
        print(f"{held_out}: pcc={report.total_pcc:.4f} "
              f"rmse={report.total_rmse:.3f} {report.rmse_units}")

    totals = {
        "per_speaker_pcc": {s: r["total_pcc"] for s, r in per_speaker.items()},
        "total_pcc": sum(r["total_pcc"] for r in per_speaker.values()) / len(per_speaker),
        "total_rmse": sum(r["total_rmse"] for r in per_speaker.values()) / len(per_speaker),
    }
    (out_root / "loso_summary.json").write_text(json.dumps(totals, indent=1))
    print(f"total: pcc={totals['total_pcc']:.4f} rmse={totals['total_rmse']:.3f}")


if __name__ == "__main__":
    main()
