#!/usr/bin/env python3
"""Sweep every ablation variant over one split and tabulate PCC/RMSE/params."""
import argparse
from pathlib import Path

from artinv import data as D
from artinv import training
from artinv.cli import load_config, resolve_config
from artinv.evaluation import ABLATION_VARIANTS, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--variants", nargs="*", default=list(ABLATION_VARIANTS))
    parser.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    args = parser.parse_args()

    cfg = load_config(args.config, args.set)
    inverter_cfg, mdpd_cfg, train_cfg, backend = resolve_config(cfg)
    manifest = Path(cfg["data"]["manifest"])
    held_out = cfg["data"]["held_out"]
    refs = D.read_manifest(manifest)
    stats = D.load_speaker_stats(manifest.parent, {r.speaker_id for r in refs})
    _, train_refs, test_refs = D.loso_split(refs, held_out, train_cfg.seed)
    train_utts = [D.load_utterance(r) for r in train_refs]
    test_utts = [D.load_utterance(r) for r in test_refs]

    memo = {}

    def builder(utt_list, tag):
        def build(be):
            key = (tag, be.name, be.dim)
            if key not in memo:
                memo[key] = training.prepare_examples(utt_list, be,
                                                      train_cfg.channel_set)
            return memo[key]
        return build

    rows = []
    for name in args.variants:
        report, params, _ = run_ablation(
            name, builder(train_utts, "train"), builder(test_utts, "test"),
            inverter_cfg, mdpd_cfg, train_cfg, backend, Path(args.out),
            stats_by_speaker=stats)
        rows.append((name, params / 1e6, report.total_pcc, report.total_rmse))
        print(f"{name:12s} params={params / 1e6:6.2f}M "
              f"pcc={report.total_pcc:.4f} rmse={report.total_rmse:.3f}")

    print()
    print(f"{'variant':12s} {'params(M)':>9s} {'PCC':>7s} {'RMSE':>7s}")
    for name, params_m, pcc, rmse in rows:
        print(f"{name:12s} {params_m:9.2f} {pcc:7.4f} {rmse:7.3f}")


if __name__ == "__main__":
    main()
