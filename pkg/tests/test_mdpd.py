import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from artinv.errors import ShapeMismatch
from artinv.mdpd import (Mdpd, MdpdConfig, SubDiscriminator,
                         embedding_row_positions, reshape_for_duration,
                         undo_reshape)


def tiny_config(**overrides):
    base = dict(durations_ms=(60, 100), n_layers_per_sub=1, model_dim=32)
    base.update(overrides)
    return MdpdConfig(**base)


class TestConfig:
    def test_default_duration_frames(self):
        cfg = MdpdConfig()
        assert cfg.duration_frames == (6, 9, 10, 15, 18)
        assert cfg.augmented_channels == 24

    def test_fractional_duration_rejected(self):
        with pytest.raises(ValueError):
            MdpdConfig(durations_ms=(55,))


class TestChannelEmbeddings:
    def test_output_shape(self):
        sub = SubDiscriminator(MdpdConfig(), t_pd_frames=6)
        out = sub.insert_channel_embeddings(torch.randn(18, 600))
        assert out.shape == (24, 600)

    def test_embedding_row_positions(self):
        # brute-force simulation of the insertion, group by group
        n_channels, group = 18, 3
        rows, positions = [], []
        for s in range(6):
            rows.extend(range(s * group, (s + 1) * group))
            if s < 5:
                positions.append(len(rows) + len(positions))
        simulated = positions + [n_channels + 6 - 1]
        assert embedding_row_positions(18) == simulated == [3, 7, 11, 15, 19, 23]

    def test_original_rows_recoverable(self):
        sub = SubDiscriminator(MdpdConfig(), t_pd_frames=10)
        x = torch.randn(18, 77)
        out = sub.insert_channel_embeddings(x)
        keep = [i for i in range(24) if i not in embedding_row_positions(18)]
        assert torch.equal(out[keep], x)

    def test_embedding_rows_tile_with_period(self):
        t_pd = 6
        sub = SubDiscriminator(MdpdConfig(), t_pd_frames=t_pd)
        out = sub.insert_channel_embeddings(torch.zeros(18, 61))
        for row in embedding_row_positions(18):
            series = out[row]
            for t in range(61):
                assert series[t] == series[t % t_pd]

    def test_wrong_channel_count(self):
        sub = SubDiscriminator(MdpdConfig(), t_pd_frames=6)
        with pytest.raises(ShapeMismatch):
            sub.insert_channel_embeddings(torch.randn(17, 40))

    def test_xz_channel_layout(self):
        cfg = MdpdConfig(n_channels=12)
        sub = SubDiscriminator(cfg, t_pd_frames=6)
        out = sub.insert_channel_embeddings(torch.randn(12, 30))
        assert out.shape == (18, 30)
        assert embedding_row_positions(12) == [2, 5, 8, 11, 14, 17]


class TestReshape:
    def test_fig_arithmetic_60ms(self):
        tokens = reshape_for_duration(torch.randn(24, 600), 6)
        assert tokens.shape == (24 * 100, 6)

    def test_fig_arithmetic_100ms(self):
        tokens = reshape_for_duration(torch.randn(24, 600), 10)
        assert tokens.shape == (24 * 60, 10)

    def test_round_trip_exact(self):
        x = torch.randn(24, 600)
        back = undo_reshape(reshape_for_duration(x, 6), 24)
        assert torch.equal(back, x)

    def test_round_trip_with_padding(self):
        x = torch.randn(24, 601)
        t_pd = 15
        tokens = reshape_for_duration(x, t_pd)
        import math
        assert tokens.shape == (24 * math.ceil(601 / t_pd), t_pd)
        back = undo_reshape(tokens, 24)
        assert torch.equal(back[:, :601], x)
        assert torch.all(back[:, 601:] == 0.0)

    def test_channel_major_ordering(self):
        x = torch.arange(24 * 30, dtype=torch.float32).reshape(24, 30)
        tokens = reshape_for_duration(x, 10)
        # first three tokens are the three segments of channel 0
        assert torch.equal(tokens[0], x[0, :10])
        assert torch.equal(tokens[1], x[0, 10:20])
        assert torch.equal(tokens[2], x[0, 20:])
        assert torch.equal(tokens[3], x[1, :10])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=1, max_value=300),
           st.sampled_from([6, 9, 10, 15, 18]))
    def test_bijection_property(self, T, t_pd):
        rng = np.random.default_rng(T * 31 + t_pd)
        x = torch.from_numpy(rng.standard_normal((24, T)))
        tokens = reshape_for_duration(x, t_pd)
        back = undo_reshape(tokens, 24)
        assert torch.equal(back[:, :T], x)


class TestSubDiscriminator:
    def test_scores_and_feature_maps(self):
        torch.manual_seed(0)
        cfg = tiny_config(n_layers_per_sub=2)
        sub = SubDiscriminator(cfg, t_pd_frames=6).eval()
        scores, fmaps = sub(torch.randn(18, 600))
        assert scores.shape == (2400,)
        assert len(fmaps) == 3  # embed + 2 blocks
        assert all(m.shape == (2400, 32) for m in fmaps)

    def test_default_depth_gives_seven_feature_maps(self):
        torch.manual_seed(8)
        cfg = MdpdConfig(model_dim=32)  # depth stays at the default 6 layers
        sub = SubDiscriminator(cfg, t_pd_frames=6).eval()
        scores, fmaps = sub(torch.randn(18, 90))
        assert scores.shape == (24 * 15,)
        assert len(fmaps) == 7

    def test_eval_deterministic(self):
        torch.manual_seed(1)
        sub = SubDiscriminator(tiny_config(), t_pd_frames=10).eval()
        x = torch.randn(1, 18, 90)
        s1, _ = sub(x)
        s2, _ = sub(x)
        assert torch.equal(s1, s2)

    def test_gradients_reach_embedding_rows(self):
        torch.manual_seed(2)
        sub = SubDiscriminator(tiny_config(), t_pd_frames=6)
        sub.train()
        scores, _ = sub(torch.randn(1, 18, 90), mask_seed=3)
        scores.sum().backward()
        assert sub.split_rows.grad is not None and torch.any(sub.split_rows.grad != 0)
        assert sub.end_row.grad is not None and torch.any(sub.end_row.grad != 0)

    def test_token_embed_gradcheck(self):
        torch.manual_seed(3)
        embed = torch.nn.Linear(6, 16).double()
        tokens = torch.randn(12, 6, dtype=torch.float64, requires_grad=True)
        w = torch.randn(12, 16, dtype=torch.float64)
        from conftest import central_difference_check

        def fn():
            return (embed(tokens) * w).sum()

        assert central_difference_check(fn, [tokens] + list(embed.parameters())) < 1e-4

    def test_shift_by_t_pd_permutes_token_embeddings(self):
        torch.manual_seed(4)
        t_pd = 6
        sub = SubDiscriminator(tiny_config(), t_pd_frames=t_pd).eval()
        x = torch.randn(18, 90)
        rolled = torch.roll(x, shifts=t_pd, dims=-1)
        emb = sub.embed(reshape_for_duration(sub.insert_channel_embeddings(x), t_pd))
        emb_rolled = sub.embed(
            reshape_for_duration(sub.insert_channel_embeddings(rolled), t_pd))
        n_seg = 90 // t_pd
        per_channel = emb.reshape(24, n_seg, -1)
        per_channel_rolled = emb_rolled.reshape(24, n_seg, -1)
        assert torch.allclose(per_channel_rolled, torch.roll(per_channel, 1, dims=1),
                              atol=1e-6)


class TestMdpd:
    def test_five_result_pairs_default(self):
        torch.manual_seed(5)
        mdpd = Mdpd(MdpdConfig(n_layers_per_sub=1, model_dim=32)).eval()
        outs = mdpd(torch.randn(1, 18, 90))
        assert len(outs) == 5

    def test_per_duration_token_counts(self):
        torch.manual_seed(6)
        cfg = MdpdConfig(n_layers_per_sub=1, model_dim=32)
        mdpd = Mdpd(cfg).eval()
        T = 123
        outs = mdpd(torch.randn(1, 18, T))
        import math
        for (scores, _), t_pd in zip(outs, cfg.duration_frames):
            assert scores.shape == (1, 24 * math.ceil(T / t_pd))

    def test_fewer_durations_fewer_outputs(self):
        torch.manual_seed(7)
        mdpd = Mdpd(tiny_config()).eval()
        outs = mdpd(torch.randn(1, 18, 90))
        assert len(outs) == 2
