from __future__ import annotations

import numpy as np
import pytest
import torch

from crobo.errors import ConfigError, InputError
from crobo.model import (
    CroboModel,
    ModelConfig,
    build_model,
    loss_and_grad,
    masked_mse,
    prepare_pair_tensors,
    sincos_pos_table_2d,
)
from crobo.views import MaskSet, ViewConfig, make_view_pair, sample_mask

from conftest import rng


def micro_inputs(model: CroboModel, seed: int = 0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    n, L = model.cfg.n_patches, model.cfg.patch_len
    src = torch.rand(1, n, L, generator=g, dtype=dtype)
    visible = torch.tensor([[0, 3]])
    tgt_vis = torch.rand(1, 2, L, generator=g, dtype=dtype)
    tgt_norm = torch.rand(1, n, L, generator=g, dtype=dtype)
    masked = torch.tensor([[False, True, True, False]])
    return src, tgt_vis, visible, tgt_norm, masked


def hand_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, summed tensor by tensor."""
    de, dd, L = cfg.embed_dim_enc, cfg.embed_dim_dec, cfg.patch_len

    def block(d: int) -> int:
        hidden = int(d * cfg.mlp_ratio)
        ln = 2 * (2 * d)
        attn = (d * 3 * d + 3 * d) + (d * d + d)
        mlp = (d * hidden + hidden) + (hidden * d + d)
        return ln + attn + mlp

    encoder = (L * de + de) + de + de + cfg.depth_enc * block(de) + 2 * de
    decoder = (de * dd + dd) + dd + cfg.depth_dec * block(dd) + 2 * dd + (dd * L + L)
    return encoder + decoder


class TestInit:
    def test_byte_identical_for_same_cfg(self):
        a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=3))
        for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=4))
        assert not torch.equal(a.patch_proj.weight, b.patch_proj.weight)

    def test_layernorm_scales_one_biases_zero(self, desk_model):
        for name, p in desk_model.named_parameters():
            if "norm" in name and name.endswith("weight"):
                assert torch.equal(p, torch.ones_like(p))
            if "norm" in name and name.endswith("bias"):
                assert torch.equal(p, torch.zeros_like(p))

    @pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig.micro()])
    def test_param_count_matches_hand_derivation(self, cfg):
        model = build_model(cfg)
        assert sum(p.numel() for p in model.parameters()) == hand_param_count(cfg)

    def test_weights_within_truncation_bound(self, desk_model):
        assert desk_model.patch_proj.weight.abs().max() <= 0.04 + 1e-7

    def test_inconsistent_dims_rejected(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(embed_dim_enc=30, heads_enc=4))
        with pytest.raises(ConfigError):
            build_model(ModelConfig(embed_dim_enc=66, heads_enc=2))  # not divisible by 4

    def test_pos_tables_fixed_not_learned(self, desk_model):
        names = {n for n, _ in desk_model.named_parameters()}
        assert "enc_pos" not in names and "dec_pos" not in names
        assert desk_model.enc_pos.shape == (64, 64)

    def test_sincos_table_values(self):
        table = sincos_pos_table_2d(8, 2)
        # row-major: index 1 is (row 0, col 1): sin/cos of col=1 then row=0
        assert table.shape == (4, 8)
        assert table[0, 0] == pytest.approx(np.sin(0.0))
        assert table[1, 0] == pytest.approx(np.sin(1.0))
        assert table[2, 4] == pytest.approx(np.sin(1.0))  # row coordinate block


class TestEncode:
    def test_token_counts(self, desk_model):
        g = torch.Generator().manual_seed(0)
        patches = torch.rand(2, 6, desk_model.cfg.patch_len, generator=g)
        idx = torch.tensor([[0, 5, 9, 13, 40, 63], [1, 2, 3, 4, 5, 6]])
        cls, tokens = desk_model.encode(patches, idx)
        assert cls.shape == (2, 64)
        assert tokens.shape == (2, 6, 64)

    def test_full_grid_returns_n_tokens(self, desk_model):
        n = desk_model.cfg.n_patches
        patches = torch.rand(1, n, desk_model.cfg.patch_len)
        cls, tokens = desk_model.encode(patches, torch.arange(n))
        assert tokens.shape[1] == n

    def test_permutation_equivariance(self, micro_model_double):
        m = micro_model_double
        g = torch.Generator().manual_seed(1)
        patches = torch.rand(1, 3, m.cfg.patch_len, generator=g, dtype=torch.float64)
        idx = torch.tensor([[0, 2, 3]])
        perm = torch.tensor([1, 2, 0])
        with torch.no_grad():
            cls_a, tok_a = m.encode(patches, idx)
            cls_b, tok_b = m.encode(patches[:, perm], idx[:, perm])
        assert float((cls_a - cls_b).abs().max()) < 1e-9
        assert float((tok_a[:, perm] - tok_b).abs().max()) < 1e-9

    def test_input_validation(self, desk_model):
        L = desk_model.cfg.patch_len
        with pytest.raises(InputError):
            desk_model.encode(torch.rand(1, 2, L), torch.tensor([[0, 0]]))
        with pytest.raises(InputError):
            desk_model.encode(torch.rand(1, 2, L), torch.tensor([[0, 64]]))
        with pytest.raises(InputError):
            desk_model.encode(torch.rand(1, 2, L + 1), torch.tensor([[0, 1]]))

    def test_pure_function(self, desk_model):
        patches = torch.rand(1, 4, desk_model.cfg.patch_len, generator=torch.Generator().manual_seed(2))
        idx = torch.tensor([[7, 9, 11, 13]])
        a = desk_model.encode(patches, idx)
        b = desk_model.encode(patches, idx)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


class TestRestoreSequence:
    def test_output_length_always_n(self, desk_model):
        for k in (1, 7, 64):
            tokens = torch.rand(1, k, 64)
            idx = torch.arange(k).unsqueeze(0)
            seq = desk_model.restore_sequence(tokens, idx)
            assert seq.shape == (1, 64, 48)

    def test_no_mask_tokens_at_ratio_zero(self, desk_model):
        n = desk_model.cfg.n_patches
        tokens = torch.rand(1, n, 64)
        seq = desk_model.restore_sequence(tokens, torch.arange(n).unsqueeze(0))
        expected = desk_model.enc2dec(tokens) + desk_model.dec_pos
        assert torch.equal(seq, expected)

    def test_masked_positions_share_the_mask_token(self, desk_model):
        tokens = torch.rand(1, 2, 64)
        idx = torch.tensor([[3, 10]])
        seq = desk_model.restore_sequence(tokens, idx)
        pre_pos = seq - desk_model.dec_pos
        masked_positions = [i for i in range(64) if i not in (3, 10)]
        for i in masked_positions:
            assert torch.allclose(pre_pos[0, i], desk_model.mask_token, atol=1e-6)

    def test_key_mismatch_rejected(self, desk_model):
        with pytest.raises(InputError):
            desk_model.restore_sequence(torch.rand(1, 2, 64), torch.tensor([[1, 2, 3]]))


class TestDecode:
    def test_output_shape(self, desk_model):
        pred = desk_model.decode(torch.rand(1, 64), torch.rand(1, 64, 48))
        assert pred.shape == (1, 64, desk_model.cfg.patch_len)

    def test_wrong_restored_length_rejected(self, desk_model):
        with pytest.raises(InputError):
            desk_model.decode(torch.rand(1, 64), torch.rand(1, 63, 48))

    def test_bottleneck_sensitivity(self, desk_model):
        g = torch.Generator().manual_seed(3)
        restored = torch.rand(1, 64, 48, generator=g)
        with torch.no_grad():
            a = desk_model.decode(torch.rand(1, 64, generator=g), restored)
            b = desk_model.decode(torch.rand(1, 64, generator=g), restored)
        assert float((a - b).abs().max()) > 0.0

    def test_determinism(self, desk_model):
        g = torch.Generator().manual_seed(4)
        bott, restored = torch.rand(1, 64, generator=g), torch.rand(1, 64, 48, generator=g)
        assert torch.equal(desk_model.decode(bott, restored), desk_model.decode(bott, restored))


class TestMaskedMse:
    def test_zero_when_equal(self):
        x = torch.rand(1, 4, 12)
        masked = torch.tensor([[True, True, False, False]])
        assert float(masked_mse(x, x.clone(), masked)) == 0.0

    def test_one_patch_off_by_one(self):
        pred = torch.zeros(1, 4, 192)
        target = torch.zeros(1, 4, 192)
        pred[0, 2] = 1.0
        masked = torch.tensor([[False, False, True, False]])
        assert float(masked_mse(pred, target, masked)) == 192.0

    def test_mean_over_masked_patches(self):
        pred = torch.zeros(1, 2, 8)
        target = torch.zeros(1, 2, 8)
        pred[0, 0, :3] = 1.0  # squared norm 3
        pred[0, 1, 0] = 2.0  # squared norm 5
        pred[0, 1, 1] = 1.0
        masked = torch.tensor([[True, True]])
        assert float(masked_mse(pred, target, masked)) == 4.0

    def test_empty_mask_warns_and_returns_zero(self):
        x = torch.rand(1, 4, 12)
        with pytest.warns(RuntimeWarning):
            loss = masked_mse(x, torch.rand(1, 4, 12), torch.zeros(1, 4, dtype=torch.bool))
        assert float(loss) == 0.0

    def test_accepts_mask_set(self):
        x = torch.zeros(4, 12)
        y = torch.zeros(4, 12)
        y[1] = 1.0
        mask = MaskSet(masked=np.array([1]), visible=np.array([0, 2, 3]), ratio=0.25)
        assert float(masked_mse(x, y, mask)) == 12.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            masked_mse(torch.rand(1, 4, 12), torch.rand(1, 4, 13), torch.ones(1, 4, dtype=torch.bool))


def make_pair_and_mask(clips, model, ratio=0.9, seed=0):
    vcfg = ViewConfig(view_size=model.cfg.view_size, patch_size=model.cfg.patch_size, mask_ratio=ratio)
    pair = make_view_pair(clips[0], 2, "crop", rng(seed), vcfg)
    mask = sample_mask(model.cfg.n_patches, ratio, rng(seed + 1))
    return pair, mask


class TestLossAndGrad:
    def test_loss_matches_recomputed_masked_mse(self, desk_model, tiny_clips):
        pair, mask = make_pair_and_mask(tiny_clips, desk_model)
        loss, _ = loss_and_grad(desk_model, pair, mask)
        pt = prepare_pair_tensors(pair, mask, 8)
        with torch.no_grad():
            pred = desk_model(pt.source_patches, pt.target_visible, pt.visible_idx)
        again = float(masked_mse(pred, pt.target_norm.unsqueeze(0), pt.masked_flags))
        assert loss == pytest.approx(again, rel=1e-6)

    def test_every_parameter_gets_a_gradient(self, desk_model, tiny_clips):
        pair, mask = make_pair_and_mask(tiny_clips, desk_model)
        _, grads = loss_and_grad(desk_model, pair, mask)
        assert set(grads) == {n for n, _ in desk_model.named_parameters()}
        assert all(torch.isfinite(g).all() for g in grads.values())

    def test_output_head_bias_gradient_hand_derived(self, tiny_clips):
        # with a zeroed output head the predictions vanish, so the chain rule
        # gives d(loss)/d(bias) = -2 * mean over masked patches of the target
        model = build_model(ModelConfig(seed=1))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        pair, mask = make_pair_and_mask(tiny_clips, model)
        _, grads = loss_and_grad(model, pair, mask)
        pt = prepare_pair_tensors(pair, mask, 8)
        expected = -2.0 * pt.target_norm[pt.masked_flags].mean(dim=0)
        assert float((grads["head.bias"] - expected).abs().max()) < 1e-6

    def test_siamese_gradient_additivity(self, micro_model_double, tiny_clips):
        # encoder gradients are the sum of the source-pass and target-pass
        # contributions, isolated here by detaching the other pass
        m = micro_model_double
        vcfg = ViewConfig(view_size=m.cfg.view_size, patch_size=m.cfg.patch_size, mask_ratio=0.5)
        from crobo.synthvideo import ClipConfig, generate_clip

        clip = generate_clip(4, ClipConfig(frame_size=32))
        pair = make_view_pair(clip, 1, "crop", rng(0), vcfg)
        mask = sample_mask(m.cfg.n_patches, 0.5, rng(1))
        pt = prepare_pair_tensors(pair, mask, m.cfg.patch_size, dtype=torch.float64)
        all_idx = torch.arange(m.cfg.n_patches)

        def run(detach_source: bool, detach_target: bool):
            m.zero_grad(set_to_none=True)
            src_cls, _ = m.encode(pt.source_patches, all_idx)
            _, tgt_tokens = m.encode(pt.target_visible, pt.visible_idx)
            if detach_source:
                src_cls = src_cls.detach()
            if detach_target:
                tgt_tokens = tgt_tokens.detach()
            restored = m.restore_sequence(tgt_tokens, pt.visible_idx)
            pred = m.decode(src_cls, restored)
            loss = masked_mse(pred, pt.target_norm.unsqueeze(0), pt.masked_flags)
            loss.backward()
            return {
                n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in m.named_parameters()
            }

        total = run(False, False)
        source_only = run(False, True)
        target_only = run(True, False)
        enc_tensors = [n for n, _ in m.named_parameters() if n.startswith(("enc_blocks", "patch_proj", "enc_norm"))]
        assert enc_tensors
        for name in enc_tensors:
            combined = source_only[name] + target_only[name]
            assert float((combined - total[name]).abs().max()) < 1e-12

    def test_gradient_check_fast(self, micro_model_double, tiny_clips):
        # spot-check central differences on a dozen entries; the full 200+
        # parameter sweep runs in the acceptance suite
        m = micro_model_double
        from crobo.synthvideo import ClipConfig, generate_clip

        clip = generate_clip(8, ClipConfig(frame_size=32))
        vcfg = ViewConfig(view_size=m.cfg.view_size, patch_size=m.cfg.patch_size, mask_ratio=0.5)
        pair = make_view_pair(clip, 1, "crop", rng(2), vcfg)
        mask = sample_mask(m.cfg.n_patches, 0.5, rng(3))
        _, grads = loss_and_grad(m, pair, mask)
        pt = prepare_pair_tensors(pair, mask, m.cfg.patch_size, dtype=torch.float64)

        def loss_value() -> float:
            with torch.no_grad():
                pred = m(pt.source_patches, pt.target_visible, pt.visible_idx)
                return float(masked_mse(pred, pt.target_norm.unsqueeze(0), pt.masked_flags))

        g = rng(4)
        names = [n for n, _ in m.named_parameters()]
        for name in (names[0], names[len(names) // 2], names[-1], "mask_token", "cls_token", "head.bias"):
            p = dict(m.named_parameters())[name]
            flat = p.detach().view(-1)
            for j in g.integers(0, flat.numel(), size=2):
                orig = float(flat[j])
                h = 1e-5
                with torch.no_grad():
                    flat[j] = orig + h
                up = loss_value()
                with torch.no_grad():
                    flat[j] = orig - h
                down = loss_value()
                with torch.no_grad():
                    flat[j] = orig
                fd = (up - down) / (2 * h)
                ad = float(grads[name].view(-1)[j])
                assert abs(fd - ad) / max(abs(fd), abs(ad), 1e-4) < 1e-4


class TestInformationFlow:
    def test_predictions_depend_on_source_at_high_ratio(self, desk_model, tiny_clips):
        pair, mask = make_pair_and_mask(tiny_clips, desk_model, ratio=0.95)
        pt = prepare_pair_tensors(pair, mask, 8)
        with torch.no_grad():
            a = desk_model(pt.source_patches, pt.target_visible, pt.visible_idx)
            other = torch.rand_like(pt.source_patches)
            b = desk_model(other, pt.target_visible, pt.visible_idx)
        assert float((a - b).abs().max()) > 0.0

    def test_numerical_stability_random_forwards(self):
        m = build_model(ModelConfig.micro(seed=2))
        g = torch.Generator().manual_seed(0)
        n, L = m.cfg.n_patches, m.cfg.patch_len
        with torch.no_grad():
            for _ in range(1000):
                src = torch.rand(1, n, L, generator=g) * 4 - 2
                vis = torch.rand(1, 2, L, generator=g) * 4 - 2
                pred = m(src, vis, torch.tensor([[0, 2]]))
                assert bool(torch.isfinite(pred).all())
