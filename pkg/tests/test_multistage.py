import dataclasses

import pytest
import torch

from spexpp.multistage import SpExPlusPlus, forward_pipeline, match_level, run_stage


def build(cfg, seed=0, **overrides):
    torch.manual_seed(seed)
    return SpExPlusPlus(dataclasses.replace(cfg, **overrides))


def inputs(seed=0, batch=2, n=96, ref=80):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, n, generator=g), torch.randn(batch, ref, generator=g)


class TestStructure:
    def test_shared_and_per_stage_modules(self, tiny_config):
        model = build(tiny_config, num_stages=3)
        assert len(model.extractors) == len(model.decoders) == len(model.fusion) == 3
        assert model.extractors[0] is not model.extractors[1]
        assert model.fusion[0] is not model.fusion[1]
        names = [n for n, _ in model.named_parameters()]
        assert sum(n.startswith("encoder.") for n in names) == 3

    def test_fusion_initialised(self, tiny_config):
        model = build(tiny_config, num_stages=3)
        for w in model.fusion_weights():
            assert w == pytest.approx([0.8, 0.1, 0.1])

    def test_output_shapes(self, tiny_config):
        model = build(tiny_config)
        mix, ref = inputs()
        out = model(mix, ref)
        assert len(out) == 2 and out.final.shape == mix.shape
        assert out.stages[0].frame_embedding is None
        assert out.stages[1].frame_embedding.shape[-1] == tiny_config.frame_count(96)

    def test_batch_mismatch(self, tiny_config):
        model = build(tiny_config)
        with pytest.raises(ValueError, match="batch"):
            model(torch.randn(2, 96), torch.randn(3, 80))

    def test_stage_arguments(self, tiny_config):
        model = build(tiny_config)
        mix, ref = inputs()
        with pytest.raises(ValueError):
            run_stage(2, mix, ref, None, model)
        with pytest.raises(ValueError, match="range"):
            run_stage(3, mix, ref, None, model)


class TestStageBehaviour:
    def test_stage_one_identical_across_depths(self, tiny_config):
        one = build(tiny_config, num_stages=1)
        three = build(tiny_config, num_stages=3)
        three.load_state_dict(one.state_dict(), strict=False)
        mix, ref = inputs(1)
        a = one(mix, ref).stages[0].fused
        b = three(mix, ref).stages[0].fused
        assert torch.equal(a, b)

    def test_fused_is_weighted_sum(self, tiny_config):
        model = build(tiny_config)
        mix, ref = inputs(2)
        stage = model(mix, ref).stages[0]
        w = model.fusion[0].detach()
        expect = sum(w[i] * stage.per_scale_estimates[i] for i in range(3))
        assert torch.allclose(stage.fused, expect, atol=1e-7)

    def test_without_refinement_stage_two_sees_stage_one_inputs(self, tiny_config):
        model = build(tiny_config, use_utt=False, use_frame=False)
        mix, ref = inputs(3)
        out = model(mix, ref)
        assert torch.equal(out.stages[0].utt_embedding, out.stages[1].utt_embedding)
        assert out.stages[1].frame_embedding is None
        # identical stage weights -> identical stage outputs
        model.extractors[1].load_state_dict(model.extractors[0].state_dict())
        model.decoders[1].load_state_dict(model.decoders[0].state_dict())
        with torch.no_grad():
            model.fusion[1].copy_(model.fusion[0])
        out = model(mix, ref)
        assert torch.equal(out.stages[0].fused, out.stages[1].fused)

    def test_utt_only_drops_frame(self, tiny_config):
        model = build(tiny_config, use_frame=False)
        out = model(*inputs(4))
        assert out.stages[1].frame_embedding is None
        assert not torch.equal(out.stages[0].utt_embedding, out.stages[1].utt_embedding)

    def test_batch_permutation_equivariant(self, tiny_config):
        model = build(tiny_config).eval()
        mix, ref = inputs(5, batch=3)
        perm = torch.tensor([2, 0, 1])
        a = model(mix, ref).final
        b = model(mix[perm], ref[perm]).final
        assert torch.allclose(a[perm], b, atol=1e-6)

    def test_gradient_reaches_stage_one_through_stage_two(self, tiny_config):
        model = build(tiny_config)
        mix, ref = inputs(6)
        out = model(mix, ref)
        out.stages[1].fused.pow(2).sum().backward()
        assert model.extractors[0].mask_heads[0].weight.grad.abs().sum() > 0
        assert model.fusion[0].grad.abs().sum() > 0

    def test_match_level(self):
        est = torch.tensor([[2.0, -2.0, 2.0, -2.0]])
        ref = torch.tensor([[0.5, 0.5, -0.5, -0.5, 0.5, 0.5]])
        out = match_level(est, ref)
        assert out.pow(2).mean().sqrt().item() == pytest.approx(0.5)

    def test_numpy_input(self, tiny_config):
        model = build(tiny_config)
        out = forward_pipeline(torch.randn(96).numpy(), torch.randn(80).numpy(), model)
        assert out.final.shape == (1, 96)
