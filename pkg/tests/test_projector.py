"""Soft mixture-of-experts projector: routing simplex, convexity, and
direct recomputation of the mixture."""

import numpy as np
import pytest
import torch

from neuroalign import (ConfigurationError, MoEConfig, MoEProjector,
                        NumericsError)


def _projector(**overrides) -> MoEProjector:
    base = dict(n_experts=4, in_dim=8, out_dim=6, router_hidden=8)
    base.update(overrides)
    torch.manual_seed(0)
    return MoEProjector(MoEConfig(**base))


def _zero_router(proj: MoEProjector):
    with torch.no_grad():
        for p in proj.router_net.parameters():
            p.zero_()


class TestMoEConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            MoEConfig(n_experts=0)
        with pytest.raises(ConfigurationError):
            MoEConfig(out_dim=1)
        with pytest.raises(ConfigurationError):
            MoEConfig(routing="topk")

    def test_hidden_defaults_to_4x(self):
        assert MoEConfig(out_dim=32).hidden == 128

    def test_dict_round_trip(self):
        cfg = MoEConfig(n_experts=2, in_dim=8, out_dim=4, routing="sigmoid_norm")
        assert MoEConfig.from_dict(cfg.to_dict()) == cfg


class TestRouting:
    def test_rows_on_simplex(self):
        proj = _projector()
        weights = proj.route(torch.randn(64, 8)).weights
        assert weights.shape == (64, 4)
        assert (weights >= 0).all()
        np.testing.assert_allclose(weights.sum(dim=-1).detach().numpy(), 1.0,
                                   atol=1e-6)
        weights_rw = proj.route(torch.randn(64, 8))
        weights_rw.validate()

    def test_zero_router_is_uniform(self):
        proj = _projector()
        _zero_router(proj)
        weights = proj.route(torch.randn(16, 8)).weights
        np.testing.assert_allclose(weights.detach().numpy(), 0.25, atol=1e-7)

    def test_single_expert_routes_everything(self):
        proj = _projector(n_experts=1)
        weights = proj.route(torch.randn(5, 8)).weights
        np.testing.assert_array_equal(weights.detach().numpy(),
                                      np.ones((5, 1), np.float32))

    def test_bias_only_logits_match_softmax(self):
        # zero weights, bias (1, 2): softmax gives (0.26894, 0.73106)
        proj = _projector(n_experts=2)
        _zero_router(proj)
        with torch.no_grad():
            proj.router_net[-1].bias.copy_(torch.tensor([1.0, 2.0]))
        weights = proj.route(torch.randn(3, 8)).weights
        np.testing.assert_allclose(
            weights.detach().numpy(),
            np.tile([0.26894142, 0.73105858], (3, 1)), atol=5e-5)

    def test_sigmoid_norm_rows_on_simplex(self):
        proj = _projector(routing="sigmoid_norm")
        proj.route(torch.randn(32, 8)).validate()

    def test_sigmoid_norm_bias_oracle(self):
        proj = _projector(n_experts=2, routing="sigmoid_norm")
        _zero_router(proj)
        with torch.no_grad():
            proj.router_net[-1].bias.copy_(torch.tensor([1.0, 2.0]))
        weights = proj.route(torch.randn(1, 8)).weights[0].detach().numpy()
        s = 1.0 / (1.0 + np.exp([-1.0, -2.0]))
        np.testing.assert_allclose(weights, s / s.sum(), atol=5e-5)

    def test_non_finite_input_raises(self):
        proj = _projector()
        bad = torch.full((2, 8), float("inf"))
        with pytest.raises(NumericsError):
            proj.route(bad)
        with pytest.raises(NumericsError):
            proj(bad)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            _projector().route(torch.randn(2, 5))


class TestProjection:
    def test_output_shape_and_1d_promotion(self):
        proj = _projector()
        assert proj(torch.randn(10, 8)).shape == (10, 6)
        assert proj(torch.randn(8)).shape == (1, 6)

    def test_single_expert_equals_expert(self):
        proj = _projector(n_experts=1)
        x = torch.randn(7, 8)
        assert torch.allclose(proj(x), proj.experts[0](x), atol=1e-6)

    def test_identical_experts_ignore_routing(self):
        proj = _projector()
        with torch.no_grad():
            ref = proj.experts[0].state_dict()
            for e in proj.experts[1:]:
                e.load_state_dict(ref)
        x = torch.randn(9, 8)
        assert torch.allclose(proj(x), proj.experts[0](x), atol=1e-5)

    def test_mixture_recomputed_directly(self):
        # uniform two-expert routing: Z must equal (E1(x) + E2(x)) / 2
        proj = _projector(n_experts=2)
        _zero_router(proj)
        x = torch.randn(6, 8)
        expected = 0.5 * proj.experts[0](x) + 0.5 * proj.experts[1](x)
        assert torch.allclose(proj(x), expected, atol=1e-6)

    def test_weighted_recombination_oracle(self):
        proj = _projector()
        x = torch.randn(12, 8)
        w = proj.route(x).weights.detach().numpy()
        outs = np.stack([e(x).detach().numpy() for e in proj.experts], axis=1)
        expected = (w[:, :, None] * outs).sum(axis=1)
        np.testing.assert_allclose(proj(x).detach().numpy(), expected,
                                   atol=1e-6)

    def test_output_in_expert_convex_hull(self):
        proj = _projector()
        x = torch.randn(20, 8)
        outs = torch.stack([e(x) for e in proj.experts], dim=1)
        z = proj(x)
        assert (z >= outs.min(dim=1).values - 1e-5).all()
        assert (z <= outs.max(dim=1).values + 1e-5).all()

    def test_expert_permutation_equivariance(self):
        # permuting experts together with router output rows is a no-op
        proj = _projector()
        x = torch.randn(5, 8)
        baseline = proj(x).detach().clone()

        perm = [2, 0, 3, 1]
        states = [{k: v.clone() for k, v in proj.experts[j].state_dict().items()}
                  for j in perm]
        with torch.no_grad():
            for e, st in zip(proj.experts, states):
                e.load_state_dict(st)
            last = proj.router_net[-1]
            last.weight.copy_(last.weight[perm].clone())
            last.bias.copy_(last.bias[perm].clone())
        assert torch.allclose(proj(x), baseline, atol=1e-5)
