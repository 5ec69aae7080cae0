import numpy as np
import pytest
import torch

from defusion.denoiser import (
    AdaptiveNormZero,
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    InstructionAdapter,
    TimeEmbedding,
    irb_features,
    load_denoiser,
    predict_eps,
    save_denoiser,
    sinusoidal_features,
)
from defusion.diffusion import NoiseSchedule, dsm_loss
from defusion.errors import ContractViolation


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return Denoiser(DenoiserConfig.tiny())


def tiny_inputs(batch=2, size=8, code_dim=6, gen_seed=1, dtype=torch.float32):
    gen = torch.Generator().manual_seed(gen_seed)
    y = torch.randn(batch, 3, size, size, generator=gen, dtype=dtype)
    t = torch.rand(batch, generator=gen, dtype=dtype) * 0.9 + 0.05
    lq = torch.rand(batch, 3, size, size, generator=gen, dtype=dtype) * 2 - 1
    code = torch.randn(batch, 16, code_dim, generator=gen, dtype=dtype)
    return y, t, lq, code


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ContractViolation):
            DenoiserConfig(levels=1, channel_multipliers=(1,))
        with pytest.raises(ContractViolation):
            DenoiserConfig(levels=2, channel_multipliers=(1, 2), via_dim=30, num_heads=4)
        with pytest.raises(ContractViolation):
            DenoiserConfig(levels=2, channel_multipliers=(1,))
        with pytest.raises(ContractViolation):
            DenoiserConfig(levels=2, channel_multipliers=(1, 2), attention_levels=(5,))

    def test_tiny_under_5k_params(self, tiny_model):
        assert tiny_model.num_params <= 5000

    def test_toy_under_2m_params(self):
        torch.manual_seed(0)
        model = Denoiser(DenoiserConfig.toy())
        assert model.num_params <= 2_000_000


class TestTimeEmbedding:
    def test_deterministic_and_distinct(self):
        torch.manual_seed(3)
        emb = TimeEmbedding(16)
        t0 = torch.tensor([0.0])
        t1 = torch.tensor([1.0])
        a = emb(t0)
        b = emb(t0)
        assert torch.equal(a, b)
        assert (emb(t1) - a).norm() > 0

    def test_feature_lipschitz_bound(self):
        # |features(t) - features(t+1e-6)| < 1e-3, guaranteed by the
        # frequency cap: slope <= max_freq * ||unit sines|| ~ 550
        t = torch.linspace(0, 1 - 1e-6, 101, dtype=torch.float64)
        a = sinusoidal_features(t, 64)
        b = sinusoidal_features(t + 1e-6, 64)
        assert (a - b).norm(dim=1).max() < 1e-3

    def test_embedding_lipschitz_at_default_init(self):
        torch.manual_seed(3)
        emb = TimeEmbedding(64).double()
        t = torch.linspace(0, 1 - 1e-6, 101, dtype=torch.float64)
        a = emb(t)
        b = emb(t + 1e-6)
        assert (a - b).norm(dim=1).max() < 1e-3

    def test_range_checked(self):
        emb = TimeEmbedding(16)
        with pytest.raises(ContractViolation):
            emb(torch.tensor([1.5]))


class TestRestorationBridge:
    def test_per_level_shapes(self, tiny_model):
        _, _, lq, _ = tiny_inputs()
        feats = irb_features(tiny_model, lq)
        assert len(feats) == tiny_model.cfg.levels
        for level, feat in enumerate(feats):
            assert feat.shape[-1] == 8 // (2**level)

    def test_zero_input_zero_features(self, tiny_model):
        feats = irb_features(tiny_model, torch.zeros(1, 3, 8, 8))
        for feat in feats:
            assert torch.all(feat == 0)


class TestAdaptiveNormZero:
    def test_identity_at_init(self):
        torch.manual_seed(1)
        block = AdaptiveNormZero(8, 4, groups=4)
        h = torch.randn(2, 8, 6, 6)
        feat = torch.randn(2, 4, 6, 6)
        assert torch.equal(block(h, feat), block(h, None))

    def test_forced_zero_modulation_is_identity(self):
        torch.manual_seed(1)
        block = AdaptiveNormZero(8, 4, groups=4)
        with torch.no_grad():
            block.producer.weight.normal_()
            block.producer.bias.normal_()
        h = torch.randn(2, 8, 6, 6)
        feat = torch.randn(2, 4, 6, 6)
        modulated = block(h, feat)
        assert not torch.equal(modulated, block(h, None))
        with torch.no_grad():
            block.producer.weight.zero_()
            block.producer.bias.zero_()
        assert torch.equal(block(h, feat), block(h, None))

    def test_producer_gradient_nonzero(self):
        torch.manual_seed(1)
        block = AdaptiveNormZero(8, 4, groups=4)
        h = torch.randn(2, 8, 6, 6)
        feat = torch.randn(2, 4, 6, 6)
        block(h, feat).sum().backward()
        assert block.producer.weight.grad.abs().sum() > 0

    def test_misalignment_rejected(self):
        block = AdaptiveNormZero(8, 4, groups=4)
        with pytest.raises(ContractViolation):
            block(torch.randn(1, 8, 6, 6), torch.randn(1, 4, 3, 3))


class TestInstructionAdapter:
    def test_identity_at_init(self):
        torch.manual_seed(2)
        cfg = DenoiserConfig.tiny()
        via = InstructionAdapter(8, cfg)
        h = torch.randn(2, 8, 4, 4)
        tokens = torch.randn(2, 16, cfg.via_dim)
        assert torch.equal(via(h, tokens), h)
        assert torch.equal(via(h, None), h)

    def test_zero_tokens_identity_even_when_trained(self):
        torch.manual_seed(2)
        cfg = DenoiserConfig.tiny()
        via = InstructionAdapter(8, cfg)
        with torch.no_grad():
            for p in via.parameters():
                p.normal_()  # simulate arbitrary trained weights
        h = torch.randn(2, 8, 4, 4)
        assert torch.equal(via(h, torch.zeros(2, 16, cfg.via_dim)), h)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(2)
        cfg = DenoiserConfig.tiny()
        via = InstructionAdapter(8, cfg)
        with torch.no_grad():
            for p in via.parameters():
                p.normal_()
        h = torch.randn(2, 8, 4, 4)
        tokens = torch.randn(2, 16, cfg.via_dim)
        rows = via.attention_rows(h, tokens)
        assert (rows.sum(dim=-1) - 1.0).abs().max() < 1e-6


class TestPredictEps:
    def test_zero_init_conditioning_neutrality(self, tiny_model):
        y, t, lq, code = tiny_inputs()
        full = predict_eps(tiny_model, y, t, ConditioningBundle(lq, code))
        no_lq = predict_eps(tiny_model, y, t, ConditioningBundle(lq, code, drop_lq=True))
        no_code = predict_eps(tiny_model, y, t, ConditioningBundle(lq, code, drop_instruction=True))
        bare = predict_eps(tiny_model, y, t, None)
        assert torch.equal(full, no_lq)
        assert torch.equal(full, no_code)
        assert torch.equal(full, bare)

    def test_output_shape_matches_input(self, tiny_model):
        for size in (8, 16, 32):
            y, t, lq, code = tiny_inputs(size=size)
            out = predict_eps(tiny_model, y, t, ConditioningBundle(lq, code))
            assert out.shape == y.shape

    def test_eval_deterministic(self, tiny_model):
        y, t, lq, code = tiny_inputs()
        bundle = ConditioningBundle(lq, code)
        assert torch.equal(
            predict_eps(tiny_model, y, t, bundle), predict_eps(tiny_model, y, t, bundle)
        )

    def test_conditioning_matters_after_perturbation(self):
        torch.manual_seed(4)
        model = Denoiser(DenoiserConfig.tiny())
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "producer" in name or "proj_out" in name:
                    p.normal_(std=0.5)
        y, t, lq, code = tiny_inputs()
        full = predict_eps(model, y, t, ConditioningBundle(lq, code))
        no_lq = predict_eps(model, y, t, ConditioningBundle(lq, code, drop_lq=True))
        no_code = predict_eps(model, y, t, ConditioningBundle(lq, code, drop_instruction=True))
        assert not torch.equal(full, no_lq)
        assert not torch.equal(full, no_code)

    def test_bundle_validation(self, tiny_model):
        y, t, lq, code = tiny_inputs()
        with pytest.raises(ContractViolation):
            predict_eps(tiny_model, y, t, ConditioningBundle(torch.zeros(2, 3, 16, 16), None))
        with pytest.raises(ContractViolation):
            predict_eps(tiny_model, y, t, ConditioningBundle(None, torch.zeros(2, 0, 6)))
        with pytest.raises(ContractViolation):
            predict_eps(tiny_model, y, t, ConditioningBundle(None, torch.zeros(2, 5000, 6)))


class TestGradients:
    def test_full_model_gradients_match_finite_differences(self):
        # float64, every parameter group exercised, 10 random directional probes
        torch.manual_seed(5)
        cfg = DenoiserConfig.tiny()
        model = Denoiser(cfg).double()
        with torch.no_grad():
            for p in model.parameters():
                if p.abs().sum() == 0:
                    p.normal_(std=0.3)  # give zero-init adapters generic values
        schedule = NoiseSchedule("vp_cosine")
        y0, t, lq, code = tiny_inputs(dtype=torch.float64, gen_seed=2)
        eps = torch.randn_like(y0)
        bundle = ConditioningBundle(lq, code)

        def eps_model(y_t, tt):
            return model(y_t, tt, bundle)

        model.train()
        loss = dsm_loss(eps_model, y0, t, eps, schedule)
        grads = torch.autograd.grad(loss, list(model.parameters()))
        params = list(model.parameters())

        probe_rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(10):
            direction = [
                torch.tensor(probe_rng.normal(size=p.shape), dtype=torch.float64) for p in params
            ]

            def loss_at(scale):
                with torch.no_grad():
                    for p, d in zip(params, direction):
                        p.add_(scale * d)
                value = dsm_loss(eps_model, y0, t, eps, schedule).item()
                with torch.no_grad():
                    for p, d in zip(params, direction):
                        p.add_(-scale * d)
                return value

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            analytic = sum((g * d).sum().item() for g, d in zip(grads, direction))
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)
            assert rel <= 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tiny_model):
        save_denoiser(tmp_path / "ckpt", tiny_model, step=7, extra={"note": "test"})
        loaded, header = load_denoiser(tmp_path / "ckpt")
        assert header["schema"] == "defusion-denoiser-v1"
        assert header["step"] == 7
        for (ka, va), (kb, vb) in zip(
            sorted(tiny_model.state_dict().items()), sorted(loaded.state_dict().items())
        ):
            assert ka == kb and torch.equal(va, vb)
        y, t, lq, code = tiny_inputs()
        assert torch.equal(
            predict_eps(tiny_model, y, t, ConditioningBundle(lq, code)),
            predict_eps(loaded, y, t, ConditioningBundle(lq, code)),
        )
