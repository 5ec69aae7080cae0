import numpy as np
import pytest

from defusion import degrade
from defusion.chainspec import parse_chain_spec
from defusion.degrade import (
    DegradationChain,
    DegradationOp,
    apply,
    apply_chain,
    blockwise_dct,
    chain_from_spec,
    make_mixed_dataset,
    scaled_quant_table,
)
from defusion.errors import ContractViolation
from defusion.imaging import Image, load_png, save_png


def const_image(value, size=32):
    return Image(np.full((size, size, 3), value))


class TestChainSpec:
    def test_empty(self):
        assert parse_chain_spec("") == []

    def test_single_op_default_params(self):
        assert parse_chain_spec("noise") == [("noise", {})]

    def test_ops_and_params(self):
        spec = "noise:sigma=0.2,rain:density=0.3,length=12,blur"
        assert parse_chain_spec(spec) == [
            ("noise", {"sigma": 0.2}),
            ("rain", {"density": 0.3, "length": 12.0}),
            ("blur", {}),
        ]

    def test_scientific_notation(self):
        assert parse_chain_spec("noise:sigma=1e-2") == [("noise", {"sigma": 0.01})]

    def test_garbage_rejected(self):
        for bad in ("noise:sigma", "noise:=3", ",noise", "noise,,blur", "1abc"):
            with pytest.raises(ContractViolation):
                parse_chain_spec(bad)


class TestOpValidation:
    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            DegradationOp("sharpen", {}, 0)

    def test_param_out_of_range(self):
        with pytest.raises(ContractViolation):
            DegradationOp("gaussian_noise", {"sigma": 0.9}, 0)

    def test_unknown_param(self):
        with pytest.raises(ContractViolation):
            DegradationOp("gaussian_noise", {"amount": 0.1}, 0)

    def test_aliases(self):
        assert DegradationOp("noise", {}, 0).kind == "gaussian_noise"
        assert DegradationOp("jpeg", {}, 0).kind == "jpeg_block"


class TestIdentityAtDegenerateParameters:
    """Every operator must be the identity at its degenerate parameter."""

    CASES = [
        ("gaussian_noise", {"sigma": 0.0}),
        ("gaussian_blur", {"sigma": 0.0}),
        ("motion_blur", {"length": 1.0}),
        ("rain", {"density": 0.0}),
        ("snow", {"density": 0.0}),
        ("haze", {"transmission": 1.0}),
        ("raindrop", {"count": 0.0}),
    ]

    @pytest.mark.parametrize("kind,params", CASES)
    def test_exact_identity(self, kind, params, random_image):
        out = apply(DegradationOp(kind, params, seed=3), random_image)
        assert np.array_equal(out.data, random_image.data)

    def test_jpeg_identity_up_to_rounding(self, rng):
        # quality 100 gives the all-ones table; integer rounding of DCT
        # coefficients bounds the error by 2/255.
        img = Image(rng.uniform(0.1, 0.9, (64, 64, 3)))
        out = apply(DegradationOp("jpeg_block", {"quality": 100}, 0), img)
        assert np.abs(out.data - img.data).max() <= 2.0 / 255.0

    def test_quality_100_table_is_all_ones(self):
        assert np.all(scaled_quant_table(100) == 1.0)


class TestOperatorContracts:
    def test_noise_sample_variance(self):
        op = DegradationOp("gaussian_noise", {"sigma": 0.1}, seed=42)
        out = apply(op, const_image(0.5, 256))
        var = np.var(out.data - 0.5)
        assert abs(var - 0.01) / 0.01 < 0.05

    def test_haze_t0_constant_airlight(self, random_image):
        op = DegradationOp("haze", {"transmission": 0.0, "airlight": 0.8}, 0)
        out = apply(op, random_image)
        assert np.all(out.data == 0.8)

    def test_outputs_clipped_and_finite(self, rng):
        img = Image(rng.uniform(0, 1, (32, 32, 3)))
        for kind in degrade.KIND_IDS:
            out = apply(DegradationOp(kind, {}, seed=9), img)
            assert np.all(np.isfinite(out.data))
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_determinism_per_seed(self, random_image):
        # stochastic operators: same seed reproduces, different seed differs
        for kind in ("gaussian_noise", "rain", "snow", "raindrop"):
            a = apply(DegradationOp(kind, {}, seed=5), random_image)
            b = apply(DegradationOp(kind, {}, seed=5), random_image)
            c = apply(DegradationOp(kind, {}, seed=6), random_image)
            assert np.array_equal(a.data, b.data)
            assert not np.array_equal(a.data, c.data)
        # uniform haze is a pure function of its parameters
        h5 = apply(DegradationOp("haze", {}, seed=5), random_image)
        h6 = apply(DegradationOp("haze", {}, seed=6), random_image)
        assert np.array_equal(h5.data, h6.data)

    def test_blur_mean_preservation(self):
        for kind, params in (
            ("gaussian_blur", {"sigma": 1.7}),
            ("motion_blur", {"length": 9.0, "angle": 33.0}),
        ):
            out = apply(DegradationOp(kind, params, 0), const_image(0.37))
            assert np.abs(out.data - 0.37).max() <= 1e-6

    def test_line_kernel_normalized(self):
        for length, angle in ((5, 0), (9, 33), (15, 90), (21, -45)):
            assert abs(degrade._line_kernel(length, angle).sum() - 1.0) < 1e-6

    def test_snow_brightens_midgray(self):
        op = DegradationOp("snow", {"density": 0.5, "brightness": 0.9}, seed=2)
        out = apply(op, const_image(0.5, 64))
        assert out.data.mean() > 0.5


class TestJpeg:
    def test_constant_any_quality(self):
        img = const_image(0.5)
        for q in (1, 10, 50, 90, 100):
            out = apply(DegradationOp("jpeg_block", {"quality": q}, 0), img)
            assert np.abs(out.data - img.data).max() <= 1.0 / 255.0

    def test_q100_bound_on_noise_image(self, rng):
        img = Image(rng.uniform(0, 1, (64, 64, 3)))
        out = apply(DegradationOp("jpeg_block", {"quality": 100}, 0), img)
        assert np.abs(out.data - img.data).max() <= 2.0 / 255.0

    def test_q10_flattens_low_contrast_checkerboard(self):
        cb = ((np.indices((64, 64)).sum(axis=0) // 2) % 2) * 0.2 + 0.4
        img = Image(np.repeat(cb[:, :, None], 3, axis=2))
        out = apply(DegradationOp("jpeg_block", {"quality": 10}, 0), img)
        block_var_in = img.data[:, :, 0].reshape(8, 8, 8, 8).transpose(0, 2, 1, 3).reshape(-1, 64).var(axis=1)
        block_var_out = out.data[:, :, 0].reshape(8, 8, 8, 8).transpose(0, 2, 1, 3).reshape(-1, 64).var(axis=1)
        reduction = 1.0 - block_var_out / block_var_in
        assert reduction.max() >= 0.5

    def test_dct_matches_naive_oracle(self, rng):
        # O(n^4) direct DCT-II on each 8x8 block.
        x = rng.normal(size=(16, 16))
        fast = blockwise_dct(x)
        n = 8
        naive = np.zeros_like(x)
        for by in range(2):
            for bx in range(2):
                block = x[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8]
                for k in range(n):
                    for l in range(n):
                        sk = np.sqrt(1 / n) if k == 0 else np.sqrt(2 / n)
                        sl = np.sqrt(1 / n) if l == 0 else np.sqrt(2 / n)
                        acc = 0.0
                        for m in range(n):
                            for p in range(n):
                                acc += (
                                    block[m, p]
                                    * np.cos(np.pi * (2 * m + 1) * k / (2 * n))
                                    * np.cos(np.pi * (2 * p + 1) * l / (2 * n))
                                )
                        naive[by * 8 + k, bx * 8 + l] = sk * sl * acc
        assert np.abs(fast - naive).max() <= 1e-6

    def test_non_multiple_of_8_dimensions(self, rng):
        img = Image(rng.uniform(0, 1, (37, 45, 3)))
        out = apply(DegradationOp("jpeg_block", {"quality": 20}, 0), img)
        assert out.data.shape == img.data.shape

    def test_annex_k_scaling_endpoints(self):
        t50 = scaled_quant_table(50)
        assert np.array_equal(t50, degrade.JPEG_LUMA_TABLE)
        t10 = scaled_quant_table(10)
        assert t10[0, 0] == 80.0  # floor((16*500+50)/100)


class TestChains:
    def test_empty_chain_identity(self, random_image):
        sample = apply_chain(DegradationChain(), random_image)
        assert np.array_equal(sample.lq.data, random_image.data)
        assert sample.intermediates == []

    def test_degenerate_chain_identity(self, random_image):
        chain = DegradationChain(
            (
                DegradationOp("gaussian_noise", {"sigma": 0.0}, 1),
                DegradationOp("gaussian_blur", {"sigma": 0.0}, 2),
            )
        )
        sample = apply_chain(chain, random_image)
        assert np.array_equal(sample.lq.data, random_image.data)

    def test_intermediates_recorded(self, random_image):
        chain = chain_from_spec("noise:sigma=0.1,blur:sigma=1.0", seed=4)
        sample = apply_chain(chain, random_image)
        assert len(sample.intermediates) == 2
        assert np.array_equal(sample.intermediates[-1].data, sample.lq.data)
        first = apply(chain.ops[0], random_image)
        assert np.array_equal(sample.intermediates[0].data, first.data)

    def test_order_matters(self, rng):
        img = Image(rng.uniform(0.2, 0.8, (48, 48, 3)))
        rain = DegradationOp("rain", {"density": 0.4}, 7)
        noise = DegradationOp("gaussian_noise", {"sigma": 0.1}, 8)
        ab = apply_chain(DegradationChain((rain, noise)), img)
        ba = apply_chain(DegradationChain((noise, rain)), img)
        frac = np.mean(np.abs(ab.lq.data - ba.lq.data) > 1.0 / 255.0)
        assert frac > 0.01

    def test_chain_description_round_trip(self):
        chain = chain_from_spec("noise:sigma=0.2,haze:transmission=0.6", seed=3)
        rebuilt = DegradationChain.from_description(chain.describe())
        assert rebuilt == chain


class TestMixedDataset:
    @pytest.fixture
    def hq_dir(self, tmp_path, rng):
        d = tmp_path / "hq"
        d.mkdir()
        for i in range(2):
            save_png(d / f"im{i}.png", Image(rng.uniform(0.2, 0.8, (48, 48, 3))))
        return d

    def test_six_orderings_per_image(self, hq_dir, tmp_path):
        records = make_mixed_dataset(hq_dir, tmp_path / "out", seed=5)
        assert len(records) == 12
        orders = {r["order"] for r in records}
        assert len(orders) == 6

    def test_byte_reproducible(self, hq_dir, tmp_path):
        make_mixed_dataset(hq_dir, tmp_path / "a", seed=5)
        make_mixed_dataset(hq_dir, tmp_path / "b", seed=5)
        files_a = sorted((tmp_path / "a").iterdir())
        files_b = sorted((tmp_path / "b").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_orderings_differ(self, hq_dir, tmp_path):
        records = make_mixed_dataset(hq_dir, tmp_path / "out", seed=5)
        by_image = {}
        for r in records:
            by_image.setdefault(r["hq_path"], []).append(r)
        for _, recs in by_image.items():
            a = load_png(tmp_path / "out" / recs[0]["lq_path"]).data
            b = load_png(tmp_path / "out" / recs[-1]["lq_path"]).data
            assert not np.array_equal(a, b)

    def test_empty_dir_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ContractViolation):
            make_mixed_dataset(tmp_path / "empty", tmp_path / "out", seed=1)
