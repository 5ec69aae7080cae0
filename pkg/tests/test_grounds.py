import json

import numpy as np
import pytest

from defusion.degrade import DegradationChain, DegradationOp, apply_chain, chain_from_spec
from defusion.errors import ContractViolation
from defusion.grounds import (
    GROUPS,
    ablation_ground,
    generate_ground,
    ground_instruction,
    save_instruction,
)
from defusion.imaging import load_png


class TestGroundGeneration:
    def test_determinism(self):
        a = generate_ground(seed=7, size=64)
        b = generate_ground(seed=7, size=64)
        assert np.array_equal(a.image.data, b.image.data)
        assert a.elements == b.elements

    def test_different_seeds_differ(self):
        a = generate_ground(seed=7, size=64)
        b = generate_ground(seed=8, size=64)
        assert not np.array_equal(a.image.data, b.image.data)

    def test_all_groups_present(self):
        for seed in range(50):
            ground = generate_ground(seed=seed, size=64)
            assert sorted(e.group for e in ground.elements) == sorted(GROUPS)

    def test_color_tile_has_pure_white_and_black(self):
        for seed in range(10):
            data = generate_ground(seed=seed, size=64).image.data
            assert np.any(np.all(data == 1.0, axis=2))
            assert np.any(np.all(data == 0.0, axis=2))

    def test_size_contract(self):
        with pytest.raises(ContractViolation):
            generate_ground(seed=0, size=16)
        with pytest.raises(ContractViolation):
            generate_ground(seed=0, size=65)
        assert generate_ground(seed=0, size=224).image.data.shape == (224, 224, 3)


class TestInstruction:
    def test_empty_chain_degraded_equals_clean(self):
        ground = generate_ground(seed=3, size=64)
        inst = ground_instruction(ground, DegradationChain())
        assert np.array_equal(inst.degraded.data, inst.clean.data)

    def test_noise_instruction_statistics(self):
        ground = generate_ground(seed=3, size=64)
        chain = DegradationChain((DegradationOp("gaussian_noise", {"sigma": 0.2}, 11),))
        inst = ground_instruction(ground, chain)
        # measure noise where clipping can't bite
        interior = (ground.image.data > 0.25) & (ground.image.data < 0.75)
        diff = (inst.degraded.data - inst.clean.data)[interior]
        assert abs(diff.std() - 0.2) / 0.2 < 0.10

    def test_invariant_recheckable_bit_exactly(self):
        ground = generate_ground(seed=5, size=64)
        chain = chain_from_spec("rain:density=0.4,noise:sigma=0.1", seed=21)
        inst = ground_instruction(ground, chain)
        redo = apply_chain(DegradationChain.from_description(chain.describe()), ground.image)
        assert np.array_equal(inst.degraded.data, redo.lq.data)

    def test_composition_adds_high_frequency_energy(self):
        ground = generate_ground(seed=9, size=64)
        rain = DegradationOp("rain", {"density": 0.5}, 13)
        noise = DegradationOp("gaussian_noise", {"sigma": 0.15}, 14)
        inst_rain = ground_instruction(ground, DegradationChain((rain,)))
        inst_both = ground_instruction(ground, DegradationChain((rain, noise)))
        assert _laplacian_energy(inst_both.degraded.data) > _laplacian_energy(inst_rain.degraded.data)

    def test_distinct_kinds_produce_distinct_instructions(self):
        chains = {
            "noise": DegradationChain((DegradationOp("gaussian_noise", {"sigma": 0.15}, 1),)),
            "blur": DegradationChain((DegradationOp("gaussian_blur", {"sigma": 2.0}, 1),)),
            "rain": DegradationChain((DegradationOp("rain", {"density": 0.5}, 1),)),
            "haze": DegradationChain((DegradationOp("haze", {"transmission": 0.5}, 1),)),
        }
        names = list(chains)
        for seed in range(50):
            ground = generate_ground(seed=seed, size=64)
            images = {k: ground_instruction(ground, c).degraded.data for k, c in chains.items()}
            for i, a in enumerate(names):
                for b in names[i + 1 :]:
                    assert np.abs(images[a] - images[b]).mean() > 1.0 / 255.0


def _laplacian_energy(data):
    gray = data.mean(axis=2)
    lap = (
        -4 * gray[1:-1, 1:-1]
        + gray[:-2, 1:-1]
        + gray[2:, 1:-1]
        + gray[1:-1, :-2]
        + gray[1:-1, 2:]
    )
    return float(np.abs(lap).mean())


class TestAblationGrounds:
    def test_blank_zero_variance(self):
        ground = ablation_ground("blank", seed=1, size=64)
        assert ground.image.data.var() == 0.0

    def test_simple_period_invariance(self):
        ground = ablation_ground("simple", seed=1, size=64)
        rolled = np.roll(ground.image.data, 8, axis=0)
        assert np.array_equal(ground.image.data, rolled)

    def test_blank_plus_noise_variance(self):
        ground = ablation_ground("blank", seed=1, size=64)
        chain = DegradationChain((DegradationOp("gaussian_noise", {"sigma": 0.1}, 3),))
        inst = ground_instruction(ground, chain)
        var = (inst.degraded.data - 0.5).var()
        assert abs(var - 0.01) / 0.01 < 0.1

    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            ablation_ground("fancy", seed=1, size=64)


class TestSidecar:
    def test_save_instruction_round_trip(self, tmp_path):
        ground = generate_ground(seed=2, size=64)
        chain = chain_from_spec("noise:sigma=0.2", seed=9)
        inst = ground_instruction(ground, chain)
        save_instruction(inst, tmp_path, "sample0")
        sidecar = json.loads((tmp_path / "sample0.json").read_text())
        rebuilt = DegradationChain.from_description(sidecar["chain"])
        assert rebuilt == chain
        clean = load_png(tmp_path / sidecar["clean"])
        # PNG quantization stays within half a byte step
        assert np.abs(clean.data - ground.image.data).max() <= 1 / 510 + 1e-12
