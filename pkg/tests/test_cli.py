import json

import numpy as np
import pytest

from defusion.cli import main
from defusion.degrade import DegradationChain
from defusion.imaging import Image, load_png, save_png
from defusion.synth import synthetic_photo


@pytest.fixture
def lq_png(tmp_path):
    path = tmp_path / "input.png"
    save_png(path, synthetic_photo(seed=1, size=48))
    return path


class TestDegrade:
    def test_empty_chain_identity(self, tmp_path, lq_png):
        out = tmp_path / "out.png"
        code = main(["degrade", "--in", str(lq_png), "--out", str(out), "--chain", "", "--seed", "1"])
        assert code == 0
        assert load_png(out).data.tolist() == load_png(lq_png).data.tolist()

    def test_deterministic_per_seed(self, tmp_path, lq_png):
        outs = []
        for name in ("a.png", "b.png"):
            out = tmp_path / name
            main(["degrade", "--in", str(lq_png), "--out", str(out), "--chain",
                  "noise:sigma=0.1,rain:density=0.3", "--seed", "7"])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_chain_is_contract_violation(self, tmp_path, lq_png, capsys):
        code = main(["degrade", "--in", str(lq_png), "--out", str(tmp_path / "x.png"),
                     "--chain", "noise:sigma", "--seed", "1"])
        assert code == 1
        assert capsys.readouterr().err.startswith("DEFUSION-ERR:")

    def test_unknown_flag_exits_2(self, lq_png):
        with pytest.raises(SystemExit) as exc:
            main(["degrade", "--in", str(lq_png), "--frobnicate", "1"])
        assert exc.value.code == 2


class TestGround:
    def test_writes_pair_and_sidecar(self, tmp_path):
        out = tmp_path / "g"
        code = main(["ground", "--seed", "3", "--size", "64", "--chain", "noise:sigma=0.2",
                     "--out", str(out)])
        assert code == 0
        sidecar = json.loads((out / "ground_3.json").read_text())
        chain = DegradationChain.from_description(sidecar["chain"])
        assert chain.ops[0].kind == "gaussian_noise"
        clean = load_png(out / sidecar["clean"])
        degraded = load_png(out / sidecar["instruction"])
        assert clean.data.shape == degraded.data.shape == (64, 64, 3)
        assert not np.array_equal(clean.data, degraded.data)

    def test_blank_kind(self, tmp_path):
        out = tmp_path / "g"
        main(["ground", "--seed", "3", "--size", "64", "--chain", "", "--kind", "blank",
              "--out", str(out)])
        clean = load_png(out / "ground_3_clean.png")
        assert clean.data.var() == 0.0


class TestMakeMixed:
    def test_runs_and_writes_manifest(self, tmp_path):
        hq = tmp_path / "hq"
        hq.mkdir()
        save_png(hq / "a.png", synthetic_photo(seed=5, size=48))
        code = main(["make-mixed", "--hq-dir", str(hq), "--out", str(tmp_path / "mix"),
                     "--seed", "2"])
        assert code == 0
        manifest = (tmp_path / "mix" / "manifest.jsonl").read_text().strip().splitlines()
        assert len(manifest) == 6

    def test_empty_dir_error(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        code = main(["make-mixed", "--hq-dir", str(tmp_path / "empty"), "--out",
                     str(tmp_path / "mix"), "--seed", "2"])
        assert code == 1
        assert "DEFUSION-ERR:" in capsys.readouterr().err


class TestEval:
    def test_identity_eval(self, tmp_path, capsys):
        paired = tmp_path / "pairs"
        (paired / "lq").mkdir(parents=True)
        (paired / "hq").mkdir()
        for i in range(2):
            img = synthetic_photo(seed=i, size=48)
            save_png(paired / "lq" / f"{i}.png", img)
            save_png(paired / "hq" / f"{i}.png", img)
        code = main(["eval", "--paired-dir", str(paired), "--identity"])
        assert code == 0
        out = capsys.readouterr().out
        assert "100.000" in out

    def test_eval_requires_restorer(self, tmp_path, capsys):
        paired = tmp_path / "pairs"
        (paired / "lq").mkdir(parents=True)
        (paired / "hq").mkdir()
        img = synthetic_photo(seed=0, size=48)
        save_png(paired / "lq" / "x.png", img)
        save_png(paired / "hq" / "x.png", img)
        code = main(["eval", "--paired-dir", str(paired)])
        assert code == 1
        assert "DEFUSION-ERR:" in capsys.readouterr().err


class TestSelftest:
    def test_list_checks(self, capsys):
        assert main(["selftest", "--list"]) == 0
        out = capsys.readouterr().out
        assert "diffusion/vp-identity" in out
        assert len(out.strip().splitlines()) >= 15
