import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchwork.cli import main, read_manifest
from patchwork.config import Config
from patchwork.errors import ConfigError
from patchwork.model import load_checkpoint
from patchwork.synthetic import threshold_dataset
from patchwork.volume import Volume, read_nifti, write_nifti

TOY_CONFIG = """
[scheme]
depth = 2
patch_size = 8
fov_rel = 1.0
destvox_rel = 1.0
interp_type = "lin"

[model]
hidden = 4
intermediate_out = 1

[train]
num_its = 2
epochs = 1
num_patches = 2
batch_size = 4
balance.ratio = 0.5

[apply]
generate_type = "tree"
"""


@pytest.fixture
def toy(tmp_path):
    images, labels = threshold_dataset(n=2, size=16)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        write_nifti(img, tmp_path / f"i{i}.nii")
        write_nifti(lab, tmp_path / f"l{i}.nii", dtype="uint8")
        lines.append(f"i{i}.nii l{i}.nii")
    (tmp_path / "manifest.txt").write_text("# toy\n" + "\n".join(lines) + "\n")
    (tmp_path / "toy.ini").write_text(TOY_CONFIG)
    return tmp_path


def train(toy, out="m.dnp", seed=0, extra=()):
    return main(["train", "--config", str(toy / "toy.ini"), "--manifest", str(toy / "manifest.txt"),
                 "--out", str(toy / out), "--seed", str(seed), *extra])


class TestTrain:
    def test_missing_label_names_path(self, toy, capsys):
        code = main(["train", "--config", str(toy / "toy.ini"), "--image", str(toy / "i0.nii"),
                     "--label", str(toy / "nope.nii"), "--out", str(toy / "m.dnp")])
        assert code == 1
        assert "nope.nii" in capsys.readouterr().err

    def test_round_trip_checkpoint(self, toy):
        assert train(toy) == 0
        model, extra = load_checkpoint(toy / "m.dnp")
        again, _ = load_checkpoint(toy / "m.dnp")
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(again.parameters()[k], v)
        assert extra["config"]["scheme"]["depth"] == 2
        assert (toy / "m.dnp.history.csv").exists()

    def test_same_seed_same_history(self, toy):
        assert train(toy, "a.dnp", seed=7) == 0
        assert train(toy, "b.dnp", seed=7, extra=["--deterministic"]) == 0
        a = (toy / "a.dnp.history.csv").read_text()
        assert a == (toy / "b.dnp.history.csv").read_text()
        assert (toy / "a.dnp").read_bytes() == (toy / "b.dnp").read_bytes()

    def test_unequal_lists(self, toy):
        code = main(["train", "--config", str(toy / "toy.ini"), "--image", str(toy / "i0.nii"),
                     "--out", str(toy / "m.dnp")])
        assert code == 1

    def test_manifest_relative_paths(self, toy):
        pairs = read_manifest(toy / "manifest.txt")
        assert pairs[0] == (str(toy / "i0.nii"), str(toy / "l0.nii"))


class TestPredict:
    def test_writes_probabilities_and_mask(self, toy):
        assert train(toy) == 0
        out = toy / "p.nii.gz"
        assert main(["predict", "--checkpoint", str(toy / "m.dnp"), "--image", str(toy / "i0.nii"),
                     "--out", str(out)]) == 0
        prob = read_nifti(out)
        assert prob.shape == (16, 16) and 0 <= prob.data.min() and prob.data.max() <= 1
        assert main(["predict", "--checkpoint", str(toy / "m.dnp"), "--image", str(toy / "i0.nii"),
                     "--set", "out_typ=mask:0.5", "--out", str(out)]) == 0
        mask = read_nifti(toy / "p_mask.nii.gz")
        assert set(np.unique(mask.data)) <= {0.0, 1.0}

    def test_seeded_predict_bitwise(self, toy):
        assert train(toy) == 0
        for name in ("x.nii", "y.nii"):
            assert main(["predict", "--checkpoint", str(toy / "m.dnp"), "--image", str(toy / "i1.nii"),
                         "--set", "augment.dphi=0.3", "--set", "num_chunks=2", "--seed", "3",
                         "--out", str(toy / name)]) == 0
        assert (toy / "x.nii").read_bytes() == (toy / "y.nii").read_bytes()

    def test_dimension_mismatch(self, toy, capsys):
        assert train(toy) == 0
        write_nifti(Volume(np.zeros((8, 8, 8), np.float32), np.eye(4)), toy / "vol.nii")
        code = main(["predict", "--checkpoint", str(toy / "m.dnp"), "--image", str(toy / "vol.nii"),
                     "--out", str(toy / "o.nii")])
        assert code == 1
        assert "2D" in capsys.readouterr().err

    def test_threshold_count(self, toy, tmp_path):
        cfg = TOY_CONFIG.replace("[scheme]", "[scheme]\nnum_labels = 2\ncategorial_label = [0, 1]")
        cfg = cfg.replace("\ninterp_type", "\ncategorical = true\ninterp_type")
        (toy / "two.ini").write_text(cfg)
        assert main(["train", "--config", str(toy / "two.ini"), "--manifest", str(toy / "manifest.txt"),
                     "--out", str(toy / "two.dnp")]) == 0
        code = main(["predict", "--checkpoint", str(toy / "two.dnp"), "--image", str(toy / "i0.nii"),
                     "--set", "out_typ=mask:0.4", "--out", str(toy / "o.nii")])
        assert code == 1


class TestReconstruct:
    def test_identity_stitch(self, toy):
        (toy / "rec.ini").write_text("[scheme]\ndepth = 2\npatch_size = 8\nfov_rel = 1.0\n"
                                     "destvox_rel = 1.0\n")
        assert main(["reconstruct", "--config", str(toy / "rec.ini"), "--image", str(toy / "i0.nii"),
                     "--out", str(toy / "r.nii")]) == 0
        np.testing.assert_allclose(read_nifti(toy / "r.nii").data, read_nifti(toy / "i0.nii").data,
                                   atol=1e-6)


class TestSelftest:
    def test_passes_quickly(self):
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "patchwork.cli", "selftest"], capture_output=True,
                              text=True)
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert time.perf_counter() - t0 < 60
        assert "PASSED" in proc.stdout

    def test_injected_fault_fails(self, capsys):
        assert main(["selftest", "--inject-fault", "sign"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestConfig:
    def test_round_trip(self):
        c = Config.parse(TOY_CONFIG)
        assert Config.parse(c.dumps()) == c
        assert c["scheme"]["interp_type"] == "lin" and c["train"]["balance.ratio"] == 0.5

    @given(st.dictionaries(st.sampled_from(["num_its", "epochs", "hard_mining_order", "learning_rate",
                                            "augment.dphi"]),
                           st.one_of(st.integers(1, 9), st.floats(0, 1), st.text("abc", min_size=1),
                                     st.lists(st.integers(0, 3), max_size=3))))
    @settings(max_examples=50)
    def test_round_trip_property(self, train):
        c = Config({"scheme": {}, "train": train})
        assert Config.parse(c.dumps()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            Config.parse("[train]\nbogus = 1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            Config.parse("[nope]\na = 1\n")

    @pytest.mark.parametrize("scheme", ["fov_mm = 100\nfov_rel = 0.5\ndestvox_mm = 1",
                                        "destvox_mm = 1"])
    def test_exactly_one_fov(self, scheme):
        with pytest.raises(ConfigError):
            Config.parse(f"[scheme]\ndepth = 2\n{scheme}\n")

    def test_config_error_exit_code(self, toy):
        (toy / "bad.ini").write_text("[train]\nbogus = 1\n")
        assert main(["train", "--config", str(toy / "bad.ini"), "--manifest", str(toy / "manifest.txt"),
                     "--out", str(toy / "m.dnp")]) == 1
