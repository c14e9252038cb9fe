"""Command-line surface: worked examples, artifacts, exit codes."""

import os
import struct

import numpy as np
import pytest

from s2cassi import network as net
from s2cassi.cli import main
from s2cassi.fileio import read_cube, write_checkpoint, write_cube, write_mask
from s2cassi.optics import CodedMask, HyperCube, make_mask

TOY_CFG = """\
seed = 3
network.K = 1
network.L = 1
network.C = 8
network.T = 2
network.M = 4
network.k_me = 1
network.n_lambda = 3
network.cyclic_shift = false
schedule.epochs = 4
schedule.switch = 2
schedule.batch = 2
train.crop = 0
"""


@pytest.fixture
def workdir(tmp_path):
    rc = main(["synth", "--out", str(tmp_path / "data"), "--count", "3",
               "--h", "12", "--w", "12", "--nl", "3", "--seed", "5"])
    assert rc == 0
    (tmp_path / "toy.cfg").write_text(TOY_CFG)
    return tmp_path


class TestSimulate:
    def test_worked_example_d1(self, tmp_path):
        # two channels [1,2] and [3,4] under a ones mask, one-pixel shear:
        # column sums land as [1, 2+3, 4]
        cube = np.zeros((1, 2, 2), dtype=np.float32)
        cube[0, :, 0] = [1, 2]
        cube[0, :, 1] = [3, 4]
        write_cube(str(tmp_path / "tiny.hsc"), HyperCube(cube))
        write_mask(str(tmp_path / "ones.msk"),
                   CodedMask(np.ones((1, 2), dtype=np.float32)))
        rc = main(["simulate", "--cube", str(tmp_path / "tiny.hsc"),
                   "--mask", str(tmp_path / "ones.msk"),
                   "--out", str(tmp_path / "y.hsc"), "--d", "1"])
        assert rc == 0
        y = read_cube(str(tmp_path / "y.hsc"))
        assert y.data.shape == (1, 3, 1)
        assert y.data[:, :, 0].tolist() == [[1.0, 5.0, 4.0]]

    def test_same_seed_same_bytes(self, workdir):
        scene = str(workdir / "data" / "scene_000.hsc")
        mask = str(workdir / "data" / "mask.msk")
        outs = []
        for name in ("y1.hsc", "y2.hsc"):
            rc = main(["simulate", "--cube", scene, "--mask", mask,
                       "--out", str(workdir / name),
                       "--noise-sigma", "0.05", "--seed", "9"])
            assert rc == 0
            outs.append((workdir / name).read_bytes())
        assert outs[0] == outs[1]


class TestSynth:
    def test_artifacts_and_determinism(self, tmp_path):
        for d in ("a", "b"):
            rc = main(["synth", "--out", str(tmp_path / d), "--count", "2",
                       "--h", "8", "--w", "10", "--nl", "2", "--seed", "4"])
            assert rc == 0
        names = sorted(os.listdir(tmp_path / "a"))
        assert names == ["mask.msk", "scene_000.hsc", "scene_001.hsc"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        cube = read_cube(str(tmp_path / "a" / "scene_000.hsc"))
        assert cube.data.shape == (8, 10, 2)
        assert float(cube.data.min()) >= 0.0
        assert float(cube.data.max()) <= 1.0

    def test_scenes_differ_by_index(self, tmp_path):
        main(["synth", "--out", str(tmp_path / "s"), "--count", "2",
              "--h", "8", "--w", "8", "--nl", "2", "--seed", "4"])
        a = read_cube(str(tmp_path / "s" / "scene_000.hsc"))
        b = read_cube(str(tmp_path / "s" / "scene_001.hsc"))
        assert not np.array_equal(a.data, b.data)


class TestTrainEval:
    def test_train_writes_checkpoint_and_history(self, workdir):
        rc = main(["train", "--config", str(workdir / "toy.cfg"),
                   "--data", str(workdir / "data"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--out", str(workdir / "toy.ckpt"),
                   "--history", str(workdir / "hist.csv")])
        assert rc == 0
        lines = (workdir / "hist.csv").read_text().splitlines()
        assert lines[0] == "epoch,phase,lr,recon,me,ma,total,masked_mae,unmasked_mae"
        assert len(lines) == 5
        assert lines[1].split(",")[1] == "ME"
        assert lines[-1].split(",")[1] == "MA"

        rc = main(["eval", "--ckpt", str(workdir / "toy.ckpt"),
                   "--data", str(workdir / "data"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--report", str(workdir / "report.csv"),
                   "--dump-difficulty", str(workdir / "diff")])
        assert rc == 0
        lines = (workdir / "report.csv").read_text().splitlines()
        assert lines[0] == "scene,psnr,ssim,masked_mae,unmasked_mae,psnr_infinite"
        assert len(lines) == 4
        # 3 scenes x 3 channels, one map + one sidecar each
        assert len(os.listdir(workdir / "diff")) == 18

    def test_train_twice_is_byte_identical(self, workdir):
        for name in ("r1.ckpt", "r2.ckpt"):
            rc = main(["train", "--config", str(workdir / "toy.cfg"),
                       "--data", str(workdir / "data"),
                       "--mask", str(workdir / "data" / "mask.msk"),
                       "--out", str(workdir / name)])
            assert rc == 0
        assert (workdir / "r1.ckpt").read_bytes() == (workdir / "r2.ckpt").read_bytes()

    def test_eval_flags_exact_reconstruction_as_infinite(self, tmp_path):
        cfg = net.NetworkConfig(k=1, l=1, c=8, t=2, m=4, n_lambda=3,
                                variant="parall_ss", k_me=1, cyclic_shift=False)
        params = net.init_params(cfg, seed=0)
        for _, t in params.items():
            t.data[...] = 0.0
        write_checkpoint(str(tmp_path / "zero.ckpt"), params)
        os.makedirs(tmp_path / "scenes")
        write_cube(str(tmp_path / "scenes" / "scene_000.hsc"),
                   HyperCube(np.zeros((12, 12, 3), np.float32)))
        write_mask(str(tmp_path / "mask.msk"), make_mask(12, 12, seed=1))
        rc = main(["eval", "--ckpt", str(tmp_path / "zero.ckpt"),
                   "--data", str(tmp_path / "scenes"),
                   "--mask", str(tmp_path / "mask.msk"),
                   "--report", str(tmp_path / "r.csv")])
        assert rc == 0
        row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
        assert row[1] == "inf"
        assert row[5] == "1"


class TestDumpFeatures:
    def test_writes_per_channel_maps(self, workdir):
        main(["train", "--config", str(workdir / "toy.cfg"),
              "--data", str(workdir / "data"),
              "--mask", str(workdir / "data" / "mask.msk"),
              "--out", str(workdir / "toy.ckpt")])
        rc = main(["dump-features", "--ckpt", str(workdir / "toy.ckpt"),
                   "--cube", str(workdir / "data" / "scene_000.hsc"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--stage", "0", "--block", "0",
                   "--out", str(workdir / "feat")])
        assert rc == 0
        pgms = sorted(n for n in os.listdir(workdir / "feat") if n.endswith(".pgm"))
        assert pgms == [f"ch{c:02d}.pgm" for c in range(8)]
        raw = (workdir / "feat" / "ch00.pgm").read_bytes()
        assert raw.startswith(b"P5\n12 12\n255\n")


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 1

    def test_missing_required_flag_is_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--cube", "x.hsc"])
        assert exc.value.code == 1

    def test_missing_file_is_2(self, tmp_path):
        write_mask(str(tmp_path / "m.msk"),
                   CodedMask(np.ones((1, 2), dtype=np.float32)))
        rc = main(["simulate", "--cube", str(tmp_path / "absent.hsc"),
                   "--mask", str(tmp_path / "m.msk"),
                   "--out", str(tmp_path / "y.hsc")])
        assert rc == 2

    def test_corrupt_file_is_2(self, tmp_path, workdir):
        bad = tmp_path / "bad.hsc"
        bad.write_bytes(b"XSC1" + struct.pack("<III", 1, 1, 1) + b"\0" * 4)
        rc = main(["simulate", "--cube", str(bad),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--out", str(tmp_path / "y.hsc")])
        assert rc == 2

    def test_tap_out_of_range_is_2(self, workdir):
        main(["train", "--config", str(workdir / "toy.cfg"),
              "--data", str(workdir / "data"),
              "--mask", str(workdir / "data" / "mask.msk"),
              "--out", str(workdir / "toy.ckpt")])
        rc = main(["dump-features", "--ckpt", str(workdir / "toy.ckpt"),
                   "--cube", str(workdir / "data" / "scene_000.hsc"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--stage", "5", "--block", "0",
                   "--out", str(workdir / "feat")])
        assert rc == 2

    def test_bad_thread_cap_is_2(self, workdir, monkeypatch):
        monkeypatch.setenv("S2_THREADS", "many")
        rc = main(["simulate", "--cube", str(workdir / "data" / "scene_000.hsc"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--out", str(workdir / "y.hsc")])
        assert rc == 2

    def test_thread_cap_applies(self, workdir, monkeypatch):
        monkeypatch.setenv("S2_THREADS", "1")
        rc = main(["simulate", "--cube", str(workdir / "data" / "scene_000.hsc"),
                   "--mask", str(workdir / "data" / "mask.msk"),
                   "--out", str(workdir / "y.hsc")])
        assert rc == 0


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "FAIL" not in out
