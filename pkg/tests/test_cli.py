import csv
import json

import numpy as np
import pytest
from PIL import Image

import chitnet.cli as cli
from chitnet.cli import main
from chitnet.imaging import load_gray, save_gray
from chitnet.synthetic import write_dataset
from chitnet.trainer import TrainingDiverged, load_model

CONFIG = """\
# tiny run
channels = 4
rdb_layers = 1
patch_size = 16
batch_size = 2
iteration_maximum = 4
phase_block = 2
seed = 3
dataset = data
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(root / "data", count=2, size=24, seed=2)
    (root / "run.cfg").write_text(CONFIG)
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "run")]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "run" / "final.chit").exists()
        model, meta = load_model(trained / "run" / "final.chit")
        assert meta["iteration"] == 4 and model.spec.channels == 4
        assert len((trained / "run" / "loss.log").read_text().splitlines()) == 4

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--out", tmp_path)
        assert code == 1 and "usage:" in err and "--config" in err

    def test_unknown_flag(self, capsys, trained, tmp_path):
        code, _, err = run(capsys, "train", "--config", trained / "run.cfg", "--out", tmp_path, "--bogus")
        assert code == 1 and "usage:" in err

    def test_invalid_key(self, capsys, tmp_path):
        (tmp_path / "bad.cfg").write_text("channels = 4\nlamda_edge = 3\n")
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o")
        assert code == 1 and "lamda_edge" in err
        assert not (tmp_path / "o").exists()

    def test_missing_dataset(self, capsys, tmp_path):
        (tmp_path / "c.cfg").write_text("dataset = nowhere\n")
        code, _, err = run(capsys, "train", "--config", tmp_path / "c.cfg", "--out", tmp_path / "o")
        assert code == 1

    def test_resume_from_final_is_noop(self, capsys, trained):
        log_before = (trained / "run" / "loss.log").read_text()
        ckpt_before = (trained / "run" / "final.chit").read_bytes()
        code, out, _ = run(capsys, "train", "--config", trained / "run.cfg", "--out", trained / "run",
                           "--resume", trained / "run" / "final.chit")
        assert code == 0 and "nothing to do" in out
        assert (trained / "run" / "loss.log").read_text() == log_before
        assert (trained / "run" / "final.chit").read_bytes() == ckpt_before

    def test_resume_mid_run(self, capsys, trained, tmp_path):
        code, out, _ = run(capsys, "train", "--config", trained / "run.cfg", "--out", tmp_path / "r",
                           "--resume", trained / "run" / "ckpt_000002.chit")
        assert code == 0
        assert (tmp_path / "r" / "final.chit").read_bytes() == (trained / "run" / "final.chit").read_bytes()

    def test_runtime_failures_exit_2(self, capsys, trained, tmp_path, monkeypatch):
        def diverge(*a, **k):
            raise TrainingDiverged("non-finite loss at iteration 0")

        monkeypatch.setattr(cli, "train", diverge)
        code, _, err = run(capsys, "train", "--config", trained / "run.cfg", "--out", tmp_path / "o")
        assert code == 2 and "non-finite" in err

        def boom(*a, **k):
            raise RuntimeError("out of memory")

        monkeypatch.setattr(cli, "train", boom)
        code, _, err = run(capsys, "train", "--config", trained / "run.cfg", "--out", tmp_path / "o")
        assert code == 2 and "out of memory" in err

    def test_writes_only_under_out(self, capsys, trained, tmp_path):
        cfg = CONFIG.replace("dataset = data", f"dataset = {trained / 'data'}").replace("= 4\nphase", "= 1\nphase")
        (tmp_path / "c.cfg").write_text(cfg)
        before = {p.name for p in tmp_path.iterdir()}
        code, _, _ = run(capsys, "train", "--config", tmp_path / "c.cfg", "--out", tmp_path / "o")
        assert code == 0
        assert {p.name for p in tmp_path.iterdir()} - before == {"o"}


class TestFuse:
    def pair(self, trained):
        return trained / "data" / "ir" / "scene00.png", trained / "data" / "vis" / "scene00.png"

    def test_fuse_and_determinism(self, capsys, trained, tmp_path):
        ir, vis = self.pair(trained)
        ckpt = trained / "run" / "final.chit"
        for name in ("a.png", "b.png"):
            code, _, _ = run(capsys, "fuse", "--ir", ir, "--vis", vis, "--checkpoint", ckpt, "--out", tmp_path / name)
            assert code == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert load_gray(tmp_path / "a.png").shape == load_gray(ir).shape

    def test_intermediates(self, capsys, trained, tmp_path):
        ir, vis = self.pair(trained)
        code, out, _ = run(capsys, "fuse", "--ir", ir, "--vis", vis, "--checkpoint", trained / "run" / "final.chit",
                           "--out", tmp_path / "f.png", "--save-intermediates")
        assert code == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        feats = [n for n in names if n.startswith("f_feat_")]
        aux = [n for n in names if n.startswith(("f_ir_", "f_vis_"))]
        assert len(feats) == 4 and len(aux) == 10
        assert {"f_feat_ir.png", "f_feat_vis2ir.png", "f_feat_vis.png", "f_feat_ir2vis.png"} == set(feats)
        assert len(names) == 15 and len(out.splitlines()) == 15

    def test_dimension_mismatch(self, capsys, trained, tmp_path, rng):
        ir, _ = self.pair(trained)
        save_gray(rng.random((20, 24)), tmp_path / "small.png")
        code, _, err = run(capsys, "fuse", "--ir", ir, "--vis", tmp_path / "small.png",
                           "--checkpoint", trained / "run" / "final.chit", "--out", tmp_path / "f.png")
        assert code == 1 and "differ" in err
        assert not (tmp_path / "f.png").exists()

    def test_color_needs_force_gray(self, capsys, trained, tmp_path, rng):
        ir, _ = self.pair(trained)
        rgb = (rng.random((24, 24, 3)) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(tmp_path / "rgb.png")
        args = ["fuse", "--ir", ir, "--vis", tmp_path / "rgb.png", "--checkpoint", trained / "run" / "final.chit",
                "--out", tmp_path / "f.png"]
        code, _, err = run(capsys, *args)
        assert code == 1 and "--force-gray" in err
        assert run(capsys, *args, "--force-gray")[0] == 0

    def test_bad_checkpoint(self, capsys, trained, tmp_path):
        ir, vis = self.pair(trained)
        (tmp_path / "junk.chit").write_bytes(b"junk")
        for ckpt in (tmp_path / "junk.chit", tmp_path / "missing.chit"):
            code, _, _ = run(capsys, "fuse", "--ir", ir, "--vis", vis, "--checkpoint", ckpt, "--out", tmp_path / "f.png")
            assert code == 1


class TestEval:
    def corpus(self, root, rng, names=("a.png",), identical=False):
        for n in names:
            x = rng.random((20, 20))
            imgs = (x, x, x) if identical else rng.random((3, 20, 20))
            for sub, img in zip(("fused", "ir", "vis"), imgs):
                save_gray(img, root / sub / n)
        return [root / "fused", root / "ir", root / "vis"]

    def args(self, dirs, out):
        return ["eval", "--fused", dirs[0], "--ir", dirs[1], "--vis", dirs[2], "--out", out]

    def test_identity_triple(self, capsys, tmp_path, rng):
        dirs = self.corpus(tmp_path, rng, identical=True)
        code, out, _ = run(capsys, *self.args(dirs, tmp_path / "r.csv"))
        assert code == 0
        row = next(csv.DictReader(open(tmp_path / "r.csv")))
        assert float(row["cc"]) == pytest.approx(1.0) and float(row["ssim"]) == pytest.approx(2.0)
        assert "a.png" in out and "SSIM" in out

    def test_csv_rows_and_determinism(self, capsys, tmp_path, rng):
        dirs = self.corpus(tmp_path, rng, names=("a.png", "b.png", "c.png"))
        assert run(capsys, *self.args(dirs, tmp_path / "r1.csv"), "--jobs", 2)[0] == 0
        assert run(capsys, *self.args(dirs, tmp_path / "r2.csv"))[0] == 0
        lines = (tmp_path / "r1.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 + 2
        assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()

    def test_no_matches(self, capsys, tmp_path, rng):
        dirs = self.corpus(tmp_path, rng)
        (dirs[1] / "a.png").rename(dirs[1] / "z.png")
        code, out, err = run(capsys, *self.args(dirs, tmp_path / "r.csv"))
        assert code == 1 and "no file name" in err
        assert not (tmp_path / "r.csv").exists()

    def test_unmatched_listed(self, capsys, tmp_path, rng):
        dirs = self.corpus(tmp_path, rng, names=("a.png", "b.png"))
        (dirs[2] / "b.png").unlink()
        code, _, err = run(capsys, *self.args(dirs, tmp_path / "r.csv"))
        assert code == 1 and "b.png" in err
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 4

    def test_missing_dir(self, capsys, tmp_path):
        code, _, _ = run(capsys, *self.args([tmp_path / "x", tmp_path / "y", tmp_path / "z"], tmp_path / "r.csv"))
        assert code == 1


class TestInspect:
    def test_summary_and_json(self, capsys, trained):
        code, out, _ = run(capsys, "inspect", trained / "run" / "final.chit")
        assert code == 0 and "iteration:   4" in out and "config.channels = 4" in out
        code, out, _ = run(capsys, "inspect", trained / "run" / "final.chit", "--json")
        meta = json.loads(out)
        assert meta["iteration"] == 4 and len(meta["permutations"]) == 2
        assert all({"key", "dtype", "shape", "offset", "nbytes"} == set(r) for r in meta["tensors"])

    def test_not_a_checkpoint(self, capsys, tmp_path):
        (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
        assert run(capsys, "inspect", tmp_path / "x")[0] == 1
