import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ecn.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _strip_wall_time(path):
    return [line.rsplit(",", 1)[0] for line in open(path).read().splitlines()]


TRAIN = ["train", "--dataset", "synthetic", "--samples", "32", "--block", "1", "--init-channels", "4",
         "--scale", "1/2", "--epochs", "2", "--batch", "16", "--seed", "1", "--threads", "1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(TRAIN + ["--out", str(out)]) == 0
    return out


class TestPlan:
    @pytest.mark.parametrize("argv,total", [
        (["--block", "6", "--init-channels", "16", "--scale", "1/2", "--classes", "10"], 19514),
        (["--block", "4", "--init-channels", "64", "--scale", "3/4", "--classes", "100"], 3403300),
    ])
    def test_published_totals(self, capsys, argv, total):
        code, out, _ = run(capsys, "plan", *argv, "--input", "32")
        assert code == 0
        assert out.splitlines()[-1].split() == ["total", str(total)]

    def test_nine_tenths_matches_audit(self, capsys, tmp_path):
        code, out, _ = run(capsys, "plan", "--block", "1", "--init-channels", "16", "--scale", "9/10",
                           "--classes", "10", "--input", "32", "--audit", "--out", str(tmp_path))
        assert code == 0 and "audit: pass" in out
        manifest = json.load(open(tmp_path / "manifest.json"))
        sizes = [l["out_hw"][0] for l in manifest["plan"]["layers"]]
        chain, s = [], 32
        while s * 9 // 10 >= 4:
            s = s * 9 // 10
            chain.append(s)
        assert sizes == chain

    def test_zero_depth_is_failure(self, capsys):
        code, _, err = run(capsys, "plan", "--block", "1", "--init-channels", "8", "--scale", "1/2",
                           "--input", "6")
        assert code == 1 and "error" in err

    @pytest.mark.parametrize("scale", ["3/2", "abc", "1"])
    def test_invalid_rational_is_usage_error(self, capsys, scale):
        with pytest.raises(SystemExit) as exc:
            main(["plan", "--block", "1", "--init-channels", "8", "--scale", scale])
        assert exc.value.code == 2


class TestAudit:
    def test_all_cells_pass(self, capsys):
        code, out, _ = run(capsys, "audit")
        assert code == 0
        assert out.splitlines()[-1] == "118/118 cells match"
        assert out.count(" pass") == 118

    def test_subset(self, capsys):
        code, out, _ = run(capsys, "audit", "--table", "ecn6")
        assert code == 0 and out.splitlines()[-1] == "10/10 cells match"

    def test_mismatch_exits_nonzero(self, capsys, monkeypatch):
        from ecn import reference_counts
        cells = list(reference_counts.oracle_cells("ecn6"))
        bad = [cells[0][:-1] + (cells[0][-1] + 1,)] + cells[1:]
        monkeypatch.setattr(reference_counts, "oracle_cells", lambda table: bad)
        code, out, _ = run(capsys, "audit")
        assert code == 1 and "FAIL" in out and "9/10" in out


class TestTrainEval:
    def test_outputs(self, trained):
        assert sorted(os.listdir(trained)) == ["epoch0001.ckpt", "epoch0002.ckpt", "last.ckpt",
                                               "manifest.json", "metrics.csv", "metrics.jsonl"]
        manifest = json.load(open(trained / "manifest.json"))
        assert manifest["seed"] == 1 and manifest["threads"] == 1
        assert manifest["cascade"]["block"] == 1 and manifest["dataset"]["name"] == "synthetic"

    def test_eval_matches_last_logged_row(self, capsys, trained):
        last = json.loads(open(trained / "metrics.jsonl").read().splitlines()[-1])
        code, out, _ = run(capsys, "eval", "--checkpoint", str(trained / "last.ckpt"))
        assert code == 0
        assert out.strip() == f"loss={last['test_loss']!r} acc={last['test_acc']!r}"
        assert run(capsys, "eval", "--checkpoint", str(trained / "last.ckpt"))[1] == out

    def test_eval_class_mismatch(self, capsys, trained):
        code, _, err = run(capsys, "eval", "--checkpoint", str(trained / "last.ckpt"),
                           "--dataset", "synthetic", "--synthetic-classes", "3")
        assert code == 1 and "classes" in err

    def test_eval_bad_checkpoint(self, capsys, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        code, _, err = run(capsys, "eval", "--checkpoint", str(bad))
        assert code == 1 and "magic" in err

    def test_same_flags_same_outputs(self, capsys, trained, tmp_path):
        assert run(capsys, *TRAIN, "--out", str(tmp_path))[0] == 0
        assert _strip_wall_time(tmp_path / "metrics.csv") == _strip_wall_time(trained / "metrics.csv")
        assert (tmp_path / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()

    def test_manifest_rerun(self, capsys, trained, tmp_path):
        code, _, _ = run(capsys, "train", "--manifest", str(trained / "manifest.json"), "--out", str(tmp_path))
        assert code == 0
        assert _strip_wall_time(tmp_path / "metrics.csv") == _strip_wall_time(trained / "metrics.csv")
        assert (tmp_path / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()

    def test_resume_matches_uninterrupted(self, capsys, tmp_path):
        argv = TRAIN[:TRAIN.index("--epochs")] + ["--epochs", "3"] + TRAIN[TRAIN.index("--epochs") + 2:]
        full, part = tmp_path / "full", tmp_path / "part"
        assert run(capsys, *argv, "--out", str(full))[0] == 0
        assert run(capsys, *argv, "--stop-after", "2", "--out", str(part))[0] == 0
        assert not (part / "epoch0003.ckpt").exists()
        assert run(capsys, *argv, "--resume", str(part / "last.ckpt"), "--out", str(part))[0] == 0
        assert (part / "last.ckpt").read_bytes() == (full / "last.ckpt").read_bytes()
        assert _strip_wall_time(part / "metrics.csv") == _strip_wall_time(full / "metrics.csv")

    def test_missing_network_flags(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "synthetic", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_missing_dataset_root(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--dataset", "cifar10", "--data-root", str(tmp_path),
                           "--block", "1", "--init-channels", "4", "--scale", "1/2", "--out", str(tmp_path / "o"))
        assert code == 1 and "error" in err


class TestGradcheckCmd:
    def test_named_cases(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--case", "bilinear_down", "--case", "block6",
                           "--case", "cascade_layer", "--seeds", "2")
        assert code == 0
        assert out.count(" pass") == 3 and "failed=0" in out

    def test_unknown_case(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--case", "nope"])
        assert exc.value.code == 2


class TestVisualizeCmd:
    def test_grids(self, capsys, trained, tmp_path):
        code, out, _ = run(capsys, "visualize", "--checkpoint", str(trained / "last.ckpt"),
                           "--index", "3", "--out", str(tmp_path / "a"))
        assert code == 0
        pngs = sorted(p for p in os.listdir(tmp_path / "a") if p.endswith(".png"))
        assert len(pngs) == 4  # stem plus three cascade layers
        heights = [np.asarray(Image.open(tmp_path / "a" / p)).shape[0] for p in pngs]
        assert heights == [1 * 33 + 1, 2 * 17 + 1, 3 * 9 + 1, 4 * 5 + 1]
        run(capsys, "visualize", "--checkpoint", str(trained / "last.ckpt"), "--index", "3",
            "--out", str(tmp_path / "b"))
        for p in pngs:
            assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()

    def test_raw_image_file(self, capsys, trained, tmp_path):
        raw = tmp_path / "img.bin"
        raw.write_bytes(np.full(3072, 77, np.uint8).tobytes())
        code, _, _ = run(capsys, "visualize", "--checkpoint", str(trained / "last.ckpt"),
                         "--image-file", str(raw), "--out", str(tmp_path / "v"))
        assert code == 0
        raw.write_bytes(b"\0" * 10)
        code, _, err = run(capsys, "visualize", "--checkpoint", str(trained / "last.ckpt"),
                           "--image-file", str(raw), "--out", str(tmp_path / "w"))
        assert code == 1 and "bytes" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ecn", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("ecn ")
