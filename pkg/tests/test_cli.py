import math
import subprocess
import sys

import numpy as np
import pytest

from tokenmerge.autodiff import Node
from tokenmerge.cli import main, parse_adapter, parse_merge
from tokenmerge.groupmap import group_text
from tokenmerge.merging import bdm_merge, group_map
from tokenmerge.state import TokenState

SYNTH = "grid=4x4,patch=2,classes=3,sigma=0.3,n=96,seed=1"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    out = {}
    for line in text.splitlines():
        for part in line.split():
            if "=" in part:
                k, v = part.split("=", 1)
                out[k] = v
    return out


class TestUsage:
    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 1

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["flops", "--bogus"])
        assert e.value.code == 1

    def test_missing_data(self, capsys):
        code, _, err = run(capsys, "train", "--epochs", "2", "--warmup", "1")
        assert code == 1 and "data source" in err

    def test_checkerboard_odd_grid(self, capsys):
        code, _, err = run(capsys, "train", "--synth", "grid=3x3,patch=2,n=8", "--merge", "bdm",
                           "--epochs", "2", "--warmup", "1", "--no-plots")
        assert code == 1 and "even" in err

    def test_refine_too_wide(self, capsys):
        code, _, err = run(capsys, "flops", "--dim", "16", "--heads", "2", "--merge", "bdm")
        assert code == 1 and "refine width" in err

    def test_bad_merge_and_adapter(self, capsys):
        assert run(capsys, "flops", "--merge", "magic")[0] == 1
        assert run(capsys, "flops", "--adapter", "prefix:4")[0] == 1

    def test_missing_dataset_file_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "x.fpet"), "--data", str(tmp_path / "no.tkds"))
        assert code == 2


def test_parse_helpers():
    assert parse_merge("bsm-per-layer:8") == ("bsm_per_layer", 8)
    assert parse_merge("avg") == ("avg_pool", None)
    assert parse_adapter("lora:4") == ("lora", 4)


class TestFlops:
    def test_baseline(self, capsys):
        code, out, _ = run(capsys, "flops", "--preset", "vitb16", "--merge", "none", "--format", "kv")
        assert code == 0
        assert float(kv(out)["total_g"]) == pytest.approx(17.6, rel=0.02)

    def test_bdm_layer6(self, capsys):
        code, out, _ = run(capsys, "flops", "--preset", "vitb16", "--merge", "bdm", "--merge-layer", "6", "--format", "kv")
        d = kv(out)
        assert 13.1 <= float(d["total_g"]) <= 13.5
        assert float(d["reduction_vs_baseline"]) >= 0.23
        assert d["layer6_tokens"] == "197->99"

    def test_layer4(self, capsys):
        _, out, _ = run(capsys, "flops", "--preset", "vitb16", "--merge", "bdm", "--merge-layer", "4", "--format", "kv")
        assert float(kv(out)["total_g"]) == pytest.approx(12.0, rel=0.05)

    def test_text_and_files(self, capsys, tmp_path):
        code, out, _ = run(capsys, "flops", "--preset", "vitb16", "--merge", "bdm", "--merge-layer", "6", "--out", str(tmp_path))
        assert code == 0 and "total" in out
        for name in ("flops.txt", "flops.kv", "flops_per_layer.png", "flops_sweep.png", "flops_sweep.csv"):
            assert (tmp_path / name).stat().st_size > 0
        rows = (tmp_path / "flops_sweep.csv").read_text().splitlines()
        assert rows[0] == "merge_layer,total,reduction" and len(rows) == 13

    def test_config_file_precedence(self, capsys, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("depth=6\nmerge=bdm\nmerge-layer=2\n")
        _, out, _ = run(capsys, "flops", "--preset", "vitb16", "--config", str(cfg), "--format", "kv")
        d = kv(out)
        assert "layer5" in d and "layer6" not in d and d["layer2_tokens"] == "197->99"
        _, out, _ = run(capsys, "flops", "--preset", "vitb16", "--config", str(cfg), "--depth", "8", "--format", "kv")
        assert "layer7" in kv(out)


def train_args(out, *extra):
    return ["train", "--synth", SYNTH, "--depth", "2", "--dim", "16", "--heads", "2", "--refine-hidden", "4", "--epochs", "3",
            "--warmup", "1", "--batch", "16", "--out", str(out), *extra]


class TestTrainEvalInspect:
    def test_train_bdm_counts_and_outputs(self, capsys, tmp_path):
        code, out, _ = run(capsys, *train_args(tmp_path, "--merge", "bdm", "--merge-layer", "1", "--adapter", "adaptformer:4"))
        assert code == 0
        d = kv(out)
        assert d["tokens_in"] == "17" and d["tokens_out"] == "9"
        assert float(d["step0_loss"]) == pytest.approx(math.log(3), abs=1e-6)
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,split,loss,acc,lr"
        for name in ("best.fpet", "final.fpet", "curves.png"):
            assert (tmp_path / name).exists()

        code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "final.fpet"), "--synth", SYNTH)
        assert code == 0 and 0.0 <= float(kv(out)["top1"]) <= 1.0

    def test_step0_bdm_matches_checkerboard_bsm(self, capsys, tmp_path):
        losses = []
        for merge in (["--merge", "bdm"], ["--merge", "bsm", "--split", "checkerboard"], ["--merge", "none"]):
            _, out, _ = run(capsys, *train_args(tmp_path, *merge, "--epochs", "2", "--no-plots"))
            losses.append(kv(out)["step0_loss"])
        assert losses[0] == losses[1]

    def test_deterministic(self, capsys, tmp_path):
        outs = []
        for sub in ("a", "b"):
            run(capsys, *train_args(tmp_path / sub, "--merge", "bdm", "--no-plots"))
            outs.append((tmp_path / sub / "final.fpet").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_mismatch(self, capsys, tmp_path):
        run(capsys, *train_args(tmp_path, "--no-plots"))
        code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "final.fpet"),
                           "--synth", "grid=4x4,patch=2,classes=4,n=8")
        assert code == 2 and "classes" in err

    def test_inspect_no_merge(self, capsys, tmp_path):
        code, out, _ = run(capsys, "inspect-merge", "--synth", SYNTH, "--depth", "2", "--dim", "16", "--heads", "2",
                           "--merge", "none", "--out", str(tmp_path))
        assert code == 0
        text = (tmp_path / "sample0_groups.txt").read_text()
        assert sorted(int(t) for t in text.split()) == list(range(16))
        assert kv(out)["groups"] == "16"
        assert (tmp_path / "sample0_groups.ppm").read_bytes().startswith(b"P6")
        assert (tmp_path / "sample0_groups.png").exists()

    def test_inspect_bdm_halves(self, capsys, tmp_path):
        code, out, _ = run(capsys, "inspect-merge", "--synth", SYNTH, "--depth", "2", "--dim", "16", "--heads", "2",
                           "--merge", "bdm", "--merge-layer", "0", "--refine-hidden", "4", "--out", str(tmp_path), "--no-plots")
        assert code == 0 and kv(out)["groups"] == "8"


def test_worked_example_groups():
    tokens = np.array([[[2.0, 0.0], [4.0, 0.0], [0.0, 4.0], [0.0, 2.0]]])
    keys = np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]])
    out = bdm_merge(TokenState.fresh(Node(tokens), (2, 2), False), keys).state
    assert group_text(group_map(out, (2, 2))[0]) == "0 0\n1 1\n"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tokenmerge", "flops", "--preset", "vitb16", "--format", "kv"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "total_g=17." in res.stdout
