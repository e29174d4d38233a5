import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from ldrnet import cli
from ldrnet import data as D
from ldrnet import model as M


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file() and p.name != "index.json":
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "tr"), "--count", "24", "--seed", "1"]) == 0
    assert cli.main(["gen-data", "--out", str(root / "te"), "--count", "12", "--seed", "2"]) == 0
    assert cli.main(["train", "--data", str(root / "tr"), "--val-data", str(root / "te"),
                     "--out", str(root / "run"), "--epochs", "2", "--alpha", "0.25"]) == 0
    return root


class TestGenData:
    def test_count_and_index(self, work):
        assert len(D.load_dataset(work / "tr")) == 24
        index = D.read_index(work / "tr")
        assert index["flags"]["seed"] == 1 and index["command"] == "gen-data"

    def test_reproducible(self, work, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path / "again"), "--count", "24", "--seed", "1"]) == 0
        assert digest(tmp_path / "again") == digest(work / "tr")
        a, b = D.read_index(tmp_path / "again"), D.read_index(work / "tr")
        a["flags"].pop("out"), b["flags"].pop("out")
        assert a == b

    def test_bad_probability(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(["gen-data", "--out", str(tmp_path / "x"), "--count", "2", "--occlusion", "1.5"])
        assert info.value.code == 2

    def test_refuses_non_empty(self, work, capsys):
        assert cli.main(["gen-data", "--out", str(work / "tr"), "--count", "2"]) == 2
        assert "--force" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, work):
        run = work / "run"
        for name in ("model.ckpt", "state.ckpt", "metrics.csv", "run.json"):
            assert (run / name).exists()
        meta = json.loads((run / "run.json").read_text())
        assert meta["train_config"]["epochs"] == 2
        assert meta["train_config"]["model"]["alpha"] == 0.25
        ck = M.load_checkpoint(run / "model.ckpt")
        assert ck.meta["flags"]["epochs"] == 2

    def test_bit_reproducible(self, work, tmp_path):
        assert cli.main(["train", "--data", str(work / "tr"), "--val-data", str(work / "te"),
                         "--out", str(tmp_path / "run"), "--epochs", "2", "--alpha", "0.25"]) == 0
        assert (work / "run" / "model.ckpt").read_bytes() == (tmp_path / "run" / "model.ckpt").read_bytes()

    def test_out_as_checkpoint_path(self, work, tmp_path):
        target = tmp_path / "sub" / "final.ckpt"
        target.parent.mkdir()
        assert cli.main(["train", "--data", str(work / "tr"), "--out", str(target), "--epochs", "1",
                         "--alpha", "0.25"]) == 0
        assert target.exists() and (target.parent / "metrics.csv").exists()
        assert M.load_checkpoint(target).meta["flags"]["epochs"] == 1

    def test_profiles_and_flags(self):
        args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--profile", "paper"])
        cfg = cli._train_config(args)
        assert cfg.epochs == 1000 and cfg.batch_size == 128 and cfg.model.alpha == 0.35
        assert cfg.milestones == ((250, 1e-4), (700, 5e-5), (850, 1e-5))
        args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--no-line-loss",
                                              "--no-fusion", "--epochs", "20"])
        cfg = cli._train_config(args)
        assert cfg.weights.beta == 0 and cfg.weights.gamma == 0
        assert not cfg.model.fusion_enabled
        assert [e for e, _ in cfg.milestones] == [12, 17, 19]

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


class TestEvalInfer:
    def test_oracle(self, work, tmp_path, capsys):
        out = tmp_path / "ev.json"
        assert cli.main(["eval", "--data", str(work / "te"), "--oracle", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["overall"] == pytest.approx(1.0)
        assert (tmp_path / "ev.csv").exists()
        assert "1.0000" in capsys.readouterr().out

    def test_needs_ckpt(self, work):
        assert cli.main(["eval", "--data", str(work / "te")]) == 2

    def test_infer_json(self, work, capsys):
        ck = str(work / "run" / "model.ckpt")
        img = str(work / "te" / "images" / "000000.ppm")
        assert cli.main(["infer", "--ckpt", ck, "--image", img, "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        quad = np.array(out["corners"])
        assert quad.shape == (4, 2) and out["class"] in (0, 1)
        expect, _ = M.predict_quad(M.load_checkpoint(ck), D.read_ppm(img) / np.float32(255), 64, 64)
        np.testing.assert_allclose(quad, expect, rtol=1e-6)

    def test_infer_wrong_size(self, work, tmp_path):
        p = tmp_path / "big.ppm"
        p.write_bytes(D.encode_ppm(np.zeros((32, 32, 3), np.uint8)))
        assert cli.main(["infer", "--ckpt", str(work / "run" / "model.ckpt"), "--image", str(p)]) == 3

    def test_corrupt_checkpoint(self, work, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert cli.main(["eval", "--data", str(work / "te"), "--ckpt", str(bad)]) == 3


class TestBenchPlot:
    def test_bench_and_plots(self, work, tmp_path, capsys):
        ck = str(work / "run" / "model.ckpt")
        assert cli.main(["eval", "--data", str(work / "te"), "--ckpt", ck, "--out", str(tmp_path / "ev.json")]) == 0
        assert cli.main(["bench", "--ckpt", ck, "--frames", "30", "--out", str(tmp_path / "b.json")]) == 0
        bench = json.loads((tmp_path / "b.json").read_text())
        assert bench["within_budget"] == (bench["mean_ms"] < 1000 / 30)
        assert "frame budget" in capsys.readouterr().out
        assert cli.main(["bench", "--ckpt", ck, "--frames", "30", "--paired",
                         "--out", str(tmp_path / "p.json")]) == 0
        assert set(json.loads((tmp_path / "p.json").read_text())) >= {"pruned", "full"}
        ablation = {"flags": {"axis": "alpha", "no_fusion": False},
                    "summary": [{"value": 0.25, "median": 0.5}, {"value": 0.5, "median": 0.6}]}
        (tmp_path / "ab.json").write_text(json.dumps(ablation))
        assert cli.main(["plot", "--eval", str(tmp_path / "ev.json"), "--bench", str(tmp_path / "p.json"),
                         "--ablation", str(tmp_path / "ab.json"), "--out", str(tmp_path / "fig")]) == 0
        for name in ("ji_vs_latency.svg", "ji_vs_alpha.svg"):
            root = ET.parse(tmp_path / "fig" / name).getroot()
            assert root.tag.endswith("svg")

    def test_plot_usage(self, tmp_path):
        assert cli.main(["plot", "--out", str(tmp_path)]) == 2
        assert cli.main(["plot", "--eval", "a.json", "--out", str(tmp_path)]) == 2

    def test_ablate_bad_value(self, work, tmp_path):
        assert cli.main(["ablate", "--axis", "fusion", "--values", "maybe", "--data", str(work / "tr"),
                         "--test-data", str(work / "te"), "--out", str(tmp_path / "a.json")]) == 2
