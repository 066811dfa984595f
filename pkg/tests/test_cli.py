import json

import numpy as np
import pytest
from PIL import Image

from icoformer.cli import main
from icoformer.resample import load_pfm


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    return code, (json.loads(out) if out.strip() else None), err


def test_info(capsys):
    code, d, _ = run_json(capsys, "info", "--rank", "7", "--node-type", "hex")
    assert code == 0 and d["vertices"] == 163842 and d["schema_version"] == 1 and d["command"] == "info"
    assert d["degree_histogram"] == {"5": 12, "6": 163830}
    assert d["max_neighborhood"] == {"1": 7, "2": 19, "3": 37}
    code, d, _ = run_json(capsys, "info", "--rank", "0", "--node-type", "ico")
    assert d["faces"] == 20 and d["max_neighborhood"]["1"] == 4
    code, out, _ = run(capsys, "info", "--rank", "2")
    assert code == 0 and "vertices 162" in out
    assert run(capsys, "info", "--rank", "-1")[0] == 2
    assert run(capsys, "info", "--rank", "10")[0] == 2
    assert run(capsys, "info")[0] == 2


def test_stats(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rank": 7, "c_head": 2, "c_win": 2}))
    code, d7, _ = run_json(capsys, "stats", "--config", str(cfg))
    assert code == 0 and abs(d7["params"] / 14.9e6 - 1) < 0.05
    assert "multiply-accumulate" in d7["flop_convention"]
    _, d8, _ = run_json(capsys, "stats", "--config", str(cfg), "--rank", "8")
    assert d8["params"] == d7["params"] and d8["flops"] > 3.5 * d7["flops"]
    _, d6, _ = run_json(capsys, "stats", "--rank", "6")
    assert abs(d6["params"] / 11.2e6 - 1) < 0.05
    cfg.write_text(json.dumps({"rank": 7, "heads": 3}))
    assert run(capsys, "stats", "--config", str(cfg))[0] == 2
    cfg.write_text("{not json")
    assert run(capsys, "stats", "--config", str(cfg))[0] == 2
    assert run(capsys, "stats", "--rank", "3")[0] == 2


def test_convert_roundtrip(capsys, tmp_path):
    Image.fromarray(np.full((32, 64, 3), 77, np.uint8)).save(tmp_path / "c.png")
    code, d, _ = run_json(capsys, "convert", "--in", str(tmp_path / "c.png"), "--out", str(tmp_path / "s.sufm"),
                          "--direction", "erp2sph", "--rank", "3")
    assert code == 0 and d["nodes"] == 642 and d["channels"] == 3
    code, _, _ = run(capsys, "convert", "--in", str(tmp_path / "s.sufm"), "--out", str(tmp_path / "b.png"),
                     "--direction", "sph2erp", "--width", "64", "--height", "32")
    assert code == 0
    assert np.all(np.asarray(Image.open(tmp_path / "b.png")) == 77)


def test_convert_labels(capsys, tmp_path):
    lab = np.random.default_rng(0).integers(0, 5, size=(64, 128)).astype(np.uint8)
    Image.fromarray(lab, mode="L").save(tmp_path / "l.png")
    assert run(capsys, "convert", "--in", str(tmp_path / "l.png"), "--out", str(tmp_path / "s.sufm"),
               "--direction", "erp2sph", "--rank", "4", "--kind", "label")[0] == 0
    assert run(capsys, "convert", "--in", str(tmp_path / "s.sufm"), "--out", str(tmp_path / "o.png"),
               "--direction", "sph2erp", "--kind", "label", "--width", "128", "--height", "64")[0] == 0
    assert set(np.unique(np.asarray(Image.open(tmp_path / "o.png")))) == set(range(5))
    assert run(capsys, "convert", "--in", str(tmp_path / "s.sufm"), "--out", str(tmp_path / "o.png"),
               "--direction", "sph2erp", "--kind", "label", "--mode", "barycentric")[0] == 2


def test_convert_full_resolution(capsys, tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(256, 512, 3)).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "p.png")
    code, d, _ = run_json(capsys, "convert", "--in", str(tmp_path / "p.png"), "--out", str(tmp_path / "s.sufm"),
                          "--direction", "erp2sph", "--rank", "7")
    assert code == 0 and (d["nodes"], d["channels"]) == (163842, 3)


def test_convert_errors(capsys, tmp_path):
    assert run(capsys, "convert", "--in", str(tmp_path / "missing.png"), "--out", str(tmp_path / "s.sufm"),
               "--direction", "erp2sph", "--rank", "3")[0] == 2
    (tmp_path / "x.png").write_bytes(b"not a png")
    assert run(capsys, "convert", "--in", str(tmp_path / "x.png"), "--out", str(tmp_path / "s.sufm"),
               "--direction", "erp2sph", "--rank", "3")[0] == 2
    Image.fromarray(np.zeros((8, 16, 3), np.uint8)).save(tmp_path / "z.png")
    assert run(capsys, "convert", "--in", str(tmp_path / "z.png"), "--out", str(tmp_path / "s.sufm"),
               "--direction", "erp2sph")[0] == 2
    assert run(capsys, "convert", "--in", str(tmp_path / "z.png"), "--out", str(tmp_path / "s.sufm"),
               "--direction", "sideways")[0] == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train-toy", "--steps", "6", "--eval-every", "3", "--out-dir", str(out),
                 "--cache-dir", str(out / "cache")]) == 0
    return out


def test_train_toy_outputs(trained):
    for name in ("checkpoint.sufm", "curve.csv", "metrics.json", "config.json"):
        assert (trained / name).exists()
    assert json.loads((trained / "config.json").read_text())["rank"] == 4
    assert len((trained / "curve.csv").read_text().splitlines()) == 7
    assert set(json.loads((trained / "metrics.json").read_text())) == {"mae", "mre", "delta1"}
    assert list((trained / "cache").glob("*.sufm"))


def test_train_toy_deterministic(capsys, trained, tmp_path):
    assert run(capsys, "train-toy", "--steps", "6", "--eval-every", "3", "--out-dir", str(tmp_path))[0] == 0
    assert (tmp_path / "curve.csv").read_text() == (trained / "curve.csv").read_text()
    assert (tmp_path / "checkpoint.sufm").read_bytes() == (trained / "checkpoint.sufm").read_bytes()


def test_infer(capsys, trained, tmp_path):
    ckpt = str(trained / "checkpoint.sufm")
    code, d, _ = run_json(capsys, "infer", "--checkpoint", ckpt, "--out", str(tmp_path / "d.pfm"),
                          "--metrics", str(tmp_path / "m.json"), "--width", "64", "--height", "32")
    assert code == 0 and d["nodes"] == 2562 and set(d["metrics"]) == {"mae", "mre", "delta1"}
    assert json.loads((tmp_path / "m.json").read_text()) == d["metrics"]
    assert load_pfm(tmp_path / "d.pfm").values.shape == (32, 64, 1)
    code, d, _ = run_json(capsys, "infer", "--checkpoint", ckpt, "--rank", "5", "--scene", "sphere")
    assert code == 0 and d["nodes"] == 10242 and np.isfinite(d["metrics"]["mre"])


def test_infer_on_image(capsys, trained, tmp_path):
    Image.fromarray(np.full((32, 64, 3), 100, np.uint8)).save(tmp_path / "in.png")
    code, d, _ = run_json(capsys, "infer", "--checkpoint", str(trained / "checkpoint.sufm"),
                          "--image", str(tmp_path / "in.png"))
    assert code == 0 and "metrics" not in d


def test_infer_incompatible(capsys, trained, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rank": 4, "num_stages": 2, "out_channels": 6}))
    code, _, err = run(capsys, "infer", "--checkpoint", str(trained / "checkpoint.sufm"), "--config", str(cfg))
    assert code == 2 and "out_channels" in err
    assert run(capsys, "infer", "--checkpoint", str(tmp_path / "none.sufm"))[0] == 2
    assert run(capsys, "infer", "--checkpoint", str(trained / "checkpoint.sufm"), "--rank", "2")[0] == 2


def test_train_toy_init_from_lower_rank(capsys, trained, tmp_path):
    code, d, _ = run_json(capsys, "train-toy", "--rank", "5", "--steps", "1", "--eval-every", "0",
                          "--init", str(trained / "checkpoint.sufm"), "--out-dir", str(tmp_path))
    assert code == 0 and json.loads((tmp_path / "config.json").read_text())["rank"] == 5
    assert run(capsys, "train-toy", "--task", "seg", "--steps", "1", "--init", str(trained / "checkpoint.sufm"),
               "--out-dir", str(tmp_path))[0] == 2


def test_equivariance_command(capsys):
    code, d, _ = run_json(capsys, "equivariance", "--rank", "4", "--num-stages", "2")
    assert code == 0 and d["passed"] and d["max_deviation"] < 1e-3 and len(d["deviations"]) == 9
    code, d, _ = run_json(capsys, "equivariance", "--rank", "4", "--num-stages", "2", "--tilt", "0.3")
    assert code == 1 and not d["passed"]
    assert run(capsys, "equivariance", "--rank", "2", "--num-stages", "2")[0] == 2


def test_gradcheck_command(capsys):
    code, d, _ = run_json(capsys, "gradcheck", "--max-coords", "1")
    assert code == 0 and d["passed"]
    assert d["op_worst"] < 1e-4 and d["model_worst"] < 1e-3
    assert {"model_depth", "model_seg", "linear"} <= set(d["results"])
