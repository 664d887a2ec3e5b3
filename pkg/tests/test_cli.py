import json

import pytest

from graphprune.cli import main

SHAPES = {"demonet_s": ([1, 28, 28], 10), "chain_net": ([1, 8, 8], 2), "diamond_net": ([1, 8, 8], 2),
          "stacked_unets_mini": ([1, 16, 16], 10)}


def _config(tmp_path, name="demonet_s", K=3, epochs=2, samples=40, **extra):
    dims, classes = SHAPES[name]
    cfg = {"model": f"fixture:{name}", "out": "run", "K": K, "total_epochs": epochs, "dtype": "float64",
           "data": {"kind": "synthetic", "classes": classes, "dims": dims, "samples": samples,
                    "test_samples": 20, "seed": 0},
           "batch_size": 20, "seed": 0, **extra}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_generate_demonet(tmp_path, capsys):
    assert main(["generate", "--model", "fixture:demonet_s", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "search_space.json").read_text())
    assert len(rep["G_s"]) == 5
    assert "|G_s| = 5" in capsys.readouterr().out
    for f in ("trace.dot", "segments.dot", "manifest.json"):
        assert (tmp_path / f).is_file()
    assert (tmp_path / "trace.dot").read_text().startswith("digraph")


def test_generate_chain_warns(tmp_path, capsys):
    assert main(["generate", "--model", "fixture:chain_net", "--out", str(tmp_path)]) == 0
    assert "no removal structures" in capsys.readouterr().err


def test_generate_malformed_writes_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"vertices": [')
    out = tmp_path / "out"
    assert main(["generate", "--model", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert capsys.readouterr().err


def test_unknown_fixture_and_missing_model(tmp_path):
    assert main(["generate", "--model", "fixture:nope", "--out", str(tmp_path)]) == 2
    assert main(["generate", "--model", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_train_infeasible_exit_3(tmp_path, capsys):
    assert main(["train", "--config", str(_config(tmp_path, K=4))]) == 3
    assert "max feasible hierarchical sparsity: 3" in capsys.readouterr().err
    assert not (tmp_path / "run" / "solution.json").exists()


def test_train_bad_config(tmp_path):
    p = _config(tmp_path, lr=-1)
    assert main(["train", "--config", str(p)]) == 2
    p.write_text(json.dumps({"model": "fixture:demonet_s"}))
    assert main(["train", "--config", str(p)]) == 2
    p.write_text("{")
    assert main(["train", "--config", str(p)]) == 2


def test_construct_rejects_invalid_solution(tmp_path, capsys):
    assert main(["train", "--config", str(_config(tmp_path, K=1, epochs=1))]) == 0
    sol = tmp_path / "run" / "solution.json"
    doc = json.loads(sol.read_text())
    doc["zero_groups"] = ["Conv7", "Conv8"]
    sol.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["construct", "--model", "fixture:demonet_s", "--solution", str(sol),
                 "--out", str(tmp_path / "sub")]) == 2
    err = capsys.readouterr().err
    assert "disconnected" in err and "output" in err


def test_eval_missing_params(tmp_path):
    data = json.dumps({"kind": "synthetic", "classes": 10, "dims": [1, 28, 28], "samples": 10})
    rc = main(["eval", "--model", "fixture:demonet_s", "--params", str(tmp_path / "x.bin"), "--data", data])
    assert rc != 0


def test_resume_matches_uninterrupted(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ca, cb = _config(a, epochs=3), _config(b, epochs=3)
    assert main(["train", "--config", str(ca)]) == 0
    assert main(["train", "--config", str(cb), "--stop-after", "1"]) == 0
    assert not (b / "run" / "solution.json").exists()
    assert main(["train", "--config", str(cb), "--resume", "latest"]) == 0
    assert (a / "run" / "solution.bin").read_bytes() == (b / "run" / "solution.bin").read_bytes()
    lines = (b / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1, 2]


@pytest.mark.parametrize("name,K", [("demonet_s", 3), ("chain_net", 0), ("diamond_net", 1),
                                    ("stacked_unets_mini", 2)])
def test_pipeline_closure(tmp_path, capsys, name, K):
    cfg = _config(tmp_path, name=name, K=K, epochs=2, samples=20)
    model = f"fixture:{name}"
    assert main(["generate", "--model", model, "--out", str(tmp_path / "gen")]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    sol = tmp_path / "run" / "solution.json"
    doc = json.loads(sol.read_text())
    assert len(doc["zero_groups"]) == K
    sub = tmp_path / "sub"
    assert main(["construct", "--model", model, "--solution", str(sol), "--out", str(sub)]) == 0
    rep = json.loads((sub / "construct_report.json").read_text())
    assert rep["equivalence_max_abs_diff"] <= 1e-10
    assert main(["viz", "--model", model, "--annotate", str(sol), "--out", str(tmp_path / "v.dot")]) == 0
    # the sub-network and the zeroed full network agree on accuracy
    data = json.dumps(json.loads(cfg.read_text())["data"])
    capsys.readouterr()
    assert main(["eval", "--model", model, "--params", str(tmp_path / "run" / "solution.bin"),
                 "--data", data]) == 0
    full = json.loads(capsys.readouterr().out)
    assert main(["eval", "--model", str(sub / "subnet.json"), "--params", str(sub / "subnet.bin"),
                 "--data", data]) == 0
    small = json.loads(capsys.readouterr().out)
    assert full["accuracy"] == small["accuracy"]
    assert full["loss"] == pytest.approx(small["loss"], abs=1e-9)
