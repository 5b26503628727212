import json

import pytest

from corrpose.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


def _config(tmp_path, **fields):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(fields))
    return str(path)


def test_gen_templates_and_determinism(tmp_path, bracket):
    from corrpose.meshes import save_obj
    mesh = tmp_path / "bracket.obj"
    save_obj(mesh, bracket.vertices, bracket.triangles)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-templates", str(mesh), str(a), "--size", "64"]) == EXIT_OK
    assert main(["gen-templates", str(mesh), str(b), "--size", "64", "--jobs", "2"]) == EXIT_OK
    files = sorted(p.name for p in a.iterdir())
    assert len([f for f in files if f.endswith(".depth")]) == 42 and "index.json" in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_templates_unreadable_mesh(tmp_path, capsys):
    missing = tmp_path / "nope.obj"
    assert main(["gen-templates", str(missing), str(tmp_path / "o")]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


def test_estimate_writes_outputs(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, meshes=["cube", "l_bracket"], n_scenes=4, seed=1, out_dir=str(out))
    assert main(["estimate", cfg]) == EXIT_OK
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 5
    assert len(list((out / "traces").glob("scene_*.json"))) == 4
    trace = json.loads((out / "traces" / "scene_0000.json").read_text())
    assert "selected_template" in trace and len(trace["scores"]) == 42
    assert trace["hypotheses"][0]["refinements"][0]["lm_objectives"]
    report = json.loads((out / "report.json").read_text())
    assert report["ar"] >= 0.99


def test_estimate_five_hypotheses_in_trace(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, meshes=["l_bracket"], n_scenes=1, out_dir=str(out))
    assert main(["estimate", cfg, "--n-hypotheses", "5"]) == EXIT_OK
    trace = json.loads((out / "traces" / "scene_0000.json").read_text())
    assert len(trace["hypotheses"]) == 5


def test_estimate_all_failures_exit_one(tmp_path):
    cfg = _config(tmp_path, meshes=["cube"], n_scenes=2, noise={"occlusion_frac": 1.0},
                  out_dir=str(tmp_path / "o"))
    assert main(["estimate", cfg]) == EXIT_FAIL


@pytest.mark.parametrize("fields,needle", [
    ({"n_scenes": "ten"}, "n_scenes"),
    ({"bogus": 1}, "bogus"),
    ({"noise": {"offset_sigma": "x"}}, "noise.offset_sigma"),
    ({"noise": {"class_flip_prob": 3.0}}, "class_flip_prob"),
    ({"modality": "lidar"}, "modality"),
    ({"n_hypotheses": 0}, "n_hypotheses"),
])
def test_malformed_config(tmp_path, capsys, fields, needle):
    assert main(["estimate", _config(tmp_path, **fields)]) == EXIT_USAGE
    assert needle in capsys.readouterr().err


def test_invalid_json_and_missing_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["estimate", str(bad)]) == EXIT_USAGE
    assert main(["estimate", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


def test_seed_env_var_and_flag(tmp_path, monkeypatch):
    runs = {}
    for name, env, flag in (("a", "5", None), ("b", None, "5"), ("c", None, None)):
        if env is None:
            monkeypatch.delenv("CORRPOSE_SEED", raising=False)
        else:
            monkeypatch.setenv("CORRPOSE_SEED", env)
        out = tmp_path / name
        argv = ["estimate", _config(tmp_path, meshes=["l_bracket"], n_scenes=1, out_dir=str(out))]
        if flag:
            argv += ["--seed", flag]
        assert main(argv) == EXIT_OK
        runs[name] = json.loads((out / "report.json").read_text())["config"]["seed"]
    assert runs == {"a": 5, "b": 5, "c": 0}


def test_evaluate_round_trip(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, meshes=["icosphere"], n_scenes=2, out_dir=str(out))
    assert main(["estimate", cfg]) == EXIT_OK
    assert main(["evaluate", cfg, "--results", str(out / "results.csv")]) == EXIT_OK
    ev = json.loads((out / "evaluation.json").read_text())
    assert ev["ar"] >= 0.99
    assert (out / "errors.svg").exists() and (out / "recall.svg").exists()
    assert main(["evaluate", cfg, "--results", str(tmp_path / "none.csv")]) == EXIT_USAGE


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--count", "1", "--pixels", "2"]) == EXIT_OK
    assert main(["gradcheck", "--count", "1", "--pixels", "2", "--corrupt-jacobian"]) == EXIT_FAIL
    assert "worst problem" in capsys.readouterr().out
    assert main(["gradcheck", "--count", "0"]) == EXIT_USAGE


def test_sweep(tmp_path):
    out = tmp_path / "sw"
    cfg = _config(tmp_path, meshes=["l_bracket"], n_scenes=2, out_dir=str(out),
                  sweep={"offset_sigma": [0.0, 0.1, 0.2]})
    assert main(["sweep", cfg]) == EXIT_OK
    first = (out / "sweep.csv").read_text()
    assert len(first.splitlines()) == 4
    assert (out / "sweep.svg").exists()
    assert main(["sweep", cfg]) == EXIT_OK
    assert (out / "sweep.csv").read_text() == first


def test_sweep_empty_grid(tmp_path):
    cfg = _config(tmp_path, meshes=["cube"], sweep={"offset_sigma": []})
    assert main(["sweep", cfg]) == EXIT_USAGE
    assert main(["sweep", _config(tmp_path, meshes=["cube"])]) == EXIT_USAGE
