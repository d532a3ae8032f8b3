import json
import os

import numpy as np
import pytest

from mtm import cli
from mtm.errors import NumericError


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny synthetic dataset and a two-epoch training run on it."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--channels", "3", "--samples", "60", "--alpha", "0.5", "--events", "3",
                     "--seed", "2", "--out", str(root / "data")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"d_model": 8, "n_blocks": 1, "batch_size": 16, "epochs": 2}))
    data = root / "data" / "dataset.ndjson"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--seed", "1",
                     "--out", str(root / "run")]) == 0
    return root


def test_synth_counts_and_manifest(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--channels", 4, "--samples", 1000, "--alpha", 1.0, "--seed", 7,
                       "--out", tmp_path / "a")
    assert code == 0
    lines = (tmp_path / "a" / "dataset.ndjson").read_text().splitlines()
    assert len(lines) == 1000
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    hist = man["cooccurrence_histogram"]
    assert sum(hist) == hist[1] and man["cooccurrence_fraction"][1] == 1.0
    assert man["seed"] == 7


def test_synth_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "synth", "--channels", 3, "--samples", 50, "--alpha", 0.4, "--seed", 3, "--out", tmp_path / d)
    assert (tmp_path / "a" / "dataset.ndjson").read_bytes() == (tmp_path / "b" / "dataset.ndjson").read_bytes()


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("checkpoint.json", "metrics.json", "history.json", "config.json", "test.ndjson"):
        assert (run_dir / name).exists()
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["seed"] == 1 and cfg["d_model"] == 8 and cfg["n_channels"] == 3
    assert len(json.loads((run_dir / "history.json").read_text())) == 2


def test_ablation_flips_one_flag(trained, capsys):
    cfg = trained / "cfg.json"
    data = trained / "data" / "dataset.ndjson"
    code, _, _ = run(capsys, "train", "--config", cfg, "--data", data, "--seed", 1, "--epochs", 0,
                     "--ablate", "no-mixing", "--out", trained / "abl")
    assert code == 0
    a = json.loads((trained / "run" / "config.json").read_text())
    b = json.loads((trained / "abl" / "config.json").read_text())
    a.pop("epochs"), b.pop("epochs")
    diff = {k for k in a if a[k] != b[k]}
    assert diff == {"mixing"} and b["mixing"] is False


def test_effective_config_reruns_identically(trained, capsys):
    eff = trained / "run" / "config.json"
    code, out, _ = run(capsys, "train", "--config", eff, "--out", trained / "rerun")
    assert code == 0
    assert (trained / "rerun" / "metrics.json").read_text() == (trained / "run" / "metrics.json").read_text()


def test_eval_reproduces_training_report(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "run" / "checkpoint.json",
                       "--data", trained / "run" / "test.ndjson")
    assert code == 0
    assert out.strip() == (trained / "run" / "metrics.json").read_text().strip()


def test_eval_on_masked_data(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "run" / "checkpoint.json",
                       "--data", trained / "data" / "dataset.ndjson", "--mask-ratio", 0.3, "--seed", 4)
    assert code == 0
    assert json.loads(out)["n_samples"] == 60


def test_eval_channel_mismatch_exit_2(trained, tmp_path, capsys):
    run(capsys, "synth", "--channels", 2, "--samples", 5, "--seed", 1, "--out", tmp_path)
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "run" / "checkpoint.json",
                       "--data", tmp_path / "dataset.ndjson")
    assert code == 2 and "channels" in err


def test_mask_ratio_train(trained, capsys):
    code, out, _ = run(capsys, "train", "--config", trained / "cfg.json", "--data",
                       trained / "data" / "dataset.ndjson", "--mask-ratio", 0.5, "--seed", 3,
                       "--epochs", 1, "--out", trained / "masked")
    assert code == 0
    cfg = json.loads((trained / "masked" / "config.json").read_text())
    assert cfg["mask_ratio"] == 0.5


def test_error_exit_codes(tmp_path, capsys, monkeypatch):
    assert run(capsys, "train", "--data", tmp_path / "missing.ndjson", "--out", tmp_path / "o")[0] == 3
    bad = tmp_path / "bad.ndjson"
    bad.write_text('{"id": "a", "n_channels": 2, "label": 0, "events": [{"t": 0, "c": 0, "v": 1.0}]}\n{oops\n')
    code, _, err = run(capsys, "train", "--data", bad, "--out", tmp_path / "o")
    assert code == 3 and "line 2" in err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert run(capsys, "train", "--config", cfg, "--data", bad, "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "synth", "--channels", 1, "--out", tmp_path / "s")[0] == 2

    def boom(*a, **k):
        raise NumericError("non-finite training loss")

    monkeypatch.setattr(cli, "run_train", boom)
    assert run(capsys, "train", "--data", bad, "--out", tmp_path / "o")[0] == 4


def test_gradcheck_report(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--max-elements", 6, "--out", tmp_path)
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and rep["failures"] == []
    assert all(v <= 1e-4 for v in rep["max_rel_error"].values())
    assert json.loads((tmp_path / "gradcheck.json").read_text()) == rep


def test_gradcheck_reports_failure(capsys, monkeypatch):
    import mtm.diff as D
    import mtm.diff.array as A

    def bad_layer_norm(x, g, b, eps=1e-5):
        out = A.layer_norm(x, g, b, eps)
        return A._emit(out.data, (x, g, b), lambda gr: (None, 2.0 * gr.reshape(-1, gr.shape[-1]).sum(0), None))

    monkeypatch.setattr(D, "layer_norm", bad_layer_norm)
    code, out, err = run(capsys, "gradcheck", "--max-elements", 4)
    assert code == 4
    rep = json.loads(out)
    assert not rep["passed"] and "gradient check failed" in err
    assert any(k.endswith("ln_g") for k in rep["failures"])


def test_dump_attention(trained, capsys):
    ids = [json.loads(l)["id"] for l in (trained / "data" / "dataset.ndjson").read_text().splitlines()]
    code, out, _ = run(capsys, "dump-attention", "--checkpoint", trained / "run" / "checkpoint.json",
                       "--data", trained / "data" / "dataset.ndjson", "--sample-id", ids[0])
    assert code == 0
    dump = json.loads(out)
    l0, l1 = dump["layers"]
    for layer in (l0, l1):
        obs = np.array(layer["observed"], dtype=bool)
        temporal = np.array(layer["temporal"])
        for j in range(obs.shape[1]):
            assert abs(temporal[j][0].sum() - 1.0) <= 1e-9
        for i, piv in enumerate(layer["pivot"]):
            assert obs[i + 1, piv]
    assert l1["n_times"] < l0["n_times"]
    assert np.array(l1["temporal"]).shape[-1] == l1["n_times"] + 1
    assert run(capsys, "dump-attention", "--checkpoint", trained / "run" / "checkpoint.json",
               "--data", trained / "data" / "dataset.ndjson", "--sample-id", "nope")[0] == 3


def _metric_files(tmp_path, name, values):
    paths = []
    for i, v in enumerate(values):
        p = tmp_path / f"{name}{i}.json"
        p.write_text(json.dumps({"accuracy": v}))
        paths.append(p)
    return paths


def test_compare(tmp_path, capsys):
    a = _metric_files(tmp_path, "a", [0.87, 0.88, 0.89])
    b = _metric_files(tmp_path, "b", [0.70, 0.71, 0.72, 0.705])
    code, out, _ = run(capsys, "compare", "--a", *a, "--b", *b)
    assert code == 0
    first, js = out.splitlines()
    res = json.loads(js)
    assert res["a"] == "88.0 ±1.0" and res["p_value"] < 0.05
    assert "88.0 ±1.0" in first
    code, out, _ = run(capsys, "compare", "--a", *a, "--b", *a)
    assert json.loads(out.splitlines()[1])["p_value"] == 1.0
    assert run(capsys, "compare", "--a", *a, "--b", *b, "--metric", "auroc")[0] == 2
