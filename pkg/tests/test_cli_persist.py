import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gridsplit.cli import build_parser, main
from gridsplit.persist import (BadRatios, DatasetManifest, InstanceEntry, ManifestError, config_hash, derive_seed,
                               split_dataset, worker_count)

SUBCOMMANDS = ["generate", "label", "split", "train-lgnn", "train-hetero", "predict", "repair", "evaluate",
               "benchmark", "pipeline"]


def _fake_manifest(n):
    return DatasetManifest(Path("."), entries=[InstanceEntry(f"i{k}", f"instances/i{k}.json", "", k) for k in range(n)])


def test_split_counts_and_determinism():
    man = split_dataset(_fake_manifest(500), (0.8, 0.1, 0.1), seed=3)
    assert [len(man.split(s)) for s in ("train", "val", "test")] == [400, 50, 50]
    again = split_dataset(_fake_manifest(500), (0.8, 0.1, 0.1), seed=3)
    assert [e.split for e in man.entries] == [e.split for e in again.entries]
    other = split_dataset(_fake_manifest(500), (0.8, 0.1, 0.1), seed=4)
    assert [e.split for e in man.entries] != [e.split for e in other.entries]
    allt = split_dataset(_fake_manifest(30), (1, 0, 0), seed=0)
    assert len(allt.split("train")) == 30
    for bad in [(0.5, 0.5, 0.5), (0.8, 0.2), (-0.1, 0.6, 0.5)]:
        with pytest.raises(BadRatios):
            split_dataset(_fake_manifest(10), bad, 0)


def test_seed_derivation_and_hash():
    assert derive_seed(0, "grid") == derive_seed(0, "grid")
    assert derive_seed(0, "grid") != derive_seed(1, "grid")
    assert 0 <= derive_seed(5, "instance", 3) < 2**31
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("GRIDSPLIT_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("GRIDSPLIT_THREADS", "junk")
    assert worker_count() >= 1


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "gridsplit.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "data"
    assert main(["generate", "--preset", "tiny", "--n-instances", "10", "--seed", "1", "--out", str(root)]) == 0
    return root


def test_manifest_round_trip_and_tamper(dataset, tmp_path):
    import shutil

    man = DatasetManifest.load(dataset)
    man.verify()
    assert len(man.entries) == 10 and man.provenance["preset"] == "tiny"
    copy = tmp_path / "copy"
    shutil.copytree(dataset, copy)
    f = copy / man.entries[0].file
    d = json.loads(f.read_text())
    d["alpha"] = d["alpha"] + 1e-9
    f.write_text(json.dumps(d))
    with pytest.raises(ManifestError):
        DatasetManifest.load(copy).verify()
    assert main(["label", "--data", str(copy), "--method", "bruteforce"]) == 2


def test_missing_label_is_a_stage_error(dataset, tmp_path, capsys):
    import shutil

    copy = tmp_path / "nolabel"
    shutil.copytree(dataset, copy)
    assert main(["split", "--data", str(copy), "--seed", "0"]) == 0
    ckpt = tmp_path / "lgnn.json"
    capsys.readouterr()
    assert main(["train-lgnn", "--data", str(copy), "--out", str(ckpt), "--epochs", "1"]) == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["stage"] == "train-lgnn" and "label" in rec["error"]
    assert not ckpt.exists() and not list(tmp_path.glob("lgnn.json*"))


def test_stage_chain_through_cli(dataset, tmp_path, capsys):
    import shutil

    root = tmp_path / "chain"
    shutil.copytree(dataset, root)
    assert main(["label", "--data", str(root), "--method", "bruteforce"]) == 0
    first = (root / "labels" / "i00000.json").read_bytes()
    assert main(["label", "--data", str(root), "--method", "bruteforce"]) == 0
    assert (root / "labels" / "i00000.json").read_bytes() == first  # wall times live in timings.csv
    assert "wall_time" in (root / "timings.csv").read_text()
    assert main(["split", "--data", str(root), "--ratios", "0.6", "0.2", "0.2"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == {"train": 6, "val": 2, "test": 2}
    lg = tmp_path / "m" / "lgnn.json"
    assert main(["train-lgnn", "--data", str(root), "--out", str(lg), "--epochs", "2", "--hidden", "8",
                 "--n-random", "1"]) == 0
    het = tmp_path / "m" / "het.json"
    assert main(["train-hetero", "--data", str(root), "--lgnn", str(lg), "--out", str(het), "--epochs", "2",
                 "--hidden", "8"]) == 0
    inst = root / "instances" / "i00000.json"
    pred = tmp_path / "pred.json"
    assert main(["predict", "--model", str(het), "--data", str(root), "--instance", str(inst),
                 "--out", str(pred)]) == 0
    p = json.loads(pred.read_text())
    assert len(p["z"]) == len(p["probabilities"]) == 6
    rep = tmp_path / "rep.json"
    assert main(["repair", "--data", str(root), "--config", str(pred), "--instance", str(inst), "--lgnn", str(lg),
                 "--out", str(rep)]) == 0
    fixed = tmp_path / "fixed.json"
    fixed.write_text(json.dumps({"z": json.loads(rep.read_text())["z"]}))
    topo, lp, ev = tmp_path / "topo.json", tmp_path / "lp.txt", tmp_path / "ev.json"
    assert main(["evaluate", "--data", str(root), "--instance", str(inst), "--config", str(fixed),
                 "--dump-topology", str(topo), "--dump-lp", str(lp), "--out", str(ev)]) == 0
    res = json.loads(ev.read_text())
    assert res["structurally_feasible"] and 0 <= res["lambda"] <= 1
    assert "branches" in json.loads(topo.read_text())
    assert lp.read_text().startswith("sense max")
    out_csv = tmp_path / "report.csv"
    assert main(["benchmark", "--data", str(root), "--models", f"full={het}", "--lgnn", str(lg),
                 "--include-labels", "--out", str(out_csv)]) == 0
    text = out_csv.read_text()
    assert text.startswith("variant,") and "label_echo" in text and "full" in text
    assert (tmp_path / "report_timing.csv").exists()


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_instances": 20, "lgnn_epochs": 2, "hetero_epochs": 2, "labeler": "bruteforce"}))
    out = tmp_path / "run"
    assert main(["pipeline", "--preset", "tiny", "--config", str(cfg), "--hetero-epochs", "1", "--out", str(out)]) == 0
    meta = json.loads((out / "pipeline.json").read_text())
    assert meta["config"]["hetero_epochs"] == 1  # flag beats config file
    assert meta["config"]["n_instances"] == 20  # file beats default
    chash = meta["config_hash"]
    rows = (out / "report.csv").read_text().splitlines()
    assert len(rows) == 4 and all(r.endswith(chash) for r in rows[1:])
    for name in ("lgnn", "hetero_full", "hetero_no_flow", "hetero_no_feasibility"):
        ck = json.loads((out / "models" / f"{name}.json").read_text())
        assert ck["extra"]["config_hash"] == chash
    assert DatasetManifest.load(out / "data").provenance["config_hash"] == chash


def test_unknown_stage_and_bad_inputs(tmp_path):
    assert main(["pipeline", "--stages", "generate,bogus", "--preset", "tiny", "--n-instances", "2",
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["split", "--data", str(tmp_path / "missing")]) == 2
