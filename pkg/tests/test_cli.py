import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from mta import archive
from mta import cli
from mta import data as D
from mta import generator as G

SMALL = {
    "seed": 1,
    "dataset": {"M": 2, "C": 5, "n": 250, "amplitude": 0.5, "noise": 0.05},
    "victims": {"epochs": 25},
    "generator": {"blocks": 1, "widths": [4, 8]},
    "attack": {"epochs": 2, "lr": 1e-3},
    "eval": {"timing_repetitions": 30, "timing_warmup": 1},
}

DENSE = {
    "seed": 2,
    "dataset": {"suite": "shared_input", "n": 50, "resolution": 8},
    "victims": {"epochs": 1},
    "generator": {"mode": "per_instance", "blocks": 1, "widths": [4, 8], "eps": 0.04},
    "attack": {"epochs": 1, "probe_size": 4},
    "eval": {"timing_repetitions": 30, "timing_warmup": 0},
}


def write_config(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_of(err: str) -> dict:
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def label_run(tmp_path_factory):
    """A completed MTA pipeline on a small shared-label config."""
    root = tmp_path_factory.mktemp("label")
    cfg = write_config(root / "cfg.json", SMALL)
    assert cli.main(["run", "--config", cfg, "--out", str(root / "a")]) == 0
    return root, cfg


# -- pipeline ---------------------------------------------------------------------------------


def test_pipeline_writes_layout(label_run):
    root, _ = label_run
    run = root / "a"
    for sub in cli.LAYOUT:
        assert (run / sub).is_dir()
    for rel in ("config.resolved", "datasets/data.nta", "victims/independent.nta", "generators/mta.nta",
                "reports/mta.csv", "reports/mta.md", "reports/mta_log.csv", "reports/victims_independent.json"):
        assert (run / rel).is_file(), rel
    resolved = json.loads((run / "config.resolved").read_text())
    assert resolved["seed"] == 1 and resolved["out"] == str(run)
    assert "inference_seconds" in (run / "reports/mta.csv").read_text()


def test_rerun_is_bit_identical(label_run, capsys):
    root, cfg = label_run
    assert run_cli(capsys, "run", "--config", cfg, "--out", str(root / "b"))[0] == 0
    a, b = root / "a", root / "b"
    for rel in ("datasets/data.nta", "victims/independent.nta", "generators/mta.nta"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def untimed(p):
        return [line for line in p.read_text().splitlines() if ",timing," not in line]

    assert untimed(a / "reports/mta.csv") == untimed(b / "reports/mta.csv")
    strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]
    assert strip(a / "reports/mta_log.csv") == strip(b / "reports/mta_log.csv")


def test_gap_fgsm_and_compare(label_run, capsys):
    root, _ = label_run
    out = str(root / "a")
    assert run_cli(capsys, "train-attack", "--out", out, "--method", "gap")[0] == 0
    assert (root / "a/generators/gap_0.nta").is_file() and (root / "a/generators/gap_1.nta").is_file()
    assert run_cli(capsys, "evaluate", "--out", out, "--method", "gap")[0] == 0
    code, msg, _ = run_cli(capsys, "train-attack", "--out", out, "--method", "fgsm")
    assert code == 0 and "no trainable state" in msg
    assert run_cli(capsys, "evaluate", "--out", out, "--method", "fgsm")[0] == 0
    assert run_cli(capsys, "compare", str(root / "a"), "--out", str(root / "cmp"))[0] == 0
    table = (root / "cmp/comparison.md").read_text().splitlines()
    assert table[0] == "| method | eps | T1 | T2 | Avg |"
    assert [line.split("|")[1].strip() for line in table[2:]] == ["MTA", "GAP", "FGSM"]


def test_targeted_pipeline(label_run, tmp_path, capsys):
    root, _ = label_run
    out = tmp_path / "t"
    shutil.copytree(root / "a", out)
    raw = dict(SMALL, attack=dict(SMALL["attack"], goal="targeted", targets=[1, 3]))
    cfg = write_config(tmp_path / "t.json", raw)
    assert run_cli(capsys, "train-attack", "--config", cfg, "--out", str(out))[0] == 0
    assert run_cli(capsys, "evaluate", "--config", cfg, "--out", str(out))[0] == 0
    assert ",attacked,T2,target_accuracy," in (out / "reports/mta.csv").read_text()


def test_dump_perturbations(label_run, capsys):
    root, _ = label_run
    assert run_cli(capsys, "dump-perturbations", "--out", str(root / "a"), "--method", "mta", "--count", "2")[0] == 0
    dumps = sorted(p.name for p in (root / "a/dumps").iterdir())
    assert "mta_task1_0.pgm" in dumps and "mta_task2_0.pgm" in dumps
    raw = (root / "a/dumps/mta_task1_0.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == len(b"P5\n16 16\n255\n") + 256


def test_to_pnm_encoding():
    v = np.array([[[-0.1, 0.0, 0.1]]])
    ((ext, payload),) = cli.to_pnm(v, 0.1)
    assert ext == "pgm" and payload == b"P5\n3 1\n255\n" + bytes([0, 128, 255])
    rgb = np.zeros((3, 2, 2))
    rgb[0] = 0.1
    ((ext, payload),) = cli.to_pnm(rgb, 0.1)
    assert ext == "ppm" and payload[:11] == b"P6\n2 2\n255\n"
    assert payload[11:14] == bytes([255, 128, 128])
    assert len(cli.to_pnm(np.zeros((4, 2, 2)), 0.1)) == 4


def test_shared_input_pipeline_with_transfer(tmp_path, capsys):
    cfg = write_config(tmp_path / "d.json", DENSE)
    out = str(tmp_path / "d")
    assert run_cli(capsys, "run", "--config", cfg, "--out", out)[0] == 0
    shared = write_config(tmp_path / "s.json", dict(DENSE, victims={"epochs": 1, "family": "shared_encoder"}))
    assert run_cli(capsys, "train-victims", "--config", shared, "--out", out)[0] == 0
    assert run_cli(capsys, "transfer", "--config", cfg, "--out", out)[0] == 0
    text = (tmp_path / "d/reports/transfer.csv").read_text()
    assert "shared_encoder" in text and ",clean,T1,pix_acc," in text and ",attacked,T3,angle_mean," in text
    assert run_cli(capsys, "dump-perturbations", "--config", cfg, "--out", out, "--count", "1")[0] == 0
    assert len(list((tmp_path / "d/dumps").glob("mta_task1_0_c*.pgm"))) == 4


# -- failures ------------------------------------------------------------------------------------


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write_config(tmp_path / "bad.json", {"attack": {"weights": [0.5, 0.6]}})
    code, _, err = run_cli(capsys, "make-data", "--config", bad, "--out", str(tmp_path / "x"))
    assert code == 2
    e = error_of(err)
    assert e["error"] == "config" and e["code"] == 2 and "weights must sum to 1" in e["message"]
    (tmp_path / "broken.json").write_text("{")
    code, _, err = run_cli(capsys, "make-data", "--config", str(tmp_path / "broken.json"))
    assert code == 2 and error_of(err)["code"] == 2
    code, _, err = run_cli(capsys, "make-data", "--config", str(tmp_path / "absent.json"))
    assert code == 2 and "--config" in error_of(err)["message"]
    code, _, err = run_cli(capsys, "compare", str(tmp_path))
    assert code == 2


def test_missing_and_corrupt_artifacts_exit_3(tmp_path, capsys):
    out = str(tmp_path / "r")
    code, _, err = run_cli(capsys, "train-victims", "--out", out)
    assert code == 3 and "missing artifact" in error_of(err)["message"]
    cfg = write_config(tmp_path / "c.json", DENSE)
    assert run_cli(capsys, "make-data", "--config", cfg, "--out", out)[0] == 0
    path = tmp_path / "r/datasets/data.nta"
    path.write_bytes(path.read_bytes()[:-7])
    code, _, err = run_cli(capsys, "train-victims", "--out", out)
    assert code == 3 and error_of(err)["error"] == "format"
    code, _, err = run_cli(capsys, "compare", str(tmp_path / "nowhere"), "--out", str(tmp_path / "cmp"))
    assert code == 3


def test_divergence_exits_4(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", DENSE)
    out = str(tmp_path / "r")
    assert run_cli(capsys, "make-data", "--config", cfg, "--out", out)[0] == 0
    path = tmp_path / "r/datasets/data.nta"
    tensors, manifest = archive.load(path)
    name = next(k for k in tensors if tensors[k].dtype == np.float64 and tensors[k].ndim == 4)
    tensors[name][:] = np.nan
    archive.save(path, tensors, manifest)
    code, _, err = run_cli(capsys, "train-victims", "--out", out)
    e = error_of(err)
    assert code == 4 and e["error"] == "divergence" and "epoch 0" in e["message"]


def test_incompetent_victims_exit_4(tmp_path, capsys):
    raw = dict(SMALL, victims={"epochs": 0})
    cfg = write_config(tmp_path / "c.json", raw)
    out = str(tmp_path / "r")
    assert run_cli(capsys, "make-data", "--config", cfg, "--out", out)[0] == 0
    assert run_cli(capsys, "train-victims", "--out", out)[0] == 0
    code, _, err = run_cli(capsys, "train-attack", "--out", out)
    assert code == 4 and error_of(err)["error"] == "victim"


def test_dump_fgsm_rejected(label_run, capsys):
    root, _ = label_run
    code, _, err = run_cli(capsys, "dump-perturbations", "--out", str(root / "a"), "--method", "fgsm")
    assert code == 2 and "fgsm" in error_of(err)["message"]


def test_thread_cap(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("MTA_THREADS", "0")
    code, _, err = run_cli(capsys, "make-data", "--out", str(tmp_path / "r"))
    assert code == 2 and "MTA_THREADS" in error_of(err)["message"]
    monkeypatch.setenv("MTA_THREADS", "many")
    assert cli.main(["make-data", "--out", str(tmp_path / "r")]) == 2
    monkeypatch.setenv("MTA_THREADS", "1")
    assert cli.thread_cap() == 1
    cfg = write_config(tmp_path / "c.json", DENSE)
    assert run_cli(capsys, "make-data", "--config", cfg, "--out", str(tmp_path / "r"))[0] == 0
    monkeypatch.delenv("MTA_THREADS")
    assert cli.thread_cap() is None


def test_flag_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", DENSE)
    out = tmp_path / "r"
    argv = ["make-data", "--config", cfg, "--out", str(out), "--seed", "9", "--eps", "0.5", "--goal", "non_targeted"]
    assert run_cli(capsys, *argv)[0] == 0
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved["seed"] == 9 and resolved["generator"]["eps"] == 0.5
    ds = D.load_dataset(out / "datasets/data.nta")
    assert ds.suite == D.SHARED_INPUT
    # later commands pick up the resolved config without --config
    assert run_cli(capsys, "make-data", "--out", str(out))[0] == 0
    assert json.loads((out / "config.resolved").read_text()) == resolved


def test_console_script_reports_errors(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mta.cli", "train-victims", "--out", str(tmp_path / "r")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 3
    assert json.loads(proc.stderr.strip())["code"] == 3


def test_generator_artifacts_load(label_run):
    root, _ = label_run
    gen, extra = G.load_generator(root / "a/generators/mta.nta")
    assert extra["method"] == "mta" and gen.M == 2
