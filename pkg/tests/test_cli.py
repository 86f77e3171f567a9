import csv
import io

import numpy as np
import pytest

from medusa import archive, experiments
from medusa.cli import main
from medusa.config import parse_config_text
from medusa.metrics import TaskPerformance, delta_mtl, read_metrics_csv
from medusa.tasks import TASKS

TINY = """
[experiment]
name = tiny
tasks = depth, segm

[train]
epochs = 1
base_lr = 5e-3
batch_size = 4

[model]
channels = 4, 4, 6, 8
stem_channels = 4

[data]
image_size = 32
n_train = 8
n_val = 4
n_test = 4
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def csv_rows(text):
    return list(csv.reader(line for line in io.StringIO(text) if not line.startswith("#")))


def test_train_writes_artifacts(tmp_path, cfg_path, capsys):
    assert run("train", "--config", cfg_path, "--out", tmp_path / "a") == 0
    run_dir = tmp_path / "a" / "tiny"
    report = (run_dir / "report.csv").read_text()
    assert report.startswith("# config_hash=")
    assert {r[1] for r in csv_rows(report)[1:]} == {"depth", "segm"}
    assert set(read_metrics_csv((run_dir / "metrics_val.csv").read_text())) == {"depth", "segm"}
    assert "epoch,task,split,loss,metric" in capsys.readouterr().out


def test_train_is_byte_reproducible(tmp_path, cfg_path):
    for name in ("a", "b"):
        assert run("train", "--config", cfg_path, "--out", tmp_path / name, "--seed", 3) == 0
    for f in ("report.csv", "metrics_val.csv", "checkpoint.mda"):
        assert (tmp_path / "a/tiny" / f).read_bytes() == (tmp_path / "b/tiny" / f).read_bytes(), f


def test_flags_override_config(tmp_path, cfg_path):
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--tasks", "depth", "--head", "hrhead", "--sfa", "off", "--epochs", 2) == 0
    model, meta = experiments.model_from_checkpoint(tmp_path / "tiny" / "checkpoint.mda")
    assert list(model.heads) == ["depth"]
    assert meta["heads"][0]["head_kind"] == "hrhead" and meta["heads"][0]["sfa"] is False
    assert meta["experiment"]["train"]["epochs"] == 2


def test_eval_deterministic_and_matches_report(tmp_path, cfg_path, capsys):
    run("train", "--config", cfg_path, "--out", tmp_path)
    ckpt = tmp_path / "tiny" / "checkpoint.mda"
    capsys.readouterr()
    assert run("eval", "--checkpoint", ckpt) == 0
    first = capsys.readouterr().out
    assert run("eval", "--checkpoint", ckpt) == 0
    assert capsys.readouterr().out == first
    report = csv_rows((tmp_path / "tiny" / "report.csv").read_text())
    final = {r[1]: float(r[4]) for r in report[1:] if r[2] == "val"}
    assert {k: v for k, (_, v) in read_metrics_csv(first).items()} == final


def test_eval_with_baseline_prints_delta(tmp_path, cfg_path, capsys):
    # a few epochs so no baseline metric is exactly zero
    common = ("--config", cfg_path, "--epochs", 4)
    run("train", *common, "--out", tmp_path / "mtl")
    run("train", *common, "--out", tmp_path / "d", "--tasks", "depth", "--head", "hrhead", "--sfa", "off")
    run("train", *common, "--out", tmp_path / "s", "--tasks", "segm", "--head", "hrhead", "--sfa", "off")
    capsys.readouterr()
    baselines = [tmp_path / n / "tiny" / "metrics_val.csv" for n in ("d", "s")]
    assert run("eval", "--checkpoint", tmp_path / "mtl/tiny/checkpoint.mda", "--baseline", baselines[0], "--baseline", baselines[1]) == 0
    text = capsys.readouterr().out
    mtl = read_metrics_csv(text)
    base = {**read_metrics_csv(baselines[0].read_text()), **read_metrics_csv(baselines[1].read_text())}
    expected = delta_mtl(
        [TaskPerformance(TASKS[t], mtl[t][1]) for t in ("depth", "segm")],
        [TaskPerformance(TASKS[t], base[t][1]) for t in ("depth", "segm")],
    )
    row = [r for r in csv_rows(text) if r[1] == "DELTA_MTL"][0]
    assert float(row[2]) == expected.aggregate


def test_transfer_keeps_prior_bytes_and_metrics(tmp_path, cfg_path):
    run("train", "--config", cfg_path, "--out", tmp_path)
    ckpt = tmp_path / "tiny" / "checkpoint.mda"
    before = archive.load(ckpt)[0]
    prior = read_metrics_csv(experiments.cmd_eval(ckpt))
    assert run("transfer", "--checkpoint", ckpt, "--task", "saliency", "--out", tmp_path) == 0
    combined = tmp_path / "tiny_saliency" / "checkpoint.mda"
    after = archive.load(combined)[0]
    for name, arr in before.items():
        assert after[name].tobytes() == arr.tobytes(), name
    assert any(n.startswith("head.saliency.") for n in after)
    metrics = read_metrics_csv(experiments.cmd_eval(combined))
    assert {t: metrics[t] for t in prior} == prior
    assert "saliency" in metrics


def test_sequential_transfers_are_independent(tmp_path, cfg_path):
    run("train", "--config", cfg_path, "--out", tmp_path)
    ckpt = tmp_path / "tiny" / "checkpoint.mda"
    assert run("transfer", "--checkpoint", ckpt, "--task", "saliency", "--out", tmp_path) == 0
    assert run("transfer", "--checkpoint", tmp_path / "tiny_saliency/checkpoint.mda", "--task", "parts", "--out", tmp_path / "seq") == 0
    assert run("transfer", "--checkpoint", ckpt, "--task", "parts", "--out", tmp_path / "solo") == 0
    seq = archive.load(tmp_path / "seq/tiny_parts/checkpoint.mda")[0]
    solo = archive.load(tmp_path / "solo/tiny_parts/checkpoint.mda")[0]
    for name, arr in solo.items():
        np.testing.assert_array_equal(seq[name], arr)


def test_transfer_collision_exits_nonzero(tmp_path, cfg_path, capsys):
    run("train", "--config", cfg_path, "--out", tmp_path)
    assert run("transfer", "--checkpoint", tmp_path / "tiny/checkpoint.mda", "--task", "depth") != 0
    assert "already has" in capsys.readouterr().err


def test_resources(tmp_path, capsys):
    assert run("resources", "--out", tmp_path, "--max-tasks", 6) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    assert lines[0].startswith("# config_hash=") and "stylized" in lines[1]
    rows = [list(map(int, r)) for r in csv_rows(text)[1:]]
    t, medusa, st, pairwise = (np.array(c) for c in zip(*rows))
    assert list(t) == [1, 2, 3, 4, 5, 6]
    slope = medusa[1] - medusa[0]
    assert np.array_equal(medusa, medusa[0] + slope * (t - 1))
    assert np.array_equal(st, t * st[0])
    pair = experiments.attention_param_count(parse_config_text("").backbone)
    assert set(np.diff(pairwise, 2)) == {2 * pair}
    crossover = int(lines[-1].split("=")[1])
    assert pairwise[crossover - 1] > st[crossover - 1] and pairwise[crossover - 2] <= st[crossover - 2]


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[experiment]\ntasks = depth, flow\n")
    assert run("train", "--config", bad) != 0
    assert "flow" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero(tmp_path, cfg_path, capsys):
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--base-lr", "1e300") != 0
    assert "non-finite" in capsys.readouterr().err


def test_incompatible_checkpoint(tmp_path, cfg_path, capsys):
    run("train", "--config", cfg_path, "--out", tmp_path)
    ckpt = tmp_path / "tiny" / "checkpoint.mda"
    arrays, meta = archive.load(ckpt)
    meta["version"] = 99
    archive.save(ckpt, arrays, meta)
    assert run("eval", "--checkpoint", ckpt) != 0
    assert "v99" in capsys.readouterr().err
    arrays.pop(next(iter(arrays)))
    meta["version"] = experiments.CHECKPOINT_VERSION
    archive.save(ckpt, arrays, meta)
    assert run("eval", "--checkpoint", ckpt) != 0


def test_lock_blocks_concurrent_writer(tmp_path, cfg_path, capsys):
    with experiments.locked(tmp_path):
        assert run("train", "--config", cfg_path, "--out", tmp_path) != 0
    assert "another experiment" in capsys.readouterr().err
    assert run("train", "--config", cfg_path, "--out", tmp_path) == 0


def test_data_cache_env(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("MEDUSA_DATA_CACHE", str(tmp_path / "cache"))
    experiments._load_splits.cache_clear()
    try:
        assert run("train", "--config", cfg_path, "--out", tmp_path / "out") == 0
    finally:
        experiments._load_splits.cache_clear()
    assert len(list((tmp_path / "cache").rglob("*.mda"))) == 16
