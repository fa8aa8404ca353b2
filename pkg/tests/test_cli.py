import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cmdrnn import cli, data
from cmdrnn import training as TR
from cmdrnn.config import ConfigError

TINY_MODEL = """\
filters = 3
kernel_width = 5
hidden = 8
mdn_hidden = 8
mixtures = 3
batch_size = 16
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "syn.cfg").write_text("n_aps = 16\nn_steps = 60\nseed = 3\n")
    return tmp_path


def manifest(ws, extra="", name="m.manifest", epochs=2):
    path = ws / name
    path.write_text(f"seed = 1\nsynthetic = syn.cfg\nruns = 2\nout_dir = out\nepochs = {epochs}\n{TINY_MODEL}{extra}")
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- generate ---------------------------------------------------------------


def test_generate_shape_and_determinism(workspace, capsys):
    a, b = workspace / "a.csv", workspace / "b.csv"
    for out in (a, b):
        assert cli.main(["generate", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ds = data.load_csv(a)
    cfg = data.SyntheticConfig()
    assert ds.rssi.shape == (cfg.n_steps, cfg.n_aps)
    assert len(read_rows(a)[0]) == cfg.n_aps + 2
    assert "wrote" in capsys.readouterr().out


def test_generate_high_threshold(workspace):
    (workspace / "hi.cfg").write_text("threshold = -40\n")
    out = workspace / "hi.csv"
    assert cli.main(["generate", "--config", str(workspace / "hi.cfg"), "--out", str(out)]) == 0
    assert data.sentinel_fraction(data.load_csv(out)) > 0.5


def test_generate_default_location(workspace):
    assert cli.main(["generate", "--config", str(workspace / "syn.cfg"), "--out-dir", str(workspace / "g")]) == 0
    assert (workspace / "g" / "synthetic.csv").exists()


def test_generate_bad_config(workspace):
    (workspace / "bad.cfg").write_text("width = 0\n")
    assert cli.main(["generate", "--config", str(workspace / "bad.cfg"), "--out", str(workspace / "x.csv")]) == 2


# -- manifests --------------------------------------------------------------


def test_manifest_paths_relative_to_file(workspace):
    m = cli.load_manifest(manifest(workspace))
    assert m.synthetic == workspace / "syn.cfg"
    assert m.out_dir == workspace / "out"
    assert m.seeds == [1, 2]
    assert m.model_spec().mixtures == 3 and m.train_config(5).epochs == 2


@pytest.mark.parametrize("extra, message", [
    ("epoch = 3\n", "unknown key"),
    ("runs = 0\n", "runs"),
    ("variants = RNN, LSTM\n", "variants"),
    ("eval_mode = median\n", "eval_mode"),
    ("dataset = d.csv\n", "exactly one"),
    ("variant = CMDRNN-XL\n", "variant"),
])
def test_manifest_errors(workspace, extra, message):
    (workspace / "d.csv").write_text("")
    with pytest.raises(ConfigError, match=message):
        cli.load_manifest(manifest(workspace, extra))


def test_manifest_requires_seed(workspace):
    path = workspace / "noseed.manifest"
    path.write_text("synthetic = syn.cfg\n")
    with pytest.raises(ConfigError, match="seed"):
        cli.load_manifest(path)
    assert cli.load_manifest(path, seed=4).seed == 4


def test_manifest_missing_dataset(workspace, capsys):
    path = workspace / "m.manifest"
    path.write_text("seed = 1\ndataset = missing.csv\n")
    assert cli.main(["train", str(path)]) == 2
    assert "missing.csv" in capsys.readouterr().err


# -- train and eval ---------------------------------------------------------


def test_train_outputs(workspace):
    assert cli.main(["train", str(manifest(workspace, epochs=3))]) == 0
    rows = read_rows(workspace / "out" / "loss.csv")
    assert rows[0] == ["epoch", "loss"] and [r[0] for r in rows[1:]] == ["1", "2", "3"]
    model, extra = TR.load_checkpoint(workspace / "out" / "model.npz")
    assert model.spec.variant == "CMDRNN-GRU" and extra["seed"] == 1


def test_train_zero_learning_rate_constant_trace(workspace):
    path = manifest(workspace, "learning_rate = 0\nvariant = RNN\n", epochs=3)
    assert cli.main(["train", str(path)]) == 0
    losses = [float(r[1]) for r in read_rows(workspace / "out" / "loss.csv")[1:]]
    assert max(losses) - min(losses) < 1e-12


def test_train_numerical_abort_exit_code(workspace):
    path = manifest(workspace, "learning_rate = 1e300\nvariant = RNN\nclip = 1e300\n", epochs=3)
    with np.errstate(all="ignore"):
        assert cli.main(["train", str(path)]) == 3


def test_eval_appends_and_is_deterministic(workspace, capsys):
    assert cli.main(["train", str(manifest(workspace))]) == 0
    ck = str(workspace / "out" / "model.npz")
    syn = str(workspace / "syn.cfg")
    out = str(workspace / "ev")
    for mode in ("mle", "mle", "sample"):
        assert cli.main(["eval", ck, "--synthetic", syn, "--mode", mode, "--seed", "5", "--out-dir", out]) == 0
    records = cli.read_metrics(workspace / "ev" / "metrics.csv")
    assert len(records) == 3 and all(r.seed == 5 for r in records)
    assert records[0].rmse == records[1].rmse
    assert records[2].rmse != records[0].rmse and records[2].rmse >= 0


def test_eval_perfect_checkpoint(workspace):
    ds = data.TrajectoryDataset(np.full((20, 16), -60.0), np.tile([3.0, 4.0], (20, 1)))
    data.save_csv(ds, workspace / "flat.csv")
    model = TR.build(TR.ModelSpec("RNN", hidden=4), 16)
    for p in model.parameters().values():
        p.value = np.zeros(p.shape)
    model.fit_target_scaler(ds.coords)
    TR.save_checkpoint(model, workspace / "oracle.npz")
    assert cli.main(["eval", str(workspace / "oracle.npz"), "--data", str(workspace / "flat.csv"),
                     "--split", "all", "--out-dir", str(workspace)]) == 0
    assert cli.read_metrics(workspace / "metrics.csv")[0].rmse == 0.0


def test_eval_dimension_mismatch(workspace):
    assert cli.main(["train", str(manifest(workspace))]) == 0
    (workspace / "wide.cfg").write_text("n_aps = 20\nn_steps = 30\n")
    assert cli.main(["eval", str(workspace / "out" / "model.npz"), "--synthetic", str(workspace / "wide.cfg")]) == 2


# -- compare and sweep ------------------------------------------------------


def test_compare_tables_and_chart(workspace):
    assert cli.main(["compare", str(manifest(workspace)), "--jobs", "2"]) == 0
    out = workspace / "out"
    records = cli.read_metrics(out / "compare_runs.csv")
    assert len(records) == 12 and [r.variant for r in records[::2]] == list(TR.VARIANTS)
    summary = read_rows(out / "compare.csv")
    assert tuple(summary[0]) == cli.SUMMARY_HEADER and len(summary) == 7
    for row in summary[1:]:
        rmses = [r.rmse for r in records if r.variant == row[0]]
        assert abs(float(row[4]) - np.mean(rmses)) < 1e-9
        assert abs(float(row[5]) - np.std(rmses, ddof=1)) < 1e-9
    assert ET.parse(out / "compare.svg").getroot().tag.endswith("svg")


def test_compare_parallel_matches_serial(workspace):
    path = manifest(workspace, "variants = RNN, CMDRNN-GRU\n")
    assert cli.main(["compare", str(path), "--out-dir", str(workspace / "a")]) == 0
    assert cli.main(["compare", str(path), "--out-dir", str(workspace / "b"), "--jobs", "3"]) == 0
    for name in ("compare_runs.csv", "compare.csv", "compare.svg"):
        assert (workspace / "a" / name).read_bytes() == (workspace / "b" / name).read_bytes()


def test_compare_marks_failed_cells(workspace):
    path = manifest(workspace, "variants = RNN, RNN+MDN\nlearning_rate = 1e300\nclip = 1e300\n")
    with np.errstate(all="ignore"):
        assert cli.main(["compare", str(path)]) == 0
    rows = read_rows(workspace / "out" / "compare_runs.csv")
    assert len(rows) == 5 and all(r[3] == r[4] == "FAILED" for r in rows[1:])
    summary = read_rows(workspace / "out" / "compare.csv")
    assert [r[:4] for r in summary[1:]] == [["RNN", "0", "2", "2"], ["RNN+MDN", "3", "2", "2"]]
    assert all(r[4:] == ["FAILED"] * 3 for r in summary[1:])
    assert (workspace / "out" / "compare.svg").read_text().count(">FAILED<") == 2


def test_sweep_outputs(workspace):
    assert cli.main(["sweep", str(manifest(workspace)), "--mixtures", "1,2,4"]) == 0
    out = workspace / "out"
    records = cli.read_metrics(out / "sweep_runs.csv")
    assert sorted({r.K for r in records}) == [1, 2, 4] and len(records) == 6
    summary = read_rows(out / "sweep.csv")
    assert [int(r[1]) for r in summary[1:]] == [1, 2, 4]
    for row in summary[1:]:
        rmses = [r.rmse for r in records if r.K == int(row[1])]
        assert abs(float(row[5]) - np.std(rmses, ddof=1)) < 1e-9
    root = ET.parse(out / "sweep.svg").getroot()
    assert any(el.tag.endswith("polyline") for el in root.iter())


def test_sweep_needs_mixture_head(workspace):
    assert cli.main(["sweep", str(manifest(workspace, "variant = RNN\n"))]) == 2


def test_metrics_round_trip(tmp_path):
    records = [cli.MetricsRecord("RNN", 0, 2, 1.25, 0.5), cli.MetricsRecord("CMDRNN-GRU", 30, 1, None, None)]
    cli.write_metrics(records, tmp_path / "m.csv")
    back = cli.read_metrics(tmp_path / "m.csv")
    assert [(r.variant, r.K, r.seed, r.rmse, r.final_loss) for r in back] == \
        [("RNN", 0, 2, 1.25, 0.5), ("CMDRNN-GRU", 30, 1, None, None)]


def test_summary_single_and_failed():
    ok = cli.summarize([cli.MetricsRecord("RNN", 0, 1, 2.0, 0.1)], "RNN", 0)
    assert (ok.mean, ok.std, ok.median) == (2.0, 0.0, 2.0)
    bad = cli.summarize([cli.MetricsRecord("RNN", 0, 1, None, None)], "RNN", 0)
    assert bad.failed == 1 and math.isnan(bad.mean) and bad.row()[4] == "FAILED"


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["compare", "x.manifest", "--jobs", "0"])
    assert info.value.code == 2
