import json
import os

import numpy as np
import pytest

from mcptta.cli import main
from mcptta.config import RunConfig, load_run_config, load_synth_spec
from mcptta.errors import ConfigError
from mcptta.runner import grid_search, run
from mcptta.synth import SynthSpec, generate, synth_stream


@pytest.fixture(scope="module")
def small_stream(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("streams") / "small.mcpe")
    spec = SynthSpec(
        num_classes=4,
        dim=16,
        num_samples=120,
        views_per_sample=2,
        min_angle_deg=15,
        cluster_scale=0.5,
        spread=0.5,
        shift=0.7,
        view_noise=0.2,
        seed=2,
    )
    synth_stream(path, spec)
    return path


def tuned_config(**kw):
    base = dict(
        mode="mcp",
        tau=0.05,
        e_gate_frac=0.45,
        h_low_frac=0.5,
        h_high_frac=0.75,
        alpha2=0.25,
        alpha3=0.1,
    )
    base.update(kw)
    return RunConfig(**base)


# -- config parsing -----------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "mode = mcp++\n"
        "lambda = 0.25   # alias for the alignment weight\n"
        "m_entropy = 5\n"
        "use_negative_cache = false\n"
        "\n"
    )
    cfg = load_run_config(str(path))
    assert cfg.mode == "mcp++"
    assert cfg.lam == 0.25
    assert cfg.m_entropy == 5
    assert cfg.use_negative_cache is False


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("not_a_key = 1\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_config_rejects_bad_values(tmp_path):
    path = tmp_path / "bad2.cfg"
    path.write_text("tau = zero\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text("use_align_cache = maybe\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text("tau = -3\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))
    path.write_text("mode = banana\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_config_rejects_duplicate_key(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("tau = 0.01\ntau = 0.02\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_synth_spec_from_file(tmp_path):
    path = tmp_path / "synth.cfg"
    path.write_text("num_classes = 5\ndim = 12\nnum_samples = 7\nspread = 0.4\n")
    spec = load_synth_spec(str(path))
    assert spec.num_classes == 5 and spec.dim == 12 and spec.num_samples == 7


# -- run loop ------------------------------------------------------------------


def test_run_emits_deterministic_jsonl(small_stream, tmp_path):
    cfg = tuned_config(emit_terms=True)
    out1 = str(tmp_path / "a.jsonl")
    out2 = str(tmp_path / "b.jsonl")
    s1 = run(cfg, small_stream, jsonl_path=out1)
    s2 = run(cfg, small_stream, jsonl_path=out2)
    with open(out1, "rb") as f1, open(out2, "rb") as f2:
        assert f1.read() == f2.read()
    assert s1["accuracy"] == s2["accuracy"]
    with open(out1) as fh:
        first = json.loads(fh.readline())
    assert set(first) >= {
        "seq",
        "pred",
        "label",
        "running_accuracy",
        "cache_occupancy",
        "text_term",
        "visual_neg_term",
        "cache_term",
    }


def test_run_summary_written(small_stream, tmp_path):
    cfg = tuned_config()
    out = str(tmp_path / "c.jsonl")
    summary_path = out + ".summary.json"
    run(cfg, small_stream, jsonl_path=out, summary_path=summary_path)
    with open(summary_path) as fh:
        summary = json.load(fh)
    assert summary["samples"] == 120
    assert "cache_turnover" in summary and "wall_time_s" in summary


def test_unlabeled_stream_reports_no_accuracy(tmp_path):
    rng = np.random.default_rng(0)
    spec = SynthSpec(num_classes=3, dim=8, num_samples=10, seed=4)
    header, records = generate(spec)
    for r in records:
        r.label = None
    from mcptta.stream_io import write_stream

    path = str(tmp_path / "unlabeled.mcpe")
    write_stream(path, header, iter(records))
    summary = run(tuned_config(), path)
    assert summary["accuracy"] is None
    assert summary["labeled"] == 0


def test_mcp_plus_plus_zero_lr_matches_mcp_summary(small_stream):
    import dataclasses

    a = run(tuned_config(), small_stream)
    b = run(dataclasses.replace(tuned_config(), mode="mcp++", lr=0.0), small_stream)
    assert a["accuracy"] == b["accuracy"]


def test_grid_search_single_point_and_counting(small_stream):
    cfg = tuned_config()
    best, table = grid_search(cfg, small_stream)
    assert len(table) == 1
    assert best == table[0]
    best, table = grid_search(
        cfg,
        small_stream,
        alpha1_grid=(0.5, 1.0, 2.0),
        alpha2_grid=(0.1, 0.25, 0.5),
        alpha3_grid=(0.0, 0.1, 0.3),
        w_grid=(0.2, 0.8, 1.0),
    )
    assert len(table) == 81
    accs = [row["accuracy"] for row in table]
    assert best["accuracy"] == max(accs)
    # deterministic tie-break: the first row attaining the max
    first = next(row for row in table if row["accuracy"] == best["accuracy"])
    assert best == first


def test_center_weight_sweep_interior_optimum_on_bundle(
    benchmark_stream, benchmark_config
):
    best, table = grid_search(
        benchmark_config, benchmark_stream, w_grid=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    )
    accs = {row["w"]: row["accuracy"] for row in table}
    assert best["w"] not in (0.0, 1.0)
    assert best["accuracy"] > accs[0.0]
    assert best["accuracy"] > accs[1.0]


def test_grid_search_defaults_inherit_config_weights(small_stream):
    cfg = tuned_config()
    _, table = grid_search(cfg, small_stream, w_grid=(0.3, 0.8))
    assert all(row["alpha2"] == cfg.alpha2 and row["alpha3"] == cfg.alpha3 for row in table)


# -- CLI ------------------------------------------------------------------------


def test_cli_run_and_exit_codes(small_stream, tmp_path, capsys):
    out = str(tmp_path / "cli.jsonl")
    code = main(["run", "--stream", small_stream, "--out", out, "--no-negative-cache"])
    assert code == 0
    captured = capsys.readouterr()
    summary = json.loads(captured.out)
    assert summary["toggles"]["negative_cache"] is False
    assert os.path.exists(out)
    with open(out + ".summary.json") as fh:
        on_disk = json.load(fh)
    assert on_disk["samples"] == summary["samples"]


def test_cli_synth_and_compactness(tmp_path, capsys):
    cfgfile = tmp_path / "synth.cfg"
    cfgfile.write_text("num_classes = 3\ndim = 8\nnum_samples = 30\nspread = 0.3\n")
    out = str(tmp_path / "s.mcpe")
    assert main(["synth", "--config", str(cfgfile), "--out", out, "--seed", "5"]) == 0
    capsys.readouterr()
    assert main(["compactness", "--stream", out]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["compactness"] > 0


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("tau = -1\n")
    code = main(["run", "--config", str(bad), "--stream", "nowhere.mcpe"])
    assert code == 2


def test_cli_data_error_exit_code(tmp_path):
    missing = str(tmp_path / "missing.mcpe")
    assert main(["run", "--stream", missing]) == 3
    garbage = tmp_path / "garbage.mcpe"
    garbage.write_bytes(b"garbage bytes")
    assert main(["run", "--stream", str(garbage)]) == 3


def test_cli_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--instances", "3", "--seed", "0"]) == 0
    capsys.readouterr()
    # an impossible tolerance forces the failure path
    assert main(["gradcheck", "--instances", "3", "--seed", "0", "--tolerance", "1e-18"]) == 4


def test_cli_pearson(tmp_path, capsys):
    csv_path = tmp_path / "pairs.csv"
    csv_path.write_text("x,y\n1,2\n2,4\n3,6\n4,8.1\n")
    assert main(["pearson", "--in", str(csv_path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["n"] == 4 and rep["r"] > 0.99


def test_cli_snapshot_round_trip(small_stream, tmp_path, capsys):
    snap = str(tmp_path / "bank.mcps")
    assert main(["snapshot", "--stream", small_stream, "--out", snap]) == 0
    capsys.readouterr()
    assert main(["snapshot", "--inspect", snap]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["classes"] == 4 and rep["dim"] == 16


def test_cli_log_level_validation(monkeypatch, small_stream):
    monkeypatch.setenv("MCP_LOG_LEVEL", "noisy")
    assert main(["run", "--stream", small_stream]) == 2
    monkeypatch.setenv("MCP_LOG_LEVEL", "debug")
    assert main(["gradcheck", "--instances", "1"]) == 0
