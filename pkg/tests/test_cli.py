import json
import pytest

from diffdse.cli import main
from diffdse.correction import CorrectionModel, format_samples, synthetic_samples
from diffdse.workload import LayerShape, Network, serialize_workload

from helpers import SMALL_LAYERS

QUICK = ["--seeds", "2", "--steps", "20", "--round-every", "10"]


@pytest.fixture
def workload(tmp_path):
    net = Network("small", [(SMALL_LAYERS[1], 1), (SMALL_LAYERS[2], 2), (SMALL_LAYERS[4], 1)])
    path = tmp_path / "small.txt"
    path.write_text(serialize_workload(net))
    return str(path)


def _read(path):
    with open(path) as fh:
        return fh.read()


def test_missing_workload_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["search", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["search", "--workload", "x", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == 2


def test_missing_file_is_runtime_error(tmp_path, capsys):
    assert main(["search", "--workload", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_random_baseline_needs_budget(workload, tmp_path):
    assert main(["search", "--workload", workload, "--baseline", "random",
                 "--out", str(tmp_path)] + QUICK) == 2


def test_search_outputs_and_baseline_accounting(workload, tmp_path):
    out = tmp_path / "run"
    rc = main(["search", "--workload", workload, "--budget", "100", "--baseline", "random",
               "--seed", "1", "--out", str(out)] + QUICK)
    assert rc == 0
    for name in ("search_trace.csv", "best_design.txt", "summary.txt", "baseline_trace.csv",
                 "manifest.json"):
        assert (out / name).exists()
    base = _read(out / "baseline_trace.csv").splitlines()
    assert base[0].startswith("# schema:")
    assert len(base) - 2 == 100
    summary = dict(line.split(" = ") for line in _read(out / "summary.txt").splitlines())
    assert summary["baseline_evaluations"] == "100"
    manifest = json.loads(_read(out / "manifest.json"))
    assert set(manifest["outputs"]) == {"search_trace.csv", "best_design.txt", "summary.txt",
                                        "baseline_trace.csv"}
    assert manifest["config"]["budget"] == 100


def test_search_is_reproducible(workload, tmp_path):
    for name in ("a", "b"):
        assert main(["search", "--workload", workload, "--seed", "4",
                     "--out", str(tmp_path / name)] + QUICK) == 0
    assert _read(tmp_path / "a" / "search_trace.csv") == _read(tmp_path / "b" / "search_trace.csv")


def test_config_file_precedence(workload, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("steps_per_start = 20\nrounding_period = 10\nn_start_points = 3\n")
    assert main(["search", "--workload", workload, "--config", str(cfg), "--seeds", "1",
                 "--out", str(tmp_path / "o")]) == 0
    printed = capsys.readouterr().out
    assert "n_start_points=1" in printed and "steps_per_start=20" in printed
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense = 1\n")
    assert main(["search", "--workload", workload, "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_arch_template_is_used(workload, tmp_path):
    tpl = tmp_path / "arch.txt"
    tpl.write_text("epa_dram = 200.0\n")
    assert main(["search", "--workload", workload, "--arch-template", str(tpl),
                 "--out", str(tmp_path / "o")] + QUICK) == 0
    tpl.write_text("epa_nonsense = 1\n")
    assert main(["search", "--workload", workload, "--arch-template", str(tpl),
                 "--out", str(tmp_path / "o")] + QUICK) == 1


def test_evaluate_matches_search(workload, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["search", "--workload", workload, "--out", str(out)] + QUICK) == 0
    summary = dict(line.split(" = ") for line in _read(out / "summary.txt").splitlines())
    capsys.readouterr()
    assert main(["evaluate", "--design", str(out / "best_design.txt"),
                 "--workload", workload]) == 0
    text = capsys.readouterr().out
    edp = [l for l in text.splitlines() if l.startswith("network_edp")][0].split(" = ")[1]
    assert float(edp) == float(summary["final_edp"])
    rows = _read(out / "search_trace.csv").splitlines()[2:]
    assert min(float(r.split(",")[4]) for r in rows) == float(edp)


def test_evaluate_with_zero_correction_is_identical(workload, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--workload", workload, "--out", str(out)] + QUICK)
    ckpt = tmp_path / "zero.json"
    ckpt.write_text(CorrectionModel.zeros().to_json())
    capsys.readouterr()
    assert main(["evaluate", "--design", str(out / "best_design.txt"), "--workload", workload,
                 "--correction", str(ckpt)]) == 0
    lines = capsys.readouterr().out.splitlines()
    for line in lines[:-2]:
        parts = line.split()
        lat = parts[parts.index("latency") + 2]
        cor = parts[parts.index("corrected_latency") + 2]
        assert lat == cor
    assert lines[-2].split(" = ")[1] == lines[-1].split(" = ")[1]


def test_evaluate_rejects_overfull_design(workload, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--workload", workload, "--out", str(out)] + QUICK)
    text = _read(out / "best_design.txt")
    lines = [("  scratchpad_bytes = 1" if "scratchpad_bytes" in l else l)
             for l in text.splitlines()]
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["evaluate", "--design", str(bad), "--workload", workload]) == 1
    assert "scratchpad" in capsys.readouterr().err


def test_correlate_outputs(workload, tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["correlate", "--workload", workload, "--samples", "30", "--seed", "2",
                 "--out", str(out)]) == 0
    rows = _read(out / "correlation.csv").splitlines()
    assert rows[0].startswith("# schema:") and len(rows) == 32
    summary = _read(out / "correlation_summary.txt")
    for name in ("latency", "energy", "edp"):
        val = float(summary.split(f"mae_{name}_percent = ")[1].split()[0])
        assert val < 1e-9
    again = tmp_path / "d"
    main(["correlate", "--workload", workload, "--samples", "30", "--seed", "2",
          "--out", str(again)])
    assert _read(again / "correlation.csv") == _read(out / "correlation.csv")


def test_correlate_zero_samples(workload, tmp_path):
    out = tmp_path / "c"
    assert main(["correlate", "--workload", workload, "--samples", "0", "--out", str(out)]) == 0
    assert len(_read(out / "correlation.csv").splitlines()) == 2
    assert "undefined" in _read(out / "correlation_summary.txt")


def test_correlate_oracle_cap_names_layer(tmp_path, capsys):
    net = Network("big", [(SMALL_LAYERS[0], 1), (LayerShape(3, 3, 64, 64, 64, 64, 1), 1)])
    path = tmp_path / "big.txt"
    path.write_text(serialize_workload(net))
    assert main(["correlate", "--workload", str(path), "--samples", "2",
                 "--out", str(tmp_path / "c")]) == 1
    assert "layer 1" in capsys.readouterr().err


def test_train_correction_cli(tmp_path, capsys):
    samples = tmp_path / "s.csv"
    assert main(["make-samples", "--n", "80", "--seed", "1", "--kind", "zero", "--noise", "0",
                 "--out", str(samples)]) == 0
    for name in ("a.json", "b.json"):
        assert main(["train-correction", "--samples", str(samples), "--epochs", "60",
                     "--seed", "3", "--out", str(tmp_path / name)]) == 0
    text = capsys.readouterr().out
    test_loss = float([l for l in text.splitlines() if l.startswith("final_test_loss")][0]
                      .split(" = ")[1])
    assert test_loss < 1e-4
    assert _read(tmp_path / "a.json") == _read(tmp_path / "b.json")
    assert _read(tmp_path / "a.loss.csv").startswith("# schema:")


def test_train_correction_refuses_small_dataset(tmp_path, capsys):
    samples = tmp_path / "s.csv"
    samples.write_text(format_samples(synthetic_samples(10, reference="model")))
    assert main(["train-correction", "--samples", str(samples), "--epochs", "5",
                 "--out", str(tmp_path / "m.json")]) == 1
    assert "at least 50" in capsys.readouterr().err


def test_threads_env_var(workload, tmp_path, monkeypatch):
    monkeypatch.setenv("DOSA_THREADS", "2")
    assert main(["correlate", "--workload", workload, "--samples", "6",
                 "--out", str(tmp_path / "p")]) == 0
    monkeypatch.setenv("DOSA_THREADS", "1")
    main(["correlate", "--workload", workload, "--samples", "6", "--out", str(tmp_path / "s")])
    assert _read(tmp_path / "p" / "correlation.csv") == _read(tmp_path / "s" / "correlation.csv")
    monkeypatch.setenv("DOSA_THREADS", "many")
    assert main(["correlate", "--workload", workload, "--samples", "1",
                 "--out", str(tmp_path / "x")]) == 2
