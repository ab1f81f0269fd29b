import csv
import json

import pytest

from snipersim.cli import emit_figure_data, main, recompute_summary, run_scenario
from snipersim.config import ConfigError, ScenarioConfig, dump_config, load_config, parse_config, preset_names


def test_defaults_are_valid_and_round_trip():
    cfg = ScenarioConfig()
    cfg.validate()
    assert parse_config(dump_config(cfg)) == cfg


def test_comments_and_types():
    cfg = parse_config("""
        # a comment
        victim = rsa      ; inline comment
        shoot = method2
        samples = 1_000
        spontaneous_abort_rate = 2e-6
        adaptive = yes
    """.replace("        ", ""))
    assert (cfg.victim, cfg.samples, cfg.spontaneous_abort_rate, cfg.adaptive) == ("rsa", 1000, 2e-6, True)


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as e:
        parse_config("victim = des\nbogus = 1\nsamples = many\nshoot = method1\nshared_memory = false\n")
    text = "\n".join(e.value.problems)
    assert "bogus: unknown key" in text
    assert "samples:" in text
    assert "victim:" in text
    assert "method1 needs shared_memory" in text
    assert str(e.value).startswith("CONFIG_INVALID")


@pytest.mark.parametrize("line", ["key = 00", "key = zz", "wait_time = soon", "monitored_line = 4",
                                  "insert_age = 5", "l3_sets = 1000", "target_miss_rate = 1.5"])
def test_field_checks(line):
    with pytest.raises(ConfigError):
        parse_config(line + "\n")


def test_presets_load():
    names = preset_names()
    for n in ("aes_noiseless", "aes_noisy", "rsa_noiseless", "rsa_noisy", "wait_flush"):
        assert n in names
        assert load_config(n).name == n
    with pytest.raises(ConfigError):
        load_config("no_such_preset")


def test_config_file_path(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("victim = rsa\nshoot = method2\n")
    assert load_config(str(p)).victim == "rsa"


def test_validate_command(capsys):
    assert main(["validate", "--trials", "20"]) == 0
    out = capsys.readouterr().out
    assert "PASS plru_survivors: L1 survivors {B, D, F, H}" in out
    assert main(["validate", "--insert-age", "1", "--trials", "5"]) == 1
    assert "FAIL staging_replay" in capsys.readouterr().out


def test_bad_config_exit_codes(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("bogus = 1\n")
    assert main(["run", str(p)]) == 2
    p.write_text("shoot = method2\nsamples = 5\n")
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "WINDOW_TOO_EARLY" in capsys.readouterr().err
    p.write_text("detection = flush_reload\n")
    assert main(["run", str(p)]) == 2


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_rsa_run_artifacts_and_determinism(tmp_path):
    cfg = load_config("rsa_noiseless").replace(exponent_bits=256)
    s1 = run_scenario(cfg, tmp_path / "a")
    run_scenario(cfg, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert set(_files(tmp_path / "a")) == {"config.cfg", "trace.csv", "observations.csv", "recovery.csv",
                                            "ground_truth.csv", "summary.json"}
    assert s1["bit_errors"] == 0 and s1["decoded"] == 256
    assert s1["seed"] == 1 and s1["scenario"]["exponent_bits"] == 256
    again = recompute_summary(tmp_path / "a")
    for k, v in again.items():
        assert s1[k] == v, k


def test_aes_run_summary_matches_csvs(tmp_path):
    cfg = load_config("aes_noiseless").replace(samples=500, stop_when_recovered=False, arrival_mean_us=50)
    s = run_scenario(cfg, tmp_path)
    again = recompute_summary(tmp_path)
    for k, v in again.items():
        assert s[k] == v, k
    rows = list(csv.DictReader(open(tmp_path / "recovery.csv")))
    assert rows[0]["search_space_bits"] == "128.0"
    assert json.loads((tmp_path / "summary.json").read_text())["samples"] == 500


def test_seed_override_changes_output(tmp_path):
    assert main(["run", "rsa_noiseless", "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["seed"] == 3


def test_figure_aes_last(tmp_path):
    path = emit_figure_data("aes_last", load_config("aes_noiseless"), tmp_path, samples=20_000)
    rows = list(csv.DictReader(open(path)))
    assert rows[-1]["eviction_op"] == "16" and float(rows[-1]["analytic_pct"]) == 75.0
    assert float(rows[-2]["analytic_pct"]) == 56.25


def test_figure_wait_flush_has_row_20(tmp_path):
    path = emit_figure_data("wait_flush", load_config("wait_flush"), tmp_path, runs=50, limits=(0, 20, 150))
    rows = list(csv.DictReader(open(path)))
    assert [r["wait_limit"] for r in rows] == ["0", "20", "150"]
    assert list(rows[0]) == ["wait_limit", "runs", "detected_pct", "valid_pct"]


def test_figure_flush_count_tot_starts_at_128(tmp_path):
    cfg = load_config("aes_noiseless").replace(samples=300, arrival_mean_us=50)
    path = emit_figure_data("flush_count_tot", cfg, tmp_path)
    rows = list(csv.DictReader(open(path)))
    assert float(rows[0]["search_space_bits"]) == 128.0 and rows[0]["samples"] == "0"


def test_figures_command(tmp_path, capsys):
    assert main(["figures", "aes_last", "aes_noiseless", "--out", str(tmp_path), "--samples", "1000"]) == 0
    assert (tmp_path / "aes_last.csv").exists()
