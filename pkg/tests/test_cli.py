import json

import numpy as np
import pytest

from ensda.cli import ExperimentConfig, main, parse_config, run_experiment
from ensda.errors import ConfigError


def test_defaults():
    cfg = parse_config([])
    assert cfg.model == "seasonal"
    assert cfg.filter == "ensf"
    assert cfg.ensemble == 50
    assert cfg.diffusion_steps == 500
    assert cfg.obs_blocks == 4
    assert cfg.obs_noise == 0.05
    assert cfg.horizon == 850
    assert cfg.seed == 0
    assert cfg.batch is None
    assert cfg.track == (0,)


def test_flags_override_defaults():
    cfg = parse_config(["--model", "linear", "--ensemble", "12", "--track", "0,1", "--seed", "7"])
    assert cfg.model == "linear"
    assert cfg.ensemble == 12
    assert cfg.track == (0, 1)
    assert cfg.seed == 7


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"ensemble": 100, "horizon": 9}))
    cfg = parse_config(["--config", str(path)])
    assert cfg.ensemble == 100 and cfg.horizon == 9
    cfg = parse_config(["--config", str(path), "--ensemble", "50"])
    assert cfg.ensemble == 50 and cfg.horizon == 9  # flag wins, file keeps the rest


def test_unknown_config_key_named(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"ensembel": 100}))
    with pytest.raises(ConfigError, match="unknown config key 'ensembel'"):
        parse_config(["--config", str(path)])


def test_bad_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(["--config", str(path)])
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(["--config", str(tmp_path / "absent.json")])


def test_value_errors_name_the_key():
    with pytest.raises(ConfigError, match="obs_blocks must be at least 1"):
        parse_config(["--obs-blocks", "0"])
    with pytest.raises(ConfigError, match="obs_noise must be positive"):
        parse_config(["--obs-noise", "0"])
    with pytest.raises(ConfigError, match="diffusion_steps must be at least 2"):
        parse_config(["--diffusion-steps", "1"])
    with pytest.raises(ConfigError, match="horizon must be at least 1"):
        parse_config(["--horizon", "0"])
    with pytest.raises(ConfigError, match="filter must be one of"):
        ExperimentConfig(filter="smoother")
    with pytest.raises(ConfigError, match="model must be one of"):
        ExperimentConfig(model="arima")
    with pytest.raises(ConfigError, match="external model needs a command"):
        ExperimentConfig(model="external:")


def _run(tmp_path, *args):
    out = tmp_path / "out"
    cfg = parse_config([*args, "--out", str(out)])
    return run_experiment(cfg), out


def test_report_files_and_shapes(tmp_path):
    report, out = _run(
        tmp_path,
        "--model", "linear",
        "--filter", "enkf",
        "--horizon", "7",
        "--ensemble", "20",
        "--obs-blocks", "2",
        "--track", "0,1",
    )
    assert set(report.arms) == {"none", "enkf"}
    assert report.arms["enkf"].shape == (7, 3)
    assert (out / "metrics_enkf.csv").exists()
    assert (out / "metrics_none.csv").exists()
    assert (out / "trajectories_enkf.csv").exists()
    assert (out / "config_echo.json").exists()

    lines = (out / "metrics_enkf.csv").read_text().strip().splitlines()
    assert lines[0] == "step,mae,mape,rmse"
    assert len(lines) == 8
    parsed = np.array([[float(c) for c in line.split(",")[1:]] for line in lines[1:]])
    np.testing.assert_allclose(parsed, report.arms["enkf"], rtol=1e-15)

    rows = (out / "trajectories_enkf.csv").read_text().strip().splitlines()
    assert rows[0] == "step,true_c0,est_c0,true_c1,est_c1"
    assert len(rows) == 8
    first = [float(c) for c in rows[1].split(",")]
    assert first[0] == 1.0
    np.testing.assert_allclose(first[1], report.truth_tracked[0, 0], rtol=1e-15)
    np.testing.assert_allclose(first[2], report.estimates_tracked["enkf"][0, 0], rtol=1e-15)

    echo = json.loads((out / "config_echo.json").read_text())
    assert "out" not in echo
    assert echo["ensemble"] == 20 and echo["filter"] == "enkf"


def test_open_loop_identity_model_is_exact(tmp_path):
    # coefficient 1 and zero noise: the reference trajectory is constant and
    # the no-assimilation arm reproduces it exactly
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"model_params": {"coefficient": 1.0}}))
    report, _ = _run(
        tmp_path,
        "--config", str(path),
        "--model", "linear",
        "--filter", "none",
        "--model-noise", "0",
        "--horizon", "6",
        "--ensemble", "4",
        "--obs-blocks", "1",
    )
    assert set(report.arms) == {"none"}
    np.testing.assert_array_equal(report.arms["none"], 0.0)


def test_reports_are_byte_identical(tmp_path):
    args = [
        "--model", "linear",
        "--filter", "ensf",
        "--horizon", "5",
        "--ensemble", "15",
        "--diffusion-steps", "400",
        "--obs-noise", "0.2",
        "--obs-blocks", "1",
        "--seed", "3",
    ]
    _, out_a = _run(tmp_path / "a", *args)
    _, out_b = _run(tmp_path / "b", *args)
    for name in ["metrics_none.csv", "metrics_ensf.csv", "trajectories_ensf.csv", "config_echo.json"]:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_baseline_arm_isolated_from_filter_arm(tmp_path):
    common = [
        "--model", "linear",
        "--horizon", "5",
        "--ensemble", "15",
        "--obs-blocks", "1",
        "--obs-noise", "0.2",
        "--diffusion-steps", "400",
        "--seed", "3",
    ]
    _, with_ensf = _run(tmp_path / "a", *common, "--filter", "ensf")
    _, with_enkf = _run(tmp_path / "b", *common, "--filter", "enkf")
    _, alone = _run(tmp_path / "c", *common, "--filter", "none")
    ref = (alone / "metrics_none.csv").read_bytes()
    assert (with_ensf / "metrics_none.csv").read_bytes() == ref
    assert (with_enkf / "metrics_none.csv").read_bytes() == ref


def test_assimilation_beats_open_loop_on_seasonal(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dim": 12, "model_params": {"process_noise_std": 0.3}}))
    report, _ = _run(
        tmp_path,
        "--config", str(path),
        "--model", "seasonal",
        "--filter", "ensf",
        "--model-noise", "0.3",
        "--obs-noise", "0.05",
        "--obs-blocks", "1",
        "--horizon", "50",
        "--ensemble", "25",
        "--seed", "1",
    )
    rmse_none = report.arms["none"][:, 2].mean()
    rmse_ensf = report.arms["ensf"][:, 2].mean()
    assert rmse_ensf < 0.5 * rmse_none


def test_truth_file_run_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "truth.csv"
    rows = ["east,west"]
    x = np.array([2.0, 3.0])
    for _ in range(20):
        x = 2.5 + 0.8 * (x - 2.5) + 0.1 * rng.standard_normal(2)
        rows.append(",".join(repr(float(v)) for v in x))
    path.write_text("\n".join(rows) + "\n")

    report, out = _run(
        tmp_path,
        "--model", "seasonal",
        "--filter", "enkf",
        "--truth", str(path),
        "--horizon", "8",
        "--ensemble", "10",
        "--obs-blocks", "1",
        "--obs-noise", "0.1",
    )
    assert report.tracked_ids == ("east",)
    assert report.config["normalize"] is None  # echo keeps the requested value
    assert report.arms["enkf"].shape == (8, 3)

    with pytest.raises(ConfigError, match="need window \\+ horizon"):
        _run(
            tmp_path / "x",
            "--model", "seasonal",
            "--truth", str(path),
            "--horizon", "400",
            "--ensemble", "5",
            "--obs-blocks", "1",
        )


def test_dimension_checks(tmp_path):
    with pytest.raises(ConfigError, match="obs_blocks must be at most dim=2"):
        _run(tmp_path, "--model", "linear", "--horizon", "3", "--ensemble", "5")
    with pytest.raises(ConfigError, match="track indices"):
        _run(
            tmp_path / "b",
            "--model", "linear",
            "--horizon", "3",
            "--ensemble", "5",
            "--obs-blocks", "1",
            "--track", "5",
        )
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"normalize": "logminmax"}))
    with pytest.raises(ConfigError, match="needs a truth file"):
        _run(
            tmp_path / "c",
            "--config", str(path),
            "--model", "linear",
            "--horizon", "3",
            "--ensemble", "5",
            "--obs-blocks", "1",
        )


def test_dim_conflicts_with_truth_width(tmp_path):
    path = tmp_path / "truth.csv"
    path.write_text("a,b,c\n" + "\n".join("1.0,1.0,1.0" for _ in range(10)) + "\n")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"dim": 2}))
    with pytest.raises(ConfigError, match="conflicts with the truth file width"):
        _run(
            tmp_path,
            "--config", str(cfg_path),
            "--model", "seasonal",
            "--truth", str(path),
            "--horizon", "3",
            "--ensemble", "5",
            "--obs-blocks", "1",
        )


def test_unknown_model_param_named(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"model_params": {"forcing": 8.0}}))
    with pytest.raises(ConfigError, match="unknown model parameter 'forcing' for model 'linear'"):
        _run(
            tmp_path,
            "--config", str(path),
            "--model", "linear",
            "--horizon", "3",
            "--ensemble", "5",
            "--obs-blocks", "1",
        )


def test_main_exit_codes(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(
        [
            "--model", "linear",
            "--filter", "none",
            "--horizon", "3",
            "--ensemble", "4",
            "--obs-blocks", "1",
            "--out", str(out),
        ]
    )
    captured = capsys.readouterr()
    assert code == 0
    assert "none: horizon=3" in captured.out
    assert (out / "metrics_none.csv").exists()

    code = main(["--obs-blocks", "0", "--out", str(out)])
    captured = capsys.readouterr()
    assert code == 1
    assert "error: obs_blocks must be at least 1" in captured.err
