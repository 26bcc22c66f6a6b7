import hashlib
import math

import numpy as np
import pytest

from rsds import datagen
from rsds.cli import (
    RunConfig,
    build_model,
    load_checkpoint,
    main,
    save_checkpoint,
    train_config_from,
)
from rsds.errors import ConfigError
from rsds.trainer import SdsModel, fit


BASE_CONFIG = """
[generator]
kind = synthetic
m = 3
seq_length = 40
n_train = 12
n_test = 4
seed = 5

[model]
m = 3
n = 3
n_regimes = 3
flow_depth = 4
coupling_hidden = 8
rmsm_hidden = 8
q_hidden = 8
seed = 1

[train]
epochs = 2
batch_size = 6
seed = 2
"""


def write_config(tmp_path, text=BASE_CONFIG):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ------------------------------------------------------------------- config


def test_config_round_trips():
    cfg = RunConfig.parse(BASE_CONFIG)
    text = cfg.serialize()
    again = RunConfig.parse(text)
    assert again.values == cfg.values
    assert RunConfig.parse(again.serialize()).values == again.values


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig.parse("[train]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("[nope]\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("loose = 1\n")


def test_config_comments_and_types():
    cfg = RunConfig.parse(
        "[train]\nepochs = 7  # small smoke\nq_freeze_steps = inf\n"
        "[generator]\nidentity_emission = true\nratio_threshold = auto\n")
    assert cfg["train"]["epochs"] == 7
    assert math.isinf(cfg["train"]["q_freeze_steps"])
    assert cfg["generator"]["identity_emission"] is True
    assert cfg["generator"]["ratio_threshold"] is None


def test_train_config_mapping():
    cfg = RunConfig.parse(BASE_CONFIG)
    tc = train_config_from(cfg)
    assert tc.epochs == 2 and tc.batch_size == 6 and tc.seed == 2


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = RunConfig.parse(BASE_CONFIG)
    model = build_model(cfg["model"])
    path = tmp_path / "model.rsdc"
    save_checkpoint(path, model, cfg.section_text("model"), step=17)
    back, model_cfg, step, state = load_checkpoint(path)
    assert step == 17 and state is None
    pa, pb = model.parameters(), back.parameters()
    assert set(pa) == set(pb)
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name


def test_checkpoint_rejects_mismatched_tensors(tmp_path):
    from rsds.errors import DataFormatError
    cfg = RunConfig.parse(BASE_CONFIG)
    model = build_model(cfg["model"])
    path = tmp_path / "model.rsdc"
    save_checkpoint(path, model, cfg.section_text("model"))
    blob = bytearray(path.read_bytes())
    blob[-4] ^= 0xFF  # corrupt the tail
    path.write_bytes(bytes(blob[:-9]))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


# ----------------------------------------------------------------- commands


def test_generate_is_hash_stable(tmp_path):
    cfg_path = write_config(tmp_path)
    out_a = str(tmp_path / "a.rsds")
    out_b = str(tmp_path / "b.rsds")
    assert main(["generate", "--config", cfg_path, "--out", out_a]) == 0
    assert main(["generate", "--config", cfg_path, "--out", out_b]) == 0
    assert sha(out_a) == sha(out_b)
    hdr = datagen.read_dataset_header(out_a)
    assert hdr["N"] == 12 and hdr["T"] == 40
    test_hdr = datagen.read_dataset_header(str(tmp_path / "a.test.rsds"))
    assert test_hdr["N"] == 4


def test_generate_override_honored(tmp_path):
    cfg_path = write_config(tmp_path)
    out = str(tmp_path / "c.rsds")
    assert main(["generate", "--config", cfg_path, "--out", out,
                 "--generator.n_train=7"]) == 0
    assert datagen.read_dataset_header(out)["N"] == 7


def test_unknown_override_is_usage_error(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["generate", "--config", cfg_path, "--out",
                 str(tmp_path / "x.rsds"), "--generator.bogus=1"]) == 1


def test_train_eval_forecast_pipeline(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    data = str(tmp_path / "d.rsds")
    ckpt = str(tmp_path / "m.rsdc")
    assert main(["generate", "--config", cfg_path, "--out", data]) == 0
    assert main(["train", "--config", cfg_path, "--data", data,
                 "--out", ckpt]) == 0
    out = capsys.readouterr().out
    assert "checkpoint=" in out
    log_text = open(ckpt + ".log").read()
    assert log_text.count("epoch=") == 2  # one record per epoch

    assert main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    out = capsys.readouterr().out
    assert "mcc=" in out and "regime_f1=" in out and "loglik_per_step=" in out

    assert main(["forecast", "--config", cfg_path, "--checkpoint", ckpt,
                 "--data", data, "--out", str(tmp_path / "pred.rsds"),
                 "--forecast.context=5", "--forecast.horizon=4"]) == 0
    out = capsys.readouterr().out
    assert "mse=" in out and "pred_regime_f1=" in out
    hdr = datagen.read_dataset_header(str(tmp_path / "pred.rsds"))
    assert hdr["T"] == 4


def test_eval_without_ground_truth_skips_metrics(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    ds = datagen.Dataset(x=np.random.default_rng(0).normal(size=(3, 10, 3)),
                         metadata={"K": "3"})
    data = str(tmp_path / "plain.rsds")
    datagen.write_dataset(data, ds)
    cfg = RunConfig.load(cfg_path)
    model = build_model(cfg["model"])
    ckpt = str(tmp_path / "m.rsdc")
    save_checkpoint(ckpt, model, cfg.section_text("model"))
    assert main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    out = capsys.readouterr().out
    assert "mcc=skipped" in out and "regime_f1=skipped" in out


def test_train_dimension_mismatch_reported_before_compute(tmp_path):
    cfg_path = write_config(tmp_path)
    ds = datagen.Dataset(x=np.zeros((4, 10, 5)), metadata={"K": "3"})
    data = str(tmp_path / "wide.rsds")
    datagen.write_dataset(data, ds)
    rc = main(["train", "--config", cfg_path, "--data", data,
               "--out", str(tmp_path / "m.rsdc")])
    assert rc == 1


def test_resume_matches_straight_run(tmp_path):
    cfg_path = write_config(tmp_path)
    data = str(tmp_path / "d.rsds")
    assert main(["generate", "--config", cfg_path, "--out", data]) == 0

    straight = str(tmp_path / "straight.rsdc")
    assert main(["train", "--config", cfg_path, "--data", data,
                 "--out", straight, "--train.epochs=4"]) == 0

    stage1 = str(tmp_path / "stage.rsdc")
    assert main(["train", "--config", cfg_path, "--data", data,
                 "--out", stage1, "--train.epochs=2"]) == 0
    assert main(["train", "--config", cfg_path, "--data", data,
                 "--out", stage1, "--resume", stage1,
                 "--train.epochs=4"]) == 0

    a, _, _, state_a = load_checkpoint(straight)
    b, _, _, state_b = load_checkpoint(stage1)
    pa, pb = a.parameters(), b.parameters()
    for name in pa:
        assert np.array_equal(pa[name], pb[name]), name
    assert state_a.step == state_b.step


def test_theory_command_reports_cosine_margin(tmp_path, capsys):
    cfg_path = write_config(
        tmp_path,
        "[generator]\nkind = cosine\nsigma2 = 0.1\nstickiness = 0.1\n")
    assert main(["theory", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "margins_at_point=5.0000" in out
    assert "one_step=True" in out


def test_theory_command_single_regime_trivial(tmp_path, capsys):
    cfg_path = write_config(
        tmp_path,
        "[generator]\nkind = synthetic\nm = 3\nn_regimes = 1\n"
        "ratio_threshold = -1\nn_train = 1\nn_test = 1\n")
    assert main(["theory", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "margins_at_point=inf" in out


def test_theory_command_disentangle_report(tmp_path, capsys):
    rng = np.random.default_rng(0)
    sig = np.array([[1.0, 0.5, 0.25], [1.0, 0.25, 0.5], [0.7, 1.3, 0.9]])
    a = rng.normal(size=(3, 3)) + 2 * np.eye(3)
    covs = np.stack([a @ np.diag(s ** 2) @ a.T for s in sig])
    cov_path = str(tmp_path / "covs.npy")
    np.save(cov_path, covs)
    cfg_path = write_config(
        tmp_path,
        "[generator]\nkind = cosine\n"
        f"[theory]\ncovariances = {cov_path}\n")
    assert main(["theory", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "disentangle_full=True" in out


def test_missing_config_is_usage_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"),
                 "--data", "x", "--out", "y"]) == 1


def test_bad_data_is_data_error(tmp_path):
    cfg_path = write_config(tmp_path)
    bad = tmp_path / "bad.rsds"
    bad.write_bytes(b"JUNKJUNKJUNK")
    rc = main(["train", "--config", cfg_path, "--data", str(bad),
               "--out", str(tmp_path / "m.rsdc")])
    assert rc == 2


def test_forecast_zero_horizon_ok(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    data = str(tmp_path / "d.rsds")
    ckpt = str(tmp_path / "m.rsdc")
    assert main(["generate", "--config", cfg_path, "--out", data]) == 0
    cfg = RunConfig.load(cfg_path)
    model = build_model(cfg["model"])
    save_checkpoint(ckpt, model, cfg.section_text("model"))
    assert main(["forecast", "--config", cfg_path, "--checkpoint", ckpt,
                 "--data", data, "--forecast.horizon=0"]) == 0
    assert "horizon=0" in capsys.readouterr().out
