"""Command-line entry point: rsds {generate|train|eval|theory|forecast}.

Runs are driven by an INI-like configuration file with sections
[generator], [model], [train], [eval], [forecast], [theory]; '='
separated keys, '#' comments, unknown keys rejected. Any key can be
overridden on the command line as --section.key=value.

Checkpoint format "RSDC", version 1, little-endian:
    magic "RSDC" | u16 version
    u32 length | architecture descriptor (the [model] section text)
    u64 training step counter
    u32 length | UTF-8 JSON training state (rng state, epoch, adam_t)
    u32 tensor count | tensors: u16 name length, name, u8 ndim,
        u32 dims..., float64 data
Model parameters and Adam moments are stored as named tensors;
load(save(model)) reproduces every parameter bit-exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numerical divergence.
"""

import argparse
import json
import logging
import math
import os
import struct
import sys

import numpy as np

from rsds import datagen, metrics, rmsm as rmsm_mod, theory, trainer
from rsds.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    DivergenceError,
)
from rsds.flow import build_flow
from rsds.rmsm import RmsmParams
from rsds.trainer import SdsModel, TrainConfig, TrainState

log = logging.getLogger("rsds")

CHECKPOINT_MAGIC = b"RSDC"
CHECKPOINT_VERSION = 1


def _typ_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _typ_auto_num(raw):
    return None if raw.strip().lower() == "auto" else float(raw)


def _typ_auto_int(raw):
    return None if raw.strip().lower() == "auto" else int(raw)


def _typ_steps(raw):
    return math.inf if raw.strip().lower() in ("inf", "infinity") else float(raw)


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "generator": {
        "kind": (str, "synthetic"),
        "m": (int, 3),
        "n_regimes": (_typ_auto_int, None),
        "obs_factor": (int, 1),
        "seq_length": (int, 100),
        "n_train": (int, 10000),
        "n_test": (int, 1000),
        "stay_prob": (float, 0.9),
        "sparsity": (int, 3),
        "sigma_lo": (float, 0.001),
        "sigma_hi": (float, 0.5),
        "ratio_threshold": (_typ_auto_num, None),
        "hidden": (int, 16),
        "identity_emission": (_typ_bool, False),
        "sigma2": (float, 0.1),
        "stickiness": (float, 0.1),
        "recurrent_truth": (_typ_bool, False),
        "box_size": (float, 1.0),
        "speed": (float, 0.1),
        "process_noise": (float, 0.01),
        "emit_net": (_typ_bool, False),
        "seed": (int, 0),
    },
    "model": {
        "m": (int, 3),
        "n": (int, 3),
        "n_regimes": (int, 3),
        "flow_depth": (int, 6),
        "coupling_hidden": (int, 16),
        "mixing": (str, "lu"),
        "rmsm_hidden": (int, 32),
        "q_hidden": (int, 32),
        "switching": (str, "recurrent"),
        "activation": (str, "cosine"),
        "seed": (int, 0),
    },
    "train": {
        "sigma_eps": (float, 0.1),
        "flow_lr": (float, 5e-3),
        "rmsm_lr": (float, 5e-3),
        "adam_beta1": (float, 0.9),
        "adam_beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "epochs": (int, 100),
        "batch_size": (int, 64),
        "q_freeze_steps": (_typ_steps, 0.0),
        "pca_align_weight": (float, 0.0),
        "pca_align_steps": (int, 500),
        "lr_drop_epoch": (int, 100),
        "lr_drop_factor": (float, 0.1),
        "seed": (int, 0),
        "checkpoint_every": (int, 0),
    },
    "eval": {
        "batch_size": (int, 256),
    },
    "forecast": {
        "context": (int, 5),
        "horizon": (int, 20),
        "mode": (str, "map"),
        "n_samples": (int, 100),
        "seed": (int, 0),
    },
    "theory": {
        "probe_count": (int, 32),
        "probe_lo": (float, -2.0),
        "probe_hi": (float, 2.0),
        "margin_regime": (int, 0),
        "margin_point": (str, "0"),
        "dominance_margin": (_typ_auto_num, None),
        "dominance_stickiness": (float, 0.1),
        "initial_odds": (_typ_auto_num, None),
        "covariances": (str, ""),
    },
}


class RunConfig:
    """Typed view over the sectioned key=value configuration."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def defaults(cls):
        return cls({s: {k: d for k, (_, d) in keys.items()}
                    for s, keys in SCHEMA.items()})

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls.defaults()
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(
                        f"{source}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value")
            if section is None:
                raise ConfigError(f"{source}:{lineno}: key outside a section")
            key, _, raw_val = line.partition("=")
            cfg.set(section, key.strip(), raw_val.strip(),
                    where=f"{source}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.parse(fh.read(), source=str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc

    def set(self, section, key, raw_value, where="<override>"):
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        parser, _ = SCHEMA[section][key]
        try:
            self.values[section][key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(
                f"{where}: bad value for {section}.{key}: {exc}") from exc

    def serialize(self):
        chunks = []
        for section in SCHEMA:
            chunks.append(f"[{section}]")
            for key in SCHEMA[section]:
                chunks.append(f"{key} = {_fmt(self.values[section][key])}")
            chunks.append("")
        return "\n".join(chunks)

    def section_text(self, section):
        lines = [f"[{section}]"]
        for key in SCHEMA[section]:
            lines.append(f"{key} = {_fmt(self.values[section][key])}")
        return "\n".join(lines) + "\n"


def build_model(model_cfg):
    """Fresh SdsModel from the [model] section values."""
    m = model_cfg["m"]
    n = model_cfg["n"]
    if n < m:
        raise ConfigError("model.n must be at least model.m")
    flow = build_flow(m, n - m, depth=model_cfg["flow_depth"],
                      hidden=model_cfg["coupling_hidden"],
                      mixing=model_cfg["mixing"], seed=model_cfg["seed"])
    prior = RmsmParams.init_random(
        model_cfg["n_regimes"], m, hidden=model_cfg["rmsm_hidden"],
        activation=model_cfg["activation"],
        switching=model_cfg["switching"], q_hidden=model_cfg["q_hidden"],
        seed=model_cfg["seed"] + 1)
    return SdsModel(flow, prior)


def train_config_from(cfg):
    t = cfg["train"]
    return TrainConfig(
        sigma_eps=t["sigma_eps"], flow_lr=t["flow_lr"], rmsm_lr=t["rmsm_lr"],
        adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"], epochs=t["epochs"],
        batch_size=t["batch_size"], q_freeze_steps=t["q_freeze_steps"],
        pca_align_weight=t["pca_align_weight"],
        pca_align_steps=t["pca_align_steps"],
        lr_drop_epoch=t["lr_drop_epoch"], lr_drop_factor=t["lr_drop_factor"],
        seed=t["seed"], checkpoint_every=t["checkpoint_every"])


# --------------------------------------------------------------------------
# checkpoint io


def _write_tensor(fh, name, array):
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(array.tobytes())


def save_checkpoint(path, model, model_section, step=0, state=None):
    """Write an RSDC checkpoint; state is a trainer.TrainState or None."""
    tensors = dict(model.parameters())
    state_doc = {}
    if state is not None:
        state_doc = {"epoch": state.epoch, "step": state.step,
                     "adam_t": state.adam_t, "rng": state.rng_state}
        for name, arr in state.adam_m.items():
            tensors[f"optstate.m.{name}"] = arr
        for name, arr in state.adam_v.items():
            tensors[f"optstate.v.{name}"] = arr
        step = state.step
    desc = model_section.encode("utf-8")
    state_blob = json.dumps(state_doc, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(state_blob)))
        fh.write(state_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path):
    """Read an RSDC checkpoint.

    Returns (model, model_cfg_values, step, TrainState-or-None).
    """
    try:
        with open(str(path), "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint: {exc}") from exc
    reader = datagen._Reader(blob)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", 0)
    (version,) = reader.unpack("H", "version")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", 4)
    (desc_len,) = reader.unpack("I", "descriptor length")
    desc = reader.take(desc_len, "descriptor").decode("utf-8")
    (step,) = reader.unpack("Q", "step counter")
    (state_len,) = reader.unpack("I", "state length")
    state_doc = json.loads(reader.take(state_len, "state").decode("utf-8")) \
        if state_len else {}
    (count,) = reader.unpack("I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("B", "tensor rank")
        shape = tuple(reader.unpack(f"{ndim}I", "tensor shape")) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * size, f"tensor {name}"),
                             dtype="<f8").reshape(shape).copy()
        tensors[name] = data

    cfg = RunConfig.defaults()
    section = None
    for line in desc.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line[1:-1]
            continue
        key, _, val = line.partition("=")
        cfg.set(section, key.strip(), val.strip(), where="<checkpoint>")
    model = build_model(cfg["model"])
    params = model.parameters()
    opt_m, opt_v = {}, {}
    for name, data in tensors.items():
        if name.startswith("optstate.m."):
            opt_m[name[len("optstate.m."):]] = data
        elif name.startswith("optstate.v."):
            opt_v[name[len("optstate.v."):]] = data
        elif name in params:
            if params[name].shape != data.shape:
                raise DataFormatError(f"tensor {name} has shape {data.shape}, "
                                      f"model expects {params[name].shape}")
            params[name][...] = data
        else:
            raise DataFormatError(f"unknown tensor {name}")
    missing = set(params) - set(tensors)
    if missing:
        raise DataFormatError(f"checkpoint missing tensors: {sorted(missing)}")
    state = None
    if state_doc:
        rng_state = state_doc["rng"]
        state = TrainState(epoch=state_doc["epoch"], step=state_doc["step"],
                           rng_state=rng_state, adam_t=state_doc["adam_t"],
                           adam_m=opt_m, adam_v=opt_v)
    return model, cfg["model"], step, state


# --------------------------------------------------------------------------
# commands


def _emit(record):
    print(" ".join(f"{k}={v}" for k, v in record.items()))


def _test_path(out):
    root, ext = os.path.splitext(out)
    return f"{root}.test{ext or '.rsds'}"


def _generator_spec(g):
    return datagen.SyntheticSpec(
        m=g["m"], n_regimes=g["n_regimes"], obs_factor=g["obs_factor"],
        T=g["seq_length"], n_train=g["n_train"], n_test=g["n_test"],
        stay_prob=g["stay_prob"], sparsity=g["sparsity"],
        sigma_lo=g["sigma_lo"], sigma_hi=g["sigma_hi"],
        ratio_threshold=g["ratio_threshold"], hidden=g["hidden"],
        seed=g["seed"], identity_emission=g["identity_emission"])


def ground_truth_from_config(cfg):
    """The generator's true latent model (for theory reports)."""
    g = cfg["generator"]
    kind = g["kind"]
    if kind == "synthetic":
        params, _ = datagen.synthetic_ground_truth(_generator_spec(g))
        return params
    if kind == "cosine":
        return datagen.cosine_ground_truth(
            g["sigma2"], g["stickiness"], g["recurrent_truth"])
    if kind == "bouncing_ball":
        return datagen.ball_ground_truth(
            g["box_size"], g["speed"], g["process_noise"])
    raise ConfigError(f"unknown generator kind {kind!r}")


def cmd_generate(cfg, out):
    g = cfg["generator"]
    kind = g["kind"]
    if kind == "synthetic":
        result = datagen.gen_synthetic(_generator_spec(g))
        datagen.write_dataset(out, result.train)
        datagen.write_dataset(_test_path(out), result.test)
        _emit({"written": out, "n": result.train.n_sequences,
               "test_written": _test_path(out),
               "test_n": result.test.n_sequences})
    elif kind == "cosine":
        ds, _ = datagen.gen_cosine_toy(
            g["sigma2"], g["seq_length"], g["n_train"], g["stickiness"],
            g["seed"], g["recurrent_truth"])
        datagen.write_dataset(out, ds)
        _emit({"written": out, "n": ds.n_sequences})
    elif kind == "bouncing_ball":
        ds, _ = datagen.gen_bouncing_ball_state(
            g["box_size"], g["speed"], g["seq_length"], g["n_train"],
            g["process_noise"], g["seed"], g["emit_net"])
        datagen.write_dataset(out, ds)
        _emit({"written": out, "n": ds.n_sequences})
    else:
        raise ConfigError(f"unknown generator kind {kind!r}")
    return 0


def _check_dims(model, dataset):
    n = dataset.x.shape[2]
    if model.flow.n != n:
        raise ConfigError(
            f"model dimension {model.flow.n} != data dimension {n}")


def cmd_train(cfg, data_path, out, resume=None, threads=1,
              deterministic=False):
    dataset = datagen.read_dataset(data_path)
    if resume:
        model, model_cfg, _, state = load_checkpoint(resume)
        if state is None:
            raise DataFormatError("checkpoint has no training state to resume")
        desc = cfg.section_text("model")
    else:
        model = build_model(cfg["model"])
        state = None
        desc = cfg.section_text("model")
        model_cfg = cfg["model"]
    _check_dims(model, dataset)
    if model.rmsm.dim != model_cfg["m"]:
        raise ConfigError("checkpoint/model latent dimension mismatch")
    config = train_config_from(cfg)
    n_threads = 1 if deterministic else max(1, threads)
    log_path = out + ".log"
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8")

    def log_cb(epoch, loglik, grad_norm, occupancy):
        occ = ",".join(f"{v:.4f}" for v in occupancy)
        log_fh.write(f"epoch={epoch} loglik={loglik:.6f} "
                     f"grad_norm={grad_norm:.6e} occupancy={occ}\n")
        log_fh.flush()

    def ckpt_cb(current_model, current_state):
        save_checkpoint(out, current_model, desc, state=current_state)

    try:
        trained, report = trainer.fit(
            dataset, config, model, n_threads=n_threads,
            checkpoint_callback=ckpt_cb, log_callback=log_cb, resume=state)
    except DivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(out, exc.last_good, desc)
        log_fh.write("diverged=true\n")
        log_fh.close()
        print(f"error: {exc}", file=sys.stderr)
        return 3
    log_fh.close()
    save_checkpoint(out, trained, desc, state=report.final_state)
    final_ll = report.epoch_loglik[-1] if report.epoch_loglik else float("nan")
    _emit({"checkpoint": out, "log": log_path,
           "epochs": config.epochs, "loglik_per_step": f"{final_ll:.6f}"})
    return 0


def _extract_latents(model, x, batch_rows=65536):
    N, T, n = x.shape
    rows = x.reshape(N * T, n)
    zs, lds = [], []
    for lo in range(0, rows.shape[0], batch_rows):
        z_rows, _, ld = model.flow.inverse(rows[lo:lo + batch_rows])
        zs.append(z_rows)
        lds.append(ld)
    z = np.concatenate(zs).reshape(N, T, model.flow.latent_dim)
    logdet = np.concatenate(lds).reshape(N, T)
    return z, logdet


def cmd_eval(checkpoint, data_path):
    model, _, _, _ = load_checkpoint(checkpoint)
    dataset = datagen.read_dataset(data_path)
    _check_dims(model, dataset)
    N, T, _ = dataset.x.shape
    z, logdet = _extract_latents(model, dataset.x)
    _, _, _, _, gamma, _, ll = rmsm_mod.batch_forward_backward(model.rmsm, z)
    labels = np.argmax(gamma, axis=2)
    total_ll = float(ll.sum() + logdet.sum())
    report = {"sequences": N, "loglik_per_step": f"{total_ll / (N * T):.6f}"}
    if dataset.z is not None and dataset.z.shape[2] == z.shape[2]:
        score, _ = metrics.mcc(z, dataset.z)
        report["mcc"] = f"{score:.4f}"
    else:
        report["mcc"] = "skipped"
    if dataset.s is not None:
        score, _ = metrics.regime_f1(labels, dataset.s, model.rmsm.n_regimes)
        report["regime_f1"] = f"{score:.4f}"
    else:
        report["regime_f1"] = "skipped"
    _emit(report)
    return 0


def cmd_theory(cfg, checkpoint=None):
    if checkpoint:
        model, _, _, _ = load_checkpoint(checkpoint)
        params = model.rmsm
    else:
        params = ground_truth_from_config(cfg)
    t = cfg["theory"]
    rng = np.random.Generator(np.random.PCG64(0))
    probes = rng.uniform(t["probe_lo"], t["probe_hi"],
                         size=(t["probe_count"], params.dim))
    report = theory.check_assumptions(params, probes)
    point = np.array([float(v) for v in t["margin_point"].split(",")])
    if point.shape != (params.dim,):
        point = np.full(params.dim, point.flat[0])
    margins = [theory.gaussian_margin(params, point, k)
               for k in range(params.n_regimes)]
    rec = {
        "min_stay": f"{report.min_stay_probability:.6f}",
        "implied_stickiness": f"{report.implied_stickiness:.6f}",
        "sticky_ok": report.sticky_ok,
        "covariance_separation": ",".join(
            str(r.satisfied) for r in report.covariance_separation),
        "max_abs_jacobian_det": f"{report.max_abs_jacobian_det:.6e}",
        "nondegenerate_ok": report.nondegenerate_ok,
        "min_ratio_column_distance": f"{report.min_column_distance:.6e}",
        "distinct_columns_ok": report.distinct_columns_ok,
        "margins_at_point": ",".join(f"{v:.4f}" for v in margins),
    }
    margin = t["dominance_margin"]
    if margin is None:
        margin = margins[t["margin_regime"]]
    odds = t["initial_odds"]
    if odds is None:
        odds = params.n_regimes - 1.0
    if margin > 0 and odds > 0:
        dom = theory.dominance_horizon(odds, margin, t["dominance_stickiness"])
        rec.update({
            "dominance_margin": f"{dom.margin:.4f}",
            "dominance_horizon": "unreachable" if dom.unreachable
            else dom.horizon,
            "one_step": dom.one_step,
            "odds_floor": "inf" if dom.unreachable else f"{dom.odds_floor:.6f}",
        })
    cov_path = t["covariances"]
    if cov_path:
        covs = np.load(cov_path)
        if covs.ndim != 3:
            raise DataFormatError("covariances file must hold a (K, m, m) array")
        result = theory.recover_disentanglement(list(covs))
        rec.update({
            "disentangle_blocks": ";".join(
                ",".join(str(i) for i in b) for b in result.blocks),
            "disentangle_full": result.full,
            "disentangle_residual": f"{result.residual:.3e}",
        })
    _emit(rec)
    return 0


def cmd_forecast(cfg, checkpoint, data_path, out=None):
    model, _, _, _ = load_checkpoint(checkpoint)
    dataset = datagen.read_dataset(data_path)
    _check_dims(model, dataset)
    f = cfg["forecast"]
    context, horizon = f["context"], f["horizon"]
    if context < 1:
        raise ConfigError("forecast.context must be >= 1")
    N, T, n = dataset.x.shape
    if horizon == 0:
        if out:
            datagen.write_dataset(out, datagen.Dataset(
                x=np.empty((N, 0, n)), metadata={"generator": "forecast"}))
        _emit({"sequences": N, "horizon": 0, "mse": "nan"})
        return 0
    usable = T >= context + horizon
    preds = np.empty((N, horizon, n))
    pred_labels = np.empty((N, horizon), dtype=np.uint32)
    mses = []
    f1_parts_est, f1_parts_true = [], []
    skipped = 0
    for i in range(N):
        if not usable:
            skipped += 1
            continue
        ctx_rows = dataset.x[i, :context]
        z_ctx, _, _ = model.flow.inverse(ctx_rows)
        result = rmsm_mod.forecast(model.rmsm, z_ctx, horizon,
                                   mode=f["mode"], n_samples=f["n_samples"],
                                   seed=f["seed"] + i)
        eps = np.zeros((horizon, model.flow.noise_dim))
        x_hat, _ = model.flow.forward(result.z, eps)
        preds[i] = x_hat
        pred_labels[i] = result.regimes
        truth = dataset.x[i, context:context + horizon]
        _, mse = metrics.forecast_error(x_hat, truth)
        mses.append(mse)
        if dataset.s is not None:
            f1_parts_est.append(result.regimes)
            f1_parts_true.append(dataset.s[i, context:context + horizon])
    report = {"sequences": N, "skipped": skipped, "horizon": horizon,
              "context": context,
              "mse": f"{np.mean(mses):.6f}" if mses else "nan"}
    if f1_parts_est:
        score, _ = metrics.regime_f1(np.concatenate(f1_parts_est),
                                     np.concatenate(f1_parts_true),
                                     model.rmsm.n_regimes)
        report["pred_regime_f1"] = f"{score:.4f}"
    if out and usable:
        datagen.write_dataset(out, datagen.Dataset(
            x=preds, s=pred_labels,
            metadata={"generator": "forecast", "K": str(model.rmsm.n_regimes),
                      "context": str(context), "horizon": str(horizon),
                      "mode": f["mode"], "source": str(data_path)}))
        report["written"] = out
    _emit(report)
    return 0


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _apply_overrides(cfg, extras, seed=None):
    for token in extras:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"unrecognized argument {token!r}")
        dotted, _, value = token[2:].partition("=")
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override must look like --section.key=value, "
                              f"got {token!r}")
        cfg.set(section, key, value)
    if seed is not None:
        for section in ("generator", "train", "forecast"):
            cfg.set(section, "seed", str(seed))


def main(argv=None):
    level = os.environ.get("RSDS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = _Parser(prog="rsds", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "theory", "forecast"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=name in ("generate", "train"),
                       help="run configuration file")
        p.add_argument("--data", help="dataset path")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override all run seeds")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--deterministic", action="store_true",
                       help="force sequential reduction")
        p.add_argument("--checkpoint", help="model checkpoint path")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")

    try:
        args, extras = parser.parse_known_args(argv)
        cfg = RunConfig.load(args.config) if args.config \
            else RunConfig.defaults()
        _apply_overrides(cfg, extras, args.seed)
        if args.command == "generate":
            if not args.out:
                raise ConfigError("generate needs --out")
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            if not args.data or not args.out:
                raise ConfigError("train needs --data and --out")
            return cmd_train(cfg, args.data, args.out,
                             resume=getattr(args, "resume", None),
                             threads=args.threads,
                             deterministic=args.deterministic)
        if args.command == "eval":
            if not args.checkpoint or not args.data:
                raise ConfigError("eval needs --checkpoint and --data")
            return cmd_eval(args.checkpoint, args.data)
        if args.command == "theory":
            return cmd_theory(cfg, checkpoint=args.checkpoint)
        if args.command == "forecast":
            if not args.checkpoint or not args.data:
                raise ConfigError("forecast needs --checkpoint and --data")
            return cmd_forecast(cfg, args.checkpoint, args.data, out=args.out)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, ContractViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
