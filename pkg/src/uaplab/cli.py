"""Command-line pipeline: dataset generation, victim training, perturbation
optimization, retrieval evaluation, ablation sweeps, and report aggregation.

Stages hand off through files (dataset container, checkpoint, perturbation
artifact, report JSON, sweep CSV), so every experiment is a reproducible
shell script. All commands validate their inputs fully before writing
anything; outputs are written atomically and are byte-identical across
reruns of the same config (timing fields excepted; see --no-timing).
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time

import numpy as np

from . import attack as attack_mod
from . import evaluation, synthdata, toyvlp
from .attack import AttackConfig, AttackError
from .evaluation import EvalError, SweepSpec
from .jsonio import write_csv
from .synthdata import AugSpec, DatasetError
from .toyvlp import CheckpointError, TrainConfig, TrainingError


class ConfigError(ValueError):
    """One or more invalid config entries; message lists all of them."""


def _parse_fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


_SCHEMA = {
    "data": {"seed": int, "n_train": int, "n_test": int},
    "train": {"lr": float, "momentum": float, "batch": int, "epochs": int,
              "seed": int},
    "attack": {"eps_v": _parse_fraction, "eps_t": int, "alpha": float,
               "beta": float, "epochs": int, "batch": int, "seed": int,
               "aug": AugSpec.parse, "text_step_scale": float},
    "eval": {"text_mode": str, "probe_seed": int},
    "sweep": {"param": str, "values": str, "seeds": str},
}


def load_config(path) -> dict:
    """Parse the key=value config, rejecting unknown sections/keys and bad
    values all at once."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    problems = []
    out = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"[{section}] unknown section")
            continue
        out[section] = {}
        for key, raw in parser.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                problems.append(f"[{section}] {key}: unknown key")
                continue
            try:
                out[section][key] = conv(raw)
            except (ValueError, DatasetError) as exc:
                problems.append(f"[{section}] {key}={raw!r}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return out


def _maybe_config(path) -> dict:
    return load_config(path) if path else {}


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _attack_config(cfg: dict) -> AttackConfig:
    return AttackConfig(**cfg.get("attack", {}))


def _data_args(cfg: dict):
    d = cfg.get("data", {})
    return d.get("seed", 42), d.get("n_train", 2048), d.get("n_test", 96)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _maybe_config(args.config)
    seed, n_train, n_test = _data_args(cfg)
    train, test = synthdata.generate_dataset(seed, n_train, n_test)
    synthdata.save_dataset(train, test, args.out)
    print(f"wrote {args.out}: {len(train)} train + {len(test)} test pairs (seed {seed})")
    return 0


def cmd_train(args):
    cfg = _maybe_config(args.config)
    tcfg = _train_config(cfg)
    tcfg.validate()
    train_set, test_set = synthdata.load_dataset(args.data)
    params = toyvlp.init_params(tcfg.seed)
    trained, curve = toyvlp.train(params, train_set, tcfg)
    toyvlp.save_checkpoint(trained, args.out)
    tr1 = ir1 = float("nan")
    if len(test_set) >= 1:
        tr1, ir1 = evaluation.recall_at_k(trained, test_set, None, 1)
    print(f"wrote {args.out}: loss {curve[0]:.4f} -> {curve[-1]:.4f}, "
          f"held-out R@1 {tr1:.3f}/{ir1:.3f}")
    return 0


def cmd_attack(args):
    cfg = _maybe_config(args.config)
    acfg = _attack_config(cfg)
    acfg.validate()
    train_set, _ = synthdata.load_dataset(args.data)
    params = toyvlp.load_checkpoint(args.model)
    runner = (attack_mod.do_uap if args.method == "do-uap"
              else attack_mod.generator_baseline)
    t0 = time.perf_counter()
    uap, log = runner(params, train_set, acfg)
    wall = time.perf_counter() - t0
    recorded = 0.0 if args.no_timing else wall
    attack_mod.save_uap(uap, acfg, recorded, len(log), args.method, args.out)
    per_iter = wall / max(1, len(log))
    print(f"wrote {args.out}: method {args.method}, {len(log)} iterations, "
          f"{wall:.2f}s total ({per_iter*1e3:.1f} ms/iter), "
          f"token {uap.delta_t_token}")
    return 0


def cmd_eval(args):
    cfg = _maybe_config(args.config)
    ecfg = cfg.get("eval", {})
    text_mode = args.text_mode or ecfg.get("text_mode", "token")
    probe_seed = ecfg.get("probe_seed", 0)
    _, test_set = synthdata.load_dataset(args.data)
    if len(test_set) < max(evaluation.K_VALUES):
        raise EvalError(f"test split has {len(test_set)} pairs; need at least "
                        f"{max(evaluation.K_VALUES)} for R@K")
    params = toyvlp.load_checkpoint(args.model)
    uap, meta = attack_mod.load_uap(args.uap)
    wall = 0.0 if args.no_timing else float(meta["wallclock_seconds"])
    report = evaluation.evaluate(
        params, test_set, uap,
        config_echo={k: meta[k] for k in ("method", "eps_v", "alpha", "beta",
                                          "epochs", "seed", "aug", "iterations")},
        wallclock_attack_seconds=wall,
        probe_aug=AugSpec.from_dict(meta["aug"]) if meta["aug"]["kind"] != "none"
        else AugSpec.brightness(0.0, 0.05),
        seed=int(meta["seed"]), text_mode=text_mode)
    evaluation.save_report(report, args.out)
    print(f"wrote {args.out}: clean R@1 {report['r_at1_tr_clean']:.3f}/"
          f"{report['r_at1_ir_clean']:.3f}, ASR@1 "
          f"{report['asr_at1_tr']}/{report['asr_at1_ir']}, "
          f"control ASR {report['control_asr_at1_tr']}")
    return 0


def cmd_ablate(args):
    cfg = _maybe_config(args.config)
    acfg = _attack_config(cfg)
    acfg.validate()
    sweep_cfg = cfg.get("sweep", {})
    param = args.param or sweep_cfg.get("param")
    values_text = args.values or sweep_cfg.get("values")
    seeds_text = args.seeds or sweep_cfg.get("seeds")
    missing = [n for n, v in (("param", param), ("values", values_text),
                              ("seeds", seeds_text)) if not v]
    if missing:
        raise ConfigError(f"ablate needs {', '.join(missing)} via flags or the "
                          f"[sweep] config section")
    raw_values = [v for v in str(values_text).split(",") if v]
    if param == "aug":
        values = [AugSpec.parse(v) for v in raw_values]
    else:
        values = [_parse_fraction(v) for v in raw_values]
    seeds = [int(s) for s in str(seeds_text).split(",") if s]
    spec = SweepSpec(param=param, values=values, seeds=seeds)
    spec.validate()
    train_set, test_set = synthdata.load_dataset(args.data)
    params = toyvlp.load_checkpoint(args.model)

    def progress(par, value, seed, mean_asr):
        print(f"  {par}={value} seed={seed}: mean ASR@1 {mean_asr:.4f}")

    rows = evaluation.run_sweep(params, train_set, test_set, spec, acfg,
                                method=args.method, progress=progress)
    if args.no_timing:
        for row in rows:
            row["wallclock"] = 0.0
    evaluation.save_sweep(rows, args.out)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def cmd_report(args):
    import json

    header = ("input", "seed", "r_at1_tr_clean", "r_at1_ir_clean",
              "r_at1_tr_adv", "r_at1_ir_adv", "asr_at1_tr", "asr_at1_ir",
              "mean_asr_at1", "wallclock_attack_seconds")
    rows = []
    numeric = []
    for path in args.inputs:
        with open(path, encoding="utf-8") as f:
            rep = json.load(f)
        missing = [k for k in header[2:] if k not in rep and k != "mean_asr_at1"]
        if missing:
            raise EvalError(f"{path}: report missing fields {missing}")
        tr, ir = rep["asr_at1_tr"], rep["asr_at1_ir"]
        mean_asr = None if tr is None or ir is None else 0.5 * (tr + ir)
        row = [path, rep.get("seed"), rep["r_at1_tr_clean"], rep["r_at1_ir_clean"],
               rep["r_at1_tr_adv"], rep["r_at1_ir_adv"], tr, ir, mean_asr,
               rep["wallclock_attack_seconds"]]
        rows.append(row)
        numeric.append([v if isinstance(v, (int, float)) else np.nan
                        for v in row[2:]])
    arr = np.array(numeric, dtype=float)
    with np.errstate(invalid="ignore"):
        means = np.nanmean(arr, axis=0)
        sds = np.nanstd(arr, axis=0, ddof=1) if len(rows) > 1 else np.zeros(arr.shape[1])
    rows.append(["mean", ""] + [float(v) for v in means])
    rows.append(["sd", ""] + [float(v) for v in sds])
    write_csv(args.out, header, rows)
    print(f"wrote {args.out}: {len(args.inputs)} reports aggregated")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="uaplab",
        description="Universal image+text perturbation lab: train a toy "
                    "dual-encoder retrieval model, optimize a fixed "
                    "perturbation pair against it, and measure attack "
                    "success on image-text retrieval.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic image-caption dataset")
    p.add_argument("--config", help="config file; [data] keys seed/n_train/n_test "
                                    "(defaults 42/2048/96)")
    p.add_argument("--out", required=True, help="output dataset container")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the victim dual encoder")
    p.add_argument("--config", help="config file; [train] keys lr/momentum/batch/"
                                    "epochs/seed (defaults 0.05/0.9/64/30/42)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="optimize the universal perturbation pair")
    p.add_argument("--config", help="config file; [attack] keys eps_v/alpha/beta/"
                                    "epochs/batch/seed/aug/text_step_scale "
                                    "(defaults 12/255, 1, 0.1, 2, 64, 42, "
                                    "brightness:0:0.05, auto)")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output perturbation artifact JSON")
    p.add_argument("--method", choices=("do-uap", "generator"), default="do-uap",
                   help="direct optimization or the generator baseline")
    p.add_argument("--no-timing", action="store_true",
                   help="record wallclock_seconds as 0 for byte-reproducible output")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="retrieval report for a perturbation artifact")
    p.add_argument("--config", help="config file; [eval] keys text_mode/probe_seed")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--uap", required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--text-mode", choices=("token", "embed"),
                   help="substitute the projected token (default) or override "
                        "the embedding directly")
    p.add_argument("--no-timing", action="store_true",
                   help="zero the copied timing field for byte-reproducible output")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one attack parameter over seeds")
    p.add_argument("--config", help="base attack config")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--param", choices=evaluation.SWEEP_PARAMS,
                   help="swept parameter; falls back to the [sweep] section")
    p.add_argument("--values",
                   help="comma list; numbers accept a/b fractions, aug accepts "
                        "kind[:args] strings")
    p.add_argument("--seeds", help="comma list of attack seeds")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--method", choices=("do-uap", "generator"), default="do-uap")
    p.add_argument("--no-timing", action="store_true",
                   help="zero wallclock columns for byte-reproducible output")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="aggregate report JSONs into one CSV table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


_ERRORS = (ConfigError, DatasetError, CheckpointError, TrainingError,
           AttackError, EvalError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        kind = type(exc).__name__
        detail = " ".join(str(exc).split())
        print(f"error: {kind}: {detail}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
