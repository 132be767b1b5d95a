"""Command-line interface.

Subcommands
-----------
gen-data       generate a labeled/unlabeled/test split and save it as CSV
train          run one training configuration and record per-step metrics
compare        grid of algorithm x label-budget x seed runs with a summary table
theory-verify  convergence-bound checks on a constructed quadratic problem
plot-data      turn metrics.csv files into plain two-column .dat series

Configuration is JSON (``--config file.json``) merged over built-in
defaults, then ``--set dotted.key=value`` overrides on top.  Unknown
keys are rejected.  Every command writes ``resolved-config.json`` into
its output directory so a run can be reproduced exactly.

Exit codes: 0 success, 2 configuration error, 3 divergence during
training, 4 infeasible theory constants.
"""

import argparse
import copy
import json
import math
import os
import shutil
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dash, data, models, theory
from .augment import AugmentPolicy
from .errors import ConfigError, DashError, DivergenceError, InfeasibleConstantsError

OUT_ENV_VAR = "DASHSSL_OUT"

_DATA_DEFAULTS = {
    "kind": "two-moons",
    "n": 1008,
    "noise": 0.08,
    "num_classes": 2,
    "dim": 2,
    "separation": 4.0,
    "test_n": 512,
    "labels_per_class": 4,
    "q": 0.8,
    "ood_kind": "label-flip",
    "ood_offset": 0.0,
    "load_dir": None,
}

_TRAIN_DEFAULTS = {
    "seed": 0,
    "algorithm": "dash",
    "mode": "practice",
    "data": dict(_DATA_DEFAULTS),
    "model": {"arch": "mlp-1hidden", "hidden": 32},
    "train": {
        "epochs": 45,
        "T": 0,
        "m": 64,
        "eta": 0.2,
        "T0": 0,
        "m0": 64,
        "eta0": 0.2,
        "lambda_u": 1.0,
        "gradient_form": "unlabeled-only",
        "sharpen_temperature": 0.5,
        "lr_schedule": "cosine",
        "weight_decay": 0.0,
        "momentum": 0.9,
        "tau": 0.95,
        "n_cap": dash.DEFAULT_N_CAP,
        "smoothness": None,
    },
    "schedule": {
        "C": 3.0,
        "gamma": 1.27,
        "rho_hat": None,
        "floor": 0.05,
        "activation_epoch": 10,
        "decay_every_epochs": 9,
    },
    "augment": {"weak_noise": 0.05, "strong_noise": 0.15, "strong_mask_prob": 0.05},
}

_COMPARE_DEFAULTS = {
    "algorithms": ["dash", "fixmatch", "pl", "dash-pl"],
    "label_budgets": [4],
    "seeds": [0, 1, 2, 3, 4],
    "base": copy.deepcopy(_TRAIN_DEFAULTS),
}

_THEORY_DEFAULTS = {
    "problem": {"d": 10, "mu": 0.5, "L": 2.0, "R": 1.0,
                "noise_scale": 0.1, "seed": 0},
    "q_dist": {"kind": "shifted-minimizer", "offset": 2.0, "factor": 100.0},
    "constants": {
        "mode": "derive",
        "a": 0.5, "b": 1e-4, "theta": 1.0, "delta": 0.1, "q": 0.8,
        "C": 2.0, "eta0": 0.5, "eta": 0.5, "F0": 1.0,
        "manual": None,
    },
    "T": 12,
    "seeds": 20,
    "thresholded": True,
}

_GEN_DATA_DEFAULTS = {"seed": 0, "data": dict(_DATA_DEFAULTS)}

_DEFAULTS = {
    "gen-data": _GEN_DATA_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
    "compare": _COMPARE_DEFAULTS,
    "theory-verify": _THEORY_DEFAULTS,
}


# ---------------------------------------------------------------------------
# configuration plumbing

def _merge(defaults: Dict, override: Dict, path: str = "") -> Dict:
    """Deep-merge override onto defaults, rejecting keys not in defaults."""
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _apply_set(cfg: Dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects dotted.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def _load_config(command: str, config_path: Optional[str],
                 assignments: Sequence[str]) -> Dict:
    cfg = copy.deepcopy(_DEFAULTS[command])
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a JSON object")
        cfg = _merge(cfg, loaded)
    for assignment in assignments:
        _apply_set(cfg, assignment)
    return cfg


def _resolve_out(out: str) -> str:
    root = os.environ.get(OUT_ENV_VAR)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return os.path.abspath(out)


def _prepare_out_dir(out: str, overwrite: bool) -> str:
    out = _resolve_out(out)
    if os.path.exists(out):
        if not os.path.isdir(out):
            raise ConfigError(f"output path exists and is not a directory: {out}")
        if os.listdir(out):
            if not overwrite:
                raise ConfigError(
                    f"output directory {out} is not empty (use --overwrite)")
            shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved_config(out: str, cfg: Dict) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    with open(os.path.join(out, "resolved-config.json"), "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_series(path: str, xs: Sequence, ys: Sequence) -> None:
    lines = [f"{x} {data._fmt(y)}" for x, y in zip(xs, ys)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dataset construction

def _build_bundle(data_cfg: Dict, seed: int) -> data.DatasetBundle:
    if data_cfg.get("load_dir"):
        return data.load_bundle(data_cfg["load_dir"])
    kind = data_cfg["kind"]
    n = int(data_cfg["n"])
    test_n = int(data_cfg["test_n"])
    if kind == "two-moons":
        pool = data.make_two_moons(n, data_cfg["noise"], seed)
        test = data.make_two_moons(test_n, data_cfg["noise"], seed + 1)
    elif kind == "blobs":
        pool = data.make_blobs(n, int(data_cfg["num_classes"]),
                               int(data_cfg["dim"]), data_cfg["separation"],
                               data_cfg["noise"], seed)
        test = data.make_blobs(test_n, int(data_cfg["num_classes"]),
                               int(data_cfg["dim"]), data_cfg["separation"],
                               data_cfg["noise"], seed + 1)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    spec = data.SplitSpec(labels_per_class=int(data_cfg["labels_per_class"]),
                          q=float(data_cfg["q"]),
                          ood_kind=data_cfg["ood_kind"],
                          ood_offset=float(data_cfg["ood_offset"]))
    return data.split_ssl(pool, spec, seed + 2, test=test)


def _build_dash_config(cfg: Dict, steps_per_epoch: int, n_unlabeled: int
                       ) -> dash.DashConfig:
    t_cfg, s_cfg, a_cfg = cfg["train"], cfg["schedule"], cfg["augment"]
    epochs = int(t_cfg["epochs"])
    if cfg["mode"] == dash.MODE_PRACTICE and epochs > 0:
        total_steps = epochs * steps_per_epoch
    else:
        total_steps = int(t_cfg["T"])
    if total_steps < 1:
        raise ConfigError("train.epochs or train.T must give at least one step")
    schedule = dash.ThresholdSchedule(
        C=float(s_cfg["C"]), gamma=float(s_cfg["gamma"]),
        rho_hat=None if s_cfg["rho_hat"] is None else float(s_cfg["rho_hat"]),
        floor=float(s_cfg["floor"]),
        activation_epoch=int(s_cfg["activation_epoch"]),
        decay_every_epochs=(None if s_cfg["decay_every_epochs"] is None
                            else int(s_cfg["decay_every_epochs"])),
        steps_per_epoch=steps_per_epoch)
    policy = AugmentPolicy(weak_noise=float(a_cfg["weak_noise"]),
                           strong_noise=float(a_cfg["strong_noise"]),
                           strong_mask_prob=float(a_cfg["strong_mask_prob"]))
    smooth = t_cfg["smoothness"]
    return dash.DashConfig(
        mode=cfg["mode"], algorithm=cfg["algorithm"], schedule=schedule,
        T0=int(t_cfg["T0"]), m0=int(t_cfg["m0"]), eta0=float(t_cfg["eta0"]),
        T=total_steps, m=int(t_cfg["m"]), eta=float(t_cfg["eta"]),
        lambda_u=float(t_cfg["lambda_u"]),
        gradient_form=t_cfg["gradient_form"],
        sharpen_temperature=float(t_cfg["sharpen_temperature"]),
        lr_schedule=t_cfg["lr_schedule"],
        weight_decay=float(t_cfg["weight_decay"]),
        momentum=float(t_cfg["momentum"]), tau=float(t_cfg["tau"]),
        seed=int(cfg["seed"]) + 2, n_cap=int(t_cfg["n_cap"]),
        smoothness=None if smooth is None else float(smooth),
        augment=policy)


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load_config("gen-data", args.config, args.set or [])
    bundle = _build_bundle(cfg["data"], int(cfg["seed"]))
    out = _prepare_out_dir(args.out, args.overwrite)
    _write_resolved_config(out, cfg)
    data.save_bundle(bundle, out)
    print(f"wrote {len(bundle.labeled)} labeled / {len(bundle.unlabeled)} "
          f"unlabeled / {len(bundle.test)} test examples to {out}")
    return 0


def _run_train(cfg: Dict, out: str, overwrite: bool) -> Dict:
    seed = int(cfg["seed"])
    bundle = _build_bundle(cfg["data"], seed)
    m = int(cfg["train"]["m"])
    if m < 1:
        raise ConfigError("train.m must be >= 1")
    if cfg["mode"] == dash.MODE_PRACTICE:
        steps_per_epoch = max(1, math.ceil(len(bundle.unlabeled) / m))
    else:
        steps_per_epoch = 1
    config = _build_dash_config(cfg, steps_per_epoch, len(bundle.unlabeled))
    model = models.init_model(cfg["model"]["arch"], bundle.input_dim,
                              bundle.num_classes,
                              hidden=int(cfg["model"]["hidden"]),
                              seed=seed + 1)
    out = _prepare_out_dir(out, overwrite)
    try:
        trained, stats, log = dash.dash_train(bundle, config, model)
        _write_resolved_config(out, cfg)
        dash.write_metrics_csv(stats, os.path.join(out, "metrics.csv"))
        dash.save_checkpoint(trained.params, os.path.join(out, "checkpoint.bin"))
    except DashError:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return log


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config("train", args.config, args.set or [])
    log = _run_train(cfg, args.out, args.overwrite)
    print(f"final test error {log['final_test_error']:.4f}, "
          f"labeled loss {log['final_labeled_loss']:.4f} "
          f"({log['steps']} steps)")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load_config("compare", args.config, args.set or [])
    algorithms = list(cfg["algorithms"])
    budgets = [int(b) for b in cfg["label_budgets"]]
    seeds = [int(s) for s in cfg["seeds"]]
    if not algorithms or not budgets or not seeds:
        raise ConfigError("algorithms, label_budgets and seeds must be non-empty")
    for algo in algorithms:
        if algo not in dash.ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algo!r}")
    out = _prepare_out_dir(args.out, args.overwrite)
    _write_resolved_config(out, cfg)

    results: Dict[tuple, List[float]] = {}
    for algo in algorithms:
        for budget in budgets:
            errs = []
            for seed in seeds:
                run_cfg = copy.deepcopy(cfg["base"])
                run_cfg["algorithm"] = algo
                run_cfg["seed"] = seed
                run_cfg["data"]["labels_per_class"] = budget
                run_dir = os.path.join(out, "runs", f"{algo}-{budget}-s{seed}")
                log = _run_train(run_cfg, run_dir, overwrite=True)
                errs.append(log["final_test_error"])
                print(f"{algo} budget={budget} seed={seed}: "
                      f"test error {log['final_test_error']:.4f}")
            results[(algo, budget)] = errs

    csv_lines = ["algorithm,labels_per_class,mean_test_error,std_test_error,n_seeds"]
    txt_lines = [f"{'algorithm':<10} {'labels':>6}  test error (mean +/- std, "
                 f"{len(seeds)} seeds)"]
    for algo in algorithms:
        for budget in budgets:
            errs = np.array(results[(algo, budget)])
            mean, std = float(errs.mean()), float(errs.std())
            csv_lines.append(f"{algo},{budget},{data._fmt(mean)},{data._fmt(std)},"
                             f"{len(seeds)}")
            txt_lines.append(f"{algo:<10} {budget:>6}  {mean:.4f} +/- {std:.4f}")
    with open(os.path.join(out, "table.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    table = "\n".join(txt_lines) + "\n"
    with open(os.path.join(out, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _build_constants(cfg: Dict, problem: theory.PLProblem) -> theory.TheoryConstants:
    c_cfg = cfg["constants"]
    if c_cfg["manual"] is not None:
        try:
            return theory.TheoryConstants(**c_cfg["manual"])
        except TypeError as exc:
            raise ConfigError(f"bad manual constants: {exc}")
    if c_cfg["mode"] != "derive":
        raise ConfigError("constants.mode must be 'derive' or constants.manual set")
    return theory.derive_constants(
        G=problem.grad_bound, L=problem.smoothness, mu=problem.mu,
        a=float(c_cfg["a"]), b=float(c_cfg["b"]), theta=float(c_cfg["theta"]),
        delta=float(c_cfg["delta"]), q=float(c_cfg["q"]), C=float(c_cfg["C"]),
        eta0=float(c_cfg["eta0"]), eta=float(c_cfg["eta"]), F0=float(c_cfg["F0"]))


def _cmd_theory_verify(args: argparse.Namespace) -> int:
    cfg = _load_config("theory-verify", args.config, args.set or [])
    p_cfg = cfg["problem"]
    problem = theory.make_pl_problem(
        int(p_cfg["d"]), float(p_cfg["mu"]), float(p_cfg["L"]),
        float(p_cfg["R"]), int(p_cfg["seed"]),
        noise_scale=float(p_cfg["noise_scale"]))
    q_cfg = cfg["q_dist"]
    if q_cfg["kind"] == "none":
        qdist = None
    else:
        qdist = theory.make_q_distribution(
            problem, q_cfg["kind"], offset=q_cfg["offset"],
            factor=float(q_cfg["factor"]))
    constants = _build_constants(cfg, problem)
    seeds_cfg = cfg["seeds"]
    if isinstance(seeds_cfg, int):
        seeds = list(range(seeds_cfg))
    else:
        seeds = [int(s) for s in seeds_cfg]
    T = int(cfg["T"])

    report = theory.verify_run(problem, qdist, constants, T, seeds,
                               thresholded=bool(cfg["thresholded"]))
    out = _prepare_out_dir(args.out, args.overwrite)
    _write_resolved_config(out, cfg)
    text = json.dumps(report.schema_dict(), indent=2, sort_keys=True) + "\n"
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(text)
    first = report.runs[0]
    _write_series(os.path.join(out, "envelope.dat"), first.steps, first.envelope)
    for run in report.runs:
        _write_series(os.path.join(out, f"F-s{run.seed}.dat"), run.steps, run.F)
        _write_series(os.path.join(out, f"A-s{run.seed}.dat"), run.steps,
                      [float(v) for v in run.A_rho])
        _write_series(os.path.join(out, f"B-s{run.seed}.dat"), run.steps,
                      [float(v) for v in run.B_rho])
    print(f"envelope {report.pass_envelope:.2f}, set-size lower "
          f"{report.pass_A:.2f}, upper {report.pass_B:.2f} "
          f"over {len(seeds)} seeds")
    return 0


def _epoch_series(cols: Dict[str, np.ndarray]):
    epochs = sorted(set(int(e) for e in cols["epoch"]))
    correct, wrong, rho, test_err = [], [], [], []
    order = np.argsort(cols["step"], kind="stable")
    epoch_col = cols["epoch"][order]
    for e in epochs:
        idx = order[epoch_col == e]
        correct.append(float(cols["n_sel_correct"][idx].sum()))
        wrong.append(float(cols["n_sel_wrong"][idx].sum()))
        rho.append(float(cols["rho_t"][idx[0]]))
        test_err.append(float(cols["test_error"][idx[-1]]))
    return epochs, correct, wrong, rho, test_err


def _cmd_plot_data(args: argparse.Namespace) -> int:
    parsed = []
    for run_dir in args.run_dirs:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.isfile(path):
            raise ConfigError(f"no metrics.csv in {run_dir}")
        cols = dash.read_metrics_csv(path)
        if cols["step"].size == 0:
            raise ConfigError(f"metrics.csv in {run_dir} has no rows")
        parsed.append((run_dir, _epoch_series(cols)))
    for run_dir, (epochs, correct, wrong, rho, test_err) in parsed:
        series_dir = os.path.join(run_dir, "series")
        os.makedirs(series_dir, exist_ok=True)
        _write_series(os.path.join(series_dir, "selected-correct.dat"),
                      epochs, correct)
        _write_series(os.path.join(series_dir, "selected-wrong.dat"),
                      epochs, wrong)
        _write_series(os.path.join(series_dir, "rho.dat"), epochs, rho)
        _write_series(os.path.join(series_dir, "test-error.dat"),
                      epochs, test_err)
        print(f"wrote 4 series for {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def _add_common(sub: argparse.ArgumentParser, needs_out: bool = True) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config value (dotted path, JSON value)")
    if needs_out:
        sub.add_argument("--out", required=True,
                         help=f"output directory (relative paths resolve "
                              f"against ${OUT_ENV_VAR} when set)")
        sub.add_argument("--overwrite", action="store_true",
                         help="replace an existing non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dashssl",
        description="semi-supervised training with a decaying selection threshold")
    subs = parser.add_subparsers(dest="command", required=True)

    _add_common(subs.add_parser("gen-data", help="generate and save a dataset"))
    _add_common(subs.add_parser("train", help="run one training configuration"))
    _add_common(subs.add_parser("compare", help="algorithm comparison grid"))
    _add_common(subs.add_parser("theory-verify",
                                help="check convergence bounds empirically"))
    plot = subs.add_parser("plot-data",
                           help="extract per-epoch .dat series from run dirs")
    plot.add_argument("run_dirs", nargs="+", metavar="RUNDIR",
                      help="training output directories containing metrics.csv")
    return parser


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "theory-verify": _cmd_theory_verify,
    "plot-data": _cmd_plot_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InfeasibleConstantsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
