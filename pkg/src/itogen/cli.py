"""Command-line pipeline: simulate datasets, train models, generate
paths, evaluate them, reproduce the benchmark comparison tables, and emit
plot files.

Every command is driven by a JSON config (see `config.DEFAULT_CONFIG`),
is idempotent given identical inputs and seeds, and writes a manifest
sufficient to re-execute it bit-identically. Exit codes: 0 success,
2 configuration error, 3 data error, 4 training/simulation divergence,
5 estimation-domain error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import DEFAULT_CONFIG, RunConfig
from .errors import ConfigError, DataError, ItogenError
from .evaluate import (EvalReport, compare_marginals, estimate_gbm,
                       estimate_ou, filter_invalid_gbm)
from .generate import (GenerationRun, default_truncation_level, generate,
                       save_generated)
from .losses import SCHEMES
from .sde import (ObservationSequence, PathDataset, load_dataset, observe,
                  save_dataset, simulate, split)
from .training import TrainConfig, load_bundle, save_bundle, train, \
    write_train_log
from .util import derive_seed

FLOAT_FMT = "%.17g"

PAPER_TABLE1 = {
    "true": (2.0, 0.3, None),
    "reference": (1.9841, 0.2941, 0),
    "base": (2.1478, 0.8154, 234),
    "joint-base": (2.0892, 0.2344, 0),
    "instant": (1.8717, 0.2575, 0),
    "joint-instant": (1.9619, 0.2974, 0),
    "joint-instant-1step": (1.9819, 0.2909, 0),
}

PAPER_TABLE2 = {
    "true": (2.0, 3.0, 1.0),
    "reference": (2.0213, 3.0060, 1.0091),
    "joint-instant": (2.1642, 3.0216, 1.0293),
}


def _write_manifest(out_dir: str, stage: str, cfg: RunConfig,
                    extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {"stage": stage, "version": __version__, "config": cfg.doc}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, f"{stage}_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _origin_history(x0: np.ndarray) -> ObservationSequence:
    d = len(x0)
    return ObservationSequence(time_indices=np.array([0]),
                               times=np.array([0.0]),
                               values=np.asarray(x0, dtype=float)[None, :],
                               masks=np.ones((1, d)))


# ---------------------------------------------------------------------------
# pipeline stages

def cmd_simulate(cfg: RunConfig) -> str:
    """Simulate, split, observe, and write the dataset directories."""
    out = cfg["out_dir"]
    spec = cfg.sde_spec()
    sim = cfg["sim"]
    ds = simulate(spec, sim["T"], sim["dt"], sim["n_paths"],
                  seed=derive_seed(cfg["seed"], "simulate"),
                  threads=cfg["threads"])
    train_ds, valid_ds = split(ds, cfg["split"]["fraction"], seed=cfg["seed"])
    p = cfg["observe"]["p"]
    coord_probs = cfg["observe"]["coord_probs"]
    train_obs = observe(train_ds, p, derive_seed(cfg["seed"], "observe-train"),
                        coord_probs)
    valid_obs = observe(valid_ds, p, derive_seed(cfg["seed"], "observe-valid"),
                        coord_probs)
    data_dir = os.path.join(out, "dataset")
    save_dataset(train_ds, os.path.join(data_dir, "train"), obs=train_obs,
                 extra_meta={"observe_p": p, "role": "train"})
    save_dataset(valid_ds, os.path.join(data_dir, "valid"), obs=valid_obs,
                 extra_meta={"observe_p": p, "role": "valid"})
    _write_manifest(out, "simulate", cfg)
    return data_dir


def _load_split(cfg: RunConfig):
    data_dir = os.path.join(cfg["out_dir"], "dataset")
    train_dir = os.path.join(data_dir, "train")
    valid_dir = os.path.join(data_dir, "valid")
    if not os.path.isdir(train_dir) or not os.path.isdir(valid_dir):
        raise DataError(f"missing dataset directories under {data_dir}; "
                        "run `itogen simulate` first")
    train_ds, train_obs = load_dataset(train_dir)
    valid_ds, valid_obs = load_dataset(valid_dir)
    if train_obs is None or valid_obs is None:
        raise DataError("dataset directories carry no observation files")
    return train_ds, train_obs, valid_ds, valid_obs


def cmd_train(cfg: RunConfig, progress: bool = False) -> str:
    """Train the configured scheme on the simulated dataset."""
    train_ds, train_obs, valid_ds, valid_obs = _load_split(cfg)
    t = cfg["train"]
    tc = TrainConfig(scheme=t["scheme"], epochs=t["epochs"],
                     batch_size=t["batch_size"], lr=t["lr"],
                     betas=tuple(t["betas"]), weight_decay=t["weight_decay"],
                     dropout=t["dropout"], latent_dim=t["latent_dim"],
                     hidden=t["hidden"], n_sub=t["n_sub"],
                     long_term_training=t["long_term_training"],
                     long_term_keep=t["long_term_keep"],
                     seed=derive_seed(cfg["seed"], f"train:{t['scheme']}"))
    cb = None
    if progress:
        cb = lambda role, epoch, tl, vl: print(
            f"[train {t['scheme']}/{role}] epoch {epoch}: "
            f"train {tl:.4f} valid {vl:.4f}", flush=True)
    bundle, logs = train(tc, train_obs, valid_obs, train_ds.times,
                         d=train_ds.dim, progress=cb)
    model_dir = os.path.join(cfg["out_dir"], "model", t["scheme"])
    save_bundle(bundle, model_dir)
    for role in bundle.roles():
        rows = [l for l in logs if l.role == role]
        name = "train_log.csv" if role == "joint" else f"train_log_{role}.csv"
        write_train_log(rows, os.path.join(model_dir, name))
    _write_manifest(model_dir, "train", cfg)
    return model_dir


def cmd_generate(cfg: RunConfig, checkpoint: Optional[str] = None) -> str:
    """Generate a path campaign from a trained checkpoint."""
    scheme = cfg["train"]["scheme"]
    model_dir = checkpoint or os.path.join(cfg["out_dir"], "model", scheme)
    bundle = load_bundle(model_dir)
    g = cfg["generate"]
    level = g["truncation"]
    if level is None:
        train_ds, train_obs, *_ = _load_split(cfg)
        level = default_truncation_level(train_obs, train_ds.times,
                                         train_ds.dim)
    run = GenerationRun(
        start_history=_origin_history(cfg.sde_spec().x0),
        delta=g["delta"], truncation=level, horizon=g["horizon"],
        n_paths=g["n_paths"],
        seed=derive_seed(cfg["seed"], f"generate:{bundle.scheme}"),
        record_estimates=g["record_estimates"])
    result = generate(bundle, run, grid_dt=cfg["sim"]["dt"])
    gen_dir = os.path.join(cfg["out_dir"], "generated", bundle.scheme)
    save_generated(result, gen_dir)
    _write_manifest(gen_dir, "generate", cfg)
    return gen_dir


def _estimates_for(cfg: RunConfig, ds: PathDataset
                   ) -> Tuple[Dict[str, float], int]:
    kind = cfg["sde"]["kind"]
    if kind == "gbm":
        valid, n_invalid = filter_invalid_gbm(ds)
        mu, sigma = estimate_gbm(valid)
        return {"mu": mu, "sigma": sigma}, n_invalid
    if kind == "ou":
        kappa, theta, sigma = estimate_ou(ds)
        return {"kappa": kappa, "theta": theta, "sigma": sigma}, 0
    raise ConfigError("evaluate: parameter estimation defined for gbm/ou "
                      "datasets only")


def cmd_evaluate(cfg: RunConfig,
                 dataset_dirs: Optional[Sequence[str]] = None) -> str:
    """Estimate parameters on the reference and generated datasets and
    compare marginal distributions."""
    train_dir = os.path.join(cfg["out_dir"], "dataset", "train")
    if not os.path.isdir(train_dir):
        raise DataError(f"missing reference dataset: {train_dir}")
    ref_ds, _ = load_dataset(train_dir)
    report = EvalReport()
    params, n_inv = _estimates_for(cfg, ref_ds)
    report.parameters["reference"] = params
    report.invalid_counts["reference"] = n_inv
    if dataset_dirs is None:
        gen_root = os.path.join(cfg["out_dir"], "generated")
        dataset_dirs = []
        if os.path.isdir(gen_root):
            dataset_dirs = [os.path.join(gen_root, name)
                            for name in sorted(os.listdir(gen_root))]
    for path in dataset_dirs:
        name = os.path.basename(os.path.normpath(path))
        ds, _ = load_dataset(path)
        meta = {}
        gen_meta = os.path.join(path, "gen_meta.json")
        if os.path.exists(gen_meta):
            with open(gen_meta) as fh:
                meta = json.load(fh)
        params, n_inv = _estimates_for(cfg, ds)
        report.parameters[name] = params
        report.invalid_counts[name] = n_inv + int(meta.get("n_invalid", 0))
        times = [t for t in cfg["evaluate"]["times"]
                 if ds.times[0] - 1e-9 <= t <= ds.times[-1] + 1e-9]
        if ds.dim == 1 and times:
            clean = ds
            if cfg["sde"]["kind"] == "gbm":
                clean, _ = filter_invalid_gbm(ds)
            for frag in compare_marginals(ref_ds, clean, times):
                frag.label = name
                report.marginals.append(frag)
    eval_dir = os.path.join(cfg["out_dir"], "eval")
    os.makedirs(eval_dir, exist_ok=True)
    report.save(os.path.join(eval_dir, "report.json"))
    with open(os.path.join(eval_dir, "params.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        names = sorted({k for v in report.parameters.values() for k in v})
        writer.writerow(["dataset"] + names + ["n_invalid"])
        for name in report.parameters:
            row = [name] + [FLOAT_FMT % report.parameters[name].get(k, np.nan)
                            for k in names]
            row.append(report.invalid_counts.get(name, 0))
            writer.writerow(row)
    with open(os.path.join(eval_dir, "marginals.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "time", "ks", "mean_ref", "mean_gen",
                         "var_ref", "var_gen"])
        for frag in report.marginals:
            writer.writerow([frag.label,
                             FLOAT_FMT % frag.time, FLOAT_FMT % frag.ks,
                             FLOAT_FMT % frag.mean_a, FLOAT_FMT % frag.mean_b,
                             FLOAT_FMT % frag.var_a, FLOAT_FMT % frag.var_b])
    with open(os.path.join(eval_dir, "histograms.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "time", "bin_left", "bin_right",
                         "count_ref", "count_gen"])
        for frag in report.marginals:
            for j in range(len(frag.hist_a)):
                writer.writerow([frag.label, FLOAT_FMT % frag.time,
                                 FLOAT_FMT % frag.bin_edges[j],
                                 FLOAT_FMT % frag.bin_edges[j + 1],
                                 int(frag.hist_a[j]), int(frag.hist_b[j])])
    _write_manifest(eval_dir, "evaluate", cfg)
    return eval_dir


def cmd_plot(cfg: RunConfig) -> str:
    """Best-effort SVG figures: path overlays, marginal histograms, and a
    coefficient trace along one generated path."""
    from . import plots

    plot_dir = os.path.join(cfg["out_dir"], "plots")
    os.makedirs(plot_dir, exist_ok=True)
    train_dir = os.path.join(cfg["out_dir"], "dataset", "train")
    ref_ds, _ = load_dataset(train_dir)
    scheme = cfg["train"]["scheme"]
    gen_dir = os.path.join(cfg["out_dir"], "generated", scheme)
    written = []
    if os.path.isdir(gen_dir):
        gen_ds, _ = load_dataset(gen_dir)
        if ref_ds.dim == 1:
            plots.paths_overlay_svg(
                [("training", ref_ds.times, ref_ds.values[:, :, 0],
                  "#1f77b4"),
                 ("generated", gen_ds.times, gen_ds.values[:, :, 0],
                  "#d62728")],
                os.path.join(plot_dir, "paths_overlay.svg"),
                f"{cfg['sde']['kind']} paths: training vs generated")
            written.append("paths_overlay.svg")
            for t in cfg["evaluate"]["times"]:
                if not (gen_ds.times[0] - 1e-9 <= t <= gen_ds.times[-1]):
                    continue
                frag = compare_marginals(ref_ds, gen_ds, [t])[0]
                plots.histogram_svg(
                    frag.bin_edges,
                    [("training", frag.hist_a, "#1f77b4"),
                     ("generated", frag.hist_b, "#d62728")],
                    os.path.join(plot_dir, f"marginal_t{t:g}.svg"),
                    f"distribution of X_t at t={t:g}")
                written.append(f"marginal_t{t:g}.svg")
        # coefficient trace along one freshly generated path
        bundle_dir = os.path.join(cfg["out_dir"], "model", scheme)
        if os.path.isdir(bundle_dir):
            bundle = load_bundle(bundle_dir)
            g = cfg["generate"]
            level = g["truncation"]
            if level is None:
                _, train_obs, *_ = _load_split(cfg)
                level = default_truncation_level(train_obs, ref_ds.times,
                                                 ref_ds.dim)
            run = GenerationRun(
                start_history=_origin_history(cfg.sde_spec().x0),
                delta=g["delta"], truncation=level, horizon=g["horizon"],
                n_paths=1, seed=derive_seed(cfg["seed"], "plot-trace"),
                record_estimates=True)
            res = generate(bundle, run, grid_dt=cfg["sim"]["dt"])
            if res.n_invalid == 0 and ref_ds.dim == 1:
                spec = cfg.sde_spec()
                xs = res.dataset.values[0, :-1, :]
                t_grid = res.dataset.times[:-1]
                mu_true = np.array([spec.drift(t, x[None, :])[0, 0]
                                    for t, x in zip(t_grid, xs)])
                sig_true = np.array([spec.diffusion(t, x[None, :])[0, 0] ** 2
                                     for t, x in zip(t_grid, xs)])
                plots.coefficient_trace_svg(
                    t_grid,
                    [("drift estimate", res.mu_log[:, 0, 0], "#d62728"),
                     ("drift true", mu_true, "#1f77b4"),
                     ("diffusion estimate", res.sigma_log[:, 0, 0, 0],
                      "#ff7f0e"),
                     ("diffusion true", sig_true, "#2ca02c")],
                    os.path.join(plot_dir, "coefficients.svg"),
                    "estimated vs true coefficients along one path")
                written.append("coefficients.svg")
    _write_manifest(plot_dir, "plot", cfg)
    return plot_dir


# ---------------------------------------------------------------------------
# reproduce

def _table_config(table: str, scale: float, seed: int, out_dir: str,
                  threads: int) -> RunConfig:
    n_paths = max(int(round(20000 * scale)), 10)
    epochs = max(int(round(200 * scale)), 1)
    n_gen = max(int(round(5000 * scale)), 10)
    doc = {
        "seed": seed, "out_dir": out_dir, "threads": threads,
        "sim": {"n_paths": n_paths},
        "train": {"epochs": epochs},
        "generate": {"n_paths": n_gen},
    }
    if table == "table2":
        doc["sde"] = {"kind": "ou",
                      "params": {"kappa": 2.0, "theta": 3.0, "sigma": 1.0},
                      "x0": [1.0], "dim": 1}
    return RunConfig(doc)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _render_table(title: str, header: List[str],
                  rows: List[List[object]]) -> str:
    widths = [max(len(str(header[i])), *(len(_fmt(r[i])) for r in rows))
              for i in range(len(header))]
    lines = [title]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def cmd_reproduce(table: str, scale: float, seed: int = 0,
                  out_dir: str = "runs/reproduce", threads: int = 1,
                  progress: bool = False) -> List[List[object]]:
    """Chain simulate/train/generate/evaluate for every row of the chosen
    comparison table, rendering the run's numbers next to the reported
    ones. ``scale`` multiplies the path counts and epochs; scale=0 prints
    the plan without executing anything."""
    if table not in ("table1", "table2"):
        raise ConfigError("reproduce.table: expected 'table1' or 'table2'")
    if scale < 0:
        raise ConfigError("reproduce.scale: must be >= 0")
    schemes = list(SCHEMES) if table == "table1" else ["joint-instant"]
    if scale == 0:
        print(f"[plan] {table} at scale 0 (dry run):")
        print(f"[plan] 1. simulate "
              f"{'GBM(mu=2, sigma=0.3)' if table == 'table1' else 'OU(kappa=2, theta=3, sigma=1)'}"
              f" dataset, split 80/20, observe p=0.1")
        for i, scheme in enumerate(schemes):
            print(f"[plan] {i + 2}. train {scheme}, generate, estimate")
        if table == "table1":
            print("[plan] 6. dense dataset (p=1), train joint-instant "
                  "(1-step), generate, estimate")
        print("[plan] final: render comparison table")
        return []

    import copy as _copy

    def with_scheme(cfg: RunConfig, scheme: str) -> RunConfig:
        doc = _copy.deepcopy(cfg.doc)
        doc["train"]["scheme"] = scheme
        return RunConfig(doc)

    base = _table_config(table, scale, seed, os.path.join(out_dir, table),
                         threads)
    work = base.doc["out_dir"]
    cmd_simulate(base)
    train_ds, _ = load_dataset(os.path.join(work, "dataset", "train"))
    ref_params, _ = _estimates_for(base, train_ds)
    paper = PAPER_TABLE1 if table == "table1" else PAPER_TABLE2
    param_names = ["mu", "sigma"] if table == "table1" \
        else ["kappa", "theta", "sigma"]

    rows: List[List[object]] = []
    true_params = paper["true"]
    if table == "table1":
        rows.append(["true", true_params[0], true_params[1], None,
                     true_params[0], true_params[1], None])
        rows.append(["reference", ref_params["mu"], ref_params["sigma"], 0,
                     *paper["reference"]])
    else:
        rows.append(["true", *true_params, *true_params])
        rows.append(["reference", ref_params["kappa"], ref_params["theta"],
                     ref_params["sigma"], *paper["reference"]])

    def run_scheme(cfg: RunConfig, label: str):
        cmd_train(cfg, progress=progress)
        gen_dir = cmd_generate(cfg)
        ds, _ = load_dataset(gen_dir)
        with open(os.path.join(gen_dir, "gen_meta.json")) as fh:
            n_invalid = int(json.load(fh)["n_invalid"])
        params, extra_invalid = _estimates_for(cfg, ds)
        n_invalid += extra_invalid
        if table == "table1":
            rows.append([label, params["mu"], params["sigma"], n_invalid,
                         *paper.get(label, (None, None, None))])
        else:
            rows.append([label, params["kappa"], params["theta"],
                         params["sigma"],
                         *paper.get(label, (None, None, None))])

    for scheme in schemes:
        run_scheme(with_scheme(base, scheme), scheme)

    if table == "table1":
        dense_doc = _copy.deepcopy(base.doc)
        # same simulated paths (same seed), but every grid point observed
        dense_doc["observe"]["p"] = 1.0
        dense_doc["out_dir"] = os.path.join(work, "one_step")
        dense = RunConfig(dense_doc)
        cmd_simulate(dense)
        one_step = with_scheme(dense, "joint-instant")
        cmd_train(one_step, progress=progress)
        gen_dir = cmd_generate(one_step)
        ds, _ = load_dataset(gen_dir)
        with open(os.path.join(gen_dir, "gen_meta.json")) as fh:
            n_invalid = int(json.load(fh)["n_invalid"])
        params, extra_invalid = _estimates_for(one_step, ds)
        rows.append(["joint-instant-1step", params["mu"], params["sigma"],
                     n_invalid + extra_invalid,
                     *paper["joint-instant-1step"]])

    if table == "table1":
        header = ["method", "mu", "sigma", "n_invalid",
                  "paper_mu", "paper_sigma", "paper_invalid"]
    else:
        header = ["method", "kappa", "theta", "sigma",
                  "paper_kappa", "paper_theta", "paper_sigma"]
    title = ("GBM parameters on generated datasets (scale "
             f"{scale:g})") if table == "table1" else \
        (f"OU parameters on generated datasets (scale {scale:g})")
    print(_render_table(title, header, rows))
    table_path = os.path.join(work, f"{table}_comparison.csv")
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow(["" if v is None else
                             (FLOAT_FMT % v if isinstance(v, float) else v)
                             for v in r])
    return rows


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--seed", type=int, default=None, help="global seed "
                   "override (env ITOGEN_SEED also applies)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap")
    p.add_argument("--scheme", default=None, choices=list(SCHEMES),
                   help="training scheme override")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, out_dir=args.out, scheme=args.scheme,
                        threads=args.threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itogen",
        description="Learn Ito-process coefficients from irregular "
                    "observations and generate new sample paths.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in [("simulate", "simulate and write the dataset"),
                      ("train", "train the configured scheme"),
                      ("generate", "sample paths from a checkpoint"),
                      ("evaluate", "estimate parameters and compare laws"),
                      ("plot", "emit SVG figures")]:
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        if name == "generate":
            p.add_argument("--checkpoint", default=None,
                           help="model directory (default: out/model/<scheme>)")
        if name == "evaluate":
            p.add_argument("datasets", nargs="*",
                           help="generated dataset directories "
                                "(default: all under out/generated)")
        if name == "train":
            p.add_argument("--quiet", action="store_true",
                           help="suppress per-epoch progress lines")

    p = sub.add_parser("reproduce", help="chain all stages for a "
                                         "comparison table")
    p.add_argument("--table", required=True, choices=["table1", "table2"])
    p.add_argument("--scale", type=float, required=True,
                   help="size factor; 0 prints the plan without executing")
    p.add_argument("--out", default="runs/reproduce")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            out = cmd_simulate(_load_config(args))
            print(f"dataset written to {out}")
        elif args.command == "train":
            out = cmd_train(_load_config(args), progress=not args.quiet)
            print(f"checkpoint written to {out}")
        elif args.command == "generate":
            out = cmd_generate(_load_config(args), checkpoint=args.checkpoint)
            print(f"generated dataset written to {out}")
        elif args.command == "evaluate":
            out = cmd_evaluate(_load_config(args),
                               dataset_dirs=args.datasets or None)
            print(f"evaluation written to {out}")
        elif args.command == "plot":
            out = cmd_plot(_load_config(args))
            print(f"plots written to {out}")
        elif args.command == "reproduce":
            seed = args.seed
            env_seed = os.environ.get("ITOGEN_SEED")
            if env_seed is not None:
                seed = int(env_seed)
            cmd_reproduce(args.table, args.scale, seed=seed,
                          out_dir=args.out, threads=args.threads,
                          progress=not args.quiet)
    except ItogenError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
