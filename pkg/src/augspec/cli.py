"""Command-line driver: ``augspec synth|sweep|ope|align --config FILE [--jobs N] [--out DIR]``.

Every command reads an optional TOML file whose tables override the
defaults below, writes a ``resolved_config.json`` next to its outputs, and
prints floats in CSVs with :func:`augspec.linalg.format_float`, so identical
configs give byte-identical files. Exit codes: 0 when every cell succeeded,
1 for a configuration error, 2 when any cell carries an error tag.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import alignment as al
from . import ope
from . import plots
from . import spectral_loss as sl
from . import synthgen as sg
from . import twosls as ts
from .linalg import format_float

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_CELL_ERROR = 0, 1, 2

# linear features on the sine-basis encoding, trained full batch
_TRAIN = dict(d=10, feature_net="linear", input_map="sine_basis:10", batch_size=1 << 20,
              steps=1500, lr=0.02, log_every=500)

DEFAULTS = {
    "synth": {
        "operator": {},
        "data": {"n": 50_000, "seed": 0, "split_fraction": 0.5},
    },
    "sweep": {
        "operator": {"seed": 0},
        "train": dict(_TRAIN),
        "data": {"n": 20_000, "split_fraction": 0.5},
        "grid": {"delta": [0.0, 0.5, 1.0, 3.0, 5.0], "c_sigma": [0.2, 0.8], "c_alpha": [0.2, 5.0],
                 "seeds": [0, 1, 2, 3, 4]},
        "eval": {"n_eval": 20_000, "seed": 1},
        "plot": True,
    },
    "ope": {
        "mdp": {"name": "chain", "restart": "mu0"},
        "data": {"n": 20_000},
        "grid": {"estimators": ["speciv", "augspeciv"], "delta": [1e-3, 1e-2, 1e-1, 1.0], "seeds": [0, 1, 2]},
        "ope": {"feature_mode": "tabular", "max_iter": 100, "tol": 1e-4},
        "train": {"d": 3, "feature_net": "linear", "batch_size": 1 << 20, "steps": 1500, "lr": 1e-2,
                  "log_every": 500},
    },
    "align": {
        "operator": {},
        "train": dict(_TRAIN),
        "data": {"n": 20_000, "seed": 0, "split_fraction": 0.5},
        "grid": {"delta": [0.0, 0.5, 1.0, 3.0, 5.0]},
        "eval": {"n_eval": 100_000, "seed": 1},
        "eta": al.DEFAULT_ETA,
        "plot": True,
    },
}


# tables whose keys are dataclass fields rather than a fixed default set
_OPEN_TABLES = ("operator", "train", "ope")


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key not in _OPEN_TABLES:
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a table")
            out[key] = {**base[key], **val}
        else:
            out[key] = val
    return out


def resolve_config(command: str, path=None) -> dict:
    """Defaults for ``command`` overridden by the TOML file at ``path``."""
    override = {}
    if path is not None:
        with open(path, "rb") as fh:
            override = tomllib.load(fh)
    cfg = _merge(DEFAULTS[command], override)
    per_cell = {"estimator", "delta", "seed", "train"}
    for key, cls in (("operator", sg.SyntheticOperatorSpec), ("train", sl.TrainConfig), ("ope", ope.OpeConfig)):
        allowed = {f.name for f in fields(cls)} - (per_cell if key == "ope" else set())
        unknown = set(cfg.get(key, {})) - allowed
        if unknown:
            raise ConfigError(f"unknown {key} fields: {sorted(unknown)}")
    for key, val in cfg.get("grid", {}).items():
        if not isinstance(val, list) or not val:
            raise ConfigError(f"grid.{key} must be a nonempty list")
    return cfg


def _build(cls, table: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {**table, **extra}
    if isinstance(kwargs.get("higher_rank_deltas"), list):
        kwargs["higher_rank_deltas"] = tuple(kwargs["higher_rank_deltas"])
    return cls(**kwargs)


def _operator(table: dict) -> sg.GroundTruthOperator:
    try:
        return sg.build_operator(_build(sg.SyntheticOperatorSpec, table))
    except sg.OperatorSpecError as exc:
        raise ConfigError(f"operator rejected: {exc}. Lower sigma1 or c_sigma, or change the seed.") from exc


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return str(bool(v)).lower()
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return "" if v is None else str(v).replace(",", ";").replace("\n", " ")

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _error_tag(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


# -- synth -----------------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path, jobs: int = 1) -> int:
    op = _operator(cfg["operator"])
    data = cfg["data"]
    ds = sg.sample_dataset(op, int(data["n"]), split_fraction=float(data["split_fraction"]), seed=int(data["seed"]))
    sg.save_dataset(ds, out / "dataset.csv")
    u = sg.confounder(op, ds.z, ds.x)
    corr = float(np.corrcoef(u, sg.eval_h0(op, ds.x))[0, 1])
    print(f"wrote {ds.n} rows to {out / 'dataset.csv'}")
    print(f"positivity margin {op.positivity_margin:.4f}")
    print(f"confounding: corr(U, h0(X)) = {corr:.4f}")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------

SWEEP_COLUMNS = ["c_alpha", "c_sigma", "delta", "seed", "mse", "mse_norm", "mse_ratio_seed",
                 "alignment_plugin", "alignment_true", "illposedness", "l0_final", "r_delta_final", "error"]


def _safe(fn):
    try:
        return float(fn())
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        return float("nan")


def _sweep_group(args) -> list[dict]:
    """All deltas for one (c_alpha, c_sigma, seed); each delta fails independently."""
    cfg, c_alpha, c_sigma, seed = args
    base = {"c_alpha": c_alpha, "c_sigma": c_sigma, "seed": seed}
    rows = []
    try:
        spec = _build(sg.SyntheticOperatorSpec, cfg["operator"], c_alpha=c_alpha, c_sigma=c_sigma)
        op = sg.build_operator(spec)
        ds = sg.sample_dataset(op, int(cfg["data"]["n"]), split_fraction=float(cfg["data"]["split_fraction"]),
                               seed=seed)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a tagged row
        return [{**base, "delta": float(d), "error": _error_tag(exc)} for d in cfg["grid"]["delta"]]
    f, e = ds.feature_split(), ds.estimation_split()
    for delta in cfg["grid"]["delta"]:
        row = {**base, "delta": float(delta)}
        try:
            train = _build(sl.TrainConfig, cfg["train"], delta=float(delta), seed=seed)
            learned, trace = sl.train_features(f.z, f.x, f.y, train)
            phi_e, psi_e = learned.phi(e.x), learned.psi(e.z)
            est = ts.fit_2sls(phi_e, psi_e, e.y, feature_map=learned.phi)
            row["mse"] = ts.mse_l2(est, op, n_eval=int(cfg["eval"]["n_eval"]), seed=int(cfg["eval"]["seed"]))
            row["alignment_plugin"] = _safe(lambda: al.alignment_plugin(
                al.empirical_svd(learned, e.z, e.x), learned, e.z, e.y))
            row["alignment_true"] = al.alignment_true(learned, op, n_eval=int(cfg["eval"]["n_eval"]),
                                                      seed=int(cfg["eval"]["seed"]))
            row["illposedness"] = _safe(lambda: ts.illposedness(phi_e, psi_e))
            row["l0_final"] = trace.l0[-1]
            row["r_delta_final"] = trace.r_delta[-1]
        except Exception as exc:  # noqa: BLE001
            row["error"] = _error_tag(exc)
        rows.append(row)
    return rows


def _normalize(rows: list[dict]) -> None:
    """``mse_norm`` divides by the seed-mean of the delta = 0 MSE in the same (c_alpha, c_sigma) cell."""
    nan = float("nan")
    for key, grp in itertools.groupby(sorted(rows, key=lambda r: (r["c_alpha"], r["c_sigma"])),
                                      key=lambda r: (r["c_alpha"], r["c_sigma"])):
        grp = list(grp)
        base = {r["seed"]: r.get("mse", nan) for r in grp if r["delta"] == 0.0 and "error" not in r}
        mean_base = float(np.mean(list(base.values()))) if base else nan
        for r in grp:
            if "mse" not in r:
                continue
            r["mse_norm"] = r["mse"] / mean_base
            r["mse_ratio_seed"] = r["mse"] / base.get(r["seed"], nan)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def cmd_sweep(cfg: dict, out: Path, jobs: int = 1) -> int:
    grid = cfg["grid"]
    if 0.0 not in [float(d) for d in grid["delta"]]:
        raise ConfigError("grid.delta must include 0 for the normalization")
    tasks = [(cfg, float(ca), float(cs), int(s))
             for ca in grid["c_alpha"] for cs in grid["c_sigma"] for s in grid["seeds"]]
    rows = [r for grp in _map(_sweep_group, tasks, jobs) for r in grp]
    _normalize(rows)
    order = {float(d): i for i, d in enumerate(grid["delta"])}
    rows.sort(key=lambda r: (r["c_alpha"], r["c_sigma"], order[r["delta"]], r["seed"]))
    nan = float("nan")
    table = [[r.get(c, nan if c != "error" else "") for c in SWEEP_COLUMNS] for r in rows]
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, table)

    summary = []
    for (ca, cs, d), grp in itertools.groupby(rows, key=lambda r: (r["c_alpha"], r["c_sigma"], r["delta"])):
        grp = [r for r in grp if "error" not in r]
        vals = [r["mse_norm"] for r in grp]
        summary.append([ca, cs, d, len(grp), float(np.mean(vals)) if vals else nan,
                        float(np.mean([r["mse"] for r in grp])) if grp else nan])
    _write_csv(out / "sweep_summary.csv", ["c_alpha", "c_sigma", "delta", "n_ok", "mse_norm_mean", "mse_mean"],
               summary)
    if cfg["plot"]:
        for ca in grid["c_alpha"]:
            for cs in grid["c_sigma"]:
                groups = {format(float(d), "g"): [r.get("mse_norm", nan) for r in rows
                                                  if r["c_alpha"] == ca and r["c_sigma"] == cs and r["delta"] == d]
                          for d in order}
                svg = plots.box_plot(groups, title=f"c_alpha={ca:g}, c_sigma={cs:g}", xlabel="delta",
                                     ylabel="normalized MSE")
                plots.save_svg(svg, out / f"sweep_ca{ca:g}_cs{cs:g}.svg")
    n_err = sum("error" in r for r in rows)
    print(f"sweep: {len(rows)} rows, {n_err} errors -> {out / 'sweep.csv'}")
    return EXIT_CELL_ERROR if n_err else EXIT_OK


# -- ope -------------------------------------------------------------------------

OPE_SUMMARY_COLUMNS = ["estimator", "delta", "seed", "rho_hat", "rho_true", "abs_error", "iterations",
                       "converged", "error"]


def _ope_problem(cfg: dict):
    name = cfg["mdp"]["name"]
    if name == "chain":
        mdp, pi = ope.chain_mdp(), ope.chain_target_policy()
    elif name == "misaligned":
        mdp, pi = ope.misaligned_mdp(), ope.misaligned_target_policy()
    else:
        raise ConfigError(f"unknown mdp {name!r}")
    restart = cfg["mdp"]["restart"]
    if restart == "mu0":
        restart = None
    elif restart == "uniform":
        restart = np.full(mdp.n_states, 1.0 / mdp.n_states)
    else:
        raise ConfigError(f"mdp.restart must be 'mu0' or 'uniform', got {restart!r}")
    return mdp, pi, restart


def _ope_cell(args):
    cfg, estimator, delta, seed = args
    mdp, pi, restart = _ope_problem(cfg)
    rho = ope.policy_value(mdp, ope.exact_q(mdp, pi), pi)
    row = {"estimator": estimator, "delta": delta, "seed": seed, "rho_true": rho}
    trace = []
    try:
        data = ope.collect_offline(mdp, ope.Policy.uniform(mdp.n_states, mdp.n_actions), int(cfg["data"]["n"]),
                                   seed=seed, restart=restart)
        train = _build(sl.TrainConfig, cfg["train"])
        ocfg = _build(ope.OpeConfig, cfg["ope"], estimator=estimator, delta=delta, seed=seed, train=train)
        res = ope.iterative_npiv_ope(data, pi, ocfg, mdp=mdp)
        trace = res.trace
        row.update(rho_hat=res.rho_hat, abs_error=abs(res.rho_hat - rho), iterations=res.iterations,
                   converged=res.converged)
    except ope.OpeDivergedError as exc:
        trace = exc.trace
        row.update(iterations=len(trace), converged=False, error=_error_tag(exc))
    except Exception as exc:  # noqa: BLE001
        row["error"] = _error_tag(exc)
    return row, trace


def cmd_ope(cfg: dict, out: Path, jobs: int = 1) -> int:
    _ope_problem(cfg)
    tasks = []
    for est in cfg["grid"]["estimators"]:
        if est not in ("speciv", "augspeciv"):
            raise ConfigError(f"unknown estimator {est!r}")
        deltas = [0.0] if est == "speciv" else [float(d) for d in cfg["grid"]["delta"]]
        tasks += [(cfg, est, d, int(s)) for d in deltas for s in cfg["grid"]["seeds"]]
    results = _map(_ope_cell, tasks, jobs)
    nan = float("nan")
    summary = [[row.get(c, nan if c not in ("error", "converged") else "") for c in OPE_SUMMARY_COLUMNS]
               for row, _ in results]
    _write_csv(out / "ope_summary.csv", OPE_SUMMARY_COLUMNS, summary)
    trace_rows = [[row["estimator"], row["delta"], row["seed"], t.iter, t.supnorm_change, t.bellman_residual,
                   t.rho_hat] for row, trace in results for t in trace]
    _write_csv(out / "ope_trace.csv", ["estimator", "delta", "seed", *ope.TRACE_COLUMNS], trace_rows)
    n_err = sum("error" in row for row, _ in results)
    print(f"ope: {len(results)} runs, {n_err} errors -> {out / 'ope_summary.csv'}")
    return EXIT_CELL_ERROR if n_err else EXIT_OK


# -- align -----------------------------------------------------------------------


def cmd_align(cfg: dict, out: Path, jobs: int = 1) -> int:
    """Per-delta alignment report plus the three delta selectors.

    The estimation split is halved: 2SLS is fit on the first half and the
    selectors score candidates on the second, so neither is evaluated in-sample.
    """
    deltas = [float(d) for d in cfg["grid"]["delta"]]
    op = _operator(cfg["operator"])
    data = cfg["data"]
    ds = sg.sample_dataset(op, int(data["n"]), split_fraction=float(data["split_fraction"]), seed=int(data["seed"]))
    f, e = ds.feature_split(), ds.estimation_split()
    half = e.z.size // 2
    fit, held = slice(0, half), slice(half, None)
    rows, traces, cand2, cand_al, errors = [], {}, {}, {}, []
    for delta in deltas:
        try:
            train = _build(sl.TrainConfig, cfg["train"], delta=delta, seed=int(data["seed"]))
            learned, trace = sl.train_features(f.z, f.x, f.y, train)
            emp = al.empirical_svd(learned, e.z[held], e.x[held])
            plugin = _safe(lambda: al.alignment_plugin(emp, learned, e.z[held], e.y[held]))
            truth = al.alignment_true(learned, op, n_eval=int(cfg["eval"]["n_eval"]), seed=int(cfg["eval"]["seed"]))
            est = ts.fit_2sls(learned.phi(e.x[fit]), learned.psi(e.z[fit]), e.y[fit], feature_map=learned.phi)
        except Exception as exc:  # noqa: BLE001
            errors.append((delta, _error_tag(exc)))
            continue
        rows.append(al.AlignmentRow(delta, emp.sigma_hat, plugin, truth, trace.l0[-1], trace.r_delta[-1]))
        traces[delta], cand2[delta], cand_al[delta] = trace, (learned, est), learned
    if rows:
        al.save_report(rows, out / "alignment.csv")
    selection = []
    if 0.0 in traces:
        selection.append(["loss_balance", al.select_delta_loss_balance(traces, float(cfg["eta"]))])
    if cand2:
        selection.append(["stage2", al.select_delta_stage2(cand2, e.z[held], e.x[held], e.y[held])])
        selection.append(["alignment", _safe(lambda: al.select_delta_alignment(
            cand_al, e.z[held], e.x[held], e.y[held]))])
    _write_csv(out / "alignment_selection.csv", ["selector", "delta"], selection)
    if errors:
        _write_csv(out / "alignment_errors.csv", ["delta", "error"], [list(x) for x in errors])
    if cfg["plot"] and rows:
        ds_ = [r.delta for r in rows]
        plots.save_svg(plots.line_chart({"plug-in": (ds_, [r.alignment_plugin for r in rows]),
                                         "true": (ds_, [r.alignment_true for r in rows])},
                                        title="alignment", xlabel="delta", ylabel="squared projection norm"),
                       out / "alignment.svg")
        plots.save_svg(plots.line_chart({"L0": (ds_, [r.l0_final for r in rows]),
                                         "R_delta": (ds_, [r.r_delta_final for r in rows])},
                                        title="final losses", xlabel="delta", ylabel="loss"),
                       out / "losses.svg")
    print(f"align: {len(rows)} deltas, {len(errors)} errors -> {out / 'alignment.csv'}")
    for name, d in selection:
        print(f"  {name}: delta = {d:g}")
    return EXIT_CELL_ERROR if errors else EXIT_OK


COMMANDS = {"synth": cmd_synth, "sweep": cmd_sweep, "ope": cmd_ope, "align": cmd_align}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augspec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, default=None, help="TOML file overriding the defaults")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "resolved_config.json").write_text(
            json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True) + "\n")
        return COMMANDS[args.command](cfg, args.out, max(1, args.jobs))
    except (ConfigError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
