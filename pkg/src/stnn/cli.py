"""Command-line entry point.

Subcommands: generate, train, forecast, evaluate, grid, discover, gradcheck.
Option precedence is flags > --config JSON > defaults, and every run writes
a manifest echoing the fully resolved configuration, so any run can be
reproduced with ``stnn <command> --config <out>/manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 divergence,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import training as T

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5

GRADCHECK_TOLERANCE = 1e-5
VARIANTS = [v.value for v in M.ModelVariant]


class ConfigError(ValueError):
    pass


@dataclass
class Opt:
    key: str
    kind: str  # int | float | str | ints | floats | strs
    default: object = None
    help: str = ""
    choices: list | None = None
    required: bool = False


def _coerce(opt: Opt, value):
    if value is None:
        return None
    try:
        if opt.kind == "int":
            return int(value)
        if opt.kind == "float":
            return float(value)
        if opt.kind == "str":
            value = str(value)
        if opt.kind in ("ints", "floats", "strs"):
            if isinstance(value, str):
                parts = [p.strip() for p in value.split(",") if p.strip()]
            else:
                parts = list(value)
            cast = {"ints": int, "floats": float, "strs": str}[opt.kind]
            return [cast(p) for p in parts]
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for --{opt.key.replace('_', '-')}")
    if opt.choices and value not in opt.choices:
        raise ConfigError(f"--{opt.key.replace('_', '-')} must be one of {opt.choices}")
    return value


_COMMON = [
    Opt("seed", "int", 0, "base random seed"),
    Opt("out", "str", "stnn-out", "output directory"),
]

_SERIES_IN = [
    Opt("series", "str", None, "series CSV path", required=True),
    Opt("n", "int", None, "number of series in the file", required=True),
    Opt("series_dim", "int", 1, "per-series dimensionality m"),
]

_MODEL_OPTS = [
    Opt("variant", "str", "stnn", "model variant", choices=VARIANTS),
    Opt("latent_dim", "int", 10, "latent dimensionality N"),
    Opt("lambda", "float", 0.1, "dynamics loss weight"),
    Opt("gamma", "float", 0.0, "L1 weight on learned relation weights"),
    Opt("powers", "int", None, "build relation powers W^1..W^K from the base prior"),
    Opt("num_relations", "int", 1, "learned relation count when stnn-d runs without a prior"),
    Opt("epochs", "int", 500, "training epochs"),
    Opt("lr", "float", 0.01, "learning rate"),
    Opt("momentum", "float", 0.9, "velocity coefficient"),
    Opt("batch", "int", 32, "pairs sampled per iteration"),
    Opt("clip", "float", None, "global gradient-norm clip (off by default)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "generate": [
        Opt("kind", "str", None, "generator kind", choices=[D.TEACHER, D.DIFFUSION], required=True),
        Opt("grid", "str", None, "lattice dims ROWSxCOLS", required=True),
        Opt("series_dim", "int", 1, "per-series dimensionality m"),
        Opt("latent_dim", "int", 3, "teacher latent dimensionality"),
        Opt("length", "int", 200, "number of time steps"),
        Opt("noise", "float", 0.01, "observation/process noise std"),
        Opt("alpha", "float", 0.5, "diffusion mixing weight"),
        *_COMMON,
    ],
    "train": [
        *_SERIES_IN,
        Opt("relations", "str", None, "relation edge-list CSV (optional for stnn-d)"),
        *_MODEL_OPTS,
        *_COMMON,
    ],
    "forecast": [
        Opt("checkpoint", "str", None, "trained checkpoint JSON", required=True),
        Opt("horizon", "int", 5, "steps to forecast"),
        *_COMMON,
    ],
    "evaluate": [
        *_SERIES_IN,
        Opt("relations", "str", None, "relation edge-list CSV"),
        Opt("models", "strs", ["mean", "ar", "stnn"], "models to score"),
        Opt("lag", "int", 5, "autoregressive lag"),
        *_MODEL_OPTS,
        Opt("train_window", "int", None, "fold training window T'", required=True),
        Opt("horizon", "int", 5, "fold test horizon H"),
        Opt("folds", "int", 5, "fold count"),
        Opt("seeds", "ints", None, "rerun learned models once per seed"),
        *_COMMON,
    ],
    "grid": [
        *_SERIES_IN,
        Opt("relations", "str", None, "relation edge-list CSV"),
        *_MODEL_OPTS,
        Opt("train_window", "int", None, "fold training window T'", required=True),
        Opt("horizon", "int", 5, "fold test horizon H"),
        Opt("folds", "int", 5, "fold count"),
        Opt("grid_latent_dim", "ints", None, "latent-dim grid values"),
        Opt("grid_lambda", "floats", None, "lambda grid values"),
        Opt("grid_gamma", "floats", None, "gamma grid values"),
        Opt("grid_powers", "ints", None, "relation-power grid values"),
        *_COMMON,
    ],
    "discover": [
        Opt("checkpoint", "str", None, "trained checkpoint JSON", required=True),
        Opt("t_start", "int", None, "first step for gated-variant extraction (1-based)"),
        Opt("t_end", "int", None, "last step for gated-variant extraction"),
        *_COMMON,
    ],
    "gradcheck": [
        Opt("n", "int", 4, "series count"),
        Opt("series_dim", "int", 2, "per-series dimensionality m"),
        Opt("latent_dim", "int", 3, "latent dimensionality N"),
        Opt("length", "int", 6, "time steps T"),
        Opt("relations_count", "int", 2, "relation count"),
        Opt("lambda", "float", 1.0, "dynamics loss weight"),
        Opt("gamma", "float", 0.1, "L1 weight"),
        *_COMMON,
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stnn",
                                     description="latent spatio-temporal forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="JSON config/manifest file")
        for opt in opts:
            flag = "--" + opt.key.replace("_", "-")
            p.add_argument(flag, dest=opt.key, default=argparse.SUPPRESS,
                           help=opt.help, choices=opt.choices if opt.kind == "str" else None)
    return parser


def _resolve(command: str, provided: dict, config_path: str | None) -> dict:
    opts = {o.key: o for o in COMMANDS[command]}
    merged = {k: o.default for k, o in opts.items()}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        file_command = loaded.pop("command", None)
        if file_command is not None and file_command != command:
            raise ConfigError(f"{config_path}: config is for '{file_command}', not '{command}'")
        for key, value in loaded.items():
            if key not in opts:
                raise ConfigError(f"{config_path}: unknown option '{key}' for {command}")
            merged[key] = _coerce(opts[key], value)
    for key, value in provided.items():
        merged[key] = _coerce(opts[key], value)
    for key, opt in opts.items():
        if opt.required and merged[key] is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return merged


def _write_manifest(command: str, cfg: dict, out: str) -> None:
    doc = {"command": command}
    doc.update({k: cfg[k] for k in (o.key for o in COMMANDS[command])})
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _outdir(cfg: dict) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _parse_grid_dims(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError:
        raise ConfigError(f"--grid expects ROWSxCOLS, got {text!r}")


def _load_relations_opt(cfg: dict, n: int):
    if cfg.get("relations"):
        return D.load_relations(cfg["relations"], n)
    return None


def _stnn_spec(cfg: dict, name: str | None = None) -> E.StnnModel:
    training = T.TrainingConfig(
        lam=cfg["lambda"], gamma=cfg["gamma"], learning_rate=cfg["lr"],
        momentum=cfg["momentum"], batch_pairs=cfg["batch"], epochs=cfg["epochs"],
        seed=cfg["seed"], variant=M.ModelVariant(cfg["variant"]), clip_norm=cfg["clip"],
    )
    return E.StnnModel(name=name or cfg["variant"], latent_dim=cfg["latent_dim"],
                       training=training, powers=cfg["powers"],
                       num_relations=cfg["num_relations"])


def cmd_generate(cfg: dict) -> int:
    rows, cols = _parse_grid_dims(cfg["grid"])
    spec = D.SyntheticSpec(
        kind=cfg["kind"], n=rows * cols, m=cfg["series_dim"],
        latent_dim=cfg["latent_dim"], length=cfg["length"], grid=(rows, cols),
        noise_std=cfg["noise"], alpha=cfg["alpha"], seed=cfg["seed"],
    )
    series, relations, record = D.generate_synthetic(spec)
    out = _outdir(cfg)
    D.save_series(series, os.path.join(out, "series.csv"))
    D.save_relations(relations, os.path.join(out, "relations.csv"))
    D.save_truth(record, os.path.join(out, "truth.json"))
    _write_manifest("generate", cfg, out)
    print(f"generated {spec.kind}: T={series.T} n={series.n} m={series.m} -> {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    x = D.load_series(cfg["series"], cfg["n"], cfg["series_dim"])
    variant = M.ModelVariant(cfg["variant"])
    relations = _load_relations_opt(cfg, x.n)
    if relations is None and variant.needs_prior:
        raise ConfigError(f"variant '{variant.value}' requires a --relations prior")
    spec = _stnn_spec(cfg)
    rels = E.model_relations(relations, spec, x.n)
    xn, record = D.normalize(x)
    z, params, trace = T.train(xn, rels, spec.training, spec.latent_dim)
    out = _outdir(cfg)
    M.save_checkpoint(os.path.join(out, "checkpoint.json"), z, params, rels, variant,
                      cfg["lambda"], cfg["gamma"], cfg["seed"], norm=record,
                      time_step_label=x.time_step_label)
    D.save_series(D.SeriesTensor(z.z), os.path.join(out, "latent.csv"))
    T.write_trace_csv(trace, os.path.join(out, "trace.csv"))
    if trace:
        from . import figures
        figures.training_curve(trace, os.path.join(out, "training_loss.png"))
    _write_manifest("train", cfg, out)
    final = trace[-1].loss.total if trace else float("nan")
    print(f"trained {variant.value}: epochs={cfg['epochs']} final_loss={final:.6g} -> {out}")
    return EXIT_OK


def cmd_forecast(cfg: dict) -> int:
    ckpt = M.load_checkpoint(cfg["checkpoint"])
    horizon = cfg["horizon"]
    if horizon < 1:
        raise ConfigError(f"--horizon must be >= 1, got {horizon}")
    preds = E.forecast(ckpt.z, ckpt.params, ckpt.relations, ckpt.variant, horizon)
    history = np.stack([M.decode(zt, ckpt.params) for zt in ckpt.z.z])
    if ckpt.norm is not None:
        preds = ckpt.norm.invert(preds)
        history = ckpt.norm.invert(history)
    out = _outdir(cfg)
    D.save_series(D.SeriesTensor(preds, ckpt.time_step_label),
                  os.path.join(out, "forecast.csv"))
    from . import figures
    figures.forecast_lines(history, preds, os.path.join(out, "forecast.png"))
    _write_manifest("forecast", cfg, out)
    print(f"forecast {horizon} steps for n={ckpt.z.n} series -> {out}")
    return EXIT_OK


def _build_models(cfg: dict) -> list:
    models = []
    for kind in cfg["models"]:
        if kind == "mean":
            models.append(E.MeanModel())
        elif kind == "ar":
            models.append(E.ArModel(config=E.ArConfig(lag=cfg["lag"])))
        elif kind == "stnn":
            models.append(_stnn_spec(cfg))
        else:
            raise ConfigError(f"unknown model kind '{kind}' (expected mean, ar, stnn)")
    return models


def cmd_evaluate(cfg: dict) -> int:
    x = D.load_series(cfg["series"], cfg["n"], cfg["series_dim"])
    relations = _load_relations_opt(cfg, x.n)
    plan = E.plan_folds(x.T, cfg["train_window"], cfg["horizon"], cfg["folds"])
    report = E.evaluate(x, relations, plan, _build_models(cfg), seeds=cfg["seeds"])
    out = _outdir(cfg)
    E.write_report_csv(report, os.path.join(out, "report.csv"))
    E.write_report_json(report, os.path.join(out, "summary.json"))
    from . import figures
    figures.rmse_by_horizon(report.summary(), os.path.join(out, "rmse_by_horizon.png"))
    _write_manifest("evaluate", cfg, out)
    for name in report.model_names:
        print(f"{name}: overall rmse {report.overall(name):.6g}")
    return EXIT_OK


def cmd_grid(cfg: dict) -> int:
    x = D.load_series(cfg["series"], cfg["n"], cfg["series_dim"])
    relations = _load_relations_opt(cfg, x.n)
    plan = E.plan_folds(x.T, cfg["train_window"], cfg["horizon"], cfg["folds"])
    grids = {}
    for key, cfg_key in (("latent_dim", "grid_latent_dim"), ("lambda", "grid_lambda"),
                         ("gamma", "grid_gamma"), ("powers", "grid_powers")):
        if cfg[cfg_key]:
            grids[key] = cfg[cfg_key]
    best, rows = E.grid_search(x, relations, plan, _stnn_spec(cfg), grids)
    out = _outdir(cfg)
    E.write_grid_csv(rows, os.path.join(out, "grid.csv"))
    best_doc = {"latent_dim": best.latent_dim, "lambda": best.training.lam,
                "gamma": best.training.gamma, "powers": best.powers,
                "rmse": min(r["rmse"] for r in rows if r["rmse"] == r["rmse"])}
    with open(os.path.join(out, "best.json"), "w", encoding="utf-8") as fh:
        json.dump(best_doc, fh, indent=1)
        fh.write("\n")
    from . import figures
    figures.grid_response(rows, os.path.join(out, "grid_rmse.png"))
    _write_manifest("grid", cfg, out)
    print(f"grid: {len(rows)} points, best rmse {best_doc['rmse']:.6g} "
          f"at N={best.latent_dim} lambda={best.training.lam} "
          f"gamma={best.training.gamma} powers={best.powers}")
    return EXIT_OK


def cmd_discover(cfg: dict) -> int:
    ckpt = M.load_checkpoint(cfg["checkpoint"])
    out = _outdir(cfg)
    from . import figures
    if ckpt.variant.is_gated:
        t_start = cfg["t_start"] or 1
        t_end = cfg["t_end"] or ckpt.z.T
        rows = M.dynamic_correlations(ckpt.z, ckpt.params, ckpt.relations, t_start, t_end)
        with open(os.path.join(out, "dynamic.csv"), "w", encoding="utf-8") as fh:
            fh.write("t,i,dominant_relation,weight\n")
            for t, i, r, weight in rows:
                fh.write(f"{t},{i},{r},{repr(weight)}\n")
        last = np.array([r for t, i, r, w in rows if t == t_end])
        figures.dominant_relation_strip(last, ckpt.relations.labels(),
                                        os.path.join(out, "dominant.png"))
        print(f"dynamic relations for t in [{t_start}, {t_end}] -> {out}")
    else:
        effective, dominant = M.extract_correlations(ckpt.params, ckpt.relations, ckpt.variant)
        with open(os.path.join(out, "correlations.csv"), "w", encoding="utf-8") as fh:
            fh.write("r,i,j,weight\n")
            for label, mat in effective:
                for i in range(mat.shape[0]):
                    for j in range(mat.shape[1]):
                        fh.write(f"{label},{i},{j},{repr(float(mat[i, j]))}\n")
        with open(os.path.join(out, "dominant.csv"), "w", encoding="utf-8") as fh:
            fh.write("i,dominant_relation\n")
            for i, r in enumerate(dominant.tolist()):
                fh.write(f"{i},{r}\n")
        figures.correlation_heatmaps(effective, os.path.join(out, "correlations.png"))
        figures.dominant_relation_strip(dominant, ckpt.relations.labels(),
                                        os.path.join(out, "dominant.png"))
        print(f"extracted {len(effective)} relation matrices -> {out}")
    _write_manifest("discover", cfg, out)
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    out = _outdir(cfg)
    results = []
    for variant in M.ModelVariant:
        err = T.grad_check(cfg["n"], cfg["series_dim"], cfg["latent_dim"], cfg["length"],
                           cfg["relations_count"], variant, cfg["lambda"], cfg["gamma"],
                           seed=cfg["seed"])
        ok = err < GRADCHECK_TOLERANCE
        results.append((variant.value, err, ok))
        print(f"{variant.value}: max relative error {err:.3e} "
              f"{'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOLERANCE:g})")
    with open(os.path.join(out, "gradcheck.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,max_rel_error,pass\n")
        for name, err, ok in results:
            fh.write(f"{name},{repr(err)},{int(ok)}\n")
    _write_manifest("gradcheck", cfg, out)
    return EXIT_OK if all(ok for _, _, ok in results) else EXIT_GRADCHECK


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "discover": cmd_discover,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    provided = dict(vars(ns))
    command = provided.pop("command")
    config_path = provided.pop("config", None)
    try:
        cfg = _resolve(command, provided, config_path)
        return _DISPATCH[command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except T.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except D.ParseError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, M.StateError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
