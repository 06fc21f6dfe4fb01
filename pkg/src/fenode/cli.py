"""Command-line entry point: ``fenode <command> --config ... --out ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric error (divergence,
singular systems, failed planning), 4 file error (unreadable, corrupt or
unwritable paths).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig, load_config, preset_names
from .encoder import EncoderModel, gram_matrix, mean_offdiagonal, normalized_gram
from .errors import ConfigError, CorruptFileError, NumericError
from .evaluate import ResultTable, true_field_mse, zero_shot_mse
from .mpc import episode_rows, identify_online, run_episode
from .systems import Quad2DField, generate_datasets
from .training import train

log = logging.getLogger("fenode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FILE = 0, 2, 3, 4


# --- helpers -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Outputs:
    """Output directory that records every file written for the manifest."""

    def __init__(self, root, cfg: ExperimentConfig | None, command: str):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise OSError(f"cannot create output directory {root}: {err}") from err
        self.cfg = cfg
        self.command = command
        self.files: list[Path] = []

    @property
    def hash(self) -> str:
        return self.cfg.sha256() if self.cfg else ""

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def csv(self, rel, columns, rows):
        return io.write_csv(self.path(rel), columns, rows, self.hash)

    def manifest(self, extra: dict | None = None) -> Path:
        body = {"command": self.command, "config_sha256": self.hash,
                "files": {str(p.relative_to(self.root)): _sha256(p) for p in sorted(set(self.files))}}
        if extra:
            body.update(extra)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
        return path


def _load_datasets(directory) -> list:
    d = Path(directory)
    files = sorted(list(d.glob("*.bin")) + list(d.glob("*.csv")))
    if not files:
        raise ConfigError(f"no dataset files in {directory}")
    return [io.load_dataset(f) for f in files]


def _train_sets(cfg: ExperimentConfig, data_dir):
    return _load_datasets(data_dir) if data_dir else generate_datasets(cfg.family(), cfg.gen_config())


def _eval_sets(cfg: ExperimentConfig, data_dir):
    return _load_datasets(data_dir) if data_dir else generate_datasets(cfg.family(), cfg.eval_gen_config())


def _method_names(models: list[EncoderModel], paths: list[str]) -> list[str]:
    names = [m.mode for m in models]
    if len(set(names)) < len(names):
        names = [Path(p).stem for p in paths]
    return names


def _model_hashes(models, paths) -> dict:
    # keyed by method name so the manifest does not depend on where the model lives
    return {name: _sha256(Path(p)) for name, p in zip(_method_names(models, paths), paths)}


def _params(cfg: ExperimentConfig, datasets) -> list[float]:
    pname = cfg.family().param_name
    return [d.hidden[pname] for d in datasets]


# --- commands ------------------------------------------------------------------

def cmd_gen(args, cfg: ExperimentConfig) -> int:
    out = Outputs(args.out, cfg, "gen")
    rows = []
    fam = cfg.family()
    for split, gcfg in (("train", cfg.gen_config()), ("eval", cfg.eval_gen_config())):
        for i, d in enumerate(generate_datasets(fam, gcfg)):
            rel = f"{split}/ds_{i:04d}.{args.format}"
            io.save_dataset(d, out.path(rel))
            rows.append([split, i, rel, fam.name, fam.param_name, d.hidden[fam.param_name], gcfg.seed, len(d)])
    out.csv("datasets.csv", ["split", "index", "file", "family", "param_name", "param", "seed", "tuples"], rows)
    out.manifest()
    print(f"wrote {len(rows)} datasets to {out.root}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    datasets = _train_sets(cfg, args.data)
    tcfg, arch = cfg.train_config(), cfg.arch()
    out = Outputs(args.out, cfg, "train")
    history: list[dict] = []
    model = train(datasets, tcfg, arch, history)
    model.config["name"] = cfg.name
    model.config["config_sha256"] = cfg.sha256()
    io.save_model(model, out.path("model.fenode"))
    steps = [h for h in history if "loss" in h]
    out.csv("loss.csv", ["step", "loss", "grad_norm", "avg_loss"],
            [{"avg_loss": float("nan"), **h} for h in steps])
    gram = [h for h in history if "gram_offdiag" in h]
    if gram:
        out.csv("gram_trace.csv", ["step", "gram_offdiag"], gram)
    out.manifest({"k": model.k, "mode": model.mode})
    print(f"trained {model.mode} (k={model.k}) for {tcfg.steps} steps; final loss "
          f"{steps[-1]['loss'] if steps else float('nan'):.4e}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ev = cfg.eval_settings()
    estimator = args.estimator or ev["estimator"]
    m = args.m or ev["m"]
    horizons = args.horizons or ev["horizons"]
    datasets = _eval_sets(cfg, args.data)
    models = [io.load_model(p) for p in args.model]
    table = ResultTable()
    params = _params(cfg, datasets)
    for name, model in zip(_method_names(models, args.model), models):
        res = zero_shot_mse(model, datasets, m, horizons, estimator, ev["ridge"], substeps=ev["substeps"])
        table.add(name, params, res)
    if not args.no_truth:
        table.add("true_field", params, true_field_mse(cfg.family(), datasets, horizons,
                                                       cfg.gen_config().substeps, start=m))
    out = Outputs(args.out, cfg, "eval")
    out.csv("results.csv", table.columns(), table.finalize())
    out.manifest({"estimator": estimator, "m": m, "models": _model_hashes(models, args.model)})
    _print_table(table)
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    ab = cfg.ablate_settings()
    axis = args.axis or ab["axis"]
    grid = args.grid or ab["grid"]
    if not grid:
        raise ConfigError("ablation grid is empty")
    if axis == "basis_count" and min(grid) < 1:
        raise ConfigError("basis count k must be >= 1")
    ev = cfg.eval_settings()
    horizons = args.horizons or ev["horizons"]
    evals = _eval_sets(cfg, args.data)
    params = _params(cfg, evals)
    out = Outputs(args.out, cfg, "ablate")
    extra = {}
    if axis == "basis_count":
        table = ResultTable(("k",))
        train_sets = generate_datasets(cfg.family(), cfg.gen_config())
        base = cfg.arch()
        for k in grid:
            model = train(train_sets, cfg.train_config(), replace(base, k=int(k)))
            io.save_model(model, out.path(f"models/k{int(k):03d}.fenode"))
            res = zero_shot_mse(model, evals, ev["m"], horizons, ev["estimator"], ev["ridge"],
                                substeps=ev["substeps"])
            table.add(model.mode, params, res, k=int(k))
    else:
        table = ResultTable(("m",))
        if args.model:
            model = io.load_model(args.model[0])
        else:
            model = train(generate_datasets(cfg.family(), cfg.gen_config()), cfg.train_config(), cfg.arch())
            io.save_model(model, out.path("models/model.fenode"))
        model_hash = hashlib.sha256(io.model_to_bytes(model)).hexdigest()
        start = max(grid)
        for m in grid:
            res = zero_shot_mse(model, evals, int(m), horizons, ev["estimator"], ev["ridge"],
                                eval_start=start, substeps=ev["substeps"])
            table.add(model.mode, params, res, m=int(m))
            # identification never touches the parameters
            if hashlib.sha256(io.model_to_bytes(model)).hexdigest() != model_hash:
                raise NumericError("model changed during the example-size sweep")
        extra["model_sha256"] = model_hash
    out.csv("ablation.csv", table.columns(), table.finalize())
    out.manifest({"axis": axis, "grid": [int(g) for g in grid], **extra})
    _print_table(table)
    return EXIT_OK


def cmd_mpc(args, cfg: ExperimentConfig) -> int:
    sc = cfg.mpc_scenario()
    models = [io.load_model(p) for p in args.model]
    methods = [("true_model", None)] + list(zip(_method_names(models, args.model), models))
    out = Outputs(args.out, cfg, "mpc")
    start = np.array([sc["start"][0], sc["start"][1], 0, 0, 0, 0], dtype=np.float64)
    goal = np.array([sc["goal"][0], sc["goal"][1], 0, 0, 0, 0], dtype=np.float64)
    rows = []
    for mass in sc["masses"]:
        truth = Quad2DField(mass)
        for seed in sc["seeds"]:
            mcfg = cfg.mpc_config(seed=int(seed))
            for name, model in methods:
                if model is None:
                    planner, c = truth, None
                else:
                    planner = model
                    c = identify_online(model, mass, sc["identify_tuples"], mcfg.dt, seed=10_000 + int(seed))
                ep = run_episode(truth, planner, c, start, goal, mcfg)
                cols, erows = episode_rows(ep)
                out.csv(f"episodes/{name}_mass{mass:g}_seed{seed}.csv", cols, erows)
                s = ep.summary()
                rows.append({"method": name, "mass": float(mass), "seed": int(seed), **s,
                             "tail_distance": ep.tail_distance()})
    cols = ["method", "mass", "seed", "steps", "final_distance", "mean_distance", "tail_distance",
            "slew_rate", "aborted"]
    out.csv("episodes.csv", cols, rows)
    summary = []
    for name, _ in methods:
        sel = [r for r in rows if r["method"] == name]
        summary.append({"method": name, "episodes": len(sel),
                        "median_final_distance": float(np.median([r["final_distance"] for r in sel])),
                        "median_mean_distance": float(np.median([r["mean_distance"] for r in sel])),
                        "median_slew_rate": float(np.median([r["slew_rate"] for r in sel]))})
    out.csv("summary.csv", list(summary[0]), summary)
    out.manifest({"models": _model_hashes(models, args.model)})
    for s in summary:
        print(f"{s['method']:<20} final {s['median_final_distance']:.4f} m  "
              f"slew {s['median_slew_rate']:.3f}  ({s['episodes']} episodes)")
    return EXIT_OK


def cmd_gram(args, cfg: ExperimentConfig) -> int:
    model = io.load_model(args.model[0])
    datasets = _eval_sets(cfg, args.data)
    out = Outputs(args.out, cfg, "gram")
    per = []
    for i, d in enumerate(datasets):
        g = gram_matrix(model, d)
        per.append({"dataset": i, "param": _params(cfg, [d])[0], "mean_offdiag": mean_offdiagonal(g)})
    pooled = np.mean([gram_matrix(model, d) for d in datasets], axis=0)
    k = model.k
    out.csv("gram.csv", ["row"] + [f"g{j}" for j in range(k)], [[i, *pooled[i]] for i in range(k)])
    ng = normalized_gram(pooled)
    out.csv("gram_normalized.csv", ["row"] + [f"g{j}" for j in range(k)], [[i, *ng[i]] for i in range(k)])
    out.csv("gram_offdiag.csv", ["dataset", "param", "mean_offdiag"], per)
    out.manifest({"mean_offdiag_pooled": mean_offdiagonal(pooled)})
    print(f"mean |off-diagonal| of the normalized Gram matrix: {mean_offdiagonal(pooled):.4f}")
    return EXIT_OK


def cmd_info(args, cfg: ExperimentConfig | None) -> int:
    if not args.model:
        print("presets: " + ", ".join(preset_names()))
        return EXIT_OK
    for p in args.model:
        m = io.load_model(p)
        info = {"path": p, "mode": m.mode, "k": m.k, "state_dim": m.state_dim, "control_dim": m.control_dim,
                "basis_layers": list(m.sizes), "basis_params": int(m.basis.size),
                "avg_params": 0 if m.avg is None else int(m.avg.size), "volume": m.volume,
                "config": m.config}
        print(json.dumps(info, sort_keys=True, indent=2))
    return EXIT_OK


def _print_table(table: ResultTable):
    cols = table.columns()
    print("  ".join(cols))
    for r in table.rows:
        print("  ".join(f"{r[c]:.4e}" if isinstance(r[c], float) and c not in ("param",) else str(r[c])
                        for c in cols))


# --- argument parsing -------------------------------------------------------------

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "mpc": cmd_mpc, "gram": cmd_gram, "info": cmd_info}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fenode", description="Function encoders with neural-ODE bases.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config path or preset:<name>")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", parents=[common], help="generate training and evaluation datasets")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="directory of training datasets (default: generate from config)")
    for name, helptext in (("eval", "zero-shot rollout error"), ("ablate", "basis-count or example-size sweep"),
                           ("mpc", "closed-loop quadrotor episodes"), ("gram", "Gram matrix diagnostic"),
                           ("info", "inspect a model file or list presets")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", action="append", default=[], help="model file (repeatable)")
        if name in ("eval", "ablate", "gram"):
            p.add_argument("--data", help="directory of evaluation datasets (default: generate from config)")
        if name in ("eval", "ablate"):
            p.add_argument("--horizons", type=int, nargs="+")
        if name == "eval":
            p.add_argument("--estimator", choices=["least_squares", "inner_product"])
            p.add_argument("--m", type=int, help="identification tuples per dataset")
            p.add_argument("--no-truth", action="store_true", help="omit the true-field reference rows")
        if name == "ablate":
            p.add_argument("--axis", choices=["basis_count", "example_size"])
            p.add_argument("--grid", type=int, nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.config:
            cfg = load_config(args.config, args.seed)
        elif args.command != "info":
            raise ConfigError("--config is required")
        if args.command in ("eval", "gram") and not args.model:
            raise ConfigError(f"{args.command} needs --model")
        if args.command == "mpc" and "mpc" not in cfg.raw:
            raise ConfigError("config has no mpc section")
        limiter = nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        with limiter:
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptFileError, OSError) as err:
        print(f"file error: {err}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
