"""Command-line entry point.

Every subcommand prints exactly one JSON object on stdout and logs to
stderr.  Exit status: 0 on success, 2 on invalid input, 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__

log = logging.getLogger("ldpot")

OUT_DIR_ENV = "LDPOT_OUT_DIR"


class ConfigError(ValueError):
    pass


class _UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# schema: section -> key -> (type, default)
# type names: int, float, str, bool, list, intlist, floatlist, path, opt_float, opt_path

SCHEMA = {
    "synth": {
        "kind": ("str", "half_circle"),
        "radius": ("float", 1.0),
        "semi_axes": ("floatlist", [2.0, 1.0]),
        "sides": ("floatlist", [2.0, 1.0]),
        "center": ("floatlist", [0.0, 0.0]),
        "n": ("int", 1000),
        "out": ("path", "data.csv"),
    },
    "privatize": {
        "mech": ("str", "laplace"),
        "eps": ("float", 1.0),
        "delta": ("opt_float", None),
        "sensitivity": ("float", 1.0),
        "in": ("path", None),
        "out": ("path", "privatized.csv"),
    },
    "sinkhorn": {
        "x": ("path", None),
        "y": ("path", None),
        "p": ("int", 2),
        "lambda": ("float", 1.0),
        "tol": ("float", 1e-9),
        "max_iter": ("int", 10000),
        "scaling": ("opt_float", None),
    },
    "train": {
        "data": ("path", None),
        "loss": ("str", "entropic"),
        "p": ("int", 2),
        "lambda": ("opt_float", None),
        "batch": ("int", 256),
        "sinkhorn_iters": ("int", 100),
        "lr": ("float", 1e-3),
        "lr_schedule": ("str", "constant"),
        "optimizer": ("str", "rmsprop"),
        "steps": ("int", 3000),
        "hidden": ("intlist", [256, 256]),
        "latent_dim": ("int", 2),
        "latent_law": ("str", "uniform(-1,1)"),
        "output": ("str", "linear"),
        "eval_every": ("int", 0),
        "eval_raw": ("opt_path", None),
        "out": ("path", "model.ckpt"),
        "history": ("path", "history.csv"),
    },
    "eval": {
        "model": ("path", None),
        "raw": ("opt_path", None),
        "priv": ("opt_path", None),
        "manifold": ("str", None),
        "samples": ("int", 1024),
        "p": ("int", 2),
        "lambda": ("float", 1.0),
        "out": ("path", "metrics.json"),
    },
    "deconv_check": {
        "grid": ("int", 16),
        "sigma": ("float", 0.2),
        "mech": ("str", "gaussian"),
        "max_iter": ("int", 20000),
        "tol": ("float", 1e-14),
    },
    "rate_study": {
        "n_values": ("intlist", [1000, 4000, 16000, 64000]),
        "seeds": ("intlist", [0, 1, 2]),
        "manifold": ("str", "half_circle:1.0"),
        "mechanism": ("str", "gaussian"),
        "epsilon": ("float", 5.0),
        "delta": ("float", 1e-4),
        "hidden": ("intlist", [64, 64]),
        "batch": ("int", 256),
        "steps": ("int", 3000),
        "lr": ("float", 1e-3),
        "lr_schedule": ("str", "cosine"),
        "sinkhorn_iters": ("int", 100),
        "holdout": ("int", 20000),
        "eval_batch": ("int", 200),
        "eval_batches": ("int", 100),
        "baseline": ("str", "reference"),
        "reference_n": ("int", 256000),
        "out": ("path", "rate.csv"),
        "plot": ("opt_path", None),
    },
    "plot": {
        "csv": ("opt_path", None),
        "x": ("str", None),
        "y": ("str", None),
        "points": ("list", []),
        "logx": ("bool", False),
        "logy": ("bool", False),
        "title": ("str", ""),
        "out": ("path", "plot.svg"),
    },
}

TOP_KEYS = {"command", "seed", "out_dir", "threads"}


def _check_type(value, kind, pointer):
    def bad(expected):
        return ConfigError(f"{pointer}: expected {expected}, got {type(value).__name__} {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("integer")
    elif kind in ("float", "opt_float"):
        if value is None and kind == "opt_float":
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("number")
        return float(value)
    elif kind in ("str", "path", "opt_path"):
        if value is None and kind != "str":
            return value
        if not isinstance(value, str):
            raise bad("string")
    elif kind == "bool":
        if not isinstance(value, bool):
            raise bad("boolean")
    elif kind == "list":
        if not isinstance(value, list):
            raise bad("array")
    elif kind in ("intlist", "floatlist"):
        if not isinstance(value, list):
            raise bad("array")
        for i, v in enumerate(value):
            _check_type(v, "int" if kind == "intlist" else "float", f"{pointer}/{i}")
        if kind == "floatlist":
            return [float(v) for v in value]
    return value


def load_config(path) -> dict:
    """Strictly parse a JSON run configuration; unknown keys and wrong types are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(raw)


def validate_config(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("/: expected an object")
    out = {}
    for key, value in raw.items():
        if key in TOP_KEYS:
            if key == "seed":
                out[key] = _check_type(value, "int", "/seed")
            elif key == "threads":
                out[key] = _check_type(value, "int", "/threads")
            else:
                out[key] = _check_type(value, "str", f"/{key}")
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"/{key}: expected an object")
            sec = {}
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    raise ConfigError(f"/{key}/{k}: unknown key")
                sec[k] = _check_type(v, SCHEMA[key][k][0], f"/{key}/{k}")
            out[key] = sec
        else:
            raise ConfigError(f"/{key}: unknown key")
    if "command" in out and out["command"].replace("-", "_") not in SCHEMA:
        raise ConfigError(f"/command: unknown command {out['command']!r}")
    return out


# --------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _flag(key):
    return "--" + key.replace("_", "-")


def _add_section_flags(sp, section):
    for key, (kind, _default) in SCHEMA[section].items():
        kw = {"dest": key, "default": argparse.SUPPRESS}
        if kind == "bool":
            sp.add_argument(_flag(key), action="store_true", **kw)
            continue
        if kind == "int":
            kw["type"] = int
        elif kind in ("float", "opt_float"):
            kw["type"] = float
        elif kind in ("intlist", "floatlist"):
            conv = int if kind == "intlist" else float
            kw["type"] = lambda s, conv=conv: [conv(v) for v in s.split(",") if v.strip()]
        elif kind == "list":
            kw["action"] = "append"
        flags = [_flag(key)]
        if key == "in":
            flags = ["--in"]
        sp.add_argument(*flags, **kw)


def build_parser():
    parser = _Parser(prog="ldpot", description="Entropic transport training on locally privatized data.")
    parser.add_argument("--version", action="version", version=f"ldpot {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for section in SCHEMA:
        sp = sub.add_parser(section.replace("_", "-"), parents=[common])
        _add_section_flags(sp, section)
    return parser


def resolve(argv):
    """Merge defaults, config file and flags; returns ``(command, params, top, overrides)``."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    if command is None:
        raise _UsageError("a subcommand is required")
    section = command.replace("-", "_")
    cfg = load_config(ns.pop("config")) if ns.get("config") else {}
    ns.pop("config", None)
    verbose = ns.pop("verbose", False)
    if "command" in cfg and cfg["command"].replace("-", "_") != section:
        raise ConfigError(f"/command: config is for {cfg['command']!r}, not {command!r}")
    params = {k: v[1] for k, v in SCHEMA[section].items()}
    params.update(cfg.get(section, {}))
    top = {"seed": cfg.get("seed", 0), "out_dir": cfg.get("out_dir", os.environ.get(OUT_DIR_ENV, ".")),
           "threads": cfg.get("threads", os.cpu_count() or 1)}
    overrides = {}
    for key, value in ns.items():
        if key in top:
            top[key] = value
        else:
            params[key] = value
        overrides[key] = value
    top["verbose"] = verbose
    return section, params, top, overrides


# --------------------------------------------------------------------------
# commands

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    def __init__(self, params, top):
        self.params = params
        self.top = top
        self.inputs = {}
        self.outputs = {}
        self.out_dir = os.path.abspath(top["out_dir"])

    def need(self, key):
        value = self.params.get(key)
        if value is None:
            raise ConfigError(f"missing required option {_flag(key)}")
        return value

    def inp(self, key, required=True):
        value = self.need(key) if required else self.params.get(key)
        if value is None:
            return None
        path = os.path.abspath(value)
        if not os.path.isfile(path):
            raise ConfigError(f"{_flag(key)}: no such file {value!r}")
        self.inputs[key] = {"path": path, "sha256": _sha256(path)}
        return path

    def out(self, key):
        value = self.params.get(key)
        if value is None:
            return None
        path = value if os.path.isabs(value) else os.path.join(self.out_dir, value)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.outputs[key] = {"path": path}
        return path

    def finish(self):
        for entry in self.outputs.values():
            if os.path.isfile(entry["path"]):
                entry["sha256"] = _sha256(entry["path"])
        return {"inputs": self.inputs, "outputs": self.outputs}


def cmd_synth(run):
    from .datasets import ManifoldSpec, save_csv, synth_manifold

    p = run.params
    spec = ManifoldSpec(kind=p["kind"], n=p["n"], seed=run.top["seed"], radius=p["radius"],
                        semi_axes=tuple(p["semi_axes"]), sides=tuple(p["sides"]), center=tuple(p["center"]))
    data = synth_manifold(spec)
    save_csv(data, run.out("out"))
    return {"n": data.n, "d": data.d, "bounds": data.metadata()["bounds"]}


def cmd_privatize(run):
    from .datasets import load_csv, save_csv
    from .privacy import calibrate_gaussian, calibrate_laplace, privatize

    p = run.params
    if p["mech"] == "laplace":
        if p["delta"] not in (None, 0.0):
            raise ConfigError("--delta applies to the gaussian mechanism only")
        mech = calibrate_laplace(p["sensitivity"], p["eps"])
    elif p["mech"] == "gaussian":
        if p["delta"] is None:
            raise ConfigError("gaussian mechanism needs --delta")
        mech = calibrate_gaussian(p["sensitivity"], p["eps"], p["delta"])
    else:
        raise ConfigError(f"--mech: unknown mechanism {p['mech']!r}")
    data = load_csv(run.inp("in"))
    out = privatize(data, mech, seed=run.top["seed"])
    save_csv(out, run.out("out"))
    return {"mechanism": mech.to_dict(), "n": out.n}


def cmd_sinkhorn(run):
    from .datasets import load_csv
    from .ot import lp_cost, sinkhorn

    p = run.params
    if p["p"] not in (1, 2):
        raise ConfigError("--p must be 1 or 2")
    X = load_csv(run.inp("x")).points
    Y = load_csv(run.inp("y")).points
    plan = sinkhorn(lp_cost(X, Y, p["p"]), lam=p["lambda"], tol=p["tol"], max_iter=p["max_iter"],
                    epsilon_scaling=p["scaling"])
    return {"value": plan.objective, "transport_cost": plan.transport_cost,
            "mutual_information": plan.mutual_information, "iterations": plan.iterations,
            "marginal_residual": plan.marginal_residual, "converged": plan.converged}


def cmd_train(run):
    from .datasets import load_csv
    from .generator import LatentSpec, MlpGenerator, save_checkpoint
    from .trainer import TrainConfig, train

    p = run.params
    loss = {"unreg": "unregularized"}.get(p["loss"], p["loss"])
    data = load_csv(run.inp("data"))
    raw = run.inp("eval_raw", required=False)
    raw = load_csv(raw) if raw else None
    if loss != "unregularized" and p["lambda"] is None:
        raise ConfigError("--lambda is required for regularized losses")
    cfg = TrainConfig(loss=loss, p=p["p"], lam=p["lambda"], batch=p["batch"], sinkhorn_iters=p["sinkhorn_iters"],
                      lr=p["lr"], lr_schedule=p["lr_schedule"], optimizer=p["optimizer"], steps=p["steps"],
                      seed=run.top["seed"],
                      eval_every=p["eval_every"])
    gen = MlpGenerator((p["latent_dim"], *p["hidden"], data.d), p["output"], seed=run.top["seed"],
                       latent=LatentSpec(p["latent_dim"], p["latent_law"]))
    gen, hist = train(data, gen, cfg, eval_raw=raw)
    save_checkpoint(gen, run.out("out"), extra={"train": cfg.to_dict()})
    hist.to_csv(run.out("history"))
    last = hist.records[-1] if hist.records else {}
    return {"steps": cfg.steps, "final": last, "unconverged_steps": len(hist.unconverged_steps)}


def cmd_eval(run):
    from ._rng import substream
    from .datasets import ManifoldSpec, load_csv
    from .generator import load_checkpoint
    from .metrics import empirical_w2, manifold_error
    from .ot import lp_cost, sinkhorn

    p = run.params
    gen = load_checkpoint(run.inp("model"))
    X = gen.sample(p["samples"], rng=substream(run.top["seed"], "eval"))
    rng = substream(run.top["seed"], "split")
    metrics = {"samples": p["samples"]}
    if p["manifold"]:
        spec = ManifoldSpec.parse(p["manifold"])
        metrics["manifold"] = p["manifold"]
        metrics["manifold_error"] = manifold_error(X, spec)
    raw = run.inp("raw", required=False)
    if raw:
        R = load_csv(raw).points
        R = R[rng.choice(R.shape[0], size=min(p["samples"], R.shape[0]), replace=False)]
        metrics["w2_raw"] = empirical_w2(X[:R.shape[0]], R)
    priv = run.inp("priv", required=False)
    if priv:
        Q = load_csv(priv).points
        Q = Q[rng.choice(Q.shape[0], size=min(p["samples"], Q.shape[0]), replace=False)]
        sol = sinkhorn(lp_cost(X, Q, p["p"]), lam=p["lambda"], tol=1e-6, max_iter=10000)
        metrics["wlam_priv"] = sol.objective
    with open(run.out("out"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def cmd_deconv_check(run):
    from ._rng import substream
    from .deconv import GridModel, entropic_projection, total_variation

    p = run.params
    if p["grid"] < 2:
        raise ConfigError("--grid must be at least 2")
    x = np.linspace(0.0, 1.0, p["grid"])
    p_x = substream(run.top["seed"], "data").dirichlet(np.ones(p["grid"]))
    model = GridModel.additive(x, p["sigma"], p["mech"], p_x=p_x)
    res = entropic_projection(model, tol=p["tol"], max_iter=p["max_iter"])
    return {"tv_error": total_variation(res.q, p_x), "objective": res.objective, "iterations": res.iterations,
            "residual": res.residual, "converged": res.converged}


def cmd_rate_study(run):
    from .metrics import RateStudyConfig, plot_svg, rate_study

    p = run.params
    cfg = RateStudyConfig(manifold=p["manifold"], mechanism=p["mechanism"], epsilon=p["epsilon"],
                          delta=p["delta"], hidden=tuple(p["hidden"]),
                          train={"batch": p["batch"], "steps": p["steps"], "lr": p["lr"],
                                 "lr_schedule": p["lr_schedule"], "sinkhorn_iters": p["sinkhorn_iters"]},
                          holdout=p["holdout"], eval_batch=p["eval_batch"], eval_batches=p["eval_batches"],
                          baseline=p["baseline"], reference_n=p["reference_n"])
    seeds = [run.top["seed"] + s for s in p["seeds"]]
    res = rate_study(cfg, p["n_values"], seeds,
                     progress=lambda n, s, d: log.info("n=%d seed=%d distance=%.6g", n, s, d))
    with open(run.out("out"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("n,distance,gap\n")
        for row in res.to_rows():
            fh.write(f"{row['n']},{row['distance']!r},{row['gap']!r}\n")
    if p["plot"]:
        plot_svg([{"x": res.n_values, "y": res.gaps, "label": "gap"}], run.out("plot"), logx=True, logy=True,
                 xlabel="n", ylabel="gap")
    return {"slope": res.slope, "intercept": res.intercept, "residual": res.residual, "n_values": res.n_values,
            "gaps": res.gaps, "excluded": res.excluded}


def cmd_plot(run):
    import csv

    from .datasets import load_csv
    from .metrics import plot_svg

    p = run.params
    series = []
    if p["csv"]:
        path = run.inp("csv")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for col in (p["x"], p["y"]):
            if not col or not rows or col not in rows[0]:
                raise ConfigError(f"column {col!r} not found in {p['csv']}")
        series.append({"x": [float(r[p["x"]]) for r in rows], "y": [float(r[p["y"]]) for r in rows],
                       "label": p["y"]})
    for k, pts in enumerate(p["points"] or []):
        path = os.path.abspath(pts)
        if not os.path.isfile(path):
            raise ConfigError(f"--points: no such file {pts!r}")
        run.inputs[f"points[{k}]"] = {"path": path, "sha256": _sha256(path)}
        P = load_csv(path).points
        series.append({"x": P[:, 0], "y": P[:, 1], "label": os.path.basename(pts), "style": "scatter"})
    plot_svg(series, run.out("out"), title=p["title"], logx=p["logx"], logy=p["logy"])
    return {"series": len(series)}


COMMANDS = {
    "synth": cmd_synth,
    "privatize": cmd_privatize,
    "sinkhorn": cmd_sinkhorn,
    "train": cmd_train,
    "eval": cmd_eval,
    "deconv_check": cmd_deconv_check,
    "rate_study": cmd_rate_study,
    "plot": cmd_plot,
}


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run(argv=None) -> int:
    """Execute one command line; returns the exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        section, params, top, overrides = resolve(argv)
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except (_UsageError, ConfigError, OSError) as exc:
        print(f"ldpot: error: {exc}", file=sys.stderr)
        _emit({"status": "error", "kind": "validation", "error": str(exc)})
        return 2
    logging.basicConfig(level=logging.INFO if top["verbose"] else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    job = _Run(params, top)
    record = {"command": section.replace("_", "-"), "version": __version__, "seed": top["seed"],
              "config": {"seed": top["seed"], "out_dir": job.out_dir, "threads": top["threads"],
                         section: params},
              "overrides": overrides}
    t0 = time.perf_counter()
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=max(1, int(top["threads"]))):
            result = COMMANDS[section](job)
    except ValueError as exc:
        print(f"ldpot: error: {exc}", file=sys.stderr)
        _emit({**record, "status": "error", "kind": "validation", "error": str(exc)})
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        _emit({**record, "status": "error", "kind": "runtime", "error": f"{type(exc).__name__}: {exc}"})
        return 1
    record.update({"status": "ok", "result": result, "provenance": job.finish(),
                   "seconds": time.perf_counter() - t0})
    _emit(record)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
