"""Command line front end.

Every command reads a JSON config (optional), applies flag overrides, and
writes its artifacts plus a ``report.json`` into ``--out``. Reports embed the
merged config and the seed, and are checked against the bundled schema.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import analysis as an
from . import data as ds
from . import fidelity as fid
from . import model as mdl
from . import modify as mod
from . import selection as sel
from .errors import ConfigError, FormatError, HiFiError

COMMANDS = ("train", "score", "mfs", "prune", "unlearn", "lipschitz", "experiment")
EXPERIMENTS = ("noise", "counterfactual", "bound", "quality", "robustness", "heuristic")

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "n_per_class": 200,
    "lam": fid.DEFAULT_LAMBDA,
    # train
    "arch": "mlp",
    "hidden": [32, 32],
    "channels": [8, 8],
    "d_ff": 32,
    "blocks": 2,
    "norm": "LayerNorm",
    "epochs": 20,
    "batch_size": 32,
    "lr": 0.05,
    # prune / unlearn
    "keep_fraction": 0.7,
    "mode": mod.UNION,
    "iterations": 1,
    "compensate": True,
    "recalibrate": True,
    "compact": False,
    "fraction": 0.1,
    "variant": mod.ZERO,
    # mfs
    "methods": [sel.NAIVE, sel.EXHAUSTIVE],
    "eta": None,
    "budget": sel.DEFAULT_BUDGET,
    # experiments
    "sigmas": [0.01, 0.05, 0.1],
    "targets": [an.HIFI, an.NON_HIFI, an.RANDOM],
    "repeats": 5,
    "level": an.INPUT,
    "sizes": None,
    "n_masks": 20,
    "noise_scales": [0.0, 0.5, 1.0, 2.0],
}

# flag name -> (type, help)
KNOBS = {
    "layers": (str, "comma separated layer indices"),
    "layer": (int, "single layer index"),
    "channels_sel": (str, "comma separated output channels (mfs)"),
    "keep_fraction": (float, "fraction of live input components to keep"),
    "mode": (str, "prune keep-set rule: union or budget"),
    "iterations": (int, "prune passes"),
    "k": (str, "subset size(s), comma separated"),
    "eta": (float, "fidelity threshold for HiFi checks"),
    "lam": (float, "ridge regularizer for compensation solves"),
    "sigma": (float, "noise standard deviation (experiment noise)"),
    "fraction": (float, "component fraction (unlearn, noise)"),
    "n_samples": (int, "Monte-Carlo subsets per size"),
    "n_per_class": (int, "samples per class drawn from a source"),
    "forget_class": (int, "class to unlearn"),
    "variant": (str, "unlearning variant (zero|negate) or CSM variant (plain|centered)"),
    "experiment": (str, "experiment name: " + ", ".join(EXPERIMENTS)),
    "csm": (str, "CSM dump to sweep instead of model + data"),
    "arch": (str, "train architecture: mlp, cnn or ffn"),
    "epochs": (int, "training epochs"),
}


def _schema():
    text = resources.files("hifikit").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hifikit", description="High-fidelity component scoring, pruning and unlearning.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file; flags override its values")
        s.add_argument("--model", help="model JSON")
        s.add_argument("--data", help="dataset or source spec JSON")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        for knob, (typ, help_) in KNOBS.items():
            s.add_argument("--" + knob.replace("_", "-"), dest=knob, type=typ, help=help_)
        s.add_argument("--no-compensate", dest="compensate", action="store_false", default=None)
        s.add_argument("--no-recalibrate", dest="recalibrate", action="store_false", default=None)
        s.add_argument("--compact", dest="compact", action="store_true", default=None)
    return p


def _int_list(v):
    if v is None or isinstance(v, list):
        return v
    if isinstance(v, int):
        return [v]
    return [int(t) for t in str(v).split(",") if t.strip()]


def merge_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key != "config" and val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    for key in ("layers", "k", "channels_sel"):
        cfg[key] = _int_list(cfg.get(key))
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


# --------------------------------------------------------------- inputs


def _path(cfg, key):
    v = cfg.get(key)
    if not v:
        raise ConfigError(f"--{key} is required for {cfg['command']}")
    if not Path(v).exists():
        raise ConfigError(f"{key} path {v} does not exist")
    return v


def _load_model(cfg):
    return mdl.load_model(_path(cfg, "model"))


def _load_data(cfg):
    return ds.load_data_file(_path(cfg, "data"))


def _samples(data, cfg, seed, classes=None):
    """A labeled dataset: drawn from a source, or the given dataset (optionally restricted)."""
    if isinstance(data, ds.SyntheticSource):
        return ds.sample(data, cfg["n_per_class"], classes=classes, seed=seed)
    return data if classes is None else data.subset(classes)


class _Seeds:
    """Every random draw of a command comes from one generator seeded by ``seed``."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def next(self) -> int:
        return int(self.rng.integers(0, 2**31 - 1))


def _target_layers(model, cfg):
    layers = cfg.get("layers")
    if layers:
        return layers
    tapped = mdl.tappable_layers(model)
    # the classifier head is left alone by default
    return tapped[:-1] if len(tapped) > 1 else tapped


def _write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=an._jsonable) + "\n")


# ------------------------------------------------------------- commands


def cmd_train(cfg, seeds, out):
    data = _load_data(cfg)
    train_data = _samples(data, cfg, seeds.next())
    eval_data = _samples(data, cfg, seeds.next()) if isinstance(data, ds.SyntheticSource) else None
    shape = tuple(train_data.x.shape[1:])
    init_seed = seeds.next()
    arch = cfg["arch"]
    if arch == "mlp":
        model = mdl.mlp(int(np.prod(shape)), cfg["hidden"], train_data.class_count, init_seed)
        if len(shape) != 1:
            raise ConfigError("mlp needs flat inputs")
    elif arch == "cnn":
        model = mdl.cnn(shape, cfg["channels"], train_data.class_count, init_seed)
    elif arch == "ffn":
        model = mdl.ffn_classifier(shape[0], shape[1], cfg["d_ff"], train_data.class_count, cfg["blocks"], init_seed, cfg["norm"])
    else:
        raise ConfigError(f"unknown arch {arch!r}")
    tc = mdl.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=seeds.next())
    history = []
    model = mdl.train(model, train_data, tc, history)
    mdl.save_model(model, out / "model.json")
    results = {
        "train_accuracy": mdl.accuracy(model, train_data),
        "loss_history": history,
        "params": mdl.parameter_count(model),
    }
    if eval_data is not None:
        results["eval_accuracy"] = mdl.accuracy(model, eval_data)
    return results, ["model.json"]


def cmd_score(cfg, seeds, out):
    model = _load_model(cfg)
    x = _samples(_load_data(cfg), cfg, seeds.next()).x
    layers = cfg.get("layers") or mdl.tappable_layers(model)
    variant = cfg["variant"] if cfg.get("variant") in (fid.PLAIN, fid.CENTERED) else None
    dump, per_layer = [], []
    for idx in layers:
        csms = fid.estimate_csms(model, x, idx, variant)
        dump += csms
        per_layer.append(
            {
                "layer": idx,
                "variant": csms[0].variant,
                "singleton": fid.layer_scores(csms),
                "alpha": np.stack([fid.singleton_scores(c).alpha for c in csms]),
                "saliency": np.stack([fid.saliency(c) for c in csms]),
                "total_energy": [c.total_energy for c in csms],
            }
        )
    fid.save_csms(dump, out / "csms.json")
    return {"layers": per_layer, "n_samples": len(x)}, ["csms.json"]


def cmd_mfs(cfg, seeds, out):
    if cfg.get("csm"):
        csms = fid.load_csms(_path(cfg, "csm"))
    else:
        model = _load_model(cfg)
        x = _samples(_load_data(cfg), cfg, seeds.next()).x
        layer = cfg.get("layer")
        if layer is None:
            raise ConfigError("mfs needs --layer or --csm")
        csms = fid.estimate_csms(model, x, layer)
    if cfg.get("channels_sel"):
        csms = [csms[c] for c in cfg["channels_sel"]]
    methods = cfg["methods"]
    rows, hifi = [], []
    mc_seed = seeds.next()
    for c in csms:
        ks = cfg.get("k") or list(range(1, c.dim + 1))
        rows += sel.mfs_sweep(c, ks, methods, cfg["lam"], n_samples=cfg.get("n_samples"), seed=mc_seed, budget=cfg["budget"])
        if cfg.get("eta") is not None:
            for k in ks:
                found = sel.hifi_check(c, k, cfg["eta"], methods[-1], cfg["lam"], n_samples=cfg.get("n_samples"), seed=mc_seed, budget=cfg["budget"])
                hifi.append({"layer": c.layer, "channel": c.channel, "k": k, "found": found is not None, "indices": list(found.indices) if found else None})
    sel.write_sweep_csv(rows, out / "mfs.csv")
    results = {"curves": rows}
    if hifi:
        results["hifi_sets"] = hifi
    return results, ["mfs.csv"]


def cmd_prune(cfg, seeds, out):
    model = _load_model(cfg)
    data = _load_data(cfg)
    calib_seed, eval_seed = seeds.next(), seeds.next()
    eval_data = _samples(data, cfg, eval_seed)
    plan = mod.PrunePlan(
        layers=_target_layers(model, cfg),
        keep_fraction=cfg["keep_fraction"],
        lam=cfg["lam"],
        recalibrate=cfg["recalibrate"],
        compensate=cfg["compensate"],
        mode=cfg["mode"],
        iterations=cfg["iterations"],
        n_per_class=cfg["n_per_class"],
        seed=calib_seed,
    )
    pruned, report = mod.modhifi_prune(model, plan, data, eval_data)
    files = ["model.json"]
    if cfg["compact"]:
        pruned = mod.compact(pruned)
        report["metrics_compact"] = mod.evaluate(pruned, eval_data)
    mdl.save_model(pruned, out / "model.json")
    return report, files


def cmd_unlearn(cfg, seeds, out):
    model = _load_model(cfg)
    data = _load_data(cfg)
    fc = cfg.get("forget_class")
    if fc is None:
        raise ConfigError("unlearn needs --forget-class")
    if not 0 <= fc < model.class_count:
        raise ConfigError(f"forget class {fc} outside model head")
    variant = cfg["variant"] if cfg["variant"] in (mod.ZERO, mod.NEGATE) else mod.ZERO
    k = cfg.get("k")
    plan = mod.UnlearnPlan(fc, _target_layers(model, cfg), k=k[0] if k else None, fraction=cfg["fraction"], variant=variant)
    forget = _samples(data, cfg, seeds.next(), classes=[fc])
    eval_data = _samples(data, cfg, seeds.next())
    new, report = mod.modhifi_unlearn(model, plan, forget, eval_data)
    mdl.save_model(new, out / "model.json")
    return report, ["model.json"]


def cmd_lipschitz(cfg, seeds, out):
    model = _load_model(cfg)
    data = _samples(_load_data(cfg), cfg, seeds.next()) if cfg.get("data") else None
    results = an.lipschitz_report(model, data)
    if data is not None and cfg["n_masks"] > 0:
        checks = []
        for idx in cfg.get("layers") or mdl.tappable_layers(model):
            masks = an.random_masks(mdl.component_shape(model.layers[idx]), cfg["n_masks"], seeds.next())
            checks += an.bound_check(model, idx, masks, data)
        results["bound_checks"] = checks
        results["all_satisfied"] = all(c.satisfied for c in checks)
    return results, []


def cmd_experiment(cfg, seeds, out):
    name = cfg.get("experiment")
    if name not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")
    model = _load_model(cfg)
    data = _load_data(cfg)
    calib = _samples(data, cfg, seeds.next())
    evald = _samples(data, cfg, seeds.next())
    layer = cfg.get("layer")
    if layer is None and name in ("noise", "counterfactual", "robustness", "heuristic"):
        raise ConfigError(f"experiment {name} needs --layer")
    rows = []
    if name in ("noise", "counterfactual"):
        scores = an.component_scores(model, layer, calib)
        if name == "noise":
            sigmas = [cfg["sigma"]] if cfg.get("sigma") is not None else cfg["sigmas"]
            for sigma in sigmas:
                for target in cfg["targets"]:
                    draws = [
                        an.noise_experiment(model, layer, scores, sigma, cfg["fraction"], target, seeds.next(), evald, cfg["level"])
                        for _ in range(cfg["repeats"])
                    ]
                    rows.append({"sigma": sigma, "target": target, "fraction": cfg["fraction"], "accuracy_delta": float(np.mean(draws))})
        else:
            c_in = scores.shape[1]
            sizes = cfg.get("sizes") or sorted({max(1, c_in // 4), max(1, c_in // 2)})
            for size in sizes:
                for kind in cfg["targets"]:
                    d = an.counterfactual_removal(model, layer, scores, kind, size, seeds.next(), evald, cfg["level"])
                    rows.append({"size": size, "kind": kind, "accuracy_delta": d})
    elif name == "bound":
        for idx in cfg.get("layers") or mdl.tappable_layers(model):
            masks = an.random_masks(mdl.component_shape(model.layers[idx]), cfg["n_masks"], seeds.next())
            rows += [an.asdict(r) for r in an.bound_check(model, idx, masks, evald)]
    elif name == "quality":
        if not isinstance(data, ds.SyntheticSource):
            raise ConfigError("quality ablation needs a source spec as --data")
        plan = mod.PrunePlan(
            _target_layers(model, cfg), cfg["keep_fraction"], cfg["lam"], mode=cfg["mode"], n_per_class=cfg["n_per_class"], seed=seeds.next()
        )
        rows = an.quality_ablation(model, plan, data, cfg["noise_scales"], evald)
    elif name == "robustness":
        if not isinstance(data, ds.SyntheticSource):
            raise ConfigError("sample-size robustness needs a source spec as --data")
        sizes = cfg.get("sizes") or [5, 10, 25, 50]
        rows = an.sample_size_robustness(model, layer, data, sizes, cfg["n_per_class"], seeds=(seeds.next(), seeds.next(), seeds.next()))
    elif name == "heuristic":
        rows = an.heuristic_agreement(model, layer, calib, cfg["lam"])
    an.write_csv(rows, out / f"{name}.csv")
    return {"experiment": name, "rows": rows}, [f"{name}.csv"]


HANDLERS = {
    "train": cmd_train,
    "score": cmd_score,
    "mfs": cmd_mfs,
    "prune": cmd_prune,
    "unlearn": cmd_unlearn,
    "lipschitz": cmd_lipschitz,
    "experiment": cmd_experiment,
}


def run(cfg: dict) -> dict:
    """Execute one command from a merged config and return its report."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = _Seeds(cfg["seed"])
    results, files = HANDLERS[cfg["command"]](cfg, seeds, out)
    report = {
        "command": cfg["command"],
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "results": results,
        "outputs": sorted(files + ["report.json"]),
    }
    # round-trip through JSON so numpy values and dataclasses are plain
    report = json.loads(json.dumps(report, default=an._jsonable))
    jsonschema.validate(report, _schema())
    _write_json(report, out / "report.json")
    return report


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(merge_config(args))
    except HiFiError as exc:
        print(f"hifikit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, TypeError) as exc:
        print(f"hifikit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"hifikit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
