"""Command-line experiment runner.

Usage::

    rpmkit run <config.ini> [--seed S] [--out DIR] [--iters N]
    rpmkit validate <config.ini>
    rpmkit datagen <config.ini> [--seed S] [--out DIR]
    rpmkit selftest

Configs are INI files with sections ``[experiment]``, ``[data]``, ``[model]``
and ``[optim]``; the keys accepted by each experiment are listed in
:data:`SCHEMAS` and in the README. Exit codes: 0 success, 1 failed
self-test, 2 configuration error, 3 numerical abort.
"""

import argparse
import configparser
import contextlib
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .report import NumericalAbort, config_hash

__all__ = ["ConfigError", "SCHEMAS", "resolve_config", "main"]

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
EXPERIMENTS = ("peer", "lda", "gpfa", "datagen", "selftest")
METHODS = ("mc", "second-order", "interior-bound")


class ConfigError(ValueError):
    """Invalid configuration; ``diagnostics`` lists every problem found."""

    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Field:
    kind: str  # int, float, bool, str, ints, seeds, choice, path, paths
    default: object = None
    low: float = None
    choices: tuple = ()
    optional: bool = False


def _int(default, low=None):
    return Field("int", default, low)


def _float(default, low=None):
    return Field("float", default, low)


_EXPERIMENT = {
    "name": Field("choice", None, choices=EXPERIMENTS),
    "seeds": Field("seeds", (0,)),
    "out": Field("str", "runs/out"),
}

_OPTIM = {
    "lr": _float(1e-3, 0.0),
    "iters": _int(200, 0),
    "m_steps": _int(1, 1),
}


def _ball_fields():
    from .datagen import BouncingBallConfig

    out = {"variant": Field("choice", "textured", choices=("textured", "structured"))}
    for f in dataclasses.fields(BouncingBallConfig):
        if f.name in ("seed", "variant", "dynamics"):
            continue
        kind = "int" if isinstance(f.default, int) else "float"
        out[f.name] = Field(kind, f.default)
    return out


def _schemas():
    ball = _ball_fields()
    return {
        "peer": {
            "data": {
                "source": Field("choice", "synthetic", choices=("synthetic", "idx")),
                "n_classes": _int(10, 2),
                "pairs_per_class": _int(20, 1),
                "test_per_class": _int(100, 0),
                "side": _int(12, 2),
                "noise": _float(0.5, 0.0),
                "images": Field("path", None, optional=True),
                "labels": Field("path", None, optional=True),
                "max_pairs": _int(2000, 1),
            },
            "model": {"K": _int(10, 2), "hidden": Field("ints", (50,)), "learn_prior": Field("bool", False)},
            "optim": {**_OPTIM, "lr": _float(3e-3, 0.0)},
        },
        "lda": {
            "data": {
                "source": Field("choice", "synthetic", choices=("synthetic", "pgm")),
                "n_images": _int(100, 1),
                "grid": _int(4, 1),
                "patch_size": _int(8, 2),
                "n_textures": _int(3, 1),
                "concentration": _float(0.3, 0.0),
                "noise": _float(1.0, 0.0),
                "images": Field("paths", None, optional=True),
            },
            "model": {"K": _int(3, 1), "alpha": _float(1.0, 0.0), "hidden": Field("ints", (50,)),
                      "top_m": _int(5, 1)},
            "optim": {**_OPTIM, "lr": _float(3e-3, 0.0), "iters": _int(100, 0)},
        },
        "gpfa": {
            "data": ball,
            "model": {
                "K": _int(1, 1),
                "M": _int(20, 1),
                "method": Field("choice", "second-order", choices=METHODS),
                "hidden": Field("ints", (50, 50)),
                "conv_channels": Field("ints", (8, 8)),
                "conv_kernel": _int(5, 1),
                "conv_pool": _int(2, 1),
                "mc_samples": _int(20, 1),
                "init_lengthscale": Field("float", 3.0, 0.0, optional=True),
                "init_variance": _float(1.0, 0.0),
                "learn_kernel": Field("bool", False),
            },
            "optim": {"lr": _float(1e-3, 0.0), "lr_variational": _float(2e-2, 0.0), "iters": _int(2000, 0)},
        },
        "datagen": {
            "data": {
                "kind": Field("choice", "textured", choices=("textured", "structured", "digits", "textures")),
                **{k: v for k, v in ball.items() if k != "variant"},
                "n_classes": _int(10, 1),
                "per_class": _int(400, 1),
                "side": _int(12, 2),
                "noise": _float(0.5, 0.0),
                "n_images": _int(100, 1),
                "grid": _int(4, 1),
                "patch_size": _int(8, 2),
                "n_textures": _int(3, 1),
                "concentration": _float(0.3, 0.0),
                "patch_noise": _float(1.0, 0.0),
            },
            "model": {},
            "optim": {},
        },
        "selftest": {"data": {}, "model": {}, "optim": {}},
    }


SCHEMAS = _schemas()


# ---------------------------------------------------------------------------
# parsing


def _parse_value(name, field, raw, base_dir):
    raw = raw.strip()
    if raw == "" and field.optional:
        return None
    kind = field.kind
    try:
        if kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError
        elif kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            value = low in ("true", "yes", "1", "on")
        elif kind == "ints":
            value = tuple(int(v) for v in raw.replace(",", " ").split())
        elif kind == "seeds":
            value = _parse_seeds(raw)
        elif kind == "choice":
            if raw not in field.choices:
                raise KeyError
            value = raw
        elif kind == "path":
            value = str((base_dir / raw).resolve()) if raw else None
        elif kind == "paths":
            value = tuple(str((base_dir / p).resolve()) for p in raw.replace(",", " ").split())
        else:
            value = raw
    except KeyError:
        raise ValueError(f"{name}: unknown value {raw!r}; choose from {{{', '.join(field.choices)}}}") from None
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return value


def _parse_seeds(raw):
    seeds = []
    for part in raw.replace(",", " ").split():
        if ".." in part:
            a, b = part.split("..")
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError
    return tuple(seeds)


def _check_range(name, field, value):
    if value is None or field.low is None:
        return None
    if field.kind == "int" and value < field.low:
        return f"{name}: must be >= {field.low:g}, got {value}"
    if field.kind == "float" and value <= field.low:
        return f"{name}: must be > {field.low:g}, got {value}"
    return None


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def resolve_config(path, overrides=None):
    """Parse and validate an INI config, filling every default.

    Returns ``{section: {key: value}}``. Raises :class:`ConfigError`
    listing every diagnostic; each message starts with ``section.key``.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config: file not found: {path}"])
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive ("K" vs "k")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError([f"config: cannot parse {path}: {exc}"]) from None
    return _resolve(parser, path.parent.resolve(), overrides or {})


def _resolve(parser, base_dir, overrides):
    diags = []
    if not parser.has_section("experiment") or not parser.has_option("experiment", "name"):
        raise ConfigError([f"experiment.name: missing; choose from {{{', '.join(EXPERIMENTS)}}}"])
    raw_name = parser.get("experiment", "name").strip()
    if raw_name not in EXPERIMENTS:
        raise ConfigError([f"experiment.name: unknown value {raw_name!r}; choose from {{{', '.join(EXPERIMENTS)}}}"])
    schema = {"experiment": _EXPERIMENT, **SCHEMAS[raw_name]}
    if parser.has_option("experiment", "seed") and not parser.has_option("experiment", "seeds"):
        parser.set("experiment", "seeds", parser.get("experiment", "seed"))
        parser.remove_option("experiment", "seed")
    for section in parser.sections():
        if section not in schema:
            diags.append(f"{section}: unknown section; expected one of {sorted(schema)}")
            continue
        for key in parser.options(section):
            if key not in schema[section]:
                diags.append(f"{section}.{key}: unknown key for experiment {raw_name!r}")
    resolved = {}
    for section, fields in schema.items():
        resolved[section] = {}
        for key, field in fields.items():
            name = f"{section}.{key}"
            if name in overrides:
                value = overrides[name]
            elif parser.has_option(section, key):
                try:
                    value = _parse_value(name, field, parser.get(section, key), base_dir)
                except ValueError as exc:
                    diags.append(str(exc))
                    continue
            else:
                value = field.default
            problem = _check_range(name, field, value)
            if problem:
                diags.append(problem)
            resolved[section][key] = value
    diags.extend(_cross_checks(raw_name, resolved))
    if diags:
        raise ConfigError(diags)
    return resolved


def _cross_checks(name, cfg):
    diags = []
    data, model = cfg.get("data", {}), cfg.get("model", {})
    for key in ("images", "labels"):
        value = data.get(key)
        paths = value if isinstance(value, tuple) else (value,)
        for p in paths:
            if p is not None and not Path(p).is_file():
                diags.append(f"data.{key}: path does not exist: {p}")
    if name == "peer" and data.get("source") == "idx":
        for key in ("images", "labels"):
            if data.get(key) is None:
                diags.append(f"data.{key}: required when data.source = idx")
    if name == "lda" and data.get("source") == "pgm" and not data.get("images"):
        diags.append("data.images: required when data.source = pgm")
    if name == "gpfa":
        T = data.get("T", 2)
        if model.get("M") is not None and T is not None and model["M"] > T:
            diags.append(f"model.M: must not exceed data.T = {T}, got {model['M']}")
        if T is not None and T < 2:
            diags.append(f"data.T: must be >= 2, got {T}")
        if data.get("P") is not None and data["P"] < 4:
            diags.append(f"data.P: must be >= 4, got {data['P']}")
    if name == "datagen" and data.get("T") is not None and data["T"] < 2:
        diags.append(f"data.T: must be >= 2, got {data['T']}")
    return diags


def write_resolved(cfg, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.items():
        parser.add_section(section)
        for key, value in values.items():
            parser.set(section, key, _format_value(value))
    with open(path, "w") as fh:
        parser.write(fh)


def _hashable(cfg):
    out = {s: {k: v for k, v in vals.items()} for s, vals in cfg.items()}
    out["experiment"] = {k: v for k, v in out["experiment"].items() if k not in ("seeds", "out")}
    return out


# ---------------------------------------------------------------------------
# experiments


def _run_peer(cfg, seed, out):
    from .datagen import gen_peer_pairs, gen_synthetic_digits, load_idx
    from .discrete import PeerRPM
    from .metrics import mean_posterior_entropy

    d, m, o = cfg["data"], cfg["model"], cfg["optim"]
    if d["source"] == "idx":
        images, labels = load_idx(d["images"]), load_idx(d["labels"])
        if len(images) != len(labels):
            raise ConfigError([f"data.labels: {len(labels)} labels for {len(images)} images"])
        pairs = gen_peer_pairs(images, labels, seed=seed)
        keep = min(len(pairs.labels), d["max_pairs"])
        X, y, test_X, test_y = pairs.X[:keep], pairs.labels[:keep], None, None
    else:
        per = 2 * d["pairs_per_class"] + d["test_per_class"]
        images, labels, _ = gen_synthetic_digits(d["n_classes"], per, d["side"], d["noise"], seed=seed)
        flat = images.reshape(len(images), -1)
        train = np.zeros(len(labels), dtype=bool)
        for c in range(d["n_classes"]):
            train[np.flatnonzero(labels == c)[:2 * d["pairs_per_class"]]] = True
        pairs = gen_peer_pairs(flat[train], labels[train], seed=seed)
        X, y = pairs.X, pairs.labels
        test_X, test_y = flat[~train], labels[~train]
    model = PeerRPM(n_latents=m["K"], hidden=m["hidden"], n_iter=o["iters"], m_steps=o["m_steps"], lr=o["lr"],
                    learn_prior=m["learn_prior"], random_state=seed)
    model.fit(X)
    report = model.report_
    report.metrics["accuracy"] = model.score(X[:, 0], y)
    if test_X is not None and len(test_y):
        report.metrics["test_accuracy"] = model.score(test_X, test_y)
    report.metrics["posterior_entropy"] = mean_posterior_entropy(model.posterior_.q)
    model.net_.save(out / "checkpoint.weights")
    return report


def _lda_data(d, seed):
    from .datagen import gen_texture_corpus, read_pgm
    from .lda import extract_patches

    if d["source"] == "pgm":
        images = [read_pgm(p) for p in d["images"]]
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ConfigError(["data.images: every PGM image must have the same size"])
        return extract_patches(np.stack(images), d["patch_size"]), None
    corpus = gen_texture_corpus(d["n_images"], d["grid"], d["patch_size"], d["n_textures"], d["concentration"],
                                d["noise"], seed=seed)
    return extract_patches(corpus.images, d["patch_size"]), corpus.patch_labels


def _run_lda(cfg, seed, out):
    from .lda import RPLDA, write_top_patches_csv, write_topic_weights_csv
    from .metrics import mean_posterior_entropy

    d, m, o = cfg["data"], cfg["model"], cfg["optim"]
    X, labels = _lda_data(d, seed)
    model = RPLDA(n_topics=m["K"], alpha=m["alpha"], hidden=m["hidden"], n_iter=o["iters"], m_steps=o["m_steps"],
                  lr=o["lr"], random_state=seed).fit(X)
    report = model.report_
    if labels is not None:
        report.metrics["patch_accuracy"] = model.score(X, labels)
    gamma = model.variational_.gamma
    report.metrics["posterior_entropy"] = mean_posterior_entropy(gamma.reshape(-1, gamma.shape[-1]))
    write_topic_weights_csv(out / "topic_weights.csv", model.topic_weights_)
    write_top_patches_csv(out / "top_patches.csv", {k: model.representative(X, k, m["top_m"])
                                                   for k in range(m["K"])})
    model.net_.save(out / "checkpoint.weights")
    return report


def _ball(d, seed):
    from .datagen import BouncingBallConfig, gen_structured_ball, gen_textured_ball

    names = {f.name for f in dataclasses.fields(BouncingBallConfig)} - {"seed", "variant", "dynamics"}
    kw = {k: v for k, v in d.items() if k in names}
    variant = d.get("variant") or d.get("kind")
    cfg = BouncingBallConfig(seed=seed, variant=variant, **kw)
    return gen_structured_ball(cfg) if variant == "structured" else gen_textured_ball(cfg)


def _run_gpfa(cfg, seed, out):
    from .gpfa import RPGPFA
    from .metrics import nmse_regression

    d, m, o = cfg["data"], cfg["model"], cfg["optim"]
    try:
        ds = _ball(d, seed)
    except ValueError as exc:
        raise ConfigError([f"data: {exc}"]) from None
    model = RPGPFA(n_latents=m["K"], n_inducing=m["M"], method=m["method"], hidden=m["hidden"],
                   conv_channels=m["conv_channels"], conv_kernel=m["conv_kernel"], conv_pool=m["conv_pool"],
                   n_iter=o["iters"], lr=o["lr"], lr_variational=o["lr_variational"], n_mc_samples=m["mc_samples"],
                   init_lengthscale=m["init_lengthscale"], init_variance=m["init_variance"],
                   learn_kernel=m["learn_kernel"], random_state=seed)
    try:
        model.fit(ds.observations, times=ds.times)
    except NumericalAbort:
        model.write_latents(out / "latents.csv")
        raise
    report = model.report_
    report.metrics["nmse"] = nmse_regression(model.latent_means_, ds.z_true)
    report.metrics["lengthscale"] = [k.lengthscale for k in model.kernels_]
    model.write_latents(out / "latents.csv")
    model.save(out / "checkpoint.weights")
    return report


def _run_datagen(cfg, seed, out):
    from .datagen import gen_synthetic_digits, gen_texture_corpus, write_idx, write_pgm, write_rpmd

    d = cfg["data"]
    kind = d["kind"]
    if kind in ("textured", "structured"):
        ds = _ball(d, seed)
        arrays = {f"x{j}": x for j, x in enumerate(ds.observations)}
        arrays.update(z_true=ds.z_true, times=ds.times)
    elif kind == "digits":
        images, labels, templates = gen_synthetic_digits(d["n_classes"], d["per_class"], d["side"], d["noise"],
                                                         seed=seed)
        arrays = {"images": images, "labels": labels.astype(float), "templates": templates}
        # IDX copies so that a peer run can read them with data.source = idx
        lo, hi = images.min(), images.max()
        write_idx(out / "images.idx", np.round(255 * (images - lo) / (hi - lo)).astype(np.uint8))
        write_idx(out / "labels.idx", labels.astype(np.uint8))
    else:
        corpus = gen_texture_corpus(d["n_images"], d["grid"], d["patch_size"], d["n_textures"], d["concentration"],
                                    d["patch_noise"], seed=seed)
        arrays = {"images": corpus.images, "patch_labels": corpus.patch_labels.astype(float),
                  "topic_weights": corpus.topic_weights}
        imgs = corpus.images
        lo, hi = imgs.min(), imgs.max()
        pgm_dir = out / "pgm"
        pgm_dir.mkdir(exist_ok=True)
        for i, im in enumerate(imgs):
            write_pgm(pgm_dir / f"image_{i:04d}.pgm", np.round(255 * (im - lo) / (hi - lo)).astype(np.uint8))
    write_rpmd(out / "dataset.rpmd", arrays)
    return None


_RUNNERS = {"peer": _run_peer, "lda": _run_lda, "gpfa": _run_gpfa, "datagen": _run_datagen}
_PRIMARY = {"peer": "accuracy", "lda": "patch_accuracy", "gpfa": "nmse"}


# ---------------------------------------------------------------------------
# driver


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("RPM_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError([f"RPM_THREADS: must be a positive integer, got {raw!r}"]) from None
    if "jax" not in sys.modules:
        os.environ.setdefault("XLA_FLAGS",
                              f"--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={n}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run_experiment(cfg, echo=print):
    """Run a resolved config; returns the summary written to ``report.json``."""
    name = cfg["experiment"]["name"]
    out = Path(cfg["experiment"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.resolved.ini")
    if name == "selftest":
        return _selftest(echo, out)
    seeds = cfg["experiment"]["seeds"]
    chash = config_hash(_hashable(cfg))
    runs = []
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        target.mkdir(parents=True, exist_ok=True)
        try:
            report = _RUNNERS[name](cfg, seed, target)
        except NumericalAbort as exc:
            exc.report.config_hash = chash
            _write_run(exc.report, target, name)
            raise
        if report is None:
            runs.append({"seed": seed, "status": "ok"})
            echo(f"seed {seed}: wrote {target}")
            continue
        report.config_hash = chash
        runs.append(_write_run(report, target, name))
        primary = _PRIMARY.get(name)
        if primary in report.metrics:
            echo(f"seed {seed}: {primary} = {report.metrics[primary]:.4f}")
    summary = {"experiment": name, "config_hash": chash, "seeds": list(seeds), "runs": runs}
    primary = _PRIMARY.get(name)
    values = [r["metrics"][primary] for r in runs if primary in r.get("metrics", {})]
    if values:
        summary["summary"] = {"metric": primary, "median": float(np.median(values)),
                              "best": float(min(values) if name == "gpfa" else max(values))}
    if len(seeds) > 1:
        with open(out / "report.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    return summary


def _write_run(report, target, name):
    report.write_csv(target / "free_energy.csv")
    record = {"experiment": name, **report.to_dict()}
    with open(target / "report.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=float)
    return record


def _selftest(echo, out=None):
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} {r.detail} ({r.seconds:.2f}s)")
    summary = {"experiment": "selftest", "passed": all(r.passed for r in results),
               "checks": [dataclasses.asdict(r) for r in results]}
    if out is not None:
        with open(out / "report.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _overrides(args, datagen=False):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["experiment.seeds"] = tuple(args.seed)
    if getattr(args, "out", None) is not None:
        out["experiment.out"] = args.out
    if getattr(args, "iters", None) is not None:
        out["optim.iters"] = args.iters
    return out


def _build_parser():
    p = argparse.ArgumentParser(prog="rpmkit", description="Recognition-parametrised model experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [("run", "run the experiment named in a config"),
                           ("validate", "check a config and print the resolved values"),
                           ("datagen", "generate a dataset described by a config")]:
        c = sub.add_parser(name, help=helptext)
        c.add_argument("config")
        if name != "validate":
            c.add_argument("--seed", type=int, nargs="+", help="override experiment.seeds")
            c.add_argument("--out", help="override experiment.out")
        if name == "run":
            c.add_argument("--iters", type=int, help="override optim.iters")
    sub.add_parser("selftest", help="run the invariant suite")
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        with _thread_cap():
            if args.command == "selftest":
                return EXIT_OK if _selftest(print)["passed"] else EXIT_SELFTEST
            cfg = resolve_config(args.config, _overrides(args))
            if args.command == "validate":
                _print_resolved(cfg)
                return EXIT_OK
            if args.command == "datagen" and cfg["experiment"]["name"] != "datagen":
                raise ConfigError([f"experiment.name: datagen needs name = datagen, "
                                   f"got {cfg['experiment']['name']!r}"])
            summary = run_experiment(cfg)
            if cfg["experiment"]["name"] == "selftest" and not summary["passed"]:
                return EXIT_SELFTEST
            return EXIT_OK
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


def _print_resolved(cfg):
    for section, values in cfg.items():
        print(f"[{section}]")
        for key, value in values.items():
            print(f"{key} = {_format_value(value)}")
        print()


if __name__ == "__main__":
    sys.exit(main())
