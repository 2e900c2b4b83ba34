"""Command line front end: one binary for the whole pipeline.

Subcommands cover dataset generation (generate), model building (fit-ls,
train, tune), analysis (evaluate, predict, svd) and figure-data export
(figures).  Every artifact-producing run writes a JSON manifest next to its
primary output recording the exact command, resolved configuration, seeds
and output digests; replaying the recorded command with --workers 1
reproduces each output byte for byte.

Exit codes: 0 success, 2 configuration problems (including usage errors),
3 simulation/training failures, 4 input/output problems.  Failures print a
single line `doprec: error: <category>: <message>` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

import numpy as np

from . import __version__
from . import datagen as D
from . import models as M
from . import training as T
from .config import ConfigError, config_digest, config_text, load_config
from .manifest import RunManifest, utc_now, write_manifest
from .solver import SolverError

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

# desk-scale tuning schedules and the sampled hyperparameter ranges
MLP_RUNGS = (25, 50, 100, 200)
RESNET_RUNGS = (100, 250, 500)
MLP_LR_RANGE = (1e-3, 1.0)
RESNET_LR_RANGE = (5e-3, 1e-1)
RESNET_BATCH_SIZES = (64, 128, 256, 384, 512)
RESNET_CLIP_NORM = 1.0

_FIELDS = {"u": "u", "C": "doping"}
_PERCENTILES = (25.0, 50.0, 75.0)


def _version_string() -> str:
    return (f"doprec {__version__} "
            f"(dataset format DPRC v{D._VERSION}, "
            f"model format DPMD v{M._MODEL_VERSION})")


# ---------------------------------------------------------------------------
# manifest plumbing


def _begin(command, config=None, seeds=None) -> RunManifest:
    """Start a manifest from the canonical replay command."""
    manifest = RunManifest(command=[str(part) for part in command])
    manifest.started = utc_now()
    manifest.seeds = dict(seeds or {})
    if config is not None:
        manifest.config = config_text(config)
        manifest.config_digest = config_digest(config)
    return manifest


def _finish(manifest: RunManifest, primary, outputs) -> None:
    """Digest the written files and drop the sidecar next to `primary`."""
    for path in outputs:
        manifest.record_output(path)
    manifest.finished = utc_now()
    write_manifest(manifest, primary)


# ---------------------------------------------------------------------------
# shared helpers


def _model_kind(model) -> str:
    return "ls" if isinstance(model, M.LinearModel) else model.kind


def _sampling_kwargs(config) -> dict:
    d = config.doping
    return {"c0": d.c0, "term_count": d.term_count,
            "zero_probability": d.zero_probability,
            "amplitude_range": (d.amplitude_min, d.amplitude_max),
            "wavelength_range_um": (d.wavelength_min_um,
                                    d.wavelength_max_um)}


def _read_model_config(path) -> dict:
    """Model architecture description: a small JSON object."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read model config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed model config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("model config must be a JSON object")
    return raw


def _model_from_config(kind: str, raw: dict, n: int,
                       rng: np.random.Generator):
    try:
        if kind == "mlp":
            return M.build_mlp(tuple(int(w) for w in raw["widths"]), n, rng)
        config = M.ResNetConfig(
            gate_kernel=int(raw["gate_kernel"]),
            gate_channels=int(raw["gate_channels"]),
            gate_stride=int(raw["gate_stride"]),
            block_type=str(raw["block_type"]),
            block_count=int(raw["block_count"]),
            downsample=bool(raw.get("downsample", True)),
            decoder=tuple(int(w) for w in raw["decoder"]))
        return M.build_resnet(config, n, rng)
    except KeyError as exc:
        raise ConfigError(f"model config missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _architecture_label(model) -> str:
    """Compact one-token description of a sampled architecture."""
    if model.kind == "mlp":
        return "mlp:" + "-".join(str(s) for s in model.config.sizes)
    c = model.config
    decoder = "-".join(str(w) for w in c.decoder)
    return (f"{c.block_type}:b{c.block_count}:ch{c.gate_channels}"
            f":k{c.gate_kernel}:s{c.gate_stride}"
            f":down{int(c.downsample)}:dec{decoder}")


def _log_uniform(rng: np.random.Generator, low: float, high: float) -> float:
    return float(10.0 ** rng.uniform(math.log10(low), math.log10(high)))


def _split_train_val(dataset: D.Dataset, fraction: float = 0.8):
    """Leading fraction trains, the rest validates (record order kept)."""
    n_train = int(len(dataset) * fraction)
    if n_train < 1 or n_train >= len(dataset):
        raise M.DegenerateData(
            f"cannot split {len(dataset)} records into train and validation")
    head = D.Dataset(records=dataset.records[:n_train],
                     positions_um=dataset.positions_um,
                     tag=dataset.tag, role="train")
    tail = D.Dataset(records=dataset.records[n_train:],
                     positions_um=dataset.positions_um,
                     tag=dataset.tag, role="validation")
    return head, tail


def _percentile_records(errors: np.ndarray):
    """Records whose error sits at the 25/50/75 nearest-rank percentiles."""
    picks = []
    for p in _PERCENTILES:
        value = T.nearest_rank(errors, p)
        index = int(np.argmin(np.abs(errors - value)))
        picks.append((p, index, float(errors[index])))
    return picks


def _render_svg(path, draw) -> None:
    """Deterministic SVG rendering (fixed hash salt, no timestamps)."""
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot

    with pyplot.rc_context({"svg.hashsalt": "doprec"}):
        figure = pyplot.figure(figsize=(6.4, 4.0))
        try:
            draw(figure)
            figure.savefig(path, format="svg", metadata={"Date": None})
        finally:
            pyplot.close(figure)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _float_cell(value) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_generate(args) -> int:
    config = load_config(args.config, args.set)
    command = ["generate", "--count", args.count, "--tag", args.tag,
               "--role", args.role, "--seed", args.seed,
               "--out", args.out, "--workers", 1]
    if args.config:
        command += ["--config", args.config]
    command += [f"--set={item}" for item in args.set]
    if args.csv:
        command += ["--csv", args.csv]
    manifest = _begin(command, config=config, seeds={"seed": args.seed})

    dataset = D.generate_dataset(
        config.material, config.laser, config.geometry, args.count,
        args.seed, tag=args.tag, role=args.role, noise=config.noise,
        options=config.solver, workers=args.workers,
        sampling=_sampling_kwargs(config))
    D.save_dataset(dataset, args.out)
    outputs = [args.out]
    if args.csv:
        D.export_csv(dataset, args.csv)
        outputs.append(args.csv)
    _finish(manifest, args.out, outputs)
    print(f"wrote {len(dataset)} {dataset.tag} records "
          f"(n={dataset.positions_um.size}) to {args.out}")
    return EXIT_OK


def cmd_fit_ls(args) -> int:
    command = ["fit-ls", "--train", args.train, "--out", args.out,
               "--svd-threshold", repr(args.svd_threshold)]
    manifest = _begin(command)

    dataset = D.load_dataset(args.train, role="train")
    model = M.ls_fit(D.as_matrix(dataset, "u"), D.as_matrix(dataset, "doping"),
                     svd_threshold=args.svd_threshold)
    M.save_model(model, args.out)
    _finish(manifest, args.out, [args.out])
    print(f"fit linear model ({model.n} x {model.n}) "
          f"from {len(dataset)} records -> {args.out}")
    return EXIT_OK


def _train_options(args, raw: dict) -> T.TrainOptions:
    """Defaults, overridden by the config's train block, then by flags."""
    values = {"lr": 1e-3, "batch_size": 64, "epochs": 100,
              "weight_decay": 0.0, "clip_norm": None}
    block = raw.get("train", {})
    if not isinstance(block, dict):
        raise ConfigError("model config field 'train' must be an object")
    unknown = set(block) - set(values)
    if unknown:
        raise ConfigError(f"unknown train settings: {sorted(unknown)}")
    values.update(block)
    for name in values:
        flag = getattr(args, name)
        if flag is not None:
            values[name] = flag
    try:
        return T.TrainOptions(lr=float(values["lr"]),
                              batch_size=int(values["batch_size"]),
                              epochs=int(values["epochs"]),
                              weight_decay=float(values["weight_decay"]),
                              clip_norm=None if values["clip_norm"] is None
                              else float(values["clip_norm"]),
                              seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc


def cmd_train(args) -> int:
    raw = _read_model_config(args.config)
    options = _train_options(args, raw)
    command = ["train", "--kind", args.kind, "--config", args.config,
               "--train", args.train, "--out", args.out,
               "--seed", args.seed, "--lr", repr(options.lr),
               "--batch-size", options.batch_size,
               "--epochs", options.epochs,
               "--weight-decay", repr(options.weight_decay)]
    if options.clip_norm is not None:
        command += ["--clip-norm", repr(options.clip_norm)]
    manifest = _begin(command, seeds={"seed": args.seed})

    dataset = D.load_dataset(args.train, role="train")
    rng = np.random.default_rng(args.seed)
    model = _model_from_config(args.kind, raw, dataset.positions_um.size,
                               rng)
    model, trace = T.train(model, dataset, options)
    M.save_model(model, args.out)
    _finish(manifest, args.out, [args.out])
    final = trace[-1] if trace else float("nan")
    print(f"trained {args.kind} ({M.param_count(model)} parameters, "
          f"{options.epochs} epochs, final loss {final:.6e}) -> {args.out}")
    return EXIT_OK


def _make_sampler(kind: str, n: int, rungs, seed: int, labels: list):
    """Trial sampler: architecture plus optimizer draw, as one closure."""

    def sampler(rng: np.random.Generator):
        if kind == "mlp":
            config = M.mlp_config_sample(rng)
            lr = _log_uniform(rng, *MLP_LR_RANGE)
            options = T.TrainOptions(lr=lr, batch_size=64, epochs=rungs[-1],
                                     seed=seed)
            model = M.build_mlp(config, n, rng)
        else:
            config = M.resnet_config_sample(rng)
            lr = _log_uniform(rng, *RESNET_LR_RANGE)
            batch = int(rng.choice(RESNET_BATCH_SIZES))
            options = T.TrainOptions(lr=lr, batch_size=batch,
                                     epochs=rungs[-1],
                                     clip_norm=RESNET_CLIP_NORM, seed=seed)
            model = M.build_resnet(config, n, rng)
        labels.append(_architecture_label(model))
        return model, options

    return sampler


def _write_leaderboard(path, leaderboard, labels) -> None:
    rows = []
    for record in leaderboard:
        opts = record.options
        rows.append([record.index, record.status, _float_cell(record.score),
                     len(record.rung_scores),
                     ";".join(f"{epoch}:{_float_cell(s)}"
                              for epoch, s in record.rung_scores),
                     _float_cell(opts.lr), opts.batch_size,
                     _float_cell(opts.weight_decay),
                     "" if opts.clip_norm is None
                     else _float_cell(opts.clip_norm),
                     labels[record.index]])
    _write_csv(path, ["trial", "status", "score", "rungs_reached",
                      "rung_scores", "lr", "batch_size", "weight_decay",
                      "clip_norm", "architecture"], rows)


def cmd_tune(args) -> int:
    rungs = args.rungs or (MLP_RUNGS if args.kind == "mlp"
                           else RESNET_RUNGS)
    command = ["tune", "--kind", args.kind, "--budget", args.budget,
               "--train", args.train, "--out", args.out,
               "--leaderboard", args.leaderboard, "--seed", args.seed,
               "--rungs", ",".join(str(e) for e in rungs)]
    if args.val:
        command += ["--val", args.val]
    manifest = _begin(command, seeds={"seed": args.seed})

    dataset = D.load_dataset(args.train, role="train")
    if args.val:
        train_set, val_set = dataset, D.load_dataset(args.val,
                                                     role="validation")
    else:
        train_set, val_set = _split_train_val(dataset)
    spec = T.TunerSpec(budget=args.budget, rungs=rungs, seed=args.seed)
    labels: list = []
    sampler = _make_sampler(args.kind, dataset.positions_um.size, rungs,
                            args.seed, labels)
    best, leaderboard = T.tune(sampler, train_set, val_set, spec)

    M.save_model(best, args.out)
    _write_leaderboard(args.leaderboard, leaderboard, labels)
    _finish(manifest, args.out, [args.out, args.leaderboard])
    winner = min((r for r in leaderboard if r.status == "completed"),
                 key=lambda r: (r.score, r.index))
    print(f"tuned {args.kind} over {args.budget} trials: winner trial "
          f"{winner.index} ({labels[winner.index]}), validation error "
          f"{winner.score:.6e} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    command = ["evaluate", "--model", args.model, "--test", args.test,
               "--report", args.report]
    if args.remove_mean:
        command.append("--remove-mean")
    if args.histogram:
        command.append("--histogram")
    manifest = _begin(command)

    model = M.load_model(args.model)
    dataset = D.load_dataset(args.test, role="test")
    report = T.evaluate(model, dataset, mean_removed=args.remove_mean)
    outputs = T.export_report(report, args.report,
                              histogram=args.histogram)
    _finish(manifest, args.report, outputs)
    print(f"evaluated {_model_kind(model)} on {len(dataset)} records: "
          f"mean error {report.mean:.6e} ({report.selected}), "
          f"p50 {report.p50:.6e}")
    return EXIT_OK


def cmd_predict(args) -> int:
    command = ["predict", "--model", args.model, "--in", args.infile,
               "--out", args.out]
    manifest = _begin(command)

    model = M.load_model(args.model)
    dataset = D.load_dataset(args.infile)
    positions = dataset.positions_um
    rows = []
    if len(dataset):
        predictions = M.infer(model, D.as_matrix(dataset, "u"))
        for j in range(predictions.shape[1]):
            for i in range(positions.size):
                rows.append([j, i, _float_cell(positions[i]),
                             _float_cell(predictions[i, j])])
    _write_csv(args.out, ["record", "spot", "position_um", "doping_pred"],
               rows)
    _finish(manifest, args.out, [args.out])
    print(f"predicted {len(dataset)} records with {_model_kind(model)} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_svd(args) -> int:
    command = ["svd", "--in", args.infile, "--field", args.field,
               "--out", args.out]
    if args.count is not None:
        command += ["--count", args.count]
    manifest = _begin(command)

    dataset = D.load_dataset(args.infile)
    sigma = D.svd_spectrum(dataset, _FIELDS[args.field], count=args.count)
    _write_csv(args.out, ["rank", "sigma"],
               [[k + 1, _float_cell(s)] for k, s in enumerate(sigma)])
    _finish(manifest, args.out, [args.out])
    rank = D.effective_rank(D.svd_spectrum(dataset, _FIELDS[args.field]))
    print(f"singular spectrum of {args.field} ({sigma.size} values) "
          f"-> {args.out}; effective rank {rank}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# figure-data bundles


def _figures_svd(args) -> list:
    rows = []
    spectra = []
    for path in args.data:
        dataset = D.load_dataset(path)
        for field in ("u", "C"):
            sigma = D.svd_spectrum(dataset, _FIELDS[field],
                                   count=args.count)
            spectra.append((f"{path}:{field}", sigma))
            rows += [[path, field, k + 1, _float_cell(s)]
                     for k, s in enumerate(sigma)]
    csv_path = f"{args.out}.svd.csv"
    _write_csv(csv_path, ["dataset", "field", "rank", "sigma"], rows)
    outputs = [csv_path]

    if args.svg:
        def draw(figure):
            axis = figure.add_subplot(111)
            for label, sigma in spectra:
                if sigma.size:
                    axis.semilogy(np.arange(1, sigma.size + 1), sigma,
                                  label=label)
            axis.set_xlabel("rank")
            axis.set_ylabel("singular value")
            axis.legend(fontsize=6)

        svg_path = f"{args.out}.svd.svg"
        _render_svg(svg_path, draw)
        outputs.append(svg_path)
    return outputs


def _figures_histograms(args) -> list:
    model = M.load_model(args.model)
    dataset = D.load_dataset(args.data[0], role="test")
    report = T.evaluate(model, dataset, mean_removed=args.remove_mean)
    errors = report.errors

    counts, edges = np.histogram(errors, bins=10)
    hist_path = f"{args.out}.hist.csv"
    _write_csv(hist_path, ["bin", "low", "high", "count"],
               [[k, _float_cell(edges[k]), _float_cell(edges[k + 1]),
                 int(counts[k])] for k in range(counts.size)])
    refs_path = f"{args.out}.refs.csv"
    _write_csv(refs_path, ["percentile", "record", "error"],
               [[int(p), index, _float_cell(err)]
                for p, index, err in _percentile_records(errors)])
    outputs = [hist_path, refs_path]

    if args.svg:
        def draw(figure):
            axis = figure.add_subplot(111)
            axis.bar(edges[:-1], counts, width=np.diff(edges),
                     align="edge", edgecolor="black")
            axis.set_xlabel(f"relative error ({report.selected})")
            axis.set_ylabel("records")

        svg_path = f"{args.out}.hist.svg"
        _render_svg(svg_path, draw)
        outputs.append(svg_path)
    return outputs


def _figures_examples(args) -> list:
    model = M.load_model(args.model)
    dataset = D.load_dataset(args.data[0], role="test")
    report = T.evaluate(model, dataset, mean_removed=args.remove_mean)
    picks = _percentile_records(report.errors)
    positions = dataset.positions_um

    rows = []
    curves = []
    for p, index, _ in picks:
        record = dataset.records[index]
        prediction = M.infer(model, record.u)
        curves.append((p, index, record.doping, prediction))
        rows += [[int(p), index, _float_cell(positions[i]),
                  _float_cell(record.doping[i]), _float_cell(prediction[i])]
                 for i in range(positions.size)]
    csv_path = f"{args.out}.examples.csv"
    _write_csv(csv_path, ["percentile", "record", "position_um",
                          "doping_true", "doping_pred"], rows)
    outputs = [csv_path]

    if args.svg:
        def draw(figure):
            for k, (p, index, truth, prediction) in enumerate(curves):
                axis = figure.add_subplot(1, 3, k + 1)
                axis.plot(positions, truth, "--", color="gray",
                          label="expected")
                axis.plot(positions, prediction, label="predicted")
                axis.set_title(f"p{int(p)} (record {index})", fontsize=8)
                axis.tick_params(labelsize=6)

        svg_path = f"{args.out}.examples.svg"
        _render_svg(svg_path, draw)
        outputs.append(svg_path)
    return outputs


def cmd_figures(args) -> int:
    if args.which in ("histograms", "examples"):
        if args.model is None:
            raise ConfigError(f"figures --which {args.which} needs --model")
        if len(args.data) != 1:
            raise ConfigError(f"figures --which {args.which} takes exactly "
                              "one --data")
    if not args.data:
        raise ConfigError("figures needs at least one --data")
    command = ["figures", "--which", args.which]
    for path in args.data:
        command += ["--data", path]
    if args.model:
        command += ["--model", args.model]
    if args.count is not None:
        command += ["--count", args.count]
    if args.remove_mean:
        command.append("--remove-mean")
    if args.svg:
        command.append("--svg")
    command += ["--out", args.out]
    manifest = _begin(command)

    handler = {"svd": _figures_svd, "histograms": _figures_histograms,
               "examples": _figures_examples}[args.which]
    outputs = handler(args)
    _finish(manifest, args.out, outputs)
    print(f"figure data ({args.which}): " + ", ".join(outputs))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


def _rung_list(text: str):
    try:
        rungs = tuple(int(part) for part in text.split(",") if part)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad rung list {text!r}") from exc
    if not rungs:
        raise argparse.ArgumentTypeError("empty rung list")
    return rungs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doprec",
        description="photovoltage simulation and doping reconstruction")
    parser.add_argument("--version", action="version",
                        version=_version_string())
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", help="simulate a dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--tag", choices=D.TAGS, default="clean")
    p.add_argument("--role", choices=D.ROLES, default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="INI configuration file")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", default=None, help="also export records as CSV")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("fit-ls", help="fit the least-squares model")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svd-threshold", type=float, default=1e-10)
    p.set_defaults(handler=cmd_fit_ls)

    p = sub.add_parser("train", help="train one network")
    p.add_argument("--kind", choices=("mlp", "resnet"), required=True)
    p.add_argument("--config", required=True,
                   help="JSON architecture description")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("tune", help="hyperparameter search")
    p.add_argument("--kind", choices=("mlp", "resnet"), required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", default=None,
                   help="validation set (default: 80/20 split of --train)")
    p.add_argument("--out", required=True)
    p.add_argument("--leaderboard", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rungs", type=_rung_list, default=None,
                   metavar="E1,E2,...")
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser("evaluate", help="error report on a test set")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--remove-mean", action="store_true")
    p.add_argument("--report", required=True,
                   help="base path for the report files")
    p.add_argument("--histogram", action="store_true")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="doping predictions as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("svd", help="singular spectrum of a dataset")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--field", choices=tuple(_FIELDS), default="u")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_svd)

    p = sub.add_parser("figures", help="figure data bundles")
    p.add_argument("--which", choices=("svd", "histograms", "examples"),
                   required=True)
    p.add_argument("--data", action="append", default=[])
    p.add_argument("--model", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--remove-mean", action="store_true")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_figures)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except (ConfigError, M.InvalidConfig) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except ImportError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (SolverError, D.GenerationError, T.NonFiniteLoss,
            M.DegenerateData) as exc:
        return _fail("solver", exc, EXIT_SOLVER)
    except (OSError, ValueError) as exc:
        return _fail("io", exc, EXIT_IO)


def _fail(category: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"doprec: error: {category}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
