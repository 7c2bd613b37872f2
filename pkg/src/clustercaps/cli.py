"""Command line entry point: ``clustercaps <subcommand> [flags]``.

Exit codes: 0 success, 1 training diverged, 2 configuration error,
3 data error.  Flags may also be given in a flat ``key = value`` config file
passed with ``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import outputs
from .checkpoint import CheckpointError, load_checkpoint
from .data import DATASETS, DataFormatError, viewpoint_split
from .models import count_params, get_variant, param_breakdown, recon_transforms, variant_code, variant_names
from .training import TrainConfig, TrainingDiverged, evaluate, read_metrics

log = logging.getLogger("clustercaps")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# -- argument parsing ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="flat key=value file; command-line flags override it")
    p.add_argument("--dataset", default="mnist", choices=DATASETS)
    p.add_argument("--data-dir", default=None, help="dataset root (default: $DATA_DIR or ./data)")
    p.add_argument("--out-dir", default="runs/out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-subset", type=int, default=None, help="evaluate on the first N test items")
    p.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")
    p.add_argument("-v", "--verbose", action="store_true")
    if training:
        p.add_argument("--variant", default="tiny")
        p.add_argument("--epochs", type=int, default=5)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--lr", type=float, default=ex.DESK_LR)
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--decay-every", type=int, default=3)
        p.add_argument("--decay-rate", type=float, default=0.1)
        p.add_argument("--ablation", action="store_true", help="constant routing weights c = 1/G")
        p.add_argument("--no-layer-norm", action="store_true")
        p.add_argument("--recon-lambda", type=float, default=1.0)
        p.add_argument("--train-subset", type=int, default=None, help="train on the first N items")
        p.add_argument("--resume", default=None, help="checkpoint to continue from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustercaps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant and write metrics and checkpoints")
    _common(p)

    p = sub.add_parser("eval", help="test error of a checkpoint")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("params", help="parameter accounting for one or all variants")
    p.add_argument("--variant", default=None)
    p.add_argument("--geometry", default="28,28,1", help="H,W,channels")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("ablation", help="data-dependent vs constant routing with matched seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")

    p = sub.add_parser("perturb", help="reconstructions while sweeping one capsule dimension")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, default=3)
    p.add_argument("--dims", default=None, help="comma-separated dimensions (default all)")

    p = sub.add_parser("transform-recon", help="reconstruct from transformed last-layer channels")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, default=8, help="rows in the image grid")
    p.add_argument("--mse-images", type=int, default=1000, help="test items in the MSE average")

    p = sub.add_parser("viewpoints", help="novel-viewpoint generalisation on smallNORB")
    _common(p)
    p.add_argument("--mode", default="azimuth", choices=("azimuth", "elevation"))
    p.add_argument("--target", type=float, default=None,
                   help="familiar accuracy to match (default: best epoch)")
    p.set_defaults(dataset="smallnorb")

    p = sub.add_parser("routing-viz", help="last-layer routing weights per test image")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--dim", type=int, default=0)
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _coerce(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        v = value.lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"{action.dest}: expected a boolean, got {value!r}")
        return v in ("1", "true", "yes", "on")
    if action.type is not None:
        try:
            value = action.type(value)
        except ValueError as e:
            raise ConfigError(f"{action.dest}: {e}") from e
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{action.dest}: {value!r} not in {sorted(action.choices)}")
    return value


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in read_config_file(args.config).items():
            if key not in actions or key in ("help", "config"):
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            defaults[key] = _coerce(actions[key], value)
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def train_config(args) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr,
                           decay_every=args.decay_every, decay_rate=args.decay_rate,
                           momentum=args.momentum, seed=args.seed, recon_lambda=args.recon_lambda,
                           ablation_constant_routing=args.ablation)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _check_variant(name: str) -> None:
    if name not in variant_names():
        raise ConfigError(f"unknown variant {name!r}; known variants: {', '.join(variant_names())}")


def _load_data(args, train_subset=None) -> ex.DeskData:
    try:
        return ex.load_desk_data(args.dataset, args.data_dir, train_subset, args.test_subset)
    except (DataFormatError, OSError) as e:
        raise DataError(str(e)) from e


def _load_model(path):
    try:
        return load_checkpoint(path)[0]
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    except (CheckpointError, OSError, ValueError, KeyError) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e


def _plot(args, fn, *a) -> None:
    if args.no_plots:
        return
    from . import plotting
    getattr(plotting, fn)(*a)


# -- subcommands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    _check_variant(args.variant)
    cfg = train_config(args)
    data = _load_data(args, args.train_subset)
    spec = ex.make_spec(args.variant, data, "constant" if args.ablation else "data_dependent",
                        not args.no_layer_norm)
    out = Path(args.out_dir)
    res = ex.run_training(spec, data, cfg, out, resume=args.resume)
    rows = read_metrics(out / "metrics.csv") if (out / "metrics.csv").exists() else []
    final = float(rows[-1]["eval_err"]) if rows else evaluate(res.model, data.test, data.aug)
    best = min((float(r["eval_err"]) for r in rows), default=final)
    if rows:
        _plot(args, "training_curves", rows, out / "curves.png")
    print(f"variant={spec.name} code={variant_code(spec)} params={count_params(spec)} "
          f"epochs={len(rows)} final_err={final:.4f} best_err={best:.4f} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args)
    if model.spec.input_geometry != data.geometry:
        raise ConfigError(f"checkpoint expects {model.spec.input_geometry}, dataset gives {data.geometry}")
    err = evaluate(model, data.test, data.aug)
    print(f"checkpoint={args.checkpoint} dataset={args.dataset} items={len(data.test)} error={err:.4f}")
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        geometry = tuple(int(v) for v in args.geometry.split(","))
        assert len(geometry) == 3
    except (ValueError, AssertionError) as e:
        raise ConfigError(f"--geometry must be H,W,channels, got {args.geometry!r}") from e
    names = [args.variant] if args.variant else variant_names()
    rows = []
    for name in names:
        _check_variant(name)
        try:
            spec = get_variant(name, geometry, args.num_classes)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for part, n in param_breakdown(spec).items():
            rows.append([name, variant_code(spec), part, n])
        total = count_params(spec)
        rows.append([name, variant_code(spec), "total", total])
        print(f"{name:18s} {variant_code(spec):10s} {total:>10,d}")
    if args.out_dir:
        outputs.write_csv(Path(args.out_dir) / "params.csv", ["variant", "code", "part", "count"], rows)
    return EXIT_OK


def cmd_ablation(args) -> int:
    _check_variant(args.variant)
    cfg = train_config(args)
    try:
        seeds = [int(s) for s in str(args.seeds).split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"--seeds must be comma-separated integers: {args.seeds!r}") from e
    if not seeds:
        raise ConfigError("--seeds is empty")
    data = _load_data(args, args.train_subset)
    out = Path(args.out_dir)
    rows = ex.ablation(args.variant, data, cfg, seeds, out)
    header = ["seed", "data_dependent_acc", "constant_acc"]
    outputs.write_csv(out / "ablation.csv", header, rows)
    _plot(args, "ablation_bars", rows, out / "ablation.png")
    for r in rows:
        print(f"seed={r['seed']} data_dependent_acc={r['data_dependent_acc']:.4f} "
              f"constant_acc={r['constant_acc']:.4f} constant_c_equals_1/G={r['constant_check']}")
    dd = np.array([r["data_dependent_acc"] for r in rows])
    co = np.array([r["constant_acc"] for r in rows])
    print(f"variant={args.variant} seeds={len(rows)} data_dependent_acc={dd.mean():.4f}+-{dd.std():.4f} "
          f"constant_acc={co.mean():.4f}+-{co.std():.4f} margin={dd.mean() - co.mean():+.4f}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    model = _load_model(args.checkpoint)
    if model.spec.decoder != "fc":
        raise ConfigError("checkpoint has no fully connected decoder (train a 'disentangle' variant)")
    data = _load_data(args)
    d_last = model.spec.grid_shapes()[-1][3]
    dims = list(range(d_last)) if args.dims is None else [int(d) for d in args.dims.split(",")]
    if any(not 0 <= d < d_last for d in dims):
        raise ConfigError(f"--dims must lie in [0, {d_last})")
    out = Path(args.out_dir)
    index = []
    for i in range(min(args.images, len(data.test))):
        img = data.test.images[i]
        rows = ex.perturbation_rows(model, img)
        for d in dims:
            name = f"perturb_img{i}_dim{d}.pgm"
            outputs.write_pgm(out / name, rows[d])
            index.append([name, i, int(data.test.labels[i]), d])
        _plot(args, "image_grid", np.concatenate([rows[d] for d in dims]), out / f"perturb_img{i}.png",
              "rows: capsule dims; columns: delta -0.25 .. 0.25")
    outputs.write_csv(out / "perturb_index.csv", ["file", "image", "label", "dim"], index)
    print(f"wrote {len(index)} perturbation rows to {out}")
    return EXIT_OK


def cmd_transform_recon(args) -> int:
    model = _load_model(args.checkpoint)
    if model.spec.decoder != "conv":
        raise ConfigError("checkpoint has no convolutional decoder (train a 'recon' variant)")
    data = _load_data(args)
    out = Path(args.out_dir)
    n_rows = min(args.images, len(data.test))
    grid = np.concatenate([ex.transform_grid(model, data.test.images[i]) for i in range(n_rows)])
    outputs.write_pgm(out / "transform_grid.pgm", grid)
    n = min(args.mse_images, len(data.test))
    mse_rows = ex.transform_recon_mse(model, data.test.images[:n])
    outputs.write_csv(out / "transform_mse.csv", ["transform", "mse"], mse_rows)
    _plot(args, "image_grid", grid, out / "transform_grid.png",
          "ground truth, then " + ", ".join(name for name, _ in recon_transforms()))
    _plot(args, "transform_mse_bars", mse_rows, out / "transform_mse.png")
    mse = dict(mse_rows)
    rot = float(np.mean([mse[f"R-{a}"] for a in range(0, 360, 45)]))
    print(f"items={n} identity_mse={mse['R-0']:.5f} rotation_mean_mse={rot:.5f} "
          f"average_mse={np.mean(list(mse.values())):.5f}")
    return EXIT_OK


def cmd_viewpoints(args) -> int:
    _check_variant(args.variant)
    if args.dataset != "smallnorb":
        raise ConfigError("viewpoints needs --dataset smallnorb")
    cfg = train_config(args)
    data = _load_data(args, None)
    split = viewpoint_split(data.train, data.test, args.mode)
    familiar = split.familiar
    novel = sorted(set(np.unique(split.novel_test.meta[args.mode])))
    header = f"# mode={args.mode} familiar={list(familiar)} novel={novel}"
    print(header)
    train_data = ex.DeskData(split.train, split.familiar_val, data.aug, data.geometry)
    if args.train_subset is not None:
        train_data.train = split.train.subset(np.arange(min(args.train_subset, len(split.train))))
    spec = ex.make_spec(args.variant, train_data, "constant" if args.ablation else "data_dependent",
                        not args.no_layer_norm)
    history = []

    def on_epoch(model, m):
        row = {"epoch": m.epoch, **ex.viewpoint_history(model, split.familiar_val, split.novel_test, data.aug)}
        history.append(row)

    out = Path(args.out_dir)
    ex.run_training(spec, train_data, cfg, out, on_epoch=on_epoch)
    if not history:
        raise ConfigError("viewpoints needs at least one epoch")
    chosen = ex.select_epoch(history, args.target)
    rule = "best familiar accuracy" if args.target is None else f"closest familiar accuracy <= {args.target}"
    rows = [[r["epoch"], r["familiar_acc"], r["novel_acc"], int(r is chosen)] for r in history]
    outputs.write_csv(out / "viewpoints.csv", ["epoch", "familiar_acc", "novel_acc", "selected"], rows)
    _plot(args, "viewpoint_curves", history, out / "viewpoints.png")
    print(f"selection={rule} epoch={chosen['epoch']} familiar_acc={chosen['familiar_acc']:.4f} "
          f"novel_acc={chosen['novel_acc']:.4f} seed={args.seed}")
    return EXIT_OK


def cmd_routing_viz(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args)
    h, w, c, d = model.spec.grid_shapes()[-1]
    if (h, w) != (1, 1):
        raise ConfigError(f"routing-viz needs a global last layer, checkpoint's is {h}x{w}")
    if not (0 <= args.channel < c and 0 <= args.dim < d):
        raise ConfigError(f"--channel must be < {c} and --dim < {d}")
    n = min(args.images, len(data.test))
    images = data.test.images[:n]
    if data.aug is not None:
        from .data import transform_batch
        images = transform_batch(images, np.arange(n), data.aug, False)
    weights = ex.last_layer_routing(model, images)             # (N, C, G, D)
    labels = data.test.labels[:n]
    sel = weights[:, args.channel, :, args.dim]                # (N, G)
    g = sel.shape[1]
    cols = [f"c{j}" for j in range(g)]
    outputs.write_csv(Path(args.out_dir) / "routing.csv", ["index", "label"] + cols,
                      [[i, int(labels[i])] + [float(v) for v in sel[i]] for i in range(n)])
    summary = []
    for k in range(data.test.num_classes):
        m = labels == k
        if m.any():
            summary.append([k, int(m.sum())] + [float(v) for v in sel[m].mean(axis=0)]
                           + [float(v) for v in sel[m].std(axis=0)])
    outputs.write_csv(Path(args.out_dir) / "routing_summary.csv",
                      ["label", "count"] + [f"mean_{c_}" for c_ in cols] + [f"std_{c_}" for c_ in cols],
                      summary)
    within, between = ex.pairwise_l1_stats(weights, labels)
    outputs.write_csv(Path(args.out_dir) / "routing_stats.csv", ["within_l1", "between_l1"], [[within, between]])
    _plot(args, "routing_scatter", sel, labels, Path(args.out_dir) / "routing.png")
    print(f"items={n} within_class_l1={within:.5f} between_class_l1={between:.5f} "
          f"separated={within < between}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "ablation": cmd_ablation,
    "perturb": cmd_perturb,
    "transform-recon": cmd_transform_recon,
    "viewpoints": cmd_viewpoints,
    "routing-viz": cmd_routing_viz,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # argparse usage errors
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        # geometry or spec mismatches surfacing from the library
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
