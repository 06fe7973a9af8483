"""Command-line entry point: ``qcfs-yolo <command> [flags]``.

Every command accepts ``--config FILE``.  The file holds ``key = value``
lines (``#`` starts a comment); keys are long flag names with or without
the leading dashes, and ``true``/``false`` toggle switches.  Values from the
file are applied first, so explicit flags win.  Each run writes
``effective-config.txt`` in the same format into its output directory;
``qcfs-yolo <command> --config <out>/effective-config.txt`` replays it.

Exit codes: 0 success, 1 runtime failure (missing checkpoint, divergence,
bad data), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .container import ContainerError, load_network, save_network
from .converter import (
    PLANS,
    SurgeryPlan,
    conversion_error_empirical,
    convert,
    layer_surgery_experiment,
    rows_to_csv,
)
from .data import (
    YoloFormatError,
    generate_synthetic_dataset,
    load_yolo_dataset,
    load_yolo_scenes,
    stack_scenes,
    write_yolo_dataset,
)
from .graph import PROPAGATION_MODES, GraphError, build_tiny_detector, forward_snn, merge_spike_stats
from .qcfs import QCFSParams
from .trainer import TrainConfig, TrainingDivergedError, curves_to_csv, evaluate, train
from .validation import parse_float_list, parse_int_list

logger = logging.getLogger("qcfs_yolo")

CONFIG_NAME = "effective-config.txt"


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 1."""


# --------------------------------------------------------------------------
# config files


def read_config(path) -> list:
    """Parse a ``key = value`` file into ``[(key, value), ...]`` in file order."""
    pairs = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs.append((key.lstrip("-").replace("_", "-"), value))
    return pairs


def _config_tokens(parser: argparse.ArgumentParser, pairs) -> list:
    """Translate config pairs into argv tokens understood by ``parser``."""
    known = {}
    for action in parser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                known[opt[2:]] = action
    tokens = []
    for key, value in pairs:
        action = known.get(key)
        if action is None or key in ("config", "help"):
            parser.error(f"unknown config key {key!r}")
        if isinstance(action, argparse.BooleanOptionalAction):
            flag = value.lower()
            if flag not in ("true", "false", "1", "0", "yes", "no"):
                parser.error(f"config key {key!r} expects true/false, got {value!r}")
            tokens.append(f"--{key}" if flag in ("true", "1", "yes") else f"--no-{key}")
        else:
            tokens.append(f"--{key}={value}")
    return tokens


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_effective_config(out: Path, command: str, args: argparse.Namespace):
    skip = {"command", "config", "func"}
    lines = [f"# qcfs-yolo {__version__}: {command}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in skip or value is None:
            continue
        lines.append(f"{key.replace('_', '-')} = {_format_value(value)}")
    (out / CONFIG_NAME).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# shared helpers


def _load_eval_split(args, which: str):
    """Images and truths for ``which`` (train/val/test) from YOLO data or the synthetic set."""
    if args.data:
        try:
            splits = load_yolo_dataset(args.data, seed=args.data_seed)
        except (FileNotFoundError, YoloFormatError, ValueError) as exc:
            raise CommandError(str(exc)) from None
        samples = splits.get(which, [])
        if not samples:
            raise CommandError(f"dataset split {which!r} under {args.data} is empty")
        scenes = load_yolo_scenes(samples, args.img_size)
    else:
        n = {"train": args.train_n, "val": args.val_n, "test": args.val_n}[which]
        offset = {"train": 0, "val": 1, "test": 2}[which]
        scenes = generate_synthetic_dataset(n, seed=args.data_seed + offset, size=args.img_size)
    return stack_scenes(scenes)


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"checkpoint {path} does not exist")
    try:
        return load_network(path)
    except (ContainerError, OSError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from None


def _write_report(out: Path, report, extra: dict | None = None):
    summary = json.loads(report.to_json())
    if extra:
        summary.update(extra)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(report.table_csv())
    for which in ("precision", "recall", "f1", "pr"):
        (out / f"{which}_curve.csv").write_text(report.curve_csv(which))


def _plan_target(text: str):
    if text in PLANS:
        return text
    try:
        return parse_int_list(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"plan must be one of {PLANS} or comma-separated layer indices") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out: Path) -> int:
    sizes = {"train": args.train_n, "val": args.val_n, "test": args.test_n}
    for offset, (split, n) in enumerate(sizes.items()):
        if n > 0:
            scenes = generate_synthetic_dataset(n, seed=args.data_seed + offset, size=args.img_size)
            write_yolo_dataset(scenes, out, split)
            logger.info("wrote %d %s scenes", n, split)
    return 0


def cmd_train(args, out: Path) -> int:
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, seed=args.seed, L=args.L, activation=args.activation,
        box_weight=args.box_weight, obj_weight=args.obj_weight, cls_weight=args.cls_weight,
        cosine=args.cosine,
    )
    X, Y = _load_eval_split(args, "train")
    Xv, Yv = _load_eval_split(args, "val") if args.val_n > 0 or args.data else (None, None)
    class_count = args.class_count
    net = build_tiny_detector(class_count, args.L, config.activation, seed=args.seed,
                              lam_init=args.lam_init, input_shape=X.shape[1:])
    try:
        trained, rows = train(net, X, Y, config, Xv, Yv)
    except TrainingDivergedError as exc:
        raise CommandError(str(exc)) from None
    save_network(trained, out / "checkpoint.qnet", {"train_config": config.to_dict()})
    (out / "curves.csv").write_text(curves_to_csv(rows))
    final = rows[-1]
    logger.info("final epoch: loss %.4f, mAP@.5 %.4f", final["total_loss"], final["map50"])
    return 0


def cmd_eval(args, out: Path) -> int:
    net, _ = _load_checkpoint(args.checkpoint)
    X, Y = _load_eval_split(args, args.split)
    if any(l.activation_kind == "if_neuron" for l in net.layers):
        raise CommandError("checkpoint contains IF neurons; use 'simulate'")
    report = evaluate(net, X, Y, args.conf, args.nms_iou)
    _write_report(out, report)
    logger.info("mAP@.5 %.4f  mAP@.5:.95 %.4f", report.map50, report.map5095)
    return 0


def cmd_convert(args, out: Path) -> int:
    net, meta = _load_checkpoint(args.checkpoint)
    plan = SurgeryPlan(args.plan, args.T, args.mode)
    try:
        snn = convert(net, plan)
    except GraphError as exc:
        raise CommandError(str(exc)) from None
    meta = dict(meta, conversion={"plan": plan.label, "T": plan.T, "mode": plan.mode})
    save_network(snn, out / "converted.qnet", meta)
    logger.info("converted %s", ", ".join(plan.select(net)))
    return 0


def cmd_simulate(args, out: Path) -> int:
    net, meta = _load_checkpoint(args.checkpoint)
    if not any(l.activation_kind == "if_neuron" for l in net.layers):
        try:
            net = convert(net, SurgeryPlan(args.plan, args.T, args.mode))
        except GraphError as exc:
            raise CommandError(str(exc)) from None
    X, Y = _load_eval_split(args, args.split)
    stats = {}

    def forward(x):
        o, s = forward_snn(net, x, args.T, args.mode)
        merge_spike_stats(stats, s)
        return o

    report = evaluate(net, X, Y, args.conf, args.nms_iou, forward=forward)
    _write_report(out, report, {"T": args.T, "mode": args.mode})
    (out / "spike_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    logger.info("T=%d %s: mAP@.5 %.4f", args.T, args.mode, report.map50)
    return 0


def cmd_analyze_error(args, out: Path) -> int:
    rows = []
    for L in args.L:
        for phi in args.phi:
            p = QCFSParams(args.lam, L, phi)
            for T in args.T:
                z_range = tuple(args.z_range) if args.z_range else None
                rep = conversion_error_empirical(p, p.lam, T, args.n, z_range, args.seed, args.threads)
                rows.append(rep.as_row())
                logger.info("T=%d L=%d phi=%g mean %.3g (4se %.3g)", T, L, phi, rep.mean, 4 * rep.standard_error)
    (out / "conversion_error.csv").write_text(rows_to_csv(rows))
    return 0


def cmd_surgery(args, out: Path) -> int:
    net, _ = _load_checkpoint(args.checkpoint)
    X, Y = _load_eval_split(args, args.split)
    try:
        rows = layer_surgery_experiment(net, X, Y, args.T, args.plans, args.modes, args.conf, args.nms_iou)
    except GraphError as exc:
        raise CommandError(str(exc)) from None
    base = evaluate(net, X, Y, args.conf, args.nms_iou).map50
    (out / "surgery.csv").write_text(rows_to_csv(rows))
    (out / "baseline.json").write_text(json.dumps({"map50": base}, indent=2) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    g.add_argument("--out", default="runs/out", help="output directory (default runs/out)")
    g.add_argument("--config", help="key = value file; explicit flags override it")
    g.add_argument("--threads", type=int, default=1,
                   help="BLAS / worker threads; 1 is the bit-reproducible path (default 1)")
    g.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def _data_flags(p, train_n=1000, val_n=200):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="YOLO-format dataset root (default: synthetic scenes)")
    g.add_argument("--data-seed", type=int, default=0, help="synthetic data / split seed (default 0)")
    g.add_argument("--train-n", type=int, default=train_n, help=f"synthetic training scenes (default {train_n})")
    g.add_argument("--val-n", type=int, default=val_n, help=f"synthetic validation scenes (default {val_n})")
    g.add_argument("--img-size", type=int, default=64, help="square input size in pixels (default 64)")
    g.add_argument("--class-count", type=int, default=3, help="number of classes (default 3)")


def _eval_flags(p):
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--conf", type=float, default=0.001, help="detection confidence floor (default 0.001)")
    p.add_argument("--nms-iou", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qcfs-yolo", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes as a YOLO dataset")
    p.add_argument("--train-n", type=int, default=1000)
    p.add_argument("--val-n", type=int, default=200)
    p.add_argument("--test-n", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--img-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    defaults = TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train the detector; writes checkpoint.qnet and curves.csv")
    p.add_argument("--activation", default="qcfs", choices=("qcfs", "relu", "leaky-relu"))
    p.add_argument("--L", type=int, default=defaults.L, help="QCFS quantization steps")
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--momentum", type=float, default=defaults.momentum)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--box-weight", type=float, default=defaults.box_weight)
    p.add_argument("--obj-weight", type=float, default=defaults.obj_weight)
    p.add_argument("--cls-weight", type=float, default=defaults.cls_weight)
    p.add_argument("--cosine", action=argparse.BooleanOptionalAction, default=defaults.cosine,
                   help="cosine learning-rate decay")
    p.add_argument("--lam-init", type=float, default=8.0, help="initial QCFS lambda")
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score an ANN checkpoint")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", parents=[common], help="replace QCFS layers with IF neurons")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", type=_plan_target, default="last-only",
                   help="first-only | last-only | all | comma-separated activation indices")
    p.add_argument("--T", type=int, default=4, help="timesteps recorded for simulation")
    p.add_argument("--mode", default="per-step", choices=PROPAGATION_MODES)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("simulate", parents=[common], help="run the spiking network and score it")
    p.add_argument("--checkpoint", required=True, help="converted checkpoint (or a QCFS one, converted with --plan)")
    p.add_argument("--plan", type=_plan_target, default="last-only")
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--mode", default="per-step", choices=PROPAGATION_MODES)
    _data_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze-error", parents=[common], help="Monte Carlo conversion error over a (T, L, phi) grid")
    p.add_argument("--T", type=parse_int_list, default=[4, 8, 16], help="comma-separated timesteps")
    p.add_argument("--L", type=parse_int_list, default=[4, 8, 16], help="comma-separated quantization steps")
    p.add_argument("--phi", type=parse_float_list, default=[0.5], help="comma-separated shifts")
    p.add_argument("--lam", type=float, default=1.0, help="lambda = theta (default 1)")
    p.add_argument("--n", type=int, default=1_000_000, help="samples per grid cell")
    p.add_argument("--z-range", type=parse_float_list, default=None, help="lo,hi (default -lambda,2*lambda)")
    p.set_defaults(func=cmd_analyze_error)

    p = sub.add_parser("surgery", parents=[common], help="first-only vs last-only conversion table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--T", type=parse_int_list, default=[4, 8, 16])
    p.add_argument("--plans", type=lambda s: s.split(","), default=["first-only", "last-only"])
    p.add_argument("--modes", type=lambda s: s.split(","), default=list(PROPAGATION_MODES))
    _data_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_surgery)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(command)
    return None


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        try:
            pairs = read_config(args.config)
        except (OSError, ValueError) as exc:
            sub.error(str(exc))
        idx = argv.index(args.command)
        args = parser.parse_args(argv[:idx + 1] + _config_tokens(sub, pairs) + argv[idx + 1:])
    _check_ranges(parser, args)
    return args


def _check_ranges(parser, args):
    sub = _subparser(parser, args.command)
    if args.threads < 1:
        sub.error("--threads must be >= 1")
    for name in ("epochs", "batch_size", "train_n", "img_size", "class_count", "n"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            sub.error(f"--{name.replace('_', '-')} must be >= 1")
    for name in ("val_n", "test_n"):
        if getattr(args, name, 0) < 0:
            sub.error(f"--{name.replace('_', '-')} must be >= 0")
    T = getattr(args, "T", None)
    if T is not None and min(T if isinstance(T, list) else [T]) < 1:
        sub.error("--T values must be >= 1")
    if getattr(args, "z_range", None) is not None and len(args.z_range) != 2:
        sub.error("--z-range takes exactly two numbers")
    if getattr(args, "lr", 1.0) is not None and getattr(args, "lr", 1.0) < 0:
        sub.error("--lr must be >= 0")


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(out, args.command, args)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args, out)
    except (CommandError, GraphError, ValueError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
