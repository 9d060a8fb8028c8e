import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from avclues.config import DETERMINISTIC_ENV, load_config

logger = logging.getLogger(__name__)


def _write_json(payload: dict, out: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        logger.info("Wrote %s", out)
    else:
        print(text)


def _run_config(args):
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_gen_synth(args) -> int:
    from avclues.feature_store import directory_checksum
    from avclues.synthetic import SyntheticSpec, generate_synthetic_dataset

    spec = SyntheticSpec(
        n_samples=args.samples,
        frames=args.frames,
        dim=args.dim,
        n_answer_classes=args.classes,
        noise_sigma=args.sigma,
        seed=args.seed,
        val_fraction=args.val_fraction,
        test_fraction=args.test_fraction,
    )
    manifest = generate_synthetic_dataset(spec, args.out)
    logger.info(
        "%d samples in %s, checksum %s",
        len(manifest.samples),
        args.out,
        directory_checksum(args.out),
    )
    return 0


def cmd_train(args) -> int:
    from avclues.trainer import fit

    result = fit(args.data, _run_config(args), args.out)
    _write_json(result.trace["epochs"][-1], None)
    return 0


def cmd_eval(args) -> int:
    from avclues.trainer import evaluate

    _write_json(evaluate(args.data, args.split, args.checkpoint).to_dict(), args.out)
    return 0


def cmd_ablate(args) -> int:
    from avclues.ablation import resolve_modes, run_ablation

    modes = resolve_modes(args.grid or ["all"])
    report = run_ablation(args.data, _run_config(args), modes, args.out)
    for row in report["rows"]:
        logger.info(
            "%-40s best val %s final test %s",
            row["mode"],
            row["best_val_acc"],
            row["final_test_acc"],
        )
    return 0


def cmd_gradcheck(args) -> int:
    from avclues.gradcheck import gradcheck

    report = gradcheck(_run_config(args), seed=args.seed or 0)
    _write_json(report.to_dict(), args.out)
    return 0 if report.passed else 1


def cmd_clue_recovery(args) -> int:
    from avclues.recovery import clue_recovery

    _write_json(clue_recovery(args.data, args.checkpoint, args.split).to_dict(), args.out)
    return 0


def cmd_plot(args) -> int:
    from avclues.curves import emit_curves

    _write_json(emit_curves(args.traces, args.out), None)
    return 0


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="Config override, repeatable",
    )
    parser.add_argument("--seed", type=int, help="Shortcut for --set train.seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avclues",
        description="Audio-visual question answering with question-centred clue aggregation.",
        epilog=f"Set {DETERMINISTIC_ENV}=1 to force deterministic torch kernels.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-synth", help="Generate the planted-clue benchmark")
    gen.add_argument("--out", required=True)
    gen.add_argument("--samples", type=int, default=6000)
    gen.add_argument("--frames", type=int, default=12)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--sigma", type=float, default=0.5)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--val-fraction", type=float, default=0.1)
    gen.add_argument("--test-fraction", type=float, default=0.1)
    gen.set_defaults(handler=cmd_gen_synth)

    train = commands.add_parser("train", help="Train one model")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="Run directory")
    _add_config_options(train)
    train.set_defaults(handler=cmd_train)

    evaluation = commands.add_parser("eval", help="Evaluate a checkpoint")
    evaluation.add_argument("--data", required=True)
    evaluation.add_argument("--checkpoint", required=True)
    evaluation.add_argument("--split", default="test")
    evaluation.add_argument("--out", help="Report JSON, stdout when omitted")
    evaluation.set_defaults(handler=cmd_eval)

    ablate = commands.add_parser("ablate", help="Train one model per ablation mode")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--out", required=True)
    ablate.add_argument(
        "--grid",
        action="append",
        help="attention, fusion, element, loss, modality, depth or all (default), repeatable",
    )
    _add_config_options(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    grad = commands.add_parser("gradcheck", help="Finite-difference gradient check")
    grad.add_argument("--out", help="Report JSON, stdout when omitted")
    _add_config_options(grad)
    grad.set_defaults(handler=cmd_gradcheck)

    recovery = commands.add_parser("clue-recovery", help="Planted-frame recovery of the clue selection")
    recovery.add_argument("--data", required=True)
    recovery.add_argument("--checkpoint", required=True)
    recovery.add_argument("--split", default="test")
    recovery.add_argument("--out", help="Report JSON, stdout when omitted")
    recovery.set_defaults(handler=cmd_clue_recovery)

    plot = commands.add_parser("plot", help="Accuracy curves from training traces")
    plot.add_argument("--traces", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=cmd_plot)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
