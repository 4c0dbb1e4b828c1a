"""Command-line surface: ``python3 -m ssvos {infer,eval,train-toy,synth,gradcheck}``.

Exit status: 0 success, 1 bad input (files, flags, configs, specs), 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, ContractError, InputError, ShapeError, SpecError
from .metrics import MetricReport, evaluate_sequence, format_table, selftest_rows
from .params import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .pipeline import infer_sequence
from .synth import random_spec, spec_from_dict, synth_generate
from .training import TrainConfig, train_toy

log = logging.getLogger("ssvos")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
INPUT_ERRORS = (InputError, ConfigError, SpecError, ShapeError, ContractError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors raise instead of exiting with argparse's status 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _scales(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty scale list")
    return vals


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


# ---------------------------------------------------------------- subcommands

def cmd_infer(args) -> int:
    seq = io.load_sequence(args.sequence)
    params, meta = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig(**meta.get("model", {}))
    missing = set(init_params(model_cfg, 0)) - set(params)
    if missing:
        raise InputError(f"{args.checkpoint}: missing weights {sorted(missing)[:5]}")
    overrides = {"mem_interval": args.mem_interval, "mem_cap": args.mem_cap, "scales": args.scales,
                 "flip_fusion": args.flip, "seed": args.seed}
    cfg = io.engine_config(args.config, overrides)
    np.random.seed(cfg.seed)
    memlog, qlog = [], ([] if args.query_log else None)
    t0 = time.time()
    results = infer_sequence(seq.frames, seq.first_mask, cfg, params, model_cfg, memlog=memlog, query_log=qlog)
    log.info("segmented %d frames in %.1fs", len(results), time.time() - t0)
    report = None
    if seq.gt is not None:
        report = evaluate_sequence([r.label_mask for r in results], seq.gt, seq.object_ids, name=seq.name)
        print(format_table([(seq.name or "sequence", report)]))
    io.save_outputs(args.out, results, report, frames=None if args.no_overlays else seq.frames,
                    memlog=memlog if not args.no_memlog else None, query_log=qlog, id_map=seq.id_map)
    print(f"wrote {len(results)} masks to {Path(args.out) / 'masks'}")
    return EXIT_OK


def _mask_dir(path: Path, sub: str) -> Path:
    return path / sub if (path / sub).is_dir() else path


def cmd_eval(args) -> int:
    if args.selftest:
        ok = True
        for team, expected, got, passed in selftest_rows():
            print(f"{team:<10} J&F expected {expected:6.2f} recomputed {got:6.2f}  {'ok' if passed else 'MISMATCH'}")
            ok &= passed
        print("PASS" if ok else "FAIL")
        return EXIT_OK if ok else EXIT_INTERNAL
    if args.pred is None or args.gt is None:
        raise UsageError("eval needs PRED and GT directories (or --selftest)")
    preds = io.load_masks(_mask_dir(Path(args.pred), "masks"))
    gts = io.load_masks(_mask_dir(Path(args.gt), "gt"))
    if preds.shape != gts.shape:
        raise InputError(f"prediction stack {preds.shape} does not match ground truth {gts.shape}")
    ids = [int(i) for i in np.unique(gts[0]) if i != 0] or None
    report = evaluate_sequence(list(preds), list(gts), ids, name=Path(args.gt).name)
    print(format_table([(report.name or "sequence", report)]))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def _train_dataset(spec: dict) -> tuple[list, dict]:
    """Sequences and TrainConfig overrides from a training spec file."""
    train = spec.get("train", {})
    if not isinstance(train, dict):
        raise SpecError("'train' must be an object")
    if "sequences" in spec:
        specs = [spec_from_dict(d) for d in spec["sequences"]]
    elif "seeds" in spec:
        common = {k: spec[k] for k in ("num_objects", "frame_count", "frame_hw", "occlusion", "reentry")
                  if k in spec}
        if "frame_hw" in common:
            common["frame_hw"] = tuple(common["frame_hw"])
        specs = [random_spec(int(s), **common) for s in spec["seeds"]]
    else:
        specs = [spec_from_dict({k: v for k, v in spec.items() if k != "train"})]
    if not specs:
        raise SpecError("training spec lists no sequences")
    return [synth_generate(s) for s in specs], train


def cmd_train_toy(args) -> int:
    dataset, overrides = _train_dataset(_read_json(args.spec))
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(overrides) - names
    if unknown:
        raise SpecError(f"unknown training keys {sorted(unknown)}")
    for key in ("scale_aug",):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if args.iters is not None:
        overrides["iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_cfg = TrainConfig(**overrides)
    if train_cfg.iters < 1:
        raise ConfigError("iters must be >= 1")
    if train_cfg.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {train_cfg.optimizer!r}")
    cfg = io.engine_config(args.config, {"scales": (1.0,)})
    model_cfg = ModelConfig()
    result = train_toy(dataset, cfg=cfg, train_cfg=train_cfg, model_cfg=model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, meta={"model": model_cfg.to_dict(), "train": asdict(train_cfg),
                                              "sequences": len(dataset)})
    curve = Path(args.loss_curve) if args.loss_curve else out.with_suffix(".losses.csv")
    curve.write_text("iteration,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(result.losses)))
    print(f"trained {train_cfg.iters} iterations in {result.seconds:.1f}s; "
          f"final loss {np.mean(result.losses[-50:]):.4f}; checkpoint {out}; loss curve {curve}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec is not None:
        spec = spec_from_dict(_read_json(args.spec))
    else:
        spec = random_spec(args.seed, args.objects, args.frames, (args.size, args.size))
    frames, masks = synth_generate(spec)
    io.save_sequence(args.out, frames, masks, with_gt=not args.no_gt)
    print(f"wrote {len(frames)} frames with {spec.num_objects} objects to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import format_results, run_suite

    trials = (2, 1, 1) if args.quick else (10, 2, 1)
    results = run_suite(*trials, seed=args.seed or 0)
    print(format_results(results))
    ok = all(r.ok for r in results)
    print(f"max relative error {max(r.max_error for r in results):.3e}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INTERNAL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssvos", description="Spatial-semantic video object segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("infer", help="segment a sequence directory")
    s.add_argument("sequence")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key=value engine config file")
    s.add_argument("--mem-interval", type=int)
    s.add_argument("--mem-cap", type=int)
    s.add_argument("--scales", type=_scales, help="comma-separated, e.g. 1,1.5")
    s.add_argument("--flip", action="store_true", default=None, help="add horizontally flipped branches")
    s.add_argument("--seed", type=int)
    s.add_argument("--query-log", action="store_true", help="also write querylog.jsonl")
    s.add_argument("--no-memlog", action="store_true")
    s.add_argument("--no-overlays", action="store_true")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("pred", nargs="?")
    s.add_argument("gt", nargs="?")
    s.add_argument("--out", help="write the report as JSON")
    s.add_argument("--selftest", action="store_true", help="recompute the leaderboard J&F rows")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("train-toy", help="train on synthetic sequences from a JSON spec")
    s.add_argument("spec")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--loss-curve")
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="key=value engine config file")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("synth", help="render a synthetic sequence directory")
    s.add_argument("--spec", help="JSON spec; otherwise a random spec from --seed")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--no-gt", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the composed model")
    s.add_argument("--quick", action="store_true", help="fewer trials per op")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:          # --help
        return EXIT_OK if not e.code else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(cli_main())
