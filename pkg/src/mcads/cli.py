"""Command line interface: train / predict / eval / gradcheck / summary.

Exit codes: 0 success, 1 usage or config error, 2 data error (unreadable
files, malformed images, checkpoint mismatch), 3 numeric failure (NaN loss
or a gradient check beyond tolerance).

Setting MCADS_GRADCHECK_FAULT=1 makes `gradcheck` corrupt one analytic
gradient on purpose; it exists so tests can prove the harness rejects
wrong gradients.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gradcheck_mod
from . import infer, metrics, netpbm, summary
from .config import ConfigError, load_config
from .netpbm import NetpbmError
from .network import SegmentationModel
from .params import CheckpointMismatch, load_checkpoint
from .tensor import NumericError
from .train import run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the declared contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                   help="dotted config override, value parsed as JSON")
    p.add_argument("--seed", type=int, help="override model and train seeds")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--f64", action="store_true",
                   help="run the model in float64")


def _config_from(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.model.seed = args.seed
    return cfg


def _dtype(args):
    return np.float64 if args.f64 else np.float32


def _load_model(cfg, checkpoint, dtype) -> SegmentationModel:
    model = SegmentationModel(cfg.model, dtype=dtype)
    state = load_checkpoint(checkpoint)
    model.store.load_state(state)
    return model


def cmd_train(args) -> int:
    cfg = _config_from(args)
    out_dir = args.out or cfg.train.checkpoint_dir
    result = run_training(cfg, out_dir, dtype=_dtype(args))
    print(f"{result.steps} steps, final loss {result.final_loss:.6f}, "
          f"best {result.best_loss:.6f}")
    print(f"log: {result.csv_path}")
    print(f"checkpoints: {result.best_path} {result.last_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config_from(args)
    model = _load_model(cfg, args.checkpoint, _dtype(args))
    image = netpbm.read_image(args.image)
    mask, prob = infer.predict_mask(
        model, image, patch=cfg.data.patch, stride=cfg.data.stride,
        threshold=cfg.eval.threshold, threads=args.threads)
    netpbm.write_mask(args.out, mask)
    if args.prob:
        netpbm.write_image(args.prob, prob)
    print(f"wrote {args.out} ({int(mask.sum())} foreground pixels)")
    return EXIT_OK


def _mask_ids(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"not a directory: {directory}")
    return {os.path.splitext(f)[0] for f in os.listdir(directory)
            if f.endswith(".pgm")}


def cmd_eval(args) -> int:
    _config_from(args)  # eval ignores the config but still validates it
    pred_ids = _mask_ids(args.pred)
    gt_ids = _mask_ids(args.gt)
    if pred_ids != gt_ids:
        raise FileNotFoundError(
            f"prediction/ground-truth id mismatch: {sorted(pred_ids ^ gt_ids)}")
    entries = []
    for sid in sorted(pred_ids):
        pred = netpbm.read_mask(os.path.join(args.pred, sid + ".pgm"))
        gt = netpbm.read_mask(os.path.join(args.gt, sid + ".pgm"))
        entries.append((sid, pred, gt))
    rep = metrics.report(entries)
    text = json.dumps(rep, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    fault = os.environ.get("MCADS_GRADCHECK_FAULT") == "1"
    results = gradcheck_mod.run_suite(include_model=not args.skip_model,
                                      fault=fault)
    width = max(len(r["name"]) for r in results)
    failed = 0
    for r in results:
        status = "pass" if r["passed"] else "FAIL"
        print(f"{r['name']:<{width}}  {r['kind']:<9}  "
              f"{r['max_rel_err']:.3e}  tol {r['tol']:.0e}  {status}")
        failed += not r["passed"]
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_summary(args) -> int:
    cfg = _config_from(args)
    hw = None if args.no_macs else (args.input_size or cfg.data.patch)
    rep = summary.summary_report(cfg.model, input_hw=hw, dtype=_dtype(args))
    print(summary.format_table(rep))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rep, f, indent=2)
            f.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcads",
                     description="encoder-decoder segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train on a dataset or synthetic data")
    _add_common(p)
    p.add_argument("--out", help="output directory (default: config's "
                                 "checkpoint_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask (.pgm)")
    p.add_argument("--prob", help="also write the probability map (.pgm)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of predicted .pgm")
    p.add_argument("--gt", required=True, help="directory of reference .pgm")
    p.add_argument("--out", help="write the JSON report here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--skip-model", action="store_true",
                   help="skip the micro-model case (faster)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("summary", help="parameter and MAC accounting")
    _add_common(p)
    p.add_argument("--input-size", type=int,
                   help="square input extent for the MAC estimate")
    p.add_argument("--no-macs", action="store_true",
                   help="skip the forward pass, report parameters only")
    p.add_argument("--json", help="write the machine-readable report here")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NetpbmError, CheckpointMismatch, FileNotFoundError, NotADirectoryError,
            PermissionError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
