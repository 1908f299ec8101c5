"""Command line: synth, train, eval, ground, gradcheck.

Exit status is 0 on success, 1 on invalid input or configuration and 2 on
any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import load_dataset, read_predictions, save_dataset, synth_splits, write_predictions
from .losses import SupervisionSetting
from .metrics import evaluate
from .model import GroundingModel
from .tensorcore import NonFiniteError, ShapeError
from .timeline import ValidationError
from .trainer import eval_records, infer, train
from .wsqg import WsqgConfig, ground

log = logging.getLogger("tqground")

SETTINGS = [s.value for s in SupervisionSetting]


def _split_dir(data: Path, name: str) -> Path:
    """``data/name`` when it holds a manifest, else ``data`` itself."""
    sub = data / name
    return sub if (sub / "manifest.json").exists() else data


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    train_set, val_set = synth_splits(cfg.synth)
    save_dataset(train_set, out / "train")
    save_dataset(val_set, out / "val")
    print(f"wrote {len(train_set)} train and {len(val_set)} val instances under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    setting = SupervisionSetting.parse(args.setting)
    dataset = load_dataset(_split_dir(Path(args.data), "train"))
    ckpt_dir = Path(args.out).with_suffix("").as_posix() + ".epochs" if args.keep_epochs else None
    model, history = train(dataset, setting, cfg, checkpoint_dir=ckpt_dir)
    model.save(args.out)
    if history.epochs:
        last = history.epochs[-1]
        print("final epoch " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k not in ("epoch", "lr")))
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    setting = SupervisionSetting.parse(args.setting)
    dataset = load_dataset(_split_dir(Path(args.data), "val"))
    model = GroundingModel.load(args.ckpt)
    preds = infer(dataset, model, setting, cfg.wsqg)
    pred_path = Path(args.predictions or Path(args.report).with_suffix(".predictions.jsonl"))
    write_predictions(preds, pred_path)
    report = evaluate(eval_records(preds))
    Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table(), end="")
    print(f"report written to {args.report}, predictions to {pred_path}")
    return 0


def _read_traces(path: Path):
    """(id, scores) pairs from JSON lines; prediction files qualify."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read traces ({exc.strerror})") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            yield str(obj["id"]), [float(x) for x in obj["scores"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: expected {{id, scores}} ({exc})") from None


def cmd_ground(args) -> int:
    cfg = WsqgConfig(alpha=args.alpha, scoring=args.scoring, refine=not args.no_refine)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for iid, scores in _read_traces(Path(args.traces)):
            try:
                span = ground(scores, cfg)
            except ValidationError as exc:
                raise ValidationError(f"{args.traces}: instance {iid}: {exc}") from None
            out.write(json.dumps({"id": iid, "span": span.to_list()}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_gradcheck(args) -> int:
    from . import tensorcore as tc
    from .checks import MODEL_ENTRIES, OP_BUILDERS, loss_builders, micro_model_builder

    builders = dict(OP_BUILDERS)
    builders.update(loss_builders())
    worst = 0.0
    for name, b in builders.items():
        err = tc.gradcheck(b, args.seed)
        worst = max(worst, err)
        print(f"{name:16s} {err:.3e}")
    err = tc.gradcheck(micro_model_builder(), args.seed, max_entries=None if args.all else MODEL_ENTRIES)
    worst = max(worst, err)
    print(f"{'model':16s} {err:.3e}")
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tol:g})")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tqground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic train/val dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True, help="dataset dir (uses DIR/train when present)")
    s.add_argument("--setting", choices=SETTINGS, default="full")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--keep-epochs", action="store_true", help="also write one checkpoint per epoch")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="predict and score a dataset")
    s.add_argument("--data", required=True, help="dataset dir (uses DIR/val when present)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--setting", choices=SETTINGS, default="full")
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--predictions", help="JSON lines output (default: next to the report)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ground", help="ground attention traces to spans")
    s.add_argument("--traces", required=True)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--no-refine", action="store_true")
    s.add_argument("--scoring", choices=["mean", "sum"], default="mean")
    s.add_argument("--out", help="output file (default: stdout)")
    s.set_defaults(fn=cmd_ground)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--all", action="store_true", help="check every model parameter entry")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ShapeError, NonFiniteError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
