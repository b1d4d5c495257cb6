"""Command-line entry point: ``dhcnet <subcommand> [flags]``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data, gradcheck, hcl, train
from .config import TrainConfig, coerce

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems by exception instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Turn ``--key value`` pairs into TrainConfig overrides (dashes map to underscores)."""
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    out: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        flag, eq, value = tok[2:].partition("=")
        key = flag.replace("-", "_")
        if key not in fields:
            raise UsageError(f"unknown config key --{flag}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"--{key} needs a value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def load_config(path: Optional[str], overrides: Dict[str, str]) -> TrainConfig:
    base = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    merged = dict(base)
    for k, v in overrides.items():
        try:
            merged[k] = coerce(fields[k], v)
        except ValueError as exc:
            raise UsageError(f"bad value for --{k}: {exc}") from None
    return TrainConfig.from_dict(merged)


def build_parser() -> _Parser:
    p = _Parser(prog="dhcnet", description="Holistic-cue training on a numpy autodiff engine.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic contour dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=data.DatasetSpec.num_classes)
    g.add_argument("--per-class", type=int, default=data.DatasetSpec.train_per_class,
                   help="training images per class (test count matches)")
    g.add_argument("--size", type=int, default=data.DatasetSpec.image_size)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one configuration; extra --key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=data.SPLITS, default="test")

    a = sub.add_parser("augment", help="write the shuffled images of one source image")
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--sigma", type=float, default=0.25)
    a.add_argument("--m", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="central-difference checks of every differentiable op")
    c.add_argument("--points", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("ablate", help="run the branch/loss ablation grid over several seeds")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--grid", choices=("branches", "all"), default="branches",
                   help="branches: baseline/+hcl/+hce/full; all: also the loss-choice grid")
    b.add_argument("--sigmas", default="")
    b.add_argument("--ms", default="")
    b.add_argument("--hce-modes", default="")
    b.add_argument("--mixup", action="store_true")
    return p


def _csv(text: str, kind=float) -> List:
    return [kind(v) for v in text.replace(",", " ").split()]


def cmd_gen_data(args) -> int:
    spec = data.DatasetSpec(num_classes=args.classes, train_per_class=args.per_class,
                            test_per_class=args.per_class, image_size=args.size, seed=args.seed)
    manifest = data.gen_dataset(spec, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = load_config(args.config, _config_overrides(extra))
    res = train.train(cfg, args.out)
    print(json.dumps({"final_test_acc": res.final_test_acc, "best_test_acc": res.best_test_acc,
                      "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = data.load(args.dataset)
    images, labels = ds.split(args.split)
    report = train.evaluate(args.checkpoint, images, labels, ds.num_classes)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_augment(args) -> int:
    from PIL import Image

    with Image.open(args.image) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    rng = np.random.default_rng(args.seed)
    aug = hcl.augment(img, args.image, args.sigma, args.m, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for e in aug.entries:
        png = out / f"{stem}_k{e.k}.png"
        data.save_png(e.image, png)
        sidecar = {"source": str(args.image), "corner": e.region.corner, "sigma": args.sigma,
                   "k": e.k, "n": e.n, "permutation": [int(v) for v in e.permutation]}
        png.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        print(png)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    return EXIT_OK if gradcheck.main(args.points, args.seed) else EXIT_RUNTIME


def cmd_ablate(args, extra) -> int:
    base = load_config(args.config, _config_overrides(extra))
    grid = train.ablation_grid(include_losses=args.grid == "all", sigmas=_csv(args.sigmas),
                               ms=_csv(args.ms, int), hce_modes=args.hce_modes.replace(",", " ").split(),
                               mixup=args.mixup)
    table = train.ablate(base, grid, _csv(args.seeds, int), args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    for row in table["rows"]:
        print(f"{row['name']:20s} {100 * row['mean']:6.2f} +- {100 * row['spread']:5.2f}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage().rstrip() + "\ndhcnet: error: a subcommand is required")
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\ndhcnet: error: a subcommand is required")
        if extra and args.command not in ("train", "ablate"):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.command == "train":
            # validate overrides before any work starts
            _config_overrides(extra)
            return cmd_train(args, extra)
        if args.command == "ablate":
            _config_overrides(extra)
            return cmd_ablate(args, extra)
        return {"gen-data": cmd_gen_data, "eval": cmd_eval, "augment": cmd_augment,
                "gradcheck": cmd_gradcheck}[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"dhcnet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
