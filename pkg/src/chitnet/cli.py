"""``chitnet`` command line: train, fuse, eval, inspect.

Exit codes: 0 success, 1 validation error (bad flags, config, inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_manifest
from .imaging import ImageValidationError, is_color, load_dataset, load_gray, save_gray, validate_gray
from .network import fuse_pair
from .trainer import ConfigError, TrainingDiverged, load_config, load_model, parse_log, train
from .metrics import METRIC_NAMES, evaluate_corpus

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("chitnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _fail(msg: str, code: int) -> int:
    print(f"chitnet: {msg}", file=sys.stderr)
    return code


# -- train ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.resume:
        meta, _ = read_manifest(args.resume)
        if int(meta.get("iteration", 0)) >= cfg.iteration_maximum:
            print(f"checkpoint already at iteration {meta['iteration']} of {cfg.iteration_maximum}; nothing to do")
            return EXIT_OK
    if not cfg.dataset:
        raise ConfigError("config must set dataset (a directory with ir/ and vis/ subfolders)")
    dataset = load_dataset(cfg.dataset)
    trainer = train(cfg, dataset, args.out, resume=args.resume)
    out = Path(args.out)
    records = parse_log(out / "loss.log")
    last_m = next((r for r in reversed(records) if "mit_total" in r), None)
    last_s = next((r for r in reversed(records) if "siphia_total" in r and not r.get("joint")), None)
    print(f"finished at iteration {trainer.iteration}; checkpoint {out / 'final.chit'}")
    if last_m:
        print(f"last M step (iter {last_m['iter']}): mit_total={last_m['mit_total']:.6g} "
              f"int={last_m['int']:.6g} jgrad={last_m['jgrad']:.6g}")
    if last_s:
        print(f"last S step (iter {last_s['iter']}): siphia_total={last_s['siphia_total']:.6g} "
              f"inter={last_s['inter']:.6g}")
    return EXIT_OK


# -- fuse ----------------------------------------------------------------

def _feature_map(t) -> np.ndarray:
    """Channel-averaged feature map, min-max scaled to [0, 1] for viewing."""
    m = t[0].mean(dim=0).double().numpy()
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)


def intermediate_images(out) -> dict[str, np.ndarray]:
    imgs = {
        "feat_ir": _feature_map(out.mit.f_ir),
        "feat_vis2ir": _feature_map(out.mit.f_vis2ir),
        "feat_vis": _feature_map(out.mit.f_vis),
        "feat_ir2vis": _feature_map(out.mit.f_ir2vis),
    }
    for tag, s in (("ir", out.siphia_ir), ("vis", out.siphia_vis)):
        if s is None:
            continue
        for name in ("rec1", "rec2", "edge1", "edge2", "rec_en"):
            imgs[f"{tag}_{name}"] = getattr(s, name)[0, 0].double().numpy()
    return imgs


def cmd_fuse(args) -> int:
    for p in (args.ir, args.vis):
        if is_color(p) and not args.force_gray:
            raise ImageValidationError(f"{p} is a color image; pass --force-gray to convert it to luminance")
    ir, vis = load_gray(args.ir), load_gray(args.vis)
    if ir.shape != vis.shape:
        raise ImageValidationError(f"ir {ir.shape} and vis {vis.shape} differ in size")
    validate_gray(ir, min_size=1)
    model, _ = load_model(args.checkpoint)
    fused, out = fuse_pair(model, ir, vis)
    dest = Path(args.out)
    save_gray(fused, dest)
    written = [dest]
    if args.save_intermediates:
        for name, img in intermediate_images(out).items():
            path = dest.with_name(f"{dest.stem}_{name}.png")
            save_gray(np.clip(img, 0.0, 1.0), path)
            written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


# -- eval ----------------------------------------------------------------

def cmd_eval(args) -> int:
    for d in (args.fused, args.ir, args.vis):
        if not Path(d).is_dir():
            raise ImageValidationError(f"not a directory: {d}")
    if args.jobs < 1:
        raise ImageValidationError("--jobs must be >= 1")
    report = evaluate_corpus(args.fused, args.ir, args.vis, jobs=args.jobs)
    for name in report.unmatched:
        print(f"chitnet: unmatched file skipped: {name}", file=sys.stderr)
    if not report.rows:
        return _fail("no file name is present in all three directories", EXIT_INVALID)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_csv())
    print(report.format_table())
    return EXIT_INVALID if report.unmatched else EXIT_OK


# -- inspect -------------------------------------------------------------

def cmd_inspect(args) -> int:
    manifest, _ = read_manifest(args.checkpoint)
    records = manifest.pop("tensors")
    if args.json:
        manifest["tensors"] = records
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return EXIT_OK
    model = [r for r in records if r["key"].startswith("model.")]
    n_params = sum(int(np.prod(r["shape"])) for r in model)
    print(f"kind:        {manifest.get('kind', '?')}")
    print(f"iteration:   {manifest.get('iteration', '?')}")
    print(f"tensors:     {len(records)} ({len(model)} model, {n_params} values)")
    for i, perm in enumerate(manifest.get("permutations", [])):
        print(f"perm[{('ir', 'vis')[i]}]:   {perm}")
    for k, v in sorted(manifest.get("config", {}).items()):
        print(f"config.{k} = {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chitnet", description="Infrared/visible image fusion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True, help="directory for checkpoints and loss.log")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse one registered ir/vis pair")
    f.add_argument("--ir", required=True)
    f.add_argument("--vis", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True, help="output PNG path")
    f.add_argument("--save-intermediates", action="store_true",
                   help="also write feature maps and auxiliary-branch images next to --out")
    f.add_argument("--force-gray", action="store_true", help="accept color inputs (converted to luminance)")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score a directory of fused images")
    e.add_argument("--fused", required=True)
    e.add_argument("--ir", required=True)
    e.add_argument("--vis", required=True)
    e.add_argument("--out", required=True, help="CSV report path")
    e.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print a checkpoint manifest")
    i.add_argument("checkpoint")
    i.add_argument("--json", action="store_true", help="dump the full manifest as JSON")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, ImageValidationError, CheckpointError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_INVALID)
    except ValueError as exc:  # shape errors and malformed inputs
        return _fail(str(exc), EXIT_INVALID)
    except TrainingDiverged as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
