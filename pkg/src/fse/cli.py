"""``fse`` command-line entry point: synth | train | eval | infer | report.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint
from .errors import FseError, NumericError
from .imaging import (
    default_output_root,
    list_images,
    load_image,
    load_paired_dataset,
    resize,
    save_image,
    save_paired_sample,
)
from .metrics import MetricReport, load_backend

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("fse")


class UsageError(Exception):
    pass


def _histogram(values, edges) -> str:
    counts, _ = np.histogram(values, bins=edges)
    return "  ".join(f"[{lo:g},{hi:g}):{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import MIN_SIZE, synthesize_from_seed

    if args.count <= 0:
        raise UsageError("count must be positive")
    clean_dir = Path(args.clean)
    if not clean_dir.is_dir():
        raise UsageError(f"clean image directory not found: {clean_dir}")
    files = list_images(clean_dir)
    if not files:
        raise UsageError(f"no images in {clean_dir}")
    out = Path(args.out) if args.out else default_output_root() / "synth"
    (out / "spec").mkdir(parents=True, exist_ok=True)

    opacities, feathers, shapes = [], [], Counter()
    for i, path in enumerate(files):
        clean = load_image(path)
        if clean.shape[1] == 1:
            clean = clean.expand(-1, 3, -1, -1).contiguous()
        if min(clean.shape[-2:]) < MIN_SIZE:
            raise UsageError(f"{path.name} is smaller than {MIN_SIZE}x{MIN_SIZE}")
        for k in range(args.count):
            seed = int(np.random.SeedSequence([args.seed, i, k]).generate_state(1)[0])
            pid = f"{path.stem}_{k:03d}"
            pair, spec = synthesize_from_seed(clean, seed, args.micro_density, id=pid)
            save_paired_sample(pair, out)
            (out / "spec" / f"{pid}.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1))
            opacities.append(spec.opacity)
            feathers.append(spec.feather_radius)
            shapes[spec.shape] += 1

    print(f"pairs written: {len(opacities)} -> {out}")
    print("opacity  " + _histogram(opacities, [0.15, 0.225, 0.30, 0.375, 0.45 + 1e-9]))
    print("feather  " + _histogram(feathers, [5, 15 + 1e-9, 25, 37.5, 50 + 1e-9]))
    print("shapes   " + "  ".join(f"{k}:{v}" for k, v in sorted(shapes.items())))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .config import load_run_config
    from .train import train

    run = load_run_config(args.config, out_override=args.out, seed_override=args.seed)
    dataset = load_paired_dataset(run.data_root, run.manifest)
    backend_spec = args.perceptual_backend or run.perceptual_backend
    backend = load_backend(backend_spec) if run.train.loss_weights.lambda2 > 0 else None
    resume = load_checkpoint(args.resume) if args.resume else None

    run.out.mkdir(parents=True, exist_ok=True)
    snapshot = {"fse": run.fse.to_dict(), "train": run.train.to_dict(), "data": str(run.data_root)}
    (run.out / "config.snapshot.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))
    bundle, history = train(
        dataset, run.fse, run.train, resume=resume, backend=backend,
        out_dir=run.out, log_path=run.out / "loss_log.csv", progress_every=args.progress,
    )
    last = history[-1]["total"] if history else float("nan")
    print(f"trained to step {bundle.step}; final loss {last:.6f}; checkpoint {run.out / 'last.fse'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / infer
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .train import evaluate

    bundle = load_checkpoint(args.checkpoint)
    dataset = load_paired_dataset(args.data, args.manifest)
    backend = load_backend(args.perceptual_backend or "fallback")
    name = args.name or Path(args.data).name
    report, outputs = evaluate(bundle, dataset, args.resolution, backend, dataset_name=name, return_outputs=True)
    report.method = args.method
    text = report.to_text()
    print(text, end="")
    if report.lpips_proxy:
        print("note: perceptual score uses the random-feature fallback (proxy, not LPIPS)")
    out = Path(args.out) if args.out else default_output_root() / "eval" / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    if args.save_outputs:
        for pair, pred in zip(dataset, outputs):
            save_image(pred, out / "outputs" / f"{pair.id}.png")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import model_from_checkpoint, restore

    net, stages = model_from_checkpoint(load_checkpoint(args.checkpoint))
    out = Path(args.out) if args.out else default_output_root() / "infer"
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    for p in args.inputs:
        p = Path(p)
        inputs.extend(list_images(p) if p.is_dir() else [p])
    for path in inputs:
        try:
            img = load_image(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read input {path}: {exc}") from exc
        if img.shape[1] == 1:
            img = img.expand(-1, 3, -1, -1).contiguous()
        img = img[:, :3]
        if args.resolution:
            img = resize(img, args.resolution)
        mask = None
        if args.mask:
            mask = load_image(args.mask)[:, :1]
            if args.resolution:
                mask = resize(mask, args.resolution)
            if mask.shape[-2:] != img.shape[-2:]:
                raise UsageError(f"mask {args.mask} does not match the size of {path.name}")
            mask = (mask > 0.5).float()
        pred, refined = restore(net, stages, img, mask)
        save_image(pred, out / f"{path.stem}.png")
        if args.save_mask:
            save_image(refined, out / f"{path.stem}_mask.png")
    print(f"restored {len(inputs)} image(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def render_table(reports: list[MetricReport]) -> str:
    """Methods as rows, one PSNR/SSIM/MSE/LPIPS column group per dataset."""
    datasets = list(dict.fromkeys(r.dataset or "-" for r in reports))
    methods = list(dict.fromkeys(r.method or "-" for r in reports))
    cells = {((r.method or "-"), (r.dataset or "-")): r for r in reports}
    proxy = any(r.lpips_proxy for r in reports)
    cols = ["PSNR", "SSIM", "MSE", "LPIPS*" if proxy else "LPIPS"]
    width = max([len("Method")] + [len(m) for m in methods])
    group = 4 * 9
    lines = [" " * width + " | " + " | ".join(d.center(group) for d in datasets)]
    lines.append("Method".ljust(width) + " | " + " | ".join("".join(c.rjust(9) for c in cols) for _ in datasets))
    lines.append("-" * len(lines[-1]))
    for m in methods:
        parts = []
        for d in datasets:
            r = cells.get((m, d))
            if r is None:
                parts.append("-".rjust(9) * 4)
                continue
            lp = "n/a" if r.lpips is None else f"{r.lpips:.4f}"
            parts.append(f"{r.psnr:9.2f}{r.ssim:9.3f}{r.mse:9.4f}{lp:>9}")
        lines.append(m.ljust(width) + " | " + " | ".join(parts))
    if proxy:
        lines.append("* perceptual column from the random-feature proxy, not LPIPS")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        p = Path(p)
        if not p.is_file():
            raise UsageError(f"report not found: {p}")
        r = MetricReport.from_text(p.read_text())
        if not r.method:
            r.method = p.parent.name
        reports.append(r)
    table = render_table(reports)
    print(table, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fse", description="Facial shadow removal toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize shadowed/clean training pairs")
    p.add_argument("--clean", required=True, help="directory of shadow-free images")
    p.add_argument("--count", type=int, default=1, help="pairs per clean image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--micro-density", type=float, default=0.01)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--perceptual-backend")
    p.add_argument("--progress", type=int, default=0, help="log every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--resolution", type=int)
    p.add_argument("--out")
    p.add_argument("--name", help="dataset label for the report")
    p.add_argument("--method", default="FSE")
    p.add_argument("--save-outputs", action="store_true")
    p.add_argument("--perceptual-backend")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="remove shadows from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--mask", help="optional initial mask image")
    p.add_argument("--resolution", type=int)
    p.add_argument("--save-mask", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="tabulate report.txt files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"fse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FseError, FileNotFoundError, ValueError) as exc:
        print(f"fse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
