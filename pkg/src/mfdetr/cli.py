"""Command-line entry point: ``mfdetr <subcommand> ...``."""
from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import MaskHeadConfig, dump_config, load_config
from .errors import ConfigError, MFDError


def default_seed() -> int:
    raw = os.environ.get("MFD_SEED")
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"MFD_SEED must be an integer, got {raw!r}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One optional flag per MaskHeadConfig field (``--img-enc`` for ``img_enc``)."""
    p.add_argument("--config", help="flat key = value config file; flags override it")
    for f in fields(MaskHeadConfig):
        kind = {"int": int, "bool": _bool, "str": str}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config_from(args) -> MaskHeadConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(MaskHeadConfig)}
    if overrides.get("seed") is None and getattr(args, "config", None) is None:
        overrides["seed"] = default_seed()
    return load_config(args.config, overrides)


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synth import SceneSpec, write_dataset

    h, w = args.size
    seed = default_seed() if args.seed is None else args.seed
    names = write_dataset(args.out, seed, args.count, SceneSpec(H=h, W=w, max_instances=args.max_instances))
    print(f"wrote {len(names)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .synth import read_dataset
    from .training import train

    cfg = _config_from(args)
    scenes = read_dataset(args.data)
    seed = cfg.seed if args.train_seed is None else args.train_seed
    res = train(scenes, cfg, args.steps, args.batch_size, seed, base_lr=args.lr,
                use_sampling=not args.dense_loss, loss_csv=args.loss_csv, checkpoint=args.out,
                log_every=args.log_every)
    final = res.losses[-1] if res.losses else float("nan")
    print(f"trained {args.steps} steps in {res.seconds:.1f}s, final loss {final:.4f}; checkpoint {args.out}")
    return 0


def _predict(model, scenes):
    from .training import detector_outputs

    return [model.segment(d) for d in detector_outputs(scenes, model.cfg)]


def cmd_eval(args) -> int:
    from .evaluation import evaluate_ap, mean_matched_iou
    from .model import load_model
    from .synth import read_dataset

    model = load_model(args.checkpoint)
    scenes = read_dataset(args.data)
    preds = _predict(model, scenes)
    report = evaluate_ap(preds, scenes)
    print(report.to_text())
    print(f"mean matched mask IoU  {mean_matched_iou(preds, scenes):.4f}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def write_pgm(path, probs: np.ndarray) -> None:
    """8-bit binary PGM (P5), probability x 255 rounded."""
    img = np.clip(np.rint(np.asarray(probs, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError("not an 8-bit P5 PGM")
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def _load_scene(path):
    from .synth import read_scene

    return read_scene(path)


def cmd_infer(args) -> int:
    from . import io
    from .model import load_model

    model = load_model(args.checkpoint)
    scene = _load_scene(args.scene)
    preds = _predict(model, [scene])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["rank,query,label,raw_score,iou_pred,final_score,x0,y0,x1,y1"]
    for k, p in enumerate(preds):
        io.save(out / f"mask_{k:03d}.mfdt", np.asarray(p.mask_probs))
        iou = "" if p.iou_pred is None else f"{p.iou_pred:.6f}"
        b = p.box
        lines.append(f"{k},{p.query_index},{p.label},{p.raw_score:.6f},{iou},{p.final_score:.6f},"
                     f"{b.x0:.2f},{b.y0:.2f},{b.x1:.2f},{b.y1:.2f}")
    (out / "instances.csv").write_text("\n".join(lines) + "\n")
    print(f"{len(preds)} instances written to {out}")
    return 0


def cmd_dump_maps(args) -> int:
    from .model import MaskHead, load_model

    model = load_model(args.checkpoint) if args.checkpoint else MaskHead(_config_from(args))
    scene = _load_scene(args.scene)
    preds = _predict(model, [scene])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(preds):
        write_pgm(out / f"mask_{k:03d}.pgm", np.asarray(p.mask_probs))
    print(f"{len(preds)} maps written to {out}")
    return 0


def cmd_count_params(args) -> int:
    from .model import count_params

    t0 = time.perf_counter()
    cfg = _config_from(args)
    if args.table:
        print(block_table(cfg))
        return 0
    counts = count_params(cfg)
    width = max(len(k) for k in counts)
    for k, v in counts.items():
        print(f"{k.ljust(width)}  {v:>10d}  ({v / 1e6:.2f} M)")
    if args.timing:
        print(f"elapsed {time.perf_counter() - t0:.4f}s")
    return 0


def block_table(cfg: MaskHeadConfig) -> str:
    """Per-layer parameter counts of each encoder block family at cfg's width."""
    from .blocks import block_params

    lines = [f"block        per-layer params  (d={cfg.d}, heads={cfg.heads}, ffn={cfg.ffn_ratio * cfg.d})"]
    for kind in ("deformable", "window", "convnext"):
        n = block_params(kind, cfg.d, cfg.heads, cfg.levels, cfg.points, cfg.ffn_ratio * cfg.d, cfg.window)
        lines.append(f"{kind:<12} {n:>10d}  ({n / 1e6:.2f} M)")
    return "\n".join(lines)


def cmd_grad_check(args) -> int:
    from .checks import SUITE, run_suite

    names = args.only or list(SUITE)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        print(f"unknown checks: {unknown}; available: {sorted(SUITE)}", file=sys.stderr)
        return 2
    failed = 0
    for name, seed, rep in run_suite(range(args.seeds), names, eps=args.eps, tol=args.tol):
        failed += not rep.passed
        print(f"{name:<20} seed {seed:<3} {rep}")
    print(f"{failed} failing checks")
    return 1 if failed else 0


def cmd_show_config(args) -> int:
    sys.stdout.write(dump_config(_config_from(args)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfdetr", description="Trainable mask head over a frozen detector.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_size, default=(128, 128))
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the mask head")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=1.5e-4)
    p.add_argument("--train-seed", type=int, default=None)
    p.add_argument("--dense-loss", action="store_true", help="loss over every RoI cell instead of sampled points")
    p.add_argument("--loss-csv")
    p.add_argument("--log-every", type=int, default=50)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mask AP of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one scene directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("dump-maps", help="write every mask probability map as a PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_dump_maps)

    p = sub.add_parser("count-params", help="closed-form parameter counts")
    p.add_argument("--table", action="store_true", help="per-layer counts of the three block families")
    p.add_argument("--timing", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", nargs="*")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_show_config)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MFDError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
