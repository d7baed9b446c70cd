"""Command line entry point: ``iafa {gradcheck,train-toy,predict,eval,render,make-data}``.

Exit codes: 0 success, 1 input/validation failure, 2 numerical divergence.
``IAFA_NUM_THREADS`` caps the BLAS thread pool (read before numpy loads).
"""
from __future__ import annotations

import os

_threads = os.environ.get("IAFA_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import attention as A  # noqa: E402
from . import data as D  # noqa: E402
from . import detector as det  # noqa: E402
from . import evaluation as ev  # noqa: E402
from . import geometry as geo  # noqa: E402
from .errors import DivergenceError, IafaError  # noqa: E402
from .losses import LossWeights  # noqa: E402
from .tensor import load_checkpoint, save_checkpoint  # noqa: E402

log = logging.getLogger("iafa")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2

# built-in defaults; a config file (key=value) overrides these, flags override both
DEFAULTS = {
    "seed": 0,
    "trials": 100,
    "tolerance": 1e-4,
    "scenes": 20,
    "steps": 2000,
    "gamma": "1,1,1",
    "lr": 2.5e-4,
    "l1": 1e-7,
    "occlusion_pairs": 1,
    "metric": "both",
    "criterion": 40,
    "mask_background": True,
}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise D.ParseError("expected key=value", lineno, str(path))
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, keys) -> dict:
    """Merge flags > config file > built-in defaults for ``keys``."""
    cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            default = DEFAULTS.get(key)
            raw = cfg[key]
            if isinstance(default, bool):
                out[key] = _parse_bool(raw)
            elif isinstance(default, (int, float)) and not isinstance(default, bool):
                out[key] = type(default)(raw)
            else:
                out[key] = raw
        else:
            out[key] = DEFAULTS.get(key)
    return out


def parse_gamma(text: str) -> LossWeights:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise D.InputError(f"--gamma needs three comma-separated weights, got {text!r}")
    return LossWeights(*parts)


def _hash_inputs(config: dict, files=()) -> str:
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8"))
    for f in sorted(str(p) for p in files):
        h.update(f.encode("utf-8"))
        h.update(Path(f).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, outputs, files=()) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "input_hash": _hash_inputs(config, files),
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def scene_config(occlusion_pairs: int) -> D.SceneConfig:
    return D.SceneConfig(occlusion_pairs=int(occlusion_pairs))


# ---------------------------------------------------------------- commands


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    opts = resolve(args, ("seed", "trials", "tolerance"))
    reports = run_suite(opts["seed"], opts["trials"])
    failed = []
    for r in reports:
        ok = r.worst < opts["tolerance"]
        print(f"{r.op:<26} trials={r.trials:<4} worst_rel_err={r.worst:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(r)
    for r in failed:
        print(f"gradcheck failed: {r.op} (seed {r.worst_seed}, rel err {r.worst:.3e})", file=sys.stderr)
    return EXIT_INPUT if failed else EXIT_OK


def format_curve(curve) -> str:
    lines = ["step,loss_center,loss_reg,loss_mask,loss_total"]
    lines += [f"{s},{a:.12e},{b:.12e},{c:.12e},{t:.12e}" for s, a, b, c, t in curve]
    return "\n".join(lines) + "\n"


def cmd_train_toy(args) -> int:
    opts = resolve(args, ("seed", "scenes", "steps", "gamma", "lr", "l1", "occlusion_pairs", "mask_background"))
    opts["use_iafa"] = not args.no_iafa
    weights = parse_gamma(opts["gamma"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = D.generate_dataset(int(opts["scenes"]), int(opts["seed"]), scene_config(opts["occlusion_pairs"]))
    cfg = det.DetectorConfig()
    tcfg = det.TrainConfig(
        steps=int(opts["steps"]), lr=float(opts["lr"]), l1=float(opts["l1"]), seed=int(opts["seed"]),
        use_iafa=opts["use_iafa"], weights=weights, mask_background=bool(opts["mask_background"]),
    )
    try:
        result = det.train(scenes, cfg, tcfg)
    except DivergenceError as e:
        print(f"training diverged at step {e.step}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt = out / "checkpoint.bin"
    save_checkpoint(result.params, ckpt)
    curve = out / "loss.csv"
    curve.write_text(format_curve(result.curve), encoding="utf-8")
    iou = det.mean_train_iou(scenes, result.params, cfg, tcfg.use_iafa)
    write_manifest(out, "train-toy", opts, [ckpt, curve])
    if result.curve:
        last = result.curve[-1]
        print(f"steps={tcfg.steps} final_total={last[4]:.6g} mean_train_iou3d={iou:.4f}")
    else:
        print(f"steps=0 mean_train_iou3d={iou:.4f}")
    return EXIT_OK


def _load_model(path):
    cfg = det.DetectorConfig()
    params = det.init_params(cfg)
    params.load_state(load_checkpoint(path))
    return cfg, params


def cmd_predict(args) -> int:
    """Run a checkpoint on generated scenes and write KITTI detection files."""
    cfg, params = _load_model(args.checkpoint)
    opts = resolve(args, ("seed", "scenes", "occlusion_pairs"))
    scenes = D.generate_dataset(int(opts["scenes"]), int(opts["seed"]), scene_config(opts["occlusion_pairs"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scene in enumerate(scenes):
        _, dets = det.predict(scene, params, cfg, not args.no_iafa)
        labels = [
            D.KittiLabel.from_box(cfg.targets.classes[d.cls], d.box, scene.intrinsics, scene.image_size, score=d.score)
            for d in dets
        ]
        path = out / f"{i:06d}.txt"
        path.write_text(D.write_label_file(labels, detection=True), encoding="utf-8")
        written.append(path)
    write_manifest(out, "predict", {**opts, "no_iafa": args.no_iafa}, written, [args.checkpoint])
    print(f"wrote {len(written)} detection files to {out}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    opts = resolve(args, ("seed", "scenes", "occlusion_pairs"))
    scenes = D.generate_dataset(int(opts["scenes"]), int(opts["seed"]), scene_config(opts["occlusion_pairs"]))
    frames = D.write_dataset(scenes, args.out)
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    opts = resolve(args, ("metric", "criterion"))
    metrics = ("3d", "bev") if opts["metric"] == "both" else (opts["metric"],)
    criterion = int(opts["criterion"])
    if criterion not in ev.AP_FUNCS or any(m not in ev.IOU_FUNCS for m in metrics):
        print(f"unsupported metric/criterion {opts}", file=sys.stderr)
        return EXIT_INPUT
    report = ev.evaluate_split(args.det, args.gt, args.calib, metrics, criterion)
    print(report.to_text(), end="")
    out = Path(args.out) if args.out else Path(args.det) / f"report_R{criterion}.csv"
    out.write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def svg_bev(gt_boxes, det_boxes, size: int = 400, extent: float = 30.0) -> str:
    """Top-down view: x right, z up; ground truth solid, detections dashed."""
    scale = size / extent

    def pts(box):
        fp = box.footprint()
        return " ".join(f"{size / 2 + x * scale:.2f},{size - z * scale:.2f}" for x, z in fp)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for b in gt_boxes:
        parts.append(f'<polygon points="{pts(b)}" fill="none" stroke="green" stroke-width="1.5"/>')
    for b in det_boxes:
        parts.append(
            f'<polygon points="{pts(b)}" fill="none" stroke="red" stroke-width="1.5" stroke-dasharray="4,3"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(args) -> int:
    if not Path(args.checkpoint).exists():
        print(f"checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_INPUT
    cfg, params = _load_model(args.checkpoint)
    opts = resolve(args, ("occlusion_pairs",))
    scene = D.generate_scene(int(args.scene), scene_config(opts["occlusion_pairs"]))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, dets = det.predict(scene, params, cfg, use_iafa=True)
    g = outputs.relation
    written = []
    for i in range(len(scene.targets.centers)):
        center = scene.targets.interior_index(i)
        row = A.attention_row_for_center(g, center)
        lo, hi = row.min(), row.max()
        img = np.zeros_like(row) if hi <= lo else (row - lo) / (hi - lo) * 255
        path = out_dir / f"attention_{i:02d}.pgm"
        D.write_pgm(path, np.round(img))
        written.append(path)
        mask = scene.targets.masks.get(i)
        if mask is not None:
            print(f"object {i}: attention mass inside own mask = {A.mask_mass(g, center, mask):.4f}")
    svg = out_dir / "bev.svg"
    svg.write_text(svg_bev(scene.boxes, [d.box for d in dets]), encoding="utf-8")
    written.append(svg)
    write_manifest(out_dir, "render", {"scene": int(args.scene), **opts}, written, [args.checkpoint])
    print(f"wrote {len(written)} files to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iafa", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file of defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int)
    g.add_argument("--trials", type=int)
    g.add_argument("--tolerance", type=float)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="train on synthetic scenes")
    t.add_argument("--scenes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--gamma", help="loss weights center,reg,mask")
    t.add_argument("--lr", type=float)
    t.add_argument("--l1", type=float)
    t.add_argument("--occlusion-pairs", type=int)
    t.add_argument("--mask-background", type=_parse_bool, metavar="BOOL")
    t.add_argument("--no-iafa", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)

    pr = sub.add_parser("predict", help="write KITTI detections for generated scenes")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scenes", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--occlusion-pairs", type=int)
    pr.add_argument("--no-iafa", action="store_true")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("make-data", help="write synthetic scenes in the KITTI layout")
    m.add_argument("--scenes", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--occlusion-pairs", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_data)

    e = sub.add_parser("eval", help="KITTI-style AP over a split")
    e.add_argument("--det", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--calib")
    e.add_argument("--metric", choices=("3d", "bev", "both"))
    e.add_argument("--criterion", type=int, choices=(11, 40))
    e.add_argument("--out", help="report CSV path (default: <det>/report_R<criterion>.csv)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="attention rows (PGM) and BEV boxes (SVG)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", type=int, default=0, help="scene seed")
    r.add_argument("--occlusion-pairs", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except IafaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
