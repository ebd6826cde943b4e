"""``splatcal`` command line.

Machine-readable results go to files under ``--out`` or to standard output
as JSON; diagnostics go to standard error.  Exit codes: 0 success, 1 usage
error, 2 runtime error (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SplatcalError

log = logging.getLogger("splatcal")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj, out_file=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out_file is not None:
        Path(out_file).write_text(text + "\n")
    print(text)


def _resolve_threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("SPLATCAL_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SPLATCAL_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    return n


# -- subcommands ----------------------------------------------------------------

def cmd_gen_scene(args):
    from .synthscene import gen_scene, render_dataset

    if args.out is None:
        raise UsageError("gen-scene needs --out")
    scene = gen_scene(args.preset, args.views, seed=args.seed, span_deg=args.span,
                      width=args.width, height=args.height)
    seq = render_dataset(scene, args.out)
    _emit({"preset": scene.preset, "seed": scene.seed, "views": len(seq),
           "gaussians": len(scene.gaussians), "width": seq.width, "height": seq.height,
           "span_deg": scene.span_deg, "manifest": str(seq.manifest_path)})


def cmd_label_overlap(args):
    from .curriculum import SemanticOverlap, label_profile, read_embeddings
    from .synthscene import load_sequence

    seq = load_sequence(args.seq)
    if args.provider == "geometric":
        provider = seq.geometric_provider()
    elif args.provider == "external":
        if not args.embeddings:
            raise UsageError("--provider external needs --embeddings")
        emb = read_embeddings(args.embeddings)
        if emb.shape[0] != len(seq):
            raise UsageError(f"embeddings cover {emb.shape[0]} frames, sequence has {len(seq)}")
        provider = SemanticOverlap(embeddings=emb)
        provider.tag = "external"
    else:
        provider = seq.semantic_provider()
    profile = label_profile(seq, provider, spacings=args.spacings, n_triplets=args.triplets,
                            seed=args.seed)
    out = None
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        out = Path(args.out) / "profile.json"
    _emit(profile.to_json(), out)


def _fit_config(args):
    from .selfcal import FitConfig

    d = {}
    if args.config:
        d.update(dataclasses.asdict(FitConfig.from_file(args.config)))
    for f in dataclasses.fields(FitConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            d[f.name] = v
    d["seed"] = args.seed
    d["threads"] = args.threads_resolved
    d["precision"] = args.precision
    return FitConfig.from_dict(d)


def cmd_fit(args):
    from .curriculum import OverlapProfile
    from .geometry import CameraIntrinsics, CameraPose
    from .selfcal import fit
    from .splat.io import save_checkpoint
    from .synthscene import load_sequence

    if args.out is None:
        raise UsageError("fit needs --out")
    config = _fit_config(args)
    seq = load_sequence(args.seq)
    profile = OverlapProfile.load(args.profile) if args.profile else None
    init_poses = init_k = None
    if args.init_cameras:
        doc = json.loads(Path(args.init_cameras).read_text())
        init_poses = [CameraPose.from_json(p) for p in doc["poses"]]
        if "intrinsics" in doc:
            init_k = CameraIntrinsics.from_json(doc["intrinsics"])
    res = fit(seq, config, profile=profile, init_poses=init_poses, init_intrinsics=init_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = {"intrinsics": res.intrinsics.to_json(), "poses": [p.to_json() for p in res.cameras],
            "visited": res.visited}
    (out / "cameras.json").write_text(json.dumps(cams, indent=1) + "\n")
    with open(out / "loss_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "grad_norm", "skipped"])
        for d in res.diagnostics:
            w.writerow([d.step, repr(float(d.loss)), repr(float(d.grad_norm)), int(d.skipped)])
    if res.state is not None:
        st = res.state
        save_checkpoint(out / "checkpoint.splc", st.gaussians, st.intrinsics,
                        {"cameras": cams["poses"], "frames": list(map(int, st.frames)),
                         "ref": [int(st.frames[r]) for r in st.ref],
                         "tgt": [int(st.frames[t]) for t in st.tgt],
                         "config": config.to_json()})
    summary = res.to_json()
    summary["config"] = config.to_json()
    summary["final_loss"] = res.history[-1] if res.history else None
    (out / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _emit({"steps": len(res.history), "final_loss": summary["final_loss"],
           "skipped_steps": len(summary["skipped_steps"]), "out": str(out)})


def _checkpoint_camera(meta, frame):
    from .geometry import CameraPose

    cams = meta.get("cameras")
    if not cams:
        raise UsageError("checkpoint carries no per-frame cameras")
    if not 0 <= frame < len(cams):
        raise UsageError(f"frame {frame} outside 0..{len(cams) - 1}")
    return CameraPose.from_json(cams[frame])


def cmd_render(args):
    from .geometry import CameraPose
    from .splat import render
    from .splat.io import load_checkpoint
    from .synthscene import write_depth, write_png

    g, k, meta = load_checkpoint(args.checkpoint)
    if args.pose:
        pose = CameraPose.from_json(json.loads(Path(args.pose).read_text()))
    else:
        pose = _checkpoint_camera(meta, args.frame)
    out = render(g, k, pose)
    if args.out is None:
        raise UsageError("render needs --out")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    stem = f"render_{args.frame:05d}" if not args.pose else "render"
    write_png(Path(args.out) / f"{stem}.png", out.rgb)
    write_depth(Path(args.out) / f"{stem}_depth.bin", out.depth)
    _emit({"image": str(Path(args.out) / f"{stem}.png"),
           "depth": str(Path(args.out) / f"{stem}_depth.bin"),
           "mean_alpha": float(out.alpha.mean())})


def _load_poses(path):
    from .geometry import CameraPose

    doc = json.loads(Path(path).read_text())
    return [CameraPose.from_json(p) for p in doc["poses"]], doc


def cmd_eval_pose(args):
    from .evalmetrics import PoseSet, trajectory_report
    from .synthscene import load_sequence

    pred, doc = _load_poses(args.pred)
    gt = load_sequence(args.seq).require_gt().poses
    idx = args.frames if args.frames else doc.get("visited") or list(range(len(gt)))
    rep = trajectory_report(PoseSet([pred[i] for i in idx], idx), PoseSet([gt[i] for i in idx], idx),
                            args.thresholds)
    _emit(rep, Path(args.out) / "eval_pose.json" if args.out else None)


def cmd_eval_nvs(args):
    from .photometric import psnr
    from .splat import render
    from .splat.io import load_checkpoint
    from .synthscene import load_sequence

    g, k, meta = load_checkpoint(args.checkpoint)
    seq = load_sequence(args.seq)
    frames = args.frames if args.frames else meta.get("tgt") or []
    if not frames:
        raise UsageError("no frames to evaluate; pass --frames")
    scores = {}
    for f in frames:
        img = seq.image(f)
        if img.shape[:2] != (k.height, k.width):
            raise UsageError(f"frame {f} is {img.shape[1]}x{img.shape[0]}, checkpoint renders "
                             f"{k.width}x{k.height}")
        scores[str(f)] = psnr(render(g, k, _checkpoint_camera(meta, f)).rgb, img)
    _emit({"psnr": scores, "mean_psnr": float(np.mean(list(scores.values())))},
          Path(args.out) / "eval_nvs.json" if args.out else None)


def cmd_eval_depth(args):
    from .evalmetrics import depth_metrics
    from .splat import render
    from .splat.io import load_checkpoint
    from .synthscene import load_sequence

    g, k, meta = load_checkpoint(args.checkpoint)
    seq = load_sequence(args.seq)
    gt = seq.require_gt()
    frames = args.frames if args.frames else meta.get("frames") or []
    out = {}
    for f in frames:
        r = render(g, k, _checkpoint_camera(meta, f))
        out[str(f)] = depth_metrics(r.depth, gt.depth(f), alpha=r.alpha).to_json()
    _emit({"frames": out,
           "mean_absrel": float(np.mean([v["absrel"] for v in out.values()])) if out else None,
           "mean_delta125": float(np.mean([v["delta125"] for v in out.values()])) if out else None},
          Path(args.out) / "eval_depth.json" if args.out else None)


def cmd_gradcheck(args):
    from .splat.gradcheck import run_gradcheck

    precisions = ("f64", "f32") if args.precision_all else (args.precision,)
    rep = run_gradcheck(n_scenes=args.scenes, eps=args.eps, precisions=precisions, seed=args.seed)
    out = None
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        out = Path(args.out) / "gradcheck.json"
    _emit(rep, out)
    return EXIT_OK if rep["passed"] else EXIT_RUNTIME


# -- parser ---------------------------------------------------------------------

def _fit_flags(p):
    from .selfcal import FitConfig

    for f in dataclasses.fields(FitConfig):
        if f.name in ("seed", "threads", "precision"):
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if "bool" in kind:
            p.add_argument(flag, dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction, default=None)
        elif "int" in kind and "float" not in kind:
            p.add_argument(flag, dest=f"cfg_{f.name}", type=int, default=None)
        elif "float" in kind:
            p.add_argument(flag, dest=f"cfg_{f.name}", type=float, default=None)
        else:
            p.add_argument(flag, dest=f"cfg_{f.name}", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SPLATCAL_THREADS or 1)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f64")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="splatcal", description="Self-calibrating Gaussian splatting toolkit.")
    p.add_argument("--version", action="version", version=f"splatcal {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-scene", parents=[common], help="author and render a synthetic sequence")
    s.add_argument("--preset", default="box")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--span", type=float, default=None, help="orbit span in degrees")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("label-overlap", parents=[common], help="build an overlap-vs-spacing profile")
    s.add_argument("--seq", required=True)
    s.add_argument("--provider", choices=("semantic", "geometric", "external"), default="semantic")
    s.add_argument("--embeddings", default=None, help="sidecar for --provider external")
    s.add_argument("--triplets", type=int, default=8)
    s.add_argument("--spacings", type=int, nargs="+", default=None)
    s.set_defaults(func=cmd_label_overlap)

    s = sub.add_parser("fit", parents=[common], help="jointly optimize cameras and Gaussians")
    s.add_argument("--seq", required=True)
    s.add_argument("--config", default=None, help="TOML or JSON file with FitConfig fields")
    s.add_argument("--profile", default=None)
    s.add_argument("--init-cameras", default=None, help="cameras JSON used as the starting point")
    _fit_flags(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", parents=[common], help="render a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--pose", default=None, help="pose JSON overriding --frame")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval-pose", parents=[common], help="relative pose accuracy against ground truth")
    s.add_argument("--pred", required=True, help="cameras JSON written by fit")
    s.add_argument("--seq", required=True)
    s.add_argument("--thresholds", type=float, nargs="+", default=[5.0, 15.0, 30.0])
    s.add_argument("--frames", type=int, nargs="+", default=None)
    s.set_defaults(func=cmd_eval_pose)

    s = sub.add_parser("eval-nvs", parents=[common], help="PSNR of rendered views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--frames", type=int, nargs="+", default=None)
    s.set_defaults(func=cmd_eval_nvs)

    s = sub.add_parser("eval-depth", parents=[common], help="depth AbsRel and delta<1.25")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--frames", type=int, nargs="+", default=None)
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the renderer")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--precision-all", action="store_true", help="check both f32 and f64")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage().strip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        args.threads_resolved = _resolve_threads(args)
        from .splat import set_num_threads

        set_num_threads(args.threads_resolved)
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (SplatcalError, OSError, ValueError, KeyError) as e:
        print(f"splatcal: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
