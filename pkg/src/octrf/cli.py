"""Command-line surface: build, train, render, eval, calibrate, compress, stats.

Heavy modules are imported inside the command handlers so the thread count
can be pinned into the environment before the compiled kernels load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, MissingAssetError, OctrfError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octrf",
        description="Sparse octree radiance fields with signal-guided "
                    "structure calibration.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for rendering kernels "
                             "(default: DOT_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common],
                       help="create a dense tree from a toy scene spec or "
                            "a dataset directory")
    p.add_argument("--scene", required=True,
                   help="toy scene JSON file or dataset directory")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common],
                       help="optimize payloads with periodic calibration")
    p.add_argument("--tree", required=True)
    p.add_argument("--dataset", required=True,
                   help="dataset directory or toy scene JSON file")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--interval", type=int, default=20)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--recursive", action="store_true")
    p.add_argument("--signal", choices=("q", "sigma"), default="q")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None,
                   help="write per-epoch loss/psnr/leaf-count CSV here")
    p.add_argument("--signal-out", default=None,
                   help="dump the final model's per-leaf signals to CSV")

    p = sub.add_parser("render", parents=[common],
                       help="render views to PNG files")
    p.add_argument("--tree", required=True)
    p.add_argument("--camera", required=True,
                   help="camera JSON file or orbit:N")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bg", choices=("white", "black"), default="white")

    p = sub.add_parser("eval", parents=[common],
                       help="report image metrics against a dataset split")
    p.add_argument("--tree", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)

    p = sub.add_parser("calibrate", parents=[common],
                       help="one-shot prune/sample from a signal dump")
    p.add_argument("--tree", required=True)
    p.add_argument("--signal-dump", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--recursive", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compress", parents=[common],
                       help="median-cut quantization of leaf SH payloads")
    p.add_argument("--tree", required=True)
    p.add_argument("--palette", type=int, default=256)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", parents=[common],
                       help="print tree statistics and depth histogram")
    p.add_argument("--tree", required=True)
    return parser


def _pin_threads(args) -> None:
    threads = args.threads
    if threads is None:
        env = os.environ.get("DOT_THREADS")
        if env is not None:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"DOT_THREADS must be an integer, "
                                  f"got {env!r}") from None
    if threads is None:
        return
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    os.environ["NUMBA_NUM_THREADS"] = str(threads)


def _read_toy_spec(path: Path):
    from .scene_io import ToySceneSpec

    if not path.exists():
        raise MissingAssetError(f"scene spec not found: {path}")
    return ToySceneSpec.from_json(path.read_text())


def _load_dataset(arg: str):
    """Dataset directory or toy scene JSON -> RayDataset with held-out views."""
    path = Path(arg)
    if path.is_dir():
        from .scene_io import load_nerf_synthetic

        _, dataset = load_nerf_synthetic(path, "train")
        return dataset
    from .scene_io import toy_dataset

    _, dataset = toy_dataset(_read_toy_spec(path))
    return dataset


def _cmd_build(args) -> int:
    from .octree import LeafPayload, build_dense
    from .scene_io import generate_toy_scene, save_tree

    scene = Path(args.scene)
    if scene.is_dir():
        if not (scene / "transforms_train.json").exists():
            raise MissingAssetError(f"{scene} has no transforms_train.json")
        # datasets start from a uniform translucent gray tree over a cube
        # generous enough for the synthetic scenes
        tree = build_dense(args.depth, (0.0, 0.0, 0.0), 1.5, 1,
                           LeafPayload(0.1, [0.0, 0.0, 0.0]))
    else:
        tree, _ = generate_toy_scene(_read_toy_spec(scene), args.depth)
    save_tree(tree, args.out)
    print(f"wrote {args.out}: {tree.leaf_count} leaves at depth {args.depth}")
    return 0


def _cmd_train(args) -> int:
    from .optim import TrainConfig, train, write_history
    from .scene_io import load_tree, save_tree

    tree = load_tree(args.tree)
    dataset = _load_dataset(args.dataset)
    config = TrainConfig(epochs=args.epochs, interval=args.interval,
                         tau=args.tau, gamma=args.gamma,
                         recursive=args.recursive, signal=args.signal,
                         seed=args.seed)
    tree, history = train(tree, dataset, config)
    save_tree(tree, args.out)
    if args.history:
        write_history(history, args.history)
    if args.signal_out:
        _dump_final_signals(tree, dataset, config, args.signal_out)
    final = history[-1] if history else None
    if final is None:
        print(f"wrote {args.out}: no epochs run, tree copied unchanged")
    else:
        print(f"wrote {args.out}: loss={final['loss']:.6f} "
              f"psnr={final['psnr']:.3f} leaves={final['leaf_count']}")
    return 0


def _dump_final_signals(tree, dataset, config, path) -> None:
    """One forward pass over the dataset to dump the trained model's signal."""
    from .render import render_and_backprop
    from .signals import SignalBuffer, dump_signals

    buffer = SignalBuffer(tree, config.signal)
    n = dataset.ray_count
    for lo in range(0, n, config.batch_size):
        hi = min(lo + config.batch_size, n)
        _, _, signal = render_and_backprop(
            tree, dataset.origins[lo:hi], dataset.dirs[lo:hi],
            dataset.targets[lo:hi], config.background,
            early_stop_eps=config.early_stop_eps)
        buffer.accumulate(signal, hi - lo)
    dump_signals(buffer, tree, path)


def _cmd_render(args) -> int:
    from .render import render_image
    from .scene_io import load_camera_file, load_tree, orbit_cameras, save_image

    tree = load_tree(args.tree)
    if args.camera.startswith("orbit:"):
        try:
            count = int(args.camera.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad orbit camera count in {args.camera!r}") \
                from None
        cameras = orbit_cameras(count)
    else:
        cameras = load_camera_file(args.camera)
    background = 1.0 if args.bg == "white" else 0.0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, camera in enumerate(cameras):
        save_image(out_dir / f"view_{i:03d}.png",
                   render_image(tree, camera, background))
    print(f"wrote {len(cameras)} views to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import psnr, ssim
    from .render import render_image
    from .scene_io import load_nerf_synthetic, load_tree, quantize8

    tree = load_tree(args.tree)
    path = Path(args.dataset)
    if path.is_dir():
        cameras, dataset = load_nerf_synthetic(path, args.split)
        views = []
        offset = 0
        for camera in cameras:
            count = camera.height * camera.width
            image = dataset.targets[offset:offset + count].reshape(
                camera.height, camera.width, 3)
            views.append((camera, image))
            offset += count
    else:
        from .scene_io import toy_dataset

        _, dataset = toy_dataset(_read_toy_spec(path))
        views = dataset.heldout
    if not views:
        raise ConfigError("dataset provides no views to evaluate")

    per_view = []
    for camera, target in views:
        rendered = render_image(tree, camera, 1.0)
        per_view.append({
            "psnr": psnr(rendered, target),
            "psnr_8bit": psnr(quantize8(rendered), quantize8(target)),
            "ssim": ssim(rendered, target),
        })
    report = {
        "views": len(per_view),
        "psnr": float(sum(v["psnr"] for v in per_view) / len(per_view)),
        "psnr_8bit": float(sum(v["psnr_8bit"] for v in per_view)
                           / len(per_view)),
        "ssim": float(sum(v["ssim"] for v in per_view) / len(per_view)),
        "per_view": per_view,
    }
    Path(args.report).write_text(json.dumps(report, indent=2))
    print(f"psnr={report['psnr']:.4f} ssim={report['ssim']:.4f} "
          f"over {report['views']} views")
    return 0


def _cmd_calibrate(args) -> int:
    from .calibrate import CalibrationConfig, calibrate
    from .scene_io import load_tree, save_tree
    from .signals import load_signals

    tree = load_tree(args.tree)
    buffer = load_signals(tree, args.signal_dump)
    config = CalibrationConfig(tau=args.tau, gamma=args.gamma,
                               recursive=args.recursive)
    report = calibrate(tree, buffer, config)
    save_tree(tree, args.out)
    print(f"wrote {args.out}: merges={report.merges_applied} "
          f"splits={report.splits_applied} leaves={tree.leaf_count}")
    return 0


def _cmd_compress(args) -> int:
    from .scene_io import compress_tree, load_tree, save_tree, sh_storage_bytes

    tree = load_tree(args.tree)
    compressed, codebook = compress_tree(tree, args.palette)
    save_tree(compressed, args.out)
    raw = sh_storage_bytes(tree)
    packed = sh_storage_bytes(tree, codebook)
    print(f"wrote {args.out}: palette={codebook.shape[0]} "
          f"sh_bytes={raw}->{packed} ({raw / packed:.2f}x)")
    return 0


def _cmd_stats(args) -> int:
    from .scene_io import load_tree

    tree = load_tree(args.tree)
    stats = tree.stats()
    print(f"leaf_count={stats.leaf_count}")
    print(f"internal_count={stats.internal_count}")
    print(f"basis_count={tree.basis_count}")
    print(f"max_depth={tree.max_depth}")
    print(f"payload_bytes={stats.payload_bytes}")
    print("depth_histogram:")
    for depth in sorted(stats.depth_histogram):
        print(f"  {depth}: {stats.depth_histogram[depth]}")
    return 0


_DISPATCH = {
    "build": _cmd_build,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "calibrate": _cmd_calibrate,
    "compress": _cmd_compress,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _pin_threads(args)
        return _DISPATCH[args.command](args)
    except (OctrfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
