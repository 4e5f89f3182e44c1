"""Command-line interface: describe, train, eval, predict, quantize."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .checkpoint import load_into_graph, save_graph
from .config import parse_config
from .data import SyntheticSpec, load_dataset, synth_dataset
from .graph import IN_CHANNELS, build_mdunet, export_dot, param_count, run_forward, shape_infer
from .images import load_image, save_mask
from .quantize import run_inq_schedule
from .training import TrainConfig, evaluate, train_loop


def variant_name(arch) -> str:
    parts = []
    if arch.enc_dense != 0:
        parts.append("min" if arch.enc_dense == "min" else f"encoder_{arch.enc_dense}")
    if arch.cross_mode != "skip":
        parts.append(arch.cross_mode)
    if arch.dec_dense != 0:
        parts.append("mout" if arch.dec_dense == "mout" else f"decoder_{arch.dec_dense}")
    name = "-".join(parts) if parts else "unet"
    return f"{name} (depth {arch.depth}, base {arch.base_channels})"


def _load_config(path: str | None):
    if path is None:
        return parse_config("")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _load_data(args):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    if getattr(args, "synthetic", False):
        spec = SyntheticSpec(count=args.synth_count, size=args.synth_size,
                             noise=args.synth_noise, seed=args.synth_seed)
        return synth_dataset(spec)
    raise ValueError("no dataset given: pass --data DIR or --synthetic")


def write_history_csv(path: str, history):
    lines = ["iteration,lr,loss"]
    lines += [f"{it},{lr:.10g},{loss:.10g}" for it, lr, loss in history]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _add_synth_flags(p):
    p.add_argument("--synthetic", action="store_true",
                   help="use the generated shape dataset instead of --data")
    p.add_argument("--synth-count", type=int, default=100)
    p.add_argument("--synth-size", type=int, default=64)
    p.add_argument("--synth-noise", type=float, default=0.05)
    p.add_argument("--synth-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdunet",
        description="Dense U-Net segmentation toolkit: build, train, "
                    "evaluate, and quantize model variants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print the variant, its shapes, and parameter counts")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--dot", help="also write the graph in DOT format to this path")
    p.add_argument("--size", type=int, default=64, help="input side length for shape inference")

    p = sub.add_parser("train", help="train a model and save the checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory with images/ and masks/")
    _add_synth_flags(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("predict", help="segment one image and write the mask")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask path (binary PGM)")

    p = sub.add_parser("quantize", help="run the incremental quantization schedule")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-prefix", required=True,
                   help="writes <prefix>_<percent>.ckpt per schedule fraction")
    p.add_argument("--data", help="retraining dataset directory")
    _add_synth_flags(p)
    return parser


def cmd_describe(args) -> int:
    arch, _train, _quant = _load_config(args.config)
    graph = build_mdunet(arch)
    shapes = shape_infer(graph, (1, IN_CHANNELS, args.size, args.size))
    print(f"variant: {variant_name(arch)}")
    print(f"{'node':<28} {'op':<10} shape")
    for node in graph.nodes:
        shape = "x".join(str(v) for v in shapes[node.id])
        print(f"{node.id:<28} {node.kind:<10} {shape}")
    counts = param_count(graph)
    print(f"parameters: {counts['total']}")
    for family in ("baseline", "enc_dense", "cross", "dec_dense"):
        print(f"  {family}: {counts[family]}")
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as f:
            f.write(export_dot(graph))
        print(f"dot: {args.dot}")
    return 0


def cmd_train(args) -> int:
    arch, train_cfg, _quant = _load_config(args.config)
    images, masks = _load_data(args)
    graph = build_mdunet(arch, seed=train_cfg.seed)
    history = train_loop(graph, images, masks, train_cfg)
    history_path = args.history or f"{args.out}.history.csv"
    write_history_csv(history_path, history)
    save_graph(args.out, graph)
    print(f"iterations: {len(history)}")
    print(f"final_loss: {history[-1][2]:.6g}")
    print(f"history: {history_path}")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    arch, _train, _quant = _load_config(args.config)
    graph = build_mdunet(arch)
    load_into_graph(args.ckpt, graph)
    images, masks = load_dataset(args.data)
    metrics = evaluate(graph, images, masks)
    print(f"mean_iou: {metrics.mean_iou:.6f}")
    print(f"dice: {metrics.dice:.6f}")
    return 0


def cmd_predict(args) -> int:
    arch, _train, _quant = _load_config(args.config)
    graph = build_mdunet(arch)
    load_into_graph(args.ckpt, graph)
    image = load_image(args.image)
    x = image[None, None].astype(np.float32)
    shape_infer(graph, x.shape)
    logits = run_forward(graph, x, "infer")
    save_mask(args.out, np.argmax(logits, axis=1)[0])
    print(f"mask: {args.out}")
    return 0


def cmd_quantize(args) -> int:
    arch, train_cfg, quant_cfg = _load_config(args.config)
    graph = build_mdunet(arch, seed=train_cfg.seed)
    load_into_graph(args.ckpt, graph)

    retrain = None
    if args.data or args.synthetic:
        images, masks = _load_data(args)

        def retrain(step_index, fraction):
            if quant_cfg.retrain_iterations == 0:
                return
            rcfg = TrainConfig(
                base_lr=train_cfg.base_lr, lr_milestones=train_cfg.lr_milestones,
                batch_size=train_cfg.batch_size, epochs=1,
                iterations=quant_cfg.retrain_iterations,
                seed=train_cfg.seed + 1 + step_index,
            )
            train_loop(graph, images, masks, rcfg)

    written = []

    def on_snapshot(step_index, fraction, params):
        path = f"{args.out_prefix}_{int(round(fraction * 100)):03d}.ckpt"
        save_graph(path, graph)
        written.append((fraction, path))

    run_inq_schedule(graph.parameters, quant_cfg, retrain, on_snapshot)
    for fraction, path in written:
        print(f"snapshot: {path} (fraction {fraction:g})")
    return 0


_COMMANDS = {
    "describe": cmd_describe,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "quantize": cmd_quantize,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
