"""Command-line entry points.

Subcommands: gen-data, pretrain, finetune, eval, viz-attn.  All randomness is
governed by explicit seeds, so identical invocations produce byte-identical
artifacts.  Exit codes: 0 success, 1 configuration rejected, 2 dataset I/O
failure, 3 training aborted on a non-finite loss, 4 checkpoint missing
entries, 5 unsatisfiable evaluation protocol, 6 bad sample index.
"""

import argparse
import sys

from .config import load_config
from .encoder import export_attention
from .errors import (
    ConfigError,
    CorruptionError,
    ProtocolError,
    TrainingAbort,
    VillsError,
)
from .evaluate import (
    evaluate_protocol,
    finetune,
    load_inference_model,
    save_finetuned,
    split_records,
)
from .synthetic import build_dataset, load_dataset, save_dataset
from .ufla import init_model, pretrain, save_model


def _fail(code, message):
    print(message, file=sys.stderr)
    return code


def cmd_gen_data(args):
    cfg = load_config(args.config)
    try:
        dataset = build_dataset(
            identities=args.identities,
            clips_per_id=args.clips_per_id,
            frames=args.frames,
            seed=args.seed,
            frame_extent=cfg.frame_extent,
            image_extent=cfg.image_extent,
        )
        save_dataset(dataset, args.out)
    except OSError as exc:
        return _fail(2, f"gen-data: cannot write dataset: {exc}")
    print(f"wrote {len(dataset.videos)} clips and {len(dataset.images)} stills to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config)
    try:
        dataset = load_dataset(args.data)
    except OSError as exc:
        return _fail(2, f"pretrain: cannot read dataset: {exc}")
    if dataset.frames > cfg["encoder.frames"]:
        raise ConfigError(
            f"dataset clips have {dataset.frames} frames, encoder.frames is {cfg['encoder.frames']}"
        )
    if tuple(dataset.frame_extent) != cfg.frame_extent or tuple(dataset.image_extent) != cfg.image_extent:
        raise ConfigError(
            f"dataset extents {dataset.frame_extent}/{dataset.image_extent} do not match "
            f"config {cfg.frame_extent}/{cfg.image_extent}"
        )
    model = init_model(cfg, seed=args.seed)
    csv_path = args.out + ".losses.csv"
    try:
        pretrain(model, dataset, args.steps, seed=args.seed, csv_path=csv_path)
    except TrainingAbort as exc:
        return _fail(3, f"pretrain: aborted: {exc} (last report: {exc.report})")
    save_model(model, args.out)
    print(f"wrote checkpoint {args.out} and loss log {csv_path}")
    return 0


def cmd_finetune(args):
    try:
        model = load_inference_model(args.ckpt)
    except CorruptionError as exc:
        return _fail(4, f"finetune: {exc}")
    if args.config:
        # shape-critical keys come from the checkpoint; the file supplies training keys
        file_cfg = load_config(args.config)
        for key in (
            "finetune.learning_rate",
            "finetune.triplet_margin",
            "finetune.batch_identities",
            "finetune.batch_samples",
            "train.clip_norm",
            "train.seed",
        ):
            model.config = model.config.replace(**{key.replace(".", "__"): file_cfg[key]})
    try:
        dataset = load_dataset(args.data)
    except OSError as exc:
        return _fail(2, f"finetune: cannot read dataset: {exc}")
    train_pool, _ = _finetune_pool(dataset)
    finetune(model, train_pool, n_classes=dataset.identities, steps=args.steps,
             seed=model.config["train.seed"])
    save_finetuned(model, args.out)
    print(f"wrote fine-tuned checkpoint {args.out}")
    return 0


def _finetune_pool(dataset):
    """Training pool = gallery half of the probe/gallery split (probes stay held out)."""
    probe, gallery = split_records(dataset.videos, dataset.clips_per_id)
    return gallery, probe


def cmd_eval(args):
    try:
        model = load_inference_model(args.ckpt)
    except CorruptionError as exc:
        return _fail(4, f"eval: {exc}")
    try:
        dataset = load_dataset(args.data)
    except OSError as exc:
        return _fail(2, f"eval: cannot read dataset: {exc}")
    try:
        metrics = evaluate_protocol(dataset, model, args.protocol, far_target=args.far)
    except ProtocolError as exc:
        return _fail(5, f"eval: {exc}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("metric,protocol,value\n")
        for name, value in metrics.items():
            fh.write(f"{name},{args.protocol},{value:.10g}\n")
    print(f"wrote metrics {args.out}")
    return 0


def cmd_viz_attn(args):
    try:
        model = load_inference_model(args.ckpt)
    except CorruptionError as exc:
        return _fail(4, f"viz-attn: {exc}")
    try:
        dataset = load_dataset(args.data)
    except OSError as exc:
        return _fail(2, f"viz-attn: cannot read dataset: {exc}")
    records = dataset.videos + dataset.images
    if not 0 <= args.index < len(records):
        return _fail(6, f"viz-attn: index {args.index} out of range (0..{len(records) - 1})")
    record = records[args.index]
    # clips are visualized through their middle frame (attention is per frame)
    image = record.middle_frame()
    paths = export_attention(
        image, model.params, model.encoder_config, args.layer, args.out,
        stem=f"attention_sample{args.index}",
    )
    print(f"wrote {len(paths)} attention artifacts to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="vills", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--clips-per-id", type=int, default=8)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--config", default=None, help="config file (extents)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path; losses go to <out>.losses.csv")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning of the teacher")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="retrieval evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("image", "video", "mix"), required=True)
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-attn", help="export attention maps for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_viz_attn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(1, f"{args.command}: {exc}")
    except TrainingAbort as exc:
        return _fail(3, f"{args.command}: {exc}")
    except CorruptionError as exc:
        return _fail(4, f"{args.command}: {exc}")
    except ProtocolError as exc:
        return _fail(5, f"{args.command}: {exc}")
    except VillsError as exc:
        return _fail(1, f"{args.command}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
