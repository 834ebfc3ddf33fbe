"""Command line interface.

Subcommands: ``train``, ``sample``, ``render``, ``inpaint``, ``reconstruct``
and ``eval-diversity``. Usage errors exit with status 2, runtime failures
with status 1 and a one-line diagnostic on stderr.
"""

import argparse
import logging
import os
import sys

import numpy as np
import torch
from PIL import Image

from fewgan import checkpoint as ckpt_lib
from fewgan import config as config_lib
from fewgan import data
from fewgan import manipulate
from fewgan import metrics
from fewgan import trainer


def _load_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return torch.from_numpy(arr > 127)


def _out_paths(out, n):
    if n == 1:
        return [out]
    root, ext = os.path.splitext(out)
    return [f"{root}_{i:03d}{ext or '.png'}" for i in range(n)]


def cmd_train(args):
    overrides = config_lib.parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps_per_scale"] = args.steps
    cfg = (config_lib.load(args.config, **overrides) if args.config
           else config_lib.TrainConfig.from_dict(overrides))
    train_dir = args.train_dir or cfg.train_dataset_path
    side_dir = args.side_dir or cfg.side_dataset_path
    if not train_dir or not side_dir:
        raise ValueError("training and side image directories are required")
    cfg.train_dataset_path, cfg.side_dataset_path = train_dir, side_dir
    log_path = args.log or args.out + ".log.csv"
    model, prior = trainer.fit(cfg, data.load_dir(train_dir), data.load_dir(side_dir),
                               checkpoint_path=args.out, log_path=log_path,
                               resume=args.resume)
    print(f"wrote {args.out} ({model.n_scales} scales, prior NLL "
          f"{prior.final_nll:.4f} nats/token)")


def cmd_sample(args):
    ckpt = ckpt_lib.load_checkpoint(args.ckpt)
    for i, path in enumerate(_out_paths(args.out, args.n)):
        img = manipulate.generate_unconditional(
            ckpt.model, ckpt.prior, args.temperature, args.seed + i, args.argmax
        )
        data.save_image(img, path)


def cmd_render(args):
    ckpt = ckpt_lib.load_checkpoint(args.ckpt)
    out = manipulate.render_conditional(ckpt.model, data.load_image(args.input))
    data.save_image(out, args.out)


def cmd_inpaint(args):
    ckpt = ckpt_lib.load_checkpoint(args.ckpt)
    x = data.load_image(args.input)
    mask = _load_mask(args.mask)
    out = manipulate.inpaint(ckpt.model, ckpt.prior, x, mask, args.temperature,
                             args.seed)
    data.save_image(out, args.out)


def cmd_reconstruct(args):
    ckpt = ckpt_lib.load_checkpoint(args.ckpt)
    x = data.load_image(args.input)
    out = manipulate.render_conditional(ckpt.model, x)
    target = data.resize(x, tuple(out.shape[-2:]))
    value = metrics.psnr((out + 1) / 2, (target + 1) / 2)
    if args.out:
        data.save_image(out, args.out)
    print("exact" if value == metrics.EXACT else f"{value:.4f}")


def cmd_eval_diversity(args):
    if args.image_dir:
        images = data.load_dir(args.image_dir)
    else:
        ckpt = ckpt_lib.load_checkpoint(args.ckpt)
        images = [
            manipulate.generate_unconditional(ckpt.model, ckpt.prior,
                                              args.temperature, args.seed + i)
            for i in range(args.n)
        ]
    batch = torch.stack([(img + 1) / 2 for img in images])
    print(f"{metrics.diversity(batch, population=not args.sample_std):.6f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="fewgan")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train all scales and the prior")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--train-dir")
    p.add_argument("--side-dir")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="run log (default: OUT.log.csv)")
    p.add_argument("--resume", action="store_true",
                   help="continue after the last completed scale in OUT")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="steps per scale")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="unconditional samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--argmax", action="store_true")
    p.add_argument("--n", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", help="conditional render / edit / harmonize")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inpaint", help="fill a masked region")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True, help="image; white marks occluded pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("reconstruct", help="print PSNR of the model's rendering")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval-diversity", help="pixel-std diversity of a batch")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image-dir")
    src.add_argument("--ckpt")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sample-std", action="store_true",
                   help="use the sample (n-1) instead of the population std")
    p.set_defaults(func=cmd_eval_diversity)
    return parser


def run_cli(argv=None):
    """Runs one command and returns its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - reported as a one-line diagnostic
        print(f"fewgan {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())
