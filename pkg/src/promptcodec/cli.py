"""Command-line shell: train, tune, encode, decode, eval, bdrate, maps.

Every subcommand takes --config (the run configuration file), writes only
its declared outputs, and exits 0 on success.  Failures print one
machine-parsable line to stderr: ``error: <kind>: <message>`` with exit
code 2 (model-id mismatch), 3 (corrupt stream), 4 (config error), or 1.
"""

import argparse
import os
import sys

import numpy as np

from . import codec, training
from .backbone import Backbone, model_id
from .dataio import ImageFormatError, load_dir, load_ppm, save_pgm, save_ppm, write_csv
from .formats import (
    LAMBDA_BARE,
    BitstreamContainer,
    ConfigError,
    ContainerError,
    ModelIdError,
    load_backbone,
    load_promptset,
    load_run_config,
    save_backbone,
    save_promptset,
)
from .metrics import attention_map, bd_rate, bit_allocation_map, rd_curve
from .prompts import PromptSet
from .rangecoder import CorruptStreamError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MODEL_ID = 2
EXIT_CORRUPT = 3
EXIT_CONFIG = 4


def _workfile(cfg, name):
    return os.path.join(cfg.workdir, name)


def _load_trained_backbone(cfg):
    backbone = Backbone(cfg.model, np.random.default_rng(cfg.train.seed),
                        dtype=cfg.train.dtype)
    path = _workfile(cfg, "backbone.lpmk")
    if not os.path.exists(path):
        raise ConfigError(f"no trained backbone at {path}; run 'train' first")
    load_backbone(path, backbone)
    backbone.freeze()
    return backbone


def cmd_train(args):
    cfg = load_run_config(args.config)
    images = [img for _, img in load_dir(cfg.dataset)]
    os.makedirs(cfg.workdir, exist_ok=True)
    backbone = Backbone(cfg.model, np.random.default_rng(cfg.train.seed),
                        dtype=cfg.train.dtype)

    def save_periodic(step):
        save_backbone(_workfile(cfg, f"backbone_step{step}.lpmk"), backbone)

    training.train_stage1(backbone, cfg.train, images,
                          metrics_path=_workfile(cfg, "metrics_stage1.csv"),
                          checkpoint_cb=save_periodic)
    save_backbone(_workfile(cfg, "backbone.lpmk"), backbone)
    print(f"wrote {_workfile(cfg, 'backbone.lpmk')}")
    return EXIT_OK


def cmd_tune(args):
    cfg = load_run_config(args.config)
    if not 0 <= args.lambda_id < len(cfg.train.lambdas):
        raise ConfigError(f"lambda-id {args.lambda_id} outside the configured list "
                          f"of {len(cfg.train.lambdas)}")
    images = [img for _, img in load_dir(cfg.dataset)]
    backbone = _load_trained_backbone(cfg)
    lam = cfg.train.lambdas[args.lambda_id]
    seed = cfg.train.seed + 1000 * (args.lambda_id + 1)
    promptset = PromptSet(cfg.model, args.lambda_id, lam,
                          np.random.default_rng(seed), dtype=cfg.train.dtype)
    training.train_stage2(backbone, promptset, cfg.train, images,
                          metrics_path=_workfile(cfg, f"metrics_tune_{args.lambda_id}.csv"))
    out = _workfile(cfg, f"promptset_{args.lambda_id}.lpmk")
    save_promptset(out, promptset)
    print(f"wrote {out}")
    return EXIT_OK


def _promptset_for(args, cfg):
    if args.promptset:
        return load_promptset(args.promptset, cfg.model)
    return None


def cmd_encode(args):
    cfg = load_run_config(args.config)
    backbone = _load_trained_backbone(cfg)
    promptset = _promptset_for(args, cfg)
    image = load_ppm(args.infile)
    container = codec.encode_image(image, backbone, promptset)
    from .formats import atomic_write

    atomic_write(args.outfile, container.serialize())
    print(f"wrote {args.outfile} ({container.bpp():.4f} bpp)")
    return EXIT_OK


def cmd_decode(args):
    cfg = load_run_config(args.config)
    backbone = _load_trained_backbone(cfg)
    with open(args.infile, "rb") as f:
        container = BitstreamContainer.parse(f.read(), expect_model_id=model_id(cfg.model))
    promptsets = {}
    if container.lambda_id != LAMBDA_BARE:
        path = _workfile(cfg, f"promptset_{container.lambda_id}.lpmk")
        if not os.path.exists(path):
            raise ConfigError(f"stream needs prompt parameters {container.lambda_id}, "
                              f"none at {path}")
        promptsets[container.lambda_id] = load_promptset(path, cfg.model)
    xhat = codec.decode_image(container, backbone, promptsets)
    save_ppm(args.outfile, xhat)
    print(f"wrote {args.outfile}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_run_config(args.config)
    backbone = _load_trained_backbone(cfg)
    promptsets = []
    for i in range(len(cfg.train.lambdas)):
        path = _workfile(cfg, f"promptset_{i}.lpmk")
        if os.path.exists(path):
            promptsets.append(load_promptset(path, cfg.model))
    images = load_dir(args.directory)
    out = _workfile(cfg, "rd_points.csv")
    points = training.rd_sweep(backbone, promptsets, images, cfg.train.lambda0, csv_path=out)
    for p in points:
        print(f"{p.image} lambda_id={p.lambda_id} bpp={p.bpp:.4f} "
              f"psnr={p.psnr:.2f} msssim={p.msssim:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_bdrate(args):
    from .dataio import read_csv
    from .metrics import RDPoint

    def load_points(path):
        _, rows = read_csv(path)
        return [RDPoint(r[0], int(r[1]), 0.0, float(r[2]), float(r[3]), float(r[4]))
                for r in rows]

    test_r, test_q = rd_curve(load_points(args.test), args.quality)
    anchor_r, anchor_q = rd_curve(load_points(args.anchor), args.quality)
    value = bd_rate(test_r, test_q, anchor_r, anchor_q)
    print(f"BD-rate ({args.quality}): {value:.4f}%")
    return EXIT_OK


def cmd_maps(args):
    from .attention import AttentionRecorder

    cfg = load_run_config(args.config)
    backbone = _load_trained_backbone(cfg)
    promptset = _promptset_for(args, cfg)
    image = load_ppm(args.infile)
    recorder = AttentionRecorder()
    stats = codec.latent_stats(image, backbone, promptset, recorder=recorder)
    base = os.path.splitext(os.path.basename(args.infile))[0]

    grid, _ = bit_allocation_map(stats["yhat"], stats["mean"], stats["sigma"])
    save_pgm(_workfile(cfg, f"{base}_bits.pgm"), grid)
    write_csv(_workfile(cfg, f"{base}_bits.csv"), [f"c{i}" for i in range(grid.shape[1])],
              [[f"{v:.6f}" for v in row] for row in grid])

    amap = attention_map(recorder, stats["padded"].shape[1:])
    save_pgm(_workfile(cfg, f"{base}_attention.pgm"), amap)
    write_csv(_workfile(cfg, f"{base}_attention.csv"), [f"c{i}" for i in range(amap.shape[1])],
              [[f"{v:.6f}" for v in row] for row in amap])
    print(f"wrote {base}_bits.(pgm|csv) and {base}_attention.(pgm|csv) in {cfg.workdir}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="promptcodec",
                                     description="variable-rate prompt-tuned image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="run configuration file")
        return p

    with_config(sub.add_parser("train", help="stage 1: train the backbone"))
    tune = with_config(sub.add_parser("tune", help="stage 2: train one PromptSet"))
    tune.add_argument("--lambda-id", type=int, required=True)

    enc = with_config(sub.add_parser("encode", help="compress one image"))
    enc.add_argument("--in", dest="infile", required=True)
    enc.add_argument("--out", dest="outfile", required=True)
    enc.add_argument("--promptset", help="PromptSet checkpoint (bare backbone if omitted)")

    dec = with_config(sub.add_parser("decode", help="decompress one bitstream"))
    dec.add_argument("--in", dest="infile", required=True)
    dec.add_argument("--out", dest="outfile", required=True)

    ev = with_config(sub.add_parser("eval", help="rate-distortion sweep over a directory"))
    ev.add_argument("--dir", dest="directory", required=True)

    bd = sub.add_parser("bdrate", help="BD-rate between two rd_points.csv files")
    bd.add_argument("--test", required=True)
    bd.add_argument("--anchor", required=True)
    bd.add_argument("--quality", choices=("psnr", "msssim"), default="psnr")

    mp = with_config(sub.add_parser("maps", help="bit-allocation and attention maps"))
    mp.add_argument("--in", dest="infile", required=True)
    mp.add_argument("--promptset")
    return parser


_HANDLERS = {
    "train": cmd_train,
    "tune": cmd_tune,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bdrate": cmd_bdrate,
    "maps": cmd_maps,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ModelIdError as e:
        print(f"error: model-id: {e}", file=sys.stderr)
        return EXIT_MODEL_ID
    except (CorruptStreamError, ContainerError) as e:
        print(f"error: corrupt-stream: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageFormatError, OSError, ValueError, RuntimeError) as e:
        print(f"error: run: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
