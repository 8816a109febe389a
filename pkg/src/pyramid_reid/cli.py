"""Command line entry points: train, evaluate, extract, param-count, toy-gen."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (ExperimentConfig, apply_override, config_from_dict,
                     load_config, save_config)
from .datasets import generate_toy, ingest_market_layout
from .evaluation import distance_matrix, evaluate_ranking, extract_features, write_report
from .model import ReidModel, format_parameter_table, load_checkpoint
from .train import TrainingAborted, train

log = logging.getLogger(__name__)


def _add_common(parser):
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry (repeatable)")
    parser.add_argument("--out", default=None, help="output directory")


def _build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    for spec in args.overrides:
        apply_override(cfg, spec)
    cfg.validate()
    return cfg


def _prepare_out(args, cfg, command) -> Path:
    if not args.out:
        raise ValueError(f"{command} requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "effective_config.yaml")
    info = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "torch_version": torch.__version__,
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2))
    return out


def _load_model_from_checkpoint(path):
    payload = load_checkpoint(path)
    cfg = ExperimentConfig() if payload["config"] is None else config_from_dict(payload["config"])
    model = ReidModel(cfg.model, num_identities=payload["num_identities"],
                      expected_input_hw=cfg.data.input_size)
    load_checkpoint(path, model=model)
    model.eval()
    return model, cfg


def cmd_train(args):
    cfg = _build_config(args)
    out = _prepare_out(args, cfg, "train")
    index = ingest_market_layout(cfg.data.resolve_root())
    num_ids = len({e.pid for e in index.train})
    model = ReidModel(cfg.model, num_identities=num_ids,
                      expected_input_hw=cfg.data.input_size)
    result = train(model, index.train, cfg, out, resume_from=args.resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"training log:     {result.log_path}")
    return 0


def cmd_evaluate(args):
    cfg_cli = _build_config(args)
    out = _prepare_out(args, cfg_cli, "evaluate")
    model, cfg = _load_model_from_checkpoint(args.checkpoint)
    cfg.data.root = cfg_cli.data.root or cfg.data.root
    index = ingest_market_layout(cfg_cli.data.resolve_root())
    qf, q_pids, q_camids, q_kept = extract_features(
        model, index.query, cfg.data.input_size, cfg.data.pixel_mean,
        cfg.data.pixel_std, cfg.data.eval_batch_size)
    gf, g_pids, g_camids, _ = extract_features(
        model, index.gallery, cfg.data.input_size, cfg.data.pixel_mean,
        cfg.data.pixel_std, cfg.data.eval_batch_size)
    result = evaluate_ranking(distance_matrix(qf, gf), q_pids, q_camids, g_pids, g_camids)
    report_path = out / "report.json"
    write_report(result, report_path, per_query=args.per_query_ap)
    print(json.dumps(result.report_dict(), indent=2))
    if args.dump_activations:
        _dump_activations(model, cfg, q_kept[: args.dump_activations], out / "activations")
    print(f"report written to {report_path}")
    return 0


def _dump_activations(model, cfg, entries, out_dir):
    # Best-effort debug visualisation: per-image mean activation heatmaps.
    from PIL import Image

    from .datasets import load_image
    from .evaluation import images_to_tensor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for entry in entries:
            img = load_image(entry.path, cfg.data.input_size)
            batch = images_to_tensor([img], cfg.data.pixel_mean, cfg.data.pixel_std)
            outputs = model(batch)
            maps = {"stage4": outputs.stage4_map}
            if outputs.fpb_map is not None:
                maps["fpb"] = outputs.fpb_map
            for name, fmap in maps.items():
                act = fmap[0].abs().mean(dim=0)
                act = (act - act.min()) / (act.max() - act.min() + 1e-9)
                arr = (act.numpy() * 255).astype(np.uint8)
                h, w = cfg.data.input_size
                heat = Image.fromarray(arr).resize((w, h), Image.BILINEAR)
                heat.save(out_dir / f"{Path(entry.path).stem}_{name}.png")


def cmd_extract(args):
    cfg_cli = _build_config(args)
    out = _prepare_out(args, cfg_cli, "extract")
    model, cfg = _load_model_from_checkpoint(args.checkpoint)
    index = ingest_market_layout(cfg_cli.data.resolve_root())
    entries = index.split(args.split)
    feats, pids, camids, kept = extract_features(
        model, entries, cfg.data.input_size, cfg.data.pixel_mean,
        cfg.data.pixel_std, cfg.data.eval_batch_size)
    np.save(out / "features.npy", feats)
    meta = {
        "shape": list(feats.shape),
        "split": args.split,
        "pids": pids.tolist(),
        "camids": camids.tolist(),
        "paths": [e.path for e in kept],
    }
    (out / "features.meta.json").write_text(json.dumps(meta))
    print(f"wrote {feats.shape[0]} features of dim {feats.shape[1]} to {out}")
    return 0


def cmd_param_count(args):
    cfg = _build_config(args)
    model = ReidModel(cfg.model, num_identities=args.identities,
                      expected_input_hw=cfg.data.input_size)
    table = format_parameter_table(model)
    print(table)
    if args.out:
        out = _prepare_out(args, cfg, "param-count")
        (out / "param_count.txt").write_text(table + "\n")
    return 0


def cmd_toy_gen(args):
    cfg = _build_config(args)
    out = _prepare_out(args, cfg, "toy-gen")
    index = generate_toy(cfg.toy, out)
    print(json.dumps(index.summary(), indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pyramid-reid",
        description="Dual-branch person re-identification toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the configured dataset")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank gallery against queries and report mAP/CMC")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-query-ap", action="store_true", help="include per-query AP in the report")
    p.add_argument("--dump-activations", type=int, default=0, metavar="N",
                   help="save activation heatmaps for the first N queries")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="extract features for one dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("param-count", help="print the learnable parameter table")
    _add_common(p)
    p.add_argument("--identities", type=int, default=None,
                   help="also build classifier heads for this many identities")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("toy-gen", help="generate the synthetic toy dataset")
    _add_common(p)
    p.set_defaults(func=cmd_toy_gen)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAborted as exc:
        log.error("%s", exc)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
