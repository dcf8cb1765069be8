"""``npgat`` command line: build-graph, train, eval, predict, synth.

Exit codes: 0 success, 1 usage, 2 I/O, 3 runtime.

Configuration is a flat table of keys (TOML or JSON file, then ``key=value``
overrides, last one wins). Keys are the :class:`~npgat.trainer.TrainConfig`
fields plus the data keys in :data:`DATA_DEFAULTS`. Unknown keys are usage
errors. Every command writes the effective config to
``<out>/effective_config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .data import (
    DataError, difference_image, list_dsb_ids, load_dsb_sample, overlay_image,
    read_png, reconstruct_mask, resample_square, save_png, synth_generate, to_rgb_float,
    build_node_targets, covering_nodes, Sample,
)
from .graph import GraphError, build_base_graph, project_features
from .trainer import (
    CheckpointError, TrainConfig, Trainer, TrainingAborted, evaluate, load_checkpoint,
    predict_sample, prepare, save_checkpoint, write_reports,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("npgat")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3

DATA_DEFAULTS = {
    "count": 200,
    "style": "mixed",
    "synth_seed": 1,
    "val_fraction": 0.2,
    "split": "auto",  # auto | train | val | all
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# config handling


def _coerce(key, text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r}") from None
    if isinstance(default, list):
        return [t for t in text.split(",") if t]
    return text


def defaults():
    d = asdict(TrainConfig())
    d.update(DATA_DEFAULTS)
    return d


def read_config_file(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    try:
        if path.endswith(".json"):
            return json.loads(raw.decode())
        return tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None


def effective_config(config_path=None, overrides=(), seed=None, base=None):
    """Merge defaults, an optional base (checkpoint) config, a config file and
    ``key=value`` overrides. Rejects unknown keys."""
    cfg = defaults()
    if base:
        cfg.update(base)
    if config_path:
        for k, v in read_config_file(config_path).items():
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r} in {config_path}")
            cfg[k] = v
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in cfg:
            raise UsageError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v.strip(), defaults()[k])
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def train_config(cfg):
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def echo_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# data sources


def load_samples(args, cfg):
    size = int(cfg["size"])
    if getattr(args, "synthetic", False):
        return synth_generate(int(cfg["synth_seed"]), int(cfg["count"]), size, cfg["style"])
    root = args.data_root
    if not os.path.isdir(root):
        raise DataError(f"data root {root} is not a directory")
    ids = list_dsb_ids(root)
    if not ids:
        raise DataError(f"no samples under {root}")
    return [resample_square(load_dsb_sample(root, i), size) for i in ids]


def split_samples(samples, cfg, role):
    """Deterministic split: the last ``val_fraction`` of the samples is held out."""
    n_val = int(round(float(cfg["val_fraction"]) * len(samples)))
    if len(samples) - n_val < 1:
        n_val = 0
    which = cfg["split"]
    if which == "auto":
        which = "train" if role == "train" else ("val" if n_val else "all")
    if which == "all":
        return samples
    if which == "train":
        return samples[:len(samples) - n_val]
    if which == "val":
        return samples[len(samples) - n_val:]
    raise UsageError(f"unknown split {which!r}")


def _check_source(args, parser, allow_none=False):
    has_root = getattr(args, "data_root", None) is not None
    synth = getattr(args, "synthetic", False)
    if has_root and synth:
        parser.error("--data-root and --synthetic are mutually exclusive")
    if not (has_root or synth or allow_none):
        parser.error("one of --data-root or --synthetic is required")


# ----------------------------------------------------------------------
# commands


def footprint_debug_image(graph, scale=None):
    """One panel per level; each pixel tinted by the node that covers it."""
    n0 = graph.n0
    scale = scale or max(1, 128 // n0)
    rng = np.random.default_rng(0)
    panels = []
    for m in range(graph.levels):
        owner = covering_nodes(graph, m)
        palette = rng.uniform(0.2, 1.0, size=(graph.n_nodes + 1, 3))
        img = palette[owner]
        img[owner < 0] = 0.0
        panels.append(np.kron(img, np.ones((scale, scale, 1))))
        panels.append(np.ones((n0 * scale, 2, 3)))
    return np.concatenate(panels[:-1], axis=1)


def cmd_build_graph(args, cfg):
    image = to_rgb_float(read_png(args.image))
    if image.shape[0] != image.shape[1]:
        raise GraphError(f"image must be square, got {image.shape[0]}x{image.shape[1]}")
    graph = project_features(
        build_base_graph(image.shape[0], image.shape[1], int(cfg["levels"]), int(cfg["factor"])),
        image,
    )
    with open(os.path.join(args.out, "graph.json"), "w") as fh:
        fh.write(graph.to_json(indent=1))
    if not args.no_debug_image:
        save_png(os.path.join(args.out, "footprints.png"), footprint_debug_image(graph))
    print(f"{graph.n_nodes} nodes, {len(graph.edges)} edges -> {args.out}/graph.json")
    return EXIT_OK


def cmd_train(args, cfg):
    samples = load_samples(args, cfg)
    train_set = split_samples(samples, cfg, "train")
    val_set = split_samples(samples, {**cfg, "split": "val"}, "val") or None
    log_path = os.path.join(args.out, "train_log.ndjson")
    if args.resume:
        trainer = load_checkpoint(args.resume)
        trainer.config = train_config(cfg)
    else:
        trainer = Trainer(train_config(cfg))
        if os.path.exists(log_path):
            os.remove(log_path)
    remaining = trainer.config.epochs - trainer.epoch
    if remaining <= 0:
        logger.warning("checkpoint already at epoch %d, nothing to do", trainer.epoch)
    ckpt = os.path.join(args.out, "checkpoint.json")
    try:
        if remaining > 0:
            trainer.fit(train_set, val=val_set, epochs=remaining, log_path=log_path)
    finally:
        save_checkpoint(ckpt, trainer)
    print(f"trained to epoch {trainer.epoch}; checkpoint {ckpt}")
    return EXIT_OK


def _oracle_probabilities(samples, config):
    return {s.source_id: build_node_targets(prepare(s, config).graph, s.mask)[0] for s in samples}


def _model_source(args, cfg):
    if args.oracle:
        return None, train_config(cfg)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --oracle is given")
    trainer = load_checkpoint(args.checkpoint)
    return trainer, trainer.config


def cmd_eval(args, cfg):
    trainer, config = _model_source(args, cfg)
    config.threshold = float(cfg["threshold"])
    samples = split_samples(load_samples(args, cfg), cfg, "eval")
    if trainer is None:
        reports, agg = evaluate(samples, None, None, config, False, _oracle_probabilities(samples, config))
    else:
        reports, agg = evaluate(samples, trainer.model, trainer.net, config, trainer.mutated)
    write_reports(reports, agg, args.out)
    o = agg["overall"]
    print(f"n={o['n']} dice={o['dice']:.4f} score={o['score']:.4f} f1@0.7={o['f1_at_07']:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg):
    trainer, config = _model_source(args, cfg)
    config.threshold = float(cfg["threshold"])
    if args.image:
        if args.oracle:
            raise UsageError("--oracle needs ground truth; use --synthetic or --data-root")
        image = to_rgb_float(read_png(args.image))
        size = int(cfg["size"])
        blank = np.zeros(image.shape[:2], dtype=bool)
        sample = resample_square(Sample(image, blank, [], source_id=os.path.splitext(os.path.basename(args.image))[0]), size)
        samples, has_gt = [sample], False
    else:
        samples, has_gt = split_samples(load_samples(args, cfg), cfg, "eval"), True
    pred_dir = os.path.join(args.out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    oracle = _oracle_probabilities(samples, config) if trainer is None else None
    for s in samples:
        if trainer is None:
            pg, probs = prepare(s, config), oracle[s.source_id]
        else:
            pg, probs, _ = predict_sample(s, trainer.model, trainer.net, config, trainer.mutated)
        binary, raw = reconstruct_mask(pg.graph, probs, config.threshold)
        stem = os.path.join(pred_dir, s.source_id)
        save_png(stem + "_raw.png", raw)
        save_png(stem + "_binary.png", binary)
        save_png(stem + "_overlay.png", overlay_image(s.image, binary))
        if has_gt:
            save_png(stem + "_difference.png", difference_image(s.image, s.mask, binary))
    print(f"{len(samples)} predictions -> {pred_dir}")
    return EXIT_OK


def cmd_synth(args, cfg):
    samples = synth_generate(int(cfg["synth_seed"]), int(cfg["count"]), int(cfg["size"]), cfg["style"])
    root = os.path.join(args.out, "synthetic")
    tags = {}
    for s in samples:
        base = os.path.join(root, s.source_id)
        os.makedirs(os.path.join(base, "images"), exist_ok=True)
        os.makedirs(os.path.join(base, "masks"), exist_ok=True)
        save_png(os.path.join(base, "images", f"{s.source_id}.png"), s.image)
        for k, inst in enumerate(s.instances):
            save_png(os.path.join(base, "masks", f"{s.source_id}_{k:03d}.png"), inst)
        tags[s.source_id] = s.class_tag
    with open(os.path.join(root, "classes.json"), "w") as fh:
        json.dump(tags, fh, indent=1, sort_keys=True)
    print(f"{len(samples)} samples -> {root}")
    return EXIT_OK


COMMANDS = {
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synth": cmd_synth,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with config keys")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="shortcut for seed=N")
    common.add_argument("--log-level", default="WARNING")

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("--data-root", help="directory in the DSB layout")
    source.add_argument("--synthetic", action="store_true", help="use generated nuclei (count, style, synth_seed)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint written by train")
    model.add_argument("--oracle", action="store_true",
                       help="use ground-truth node targets instead of a model")

    p = _Parser(prog="npgat", description="Multi-magnification graph attention segmentation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    b = sub.add_parser("build-graph", parents=[common], help="image -> graph JSON and footprint image")
    b.add_argument("image")
    b.add_argument("--no-debug-image", action="store_true")
    t = sub.add_parser("train", parents=[common, source], help="train model and mutation net")
    t.add_argument("--resume", help="continue from this checkpoint")
    sub.add_parser("eval", parents=[common, source, model], help="metrics report (JSON + CSV)")
    pr = sub.add_parser("predict", parents=[common, source, model], help="prediction PNGs")
    pr.add_argument("--image", help="single PNG instead of a dataset")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset in the DSB layout")
    for sp in sub.choices.values():
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # key=value items after an option are left over by argparse
    stray = [e for e in extra if e.startswith("-") or "=" not in e]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.command in ("train", "eval"):
        _check_source(args, sub)
    elif args.command == "predict":
        _check_source(args, sub, allow_none=bool(args.image))
        if args.image and (args.data_root or args.synthetic):
            sub.error("--image cannot be combined with --data-root or --synthetic")
    try:
        base = None
        if args.command == "train" and args.resume:
            base = _checkpoint_config(args.resume)
        elif args.command in ("eval", "predict") and args.checkpoint and not args.oracle:
            base = _checkpoint_config(args.checkpoint)
        cfg = effective_config(args.config, args.overrides, args.seed, base)
        if args.command != "synth":
            train_config(cfg)
        echo_config(cfg, args.out)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"npgat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"npgat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingAborted, CheckpointError, GraphError, ValueError, FloatingPointError) as exc:
        print(f"npgat: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _checkpoint_config(path):
    try:
        with open(path) as fh:
            return json.load(fh).get("config")
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    except (ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None


if __name__ == "__main__":
    sys.exit(main())
