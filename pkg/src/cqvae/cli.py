"""Command-line entry point: ``cqvae generate|train|cqae|sample|evaluate``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys

import numpy as np

from . import __version__, checkpoint, config as configmod, data, metrics, models
from .config import TrainConfig
from .quantize import random_codes

log = logging.getLogger("cqvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"cqvae {__version__} ({out.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"cqvae {__version__}"


# -- config plumbing --------------------------------------------------------

def resolve_config(args, base=None):
    """Config file (if any), then ``--set`` overrides, then dedicated flags."""
    cfg = base or TrainConfig()
    if getattr(args, "config", None):
        cfg = configmod.load(args.config, cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("epochs", "seed", "M", "N", "J", "H", "W", "batch", "lr", "alpha", "beta", "k_max", "l_max"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    try:
        merged = cfg.to_dict()
        merged.update(overrides)
        return TrainConfig.from_dict(merged).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def prepare_run_dir(path, cfg):
    os.makedirs(path, exist_ok=True)
    configmod.save(cfg, os.path.join(path, "config.txt"))
    with open(os.path.join(path, "VERSION"), "w") as fh:
        fh.write(version_string() + "\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


HISTORY_COLUMNS = ("epoch", "step", "tau", "loss", "U_VAE", "U_AE", "U_reg", "U_best", "entropy",
                   "val_bias", "reconstruction", "row_max")


def write_history_csv(path, history):
    if not history:
        return
    present = set().union(*history)
    keys = [k for k in HISTORY_COLUMNS if k in present] + sorted(present - set(HISTORY_COLUMNS))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([_fmt(row.get(k, "")) for k in keys])


def load_split(data_dir, split):
    try:
        scenes, manifest = data.read_dataset(data_dir, split=split)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset at {data_dir}: {exc}") from None
    return scenes, manifest


# -- commands ---------------------------------------------------------------

def cmd_generate(args):
    cfg = resolve_config(args)
    params = data.SceneParams(J=cfg.J, H=cfg.H, W=cfg.W)
    if args.ambiguity_levels:
        params.ambiguity_levels = tuple(float(v) for v in args.ambiguity_levels.split(","))
    scenes = data.generate_dataset(args.scenes, params, cfg.seed, test_fraction=args.test_fraction)
    train = [s for s in scenes if s.split == "train"]
    test = [s for s in scenes if s.split == "test"]
    extra = {"n_base_train": len(train), "n_test": len(test)}
    if args.augment and args.augment > len(train):
        ssm = data.fit_ssm([s.consensus for s in train], args.variance_fraction)
        train = data.augment(train, ssm, args.augment, models.stream(cfg.seed, "augment"))
        extra.update(ssm_modes=ssm.n_modes, ssm_explained=ssm.explained_fraction())
    os.makedirs(args.out, exist_ok=True)
    data.write_dataset(args.out, train + test, params, seed=cfg.seed, extra=extra)
    print(f"wrote {len(train)} train and {len(test)} test records to {args.out}")
    if args.sweep:
        table = data.ambiguity_table(scenes, k_max=cfg.eval_k_max, seed=cfg.seed)
        with open(os.path.join(args.out, "ambiguity_table.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ambiguity", "n_scenes", "mean_var_gt"])
            for amb, (n, v) in table.items():
                w.writerow([repr(amb), n, repr(v)])
        print("ambiguity  scenes  mean var(gt)")
        for amb, (n, v) in table.items():
            print(f"{amb:9.3g}  {n:6d}  {v:.6f}")
    return EXIT_OK


def _train_one(cfg, train, val, run_dir, resume=None):
    if resume:
        model, _, trainer = checkpoint.load_model(resume, with_trainer=True)
        if model.kind != "cqvae":
            raise UsageError(f"{resume} is not a CQ-VAE checkpoint")
        trainer.config = trainer.config.replace(epochs=cfg.epochs)
    else:
        model = models.CQVAE(cfg, shape_offset=models.shape_offset(train))
        trainer = models.CQVAETrainer(model, cfg)
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    remaining = max(cfg.epochs - trainer.epoch, 0)
    total = cfg.epochs * -(-len(train) // cfg.batch)
    try:
        trainer.fit(train, epochs=remaining, val_records=val, total_steps=total,
                    on_epoch=lambda row: log.info("epoch %(epoch)d loss %(loss).3f", row))
    except models.TrainingDivergence as exc:
        checkpoint.save_model(os.path.join(run_dir, "last_good.ckpt"), model, trainer,
                              extra={"diverged": str(exc)})
        write_history_csv(os.path.join(run_dir, "metrics.csv"), trainer.history)
        raise
    checkpoint.save_model(ckpt_path, model, trainer)
    write_history_csv(os.path.join(run_dir, "metrics.csv"), trainer.history)
    return model, trainer


def cmd_train(args):
    cfg = resolve_config(args)
    data_dir = args.data or cfg.data_dir
    run_dir = args.run or cfg.run_dir
    if not data_dir or not run_dir:
        raise UsageError("train needs --data and --run (or data_dir/run_dir in the config)")
    cfg = cfg.replace(data_dir=data_dir, run_dir=run_dir)
    train, manifest = load_split(data_dir, "train")
    if not train:
        raise DataError(f"{data_dir} has no training records")
    if manifest["J"] != cfg.J or manifest["H"] != cfg.H or manifest["W"] != cfg.W:
        cfg = cfg.replace(J=manifest["J"], H=manifest["H"], W=manifest["W"])
    val, _ = load_split(data_dir, "val")
    if not val:
        val, _ = load_split(data_dir, "test")
    prepare_run_dir(run_dir, cfg)
    _, trainer = _train_one(cfg, train, val, run_dir, resume=args.resume)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.epoch} epochs; final loss {last.get('loss', float('nan')):.4f}; "
          f"checkpoint at {os.path.join(run_dir, 'checkpoint.ckpt')}")
    return EXIT_OK


def cmd_cqae(args):
    cfg = resolve_config(args)
    run_dir = args.run or cfg.run_dir
    if not run_dir:
        raise UsageError("cqae needs --run")
    if args.images:
        cfg = cfg.replace(cqae_images=args.images)
    prepare_run_dir(run_dir, cfg)
    images = data.small_image_set(cfg.cqae_images, cfg.cqae_size, models.stream(cfg.seed, "data-cqae"))
    model, trainer = models.train_cqae(images, cfg)
    checkpoint.save_model(os.path.join(run_dir, "checkpoint.ckpt"), model, trainer)
    write_history_csv(os.path.join(run_dir, "metrics.csv"), trainer.history)
    z = model.codes(images)
    print(f"mean row max {float(z.max(axis=-1).mean()):.4f} after {trainer.epoch} epochs")
    codes = random_codes(16, cfg.cqae_M, cfg.cqae_N, models.stream(cfg.seed, "sample"))
    _image_grid(os.path.join(run_dir, "random_samples.png"), model.generate(codes))
    return EXIT_OK


def _image_grid(path, images, cols=4):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = -(-len(images) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.5, rows * 1.5), squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    for ax, img in zip(axes.ravel(), images):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _overlay(path, shapes, image=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    if image is not None:
        ax.imshow(image, cmap="gray", extent=(0, 1, 1, 0), vmin=0, vmax=1)
    for s in shapes:
        closed = np.vstack([s, s[:1]])
        ax.plot(closed[:, 0], closed[:, 1], lw=0.6, alpha=0.7)
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_aspect("equal")
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _load_checkpoint(path):
    try:
        return checkpoint.load_model(path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_sample(args):
    model, header = _load_checkpoint(args.checkpoint)
    cfg = model.config
    rng = models.stream(args.seed if args.seed is not None else cfg.seed, "sample")
    os.makedirs(args.out, exist_ok=True)
    if model.kind == "cqae":
        imgs = model.generate(random_codes(args.count, cfg.cqae_M, cfg.cqae_N, rng))
        for i, img in enumerate(imgs):
            data.write_image_f32(os.path.join(args.out, f"image_{i:04d}.f32"), img)
        _image_grid(os.path.join(args.out, "samples.png"), imgs)
        print(f"wrote {len(imgs)} generated images to {args.out}")
        return EXIT_OK
    image = None
    if args.image:
        if args.image.endswith(".f32"):
            image = data.read_image_f32(args.image, cfg.H, cfg.W)
        else:
            if not args.data:
                raise UsageError("--image RECORD_ID needs --data")
            scenes, _ = load_split(args.data, None)
            found = [s for s in scenes if s.record_id == args.image]
            if not found:
                raise DataError(f"record {args.image!r} not in {args.data}")
            image = found[0].image
        shapes = model.sample_shapes(image, args.count, rng)
    else:
        shapes = model.decode_codes(random_codes(args.count, cfg.M, cfg.N, rng))
    for i, s in enumerate(shapes):
        data.write_shape_csv(os.path.join(args.out, f"shape_{i:04d}.csv"), s)
    _overlay(os.path.join(args.out, "overlay.png"), shapes, image)
    print(f"wrote {len(shapes)} shapes to {args.out}")
    return EXIT_OK


def _evaluate_model(model, test, cfg, out_dir, seed):
    heat_ids = [s.record_id for s in test[:cfg.n_heatmaps]]
    records, summary, heatmaps, failures = metrics.evaluate(model, test, l_max=cfg.eval_l_max,
                                                            k_max=cfg.eval_k_max, seed=seed, heatmap_ids=heat_ids)
    images = {s.record_id: s.image for s in test if s.record_id in heat_ids}
    metrics.write_report(out_dir, records, summary, heatmaps, failures, images)
    return records, summary


def cmd_evaluate(args):
    model, header = _load_checkpoint(args.checkpoint)
    if model.kind != "cqvae":
        raise UsageError("evaluate needs a CQ-VAE checkpoint")
    cfg = model.config
    if args.samples:
        cfg = cfg.replace(eval_l_max=args.samples)
    if args.gt_samples:
        cfg = cfg.replace(eval_k_max=args.gt_samples)
    data_dir = args.data or cfg.data_dir
    if not data_dir:
        raise UsageError("evaluate needs --data")
    test, _ = load_split(data_dir, args.split)
    if not test:
        raise DataError(f"{data_dir} has no {args.split!r} records")
    seed = cfg.seed if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    records, summary = _evaluate_model(model, test, cfg, args.out, seed)
    _print_summary(summary)
    if args.seeds and args.seeds > 1:
        _ensemble(args, cfg, data_dir, test, seed)
    return EXIT_OK


def _print_summary(summary):
    for key, value in summary["correlations"].items():
        print(f"{key:28s} {'degenerate' if value is None else f'{value:+.3f}'}")
    for msg in summary["degenerate"]:
        print(f"warning: {msg}")


def _ensemble(args, cfg, data_dir, test, seed):
    """Retrain with k seeds and pool their samples, a stand-in for a model ensemble."""
    train, _ = load_split(data_dir, "train")
    per_seed = []
    for i in range(args.seeds):
        scfg = cfg.replace(seed=cfg.seed + i)
        run = os.path.join(args.out, f"seed_{i}")
        prepare_run_dir(run, scfg)
        model, _ = _train_one(scfg, train, [], run)
        _evaluate_model(model, test, scfg, run, seed)
        per_seed.append(model)
    rows = []
    for j, rec in enumerate(test):
        rng = metrics.record_stream(seed, j)
        pooled = np.concatenate([m.sample_shapes(rec.image, cfg.eval_l_max, rng) for m in per_seed])
        bests = np.stack([m.best_shape(rec.image) for m in per_seed])
        rows.append([rec.record_id, repr(metrics.shape_variation(pooled).scalar_variation),
                     repr(metrics.shape_variation(bests).scalar_variation)])
    with open(os.path.join(args.out, "ensemble.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "var_pooled", "var_best_across_seeds"])
        w.writerows(rows)
    summary = {
        "seeds": args.seeds,
        "mean_var_pooled": float(np.mean([float(r[1]) for r in rows])),
        "mean_var_best_across_seeds": float(np.mean([float(r[2]) for r in rows])),
    }
    with open(os.path.join(args.out, "ensemble.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- parser -----------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)


def build_parser():
    parser = _Parser(prog="cqvae", description="Coordinate-quantized VAE for shape uncertainty.")
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic multi-annotator dataset")
    _common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--augment", type=int, default=0, help="grow the train split to this many records")
    g.add_argument("--variance-fraction", type=float, default=0.8)
    g.add_argument("--ambiguity-levels", help="comma-separated ambiguity scalars")
    g.add_argument("--sweep", action="store_true", help="print mean ground-truth variation per ambiguity level")
    for k in ("J", "H", "W"):
        g.add_argument(f"--{k}", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a CQ-VAE")
    _common(t)
    t.add_argument("--data")
    t.add_argument("--run")
    t.add_argument("--resume", help="checkpoint to continue from")
    for k, typ in (("epochs", int), ("M", int), ("N", int), ("batch", int), ("lr", float), ("alpha", float),
                   ("beta", float), ("k_max", int), ("l_max", int)):
        t.add_argument(f"--{k.replace('_', '-')}", dest=k, type=typ)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("cqae", help="train the image autoencoder on synthetic small images")
    _common(a)
    a.add_argument("--run")
    a.add_argument("--images", type=int)
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_cqae)

    s = sub.add_parser("sample", help="draw shapes from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--image", help="record id (with --data) or a raw .f32 image; omit for random codes")
    s.add_argument("--data")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="uncertainty and bias metrics on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int)
    e.add_argument("--seeds", type=int, default=1, help="train and pool this many seeds")
    e.add_argument("--samples", type=int, help="model samples per image (default eval_l_max)")
    e.add_argument("--gt-samples", type=int, help="ground-truth samples per image (default eval_k_max)")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cqvae: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cqvae: {exc}", file=sys.stderr)
        return EXIT_DATA
    except models.TrainingDivergence as exc:
        print(f"cqvae: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
