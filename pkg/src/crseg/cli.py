"""Command-line entry point.

    crseg gen-data --task crack --n 100 --seed 7 --out data/
    crseg train --config run.cfg [--out runs/a] [--mode sup_only] [--<key> <value> ...]
    crseg eval --checkpoint runs/a/checkpoints/final.npz --data test/ --out runs/a/eval
    crseg predict --checkpoint ... --data ... --out preds/
    crseg plot-log --log runs/a/train_log.csv --out runs/a/plots

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 data-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError

log = logging.getLogger("crseg")

VERBS = ("gen-data", "train", "eval", "predict", "plot-log")
# keys in a train config file that are not TrainConfig fields
RUN_KEYS = ("data", "val_data", "out", "task")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crseg", description="Semi-supervised crack/road segmentation.")
    sub = p.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--task", choices=("crack", "road"), default="crack")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--fg-fraction", type=float, default=0.02)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--unlabeled-fraction", type=float, default=0.0,
                   help="write this share of images without masks")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("semi", "sup_only"))
    t.add_argument("--label-fraction", type=float)
    t.add_argument("--task", choices=("crack", "road"))

    for verb in ("eval", "predict"):
        e = sub.add_parser(verb)
        e.add_argument("--checkpoint")
        e.add_argument("--config", help="train config; its out dir supplies the checkpoint")
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        if verb == "predict":
            e.add_argument("--threshold", type=float, default=0.5)

    pl = sub.add_parser("plot-log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out", required=True)
    return p


def _split_overrides(extra):
    """Turn ``--key value`` leftovers into a dict."""
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"missing value for {tok}")
        out[key.replace("-", "_")] = value
    return out


def _cmd_gen_data(args) -> None:
    from .data import ImageSample, SynthConfig, generate_synthetic_dataset, save_dataset

    cfg = SynthConfig(image_size=args.size, foreground_fraction_target=args.fg_fraction,
                      task=args.task, n_images=args.n, noise_level=args.noise, seed=args.seed)
    samples, aux = generate_synthetic_dataset(cfg, with_aux=True)
    n_unl = int(round(args.unlabeled_fraction * len(samples)))
    if n_unl:
        drop = set(np.random.default_rng(args.seed).choice(len(samples), n_unl, replace=False).tolist())
        samples = [ImageSample(s.id, s.image) if k in drop else s for k, s in enumerate(samples)]
    save_dataset(samples, args.out)
    if args.task == "road":
        for name, j in (("edge", 0), ("centerline", 1)):
            d = Path(args.out) / name
            d.mkdir(exist_ok=True)
            for s, masks in zip(samples, aux):
                Image.fromarray(masks[j] * 255).save(d / f"{s.id}.png")
    print(f"wrote {len(samples)} samples to {args.out}")


def load_train_config(path, overrides: dict):
    from .trainer import TrainConfig, parse_overrides, read_config_file

    raw = read_config_file(path) if path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    run = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    cfg = parse_overrides(TrainConfig(), raw)
    cfg.validate()
    return cfg, run


def _split_for(samples, cfg):
    from .data import DatasetSplit, make_split

    with_mask = [s.id for s in samples if s.mask is not None]
    without = [s.id for s in samples if s.mask is None]
    if not with_mask:
        raise ConfigError("dataset has no labeled samples")
    if without:
        # the dataset already fixes which images are unlabeled
        return DatasetSplit(tuple(with_mask), tuple(without), len(with_mask) / len(samples), cfg.seed)
    return make_split(with_mask, cfg.label_fraction, cfg.seed)


def _cmd_train(args, extra) -> None:
    from .data import load_dataset
    from .trainer import train, write_config_file

    overrides = _split_overrides(extra)
    for key in ("seed", "mode", "label_fraction", "task"):
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))
    cfg, run = load_train_config(args.config, overrides)
    if "data" not in run:
        raise ConfigError("config needs a 'data = <dir>' entry")
    # paths inside the config file are relative to the file itself
    base = Path(args.config).parent
    out = Path(args.out) if args.out else base / run.get("out", "run")
    samples = load_dataset(base / run["data"])
    if samples and samples[0].image.shape[2] != cfg.in_channels:
        raise ConfigError(f"in_channels={cfg.in_channels} but images have {samples[0].image.shape[2]}")
    val = load_dataset(base / run["val_data"]) if "val_data" in run else None
    if val is not None:
        val = [s for s in val if s.mask is not None]
    split = _split_for(samples, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, out / "config.cfg")
    model, tlog = train(None, samples, split, cfg, val_samples=val, log_csv=out / "train_log.csv",
                        checkpoint_dir=out / "checkpoints")
    if tlog.epoch_miou:
        tlog.miou_to_csv(out / "val_miou.csv")
    if run.get("task", "crack") == "road":
        _train_cascade(model, samples, split, cfg, base / run["data"], out)
    print(f"trained {cfg.epochs} epochs ({len(tlog.steps)} steps); checkpoint {out / 'checkpoints' / 'final.npz'}")


def _read_aux(data_dir: Path, samples):
    aux = []
    for s in samples:
        if s.mask is None:
            aux.append(None)
            continue
        pair = []
        for name in ("edge", "centerline"):
            path = data_dir / name / f"{s.id}.png"
            if not path.exists():
                raise FormatError(f"road task needs {path}")
            pair.append((np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8))
        aux.append(tuple(pair))
    return aux


def _train_cascade(surface_model, samples, split, cfg, data_dir: Path, out: Path) -> None:
    """Edge and centerline nets fed with the image plus the surface prediction."""
    import dataclasses

    from .data import DatasetSplit
    from .trainer import cascade_samples, train

    aux = _read_aux(data_dir, samples)
    sub_cfg = dataclasses.replace(cfg, in_channels=cfg.in_channels + 1)
    for which in ("edge", "centerline"):
        derived = cascade_samples(samples, aux, surface_model, which)
        ids = {s.id: d.id for s, d in zip(samples, derived)}
        sub_split = DatasetSplit(tuple(ids[i] for i in split.labeled_ids),
                                 tuple(ids[i] for i in split.unlabeled_ids), split.label_fraction, split.seed)
        train(None, derived, sub_split, sub_cfg, log_csv=out / which / "train_log.csv",
              checkpoint_dir=out / which / "checkpoints")


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.config:
        cfg, run = load_train_config(args.config, {})
        return Path(args.config).parent / run.get("out", "run") / "checkpoints" / "final.npz"
    raise ConfigError("need --checkpoint or --config")


def _load_model(args):
    from .network import load_checkpoint

    path = _checkpoint_path(args)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _cmd_eval(args) -> None:
    from .data import load_dataset
    from .trainer import evaluate_model

    model = _load_model(args)
    samples = [s for s in load_dataset(args.data) if s.mask is not None]
    if not samples:
        raise FormatError(f"{args.data} has no labeled samples to evaluate")
    rep = evaluate_model(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "eval_report.csv")
    (out / "summary.csv").write_text("best_threshold,best_miou\n" + rep.summary_line() + "\n")
    print(f"best_threshold={rep.best_threshold:.2f} best_miou={rep.best_miou:.4f}")


def _cmd_predict(args) -> None:
    from .data import load_dataset
    from .trainer import predict_probs

    model = _load_model(args)
    samples = load_dataset(args.data)
    out = Path(args.out)
    (out / "prob").mkdir(parents=True, exist_ok=True)
    (out / "mask").mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, predict_probs(model, samples)):
        Image.fromarray(np.round(p * 255).astype(np.uint8)).save(out / "prob" / f"{s.id}.png")
        Image.fromarray(((p >= args.threshold) * 255).astype(np.uint8)).save(out / "mask" / f"{s.id}.png")
    print(f"wrote {len(samples)} predictions to {out}")


def _cmd_plot_log(args) -> None:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.log)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {k: np.array([float(r[k]) for r in rows]) for k in
                ("step", "contrast", "balance", "construction", "weight_decay", "total", "lr")}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read train log {path}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in ("total", "contrast", "balance", "construction", "weight_decay"):
        ax.plot(cols["step"], cols[k], label=k, lw=0.8)
    ax.set_xlabel("step")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100)
    plt.close(fig)
    miou_path = path.with_name("val_miou.csv")
    if miou_path.exists():
        with open(miou_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot([int(r["epoch"]) for r in rows], [float(r["best_miou"]) for r in rows], marker=".")
        ax.set_xlabel("epoch")
        ax.set_ylabel("best MIOU")
        fig.tight_layout()
        fig.savefig(out / "miou.png", dpi=100)
        plt.close(fig)
    print(f"plots written to {out}")


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.verb is None:
            raise UsageError("missing command")
        if extra and args.verb != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.verb == "gen-data":
            _cmd_gen_data(args)
        elif args.verb == "train":
            _cmd_train(args, extra)
        elif args.verb == "eval":
            _cmd_eval(args)
        elif args.verb == "predict":
            _cmd_predict(args)
        else:
            _cmd_plot_log(args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
