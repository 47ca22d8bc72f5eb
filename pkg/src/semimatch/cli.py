"""Command-line entry point: ``semimatch {synth,train,eval,ablate,plot,dump-masks}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, eval as evaluation, trainer
from .trainer import RunConfig

log = logging.getLogger("semimatch")

ENV_OUTPUT = "SEMIMATCH_OUTPUT_DIR"
ENV_THREADS = "SEMIMATCH_THREADS"

MASK_TAGS = {"mask": "w/o M_mask", "fb": "w/o M_fb", "thres": "w/o M_thres"}


def _typed(key: str):
    def convert(text: str):
        try:
            return RunConfig.coerce(key, text)
        except (KeyError, ValueError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    convert.__name__ = RunConfig.field_types()[key].__name__
    return convert


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--flag`` per RunConfig field; unset flags stay out of the namespace."""
    parser.add_argument("--config", help="key=value run config file")
    group = parser.add_argument_group("run config")
    defaults = RunConfig()
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(
            flag,
            dest=f.name,
            type=_typed(f.name),
            default=argparse.SUPPRESS,
            metavar=f.name.upper(),
            help=f"default: {getattr(defaults, f.name)!r}",
        )


def resolve_config(args: argparse.Namespace, **overrides) -> RunConfig:
    """flag > config file > environment > default."""
    values: dict = {}
    env_out = os.environ.get(ENV_OUTPUT)
    if env_out:
        values["output_dir"] = env_out
    if getattr(args, "config", None):
        values.update(trainer.read_config_file(args.config))
    names = {f.name for f in dataclasses.fields(RunConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    values.update(overrides)
    return RunConfig(**values)


# -- commands ------------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = data.SynthConfig(args.n_train, args.n_val, args.n_test, args.categories, args.seed, args.size)
    samples = data.generate_benchmark(cfg)
    path = data.write_benchmark(args.out, samples)
    n = sum(len(v) for v in samples.values())
    print(f"wrote {n} pairs to {path}")
    return 0


def _summary(res: trainer.RunResult) -> str:
    parts = [f"config_hash={res.config.config_hash()}", f"best_val_pck@0.1={res.state.best_pck:.2f}"]
    if res.test_report is not None:
        parts += [f"test_pck@{a:g}={v:.2f}" for a, v in res.test_report.pck.items() if v is not None]
    return " ".join(parts)


def cmd_train(args) -> int:
    config = resolve_config(args)
    trainer.set_threads()
    res = trainer.run_training(config, resume=args.resume)
    print(_summary(res))
    return 0


def read_predictions(path) -> dict[str, np.ndarray]:
    """CSV with columns ``pair_id,index,x,y`` (source-image pixels)."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["pair_id"], []).append((int(rec["index"]), float(rec["x"]), float(rec["y"])))
    return {k: np.array([(x, y) for _, x, y in sorted(v)]) for k, v in rows.items()}


def cmd_eval(args) -> int:
    cfg = evaluation.PckConfig(normalization=args.normalization, readout=args.readout)
    if args.predictions:
        records = [r for r in data.load_manifest(args.manifest, check_images=False) if r.split == args.split]
        preds = read_predictions(args.predictions)
        missing = [r.pair_id for r in records if r.pair_id not in preds]
        if missing:
            print(f"error: no predictions for {len(missing)} pairs (first: {missing[0]})", file=sys.stderr)
            return 2
        pairs = [(preds[r.pair_id], r.source_keypoints) for r in records]
        report = evaluation.evaluate_predictions(records, pairs, cfg, {"source": str(args.predictions)})
    else:
        if not args.checkpoint:
            print("error: eval needs --checkpoint or --predictions", file=sys.stderr)
            return 2
        model, _, _, run_cfg = trainer.load_checkpoint(args.checkpoint)
        samples = data.load_samples(args.manifest, split=args.split)
        report = evaluation.evaluate(model, samples, cfg, {"checkpoint": str(args.checkpoint), "config_hash": run_cfg.config_hash()})
    for a, v in report.pck.items():
        print(f"PCK@{a:g} = {'absent' if v is None else f'{v:.2f}'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        evaluation.build_report([report], group_by="class", out_dir=out, name="per_class")
        evaluation.write_csv(out / "summary.csv", [report.row()])
    return 0


def ablation_configs(base: RunConfig, args) -> list[RunConfig]:
    """Expand the sweep flags into tagged configs (one per setting and seed)."""
    variants: list[tuple[str, dict]] = []
    if args.drop_mask:
        variants.append(("full", {}))
        for name in args.drop_mask:
            variants.append((MASK_TAGS[name], {f"use_{name}": False}))
    if args.losses:
        variants += [(name, {"unsup": name}) for name in args.losses]
    if args.warmups is not None:
        variants += [(f"warmup={w:g}", {"warmup": w}) for w in args.warmups]
    if args.occlusions:
        variants += [(occ, {"occlusion": occ}) for occ in args.occlusions]
    if args.label_fractions:
        for f in args.label_fractions:
            variants.append((f"semi@{f:g}", {"label_fraction": f}))
            variants.append((f"supervised@{f:g}", {"label_fraction": f, "mode": "supervised"}))
    if not variants:
        variants.append((base.tag or "base", {}))
    seeds = args.seeds or [base.seed]
    out, seen = [], set()
    for tag, changes in variants:
        if tag in seen:
            continue
        seen.add(tag)
        for s in seeds:
            out.append(base.replace(tag=tag, seed=s, **changes))
    return out


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    trainer.set_threads()
    configs = ablation_configs(base, args)
    root = Path(base.output_dir or "ablation")
    reports = []
    for cfg in configs:
        slug = "".join(ch if ch.isalnum() or ch in "=.@" else "_" for ch in cfg.tag)
        cfg = cfg.replace(output_dir=str(root / f"{slug}_seed{cfg.seed}"))
        res = trainer.run_training(cfg)
        rep = res.test_report
        rep.metadata.update(tag=cfg.tag, seed=cfg.seed, label_fraction=cfg.label_fraction)
        reports.append(rep)
        print(f"[{cfg.tag}] seed={cfg.seed} {_summary(res)}")
    group = "label_fraction" if args.label_fractions and len(set(args.label_fractions)) > 1 and not args.drop_mask else "tag"
    rows, _ = evaluation.build_report(reports, group_by="tag", out_dir=root, name="ablation")
    if group == "label_fraction":
        evaluation.build_report(reports, group_by="label_fraction", out_dir=root, name="label_fraction")
    for row in rows:
        print(f"{row['group']}: " + " ".join(f"{k}={row[k]:.2f}" for k in row if k.startswith("pck@") and row[k] is not None))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for path in args.logs:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        label = Path(path).parent.name or str(path)
        steps = [int(r["step"]) for r in rows if r["l_sup"]]
        axes[0].plot(steps, [float(r["l_sup"]) for r in rows if r["l_sup"]], label=f"{label} L_sup")
        un = [(int(r["step"]), float(r["l_unsup"])) for r in rows if r["l_unsup"] and float(r["l_unsup"]) > 0]
        if un:
            axes[0].plot(*zip(*un), label=f"{label} L_unsup", alpha=0.7)
        val = [(int(r["epoch"]), float(r["val_pck"])) for r in rows if r["val_pck"]]
        if val:
            axes[1].plot(*zip(*val), marker="o", label=label)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("val PCK@0.1 (%)")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def cmd_dump_masks(args) -> int:
    from .pseudolabel import dump_masks

    model, _, _, cfg = trainer.load_checkpoint(args.checkpoint)
    cfg = cfg.replace(warmup=0.0, mode="semi", lambda_mode="adaptive")
    dataset = {"train": data.load_samples(args.manifest, split="train")} if args.manifest else trainer.load_dataset(cfg)
    labeled, unlabeled = trainer.split_train(dataset["train"], cfg)
    lab_idx = np.arange(min(len(labeled), args.count))
    unl_idx = np.arange(min(len(unlabeled), max(args.count - len(lab_idx), 0)))
    batch = trainer.build_batch(labeled, unlabeled, lab_idx, unl_idx, cfg, epoch=0)
    out = trainer.compute_losses(model, batch, cfg, epoch=cfg.warmup_epochs, need_unsup=True)
    path = dump_masks(args.out, out["masks"])
    if args.png:
        _render_masks(args.png, batch, out["masks"])
    print(f"wrote {len(out['masks'])} mask sets to {path}")
    return 0


def _render_masks(path, batch, masks) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(masks)
    fig, axes = plt.subplots(n, 5, figsize=(10, 2 * n), squeeze=False)
    for r, (t, cm) in enumerate(zip(batch.triplets, masks)):
        axes[r, 0].imshow(np.clip(t.weak.transpose(1, 2, 0), 0, 1))
        for c, (name, plane) in enumerate((("M_mask", cm.mask), ("M_fb", cm.fb), ("M_thres", cm.thres), ("m", cm.m)), 1):
            axes[r, c].imshow(plane, vmin=0, vmax=1, cmap="viridis")
            axes[r, c].set_title(name, fontsize=8)
        for ax in axes[r]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


# -- parser ----------------------------------------------------------------------------------
def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _intlist(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semimatch", description="Semi-supervised dense correspondence toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pair benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--categories", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one run")
    add_config_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK of a checkpoint or a predictions CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="CSV with pair_id,index,x,y")
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--normalization", default="image", choices=("image", "bbox"))
    p.add_argument("--readout", default="soft", choices=("soft", "hard"))
    p.add_argument("--out", help="directory for report CSV/PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep masks, losses, warm-up, occlusion or label fraction")
    add_config_flags(p)
    p.add_argument("--drop-mask", action="append", choices=sorted(MASK_TAGS), help="repeatable")
    p.add_argument("--losses", type=lambda s: s.split(","), help="e.g. contrastive,aepe")
    p.add_argument("--warmups", type=_floats, help="warm-up fractions, e.g. 0,0.2")
    p.add_argument("--occlusions", type=lambda s: s.split(","), help="e.g. none,cutout,keyout")
    p.add_argument("--label-fractions", type=_floats, help="e.g. 0.05,0.1,0.2,0.3")
    p.add_argument("--seeds", type=_intlist, help="e.g. 0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="loss and validation curves from training logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", default="curves.png")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("dump-masks", help="write confidence-mask components for a batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", required=True, help="dump archive path")
    p.add_argument("--png", help="optional rendering")
    p.set_defaults(func=cmd_dump_masks)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"semimatch {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
