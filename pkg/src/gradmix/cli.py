"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data error.
Every failure is reported as a single line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets as dsets
from . import pseudolabel as pl
from . import tensor_net as tn
from . import trainer as T
from .config import MODES, ConfigError, RunConfig, apply_overrides, config_digest, load_config

log = logging.getLogger("gradmix")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set solver.max_iter=100 (repeatable)")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for grid cells")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="gradmix", description="Gradient mixing for multi-source transfer learning.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--mode", choices=MODES, help="shortcut for --set mode=...")
    t.add_argument("--checkpoint", help="source-only checkpoint to start fine-tuning from")

    g = sub.add_parser("grid-search", parents=[common], help="GradMix over a beta/gamma grid")
    g.add_argument("--betas", help="comma-separated list (default: config pseudo.betas)")
    g.add_argument("--gammas", help="comma-separated list (default: config pseudo.gammas)")

    s = sub.add_parser("pseudo-label", parents=[common], help="ensemble pseudo-labels, then retrain")
    s.add_argument("--label-mode", choices=("hard", "soft"), default="hard")
    s.add_argument("--grid", help="directory written by grid-search (reused instead of retraining)")

    e = sub.add_parser("evaluate", parents=[common], help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--images", help="IDX images file (default: the config's test split)")
    e.add_argument("--labels", help="IDX labels file")
    e.add_argument("--head", help="head to evaluate (default: recorded in the checkpoint)")

    w = sub.add_parser("sweep-ensemble", parents=[common], help="accuracy against ensemble size R")
    w.add_argument("--max-r", type=int, default=5)
    w.add_argument("--label-mode", choices=("hard", "soft"), default="hard")
    w.add_argument("--grid", help="directory written by grid-search")

    d = sub.add_parser("gen-data", parents=[common], help="write partitioned IDX files and split manifests")
    d.add_argument("--synthetic", action="store_true", help="self-contained toy digits, no input files")
    d.add_argument("--source-dir", help="directory holding the MNIST IDX files "
                                        f"(default: ${dsets.DATA_DIR_ENV} or the bundled digits)")
    return p


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"not a comma-separated number list: {text!r}") from None


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if getattr(args, "mode", None):
        overrides.append(f"mode={json.dumps(args.mode)}")
    return apply_overrides(cfg, overrides)


def _prepare(cfg):
    try:
        return T.prepare_data(cfg)
    except (OSError, dsets.IdxFormatError, dsets.InsufficientSamplesError) as exc:
        raise DataError(str(exc)) from None


def _meta(cfg):
    return {"config_digest": config_digest(cfg), "seed": cfg.seed, "data_seed": cfg.data.seed}


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def _save_run(out: Path, cfg, data, record, params, prefix=""):
    meta = {**_meta(cfg), "head": data.target.head_id, "classes": list(data.target.label_space),
            "image_size": int(data.image_shape[0]), "mode": record.mode}
    tn.save_checkpoint(params, out / f"{prefix}model.ckpt", meta)
    summary = record.summary()
    timing = {"wall_per_batch": summary.pop("wall_per_batch")}
    _write_json(out / f"{prefix}record.json", summary)
    _write_json(out / f"{prefix}timing.json", timing)


def _start(args, cfg, data):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**cfg.to_dict(), "config_digest": config_digest(cfg)})
    _write_json(out / "manifest.json", {**_meta(cfg), **data.manifest})
    return out


def cmd_train(args):
    cfg = _load_cfg(args)
    data = _prepare(cfg)
    out = _start(args, cfg, data)
    writer = T.MetricsWriter(out, meta=_meta(cfg))
    try:
        record, params = T.train(cfg, data, writer, checkpoint=args.checkpoint)
        writer.summary({k: v for k, v in record.summary().items() if k != "wall_per_batch"})
    finally:
        writer.close()
    _save_run(out, cfg, data, record, params)
    print(f"mode={record.mode} test_acc={record.test_acc:.4f} best_step={record.best_step} "
          f"best_hv_acc={record.best_hv_acc:.4f}")


def _cells_for(args, cfg, data):
    if getattr(args, "grid", None):
        return _load_grid(Path(args.grid))
    betas = _floats(args.betas) if getattr(args, "betas", None) else cfg.pseudo.betas
    gammas = _floats(args.gammas) if getattr(args, "gammas", None) else cfg.pseudo.gammas
    return T.grid_search(cfg, data, betas, gammas, jobs=args.jobs)


def _save_grid(out: Path, cells):
    gdir = out / "grid"
    gdir.mkdir(exist_ok=True)
    rows = []
    lines = ["rank\tbeta\tgamma\tbest_hv_acc\ttest_acc\tcheckpoint"]
    for rank, c in enumerate(cells, 1):
        name = f"beta{c.beta:g}_gamma{c.gamma:g}.ckpt"
        tn.save_checkpoint(c.params, gdir / name, {"beta": c.beta, "gamma": c.gamma})
        rows.append({"rank": rank, "beta": c.beta, "gamma": c.gamma, "best_hv_acc": c.record.best_hv_acc,
                     "test_acc": c.record.test_acc, "checkpoint": name})
        lines.append(f"{rank}\t{c.beta:g}\t{c.gamma:g}\t{c.record.best_hv_acc:.4f}\t{c.record.test_acc:.4f}\t{name}")
    _write_json(gdir / "grid.json", rows)
    (out / "grid.tsv").write_text("\n".join(lines) + "\n")


def _load_grid(gdir: Path):
    if (gdir / "grid" / "grid.json").exists():
        gdir = gdir / "grid"
    try:
        rows = json.loads((gdir / "grid.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read grid results in {gdir}: {exc}") from None
    cells = []
    for r in rows:
        rec = T.RunRecord("gradmix", "", 0, best_hv_acc=r["best_hv_acc"], test_acc=r["test_acc"])
        cells.append(T.GridCell(r["beta"], r["gamma"], rec, tn.load_checkpoint(gdir / r["checkpoint"])))
    return sorted(cells, key=lambda c: c.key)


def cmd_grid_search(args):
    cfg = _load_cfg(args)
    data = _prepare(cfg)
    out = _start(args, cfg, data)
    cells = _cells_for(args, cfg, data)
    _save_grid(out, cells)
    best = cells[0]
    print(f"best beta={best.beta:g} gamma={best.gamma:g} hv_acc={best.record.best_hv_acc:.4f} "
          f"test_acc={best.record.test_acc:.4f}")


def cmd_pseudo_label(args):
    cfg = _load_cfg(args)
    data = _prepare(cfg)
    out = _start(args, cfg, data)
    cells = _cells_for(args, cfg, data)
    if not args.grid:
        _save_grid(out, cells)
    writer = T.MetricsWriter(out, meta=_meta(cfg))
    try:
        res = T.pseudo_pipeline(cfg, data, cells, mode=args.label_mode, writer=writer)
        writer.summary({k: v for k, v in res.record.summary().items() if k != "wall_per_batch"})
    finally:
        writer.close()
    pl.write_manifest(res.pseudo, out / "pseudo_labels.json", [pl.params_digest(m) for m in res.ensemble.members])
    _save_run(out, cfg, data, res.record, res.params)
    s = res.stats
    print(f"mode=gradmix-pseudo-{args.label_mode} accepted={s['n_accepted']}/{s['n_unlabeled']} "
          f"precision={s['precision']:.4f} test_acc={res.record.test_acc:.4f}")


def cmd_sweep_ensemble(args):
    cfg = _load_cfg(args)
    data = _prepare(cfg)
    out = _start(args, cfg, data)
    cells = _cells_for(args, cfg, data)
    if not args.grid:
        _save_grid(out, cells)
    rows = T.ensemble_sweep(cfg, data, cells, range(1, args.max_r + 1), mode=args.label_mode)
    lines = ["R\ttest_acc\tn_accepted\tprecision"]
    lines += [f"{r['R']}\t{r['test_acc']:.4f}\t{r['n_accepted']}\t{r['precision']:.4f}" for r in rows]
    (out / "ensemble_sweep.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_evaluate(args):
    try:
        params, meta = tn.load_checkpoint(args.checkpoint, with_meta=True)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from None
    head = args.head or meta.get("head") or (next(iter(params.heads)) if len(params.heads) == 1 else None)
    if head is None:
        raise ConfigError("checkpoint has several heads; pass --head")
    if head not in params.heads:
        raise ConfigError(f"checkpoint has no head {head!r}")
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise ConfigError("--images and --labels go together")
        try:
            ds = dsets.load_idx(args.images, args.labels, head_id=head)
        except (OSError, dsets.IdxFormatError) as exc:
            raise DataError(str(exc)) from None
        classes = meta.get("classes") or list(ds.domain.label_space)
        try:
            ds = dsets.partition_by_labels(ds, classes, head_id=head)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        side = meta.get("image_size", ds.images.shape[1])
        if ds.images.shape[1] % side:
            raise DataError(f"images of side {ds.images.shape[1]} cannot be pooled to {side}")
        ds = dsets.downsample(ds, ds.images.shape[1] // side)
    else:
        cfg = _load_cfg(args)
        ds = _prepare(cfg).test
    try:
        acc = T.evaluate(params, ds, head)
    except (ValueError, tn.DimensionError) as exc:
        raise DataError(str(exc)) from None
    print(acc)


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    if args.synthetic:
        cfg = apply_overrides(cfg, ['data.kind="synthetic"'])
    elif args.source_dir or dsets.DATA_DIR_ENV in os.environ:
        src = args.source_dir or str(dsets.default_data_dir())
        if not Path(src).is_dir():
            raise DataError(f"source directory {src} does not exist")
        cfg = apply_overrides(cfg, ['data.kind="idx"', f"data.data_dir={json.dumps(src)}"])
    data = _prepare(cfg)
    out = _start(args, cfg, data)

    def dump(name, ds):
        imgs, labs = dsets.to_idx_arrays(ds)
        dsets.write_idx(out / f"{name}-images-idx3-ubyte.gz", imgs)
        dsets.write_idx(out / f"{name}-labels-idx1-ubyte.gz", labs)

    for ds in data.sources:
        dump(ds.domain.name, ds)
    t = cfg.target_name
    dump(f"{t}-val", data.val)
    dump(f"{t}-hyperval", data.hyper_val)
    dump(f"{t}-test", data.test)
    u = data.unlabeled
    dsets.write_idx(out / f"{t}-unlabeled-images-idx3-ubyte.gz",
                    np.rint(u.images[..., 0] * 255).astype(np.uint8))
    # ground truth for evaluation tooling only; training never reads this file
    truth = np.asarray(u.domain.label_space)[dsets.unseal_labels(u)].astype(np.uint8)
    dsets.write_idx(out / f"{t}-unlabeled-SEALED-labels-idx1-ubyte.gz", truth)
    print(f"wrote {len(data.sources)} sources, V={len(data.val)}, hyper-val={len(data.hyper_val)}, "
          f"U={len(u)}, test={len(data.test)} to {out}")


COMMANDS = {
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "pseudo-label": cmd_pseudo_label,
    "evaluate": cmd_evaluate,
    "sweep-ensemble": cmd_sweep_ensemble,
    "gen-data": cmd_gen_data,
}


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError(f"missing subcommand; choose one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gradmix: config error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"gradmix: data error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        print("gradmix: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"gradmix: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
