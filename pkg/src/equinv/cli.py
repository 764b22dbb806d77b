"""Command line entry point: ``equinv <command> [options]``.

Every command writes ``run.json`` (arguments, config snapshot, seed and
library versions) into its ``--out`` directory.  Exit status is 0 on
success, 2 on usage errors and 1 when the stage itself fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, kernels
from .errors import EquinvError, InvalidArgument

log = logging.getLogger("equinv")

COMMANDS = (
    "gen-data", "pretrain", "train-projector", "eval-match", "eval-regress",
    "sweep-annotations", "distill-parts", "visualize-pca", "segment",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _save_png(path, array):
    from PIL import Image

    arr = np.clip(np.asarray(array, dtype=np.float64), 0, 1)
    Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(path)


def _split(ds, test_fraction):
    from .data import SyntheticDataset

    n = len(ds.images)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    cut = n - n_test

    def sub(sl):
        return SyntheticDataset(ds.images[sl], ds.landmarks[sl],
                                None if ds.masks is None else ds.masks[sl])

    return sub(slice(0, cut)), sub(slice(cut, n))


def _load_backbone(path):
    from .backbone import Backbone
    from .checkpoint import load_checkpoint, load_into

    arrays, manifest = load_checkpoint(path)
    pre = manifest.get("config", {}).get("pretrain", {})
    bb = Backbone(pre.get("backbone", "small"), int(pre.get("embed_dim", 128)))
    return load_into(bb, arrays, "query."), manifest


def _load_projector(path):
    from .checkpoint import load_checkpoint
    from .equivariant import Projector

    arrays, manifest = load_checkpoint(path)
    return Projector(torch.from_numpy(arrays["projector.weights"]),
                     float(manifest["meta"].get("tau", 1 / 7)))


def _extractor(args, cfg, with_projector=True):
    from .backbone import FeatureExtractor

    bb, _ = _load_backbone(args.checkpoint)
    proj = _load_projector(args.projector) if with_projector and getattr(args, "projector", None) else None
    return FeatureExtractor(bb, cfg.features.blocks, cfg.features.grid, proj)


def _dataset(args, cfg):
    from .data import load_dataset

    return load_dataset(args.data, getattr(args, "limit", None))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, out):
    from .data import generate_synthetic_dataset, write_dataset

    n = args.n if args.n is not None else cfg.data.n
    ds = generate_synthetic_dataset(n, (cfg.data.height, cfg.data.width), args.seed)
    write_dataset(ds, out)
    return {"images": n}


def cmd_pretrain(args, cfg, out):
    from .checkpoint import encoder_state_arrays, save_checkpoint
    from .invariant import pretrain

    pcfg = cfg.pretrain
    if args.epochs is not None:
        pcfg = replace(pcfg, epochs=args.epochs)
    pcfg = replace(pcfg, seed=args.seed)
    cfg.pretrain = pcfg
    ds = _dataset(args, cfg)
    train, _ = _split(ds, cfg.data.test_fraction)
    res = pretrain(train.images, pcfg, args.seed, cfg.augment, out)
    save_checkpoint(encoder_state_arrays(res.state), out / "checkpoint", cfg.to_dict(),
                    {"queue_head": res.state.queue_head})
    _write_csv(out / "metrics.csv", ["epoch", "loss_mean", "lr"],
               [[m["epoch"], m["loss_mean"], m["lr"]] for m in res.metrics])
    return {"final_loss": res.metrics[-1]["loss_mean"] if res.metrics else None}


def cmd_train_projector(args, cfg, out):
    from .checkpoint import save_checkpoint
    from .equivariant import self_match_probability, train_projector

    pc = replace(cfg.projector, seed=args.seed)
    if args.dim is not None:
        pc = replace(pc, proj_dim=args.dim)
    if args.epochs is not None:
        pc = replace(pc, proj_epochs=args.epochs)
    cfg.projector = pc
    ex = _extractor(args, cfg, with_projector=False)
    train, test = _split(_dataset(args, cfg), cfg.data.test_fraction)
    proj = train_projector(ex, train.images, pc.proj_dim, pc)
    save_checkpoint({"projector.weights": proj.weights}, out / "projector", cfg.to_dict(),
                    {"tau": proj.tau})
    ex.projector = proj
    pself = self_match_probability(ex.descriptors(test.images[:8]), proj.tau)
    _write_csv(out / "metrics.csv", ["epoch", "loss"], [[i + 1, v] for i, v in enumerate(proj.history)])
    return {"self_match_probability": pself}


def cmd_eval_match(args, cfg, out):
    from .evaluation import build_matching_benchmark, evaluate_matching, save_benchmark

    ex = _extractor(args, cfg)
    _, test = _split(_dataset(args, cfg), cfg.data.test_fraction)
    bench = build_matching_benchmark(test, args.pairs, args.pairs, args.seed,
                                     cfg.augment.tps_grid, cfg.augment.tps_sigma)
    save_benchmark(out / "benchmark.csv", bench)
    res = evaluate_matching(ex, test, bench)
    _write_csv(out / "matching.csv", ["pair_type", "mean_pixel_error", "pairs"],
               [[k, v, bench.counts[k]] for k, v in res.items()])
    return res


def _regressor_config(args, cfg):
    rc = replace(cfg.regressor, seed=args.seed)
    if args.epochs is not None:
        rc = replace(rc, epochs=args.epochs)
    cfg.regressor = rc
    return rc


def cmd_eval_regress(args, cfg, out):
    from .evaluation import regression_metrics, train_regressor, write_results

    ex = _extractor(args, cfg)
    rc = _regressor_config(args, cfg)
    train, test = _split(_dataset(args, cfg), cfg.data.test_fraction)
    n = min(args.n_annotations or len(train.images), len(train.images))
    reg = train_regressor(ex, train.images[:n], train.landmarks[:n], rc)
    m = regression_metrics(ex, reg, test.images, test.landmarks)
    rows = [{"metric": k, "value": v, "n_annotations": n, "seed": args.seed} for k, v in m.items()]
    write_results(out / "results.csv", rows)
    return m


def cmd_sweep(args, cfg, out):
    from .evaluation import summarize_sweep, sweep_annotations, write_results

    ex = _extractor(args, cfg)
    rc = _regressor_config(args, cfg)
    train, test = _split(_dataset(args, cfg), cfg.data.test_fraction)
    sizes = [int(s) for s in args.sizes.split(",")]
    seeds = list(range(args.seed, args.seed + args.repeats))
    rows = sweep_annotations(ex, train, test, sizes, seeds, rc)
    write_results(out / "results.csv", rows)
    summary = summarize_sweep(rows)
    _write_csv(out / "summary.csv", ["metric", "n_annotations", "mean", "std"],
               [[k[0], k[1], v[0], v[1]] for k, v in sorted(summary.items())])
    return {f"{k[0]}@{k[1]}": v[0] for k, v in summary.items()}


def _analysis_grids(args, cfg):
    ex = _extractor(args, cfg)
    ds = _dataset(args, cfg)
    imgs = ds.images[: cfg.analysis.images]
    desc = ex.descriptors(imgs).permute(0, 2, 3, 1).numpy()
    return imgs, desc


def cmd_distill_parts(args, cfg, out):
    from .analysis import nmf_factorize, part_heatmaps

    imgs, grids = _analysis_grids(args, cfg)
    X = np.maximum(grids.reshape(-1, grids.shape[-1]), 0.0)
    k = args.k or cfg.analysis.nmf_k
    f = nmf_factorize(X, k, cfg.analysis.nmf_iters, args.seed)
    _write_csv(out / "nmf_errors.csv", ["iteration", "recon_error"], list(enumerate(f.recon_error_history)))
    rows = []
    shown = min(len(imgs), 8)
    for i in range(shown):
        maps = part_heatmaps(grids[i], f.H)
        tiles = [imgs[i]] + [_upsample(m, imgs.shape[1:3]) for m in maps]
        rows.append(np.concatenate(tiles, axis=1))
    _save_png(out / "parts.png", np.concatenate(rows, axis=0))
    return {"final_recon_error": f.recon_error_history[-1], "k": k}


def _upsample(m, size):
    t = torch.as_tensor(m, dtype=torch.float32)[None, None]
    up = torch.nn.functional.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    return np.repeat(up.numpy()[..., None], 3, axis=2)


def cmd_visualize_pca(args, cfg, out):
    from .analysis import pca_basis, pca_images

    imgs, grids = _analysis_grids(args, cfg)
    k = min(args.k or cfg.analysis.pca_k, grids.shape[-1])
    basis = pca_basis(grids.reshape(-1, grids.shape[-1]), k)
    rgb = pca_images(grids, basis)
    shown = min(len(imgs), 8)
    rows = [np.concatenate([imgs[i], _upsample_rgb(rgb[i], imgs.shape[1:3])], axis=1) for i in range(shown)]
    _save_png(out / "pca.png", np.concatenate(rows, axis=0))
    _write_csv(out / "pca_singular_values.csv", ["component", "singular_value"],
               list(enumerate(basis.singular_values)))
    return {"k": k}


def _upsample_rgb(rgb, size):
    t = torch.as_tensor(rgb, dtype=torch.float32).permute(2, 0, 1)[None]
    up = torch.nn.functional.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0).numpy()


def cmd_segment(args, cfg, out):
    from .analysis import ProbeConfig, segmentation_probe

    ex = _extractor(args, cfg)
    ds = _dataset(args, cfg)
    if ds.masks is None:
        raise InvalidArgument("dataset has no masks")
    desc = ex.descriptors(ds.images)
    _, score = segmentation_probe(desc, ds.masks, ProbeConfig(epochs=cfg.analysis.probe_epochs,
                                                              seed=args.seed))
    _write_csv(out / "segmentation.csv", ["metric", "value"], [["iou", score]])
    return {"iou": score}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-projector": cmd_train_projector,
    "eval-match": cmd_eval_match,
    "eval-regress": cmd_eval_regress,
    "sweep-annotations": cmd_sweep,
    "distill-parts": cmd_distill_parts,
    "visualize-pca": cmd_visualize_pca,
    "segment": cmd_segment,
}


def build_parser():
    p = _Parser(prog="equinv", description="Landmark representation learning toolkit")
    p.add_argument("--version", action="version", version=f"equinv {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset directory")
            sp.add_argument("--limit", type=int, help="use only the first N images")
        if ckpt:
            sp.add_argument("--checkpoint", type=Path, required=True, help="pretrain checkpoint dir")
            sp.add_argument("--projector", type=Path, help="projector checkpoint dir")

    sp = sub.add_parser("gen-data", help="render a synthetic blob-face dataset")
    common(sp, data=False)
    sp.add_argument("--n", type=int)

    sp = sub.add_parser("pretrain", help="contrastive pretraining")
    common(sp)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("train-projector", help="fit the dense projector")
    common(sp, ckpt=True)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("eval-match", help="landmark matching benchmark")
    common(sp, ckpt=True)
    sp.add_argument("--pairs", type=int, default=50, help="pairs per type")

    sp = sub.add_parser("eval-regress", help="frozen-feature landmark regression")
    common(sp, ckpt=True)
    sp.add_argument("--n-annotations", type=int)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("sweep-annotations", help="regression over annotation budgets")
    common(sp, ckpt=True)
    sp.add_argument("--sizes", default="10,50,100")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--epochs", type=int)

    for name, helptext in (("distill-parts", "NMF part heatmaps"), ("visualize-pca", "PCA colouring")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, ckpt=True)
        sp.add_argument("--k", type=int)

    sp = sub.add_parser("segment", help="linear foreground probe")
    common(sp, ckpt=True)
    return p


def _provenance(args, cfg, argv):
    return {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "config": cfg.to_dict(),
        "versions": {
            "equinv": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "kernel_backend": kernels.BACKEND,
        },
    }


def main(argv=None):
    from .config import load_config

    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, EquinvError) as exc:
        print(f"equinv: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    record = _provenance(args, cfg, argv)
    start = time.time()
    torch.manual_seed(args.seed)
    try:
        result = HANDLERS[args.command](args, cfg, out)
        record.update(status="ok", result=result)
        code = 0
    except (EquinvError, OSError, ValueError, KeyError) as exc:
        log.debug("stage failed", exc_info=True)
        print(f"equinv {args.command}: {exc}", file=sys.stderr)
        record.update(status="error", error=str(exc))
        code = 1
    record["config"] = cfg.to_dict()
    record["elapsed_s"] = round(time.time() - start, 3)
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str))
    return code


run_cli = main


if __name__ == "__main__":
    sys.exit(main())
