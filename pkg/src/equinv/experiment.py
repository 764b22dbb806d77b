"""Desk-scale end-to-end run: pretrain, then compare frozen features on regression and matching.

Usage: python -m equinv.experiment --out runs/desk [--seeds 0 1 2] [--epochs 20]
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, FeatureExtractor
from .data import SyntheticDataset, generate_synthetic_dataset
from .equivariant import ProjectorConfig, train_projector
from .evaluation import (
    RegressorConfig, build_matching_benchmark, evaluate_matching, regression_metrics, train_regressor,
)
from .geometry import TransformPolicy
from .invariant import PretrainConfig, pretrain

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_images: int = 2000
    n_test: int = 400
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(
        epochs=20, base_lr=0.03, scale_lr_by_batch=False, momentum_m=0.99))
    augment: TransformPolicy = field(default_factory=TransformPolicy)
    regressor: RegressorConfig = field(default_factory=lambda: RegressorConfig(
        K=10, epochs=30, lr=1e-2, weight_decay=0.0))
    n_reg_train: int = 500
    projector: ProjectorConfig = field(default_factory=lambda: ProjectorConfig(proj_dim=64, proj_epochs=10))
    n_proj_train: int = 500
    n_same: int = 100
    n_diff: int = 300
    single_blocks: tuple = (3, 4, 5)


class CachedPieces:
    """Extractor stand-in that serves block maps computed once per base array.

    ``select`` picks which hypercolumn pieces are exposed, so single-block
    regressors reuse the hypercolumn pass.  Lookups accept any leading slice
    of a registered array.
    """

    def __init__(self, extractor, arrays, select=None):
        self.grid = extractor.grid
        self.projector = None
        self._store = []
        for arr in arrays:
            self._store.append((arr, extractor.pieces(arr)))
        n = len(self._store[0][1])
        self.select = list(range(n)) if select is None else list(select)
        self.channels = sum(self._store[0][1][i].shape[1] for i in self.select)

    def view(self, select):
        out = object.__new__(CachedPieces)
        out.grid, out.projector, out._store, out.select = self.grid, None, self._store, list(select)
        out.channels = sum(self._store[0][1][i].shape[1] for i in out.select)
        return out

    def pieces(self, images):
        ptr = images.__array_interface__["data"][0]
        for base, pcs in self._store:
            start = base.__array_interface__["data"][0]
            step = base.strides[0]
            off, rem = divmod(ptr - start, step)
            if rem == 0 and 0 <= off and off + len(images) <= len(base) and images.shape[1:] == base.shape[1:]:
                return [pcs[i][off:off + len(images)] for i in self.select]
        raise KeyError("images not registered with the cache")


def _split(ds, n_test):
    n = len(ds)
    tr = SyntheticDataset(ds.images[:n - n_test], ds.landmarks[:n - n_test], ds.masks[:n - n_test])
    te = SyntheticDataset(ds.images[n - n_test:], ds.landmarks[n - n_test:], ds.masks[n - n_test:])
    return tr, te


def _pck(cache, train, test, cfg, n):
    reg = train_regressor(cache, train.images[:n], train.landmarks[:n], cfg)
    return regression_metrics(cache, reg, test.images, test.landmarks)


def run_seed(cfg, seed, train, test):
    """All measurements for one seed; returns a flat dict."""
    row = {"seed": seed}
    t0 = time.time()
    pcfg = PretrainConfig(**{**asdict(cfg.pretrain), "seed": seed})
    result = pretrain(train.images, pcfg, policy=cfg.augment)
    row["pretrain_final_loss"] = result.metrics[-1]["loss_mean"]
    row["pretrain_seconds"] = round(time.time() - t0, 1)
    trained = result.query.eval()
    torch.manual_seed(seed)
    random_bb = Backbone(pcfg.backbone, pcfg.embed_dim).eval()

    n = cfg.n_reg_train
    rcfg = RegressorConfig(**{**asdict(cfg.regressor), "seed": seed})
    reg_imgs = np.ascontiguousarray(train.images[:n])
    reg_train = SyntheticDataset(reg_imgs, train.landmarks[:n], None)
    blocks = (2, 3, 4, 5)
    for name, bb in (("random", random_bb), ("trained", trained)):
        cache = CachedPieces(FeatureExtractor(bb, blocks), [reg_imgs, test.images])
        m = _pck(cache, reg_train, test, rcfg, n)
        row[f"pck_{name}_hc"] = m["pck"]
        row[f"iod_{name}_hc"] = m["inter_ocular"]
        if name == "trained":
            for b in cfg.single_blocks:
                m = _pck(cache.view([blocks.index(b)]), reg_train, test, rcfg, n)
                row[f"pck_block{b}"] = m["pck"]
                row[f"iod_block{b}"] = m["inter_ocular"]

    bench = build_matching_benchmark(test, cfg.n_same, cfg.n_diff, seed=seed)
    raw = FeatureExtractor(trained, blocks)
    jcfg = ProjectorConfig(**{**asdict(cfg.projector), "seed": seed})
    proj = train_projector(raw, train.images[:cfg.n_proj_train], jcfg.proj_dim, jcfg)
    projected = FeatureExtractor(trained, blocks, projector=proj)
    for name, ex in (("raw", raw), ("proj", projected)):
        errs = evaluate_matching(ex, test, bench)
        row[f"match_same_{name}"] = errs["same"]
        row[f"match_diff_{name}"] = errs["diff"]
    row["seconds"] = round(time.time() - t0, 1)
    return row


def criteria(row):
    """Per-seed verdicts for the three qualitative claims."""
    best_mid = max(row["pck_block3"], row["pck_block4"])
    return {
        "a_trained_beats_random": row["pck_trained_hc"] - row["pck_random_hc"] >= 10.0,
        "b_projector_helps_diff": (row["match_diff_raw"] - row["match_diff_proj"]) / row["match_diff_raw"] >= 0.2,
        "c_mid_block_beats_last": best_mid > row["pck_block5"],
    }


def majority(rows):
    verdicts = [criteria(r) for r in rows]
    return {k: sum(v[k] for v in verdicts) * 2 > len(verdicts) for k in verdicts[0]}


def run_experiment(cfg=None, out_dir=None, progress=None):
    cfg = cfg or ExperimentConfig()
    ds = generate_synthetic_dataset(cfg.n_images, seed=cfg.data_seed)
    train, test = _split(ds, cfg.n_test)
    rows = []
    for seed in cfg.seeds:
        row = run_seed(cfg, seed, train, test)
        row.update(criteria(row))
        rows.append(row)
        if progress:
            progress(row)
        if out_dir:
            _write(out_dir, cfg, rows)
    return rows, majority(rows)


def _write(out_dir, cfg, rows):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"config": asdict(cfg), "rows": rows, "majority": majority(rows)}
    (out / "experiment.json").write_text(json.dumps(summary, indent=2, default=str))


def main(argv=None):
    ap = argparse.ArgumentParser(prog="equinv-experiment")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n-images", type=int, default=2000)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(n_images=args.n_images, seeds=tuple(args.seeds))
    cfg.pretrain.epochs = args.epochs
    rows, verdict = run_experiment(cfg, args.out, progress=lambda r: log.info("seed %s: %s", r["seed"], r))
    log.info("majority: %s", verdict)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
