"""``ulsad`` command line: synth-gen, train, calibrate, evaluate, predict.

Every config leaf is a flag (``--epochs 30``, ``--use-global false``,
``--train.seed 3``); flags override the ``--config`` YAML file, which
overrides the built-in defaults. The resolved config is written next to
the outputs.

Exit codes: 0 success, 1 usage/config, 2 data/calibration/checkpoint, 3 numeric.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as C
from .data import DatasetLayout, generate_synthetic, load_image, load_images, load_mask, normal_splits, scan_split
from .errors import DataError, ULSADError
from .inference import calibrate, predict, upsample_map
from .metrics import aupro, auroc, pixel_auroc
from .trainer import load_bundle, save_bundle, train

logger = logging.getLogger("ulsad")

COMMANDS = ("synth-gen", "train", "calibrate", "evaluate", "predict")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulsad", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-gen": "write a synthetic benchmark to --data",
        "train": "fit channel statistics and train the two branches",
        "calibrate": "fit anomaly-map quantiles on validation images",
        "evaluate": "score the test split and write metric tables",
        "predict": "score individual images and write heatmaps",
    }
    flags = C.flag_names()
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "predict":
            p.add_argument("images", nargs="+", type=Path)
            p.add_argument("--emit-branch-maps", action="store_true", help="also write local and global maps")
        group = p.add_argument_group("config overrides (YAML syntax values)")
        for flag, key in sorted(flags.items()):
            default = C.DEFAULTS[key.split(".")[0]][key.split(".", 1)[1]]
            group.add_argument(f"--{flag}", dest=f"set:{key}:{flag}", metavar="V",
                               help=f"{key} (default: {default})")
    return parser


def _overrides(ns) -> dict:
    out = {}
    for attr, text in vars(ns).items():
        if attr.startswith("set:") and text is not None:
            _, key, flag = attr.split(":")
            if key in out:
                raise C.ConfigError(f"{key} given twice (via --{flag})")
            out[key] = C.parse_value(text)
    return out


def _layout(cfg) -> DatasetLayout:
    root = cfg["data"]["root"]
    if root is None:
        raise DataError("no dataset given; pass --data <root>")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return DatasetLayout(root, cfg["data"]["category"])


def _out_dir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(cfg) -> Path:
    ck = cfg["output"]["checkpoint"]
    return Path(ck) if ck else Path(cfg["output"]["dir"]) / "model.npz"


def _write_tsv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


# --------------------------------------------------------------------------


def cmd_synth_gen(cfg) -> int:
    root = cfg["data"]["root"]
    if root is None:
        raise DataError("pass --data <output root> for the synthetic benchmark")
    s = cfg["synthetic"]
    generate_synthetic(C.synthetic_spec(cfg), root, n_normal=s["n_normal"], n_structural=s["n_structural"],
                       n_logical=s["n_logical"], n_validation=s["n_validation"], n_test_normal=s["n_test_normal"])
    print(f"wrote synthetic benchmark to {root}")
    return 0


def cmd_train(cfg) -> int:
    layout = _layout(cfg)
    out = _out_dir(cfg)
    mc, tc = C.model_config(cfg), C.train_config(cfg)
    train_samples, _ = normal_splits(layout, cfg["data"]["holdout"], tc.seed)
    images = load_images(train_samples, mc.backbone.image_size)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log:
        bundle = train(images, mc, tc, on_step=lambda rec: log.write(json.dumps(rec) + "\n"))
    ck = save_bundle(bundle, _checkpoint(cfg))
    C.dump_config(cfg, out / "resolved_config.yaml")
    print(f"trained on {len(train_samples)} images; checkpoint {ck}; log {log_path}")
    return 0


def cmd_calibrate(cfg) -> int:
    layout = _layout(cfg)
    ck = _checkpoint(cfg)
    bundle = load_bundle(ck, expected=C.model_config(cfg))
    _, val = normal_splits(layout, cfg["data"]["holdout"], cfg["train"]["seed"])
    images = load_images(val, bundle.config.backbone.image_size)
    cal = calibrate(bundle, images, cfg["calibration"]["alpha"], cfg["calibration"]["beta"],
                    cfg["output"]["batch_size"])
    save_bundle(bundle, ck)
    C.dump_config(cfg, _out_dir(cfg) / "resolved_config.yaml")
    print(f"calibrated on {len(val)} images: {json.dumps(cal.to_dict())}")
    return 0


def _subset_metrics(scores, labels, maps, masks, keep):
    lab = labels[keep]
    img = auroc(scores[keep], lab) if 0 < lab.sum() < lab.size else float("nan")
    if masks is None or not any(m.any() for m, k in zip(masks, keep) if k):
        return img, float("nan"), float("nan")
    sel_maps = [m for m, k in zip(maps, keep) if k]
    sel_masks = [m for m, k in zip(masks, keep) if k]
    return img, pixel_auroc(sel_maps, sel_masks), aupro(sel_maps, sel_masks)


def cmd_evaluate(cfg) -> int:
    layout = _layout(cfg)
    out = _out_dir(cfg)
    bundle = load_bundle(_checkpoint(cfg), expected=C.model_config(cfg))
    size = bundle.config.backbone.image_size
    samples = scan_split(layout, "test", require_masks=cfg["data"]["require_masks"])
    preds = predict(bundle, load_images(samples, size), cfg["output"]["batch_size"])
    scores = np.array([p.score for p in preds])
    labels = np.array([s.label for s in samples])
    have_masks = all(s.mask_path is not None for s in samples if s.label)
    maps = [p.upsampled(size, cfg["output"]["sigma"]) for p in preds] if have_masks else None
    masks = [load_mask(s.mask_path, size) for s in samples] if have_masks else None

    category = cfg["data"]["category"] or Path(cfg["data"]["root"]).name
    types = np.array([s.defect_type for s in samples])
    rows = []
    subsets = [("all", np.ones(len(samples), dtype=bool))]
    subsets += [(d, (types == d) | (labels == 0)) for d in sorted(set(types[labels == 1]))]
    for name, keep in subsets:
        img, pix, pro = _subset_metrics(scores, labels, maps, masks, keep)
        rows.append([category, name, int(keep.sum()), _fmt(img), _fmt(pix), _fmt(pro)])
    table = _write_tsv(out / "metrics.tsv", ["category", "subset", "n_images", "image_auroc", "pixel_auroc", "aupro"], rows)
    results = _write_tsv(out / "results.tsv", ["id", "score", "label"],
                         [[s.image_id, f"{p.score:.6f}", s.label] for s, p in zip(samples, preds)])
    C.dump_config(cfg, out / "resolved_config.yaml")
    for r in rows:
        print("\t".join(str(v) for v in r))
    print(f"metrics {table}; per-image results {results}")
    return 0


def _heatmap_png(m: np.ndarray, path: Path, lo: float = 0.0, hi: float = 0.2) -> None:
    # calibrated scale: 0 at the alpha quantile, 0.1 at the beta quantile
    v = np.clip((m - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray((v * 255).round().astype(np.uint8), mode="L").save(path)


def cmd_predict(cfg, paths, emit_branch_maps=False) -> int:
    out = _out_dir(cfg)
    bundle = load_bundle(_checkpoint(cfg), expected=C.model_config(cfg))
    size = bundle.config.backbone.image_size
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise DataError(f"input image(s) not found: {', '.join(missing)}")
    images = torch.stack([load_image(Path(p), size) for p in paths])
    preds = predict(bundle, images, cfg["output"]["batch_size"])
    sigma = cfg["output"]["sigma"]
    rows = []
    for path, p in zip(paths, preds):
        stem = Path(path).stem
        np.save(out / f"{stem}_combined.npy", p.combined)
        _heatmap_png(p.upsampled(size, sigma), out / f"{stem}_combined.png")
        if emit_branch_maps:
            for which, arr in (("local", p.local), ("global", p.glob)):
                if arr is None:
                    continue
                np.save(out / f"{stem}_{which}.npy", arr)
                _heatmap_png(upsample_map(arr, size, sigma), out / f"{stem}_{which}.png")
        rows.append([str(path), f"{p.score:.6f}", ""])
        print(f"{path}\t{p.score:.6f}")
    _write_tsv(out / "predictions.tsv", ["id", "score", "label"], rows)
    C.dump_config(cfg, out / "resolved_config.yaml")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(ns.config, _overrides(ns))
        if ns.command == "synth-gen":
            return cmd_synth_gen(cfg)
        if ns.command == "train":
            return cmd_train(cfg)
        if ns.command == "calibrate":
            return cmd_calibrate(cfg)
        if ns.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_predict(cfg, ns.images, ns.emit_branch_maps)
    except ULSADError as exc:
        print(f"ulsad {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
