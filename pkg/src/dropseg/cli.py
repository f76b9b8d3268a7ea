"""Operator surface: segment, tune, eval, synth.

Provider specs take the form ``synthetic:<scene-or-manifest.json>`` or
``subprocess:<command line>``; oracle specs are ``synthetic`` or
``subprocess:<command line>``. Exit codes: 0 ok, 1 usage error, 2 runtime
failure. All commands are deterministic given identical inputs and --seed;
wall-clock timings appear only in the JSON run report.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import netpbm
from .config import PipelineConfig
from .evalkit import (
    ConfusionAccumulator,
    SceneRecord,
    class_color,
    iou_per_class,
    load_dataset,
    load_label_raster,
    miou,
    save_dataset,
    save_label_raster,
    synth_benchmark,
)
from .pipeline import relabel_to_global, segment_image
from .provider import ProviderInit
from .provider import salt
from .provider.synthetic import SyntheticProvider, SyntheticScene, load_scene
from .provider.wire import OracleSession, SubprocessSession
from .refine import upsample_nearest
from .tuner import PlantedOracle, SearchSpace, make_stage_evaluators, staged_tune

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_EXIT)


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_json(Path(args.config).read_text())
    else:
        cfg = PipelineConfig()
    updates = {}
    if getattr(args, "gradcam_only", False):
        updates["dropout_rounds"] = 1
    elif getattr(args, "rounds", None):
        updates["dropout_rounds"] = args.rounds
    if getattr(args, "no_blur", False):
        updates["use_blur"] = False
    if getattr(args, "no_crf", False):
        updates["use_crf"] = False
    if updates:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **updates})
    return cfg


def _render_scene_image(scene: SyntheticScene, size: int) -> np.ndarray:
    """Flat palette rendering for scenes that come without pixels."""
    from .evalkit import BACKGROUND_COLOR, CLASS_NAME_POOL

    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUND_COLOR
    for i, name in enumerate(scene.class_names):
        gid = CLASS_NAME_POOL.index(name) + 1 if name in CLASS_NAME_POOL else i + 1
        pix = upsample_nearest(scene.masks[i], size, size)
        image[pix] = class_color(gid)
    return image


def _records_for_segment(args):
    """Resolve the provider spec into (records, provider_factory, class_names)."""
    spec = args.provider
    if spec.startswith("synthetic:"):
        path = Path(spec[len("synthetic:") :])
        doc = json.loads(path.read_text())
        if "images" in doc:
            dataset = load_dataset(path)
            return list(dataset.records), _synthetic_factory, dataset.class_names
        scene = SyntheticScene.from_dict(doc)
        if args.image:
            image = netpbm.read_ppm(args.image)
        else:
            image = _render_scene_image(scene, args.size)
        record = SceneRecord(
            name=path.stem,
            scene=scene,
            image=image,
            raster=np.zeros(image.shape[:2], dtype=np.int32),
            classes_present=scene.class_names,
            class_ids=tuple(range(1, scene.n_classes + 1)),
        )
        return [record], _synthetic_factory, scene.class_names
    if spec.startswith("subprocess:"):
        command = shlex.split(spec[len("subprocess:") :])
        if not args.image or not args.classes:
            raise ValueError("subprocess providers need --image and --classes")
        image = netpbm.read_ppm(args.image)
        names = tuple(
            line.strip()
            for line in Path(args.classes).read_text().splitlines()
            if line.strip()
        )
        record = SceneRecord(
            name=Path(args.image).stem,
            scene=None,
            image=image,
            raster=np.zeros(image.shape[:2], dtype=np.int32),
            classes_present=names,
            class_ids=tuple(range(1, len(names) + 1)),
            image_path=str(args.image),
        )

        def factory(rec, layer, head):
            init = ProviderInit(
                image=rec.image_path,
                classes=rec.classes_present,
                layer=layer,
                head=head,
                grid=args.grid,
            )
            return SubprocessSession(command, init)

        return [record], factory, names
    raise ValueError(f"unknown provider spec {spec!r} (use synthetic:... or subprocess:...)")


def _synthetic_factory(record, layer, head):
    return SyntheticProvider(record.scene, layer, head)


def _overlay(image, labels) -> np.ndarray:
    out = image.astype(np.float64).copy()
    for k in np.unique(labels):
        if k == 0:
            continue
        sel = labels == k
        out[sel] = 0.5 * out[sel] + 0.5 * class_color(int(k)).astype(np.float64)
    return np.clip(out, 0, 255).astype(np.uint8)


def cmd_segment(args) -> int:
    cfg = _load_config(args)
    records, factory, _ = _records_for_segment(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    def run_one(rec):
        t0 = time.perf_counter()
        provider = factory(rec, cfg.layer, cfg.head)
        result, acc = segment_image(provider, rec.image, cfg)
        if hasattr(provider, "shutdown"):
            provider.shutdown()
        global_labels = relabel_to_global(result.labels, rec.class_ids)
        (outdir / f"{rec.name}_softmasks.salt").write_bytes(
            salt.encode(result.soft_masks.astype(np.float32))
        )
        for i, name in enumerate(rec.classes_present):
            netpbm.write_pgm(
                outdir / f"{rec.name}_mask_{name}.pgm",
                result.pixel_masks[i].astype(np.uint8) * 255,
            )
        save_label_raster(outdir / f"{rec.name}_labels.pgm", global_labels)
        netpbm.write_ppm(outdir / f"{rec.name}_overlay.ppm", _overlay(rec.image, global_labels))
        return {
            "name": rec.name,
            "final_active_patches": int(acc.final_active.count),
            "rounds": cfg.dropout_rounds,
            "classes": list(rec.classes_present),
            "seconds": round(time.perf_counter() - t0, 3),
        }

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(run_one, records))
    else:
        entries = [run_one(rec) for rec in records]
    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "images": entries,
    }
    (outdir / "run_report.json").write_text(json.dumps(report, indent=2))
    print(f"segmented {len(entries)} image(s) -> {outdir}")
    return 0


def _make_oracle(spec, class_names):
    if spec == "synthetic":
        return PlantedOracle(class_names)
    if spec.startswith("subprocess:"):
        return OracleSession(shlex.split(spec[len("subprocess:") :]))
    raise ValueError(f"unknown oracle spec {spec!r}")


def cmd_tune(args) -> int:
    dataset = load_dataset(args.manifest)
    records = list(dataset.records)
    space = (
        SearchSpace.from_json(Path(args.space).read_text())
        if args.space
        else SearchSpace()
    )
    oracle = _make_oracle(args.oracle, dataset.class_names)
    base = _load_config(args)
    stage1, stage2 = make_stage_evaluators(records, _synthetic_factory, oracle, base)
    config, trace1, trace2 = staged_tune(
        space,
        stage1,
        stage2,
        groups=args.groups,
        iters_per_group=args.iters,
        seed=args.seed,
        jobs=args.jobs,
        base_config=base,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "trace.ndjson", "w", encoding="utf-8") as fh:
        for stage, trace in ((1, trace1), (2, trace2)):
            for entry in trace:
                layer, head, threshold, sigma = entry.config
                fh.write(
                    json.dumps(
                        {
                            "stage": stage,
                            "group": entry.group,
                            "index": entry.index,
                            "config": {
                                "layer": layer,
                                "head": head,
                                "threshold": threshold,
                                "blur_sigma": sigma,
                            },
                            "total_reward": entry.reward,
                        }
                    )
                    + "\n"
                )
    (outdir / "best_config.json").write_text(config.to_json())
    print(
        f"best config: layer={config.layer} head={config.head} "
        f"threshold={config.threshold} blur_sigma={config.blur_sigma}"
    )
    return 0


def cmd_eval(args) -> int:
    names = [
        line.strip()
        for line in Path(args.classes).read_text().splitlines()
        if line.strip()
    ]
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = {p.name: p for p in sorted(pred_dir.glob("*.pgm"))}
    gt_files = {p.name: p for p in sorted(gt_dir.glob("*.pgm"))}
    common = sorted(set(pred_files) & set(gt_files))
    missing = sorted(set(pred_files) ^ set(gt_files))
    if not common:
        print("error: no matching raster filenames between directories", file=sys.stderr)
        return RUNTIME_EXIT
    acc = ConfusionAccumulator(len(names))
    for name in common:
        gt = load_label_raster(gt_files[name], n_classes=len(names))
        pred = load_label_raster(pred_files[name], n_classes=len(names))
        acc.add(gt, pred)
    ious = iou_per_class(acc)
    mean = miou(acc)
    print(f"{'class':<16} {'IoU':>8}")
    print(f"{'(background)':<16} {_fmt_iou(ious[0]):>8}")
    for i, name in enumerate(names, start=1):
        print(f"{name:<16} {_fmt_iou(ious[i]):>8}")
    print(f"{'mIoU':<16} {mean:>8.4f}")
    report = {
        "miou": mean,
        "per_class": {name: _nan_null(ious[i]) for i, name in enumerate(names, start=1)},
        "background_iou": _nan_null(ious[0]),
        "pairs": len(common),
        "missing": missing,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if missing:
        print(f"error: {len(missing)} raster(s) without a counterpart: {missing}", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


def _fmt_iou(value) -> str:
    return "  n/a" if np.isnan(value) else f"{value:.4f}"


def _nan_null(value):
    return None if np.isnan(value) else float(value)


def cmd_synth(args) -> int:
    dataset = synth_benchmark(
        seed=args.seed,
        n_images=args.images,
        n_classes=args.classes,
        grid=args.grid,
        image_size=args.size,
        noise=args.noise,
        decay=args.decay,
    )
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.records)} scene(s), manifest at {manifest}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dropseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment images via a salience provider")
    seg.add_argument("--provider", required=True, help="synthetic:<json> | subprocess:<command>")
    seg.add_argument("--config", help="PipelineConfig JSON file")
    seg.add_argument("--out", required=True)
    seg.add_argument("--image", help="PPM image (subprocess provider or bare scene)")
    seg.add_argument("--classes", help="class list file (subprocess provider)")
    seg.add_argument("--grid", type=int, default=24, help="patch grid for subprocess providers")
    seg.add_argument("--size", type=int, default=96, help="render size for bare scenes")
    seg.add_argument("--rounds", type=int, help="dropout rounds override")
    seg.add_argument("--no-blur", action="store_true")
    seg.add_argument("--no-crf", action="store_true")
    seg.add_argument("--gradcam-only", action="store_true", help="single round, no dropout")
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--jobs", type=int, default=1)
    seg.set_defaults(func=cmd_segment)

    tune = sub.add_parser("tune", help="staged random search on a weak-label dataset")
    tune.add_argument("--manifest", required=True)
    tune.add_argument("--space", help="SearchSpace JSON (default: built-in grid)")
    tune.add_argument("--oracle", default="synthetic", help="synthetic | subprocess:<command>")
    tune.add_argument("--config", help="base PipelineConfig JSON")
    tune.add_argument("--out", required=True)
    tune.add_argument("--groups", type=int, default=3)
    tune.add_argument("--iters", type=int, default=34)
    tune.add_argument("--seed", type=int, default=0)
    tune.add_argument("--jobs", type=int, default=1)
    tune.set_defaults(func=cmd_tune)

    ev = sub.add_parser("eval", help="mIoU of predicted rasters against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--classes", required=True)
    ev.add_argument("--out", help="JSON report path")
    ev.set_defaults(func=cmd_eval)

    synth = sub.add_parser("synth", help="generate the synthetic benchmark")
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--images", type=int, default=20)
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--grid", type=int, default=24)
    synth.add_argument("--size", type=int, default=96)
    synth.add_argument("--noise", type=float, default=0.1)
    synth.add_argument("--decay", type=float, default=0.3)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
