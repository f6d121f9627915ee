"""Pipeline driver: dataset generation, training, sampling, evaluation and
report emission.

    occlusym {gen-masks|gen-dataset|train|sample|eval|report}
             --config PATH [--set key=value]... [--jobs N]

A run is a pure function of its JSON config file and input files: no
environment variables, no timestamps in outputs, atomic writes. All
randomness derives from the single root seed through sha256 sub-seeds
(see dataset.derive_seed), so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import os
import sys

import numpy as np

from . import io as _io
from .dataset import (
    build_toy_views,
    derive_seed,
    load_toy_dataset,
    make_view_condition,
    write_toy_dataset,
)
from .flow import (
    FlowModelConfig,
    SampleConfig,
    TrainConfig,
    init_flow_model,
    load_model,
    sample_batch,
    save_model,
    train,
)
from .masks2d import OcclusionParams, composite_levels, gen_random_occlusion, mask_ratio
from .mesh_occlusion import (
    load_obj,
    normalize_unit_cube,
    orbit_cameras,
    random_walk_select,
    render_masks,
)
from .metrics import metric_report, voxels_to_points
from .slat import decode_stage1

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "masks": {
        "mode": "2d",  # or "3d"
        "count": 10,
        "width": 128,
        "height": 128,
        "occlusion": None,  # OcclusionParams overrides, e.g. {"n_rects": [3, 7]}
        "meshes": [],  # OBJ paths for 3d mode
        "n_views": 4,
        "mask_ratio_range": [0.4, 0.6],
        "camera": {"radius": 2.0, "fov_y": 40.0, "pitch": 30.0, "yaw_start": 0.0,
                   "image_size": 128},
    },
    "model": {},  # FlowModelConfig overrides
    "dataset": {"n_shapes": 64, "n_views": 4, "dir": None},
    "train": {"lr": 1e-4, "cfg_drop": 0.1, "batch": 16, "steps": 2000,
              "weight_decay": 0.01},
    "sample": {"count": 8, "n_steps": 25, "cfg_scale": 2.0, "views_per_sample": 1,
               "occluded": True, "threshold": 0.5},
    "eval": {"k_points": 256, "gen_dir": None, "ref_dir": None},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValueError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, "r", encoding="utf-8") as f:
            config = _deep_merge(config, json.load(f))
    for assignment in overrides:
        _apply_set(config, assignment)
    return config


def _model_config(config: dict) -> FlowModelConfig:
    return FlowModelConfig(**config.get("model", {}))


def _occlusion_params(block) -> OcclusionParams | None:
    if not block:
        return None
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in block.items()}
    return OcclusionParams(**kwargs)


def _pmap(fn, items, jobs: int):
    """Order-preserving map, optionally fanned out over processes. Each item
    carries its own seed, so the fan-out width never changes results."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# gen-masks


def _gen_one_2d_mask(args):
    width, height, occlusion, seed = args
    mask = gen_random_occlusion(width, height, occlusion, seed=seed)
    return mask, mask_ratio(mask)


def cmd_gen_masks(config: dict, jobs: int = 1) -> dict:
    out_dir = os.path.join(config["out_dir"], "masks")
    block = config["masks"]
    seed = config["seed"]
    manifest: dict = {"mode": block["mode"], "root_seed": seed, "entries": []}

    if block["mode"] == "2d":
        occlusion = _occlusion_params(block.get("occlusion"))
        tasks = [
            (block["width"], block["height"], occlusion, derive_seed(seed, f"mask2d-{i}"))
            for i in range(block["count"])
        ]
        for i, (mask, ratio) in enumerate(_pmap(_gen_one_2d_mask, tasks, jobs)):
            name = f"occ_{i:05d}.pgm"
            _io.write_pgm(os.path.join(out_dir, name), mask)
            manifest["entries"].append({"mask": name, "ratio": ratio,
                                        "seed": tasks[i][3]})
    elif block["mode"] == "3d":
        cam_block = block["camera"]
        lo, hi = block["mask_ratio_range"]
        if not block["meshes"]:
            raise ValueError("3d mode needs masks.meshes (OBJ paths)")
        failures = 0
        for m, mesh_path in enumerate(block["meshes"]):
            try:
                mesh = normalize_unit_cube(load_obj(mesh_path))
            except (OSError, ValueError) as err:
                print(f"warning: skipping mesh {mesh_path}: {err}", file=sys.stderr)
                failures += 1
                continue
            walk_seed = derive_seed(seed, f"walk-{m}")
            ratio_rng = np.random.default_rng(derive_seed(seed, f"ratio-{m}"))
            target = float(ratio_rng.uniform(lo, hi))
            sel = random_walk_select(mesh, target, seed=walk_seed)
            cams = orbit_cameras(block["n_views"], **cam_block)
            stem = f"mesh_{m:03d}"
            views = []
            for v, cam in enumerate(cams):
                obj, occ = render_masks(mesh, sel, cam)
                obj_name = f"{stem}_v{v}_obj.pgm"
                occ_name = f"{stem}_v{v}_occ.pgm"
                comp_name = f"{stem}_v{v}_composite.pgm"
                _io.write_pgm(os.path.join(out_dir, obj_name), obj)
                _io.write_pgm(os.path.join(out_dir, occ_name), occ)
                _io.write_pgm(os.path.join(out_dir, comp_name), composite_levels(obj, occ))
                sidecar = {
                    "camera": {"radius": cam.radius, "yaw": cam.yaw,
                               "pitch": cam.pitch, "fov_y": cam.fov_y,
                               "image_size": cam.image_size},
                    "achieved_ratio": sel.achieved_ratio,
                    "target_ratio": target,
                    "exhausted": sel.exhausted,
                    "walk_seed": walk_seed,
                }
                _io.write_json(os.path.join(out_dir, f"{stem}_v{v}.json"), sidecar)
                views.append({"obj": obj_name, "occ": occ_name,
                              "sidecar": f"{stem}_v{v}.json"})
            manifest["entries"].append({
                "mesh": mesh_path, "stem": stem, "achieved_ratio": sel.achieved_ratio,
                "target_ratio": target, "n_selected": len(sel.selected),
                "views": views,
            })
        if failures and not manifest["entries"]:
            raise RuntimeError("all meshes failed to load")
    else:
        raise ValueError(f"unknown masks.mode {block['mode']!r}")

    manifest["count"] = len(manifest["entries"])
    _io.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# gen-dataset / train / sample / eval


def _dataset_dir(config: dict) -> str:
    return config["dataset"]["dir"] or os.path.join(config["out_dir"], "dataset")


def cmd_gen_dataset(config: dict, jobs: int = 1) -> dict:
    mc = _model_config(config)
    block = config["dataset"]
    occlusion = _occlusion_params(block.get("occlusion"))
    return write_toy_dataset(
        _dataset_dir(config), mc, block["n_shapes"],
        seed=derive_seed(config["seed"], "dataset"),
        n_views=block["n_views"], occlusion=occlusion,
    )


def _checkpoint_path(config: dict) -> str:
    return os.path.join(config["out_dir"], "model.ckpt")


def _loss_csv_path(config: dict) -> str:
    return os.path.join(config["out_dir"], "loss.csv")


def cmd_train(config: dict, jobs: int = 1) -> dict:
    mc = _model_config(config)
    model = init_flow_model(mc, seed=derive_seed(config["seed"], "model-init"))
    dataset, _ = load_toy_dataset(_dataset_dir(config), mc, model.embed)
    block = dict(config.get("train", {}))
    seed = block.pop("seed", derive_seed(config["seed"], "train"))
    if "betas" in block:
        block["betas"] = tuple(block["betas"])
    tc = TrainConfig(seed=seed, **block)
    model, losses = train(dataset, model, tc, log_every=max(1, tc.steps // 10))
    save_model(_checkpoint_path(config), model, {
        "seeds": {"root": config["seed"], "train": tc.seed},
        "train_config": {"lr": tc.lr, "cfg_drop": tc.cfg_drop, "batch": tc.batch,
                         "steps": tc.steps, "weight_decay": tc.weight_decay},
    })
    lines = ["step,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(losses)]
    _io.atomic_write_text(_loss_csv_path(config), "\n".join(lines) + "\n")
    return {"final_loss": float(losses[-100:].mean()), "steps": tc.steps}


def cmd_sample(config: dict, jobs: int = 1) -> dict:
    mc = _model_config(config)
    model = load_model(_checkpoint_path(config))
    block = config["sample"]
    out_dir = os.path.join(config["out_dir"], "samples")
    seed = config["seed"]

    view_lists, gt_grids, entries = [], [], []
    for i in range(block["count"]):
        shape_seed = derive_seed(seed, f"heldout-{i}")
        shape = build_toy_views(mc, shape_seed, n_views=block["views_per_sample"])
        views = []
        for v in range(len(shape.cameras)):
            occ = shape.occ_masks[v] if block["occluded"] else np.zeros_like(shape.obj_masks[v])
            views.append(make_view_condition(shape.images[v], shape.obj_masks[v],
                                             occ, mc, model.embed))
        view_lists.append(views)
        gt_grids.append(shape.grid)
        entries.append({"family": shape.family, "seed": shape_seed})

    sc = SampleConfig(n_steps=block["n_steps"], cfg_scale=block["cfg_scale"],
                      seed=derive_seed(seed, "sample"))
    latents = sample_batch(model, view_lists, sc)
    for i, lat in enumerate(latents):
        grid = decode_stage1(lat, mc.n_grid, block["threshold"])
        stem = f"sample_{i:04d}"
        _io.write_voxels(os.path.join(out_dir, f"{stem}.vox"), grid)
        _io.write_voxels(os.path.join(out_dir, f"{stem}_ref.vox"), gt_grids[i])
        if grid.any():
            _io.write_ply(os.path.join(out_dir, f"{stem}.ply"), voxels_to_points(grid))
        _io.write_ply(os.path.join(out_dir, f"{stem}_ref.ply"),
                      voxels_to_points(gt_grids[i]))
        entries[i].update({
            "grid": f"{stem}.vox", "ref_grid": f"{stem}_ref.vox",
            "cloud": f"{stem}.ply" if grid.any() else None,
            "ref_cloud": f"{stem}_ref.ply",
            "occupancy": int(grid.sum()),
        })
    manifest = {"count": block["count"], "entries": entries,
                "sample_seed": sc.seed, "cfg_scale": sc.cfg_scale,
                "n_steps": sc.n_steps}
    _io.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _load_cloud_dir(path: str, suffix: str) -> list:
    names = sorted(n for n in os.listdir(path) if n.endswith(suffix))
    return [_io.read_ply(os.path.join(path, n)) for n in names]


def cmd_eval(config: dict, jobs: int = 1) -> dict:
    block = config["eval"]
    sample_dir = os.path.join(config["out_dir"], "samples")
    if block["gen_dir"]:
        gen = _load_cloud_dir(block["gen_dir"], ".ply")
        ref = _load_cloud_dir(block["ref_dir"], ".ply")
    else:
        with open(os.path.join(sample_dir, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        gen, ref = [], []
        for entry in manifest["entries"]:
            if entry["cloud"] is None:
                continue  # decoded grid came out empty; drop the pair
            gen.append(_io.read_ply(os.path.join(sample_dir, entry["cloud"])))
            ref.append(_io.read_ply(os.path.join(sample_dir, entry["ref_cloud"])))
    if not gen:
        raise RuntimeError("no generated point clouds to evaluate")
    report = metric_report(gen, ref, k_points=block["k_points"])
    _io.write_json(os.path.join(config["out_dir"], "eval.json"), report)

    cov_pct = 100.0 * report["cov"]
    mmd_permille = 1000.0 * report["mmd"]
    table = [
        "Method                      COV(%)   MMD(permille)",
        f"{'occlusym (toy flow)':<26}  {cov_pct:6.2f}   {mmd_permille:12.4f}",
    ]
    _io.atomic_write_text(os.path.join(config["out_dir"], "eval_table.txt"),
                          "\n".join(table) + "\n")
    return report


# ---------------------------------------------------------------------------
# report


def _loss_curve_svg(steps, losses, width=640, height=400, margin=45) -> str:
    lo, hi = float(min(losses)), float(max(losses))
    if hi == lo:
        hi = lo + 1.0
    span_x = max(int(steps[-1]), 1)
    pts = []
    for s, l in zip(steps, losses):
        x = margin + (width - 2 * margin) * (s / span_x)
        y = height - margin - (height - 2 * margin) * ((l - lo) / (hi - lo))
        pts.append(f"{x:.2f},{y:.2f}")
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 30}" font-size="12">0</text>',
        f'<text x="{width - margin - 20}" y="{height - margin + 30}" '
        f'font-size="12">{span_x}</text>',
        f'<text x="4" y="{height - margin}" font-size="12">{lo:.4f}</text>',
        f'<text x="4" y="{margin}" font-size="12">{hi:.4f}</text>',
        f'<text x="{width // 2 - 30}" y="{height - 8}" font-size="12">step</text>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
        f'points="{" ".join(pts)}"/>',
        "</svg>",
    ]) + "\n"


def cmd_report(config: dict, jobs: int = 1) -> dict:
    out_dir = config["out_dir"]
    loss_csv = _loss_csv_path(config)
    eval_json = os.path.join(out_dir, "eval.json")
    missing = [p for p in (loss_csv, eval_json) if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"report inputs missing: {', '.join(missing)}")

    steps, losses = [], []
    with open(loss_csv, encoding="utf-8") as f:
        header = f.readline()
        for line in f:
            if line.strip():
                s, l = line.split(",")
                steps.append(int(s))
                losses.append(float(l))
    if not losses:
        raise ValueError(f"{loss_csv} has no loss rows")
    with open(eval_json, encoding="utf-8") as f:
        metrics = json.load(f)

    _io.atomic_write_text(os.path.join(out_dir, "loss_curve.svg"),
                          _loss_curve_svg(steps, losses))
    n_tail = min(100, len(losses))
    summary = [
        "# Run summary",
        "",
        f"- training steps: {len(losses)}",
        f"- first-loss: {json.dumps(losses[0])}",
        f"- final-{n_tail}-step mean loss: "
        f"{json.dumps(float(np.mean(losses[-n_tail:])))}",
        f"- coverage (COV): {json.dumps(metrics['cov'])}",
        f"- minimum matching distance (MMD): {json.dumps(metrics['mmd'])}",
        f"- paired chamfer distance: {json.dumps(metrics['cd'])}",
        f"- clouds evaluated: {metrics['n_gen']} generated vs "
        f"{metrics['n_ref']} reference",
        "",
        "![loss curve](loss_curve.svg)",
    ]
    _io.atomic_write_text(os.path.join(out_dir, "summary.md"),
                          "\n".join(summary) + "\n")
    return {"losses": len(losses), "metrics": metrics}


# ---------------------------------------------------------------------------


COMMANDS = {
    "gen-masks": cmd_gen_masks,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occlusym",
        description="occlusion-aware 3D reconstruction pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry "
                        "(dotted path, JSON value)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel worker bound for data generation")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        result = COMMANDS[args.command](config, jobs=args.jobs)
    except Exception as err:  # machine-readable error on stderr, nonzero exit
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "ok": True,
                      "summary_keys": sorted(result)[:8]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
