"""Command line interface: mvhuman {gen-data, train, sample, refine, eval, bench}.

Every command is reproducible from (config, seed) alone; outputs carry the
config hash. On failure a machine-parseable `MVHUMAN-ERROR {json}` line is
written to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import costs, dataset, metrics
from .body import BodyParams
from .camera import CameraPose, fit_scale, orbit_cameras
from .config import ExperimentConfig, load_config, save_config
from .errors import CheckpointError, ConfigError, MVHumanError
from .pipeline import (GenerationInputs, ModelGenerator, build_body,
                       build_models, build_schedule, load_model_checkpoint,
                       save_model_checkpoint)
from .refine import (OracleKeypointDetector, RefinementTrace, iterative_refine,
                     joint_position_error, render_observations)
from .training import (NormalizationStats, parameter_checksums, train_stage1,
                       train_stage2)

DATA_DIR_ENV = "MVHUMAN_DATA_DIR"


def _data_root(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _save_image(path: Path, img: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(dataset.image_to_uint8(img)).save(path, format="PNG")


def _contact_sheet(images: list[torch.Tensor], path: Path, cols: int = 4) -> None:
    rows = math.ceil(len(images) / cols)
    h, w = images[0].shape[:2]
    sheet = torch.ones(rows * h, cols * w, 3)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    _save_image(path, sheet)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    body = build_body(config)
    root = _data_root(args)
    for split, seeds in (("train", config.data.train_seeds),
                         ("test", config.data.test_seeds)):
        manifest = dataset.write_dataset(
            root / split, list(seeds), config.data.n_views,
            config.data.resolution, config.data.elevation_seed,
            config_hash=config.config_hash(), body=body)
        print(f"wrote {split}: {len(manifest['seeds'])} subjects "
              f"at {root / split}")
    return 0


def _load_training_setup(config: ExperimentConfig, root: Path):
    train_dir = root / "train"
    if not (train_dir / "manifest.json").exists():
        raise ConfigError(f"missing dataset at {train_dir}; run gen-data first")
    manifest, subjects = dataset.load_dataset(train_dir)
    if manifest.get("config_hash") and manifest["config_hash"] != config.config_hash():
        print(f"note: dataset config hash {manifest['config_hash']} differs "
              f"from current config {config.config_hash()}", file=sys.stderr)
    stats = dataset.compute_stats(subjects)
    samples = dataset.build_training_samples(subjects, stats,
                                             config.model.seg_channels)
    return subjects, stats, samples


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, stats, samples = _load_training_setup(config, _data_root(args))
    schedule = build_schedule(config)
    tc = config.train
    seed = tc.seed if args.seed is None else args.seed

    if args.resume:
        model, ref_model, stats, schedule, ckpt_config, manifest = \
            load_model_checkpoint(args.resume)
        if manifest["config_hash"] != config.config_hash():
            raise CheckpointError(
                f"resume config hash {manifest['config_hash']} != "
                f"current {config.config_hash()}")
        curve1 = []
    else:
        model, ref_model = build_models(config, seed=seed)
        curve1 = train_stage1(model, ref_model, samples, schedule,
                              steps=tc.stage1_steps, batch_size=tc.stage1_batch,
                              lr=tc.stage1_lr, seed=seed,
                              dropout_ratio=tc.dropout_ratio)
        save_model_checkpoint(out / "stage1.mvhd", model, ref_model, stats,
                              config, stage=1, extra={"seed": seed})

    pre = parameter_checksums(model)
    curve2 = train_stage2(model, ref_model, samples, schedule,
                          steps=tc.stage2_steps, batch_size=tc.stage2_batch,
                          lr=tc.stage2_lr, seed=seed + 1,
                          dropout_ratio=tc.dropout_ratio)
    post = parameter_checksums(model)
    mv_names = model.multiview_parameter_names()
    frozen_ok = all(pre[n] == post[n] for n in pre if n not in mv_names)

    save_model_checkpoint(out / "final.mvhd", model, ref_model, stats, config,
                          stage=2, extra={"seed": seed, "frozen_ok": frozen_ok})
    with open(out / "loss_curve.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["stage", "step", "loss"])
        writer.writeheader()
        writer.writerows(curve1 + curve2)
    save_config(config, out / "config.yaml")
    first = (curve1 or curve2)[0]["loss"]
    last = curve2[-1]["loss"]
    print(f"training done: first loss {first:.4f}, final loss {last:.4f}, "
          f"stage-2 freeze ok: {frozen_ok}")
    return 0


def _generator_for_subject(ckpt_path: str, root: Path, subject_seed: int, split: str):
    model, ref_model, stats, schedule, config, manifest = load_model_checkpoint(ckpt_path)
    body = build_body(config)
    sub_dir = root / split / f"subject_{subject_seed:04d}"
    if not sub_dir.exists():
        raise ConfigError(f"subject {subject_seed} not found under {root / split}")
    loaded = dataset.load_subject(sub_dir)
    cams = [v.camera for v in loaded.views]
    inputs = GenerationInputs(ref_rgb=loaded.reference.rgb,
                              ref_normal=loaded.reference.normal,
                              ref_camera=loaded.reference.camera,
                              target_cams=cams)
    gen = ModelGenerator(model, ref_model, stats, schedule, body, inputs,
                         config.model.seg_channels)
    return gen, body, loaded, config


def cmd_sample(args) -> int:
    root = _data_root(args)
    gen, body, loaded, config = _generator_for_subject(
        args.checkpoint, root, args.subject_seed, args.split)
    if args.n is not None and args.n != config.model.n_views:
        raise ConfigError(
            f"model was trained for N={config.model.n_views}, got N={args.n}")
    torch.manual_seed(args.seed)
    rgb, normal = gen.generate(loaded.subject.params, args.w, args.steps, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, view in enumerate(loaded.views):
        tag = f"az{view.camera.azimuth:06.2f}"
        _save_image(out / f"{tag}_rgb.png", rgb[i])
        _save_image(out / f"{tag}_normal.png", normal[i])
        names.append(tag)
    _contact_sheet([*rgb, *normal], out / "contact_sheet.png",
                   cols=len(loaded.views))
    _write_json(out / "sample_manifest.json", {
        "config_hash": config.config_hash(), "seed": args.seed, "w": args.w,
        "steps": args.steps, "subject_seed": args.subject_seed, "views": names})
    print(f"wrote {2 * len(names)} view images + contact sheet to {out}")
    return 0


def cmd_refine(args) -> int:
    root = _data_root(args)
    gen, body, loaded, config = _generator_for_subject(
        args.checkpoint, root, args.subject_seed, args.split)
    cams = [v.camera for v in loaded.views]
    cfg = config.refine
    resolution = config.data.resolution
    gt_params = loaded.subject.params

    detector = OracleKeypointDetector(body, gt_params, cams, resolution)
    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    if args.init == "noisy-gt":
        pose = gt_params.pose.clone()
        joints = rng.choice(body.num_joints, size=3, replace=False)
        pose[joints] += torch.tensor(rng.normal(0.0, 0.1, size=(3, 3)),
                                     dtype=pose.dtype)
        init = BodyParams(pose, gt_params.shape.clone())
    else:
        init = body.zero_params()

    generator = gen
    if args.mock_generator:
        generator = MockGroundTruthGenerator(body, gt_params, cams, resolution,
                                             loaded.subject.part_colors)

    images, refined, trace = iterative_refine(
        generator, body, init, cams, cfg, detector=detector,
        resolution=resolution, seed=args.seed, gt_params=gt_params)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(loaded.views):
        tag = f"az{view.camera.azimuth:06.2f}"
        _save_image(out / f"{tag}_rgb.png", images[0][i])
        _save_image(out / f"{tag}_normal.png", images[1][i])
    with open(out / "trace.jsonl", "w") as f:
        for record in trace.records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _write_json(out / "refined_params.json", refined.to_dict())
    _write_json(out / "refine_manifest.json", {
        "config_hash": config.config_hash(), "seed": args.seed,
        "subject_seed": args.subject_seed,
        "initial_joint_error": joint_position_error(body, init, gt_params),
        "final_joint_error": joint_position_error(body, refined, gt_params)})
    print(f"refined subject {args.subject_seed}: "
          f"joint error {joint_position_error(body, init, gt_params):.4f} -> "
          f"{joint_position_error(body, refined, gt_params):.4f}")
    return 0


class MockGroundTruthGenerator:
    """Test harness generator emitting ground-truth renders regardless of params."""

    def __init__(self, body, gt_params, cams, resolution, part_colors):
        from .render import render_rgb
        with torch.no_grad():
            mesh = body.build_mesh(gt_params)
            det = OracleKeypointDetector(body, gt_params, cams, resolution)
            obs = render_observations(body, gt_params, cams, resolution, det)
            self._rgb = torch.stack([
                render_rgb(mesh, cam, resolution, part_colors) for cam in cams])
            self._normal = obs.normals

    def generate(self, params, w, steps, seed):
        return self._rgb, self._normal


def cmd_eval(args) -> int:
    report = metrics.evaluate_directories(Path(args.generated), Path(args.reference))
    for name, entry in sorted(report.per_view.items()):
        print(f"{name}: psnr {entry['psnr']:.2f} dB, ssim {entry['ssim']:.4f}")
    for split, agg in report.aggregates.items():
        print(f"[{split}] psnr {agg['psnr']:.2f} dB, ssim {agg['ssim']:.4f} "
              f"({agg['n_views']} views)")
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return 0


def cmd_bench(args) -> int:
    view_counts = [4, 8, 12, 16, 20]
    rows = costs.scaling_report(view_counts, hw=args.hw, channels=args.channels)
    measured_n = rows[-1].n_views
    measured_dense = costs.measure_dense_macs(measured_n, args.hw, args.channels)
    measured_hybrid = costs.measure_hybrid_macs(measured_n, args.hw, args.channels,
                                                offsets=[-2, 2])
    print(f"{'N':>4} {'dense MACs':>14} {'hybrid MACs':>14} {'ratio':>8} {'mem ratio':>10}")
    for row in rows:
        print(f"{row.n_views:>4} {row.dense_macs:>14} {row.hybrid_macs:>14} "
              f"{row.mac_ratio:>8.2f} {row.memory_ratio:>10.2f}")
    budget = costs.logits_elements_hybrid(measured_n, args.hw)
    dense_fit = costs.max_dense_views_within(budget, args.hw)
    print(f"dense 3D fits only N={dense_fit} views in the logit memory the "
          f"hybrid scheme uses at N={measured_n}")

    ratios = [row.mac_ratio for row in rows]
    monotone = all(b > a for a, b in zip(ratios, ratios[1:]))
    measured_ratio = measured_dense / measured_hybrid
    formula_ratio = rows[-1].mac_ratio
    rel_err = abs(measured_ratio - formula_ratio) / formula_ratio
    print(f"measured dense/hybrid MAC ratio at N={measured_n}: "
          f"{measured_ratio:.2f} (closed form {formula_ratio:.2f}, "
          f"rel err {rel_err:.3%}); ratio monotone in N: {monotone}")
    if not monotone or rel_err > 0.10:
        raise MVHumanError("cost scaling check failed")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"rows": [vars(r) for r in rows],
                   "measured_ratio": measured_ratio,
                   "formula_ratio": formula_ratio,
                   "dense_views_in_hybrid_budget": dense_fit,
                   "hw": args.hw, "channels": args.channels}
        _write_json(out / "bench.json", payload)
        _plot_bench(rows, out / "bench.png")
        print(f"wrote bench report to {out}")
    return 0


def _plot_bench(rows, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = [r.n_views for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ns, [r.dense_macs for r in rows], "o-", label="dense 3D")
    ax.plot(ns, [r.hybrid_macs for r in rows], "s-", label="hybrid 1D+3D")
    ax.set_xlabel("views N")
    ax.set_ylabel("attention MACs")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvhuman",
                                     description="multi-view human generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="experiment config YAML")
        p.add_argument("--data", default=None,
                       help=f"data root (default $${DATA_DIR_ENV} or ./data)")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    add_common(p)

    p = sub.add_parser("train", help="two-stage training")
    add_common(p)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="stage-1 checkpoint to resume from")

    p = sub.add_parser("sample", help="generate novel views for a subject")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject-seed", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--n", type=int, default=None, help="view count (must match model)")
    p.add_argument("--w", type=float, default=1.0, help="guidance scale")
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("refine", help="iterative generation + body refinement")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject-seed", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--init", default="noisy-gt", choices=["noisy-gt", "rest"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mock-generator", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="PSNR/SSIM against ground-truth renders")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", default=None, help="report JSON path")

    p = sub.add_parser("bench", help="attention cost scaling report")
    p.add_argument("--hw", type=int, default=64, help="pixels per view (H*W)")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--out", default=None, help="report output directory")

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MVHumanError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(f"MVHUMAN-ERROR {json.dumps(payload)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
