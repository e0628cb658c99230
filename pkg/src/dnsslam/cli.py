"""Command-line entry point: ``generate | run | eval | mesh``.

Configuration is a TOML file with one table per component::

    [dataset]  path, layout, max_frames, frames (synthetic frame count)
    [run]      preset ("toy" or "full"), seed, out, gt_pose
    [field]    FieldConfig fields
    [slam]     SlamConfig fields
    [loss]     LossWeights fields
    [eval]     stride, mesh_resolution, cull

Precedence is preset defaults < file values < command-line flags. Unknown
tables or keys are rejected. Every output directory receives the resolved
config (``config.toml``) and a ``VERSION`` stamp.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 tracking
diverged (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path

import tomli
import tomli_w
import torch

from . import __version__
from .data import (DatasetError, default_intrinsics, default_scene, generate_frames, load_dataset, read_tum,
                   scene_from_dict, toy_orbit, write_dump, write_tum)
from .eval import (ate_rmse, cull_unobserved, depth_l1, export_ply, extract_mesh, mesh_accuracy_completion,
                   miou, scene_mesh)
from .field import FieldConfig, SceneField
from .loss import LossWeights
from .slam import SlamConfig, run_slam

log = logging.getLogger("dnsslam")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    path: str = ""  # empty: synthesise the default orbit in memory
    layout: str = "synthetic-dump"
    max_frames: int = 0
    frames: int = 20


@dataclass
class RunSection:
    preset: str = "toy"
    seed: int = 0
    out: str = "out"
    gt_pose: bool = False
    threads: int = 0


@dataclass
class EvalSection:
    stride: int = 5
    mesh_resolution: int = 64
    cull: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = dc_field(default_factory=DatasetSection)
    run: RunSection = dc_field(default_factory=RunSection)
    field: dict = dc_field(default_factory=dict)
    slam: dict = dc_field(default_factory=dict)
    loss: dict = dc_field(default_factory=dict)
    eval: EvalSection = dc_field(default_factory=EvalSection)

    def build(self) -> tuple[FieldConfig, SlamConfig, LossWeights]:
        """Instantiate component configs from the preset plus overrides."""
        toy = self.run.preset == "toy"
        slam = {**self.slam, "seed": self.run.seed}
        fld = {"seed": self.run.seed % 2**32, **self.field}
        try:
            if toy:
                return FieldConfig.toy(**fld), SlamConfig.toy(**slam), LossWeights.toy(**self.loss)
            return FieldConfig(**fld), SlamConfig(**slam), LossWeights(**self.loss)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def resolved(self) -> dict:
        fc, sc, lw = self.build()
        out = {"dataset": asdict(self.dataset), "run": asdict(self.run), "field": asdict(fc), "slam": asdict(sc),
               "loss": asdict(lw), "eval": asdict(self.eval)}
        return _drop_none(out)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _check_keys(name: str, values: dict, allowed) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {unknown}")


def parse_config(data: dict) -> RunConfig:
    """Validate a parsed TOML document into a RunConfig."""
    cfg = RunConfig()
    _check_keys("top level", data, [f.name for f in fields(RunConfig)])
    for name, cls in (("dataset", DatasetSection), ("run", RunSection), ("eval", EvalSection)):
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        _check_keys(name, section, [f.name for f in fields(cls)])
        try:
            setattr(cfg, name, cls(**{**asdict(getattr(cfg, name)), **section}))
        except TypeError as e:
            raise ConfigError(str(e)) from e
    for name, cls in (("field", FieldConfig), ("slam", SlamConfig), ("loss", LossWeights)):
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        _check_keys(name, section, [f.name for f in fields(cls)])
        setattr(cfg, name, dict(section))
    if cfg.run.preset not in ("toy", "full"):
        raise ConfigError(f"[run] preset must be 'toy' or 'full', got {cfg.run.preset!r}")
    if cfg.run.seed < 0 or cfg.run.seed >= 2**64:
        raise ConfigError("[run] seed must be an unsigned 64-bit integer")
    cfg.build()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(data)


def write_stamp(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(tomli_w.dumps(resolved))
    (out / "VERSION").write_text(f"dnsslam {__version__}\ntorch {torch.__version__}\n")


def _synthetic_frames(n: int):
    scene, K = default_scene(), default_intrinsics()
    return generate_frames(scene, toy_orbit(n), K), K, scene


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    frames, K, scene = _synthetic_frames(args.frames)
    write_dump(frames, K, out, scene=scene)
    write_stamp(out, {"generate": {"frames": args.frames, "seed": args.seed}})
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = args.out
    if args.gt_pose:
        cfg.run.gt_pose = True
    if args.threads is not None:
        cfg.run.threads = args.threads
    field_cfg, slam_cfg, weights = cfg.build()
    if cfg.run.threads:
        torch.set_num_threads(cfg.run.threads)
    out = Path(cfg.run.out)
    write_stamp(out, cfg.resolved())
    if cfg.dataset.path:
        ds = load_dataset(cfg.dataset.path, cfg.dataset.layout, cfg.dataset.max_frames or None)
        frames, K = ds.frames, ds.K
    else:
        frames, K, _ = _synthetic_frames(cfg.dataset.frames)
    res = run_slam(frames, K, slam_cfg, field_cfg, weights, gt_pose_mode=cfg.run.gt_pose,
                   diagnostics_path=out / "diagnostics.csv", out_dir=out, loss_csv=out / "losses.csv")
    write_tum(out / "traj_est.txt", [t for t, _ in res.trajectory], [p for _, p in res.trajectory])
    meta = {"loss": _drop_none(asdict(weights)), "sampling": {"n_surface": slam_cfg.n_surface,
            "n_free": slam_cfg.n_free, "near": slam_cfg.near}, "seed": cfg.run.seed}
    res.field.save(out / "checkpoint.bin", extra_meta=meta)
    if res.flagged_frames:
        log.error("tracking diverged on frames %s", res.flagged_frames)
        return EXIT_DIVERGED
    print(f"wrote trajectory and checkpoint to {out}")
    return EXIT_OK


def _estimated_poses(ckpt_dir: Path):
    est_file = ckpt_dir / "traj_est.txt"
    return [p for _, p in read_tum(est_file)] if est_file.exists() else None


def cmd_eval(args) -> int:
    field, meta = SceneField.load(args.checkpoint)
    field.eval()
    ds = load_dataset(args.dataset, args.layout)
    frames, K = ds.frames, ds.K
    ckpt_dir = Path(args.checkpoint).parent
    est = _estimated_poses(ckpt_dir)
    gt = [p for _, p in ds.gt_trajectory] if ds.gt_trajectory else None
    poses = gt or est
    if poses is None:
        raise DatasetError("no poses available: need traj_gt.txt in the dataset or traj_est.txt beside the checkpoint")
    tr = meta.get("loss", {}).get("tr", 0.1)
    kw = dict(tr=tr, **meta.get("sampling", {}))
    rows = []
    if gt is not None and est is not None and len(est) == len(gt):
        rows.append(("ate_rmse_cm", f"{ate_rmse(est, gt):.6f}"))
    else:
        rows.append(("ate_rmse_cm", "absent"))
    rows.append(("depth_l1_cm", f"{depth_l1(field, frames, K, stride=args.stride, poses=poses, **kw):.6f}"))
    rows.append(("miou_pct", f"{miou(field, frames, K, stride=args.stride, poses=poses, **kw):.6f}"))
    # the fine render picks heads from the gt labels; this variant reads none
    rows.append(("miou_label_free_pct",
                 f"{miou(field, frames, K, stride=args.stride, poses=poses, mode='merged', **kw):.6f}"))
    scene_file = Path(args.dataset) / "scene.json"
    if scene_file.exists():
        import json

        scene = scene_from_dict(json.loads(scene_file.read_text()))
        merged = extract_mesh(field, args.resolution, "merged")
        oracle = scene_mesh(scene)
        if not args.no_cull:
            merged = cull_unobserved(merged, frames, poses, K, tr)
            oracle = cull_unobserved(oracle, frames, poses, K, tr)
        acc, comp, ratio = mesh_accuracy_completion(merged, oracle, n_samples=args.mesh_samples)
        rows += [("accuracy_cm", f"{acc:.6f}"), ("completion_cm", f"{comp:.6f}"),
                 ("completion_ratio_pct", f"{ratio:.6f}"), ("culled", str(not args.no_cull).lower())]
    else:
        rows += [(k, "absent") for k in ("accuracy_cm", "completion_cm", "completion_ratio_pct")]
    out = Path(args.out) if args.out else ckpt_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    field, _ = SceneField.load(args.checkpoint)
    field.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meshes = extract_mesh(field, args.resolution, args.mode)
    if args.mode == "merged":
        meshes = {"merged": meshes}
    for key, mesh in meshes.items():
        name = f"class_{key:03d}.ply" if isinstance(key, int) else f"{key}.ply"
        export_ply(mesh, out / name)
    write_stamp(out, {"mesh": {"checkpoint": str(args.checkpoint), "resolution": args.resolution,
                               "mode": args.mode}})
    print(f"wrote {len(meshes)} mesh file(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnsslam", description="Semantic neural implicit RGB-D SLAM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run tracking and mapping")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--gt-pose", action="store_true", help="use ground-truth poses and skip tracking")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compute metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--layout", default="synthetic-dump")
    e.add_argument("--stride", type=int, default=5)
    e.add_argument("--resolution", type=int, default=64)
    e.add_argument("--mesh-samples", type=int, default=100_000)
    e.add_argument("--no-cull", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mesh", help="extract meshes from a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--mode", choices=["per-class", "merged"], default="per-class")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DatasetError, OSError, ValueError, RuntimeError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
