"""Command line pipeline driver.

Subcommands mirror the pipeline stages:

    gen-phantom   write paired MR / X-ray phantom volumes
    project       cone-beam project both volumes over a trajectory
    train         fit a generator (unet | resnet | crn; l1 | perceptual)
    synth         synthesize X-ray projections from a checkpoint
    eval          synthesize (or reuse) and score with MSE/SSIM/PSNR

Every subcommand accepts --config pointing at a JSON pipeline config;
explicit flags override config values. All randomness is funneled
through per-subcommand seeds, so identical invocations produce
identical outputs.

Exit codes: 0 success, 1 usage, 2 data/IO, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .containers import load_projection, load_volume, save_projection, save_volume
from .errors import (
    ConfigurationError,
    GeometryError,
    IntegrityError,
    LoadError,
    NumericalError,
    ParameterError,
    ProjSynthError,
    UndefinedMetricError,
)
from .generators import CRNConfig, ResNetGenConfig, UNetConfig, build_model, forward
from .metrics import SsimConfig, evaluate_set
from .objectives import EvaluationNetwork, LossConfig
from .phantom import PhantomSpec, default_head_spec, generate_head_phantom
from .phantom import DEFAULT_EXTENT_MM
from .projector import forward_project, make_circular_trajectory
from .training import TrainConfig, load_checkpoint_model, load_dataset, train, write_history_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Canonical pipeline-config schema: section -> known keys. Values are used
# as subcommand defaults; flags always win.
CONFIG_SCHEMA = {
    "phantom": {"size", "spacing_mm", "seed", "supersample", "spec_file"},
    "geometry": {
        "n_views", "angular_range_deg", "start_deg", "sid_mm", "sdd_mm",
        "detector_size", "detector_spacing_mm", "step_mm",
    },
    "model": {"arch", "base_channels", "depth", "blocks", "modules"},
    "train": {"epochs", "batch_size", "learning_rate", "seed", "checkpoint_every"},
    "loss": {"kind", "l1_reduction", "eval_net_seed", "eval_net_width_scale", "eval_net_weights"},
    "metrics": {"window", "window_size", "gaussian_sigma", "dynamic_range"},
}


def load_pipeline_config(path):
    """Parse and validate a pipeline config file; unknown keys are errors."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"malformed config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError("pipeline config must be a JSON object")
    unknown_sections = set(raw) - set(CONFIG_SCHEMA)
    if unknown_sections:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown_sections)}")
    for section, entries in raw.items():
        if not isinstance(entries, dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        unknown = set(entries) - CONFIG_SCHEMA[section]
        if unknown:
            raise ConfigurationError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    return raw


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to this tool's exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _cfg(config, section, key, flag_value, default):
    if flag_value is not None:
        return flag_value
    return config.get(section, {}).get(key, default)


# ---------------------------------------------------------------------------
# gen-phantom
# ---------------------------------------------------------------------------

def cmd_gen_phantom(args):
    config = load_pipeline_config(args.config) if args.config else {}
    size = int(_cfg(config, "phantom", "size", args.size, 64))
    if size < 1:
        raise ParameterError(f"--size must be >= 1, got {size}")
    spacing = _cfg(config, "phantom", "spacing_mm", args.spacing, None)
    spacing = float(spacing) if spacing is not None else DEFAULT_EXTENT_MM / size
    seed = int(_cfg(config, "phantom", "seed", args.seed, 0))
    supersample = int(_cfg(config, "phantom", "supersample", args.supersample, 2))
    spec_file = _cfg(config, "phantom", "spec_file", args.spec, None)
    spec = (
        PhantomSpec.from_json(Path(spec_file).read_text())
        if spec_file
        else default_head_spec(seed=seed)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mr, xray = generate_head_phantom((size,) * 3, (spacing,) * 3, spec, supersample=supersample)
    save_volume(out / "mr", mr)
    save_volume(out / "xray", xray)
    (out / "phantom_spec.json").write_text(spec.to_json())
    print(f"wrote {out}/mr.json+.raw and {out}/xray.json+.raw ({size}^3 at {spacing:.3f} mm)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------

def cmd_project(args):
    config = load_pipeline_config(args.config) if args.config else {}
    n_views = int(_cfg(config, "geometry", "n_views", args.views, 64))
    if n_views < 1:
        raise ParameterError(f"--views must be >= 1, got {n_views}")
    angular_range = float(_cfg(config, "geometry", "angular_range_deg", args.range, 360.0))
    start_deg = float(_cfg(config, "geometry", "start_deg", args.start, 0.0))
    sid = float(_cfg(config, "geometry", "sid_mm", args.sid, 750.0))
    sdd = float(_cfg(config, "geometry", "sdd_mm", args.sdd, 1200.0))
    det_size = int(_cfg(config, "geometry", "detector_size", args.det, 512))
    det_spacing = _cfg(config, "geometry", "detector_spacing_mm", args.det_spacing, None)
    if det_spacing is None:
        # cover the default phantom extent at this magnification
        det_spacing = DEFAULT_EXTENT_MM * (sdd / sid) * 1.1 / det_size
    det_spacing = float(det_spacing)
    step_mm = _cfg(config, "geometry", "step_mm", args.step, None)
    step_mm = float(step_mm) if step_mm is not None else None

    if (args.train is None) != (args.test is None):
        raise ParameterError("--train and --test must be given together")

    volumes_dir = Path(args.volumes)
    mr_vol = load_volume(volumes_dir / "mr.json")
    xray_vol = load_volume(volumes_dir / "xray.json")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    views = make_circular_trajectory(
        n_views, angular_range, sid, sdd, (det_size, det_size, det_spacing, det_spacing),
        start_deg=start_deg,
    )
    pairs = []
    for i, geo in enumerate(views):
        view_id = f"view_{i:04d}"
        mr_proj = forward_project(mr_vol, geo, step_mm=step_mm)
        xray_proj = forward_project(xray_vol, geo, step_mm=step_mm)
        save_projection(out / f"mr_{i:04d}", mr_proj, pgm=args.pgm)
        save_projection(out / f"xray_{i:04d}", xray_proj, pgm=args.pgm)
        pairs.append(
            {
                "id": view_id,
                "angle_deg": geo.angle_deg,
                "mr": f"mr_{i:04d}.json",
                "xray": f"xray_{i:04d}.json",
            }
        )
    manifest = {
        "format_version": 1,
        "detector": {"size": det_size, "spacing_mm": det_spacing},
        "trajectory": {
            "n_views": n_views, "angular_range_deg": angular_range, "start_deg": start_deg,
            "sid_mm": sid, "sdd_mm": sdd,
        },
        "pairs": pairs,
    }
    if args.train is not None:
        ids = [p["id"] for p in pairs]
        order = np.random.default_rng(args.seed).permutation(len(ids))
        n_train, n_test = int(args.train), int(args.test)
        if n_train + n_test > len(ids):
            raise ParameterError(
                f"cannot split {len(ids)} views into {n_train} train + {n_test} test"
            )
        manifest["split"] = {
            "seed": args.seed,
            "train": [ids[k] for k in order[:n_train]],
            "test": [ids[k] for k in order[n_train : n_train + n_test]],
        }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    print(f"wrote {2 * n_views} projections + manifest to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_config(arch, args, config, sample_dims):
    base_channels = _cfg(config, "model", "base_channels", args.base_channels, None)
    if arch == "unet":
        kwargs = {}
        if base_channels is not None:
            kwargs["base_channels"] = int(base_channels)
        depth = _cfg(config, "model", "depth", args.depth, None)
        if depth is not None:
            kwargs["depth"] = int(depth)
            # the decoder has depth-1 levels; keep the default cadence valid
            kwargs["dropout_levels"] = min(3, max(int(depth) - 1, 0))
        return UNetConfig(**kwargs)
    if arch == "resnet":
        kwargs = {}
        blocks = _cfg(config, "model", "blocks", args.blocks, None)
        if blocks is not None:
            kwargs["n_residual_blocks"] = int(blocks)
        if base_channels is not None:
            c = int(base_channels)
            kwargs["stem_channels"] = c
            kwargs["down_channels"] = (2 * c, 4 * c)
        return ResNetGenConfig(**kwargs)
    # crn: derive the coarsest scale from the data resolution
    modules = _cfg(config, "model", "modules", args.modules, None)
    modules = int(modules) if modules is not None else 8
    nu, nv = sample_dims
    factor = 1 << (modules - 1)
    if nv % factor or nu % factor:
        raise ConfigurationError(
            f"{modules} refinement modules need input divisible by {factor}, got {nv}x{nu}"
        )
    coarse_h, coarse_w = nv // factor, nu // factor
    if coarse_h < 1 or coarse_w < 1:
        raise ConfigurationError(f"input {nv}x{nu} too small for {modules} modules")
    return CRNConfig(n_modules=modules, coarse_h=coarse_h, coarse_w=coarse_w)


def _loss_setup(args, config):
    kind = _cfg(config, "loss", "kind", args.loss, "l1")
    l1_reduction = _cfg(config, "loss", "l1_reduction", None, "sum")
    loss_cfg = LossConfig(kind=kind, l1_reduction=l1_reduction)
    eval_net = None
    if kind == "perceptual":
        weights = _cfg(config, "loss", "eval_net_weights", args.eval_net_weights, None)
        if weights:
            eval_net = EvaluationNetwork.load(weights)
        else:
            seed = int(_cfg(config, "loss", "eval_net_seed", None, 1234))
            scale = float(_cfg(config, "loss", "eval_net_width_scale", None, 1.0))
            eval_net = EvaluationNetwork.random(seed=seed, width_scale=scale)
    return loss_cfg, eval_net


def cmd_train(args):
    config = load_pipeline_config(args.config) if args.config else {}
    data_dir = Path(args.data)
    manifest_path = data_dir / "manifest.json"
    try:
        train_set = load_dataset(manifest_path, subset="train")
    except LoadError:
        train_set = load_dataset(manifest_path)

    arch = _cfg(config, "model", "arch", args.arch, "unet")
    model_cfg = _model_config(arch, args, config, train_set[0].mr.dims)
    seed = int(_cfg(config, "train", "seed", args.seed, 0))
    model = build_model(arch, model_cfg, rng_seed=seed)

    cfg = TrainConfig(
        epochs=int(_cfg(config, "train", "epochs", args.epochs, 100)),
        batch_size=int(_cfg(config, "train", "batch_size", args.batch, 1)),
        learning_rate=float(_cfg(config, "train", "learning_rate", args.lr, 0.004)),
        seed=seed,
        checkpoint_every=int(_cfg(config, "train", "checkpoint_every", args.checkpoint_every, 0)),
    )
    loss_cfg, eval_net = _loss_setup(args, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(
        model, train_set, cfg, loss_cfg, eval_net=eval_net, out_dir=out,
        resume_from=args.resume_from,
    )
    write_history_csv(history, out / "history.csv")
    last = f"{history[-1]:.6g}" if history else "n/a"
    print(f"trained {arch} ({loss_cfg.kind}) for {cfg.epochs} epochs; final mean loss {last}")
    print(f"checkpoint at {out}/ckpt_final.*, history at {out}/history.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / eval
# ---------------------------------------------------------------------------

def _load_eval_pairs(data_dir, subset):
    manifest_path = Path(data_dir) / "manifest.json"
    if subset != "all":
        try:
            return load_dataset(manifest_path, subset=subset)
        except LoadError:
            if subset == "test":  # no recorded split: fall back to everything
                return load_dataset(manifest_path)
            raise
    return load_dataset(manifest_path)


def _synthesize(model, pairs, out, pgm=True):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for pair in pairs:
        img = forward(model, pair.mr, training=False)
        save_projection(out / f"synth_{pair.view_id}", img, pgm=pgm)
        files[pair.view_id] = out / f"synth_{pair.view_id}.json"
    return files


def cmd_synth(args):
    pairs = _load_eval_pairs(args.data, args.subset)
    model, _ = load_checkpoint_model(args.ckpt)
    _synthesize(model, pairs, args.out, pgm=True)
    print(f"synthesized {len(pairs)} projections into {args.out}")
    return EXIT_OK


def cmd_eval(args):
    config = load_pipeline_config(args.config) if args.config else {}
    if (args.ckpt is None) == (args.synth_dir is None):
        raise ParameterError("eval needs exactly one of --ckpt or --synth-dir")
    pairs = _load_eval_pairs(args.data, args.subset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.ckpt is not None:
        model, _ = load_checkpoint_model(args.ckpt)
        synth_files = _synthesize(model, pairs, out, pgm=True)
    else:
        synth_files = {
            p.view_id: Path(args.synth_dir) / f"synth_{p.view_id}.json" for p in pairs
        }

    ssim_cfg = SsimConfig(
        window=_cfg(config, "metrics", "window", None, "gaussian"),
        window_size=int(_cfg(config, "metrics", "window_size", None, 11)),
        gaussian_sigma=float(_cfg(config, "metrics", "gaussian_sigma", None, 1.5)),
        dynamic_range=float(_cfg(config, "metrics", "dynamic_range", None, 2.0)),
    )
    image_pairs = []
    ids = []
    for pair in pairs:
        synth = load_projection(synth_files[pair.view_id])
        image_pairs.append((pair.xray, synth))
        ids.append(pair.view_id)
    report = evaluate_set(image_pairs, ssim_cfg, ids=ids)
    (out / "report.json").write_text(report.to_json())
    report.write_csv(out / "report.csv")
    agg = report.aggregates
    print(
        f"evaluated {len(ids)} pairs: "
        f"MSE {agg['mse']['mean']:.4g}, SSIM {agg['ssim']['mean']:.4g}, "
        f"PSNR(paper) {agg['psnr_paper']['mean'] if agg['psnr_paper']['mean'] is not None else 'undefined'}"
    )
    print(f"report at {out}/report.json and {out}/report.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="projsynth", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write paired MR/X-ray phantom volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, help="cubic volume size in voxels (default 64)")
    p.add_argument("--spacing", type=float, help="voxel spacing in mm (default: 220/size)")
    p.add_argument("--seed", type=int, help="jitter seed for the default head spec")
    p.add_argument("--supersample", type=int, help="sub-centers per voxel axis (default 2)")
    p.add_argument("--spec", help="PhantomSpec JSON file (overrides the default head)")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("project", help="cone-beam project the phantom volumes")
    p.add_argument("--volumes", required=True, help="directory with mr.json / xray.json")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--views", type=int, help="number of views (default 64)")
    p.add_argument("--range", type=float, help="angular range in degrees (default 360)")
    p.add_argument("--start", type=float, help="first angulation in degrees (default 0)")
    p.add_argument("--sid", type=float, help="source-isocenter distance mm (default 750)")
    p.add_argument("--sdd", type=float, help="source-detector distance mm (default 1200)")
    p.add_argument("--det", type=int, help="detector size in pixels (default 512)")
    p.add_argument("--det-spacing", type=float, help="detector pixel pitch mm")
    p.add_argument("--step", type=float, help="ray sampling step mm (default: spacing/2)")
    p.add_argument("--train", type=int, help="record a train split of this size")
    p.add_argument("--test", type=int, help="record a test split of this size")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed")
    p.add_argument("--pgm", action="store_true", help="also write 16-bit PGM previews")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--out", required=True, help="output directory for checkpoints/history")
    p.add_argument("--arch", choices=["unet", "resnet", "crn"], help="generator architecture")
    p.add_argument("--loss", choices=["l1", "perceptual"], help="objective (default l1)")
    p.add_argument("--epochs", type=int, help="training epochs (default 100)")
    p.add_argument("--lr", type=float, help="ADAM learning rate (default 0.004)")
    p.add_argument("--batch", type=int, help="batch size (default 1)")
    p.add_argument("--seed", type=int, help="seed for init/shuffle/dropout (default 0)")
    p.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints")
    p.add_argument("--base-channels", type=int, help="unet base / resnet stem width")
    p.add_argument("--depth", type=int, help="unet resolution levels")
    p.add_argument("--blocks", type=int, help="resnet residual blocks (default 9)")
    p.add_argument("--modules", type=int, help="crn refinement modules (default 8)")
    p.add_argument("--eval-net-weights", help="weights container for the evaluation network")
    p.add_argument("--resume-from", help="checkpoint prefix to resume from")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize X-ray projections from a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint prefix (e.g. runs/ckpt_final)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subset", choices=["train", "test", "all"], default="test")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="synthesize (or reuse) and score projections")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ckpt", help="checkpoint prefix to synthesize from")
    p.add_argument("--synth-dir", help="directory with pre-synthesized synth_<id>.json")
    p.add_argument("--subset", choices=["train", "test", "all"], default="test")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # argparse --help exits 0, usage errors exit 1
        return e.code if e.code is not None else EXIT_OK
    except (ParameterError, ConfigurationError) as e:
        print(f"projsynth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, IntegrityError, FileNotFoundError, OSError, json.JSONDecodeError) as e:
        print(f"projsynth: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, UndefinedMetricError, GeometryError) as e:
        print(f"projsynth: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ProjSynthError as e:
        print(f"projsynth: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
