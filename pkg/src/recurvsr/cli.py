"""Command-line entry point: ``recurvsr {gen-data,train,infer,eval,profile}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or contract failure.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from .errors import ClipIOError, ConfigError, ContractError, DimensionError, TrainingError

log = logging.getLogger("recurvsr")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST_NAME = "run_manifest.jsonl"


class CommandError(Exception):
    def __init__(self, message, code=EXIT_CONFIG, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def append_manifest(out_dir, record):
    out = Path(out_dir)
    if not out.is_dir():
        return
    with open(out / MANIFEST_NAME, "a") as f:
        f.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"{what} {p} is not valid JSON: {exc}") from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg_dict, pairs):
    """Apply ``key=value`` overrides; bare keys are looked up in train, loss, then model."""
    for pair in pairs or []:
        if "=" not in pair:
            raise CommandError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in cfg_dict:
                raise CommandError(f"unknown config section {section!r}")
        else:
            name = key
            section = next((s for s in ("train", "loss", "model") if name in cfg_dict[s]), None)
            if section is None:
                raise CommandError(f"unknown config key {key!r}")
        if name not in cfg_dict[section]:
            raise CommandError(f"unknown config key {section}.{name}")
        cfg_dict[section][name] = _parse_value(value)
    return cfg_dict


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    spec = _read_json(args.scenes, "scene spec") if args.scenes else {}
    if not isinstance(spec, dict):
        raise CommandError("scene spec must be a JSON object")
    try:
        sampler = D.SceneSampler(**spec.get("sampler", {}))
        sampler.validate()
        degradation = D.DegradationConfig(**spec.get("degradation", {}))
        degradation.validate()
        scenes = [D.SceneSpec.from_dict(s) for s in spec.get("scenes", [])]
    except (TypeError, KeyError) as exc:
        raise CommandError(f"invalid scene spec: {exc}") from exc
    if args.count < 0:
        raise CommandError("--count must be >= 0")
    paths = D.generate_dataset(args.out, args.count, args.seed, sampler, degradation, scenes or None, args.jobs)
    config = {"sampler": spec.get("sampler", {}), "degradation": spec.get("degradation", {}),
              "scenes": spec.get("scenes", []), "count": args.count}
    return args.out, config, {"clips": paths}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    from .trainer import TrainConfig, train

    for d in args.data:
        if not Path(d).is_dir():
            raise CommandError(f"data directory not found: {d}")
    if args.resume is None:
        base = _read_json(args.config, "config") if args.config else {}
        cfg_dict = TrainConfig.from_dict(base).to_dict()
        apply_overrides(cfg_dict, args.set)
        t = cfg_dict["train"]
        if args.no_temporal_loss:
            t["use_temporal_loss"] = False
        if args.no_recurrent:
            t["recurrent"] = False
        if args.no_latent_disc:
            t["use_latent_disc"] = False
        if args.no_pixel_disc:
            t["use_pixel_disc"] = False
        if args.seed is not None:
            t["seed"] = args.seed
        cfg = TrainConfig.from_dict(cfg_dict).validate()
    else:
        if not Path(args.resume).exists():
            raise CommandError(f"checkpoint not found: {args.resume}")
        cfg = TrainConfig()
    final = train(cfg, args.data, args.out, resume=args.resume)
    resolved = json.loads((Path(final) / "config.json").read_text())
    return args.out, resolved, {"checkpoint": str(final)}


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def load_any_generator(path):
    """Generator from a checkpoint dir, a training run dir, or an exported generator dir."""
    from .backbone import load_generator
    from .trainer import latest_checkpoint, load_generator_from_checkpoint

    p = Path(path)
    if (p / "generator.pt").is_file():
        return load_generator(p).eval()
    if (p / "state.pt").is_file():
        return load_generator_from_checkpoint(p)
    ckpt = latest_checkpoint(p) if p.is_dir() else None
    if ckpt is None:
        raise CommandError(f"no checkpoint found at {p}")
    return load_generator_from_checkpoint(ckpt)


def _lr_clip_dir(p: Path):
    return p / "lr" if (p / "lr" / "manifest.json").is_file() else p


def _clip_dirs(root: Path):
    """``[(name, dir)]``: one entry for a clip dir, or every ``clip_*`` child of a dataset."""
    if (root / "manifest.json").is_file() or (root / "hr").is_dir() or (root / "lr").is_dir():
        return [(root.name, root)]
    kids = D.list_clip_dirs(root) if root.is_dir() else []
    return [(k.name, k) for k in kids]


def infer_one(G, lr_dir, out_dir, recurrent=True):
    from .trainer import infer_clip

    lr = D.load_clip(lr_dir)
    m = G.config.spatial_multiple
    h, w = lr.height, lr.width
    if h % m or w % m:
        ph, pw = (-h) % m, (-w) % m
        raise CommandError(
            f"LR size {h}x{w} is not divisible by {m}; pad by {ph} rows and {pw} columns",
            required_multiple=m, pad_rows=ph, pad_cols=pw,
        )
    if lr.channels != G.config.in_channels:
        raise CommandError(f"clip has {lr.channels} channels, model expects {G.config.in_channels}")
    sr = infer_clip(G, lr.frames, recurrent=recurrent)
    meta = {"source": str(lr_dir), "recurrent": recurrent, "upscale_factor": G.config.upscale_factor}
    D.save_clip(D.VideoClip(sr, fps=lr.fps, id=lr.id, meta=meta), out_dir)
    return str(out_dir)


def cmd_infer(args):
    import torch

    torch.use_deterministic_algorithms(True)
    src = Path(args.input)
    clips = _clip_dirs(src)
    if not clips:
        raise CommandError(f"no clip found at {src}")
    G = load_any_generator(args.ckpt)
    out = Path(args.out)
    outputs = []
    if len(clips) == 1 and clips[0][1] == src:
        outputs.append(infer_one(G, _lr_clip_dir(src), out, args.recurrent))
    else:
        for name, d in clips:
            outputs.append(infer_one(G, _lr_clip_dir(d), out / name, args.recurrent))
    return out, {"recurrent": args.recurrent, "model": G.config.to_dict()}, {"clips": outputs}


# ---------------------------------------------------------------------------
# eval / profile
# ---------------------------------------------------------------------------


def _gt_of(d: Path):
    """``(clip, gt_flows or None)`` for a plain clip dir or a dataset clip dir."""
    if (d / "hr").is_dir():
        hr = D.load_clip(d / "hr")
        flows = D.load_flows(d / "flow_prev", len(hr) - 1) if (d / "flow_prev").is_dir() else None
        return hr, flows
    return D.load_clip(d), None


def _sr_of(d: Path):
    if (d / "manifest.json").is_file():
        return D.load_clip(d)
    if (d / "hr").is_dir():
        return D.load_clip(d / "hr")
    raise ClipIOError(f"no clip in {d}")


def _eval_task(task):
    name, sr_dir, gt_dir, flow_dir, use_gt, quantize = task
    sr = _sr_of(Path(sr_dir))
    gt, gt_flows = _gt_of(Path(gt_dir))
    if len(sr) != len(gt):
        raise ContractError(f"{name}: SR has {len(sr)} frames but ground truth has {len(gt)}")
    flows = None
    if flow_dir is not None:
        flows = D.load_flows(flow_dir, len(sr) - 1)
    elif use_gt:
        if gt_flows is None:
            raise ContractError(f"{name}: ground-truth flows requested but none found in {gt_dir}")
        flows = gt_flows
    report = E.evaluate_clip(sr, gt, flows=flows, gt_flows=gt_flows, quantize=quantize, clip_id=name)
    if use_gt:
        report.flow_source = "ground-truth"
    return report


def cmd_eval(args):
    sr_root, gt_root = Path(args.sr), Path(args.gt)
    for p in (sr_root, gt_root):
        if not p.exists():
            raise CommandError(f"path not found: {p}")
    gt_clips = _clip_dirs(gt_root)
    if not gt_clips:
        raise CommandError(f"no clips found in {gt_root}")
    if len(gt_clips) == 1 and gt_clips[0][1] == gt_root:
        tasks = [(gt_root.name, sr_root, gt_root, args.flows, args.use_gt_flows, args.quantize8)]
    else:
        if args.flows:
            raise CommandError("--flows applies to single-clip evaluation only")
        tasks = []
        for name, d in gt_clips:
            if not (sr_root / name).is_dir():
                raise CommandError(f"SR output for {name} missing in {sr_root}")
            tasks.append((name, sr_root / name, d, None, args.use_gt_flows, args.quantize8))
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_eval_task, tasks))
    else:
        reports = [_eval_task(t) for t in tasks]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        E.write_report(reports[0], out)
    else:
        payload = {"clips": [r.to_dict() for r in reports], "mean": E.mean_metrics(reports)}
        out.write_text(json.dumps(payload, indent=2, sort_keys=True))
    E.write_summary(reports, out.parent / "summary.csv")
    config = {"use_gt_flows": args.use_gt_flows, "quantize8": args.quantize8}
    return out.parent, config, {"report": str(out), "summary": str(out.parent / "summary.csv")}


def cmd_profile(args):
    d = Path(args.clip)
    if not d.exists():
        raise CommandError(f"clip not found: {d}")
    clip = _sr_of(d)
    out = Path(args.out)
    E.save_profile(clip, args.row, out)
    return out.parent, {"row": args.row}, {"profile": str(out)}


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="recurvsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render, degrade and store synthetic training clips")
    g.add_argument("--scenes", help="JSON with optional 'sampler', 'degradation' and 'scenes' entries")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a generator")
    t.add_argument("--config", help="JSON with 'train', 'loss' and 'model' sections")
    t.add_argument("--data", required=True, nargs="+")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint dir or run dir to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.add_argument("--no-temporal-loss", action="store_true")
    t.add_argument("--no-recurrent", action="store_true")
    t.add_argument("--no-latent-disc", action="store_true")
    t.add_argument("--no-pixel-disc", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="super-resolve an LR clip or dataset")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--recurrent", action=argparse.BooleanOptionalAction, default=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score SR clips against ground truth")
    e.add_argument("--sr", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--flows", help="directory of flow_%%05d.flo files for the warping error")
    e.add_argument("--use-gt-flows", action="store_true", help="warping error from ground-truth flows")
    e.add_argument("--quantize8", action="store_true", help="score 8-bit quantized frames")
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="save a temporal profile image")
    f.add_argument("--clip", required=True)
    f.add_argument("--row", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_profile)
    return p


def _error(code, exc, **extra):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    started = _now()
    record = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "started": started,
    }
    out_dir = None
    try:
        out_dir, config, outputs = args.func(args)
        record.update(config=config, outputs=outputs, status="ok", exit_code=EXIT_OK)
        code = EXIT_OK
    except CommandError as exc:
        code = _error(exc.code, exc, **exc.extra)
    except TrainingError as exc:
        code = _error(EXIT_RUNTIME, exc, term=exc.term, step=exc.step)
    except (ConfigError, ContractError, DimensionError) as exc:
        code = _error(EXIT_CONFIG, exc)
    except (ClipIOError, OSError, RuntimeError) as exc:
        code = _error(EXIT_RUNTIME, exc)
    if code != EXIT_OK:
        record.update(status="error", exit_code=code)
        out_dir = getattr(args, "out", None)
        if out_dir and args.command in ("eval", "profile"):
            out_dir = Path(out_dir).parent
    record["finished"] = _now()
    if out_dir is not None:
        append_manifest(out_dir, record)
    return code


if __name__ == "__main__":
    sys.exit(main())
