"""Command line entry point: phantom-gen, train, eval, saliency, render, gradcheck.

Every subcommand resolves its options as preset < ``--config`` file < flags
and writes the resolved set to ``config.txt`` in its output directory, so
``bvsviz <cmd> --config <out>/config.txt`` repeats the run. Progress is
logged as ``key=value`` lines on stdout.

Exit codes: 0 success, 2 usage/config/input errors, 3 numerical failure.
The only environment variable consulted is BVSVIZ_THREADS, a default for
``--threads``.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional

from . import config as cfg
from . import tensor
from .classifier import (DESK_TRAIN, CLINICAL_TRAIN, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train)
from .geometry import default_scale, overlay, polar_to_cartesian, render_stack
from .gradcheck import run_gradcheck
from .model import build_model
from .phantom import (PRESETS, PhantomSpec, generate_dataset, load_dataset, read_slice_png, save_dataset,
                      split_by_pullback, trim_pullbacks)
from .saliency import (SignMode, default_mode, normalize_for_display, read_saliency, shifted_saliency,
                       sign_select, write_preview, write_saliency)

TRAIN_PRESETS = {"desk": DESK_TRAIN, "clinical": CLINICAL_TRAIN}


class UsageError(Exception):
    pass


def _emit(**fields: Any) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), flush=True)


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _resolve(args: argparse.Namespace, defaults: dict[str, Any]) -> dict[str, Any]:
    """Preset/default values, overridden by the --config file, overridden by explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for key, value in cfg.read_kv(path).items():
            if key == "command":
                if value != args.command:
                    raise UsageError(f"config {path} was written by '{value}', not '{args.command}'")
                continue
            resolved[key] = value
    for key in list(defaults):
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_snapshot(out: Path, command: str, values: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump_kv({"command": command, **values}))


def _require(values: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if values.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _as_bool(v) -> bool:
    return v if isinstance(v, bool) else cfg._coerce(str(v), bool)


def _pool_map(fn: Callable, items: list, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# phantom-gen

def cmd_phantom_gen(args) -> int:
    values = _resolve(args, {"preset": "desk", "spec": "", "out": None, "pullbacks": 18, "seed": 0})
    _require(values, "out")
    preset = str(values["preset"])
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    spec = PRESETS[preset]
    phantom_keys = {k[len("phantom."):]: v for k, v in values.items() if k.startswith("phantom.")}
    if values["spec"]:
        path = Path(str(values["spec"]))
        if not path.exists():
            raise UsageError(f"spec file not found: {path}")
        spec = PhantomSpec.from_text(path.read_text(), base=spec)
    if phantom_keys:
        spec = cfg.from_dict(PhantomSpec, phantom_keys, base=spec)
    n, seed = int(values["pullbacks"]), int(values["seed"])
    out = Path(str(values["out"]))
    pullbacks = generate_dataset(spec, n, seed)
    save_dataset(pullbacks, out, spec, seed)
    snapshot = {k: v for k, v in values.items() if not k.startswith("phantom.")}
    snapshot.update({f"phantom.{k}": v for k, v in cfg.to_dict(spec).items()})
    snapshot["spec"] = ""
    _write_snapshot(out, "phantom-gen", snapshot)
    for pb in pullbacks:
        _emit(pullback=pb.pullback_id, label=pb.label.name, slices=len(pb))
    _emit(pullbacks=n, spec_hash=spec.digest(), out=out)
    return 0


# train / eval

def _load_trimmed(data: str) -> tuple[list, PhantomSpec]:
    root = Path(data)
    if not (root / "manifest.txt").exists():
        raise UsageError(f"not a dataset directory (no manifest.txt): {root}")
    spec = PhantomSpec.from_text((root / "phantom_spec.txt").read_text())
    return trim_pullbacks(load_dataset(root), spec.depth_trim), spec


def cmd_train(args) -> int:
    preset = args.preset
    if preset is None and args.config and Path(args.config).exists():
        preset = cfg.read_kv(args.config).get("preset")
    preset = preset or "desk"
    if preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    base = cfg.to_dict(TRAIN_PRESETS[preset])
    defaults = {"preset": preset, "data": None, "out": None, "train_fraction": 0.7, "stratify": True, **base}
    values = _resolve(args, defaults)
    _require(values, "data", "out")
    train_cfg = cfg.from_dict(TrainConfig, {k: str(values[k]) for k in base})
    tensor.set_precision(train_cfg.precision)
    pullbacks, _ = _load_trimmed(str(values["data"]))
    train_set, test_set = split_by_pullback(pullbacks, float(values["train_fraction"]), train_cfg.seed,
                                            stratify=_as_bool(values["stratify"]))
    out = Path(str(values["out"]))
    _write_snapshot(out, "train", values)
    (out / "split.txt").write_text(cfg.dump_kv({"train": " ".join(pb.pullback_id for pb in train_set),
                                                "test": " ".join(pb.pullback_id for pb in test_set)}))
    _emit(train_pullbacks=len(train_set), test_pullbacks=len(test_set))
    size = train_cfg.crop_size
    model = build_model(size, train_cfg.channels_base, train_cfg.seed)
    result = train(model, train_set, train_cfg, test_set, log=print)
    save_checkpoint(out / "model.ckpt", result.checkpoint)
    with open(out / "history.txt", "w") as fh:
        for rec in result.history:
            fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n")
    _emit(best_epoch=result.checkpoint.epoch, accuracy=result.checkpoint.accuracy)
    return 0


def _split_ids(ckpt_path: Path, which: str) -> Optional[set[str]]:
    if which == "all":
        return None
    split_file = ckpt_path.parent / "split.txt"
    if not split_file.exists():
        raise UsageError(f"--split {which} needs {split_file}")
    return set(cfg.read_kv(split_file)[which].split())


def cmd_eval(args) -> int:
    values = _resolve(args, {"checkpoint": None, "data": None, "split": "test", "out": ""})
    _require(values, "checkpoint", "data")
    ckpt_path = Path(str(values["checkpoint"]))
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    tensor.set_precision(ckpt.config.precision)
    ids = _split_ids(ckpt_path, str(values["split"]))
    pullbacks, _ = _load_trimmed(str(values["data"]))
    if ids is not None:
        pullbacks = [pb for pb in pullbacks if pb.pullback_id in ids]
    metrics = evaluate(ckpt.model, pullbacks, ckpt.config)
    cm = metrics["confusion"]
    _emit(accuracy=metrics["accuracy"], auc=metrics["auc"], f1=metrics["f1"], slices=int(cm.sum()))
    _emit(confusion=";".join(",".join(str(int(v)) for v in row) for row in cm))
    if values["out"]:
        out = Path(str(values["out"]))
        _write_snapshot(out, "eval", values)
        (out / "metrics.txt").write_text(cfg.dump_kv({
            "accuracy": metrics["accuracy"], "auc": metrics["auc"], "f1": metrics["f1"],
            "confusion": ";".join(",".join(str(int(v)) for v in row) for row in cm)}))
    return 0


# saliency

def _input_slices(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        slices = sorted(path.glob("slice_*.png"))
        if slices:
            return slices
    raise UsageError(f"no slice PNGs found at {path}")


def cmd_saliency(args) -> int:
    values = _resolve(args, {"checkpoint": None, "in": None, "patch": 0, "k": 3, "mode": "auto",
                             "out": None, "border_fraction": 0.1, "depth_trim": -1, "threads": 1})
    _require(values, "checkpoint", "in", "out")
    ckpt_path = Path(str(values["checkpoint"]))
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    tensor.set_precision(ckpt.config.precision)
    patch = int(values["patch"]) or ckpt.config.crop_size
    mode_name = str(values["mode"])
    if mode_name not in ("neg", "pos", "auto"):
        raise UsageError(f"--mode must be neg, pos or auto, got {mode_name!r}")
    k, border = int(values["k"]), float(values["border_fraction"])
    src = Path(str(values["in"]))
    files = _input_slices(src)
    trim = int(values["depth_trim"])
    if trim < 0:
        spec_file = (src if src.is_dir() else src.parent).parent / "phantom_spec.txt"
        trim = PhantomSpec.from_text(spec_file.read_text()).depth_trim if spec_file.exists() else 0
    out = Path(str(values["out"]))
    _write_snapshot(out, "saliency", values)

    def work(path: Path):
        pixels = read_slice_png(path)
        if trim:
            pixels = pixels[:, :pixels.shape[1] - trim]
        smap = shifted_saliency(ckpt.model, pixels, patch, k, border)
        mode = default_mode(smap.source_class) if mode_name == "auto" else SignMode(mode_name)
        write_saliency(out / f"{path.stem}.sal", smap, patch, mode)
        write_preview(out / f"{path.stem}.png", normalize_for_display(sign_select(smap.values, mode)))
        return path.stem, smap, mode

    for stem, smap, mode in _pool_map(work, files, int(values["threads"])):
        _emit(slice=stem, **{"class": smap.source_class.name}, mode=mode.value, empty=str(smap.empty).lower())
    _emit(slices=len(files), out=out)
    return 0


# render

def cmd_render(args) -> int:
    values = _resolve(args, {"saliency_dir": None, "oct_dir": None, "out": None, "size": 512,
                             "volume": False, "threads": 1})
    _require(values, "saliency_dir", "oct_dir", "out")
    sal_dir, oct_dir = Path(str(values["saliency_dir"])), Path(str(values["oct_dir"]))
    files = sorted(sal_dir.glob("*.sal"))
    if not files:
        raise UsageError(f"no .sal files in {sal_dir}")
    size = int(values["size"])
    out = Path(str(values["out"]))
    _write_snapshot(out, "render", values)

    def work(path: Path):
        sal, header = read_saliency(path)
        oct_path = oct_dir / f"{path.stem}.png"
        if not oct_path.exists():
            raise UsageError(f"missing OCT slice {oct_path} for {path.name}")
        pixels = read_slice_png(oct_path)[:, :sal.shape[1]]
        display = normalize_for_display(sign_select(sal, SignMode(header["mode"])))
        scale = default_scale(size, sal.shape[1])
        oct_c = polar_to_cartesian(pixels, size, scale).pixels
        sal_c = polar_to_cartesian(display, size, scale).pixels
        return oct_c, sal_c, scale

    results = _pool_map(work, files, int(values["threads"]))
    overlays = [overlay(o, s) for o, s, _ in results]
    volume = _as_bool(values["volume"])
    scale = results[0][2]
    render_stack(overlays, out / "overlay", scale=scale, volume=False)
    if volume:
        render_stack([s for _, s, _ in results], out / "saliency_volume", scale=scale)
        render_stack([o for o, _, _ in results], out / "oct_volume", scale=scale)
    _emit(slices=len(files), size=size, volume=str(volume).lower(), out=out)
    return 0


# gradcheck

def cmd_gradcheck(args) -> int:
    values = _resolve(args, {"instances": 20, "seed": 0, "tolerance": 1e-4})
    tol = float(values["tolerance"])
    ok = True
    for res in run_gradcheck(int(values["instances"]), int(values["seed"])):
        passed = res.passed(tol)
        ok &= passed
        print(f"check={res.name} instances={res.instances} redrawn={res.redrawn} worst_rel_err={res.worst:.3e} "
              f"status={'pass' if passed else 'FAIL'}", flush=True)
    _emit(gradcheck="pass" if ok else "fail")
    return 0 if ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvsviz", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="key = value file (e.g. a previous run's config.txt)")
        return p

    p = add("phantom-gen", cmd_phantom_gen, "generate a synthetic pullback dataset")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--spec", help="phantom spec file (key = value), overrides the preset")
    p.add_argument("--out")
    p.add_argument("--pullbacks", type=int)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train the slice classifier")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--channels-base", type=int)
    p.add_argument("--input-mode", choices=["patch", "full"])
    p.add_argument("--downsample", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--stratify", type=lambda s: cfg._coerce(s, bool))
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=["test", "train", "all"])
    p.add_argument("--out")

    p = add("saliency", cmd_saliency, "compute shift-averaged patch saliency maps")
    p.add_argument("--checkpoint")
    p.add_argument("--in", dest="in")
    p.add_argument("--patch", type=int, help="patch size (default: the checkpoint's crop size)")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["neg", "pos", "auto"])
    p.add_argument("--border-fraction", type=float)
    p.add_argument("--depth-trim", type=int, help="columns to drop (default: from the dataset's phantom spec)")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    p = add("render", cmd_render, "cartesian overlays and slice-stack volumes")
    p.add_argument("--saliency-dir")
    p.add_argument("--oct-dir")
    p.add_argument("--out")
    p.add_argument("--size", type=int)
    p.add_argument("--volume", action="store_const", const=True)
    p.add_argument("--threads", type=int)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("--instances", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)
    return parser


def run(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage on bad input
    if getattr(args, "threads", None) is None and hasattr(args, "threads") and os.environ.get("BVSVIZ_THREADS"):
        args.threads = int(os.environ["BVSVIZ_THREADS"])
    try:
        from threadpoolctl import threadpool_limits

        # BLAS stays single threaded; parallelism comes from the worker pool only
        with threadpool_limits(1):
            return args.func(args)
    except (UsageError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"bvsviz {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"bvsviz {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
