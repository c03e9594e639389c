"""Command line entry point: ``tokenmerge {train,eval,flops,inspect-merge}``.

Settings resolve as command-line flags > ``--config`` file > ``--preset`` >
built-in defaults.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, DatasetError, SyntheticSpec, load, parse_grid, synth
from .flops import PRESETS, layer_sweep, model_flops
from .merging import group_map
from .model import VitConfig, VitModel
from .trainer import TrainConfig, evaluate, read_metrics, train

log = logging.getLogger("tokenmerge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "depth": 4,
    "dim": 64,
    "heads": 4,
    "mlp_ratio": 4.0,
    "patch": 4,
    "channels": 1,
    "cls": True,
    "merge": "none",
    "merge_layer": None,
    "split": "stripe",
    "adapter": "none",
    "scale": 1.0,
    "refine_hidden": 8,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "epochs": 100,
    "warmup": 10,
    "batch": 64,
    "seed": 0,
    "backbone_seed": 0,
    "val_frac": 0.2,
}


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------ parsing


def parse_merge(text: str) -> tuple[str, int | None]:
    t = text.strip().lower().replace("_", "-")
    if t in ("none", "bdm", "bsm"):
        return t, None
    if t in ("avg", "avg-pool"):
        return "avg_pool", None
    if t in ("max", "max-pool"):
        return "max_pool", None
    if t.startswith("bsm-per-layer"):
        _, _, r = t.partition(":")
        return "bsm_per_layer", int(r) if r else 8
    raise UsageError(f"unknown merge method {text!r}")


def parse_adapter(text: str) -> tuple[str, int]:
    kind, _, h = text.strip().lower().partition(":")
    if kind == "none":
        return "none", 8
    if kind not in ("lora", "adaptformer"):
        raise UsageError(f"unknown adapter {text!r}")
    return kind, int(h) if h else 8


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


_COERCE = {
    "depth": int, "dim": int, "heads": int, "mlp_ratio": float, "patch": int, "channels": int,
    "classes": int, "cls": _bool, "merge_layer": lambda v: None if v in (None, "", "None") else int(v),
    "scale": float, "refine_hidden": int, "lr": float, "weight_decay": float, "epochs": int,
    "warmup": int, "batch": int, "seed": int, "backbone_seed": int, "val_frac": float,
    "grid": lambda v: tuple(v) if isinstance(v, (tuple, list)) else parse_grid(v),
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and explicit flags."""
    settings = dict(DEFAULTS)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        p = PRESETS[preset]
        settings.update(
            depth=p["depth"], dim=p["dim"], heads=p["heads"], mlp_ratio=p["mlp_ratio"], grid=p["grid"],
            patch=p["patch"], channels=p["channels"], classes=p["num_classes"], cls=p["use_cls"],
        )
    cfg_file = getattr(args, "config", None)
    if cfg_file:
        try:
            text = Path(cfg_file).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        for k, v in ckpt.parse_kv(text).items():
            settings[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if k not in ("command", "func", "config", "preset", "verbose"):
            settings[k] = v
    try:
        for k, fn in _COERCE.items():
            if k in settings and settings[k] is not None:
                settings[k] = fn(settings[k])
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return settings


def vit_config(s: dict, data: Dataset | None = None) -> VitConfig:
    merge, r = parse_merge(str(s["merge"]))
    adapter, hidden = parse_adapter(str(s["adapter"]))
    patch = s["patch"]
    grid = s.get("grid")
    channels = s["channels"]
    classes = s.get("classes")
    if data is not None:
        c, h, w = data.shape
        derived = (h // patch, w // patch)
        if h % patch or w % patch:
            raise UsageError(f"images {h}x{w} not divisible by patch size {patch}")
        if grid is not None and tuple(grid) != derived:
            raise UsageError(f"--grid {grid[0]}x{grid[1]} does not match data ({derived[0]}x{derived[1]} patches)")
        grid, channels = derived, c
        if classes is not None and classes != data.num_classes:
            raise UsageError(f"--classes {classes} does not match data ({data.num_classes})")
        classes = data.num_classes
    try:
        return VitConfig(
            depth=s["depth"], dim=s["dim"], heads=s["heads"], mlp_ratio=s["mlp_ratio"],
            grid=grid or (8, 8), patch=patch, channels=channels, num_classes=classes or 2,
            use_cls=s["cls"], merge_method=merge, merge_layer=s["merge_layer"], merge_r=r or 8,
            split_pattern=s["split"], adapter=adapter, adapter_hidden=hidden, adapter_scale=s["scale"],
            refine_hidden=s["refine_hidden"], refine_scale=s["scale"], backbone_seed=s["backbone_seed"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def config_from_checkpoint(tensors: dict) -> VitConfig:
    if ckpt.CONFIG_ENTRY not in tensors:
        raise ckpt.CheckpointError("checkpoint carries no config echo")
    raw = ckpt.decode_config(tensors[ckpt.CONFIG_ENTRY])
    kw = {}
    for f in dataclasses.fields(VitConfig):
        if f.name not in raw:
            continue
        v = raw[f.name]
        default = f.default
        if f.name == "grid":
            kw[f.name] = parse_grid(v)
        elif f.name == "merge_layer":
            kw[f.name] = None if v == "None" else int(v)
        elif isinstance(default, bool):
            kw[f.name] = _bool(v)
        elif isinstance(default, int):
            kw[f.name] = int(v)
        elif isinstance(default, float):
            kw[f.name] = float(v)
        else:
            kw[f.name] = v
    return VitConfig(**kw)


def load_dataset(s: dict) -> Dataset:
    data_path, synth_spec = s.get("data"), s.get("synth")
    if data_path and synth_spec:
        raise UsageError("give either --data or --synth, not both")
    if data_path:
        return load(data_path)
    if synth_spec:
        try:
            spec = SyntheticSpec.parse(synth_spec)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if "patch" not in s or s["patch"] == DEFAULTS["patch"]:
            s["patch"] = spec.patch
        return synth(spec)
    raise UsageError("a data source is required: --data PATH or --synth SPEC")


def _out_dir(s: dict) -> Path:
    out = Path(s.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ commands


def cmd_train(args) -> int:
    s = resolve(args)
    data = load_dataset(s)
    cfg = vit_config(s, data)
    try:
        tcfg = TrainConfig(lr=s["lr"], weight_decay=s["weight_decay"], batch_size=s["batch"],
                           epochs=s["epochs"], warmup_epochs=s["warmup"], seed=s["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(s)
    train_set, val_set = data.split(s["val_frac"], seed=s["seed"])
    model = VitModel(cfg, head_seed=s["seed"] + 1)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()

    def on_best(m, epoch):
        ckpt.save_model(out / "best.fpet", m)

    t0 = time.perf_counter()
    result = train(model, train_set, tcfg, val_data=val_set, metrics_path=metrics, on_best=on_best)
    size = ckpt.save_model(out / "final.fpet", model)
    train_loss, train_acc = evaluate(model, train_set)
    print(f"step0_loss={result.step0_loss:.10g}")
    print(f"train_acc={train_acc:.4f}")
    if len(val_set):
        _, val_acc = evaluate(model, val_set)
        print(f"val_acc={val_acc:.4f}")
    sched = _token_counts(model, data)
    print(f"tokens_in={cfg.num_tokens} tokens_out={sched}")
    print(f"checkpoint={out / 'final.fpet'} bytes={size}")
    print(f"elapsed_s={time.perf_counter() - t0:.1f}")
    if not getattr(args, "no_plots", False):
        from .plots import training_curves

        training_curves(read_metrics(metrics), out / "curves.png")
    return EXIT_OK


def _token_counts(model: VitModel, data: Dataset) -> int:
    state = model.forward_features(data.images(slice(0, 1)))
    return state.num_tokens


def _model_from_checkpoint(path) -> VitModel:
    tensors = ckpt.load(path)
    cfg = config_from_checkpoint(tensors)
    model = VitModel(cfg)
    ckpt.restore_model(model, tensors)
    return model


def _check_data_fits(model: VitModel, data: Dataset):
    c = model.cfg
    expected = (c.channels, c.grid[0] * c.patch, c.grid[1] * c.patch)
    if data.shape != expected:
        raise ckpt.CheckpointError(f"data shape {data.shape} does not match checkpoint model input {expected}")
    if data.num_classes != c.num_classes:
        raise ckpt.CheckpointError(f"data has {data.num_classes} classes, checkpoint head has {c.num_classes}")


def cmd_eval(args) -> int:
    s = resolve(args)
    if not s.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    data = load_dataset(s)
    model = _model_from_checkpoint(s["checkpoint"])
    _check_data_fits(model, data)
    loss, acc = evaluate(model, data)
    print(f"samples={len(data)}")
    print(f"loss={loss:.6f}")
    print(f"top1={acc:.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    s = resolve(args)
    if s.get("classes") is None:
        s["classes"] = 1000 if s.get("preset") else 2
    cfg = vit_config(s)
    report = model_flops(cfg)
    fmt = s.get("format", "text")
    print(report.to_kv() if fmt == "kv" else report.to_text(), end="" if fmt == "kv" else "\n")
    if s.get("out"):
        out = _out_dir(s)
        (out / "flops.txt").write_text(report.to_text() + "\n")
        (out / "flops.kv").write_text(report.to_kv())
        if not getattr(args, "no_plots", False):
            from .plots import flops_per_layer, flops_sweep

            base = model_flops(VitConfig.from_dict({**cfg.to_dict(), "merge_method": "none", "merge_layer": None}))
            flops_per_layer(report, out / "flops_per_layer.png", baseline=base)
            if cfg.merge_layer is not None:
                sweep = layer_sweep(cfg)
                flops_sweep(sweep, out / "flops_sweep.png", baseline_total=report.baseline_total)
                with (out / "flops_sweep.csv").open("w") as fh:
                    fh.write("merge_layer,total,reduction\n")
                    for l, r in sorted(sweep.items()):
                        fh.write(f"{l},{r.total},{r.reduction_vs_baseline:.6f}\n")
    return EXIT_OK


def cmd_inspect_merge(args) -> int:
    from .groupmap import write_group_map

    s = resolve(args)
    data = load_dataset(s)
    if s.get("checkpoint"):
        model = _model_from_checkpoint(s["checkpoint"])
        _check_data_fits(model, data)
    else:
        model = VitModel(vit_config(s, data), head_seed=s["seed"] + 1)
    index = int(s.get("index", 0))
    if not 0 <= index < len(data):
        raise UsageError(f"--index {index} outside dataset of {len(data)} samples")
    state = model.forward_features(data.images(slice(index, index + 1)))
    groups = group_map(state, model.cfg.grid)[0]
    out = _out_dir(s)
    txt, ppm = write_group_map(groups, out, f"sample{index}_groups")
    print(open(txt).read(), end="")
    print(f"groups={len(np.unique(groups))} text={txt} ppm={ppm}")
    if not getattr(args, "no_plots", False):
        from .plots import group_map_figure

        img = data.images(index)
        group_map_figure(groups, out / f"sample{index}_groups.png", image=img.mean(0))
    return EXIT_OK


# ------------------------------------------------------------ parser


def _model_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float)
    p.add_argument("--grid", help="patch grid HxW")
    p.add_argument("--patch", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--cls", dest="cls", action="store_true")
    p.add_argument("--no-cls", dest="cls", action="store_false")
    p.add_argument("--merge", help="none, bdm, bsm, bsm-per-layer:R, avg, max")
    p.add_argument("--merge-layer", dest="merge_layer", type=int)
    p.add_argument("--split", choices=["stripe", "checkerboard"], help="set split for one-shot bsm")
    p.add_argument("--adapter", help="none, lora:H, adaptformer:H")
    p.add_argument("--scale", type=float)
    p.add_argument("--refine-hidden", dest="refine_hidden", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone-seed", dest="backbone_seed", type=int)
    p.add_argument("--no-plots", dest="no_plots", action="store_true")


def _data_flags(p):
    p.add_argument("--data", help="TKDS dataset file")
    p.add_argument("--synth", help="synthetic spec, e.g. grid=8x8,classes=4,sigma=0.3,n=512,seed=0")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgParser(prog="tokenmerge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=ArgParser)
    sub.required = True

    p = sub.add_parser("train", argument_default=argparse.SUPPRESS, help="train adapters and head")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", argument_default=argparse.SUPPRESS, help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint")
    _data_flags(p)
    p.add_argument("--patch", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", argument_default=argparse.SUPPRESS, help="analytic MAC report")
    _model_flags(p)
    p.add_argument("--format", choices=["text", "kv"])
    p.add_argument("--out", help="also write flops.txt, flops.kv and figures here")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("inspect-merge", argument_default=argparse.SUPPRESS, help="write merge-group maps")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--index", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"tokenmerge {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ckpt.CheckpointError, OSError, FloatingPointError, ValueError) as e:
        print(f"tokenmerge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
