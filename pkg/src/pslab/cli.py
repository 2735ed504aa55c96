"""Command-line entry point.

Commands: render, solve, train, eval, gradcheck, ablate. Settings resolve
in three layers: built-in defaults, then the optional config file (INI
sections named after commands, unknown keys rejected), then explicit
flags. Every run prints its fully resolved configuration and, when it has
an output directory, writes it there as resolved_config.txt.

Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace

import numpy as np

from .dataio import load_capture, save_capture, encode_normal_png, image_to_u16, _write_png
from .errors import ConfigError, DataError, NumericalError
from .evaluation import REPORT_HEADER, evaluate, format_report, render_error_map
from .gradcheck import run_suite
from .l2solver import solve_l2
from .network import STAGES, MsfConfig, load_checkpoint, save_checkpoint
from .render import make_dataset
from .training import TrainConfig, train, validate_mae

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this artifact reserves 2 for data
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# defaults per command; the config file and flags override in that order
DEFAULTS = {
    "render": {
        "out": None, "scenes": 8, "val_scenes": 0, "size": 32, "lights": 10,
        "seed": 0, "material": "blinn_phong", "noise_sigma": 0.0, "shadow_casting": False,
    },
    "solve": {"data": None, "out": None, "trim": False, "subset": None},
    "train": {
        "data": None, "out": None, "epochs": 20, "lr": 1e-3, "batch": 1, "seed": 0,
        "strategy": "selective", "weights": "0.5,0.5,1", "optimizer": "adam",
        "channels": 16, "depth": 3, "kernel": 3, "no_normalize": False, "no_fusion": False,
    },
    "eval": {"data": None, "checkpoint": None, "out": None, "scale_max": 90.0},
    "gradcheck": {"channels": 6, "depth": 2, "size": 4, "lights": 3, "seed": 0, "tol": 1e-4},
    "ablate": {
        "out": None, "scenes": 12, "val_scenes": 4, "size": 16, "lights": 8, "seed": 0,
        "epochs": 8, "lr": 1e-3, "channels": 8, "depth": 2, "variants": "0,1,2,3,4,5",
        "custom": None,
    },
}


def _load_config_file(path: str, command: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise DataError(f"config file not found: {path}")
    if command not in parser:
        return {}
    known = DEFAULTS[command]
    out = {}
    for key, raw in parser[command].items():
        if key not in known:
            raise ConfigError(f"config [{command}]: unknown key {key!r}")
        default = known[key]
        if isinstance(default, bool):
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        else:
            out[key] = raw.strip()
    return out


def _resolve(args, command: str) -> dict:
    """defaults < config file < explicit flags."""
    settings = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        settings.update(_load_config_file(args.config, command))
    for key in DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _log_config(command: str, settings: dict, out_dir: str | None):
    lines = [f"[{command}]"] + [f"{k} = {settings[k]}" for k in sorted(settings)]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
            fh.write(text)


def _require(settings: dict, *keys):
    for key in keys:
        if settings[key] is None:
            raise ConfigError(f"missing required setting {key!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_render(settings) -> int:
    if settings["lights"] < 1:
        raise ConfigError("--lights must be >= 1")
    if settings["scenes"] < 1:
        raise ConfigError("--scenes must be >= 1")
    out = settings["out"]
    splits = [("train", settings["scenes"], settings["seed"])]
    if settings["val_scenes"] > 0:
        splits.append(("val", settings["val_scenes"], settings["seed"] + 10_000))
    for split, count, seed in splits:
        dataset = make_dataset(
            count,
            settings["size"],
            settings["lights"],
            seed=seed,
            material=settings["material"],
            sigma=settings["noise_sigma"],
            shadow_casting=settings["shadow_casting"],
        )
        for i, (imageset, gt) in enumerate(dataset):
            save_capture(os.path.join(out, split, f"scene_{i:03d}"), imageset, gt)
    print(f"rendered {settings['scenes']} train scenes"
          + (f" + {settings['val_scenes']} val scenes" if settings["val_scenes"] else "")
          + f" into {out}")
    return 0


def _parse_subset(spec: str | None):
    if not spec:
        return None
    out = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def cmd_solve(settings) -> int:
    imageset, gt = load_capture(settings["data"], subset=_parse_subset(settings["subset"]))
    solution = solve_l2(imageset, trim=settings["trim"])
    out = settings["out"]
    os.makedirs(out, exist_ok=True)
    _write_png(os.path.join(out, "normal_est.png"), encode_normal_png(solution.normals))
    _write_png(os.path.join(out, "albedo.png"), image_to_u16(solution.albedo))
    if gt is not None:
        report = evaluate(solution.normals, gt)
        _write_png(
            os.path.join(out, "error_map.png"),
            render_error_map(report.per_pixel_error, solution.normals.mask & gt.mask),
        )
        row = report.row(imageset.name, imageset.n_images)
        with open(os.path.join(out, "report.tsv"), "w") as fh:
            fh.write(format_report([row]))
        print(REPORT_HEADER)
        print(row)
    else:
        print(f"solved {imageset.name}: no ground truth present, metrics skipped")
    return 0


def _load_split(root: str, split: str):
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        return []
    dataset = []
    for name in sorted(os.listdir(split_dir)):
        capture_dir = os.path.join(split_dir, name)
        if not os.path.isdir(capture_dir):
            continue
        imageset, gt = load_capture(capture_dir)
        if gt is None:
            raise DataError(f"{capture_dir}: training data needs normal_gt.png")
        dataset.append((imageset, gt))
    return dataset


def _train_configs(settings) -> tuple:
    weights = tuple(float(w) for w in str(settings["weights"]).split(","))
    model = MsfConfig(
        base_channels=settings["channels"],
        extractor_depth=settings["depth"],
        kernel_size=settings["kernel"],
        normalize_input=not settings["no_normalize"],
        gated_fusion=not settings["no_fusion"],
        seed=settings["seed"],
    )
    cfg = TrainConfig(
        stage_weights=weights,
        lr=settings["lr"],
        epochs=settings["epochs"],
        batch=settings["batch"],
        seed=settings["seed"],
        strategy=settings["strategy"],
        optimizer=settings["optimizer"],
    )
    return model, cfg


def cmd_train(settings) -> int:
    train_set = _load_split(settings["data"], "train")
    if not train_set:
        raise DataError(f"no training captures under {settings['data']}/train")
    val_set = _load_split(settings["data"], "val")
    model, cfg = _train_configs(settings)
    result = train(train_set, cfg, model_config=model, val_dataset=val_set or None, verbose=True)
    out = settings["out"]
    os.makedirs(out, exist_ok=True)
    save_checkpoint(result.net, os.path.join(out, "checkpoint.npz"))
    with open(os.path.join(out, "metrics.tsv"), "w") as fh:
        fh.write(result.log_text())
    print(f"best epoch {result.best_epoch}: val MAE deep = {result.best_val_mae!r}")
    return 0


def cmd_eval(settings) -> int:
    net = load_checkpoint(settings["checkpoint"])
    root = settings["data"]
    if os.path.isfile(os.path.join(root, "filenames.txt")):
        captures = [root]
    else:
        split = "val" if os.path.isdir(os.path.join(root, "val")) else "train"
        base = os.path.join(root, split) if os.path.isdir(os.path.join(root, split)) else root
        captures = [
            os.path.join(base, d) for d in sorted(os.listdir(base))
            if os.path.isdir(os.path.join(base, d))
        ]
    if not captures:
        raise DataError(f"no captures found under {root}")
    out = settings["out"]
    os.makedirs(out, exist_ok=True)
    rows, dataset = [], []
    for capture_dir in captures:
        imageset, gt = load_capture(capture_dir)
        if gt is None:
            raise DataError(f"{capture_dir}: evaluation needs normal_gt.png")
        dataset.append((imageset, gt))
        pred = net.predict(imageset)
        report = evaluate(pred, gt)
        rows.append(report.row(imageset.name, imageset.n_images))
        _write_png(os.path.join(out, f"{imageset.name}_normal.png"), encode_normal_png(pred))
        _write_png(
            os.path.join(out, f"{imageset.name}_error.png"),
            render_error_map(report.per_pixel_error, pred.mask & gt.mask, settings["scale_max"]),
        )
    with open(os.path.join(out, "report.tsv"), "w") as fh:
        fh.write(format_report(rows))
    print(REPORT_HEADER)
    for row in rows:
        print(row)
    vmae = validate_mae(net, dataset)
    for stage in STAGES:
        print(f"val_mae_{stage}\t{vmae[stage]!r}")
    return 0


def cmd_gradcheck(settings) -> int:
    reports, ok = run_suite(
        tol=settings["tol"],
        seed=settings["seed"],
        size=settings["size"],
        n_lights=settings["lights"],
        channels=settings["channels"],
        depth=settings["depth"],
    )
    print(f"{sum(r.passed for r in reports)}/{len(reports)} gradient checks passed")
    return 0 if ok else EXIT_NUMERICAL


ABLATION_VARIANTS = [
    (0, False, False, False),
    (1, True, False, False),
    (2, True, False, True),
    (3, False, True, False),
    (4, True, True, False),
    (5, True, True, True),
]


def variant_configs(mfe: bool, mff: bool, sus: bool, model: MsfConfig, cfg: TrainConfig):
    """Translate Table-1 toggles into model/training settings.

    MFE: per-stage supervision with the default stage weights (off: only
    the deep loss). MFF: the gated fusion module (off: plain concat).
    SUS: per-stage gradient masks (off: uniform update). SUS is defined
    on top of the per-stage losses, so it requires MFE.
    """
    if sus and not mfe:
        raise ConfigError("SUS requires MFE: selective update needs the per-stage losses")
    model = replace(model, gated_fusion=mff)
    cfg = replace(
        cfg,
        stage_weights=cfg.stage_weights if mfe else (0.0, 0.0, 1.0),
        strategy="selective" if sus else "uniform",
    )
    return model, cfg


ABLATE_HEADER = "id\tMFE\tMFF\tSUS\tmae_deg\terr15\terr30"


def cmd_ablate(settings) -> int:
    base_model = MsfConfig(
        base_channels=settings["channels"],
        extractor_depth=settings["depth"],
        seed=settings["seed"],
    )
    base_cfg = TrainConfig(lr=settings["lr"], epochs=settings["epochs"], seed=settings["seed"])

    if settings["custom"] is not None:
        flags = [p.strip().lower() in ("1", "true", "yes") for p in settings["custom"].split(",")]
        if len(flags) != 3:
            raise ConfigError("--custom expects MFE,MFF,SUS as three booleans")
        variants = [("custom", *flags)]
    else:
        wanted = {int(v) for v in str(settings["variants"]).split(",")}
        variants = [v for v in ABLATION_VARIANTS if v[0] in wanted]
        if not variants:
            raise ConfigError(f"no known variants in {settings['variants']!r}")

    train_set = make_dataset(
        settings["scenes"], settings["size"], settings["lights"], seed=settings["seed"]
    )
    val_set = make_dataset(
        settings["val_scenes"], settings["size"], settings["lights"], seed=settings["seed"] + 10_000
    )

    lines = []
    for vid, mfe, mff, sus in variants:
        model, cfg = variant_configs(mfe, mff, sus, base_model, base_cfg)
        result = train(train_set, cfg, model_config=model, val_dataset=val_set)
        errors = []
        for imageset, gt in val_set:
            pred = result.net.predict(imageset)
            report = evaluate(pred, gt)
            errors.append(report.per_pixel_error[pred.mask & gt.mask])
        pooled = np.concatenate(errors)
        mark = lambda flag: "x" if flag else "-"
        lines.append(
            "(%s)\t%s\t%s\t%s\t%.4f\t%.4f\t%.4f"
            % (vid, mark(mfe), mark(mff), mark(sus),
               pooled.mean(), (pooled < 15.0).mean(), (pooled < 30.0).mean())
        )
        print(lines[-1], flush=True)

    table = "\n".join([ABLATE_HEADER] + lines) + "\n"
    if settings["out"]:
        os.makedirs(settings["out"], exist_ok=True)
        with open(os.path.join(settings["out"], "ablation.tsv"), "w") as fh:
            fh.write(table)
    print(ABLATE_HEADER)
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="pslab", description=__doc__)
    parser.add_argument("--config", help="INI config file with one section per command")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="generate synthetic capture directories")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--val-scenes", dest="val_scenes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--lights", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--material", choices=["lambertian", "blinn_phong"])
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--shadow-casting", dest="shadow_casting", action="store_const", const=True)

    p = sub.add_parser("solve", help="least-squares baseline on one capture")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trim", action="store_const", const=True)
    p.add_argument("--subset", help="image indices, e.g. 20-95 or 0,2,5")

    p = sub.add_parser("train", help="train the network on rendered captures")
    p.add_argument("--data", required=True, help="root containing train/ (and optional val/)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["selective", "uniform"])
    p.add_argument("--weights", help="stage loss weights, e.g. 0.5,0.5,1")
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--no-normalize", dest="no_normalize", action="store_const", const=True)
    p.add_argument("--no-fusion", dest="no_fusion", action="store_const", const=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint against captures")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-max", dest="scale_max", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--lights", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("ablate", help="run the six-variant ablation table")
    p.add_argument("--out")
    p.add_argument("--scenes", type=int)
    p.add_argument("--val-scenes", dest="val_scenes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--lights", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--variants", help="comma list of variant ids, default all six")
    p.add_argument("--custom", help="MFE,MFF,SUS booleans for a single custom variant")
    return parser


COMMANDS = {
    "render": cmd_render,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _resolve(args, args.command)
        required = {"render": ("out",), "solve": ("data", "out"),
                    "train": ("data", "out"), "eval": ("data", "checkpoint", "out")}
        _require(settings, *required.get(args.command, ()))
        _log_config(args.command, settings, settings.get("out"))
        return COMMANDS[args.command](settings)
    except ConfigError as exc:
        print(f"pslab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"pslab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"pslab: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
