"""Command-line entry point: ``vkd <subcommand> [flags]``.

Settings resolve as built-in defaults < ``--config`` TOML file < flags.
The TOML file has sections ``data``, ``model``, ``sampler``, ``loss``,
``schedule`` and ``eval`` plus an optional top-level ``seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .errors import VKDError

log = logging.getLogger("vkd")

SECTIONS = ("data", "model", "sampler", "loss", "schedule", "eval")

# (section, key) -> default, per stage where they differ
TEACHER_SCHEDULE = {"epochs": 300, "lr": 1e-4, "milestones": [100, 200], "lr_decay": 0.1}
STUDENT_SCHEDULE = {"epochs": 500, "lr": 1e-4, "milestones": [300, 450], "lr_decay": 0.1}
DEFAULTS = {
    ("model", "arch"): "tinyconv",
    ("model", "embed_dim"): 64,
    ("model", "student_arch"): None,
    ("model", "student_dim"): None,
    ("sampler", "P"): 8,
    ("sampler", "K"): 4,
    ("sampler", "frames_per_bag"): 8,
    ("sampler", "N"): 8,
    ("sampler", "M"): 2,
    ("sampler", "distill_source"): "views",
    ("loss", "tau"): 10.0,
    ("loss", "alpha"): 0.1,
    ("loss", "beta"): 1e-4,
    ("loss", "enable_ce"): True,
    ("loss", "enable_tr"): True,
    ("loss", "enable_kd"): True,
    ("loss", "enable_dp"): True,
    ("loss", "distance"): "euclidean",
    ("schedule", "flip"): True,
    ("schedule", "random_erase"): True,
    ("eval", "protocol"): "I2V",
    ("eval", "exclusion"): "standard",
    ("eval", "gallery_frames"): "all",
    ("eval", "sizes"): [1, 2, 4, 6],
    ("eval", "probe_epochs"): 300,
    ("eval", "probe_lr"): 1e-3,
    ("eval", "mode"): "tracklet",
    ("eval", "ids"): 8,
    ("eval", "bags_per_id"): 3,
    ("eval", "bag_size"): 8,
    ("seed",): 0,
}


def _int_list(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _flag(p, name, key, type_=None, help_="", default=None, **kw):
    """Add a flag whose value lands under ``key`` only when given."""
    shown = DEFAULTS.get(key) if default is None else default
    if kw.get("action") == "store_false":
        p.add_argument(name, dest="/".join(key), default=None, help=f"{help_} (default: enabled)", **kw)
    else:
        kw.setdefault("metavar", key[-1].upper())
        p.add_argument(name, dest="/".join(key), type=type_, default=None,
                       help=f"{help_} (default: {shown})", **kw)


def _seed(p):
    _flag(p, "--seed", ("seed",), int, "single source of all randomness")


def _config(p):
    p.add_argument("--config", type=Path, help="TOML config file; flags override its values")


def _model_flags(p):
    _flag(p, "--arch", ("model", "arch"), str, "encoder architecture")
    _flag(p, "--embed-dim", ("model", "embed_dim"), int, "embedding size D")


def _sampler_flags(p, distill=False):
    _flag(p, "--P", ("sampler", "P"), int, "identities per batch")
    _flag(p, "--K", ("sampler", "K"), int, "samples per identity")
    if distill:
        _flag(p, "--N", ("sampler", "N"), int, "teacher bag size")
        _flag(p, "--M", ("sampler", "M"), int, "student bag size")
        _flag(p, "--distill-source", ("sampler", "distill_source"), str, "views or tracklet",
              choices=["views", "tracklet"])
    else:
        _flag(p, "--frames-per-bag", ("sampler", "frames_per_bag"), int, "equally spaced frames per tracklet bag")


def _schedule_flags(p, defaults):
    _flag(p, "--epochs", ("schedule", "epochs"), int, "training epochs", default=defaults["epochs"])
    _flag(p, "--lr", ("schedule", "lr"), float, "base learning rate (Adam)", default=defaults["lr"])
    _flag(p, "--milestones", ("schedule", "milestones"), _int_list, "epochs where lr decays",
          default=",".join(map(str, defaults["milestones"])))
    _flag(p, "--lr-decay", ("schedule", "lr_decay"), float, "lr multiplier at each milestone",
          default=defaults["lr_decay"])
    _flag(p, "--no-flip", ("schedule", "flip"), help_="disable horizontal flips", action="store_false")
    _flag(p, "--no-erase", ("schedule", "random_erase"), help_="disable random erasing", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vkd", description="Views knowledge distillation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="output dataset root")
    p.add_argument("--ids", type=int, default=30, help="identities (default: 30)")
    p.add_argument("--cameras", type=int, default=4, help="cameras (default: 4)")
    p.add_argument("--tracklets", type=int, default=2, help="tracklets per identity and camera (default: 2)")
    p.add_argument("--frames", type=int, default=6, help="frames per tracklet (default: 6)")
    p.add_argument("--size", type=int, default=32, help="image side in pixels (default: 32)")
    p.add_argument("--camera-gain", type=float, default=0.25, help="per-camera colour shift (default: 0.25)")
    p.add_argument("--noise", type=float, default=0.06, help="pixel noise std (default: 0.06)")
    _seed(p)

    p = sub.add_parser("train-teacher", help="stage 1: train the teacher")
    p.add_argument("--data", type=Path, help="dataset root")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch JSONL log (default: <out>.log.jsonl)")
    _config(p)
    _model_flags(p)
    _sampler_flags(p)
    _schedule_flags(p, TEACHER_SCHEDULE)
    _flag(p, "--no-tr", ("loss", "enable_tr"), help_="disable the triplet term", action="store_false")
    _seed(p)

    p = sub.add_parser("distill", help="stage 2: distill a student from a teacher")
    p.add_argument("--data", type=Path, help="dataset root")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--out", type=Path, required=True, help="student checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch JSONL log (default: <out>.log.jsonl)")
    _config(p)
    _model_flags(p)
    _flag(p, "--student-arch", ("model", "student_arch"), str, "student architecture", default="the teacher's")
    _flag(p, "--student-dim", ("model", "student_dim"), int, "student embedding size", default="the teacher's")
    _sampler_flags(p, distill=True)
    _schedule_flags(p, STUDENT_SCHEDULE)
    _flag(p, "--tau", ("loss", "tau"), float, "distillation temperature")
    _flag(p, "--alpha", ("loss", "alpha"), float, "weight of the KD term")
    _flag(p, "--beta", ("loss", "beta"), float, "weight of the distance preservation term")
    for term in ("ce", "tr", "kd", "dp"):
        _flag(p, f"--no-{term}", ("loss", f"enable_{term}"), help_=f"disable the {term.upper()} term",
              action="store_false")
    _seed(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _eval_common(p)
    _flag(p, "--protocol", ("eval", "protocol"), str.upper, "I2I, I2V or V2V", choices=["I2I", "I2V", "V2V"])
    _flag(p, "--gallery-frames", ("eval", "gallery_frames"), str, "frames per gallery tracklet or 'all'")

    p = sub.add_parser("probe-camera", help="camera-bias linear probe on gallery features")
    _eval_common(p)
    _flag(p, "--epochs", ("eval", "probe_epochs"), int, "probe training epochs")
    _flag(p, "--lr", ("eval", "probe_lr"), float, "probe learning rate, halved every 50 epochs")

    p = sub.add_parser("distmat", help="distance matrix block report")
    _eval_common(p, exclusion=False)
    _flag(p, "--mode", ("eval", "mode"), str, "tracklet or views bags", choices=["tracklet", "views"])
    _flag(p, "--ids", ("eval", "ids"), int, "identities in the matrix")
    _flag(p, "--bags-per-id", ("eval", "bags_per_id"), int, "bags per identity")
    _flag(p, "--bag-size", ("eval", "bag_size"), int, "frames per bag")
    p.add_argument("--split", default="train", choices=["train", "gallery"], help="split to draw bags from (default: train)")

    p = sub.add_parser("sweep-gallery", help="I2V metrics against gallery tracklet length")
    _eval_common(p)
    _flag(p, "--sizes", ("eval", "sizes"), _int_list, "gallery frame counts")
    return parser


def _eval_common(p, exclusion=True):
    p.add_argument("--ckpt", type=Path, required=True, help="model checkpoint")
    p.add_argument("--data", type=Path, help="dataset root")
    p.add_argument("--out", type=Path, required=True, help="report path")
    _config(p)
    if exclusion:
        _flag(p, "--exclusion", ("eval", "exclusion"), str, "standard or all-same-camera",
              choices=["standard", "all-same-camera"])
    _seed(p)


def resolve_settings(args, schedule_defaults=None) -> tuple:
    """Merge defaults, config file and flags; return (settings, file_values, flag_values)."""
    settings = dict(DEFAULTS)
    for k, v in (schedule_defaults or {}).items():
        settings[("schedule", k)] = v
    known = set(settings) | {("schedule", k) for k in TEACHER_SCHEDULE} | {("data", "root")}
    file_values = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        for sec, body in doc.items():
            if sec == "seed":
                file_values[("seed",)] = body
            elif sec in SECTIONS and isinstance(body, dict):
                for k, v in body.items():
                    if (sec, k) not in known:
                        raise VKDError(f"unknown config key [{sec}] {k}")
                    file_values[(sec, k)] = v
            else:
                raise VKDError(f"unknown config section {sec!r}; expected one of {SECTIONS}")
    flag_values = {}
    for dest, v in vars(args).items():
        if "/" in dest or dest == "seed":
            if v is not None:
                flag_values[tuple(dest.split("/"))] = v
    settings.update(file_values)
    settings.update(flag_values)
    return settings, file_values, flag_values


def _data_root(args, settings):
    root = args.data or settings.get(("data", "root"))
    if root is None:
        raise VKDError("no dataset root: pass --data or set [data] root in the config")
    return Path(root)


def _train_config(settings, stage):
    from .losses import LossConfig
    from .sampling import SamplerConfig
    from .trainer import Augmentation, TrainConfig

    s = lambda *k: settings[k]  # noqa: E731
    seed = int(s("seed"))
    sampler = SamplerConfig(P=s("sampler", "P"), K=s("sampler", "K"), frames_per_bag=s("sampler", "frames_per_bag"),
                            N=s("sampler", "N"), M=s("sampler", "M"), seed=seed,
                            distill_source=s("sampler", "distill_source"))
    if stage == "teacher":
        loss = LossConfig(enable_ce=True, enable_tr=s("loss", "enable_tr"), enable_kd=False, enable_dp=False,
                          distance=s("loss", "distance"))
    else:
        loss = LossConfig(**{f.name: settings[("loss", f.name)] for f in fields(LossConfig)})
    return TrainConfig(
        stage=stage,
        epochs=s("schedule", "epochs"),
        base_lr=s("schedule", "lr"),
        milestones=tuple(s("schedule", "milestones")),
        lr_decay=s("schedule", "lr_decay"),
        sampler=sampler,
        loss=loss,
        arch=s("model", "arch"),
        embed_dim=s("model", "embed_dim"),
        seed=seed,
        augmentation=Augmentation(flip=s("schedule", "flip"), random_erase=s("schedule", "random_erase")),
    )


def _jsonable(d):
    return {"/".join(k): v for k, v in sorted(d.items())}


def write_run_manifest(args, settings, file_values, flag_values, outputs) -> Path:
    resolved = _jsonable(settings)
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:16]
    out = Path(args.out)
    path = out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    doc = {
        "command": args.command,
        "config_file": str(args.config) if getattr(args, "config", None) else None,
        "config_values": _jsonable(file_values),
        "flag_values": _jsonable(flag_values),
        "settings": resolved,
        "config_hash": digest,
        "seed": settings[("seed",)],
        "version": __version__,
        "outputs": [str(p) for p in outputs],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def cmd_gen_synth(args, settings):
    from .synthetic import SynthConfig, generate_synthetic

    cfg = SynthConfig(args.ids, args.cameras, args.tracklets, args.frames, args.size, int(settings[("seed",)]),
                      noise=args.noise, camera_gain=args.camera_gain)
    generate_synthetic(cfg, args.out)
    return [args.out / n for n in ("train.manifest", "query.manifest", "gallery.manifest")]


def cmd_train_teacher(args, settings):
    from .datamodel import load_manifest
    from .trainer import train_teacher

    train = load_manifest(_data_root(args, settings) / "train.manifest", "train")
    cfg = _train_config(settings, "teacher")
    log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")
    train_teacher(train, cfg, out=args.out, log_path=log_path)
    return [args.out, log_path]


def cmd_distill(args, settings):
    from .datamodel import load_manifest
    from .trainer import distill_student

    train = load_manifest(_data_root(args, settings) / "train.manifest", "train")
    cfg = _train_config(settings, "distill")
    log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")
    distill_student(train, args.teacher, cfg, out=args.out, log_path=log_path,
                    student_arch=settings[("model", "student_arch")], student_dim=settings[("model", "student_dim")])
    return [args.out, log_path]


def cmd_eval(args, settings):
    from .datamodel import load_dataset_root
    from .evaluation import evaluate_protocol

    data = load_dataset_root(_data_root(args, settings))
    frames = settings[("eval", "gallery_frames")]
    frames = "all" if str(frames) == "all" else int(frames)
    report = evaluate_protocol(args.ckpt, data, settings[("eval", "protocol")], settings[("eval", "exclusion")],
                               gallery_frames=frames)
    args.out.write_text(report.to_text(), encoding="utf-8")
    return [args.out]


def cmd_probe(args, settings):
    from .analysis import fit_camera_probe
    from .datamodel import load_dataset_root
    from .evaluation import extract_features

    data = load_dataset_root(_data_root(args, settings))
    table = extract_features(args.ckpt, data.gallery, "gallery", "V2V")
    report = fit_camera_probe(table, settings[("eval", "probe_epochs")], settings[("eval", "probe_lr")],
                              seed=int(settings[("seed",)]))
    args.out.write_text(report.to_text(), encoding="utf-8")
    return [args.out]


def cmd_distmat(args, settings):
    from .analysis import distance_block_report, write_block_report
    from .datamodel import load_dataset_root

    data = load_dataset_root(_data_root(args, settings))
    split = data.train if args.split == "train" else data.gallery
    report = distance_block_report(args.ckpt, split, settings[("eval", "mode")], settings[("eval", "ids")],
                                   settings[("eval", "bags_per_id")], settings[("eval", "bag_size")],
                                   seed=int(settings[("seed",)]))
    return write_block_report(report, args.out)


def cmd_sweep(args, settings):
    from .datamodel import load_dataset_root
    from .evaluation import gallery_size_sweep

    data = load_dataset_root(_data_root(args, settings))
    rows = gallery_size_sweep(args.ckpt, data, settings[("eval", "sizes")], settings[("eval", "exclusion")])
    rows = [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items()} for r in rows]
    args.out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [args.out]


COMMANDS = {
    "gen-synth": (cmd_gen_synth, None),
    "train-teacher": (cmd_train_teacher, TEACHER_SCHEDULE),
    "distill": (cmd_distill, STUDENT_SCHEDULE),
    "eval": (cmd_eval, None),
    "probe-camera": (cmd_probe, None),
    "distmat": (cmd_distmat, None),
    "sweep-gallery": (cmd_sweep, None),
}


def dispatch(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VKD_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 2, --help and --version exit 0
        return int(exc.code or 0)
    func, schedule = COMMANDS[args.command]
    try:
        settings, file_values, flag_values = resolve_settings(args, schedule)
        outputs = func(args, settings)
        write_run_manifest(args, settings, file_values, flag_values, outputs)
    except (VKDError, ValueError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"vkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
