"""Command-line entry point: ``didface <subcommand> [options]``.

Every subcommand reads its inputs from explicit paths (or the data root named
by ``DIDFACE_DATA``) and writes its outputs to ``--out``, so any stage can be
re-run from the artifacts of the previous one.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .codec import CodecConfig, QCStats, compute_qc_stats, load_codec, save_codec, train_codec
from .data import default_data_root, load_image_dir, synthetic_faces, write_image_dir
from .degradation import ManifestRecord, build_manifest, degrade, read_manifest, read_png, write_manifest, write_png
from .errors import ConfigurationError, DidFaceError, ParameterError, ValidationError
from .identity import EmbeddingOverrides, IdentityEmbedder
from .metrics import evaluate, write_report
from .trainer import (
    StageCheckpoint,
    TrainConfig,
    restore,
    synthesize_stage1,
    train_stage1,
    train_stage2,
    write_training_log,
)

log = logging.getLogger("didface")

CODEC_PREFIX = "codec."
_TRAIN_SKIP = {"stage", "source"}  # chosen by the subcommand, not the file


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    floor: float = 0.01


def _schema() -> dict[str, tuple[str, Any]]:
    """Config key -> (section, default value)."""
    keys: dict[str, tuple[str, Any]] = {"floor": ("run", 0.01)}
    for f in fields(TrainConfig):
        if f.name not in _TRAIN_SKIP:
            keys[f.name] = ("train", getattr(TrainConfig(), f.name))
    for f in fields(CodecConfig):
        keys[CODEC_PREFIX + f.name] = ("codec", getattr(CodecConfig(), f.name))
    return keys


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ValidationError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_from_mapping(values: dict[str, str]) -> RunConfig:
    schema = _schema()
    train_kw: dict[str, Any] = {}
    codec_kw: dict[str, Any] = {}
    floor = 0.01
    for key, raw in values.items():
        if key not in schema:
            raise ValidationError(key, "unknown configuration key")
        section, default = schema[key]
        value = _coerce(key, raw, default)
        # validate each key on its own so the error can name it
        try:
            if section == "train":
                TrainConfig(**{key: value})
                train_kw[key] = value
            elif section == "codec":
                name = key[len(CODEC_PREFIX):]
                CodecConfig(**{name: value})
                codec_kw[name] = value
            else:
                if value <= 0:
                    raise ParameterError("floor must be positive")
                floor = value
        except ParameterError as exc:
            raise ValidationError(key, str(exc)) from None
    try:
        return RunConfig(TrainConfig(**train_kw), CodecConfig(**codec_kw), floor)
    except ParameterError as exc:
        raise ValidationError(",".join(sorted(train_kw) + sorted(codec_kw)), str(exc)) from None


def parse_config(path: str | Path | None) -> RunConfig:
    """Read a ``key = value`` file (``#`` starts a comment). ``None`` gives defaults."""
    if path is None:
        return RunConfig()
    values: dict[str, str] = {}
    with open(path) as fh:  # a missing file raises the usual OSError
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"line {lineno}", f"expected key = value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ValidationError(key, "duplicate key")
            values[key] = raw
    return config_from_mapping(values)


def write_config(path: str | Path, cfg: RunConfig) -> None:
    lines = [f"floor = {_format(cfg.floor)}"]
    for f in fields(TrainConfig):
        if f.name not in _TRAIN_SKIP:
            lines.append(f"{f.name} = {_format(getattr(cfg.train, f.name))}")
    for f in fields(CodecConfig):
        lines.append(f"{CODEC_PREFIX}{f.name} = {_format(getattr(cfg.codec, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- ablations ----------------------------------------------------------------

VARIANTS = ("2adain", "no-stage1", "noise-inject", "no-inject", "beta=<v>")


def apply_variants(train: TrainConfig, variants: Sequence[str]) -> TrainConfig:
    changes: dict[str, Any] = {}
    for v in variants:
        if v == "2adain":
            changes["compensation"] = "off"
        elif v == "no-stage1":
            changes["source"] = "lq"
        elif v == "noise-inject":
            changes["compensation"] = "noise"
        elif v == "no-inject":
            changes["compensation"] = "none"
        elif v.startswith("beta="):
            try:
                changes["lambda_info"] = float(v[len("beta="):])
            except ValueError:
                raise ValidationError(v, "beta needs a number, e.g. beta=0.01") from None
        else:
            raise ValidationError(v, f"unknown variant; choose from {', '.join(VARIANTS)}")
    try:
        return replace(train, **changes)
    except ParameterError as exc:
        raise ValidationError(",".join(variants), str(exc)) from None


# --- subcommands ----------------------------------------------------------------


def _data_dir(args, sub: str) -> Path:
    return Path(args.data) if args.data else default_data_root() / sub


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigurationError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} not found: {p}")
    return p


def _load_stats(args) -> QCStats:
    return QCStats.load(_need(args.stats, "stats"))


def _paired(names_a: list[str], names_b: list[str], what: str) -> None:
    a = [Path(n).name for n in names_a]
    b = [Path(n).name for n in names_b]
    if a != b:
        raise ConfigurationError(f"{what}: file names do not match the HQ set")


def cmd_faces(args, cfg: RunConfig) -> None:
    imgs = synthetic_faces(args.n, size=cfg.codec.resolution, seed=args.seed if args.seed is not None else 0)
    write_image_dir(args.out, imgs)
    log.info("wrote %d faces to %s", len(imgs), args.out)


def cmd_train_codec(args, cfg: RunConfig) -> None:
    _, imgs = load_image_dir(_data_dir(args, "hq"), cfg.codec.resolution)
    codec, losses = train_codec(imgs, cfg.codec)
    save_codec(codec, args.out)
    if args.log:
        write_training_log(args.log, [{"iteration": i, "rec": v} for i, v in enumerate(losses)])


def cmd_stats(args, cfg: RunConfig) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    _, imgs = load_image_dir(_data_dir(args, "hq"), codec.config.resolution)
    compute_qc_stats(imgs, codec, cfg.floor).save(args.out)


def cmd_degrade(args, cfg: RunConfig) -> None:
    src = _data_dir(args, "hq")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Path(args.manifest) if args.manifest else out / "manifest.jsonl"
    if manifest.exists():
        records = list(read_manifest(manifest))
    else:
        paths, _ = load_image_dir(src)
        seed = args.seed if args.seed is not None else cfg.train.seed
        records = build_manifest(paths, seed)
    done = []
    for rec in records:
        target = out / Path(rec.source).name
        write_png(target, degrade(read_png(rec.source), rec.params))
        done.append(ManifestRecord(rec.source, rec.params, str(target)))
    write_manifest(manifest, done)
    log.info("degraded %d images into %s", len(done), out)


def cmd_train_stage1(args, cfg: RunConfig) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    stats = _load_stats(args)
    _, hq = load_image_dir(_data_dir(args, "hq"), cfg.train.resolution)
    ck = train_stage1(hq, codec, stats, replace(cfg.train, stage=1))
    ck.save(args.out)
    if args.log:
        write_training_log(args.log, ck.log)


def cmd_synth_stage1(args, cfg: RunConfig) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    ck = StageCheckpoint.load(_need(args.stage1, "stage1"), stage=1)
    names, lq = load_image_dir(_data_dir(args, "lq"), ck.config.resolution)
    steps = args.steps or ck.config.sampler_steps
    seed = args.seed if args.seed is not None else ck.config.seed
    write_image_dir(args.out, synthesize_stage1(ck, codec, lq, steps, seed), names)


def _train_stage2(args, cfg: RunConfig, train: TrainConfig) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    stats = _load_stats(args)
    names, hq = load_image_dir(_data_dir(args, "hq"), train.resolution)
    stage1 = stage1_out = None
    if train.source == "stage1":
        stage1 = StageCheckpoint.load(_need(args.stage1, "stage1"), stage=1)
        d1_names, stage1_out = load_image_dir(_need(args.xd1, "xd1"), train.resolution)
        _paired(names, d1_names, "stage-1 outputs")
    ck = train_stage2(hq, stage1_out, stage1, codec, stats, replace(train, stage=2))
    ck.save(args.out)
    if args.log:
        write_training_log(args.log, ck.log)


def cmd_train_stage2(args, cfg: RunConfig) -> None:
    _train_stage2(args, cfg, cfg.train)


def cmd_ablate(args, cfg: RunConfig) -> None:
    _train_stage2(args, cfg, apply_variants(cfg.train, args.variant))


def cmd_restore(args, cfg: RunConfig) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    stats = _load_stats(args)
    stage2 = StageCheckpoint.load(_need(args.stage2, "stage2"), stats=stats, stage=2)
    stage1 = None
    if stage2.config.source == "stage1":
        stage1 = StageCheckpoint.load(_need(args.stage1, "stage1"), stage=1)
    names, lq = load_image_dir(_data_dir(args, "lq"), stage2.config.resolution)
    steps = args.steps or stage2.config.sampler_steps
    seed = args.seed if args.seed is not None else stage2.config.seed
    embedder = IdentityEmbedder(stage2.config.resolution)
    if args.id_override:
        table = EmbeddingOverrides.load(args.id_override)
        # images without an override keep their own embedding; restore them one by one
        out = []
        for i, name in enumerate(names):
            out.append(restore(lq[i : i + 1], stage1, stage2, codec, steps, seed + i, table.get(name), embedder)[0])
        restored = np.stack(out)
    else:
        restored = restore(lq, stage1, stage2, codec, steps, seed, embedder=embedder)
    write_image_dir(args.out, restored, names)


def cmd_eval(args, cfg: RunConfig) -> None:
    names, restored = load_image_dir(_need(args.restored, "restored"))
    ref_names, reference = load_image_dir(_data_dir(args, "hq"))
    _paired(names, ref_names, "restored images")
    rows = evaluate(restored, reference, [Path(n).name for n in names])
    write_report(args.out, rows)
    mean = rows[-1]
    print(f"mean psnr {mean['psnr']:.3f} ssim {mean['ssim']:.4f} id_sim {mean['id_sim']:.4f}")


COMMANDS = {
    "faces": (cmd_faces, "write a synthetic face corpus (demo data)"),
    "train-codec": (cmd_train_codec, "train the image codec"),
    "stats": (cmd_stats, "compute per-channel moment statistics"),
    "degrade": (cmd_degrade, "synthesize low-quality images, recorded in a manifest"),
    "train-stage1": (cmd_train_stage1, "train the first diffusion stage"),
    "synth-stage1": (cmd_synth_stage1, "run stage 1 over low-quality images"),
    "train-stage2": (cmd_train_stage2, "train the bottleneck and second stage"),
    "restore": (cmd_restore, "two-stage restoration of low-quality images"),
    "eval": (cmd_eval, "PSNR / SSIM / identity report against references"),
    "ablate": (cmd_ablate, "train a stage-2 ablation variant"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seed from the config file")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="didface", description="Two-stage diffusion face restoration.")
    subs = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = subs.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "faces":
            p.add_argument("--n", type=int, default=16)
            continue
        if name == "eval":
            p.add_argument("--restored", required=True)
            p.add_argument("--data", help="reference HQ directory (default: $DIDFACE_DATA/hq)")
            continue
        p.add_argument("--data", help="input image directory (default under $DIDFACE_DATA)")
        if name == "ablate":
            p.add_argument("variant", nargs="+", help=" | ".join(VARIANTS))
        if name == "degrade":
            p.add_argument("--manifest", help="replayed if it exists, written otherwise")
        if name in ("train-codec", "train-stage1", "train-stage2", "ablate"):
            p.add_argument("--log", help="JSONL training log")
        if name != "train-codec" and name != "degrade":
            p.add_argument("--codec")
        if name in ("train-stage1", "train-stage2", "restore", "ablate"):
            p.add_argument("--stats")
        if name in ("synth-stage1", "train-stage2", "restore", "ablate"):
            p.add_argument("--stage1")
        if name in ("train-stage2", "ablate"):
            p.add_argument("--xd1", help="directory of stage-1 outputs named like the HQ images")
        if name == "restore":
            p.add_argument("--stage2")
            p.add_argument("--id-override", help="JSON map of image name -> 128 floats")
        if name in ("synth-stage1", "restore"):
            p.add_argument("--steps", type=int, default=None, help="sampler steps (default from checkpoint)")
    return parser


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=replace(cfg.train, seed=seed), codec=replace(cfg.codec, seed=seed))


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _with_seed(parse_config(args.config), args.seed)
        COMMANDS[args.command][0](args, cfg)
    except (DidFaceError, OSError) as exc:
        print(f"didface {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
