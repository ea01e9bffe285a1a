"""Command-line entry point: ``react-emg <command> [options]``.

Every command that produces files writes ``config.json`` (the fully
resolved settings plus the tool version) into its output directory.
Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, backbone, conditioning
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, desk_config, full_config, tiny_config
from .data import Corpus, DataError, generate_corpus, read_recording, resolve_split, write_recording
from .data.corpus import CORPUS_INFO
from .data.recording import pose_only
from .data.transforms import instance_normalize
from .evaluate import EvalConfig, evaluate_grid, format_table, write_reports
from .model import build_params
from .ndcore.tensor import no_grad
from .train import NumericalError, TrainConfig, train, write_history

log = logging.getLogger("react_emg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.npz"
MODEL_PRESETS = {"desk": desk_config, "full": full_config, "tiny": tiny_config}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------- presets


def desk_training(phase):
    """Training settings used for desk-scale runs of each phase."""
    common = dict(batch_size=8, warmup_fraction=0.05, window_stride=6000, augment_max_shift=1)
    if phase == "pretrain":
        return TrainConfig(phase="pretrain", epochs=10, base_lr=3e-3, **common)
    if phase == "phase1":
        return TrainConfig(phase="phase1", epochs=2, base_lr=1e-3, **common)
    if phase == "phase2":
        return TrainConfig(phase="phase2", epochs=2, base_lr=1e-3, **common)
    raise ConfigError(f"unknown phase {phase!r}")


def model_preset(name):
    try:
        return MODEL_PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from "
                          f"{sorted(MODEL_PRESETS)}") from None


# ---------------------------------------------------------------- run config


def env_seed(seed):
    value = os.environ.get("REACT_SEED")
    if value is None or value == "":
        return seed
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"REACT_SEED must be an integer, got {value!r}") from None


def load_overrides(path):
    """Flat key-value overrides from a JSON file (or ``None``)."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def training_config(phase, overrides, seed):
    base = desk_training(phase).to_dict()
    unknown = set(overrides) - set(base) - {"model"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base.update({k: v for k, v in overrides.items() if k != "model"})
    base["phase"] = phase
    base["seed"] = seed
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def model_config(overrides, preset):
    cfg = model_preset(preset)
    extra = overrides.get("model", {})
    if not isinstance(extra, dict):
        raise ConfigError("'model' must be an object of hyperparameters")
    try:
        return ModelConfig.from_dict({**cfg.to_dict(), **extra})
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def write_config(out_dir, command, settings):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "tool_version": __version__, **settings}
    (out / CONFIG_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def completed(out_dir, command, settings, product):
    """True when ``out_dir`` already holds this exact run's output."""
    cfg_path = Path(out_dir) / CONFIG_FILE
    if not (cfg_path.exists() and (Path(out_dir) / product).exists()):
        return False
    try:
        prior = json.loads(cfg_path.read_text())
    except json.JSONDecodeError:
        return False
    return prior == {"command": command, "tool_version": __version__, **settings}


# ---------------------------------------------------------------- commands


def cmd_gen_data(users=12, stages=6, sessions=3, seconds=20.0, seed=0, out="corpus"):
    seed = env_seed(seed)
    settings = {"users": users, "stages": stages, "sessions": sessions, "seconds": seconds,
                "seed": seed, "out": str(out)}
    if users < 4:
        raise ConfigError(f"--users {users}: at least 4 users are needed to fill every split")
    if stages < 2:
        raise ConfigError(f"--stages {stages}: at least 2 stages are needed")
    if sessions < 1 or seconds < 2:
        raise ConfigError("need at least one session of at least 2 s")
    try:
        entries = generate_corpus(out, users, stages, sessions, seconds, seed)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from None
    write_config(out, "gen-data", settings)
    log.info("wrote %d recordings to %s", len(entries), out)
    return entries


def _train_phase(command, phase, corpus_dir, out, seed, init=None, config=None, preset="desk"):
    seed = env_seed(seed)
    overrides = load_overrides(config)
    tcfg = training_config(phase, overrides, seed)
    settings = {"corpus": str(corpus_dir), "init": None if init is None else str(init),
                "training": tcfg.to_dict()}
    if init is None:
        cfg = model_config(overrides, preset)
        settings["preset"] = preset
    else:
        ps, cfg, meta = load_checkpoint(init)
        prior = meta.get("provenance", {}).get("phase")
        needed = {"phase1": "pretrain", "phase2": "phase1"}[phase]
        if prior != needed:
            raise CheckpointError(f"{init}: {phase} needs a {needed} checkpoint, got {prior!r}")
        if "model" in overrides and model_config(overrides, preset) != cfg:
            raise CheckpointError(f"{init}: model hyperparameters differ from the run config")
    settings["model"] = cfg.to_dict()
    if completed(out, command, settings, CHECKPOINT_FILE):
        log.info("%s: output already complete, skipping", out)
        return Path(out) / CHECKPOINT_FILE
    corpus = Corpus(corpus_dir)
    _check_corpus_hyperparameters(corpus, cfg)
    if init is None:
        ps = build_params(cfg, seed)
    write_config(out, command, settings)
    result = train(ps, cfg, corpus, tcfg)
    write_history(Path(out) / "history.jsonl", result.history)
    path = Path(out) / CHECKPOINT_FILE
    save_checkpoint(path, ps, cfg, {"seed": seed, "phase": phase, "step": result.steps,
                                    "corpus": str(corpus_dir)})
    return path


def _check_corpus_hyperparameters(corpus, cfg):
    info_path = corpus.root / CORPUS_INFO
    if not info_path.exists():
        return
    rec = corpus.recording(corpus.entries[0])
    if rec.num_channels != cfg.emg_channels or rec.sample_rate != cfg.sample_rate \
            or rec.pose_rate != cfg.pose_rate or rec.pose.shape[1] != cfg.num_dof:
        raise DataError(f"corpus {corpus.root} ({rec.num_channels} channels, "
                        f"{rec.sample_rate}/{rec.pose_rate} Hz, {rec.pose.shape[1]} DOF) does "
                        f"not match the model configuration")


def cmd_pretrain(corpus, out, seed=0, config=None, preset="desk"):
    return _train_phase("pretrain", "pretrain", corpus, out, seed, None, config, preset)


def cmd_train(phase, corpus, init, out, seed=0, config=None):
    if phase not in (1, 2):
        raise ConfigError(f"--phase must be 1 or 2, got {phase}")
    name = f"phase{phase}"
    return _train_phase(f"train-{name}", name, corpus, out, seed, init, config)


def cmd_eval(corpus, checkpoint, out, split="user", modes=backbone.MODES, ks=(15,), seed=0,
             baseline=False):
    seed = env_seed(seed)
    try:
        tag = resolve_split(split)
        EvalConfig(split=split, modes=tuple(modes), ks=tuple(ks), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ps, cfg, _ = load_checkpoint(checkpoint)
    data = Corpus(corpus)
    _check_corpus_hyperparameters(data, cfg)
    settings = {"corpus": str(corpus), "checkpoint": str(checkpoint), "split": tag,
                "modes": list(modes), "ks": list(ks), "seed": seed, "baseline": baseline}
    write_config(out, "eval", settings)
    grid = evaluate_grid(ps, cfg, data, split, modes, ks, seed, conditioned=not baseline)
    reports = list(grid.values())
    write_reports(Path(out) / "reports.jsonl", reports)
    table = format_table(reports)
    (Path(out) / "table.txt").write_text(table + "\n")
    return reports, table


def _calibration_features(ps, cfg, paths, clip_seconds=3.0):
    clips = []
    for p in paths:
        rec = read_recording(p)
        n = int(round(clip_seconds * rec.sample_rate))
        for start in range(0, rec.num_samples - n + 1, n):
            clips.append(instance_normalize(rec.emg[:, start:start + n]))
    clips = clips[:cfg.max_calibration]
    if not clips:
        return None
    with no_grad():
        return backbone.encode(ps, cfg, np.stack(clips).astype(np.float64)).data


def cmd_infer(checkpoint, recording, out, calib=(), mode="regression", dump=None,
              baseline=False):
    """Predict the pose of one recording and write it as a pose-only REB1 file.

    Windows advance by one content span, so predictions tile the frames
    from the first window's first label frame onwards; earlier frames are
    marked invalid.  Tracking starts from the recording's pose at that
    first labeled frame and chains each window from the previous one's
    last prediction.
    """
    if mode not in backbone.MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid modes: {backbone.MODES}")
    ps, cfg, _ = load_checkpoint(checkpoint)
    rec = read_recording(recording)
    if rec.num_channels != cfg.emg_channels:
        raise DataError(f"{recording}: {rec.num_channels} channels, model expects "
                        f"{cfg.emg_channels}")
    emg = instance_normalize(rec.emg).astype(np.float64)
    film = None
    if not baseline:
        feats = _calibration_features(ps, cfg, calib)
        with no_grad():
            film, _ = conditioning.user_film(ps, cfg, feats)
    spf = cfg.samples_per_frame
    pose = np.zeros((rec.num_frames, cfg.num_dof))
    valid = np.zeros(rec.num_frames, dtype=bool)
    prev = None
    for start in range(0, rec.num_samples - cfg.window_samples + 1, cfg.content_samples):
        first = -(-(start + cfg.context_samples) // spf)
        n = min(cfg.content_frames, rec.num_frames - first)
        if n <= 0:
            break
        with no_grad():
            f = backbone.encode(ps, cfg, emg[None, :, start:start + cfg.window_samples])
            if film is not None:
                f = conditioning.modulate(f, film)
            f = backbone.align_frames(f, cfg.content_samples, spf)
            init = None
            if mode == backbone.TRACKING:
                init = rec.pose[first].astype(np.float64) if prev is None else prev
            y = backbone.decode(ps, cfg, f, mode, init).data[0]
        pose[first:first + n] = y[:n]
        valid[first:first + n] = True
        prev = y[-1]
    if not valid.any():
        raise DataError(f"{recording}: shorter than one {cfg.window_samples}-sample window")
    out_rec = pose_only(pose, valid, rec.user_id, rec.stage_id, rec.session_id,
                        rec.sample_rate, rec.pose_rate)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_recording(out, out_rec)
    settings = {"checkpoint": str(checkpoint), "recording": str(recording),
                "calib": [str(c) for c in calib], "mode": mode, "baseline": baseline,
                "dump": None if dump is None else str(dump)}
    write_config(Path(out).parent, "infer", settings)
    if dump is not None:
        with open(dump, "w") as fh:
            fh.write("# frame valid " + " ".join(f"q{j}" for j in range(cfg.num_dof)) + "\n")
            for t in range(rec.num_frames):
                fh.write(f"{t} {int(valid[t])} " + " ".join(f"{v:.6f}" for v in pose[t]) + "\n")
    return out_rec


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _ks(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects integers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="react-emg", description="User-adaptive EMG-to-hand-pose tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--users", type=int, default=12)
    g.add_argument("--stages", type=int, default=6)
    g.add_argument("--sessions", type=int, default=3)
    g.add_argument("--seconds", type=float, default=20.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="train the bare backbone")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", help="JSON file of training overrides")
    t.add_argument("--preset", default="desk", choices=sorted(MODEL_PRESETS))

    t = sub.add_parser("train", help="train the conditioning pathway (phase 1) or everything "
                                     "(phase 2)")
    t.add_argument("--phase", type=int, required=True, choices=(1, 2))
    t.add_argument("--corpus", required=True)
    t.add_argument("--init", required=True, help="checkpoint from the previous phase")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", help="JSON file of training overrides")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a generalization split")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="user", help="user, stage or user_stage")
    e.add_argument("--mode", choices=(*backbone.MODES, "both"), default="both")
    e.add_argument("--k", type=_ks, default=(15,), help="calibration size(s), comma separated")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--baseline", action="store_true",
                   help="skip the conditioning pathway (bare backbone)")

    i = sub.add_parser("infer", help="predict the pose of one recording")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--recording", required=True)
    i.add_argument("--calib", nargs="*", default=[], help="calibration recordings (REB1)")
    i.add_argument("--mode", choices=backbone.MODES, default=backbone.REGRESSION)
    i.add_argument("--out", required=True, help="output REB1 pose file")
    i.add_argument("--dump", help="optional per-frame text dump")
    i.add_argument("--baseline", action="store_true")
    return p


def run(args):
    if args.command == "gen-data":
        cmd_gen_data(args.users, args.stages, args.sessions, args.seconds, args.seed, args.out)
    elif args.command == "pretrain":
        print(cmd_pretrain(args.corpus, args.out, args.seed, args.config, args.preset))
    elif args.command == "train":
        print(cmd_train(args.phase, args.corpus, args.init, args.out, args.seed, args.config))
    elif args.command == "eval":
        modes = backbone.MODES if args.mode == "both" else (args.mode,)
        _, table = cmd_eval(args.corpus, args.checkpoint, args.out, args.split, modes, args.k,
                            args.seed, args.baseline)
        print(table)
    elif args.command == "infer":
        cmd_infer(args.checkpoint, args.recording, args.out, args.calib, args.mode, args.dump,
                  args.baseline)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
