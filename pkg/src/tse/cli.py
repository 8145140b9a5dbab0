"""Command-line entry points: gen-data, train-embedder, train, extract,
evaluate, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import os

# single-threaded BLAS: the matrices here are small enough that thread
# fan-out costs more than it saves (must be set before numpy loads)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data, dsp, losses, networks, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GRADCHECK_THRESHOLD = 1e-4


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


class _LogFile:
    """Append-only log writer; lines are deterministic (no timestamps)."""

    def __init__(self, path: Path, echo: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.echo = echo

    def __call__(self, line: str):
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
        if self.echo:
            print(line)


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out_dir)
    if args.from_dir:
        dataset = data.build_dataset_from_dirs(
            args.from_dir, seed=args.seed, duration=args.duration,
            sample_rate=args.rate, train_count=args.train_count,
            val_count=args.val_count, test_count=args.test_count)
    else:
        dataset = data.build_dataset(
            num_speakers=args.speakers, utterances_per_speaker=args.utterances,
            seed=args.seed, duration=args.duration, sample_rate=args.rate,
            train_count=args.train_count, val_count=args.val_count,
            test_count=args.test_count)
    manifest_path = data.write_dataset(dataset, out_dir)
    _write_json(out_dir / "gen_config.json", {
        "speakers": args.speakers, "utterances": args.utterances,
        "duration": args.duration, "rate": args.rate, "seed": args.seed,
        "train_count": args.train_count, "val_count": args.val_count,
        "test_count": args.test_count, "from_dir": args.from_dir})
    print(f"wrote {manifest_path}")
    return EXIT_OK


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise train.ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise train.ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise train.ConfigError(f"config file {path} must hold a JSON object")
    return payload


def cmd_train_embedder(args) -> int:
    manifest = data.load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    overrides = _load_config_file(args.config)

    rate = manifest["sample_rate"]
    model_fields = {f for f in networks.EmbedderConfig.__dataclass_fields__}
    model_overrides = {k: v for k, v in overrides.items() if k in model_fields}
    train_overrides = {k: v for k, v in overrides.items() if k not in model_fields}
    if rate == 16000 and not model_overrides:
        emb_config = networks.EmbedderConfig()
    else:
        base = networks.EmbedderConfig.desk(sample_rate=rate)
        emb_config = networks.EmbedderConfig(**{**base.__dict__, **model_overrides})
    try:
        train_config = train.EmbedderTrainConfig(seed=args.seed, **train_overrides)
    except TypeError as exc:
        raise train.ConfigError(f"bad embedder config: {exc}") from exc
    if args.epochs is not None:
        train_config.epochs = args.epochs

    samples = data.load_split(manifest, "train")
    utterances = train.collect_speaker_utterances(samples)
    model = networks.EmbedderModel(emb_config, seed=args.seed)
    log = _LogFile(out_dir / "embedder_log.txt", echo=not args.quiet)
    trainer = train.EmbedderTrainer(model, utterances, train_config, log=log)
    summary = trainer.train()

    ckpt = out_dir / "embedder.npz"
    networks.save_checkpoint(ckpt, embedder=model,
                             extra={"speakers": summary["speakers"]})
    _write_json(out_dir / "config.json", {
        "embedder_config": model.config.__dict__,
        "train": train_config.__dict__, "manifest": str(args.manifest)})
    print(f"wrote {ckpt}")
    return EXIT_OK


def _resolved_train_config(args) -> train.TrainConfig:
    payload = _load_config_file(args.config)
    known = set(train.TrainConfig.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise train.ConfigError(f"unknown config keys: {sorted(unknown)}")
    flags = {
        "seed": args.seed, "wiring": args.wiring, "loss": args.loss,
        "width_factor": args.width_factor, "learning_rate": args.learning_rate,
        "batch_size": args.batch_size, "max_epochs": args.max_epochs,
        "early_stop_patience": args.patience, "dtype": args.dtype,
        "steps_per_epoch": args.steps_per_epoch,
    }
    for key, value in flags.items():
        if value is not None:
            payload[key] = value
    try:
        return train.TrainConfig(**payload)
    except TypeError as exc:
        raise train.ConfigError(f"bad train config: {exc}") from exc


def cmd_train(args) -> int:
    config = _resolved_train_config(args)
    manifest = data.load_manifest(args.manifest)
    embedder, _ = networks.load_embedder(args.embedder)
    if embedder.config.sample_rate != manifest["sample_rate"]:
        raise data.DataError(
            f"embedder rate {embedder.config.sample_rate} != manifest rate "
            f"{manifest['sample_rate']}")

    sep_config = networks.SeparatorConfig(
        sample_rate=manifest["sample_rate"], embed_dim=embedder.config.embed_dim,
        wiring=config.wiring, dtype=config.dtype).scaled(config.width_factor)
    model = networks.SeparatorModel(sep_config, seed=config.seed)

    out_dir = Path(args.out_dir)
    _write_json(out_dir / "config.json", {
        "train": config.to_dict(), "separator_config": sep_config.__dict__,
        "manifest": str(args.manifest), "embedder": str(args.embedder)})
    log = _LogFile(out_dir / "train_log.txt", echo=not args.quiet)

    train_samples = data.load_split(manifest, "train")
    val_samples = data.load_split(manifest, "val")
    started = time.time()
    trainer = train.SeparatorTrainer(model, embedder, train_samples, val_samples,
                                     config, log=log)
    summary = trainer.train()

    ckpt = out_dir / "checkpoint.npz"
    networks.save_checkpoint(ckpt, separator=model, embedder=embedder,
                             extra={"train_config": config.to_dict(),
                                    "best_val": summary["best_val"],
                                    "best_epoch": summary["best_epoch"]})
    print(f"wrote {ckpt} (best val {summary['best_val']:.6f} "
          f"at epoch {summary['best_epoch']}, {time.time() - started:.1f}s)")
    return EXIT_OK


def _read_wav_at_rate(path, rate: int) -> np.ndarray:
    wav_rate, wave = dsp.read_wav(path)
    if wav_rate != rate:
        raise data.DataError(f"{path}: sample rate {wav_rate}, model expects {rate}")
    return wave


def cmd_extract(args) -> int:
    model, _ = networks.load_separator(args.checkpoint, expect_wiring=args.wiring)
    embedder, _ = networks.load_embedder(args.checkpoint)
    rate = model.config.sample_rate
    mixture = _read_wav_at_rate(args.mixture, rate)
    reference = _read_wav_at_rate(args.reference, rate)
    extracted = train.extract_waveform(mixture, reference, model, embedder)
    dsp.write_wav(args.out, rate, extracted)
    print(f"wrote {args.out}")
    if args.target:
        target = _read_wav_at_rate(args.target, rate)
        spec_frames = model.config.stft.num_frames(mixture.size)
        sl = dsp.interior_slice(model.config.stft, spec_frames)
        sdr_in = losses.si_snr(mixture[sl], target[sl])
        sdr_out = losses.si_snr(extracted[sl], target[sl])
        print(f"si_sdr_in {sdr_in:.4f} dB  si_sdr_out {sdr_out:.4f} dB  "
              f"delta {sdr_out - sdr_in:.4f} dB")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = data.load_manifest(args.manifest)
    samples = data.load_split(manifest, args.split)
    if not samples:
        raise data.DataError(f"manifest split {args.split!r} is empty")
    model = embedder = None
    if args.mask_mode == "model":
        if not args.checkpoint:
            raise train.ConfigError("--checkpoint is required for mask-mode 'model'")
        model, _ = networks.load_separator(args.checkpoint)
        embedder, _ = networks.load_embedder(args.checkpoint)
        stft_cfg = model.config.stft
        if model.config.sample_rate != manifest["sample_rate"]:
            raise data.DataError("checkpoint rate does not match manifest rate")
    else:
        stft_cfg = networks.SeparatorConfig(
            sample_rate=manifest["sample_rate"]).stft
    rows = train.evaluate_samples(samples, stft_cfg, model, embedder, args.mask_mode)
    report = losses.format_metric_report(rows)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(report)
        print(f"wrote {out_path}")
    else:
        print(report, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    tap = None
    if args.corrupt_gradient:
        def tap(node, g):  # negative control: break every gradient
            return g * 1.01
    ad._grad_tap = tap
    try:
        started = time.time()
        results = train.run_gradcheck(width_factor=args.width_factor, seed=args.seed)
    finally:
        ad._grad_tap = None
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_THRESHOLD else "FAIL"
        print(f"{name:28s} {err:.3e}  {status}")
        worst = max(worst, err)
    verdict = "pass" if worst < GRADCHECK_THRESHOLD else "fail"
    print(f"worst {worst:.3e}  ({time.time() - started:.1f}s)  {verdict}")
    return EXIT_OK if worst < GRADCHECK_THRESHOLD else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tse",
        description="Speaker-conditioned target speaker extraction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic mixture corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--rate", type=int, default=8000)
    p.add_argument("--train-count", type=int, default=96)
    p.add_argument("--val-count", type=int, default=16)
    p.add_argument("--test-count", type=int, default=24)
    p.add_argument("--from-dir", default=None,
                   help="ingest a speaker-per-directory WAV corpus instead")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-embedder", help="train the speaker embedder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON overrides")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embedder", required=True, help="embedder checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="JSON train config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--wiring", choices=train.WIRINGS, default=None)
    p.add_argument("--loss", choices=train.LOSSES, default=None)
    p.add_argument("--width-factor", type=float, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--dtype", choices=("float64", "float32"), default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract the target speaker from a mixture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", default=None, help="report SI-SDR against this WAV")
    p.add_argument("--wiring", choices=train.WIRINGS, default=None,
                   help="require the checkpoint to use this wiring")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="report SI-SDR improvement over a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--mask-mode", choices=train.MASK_MODES, default="model")
    p.add_argument("--out", default=None, help="write the report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--width-factor", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (train.ConfigError, networks.CheckpointError, dsp.ColaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, dsp.WavFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except train.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
