"""Command-line front end: synth, train, autoencode, enhance, eval.

Settings come from three layers, later ones winning: built-in defaults, a
flat ``key = value`` config file (``--config``), then command-line flags.
``stvae --print-config`` shows the resolved values.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import corpus, enhancer, genmodel, metrics
from .signal import AudioClip, AudioFormatError, StftConfig, interior, istft, read_wav, stft, write_wav

log = logging.getLogger("stvae")


@dataclass
class RunConfig:
    sample_rate: int = 16000
    window_len: int = 1024
    hop: int = 256
    latent_dim: int = 32
    hidden: int = 128
    input_transform: str = "power"
    learning_rate: float = 1e-4
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 500
    alpha: float = 100.0
    beta: float = 100.0
    learn_prior: bool = False
    nmf_rank: int = 8
    em_iters: int = 100
    estep_lr: float = 0.005
    estep_iters: int = 10
    z_init: str = "prior"
    n_train: int = 150
    n_valid: int = 30
    n_test: int = 20
    clip_seconds: float = 2.0
    outlier_fraction: float = 0.2
    test_snrs: str = "0"
    seed: int = 0

    @property
    def stft(self):
        return StftConfig(self.window_len, self.hop)

    def train_config(self):
        return genmodel.TrainConfig(self.learning_rate, self.batch_size, self.patience,
                                    self.max_epochs, self.learn_prior)

    def enhance_options(self, weighted=True):
        return enhancer.EnhanceOptions(self.nmf_rank, self.em_iters, self.estep_lr,
                                       self.estep_iters, weighted, self.z_init)

    def synth_config(self):
        snrs = tuple(float(s) for s in self.test_snrs.split(",") if s.strip())
        return corpus.SynthConfig(self.sample_rate, self.clip_seconds, self.n_train, self.n_valid,
                                  self.n_test, self.outlier_fraction, snrs, seed=self.seed)

    def to_text(self):
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(field_type, text):
    text = text.strip()
    if field_type in ("bool", bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if field_type in ("int", int):
        return int(text)
    if field_type in ("float", float):
        return float(text)
    return text


def load_config_file(path, config: RunConfig) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{n}: unknown setting {key!r}")
        updates[key] = _parse_value(types[key], value)
    return dataclasses.replace(config, **updates)


def _common_parser():
    # shared by the top level and every subcommand, so settings may follow the
    # subcommand name; SUPPRESS keeps an absent flag from masking an earlier one
    parser = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--print-config", action="store_true", help="print resolved settings and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction)
        else:
            conv = {"int": int, "float": float}.get(f.type, str)
            parser.add_argument(flag, dest=f.name, type=conv, metavar=f.name.upper())
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = load_config_file(args.config, config)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    config = dataclasses.replace(config, **overrides)
    for name in ("window_len", "hop", "latent_dim", "hidden", "batch_size", "nmf_rank", "n_train",
                 "n_valid", "n_test", "sample_rate"):
        if getattr(config, name) <= 0:
            raise ValueError(f"{name} must be positive")
    for name in ("learning_rate", "alpha", "beta", "estep_lr", "clip_seconds"):
        if not getattr(config, name) > 0:
            raise ValueError(f"{name} must be positive")
    return config


class UsageError(Exception):
    pass


def cmd_synth(config: RunConfig, args):
    manifests = corpus.synthesize(args.out_dir, config.synth_config(), config.stft)
    for name, path in manifests.items():
        print(f"{name}\t{path}")


def _training_frames(manifest, config):
    entries = corpus.read_manifest(manifest)
    for _, path in entries:
        if not path.exists():
            raise UsageError(f"{manifest}: missing file {path}")
    return corpus.load_power_frames([p for _, p in entries], config.stft, config.sample_rate)


def cmd_train(config: RunConfig, args):
    for m in (args.manifest, args.valid):
        if not Path(m).is_file():
            raise UsageError(f"manifest not found: {m}")
    train_frames = _training_frames(args.manifest, config)
    valid_frames = _training_frames(args.valid, config)
    rng = np.random.default_rng(config.seed)
    model = genmodel.SpeechVAE.init(args.model, rng, config.stft, config.latent_dim, (config.hidden,),
                                    genmodel.GammaPrior(config.alpha, config.beta),
                                    config.input_transform)
    loss_log = Path(args.loss_log) if args.loss_log else Path(str(args.out) + ".loss.csv")
    try:
        best, history = genmodel.train(model, train_frames, valid_frames, config.train_config(), rng)
    except genmodel.TrainingDiverged as exc:
        _write_loss_log(loss_log, exc.history)
        raise
    genmodel.save_checkpoint(best, args.out)
    _write_loss_log(loss_log, history)
    print(f"epochs\t{history.epochs}\nbest_epoch\t{history.best_epoch}\n"
          f"best_valid_loss\t{history.valid_loss[history.best_epoch - 1]!r}")


def _write_loss_log(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "valid_loss"])
        for i, (a, b) in enumerate(zip(history.train_loss, history.valid_loss), 1):
            writer.writerow([i, repr(a), repr(b)])


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return genmodel.load_checkpoint(path)


def _read_input(path, model):
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")
    return read_wav(path)


def autoencode_file(model, wav_in, wav_out):
    """Auto-encode one file; returns the magnitude-spectrogram SNR in dB."""
    clip = _read_input(wav_in, model)
    spec = stft(clip, model.stft_config)
    recon = genmodel.autoencode(model, spec)
    out = istft(recon, clip.sample_rate)
    write_wav(AudioClip(interior(out, model.stft_config), clip.sample_rate), wav_out)
    return metrics.spectrogram_snr(spec, recon)


def cmd_autoencode(config: RunConfig, args):
    model = _load_model(args.checkpoint)
    snr = autoencode_file(model, args.wav_in, args.wav_out)
    print(f"snr_db\t{snr!r}")


def enhance_file(model, noisy_wav, out_wav, opts, seed, baseline=False):
    clip = _read_input(noisy_wav, model)
    spec = stft(clip, model.stft_config)
    rng = np.random.default_rng(seed)
    run = enhancer.baseline_vae_enhance if baseline else enhancer.em_enhance
    est, diag = run(model, spec, opts, rng)
    write_wav(AudioClip(interior(istft(est, clip.sample_rate), model.stft_config), clip.sample_rate),
              out_wav)
    return diag


def _write_trace(path, diag):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "loglik"])
        for i, v in enumerate(diag.loglik, 1):
            writer.writerow([i, repr(v)])


def cmd_enhance(config: RunConfig, args):
    model = _load_model(args.checkpoint)
    opts = config.enhance_options(weighted=not args.baseline)
    if args.pairs:
        if not args.out_dir:
            raise UsageError("--pairs requires --out-dir")
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(noisy, out_dir / noisy.name) for _, noisy, _, _, _ in corpus.read_pairs(args.pairs)]
    else:
        if not (args.noisy_wav and args.out_wav):
            raise UsageError("give NOISY_WAV OUT_WAV or --pairs with --out-dir")
        jobs = [(Path(args.noisy_wav), Path(args.out_wav))]
    for noisy, out in jobs:
        diag = enhance_file(model, noisy, out, opts, config.seed, args.baseline)
        trace = Path(args.trace) if (args.trace and len(jobs) == 1) else out.with_suffix(".trace.csv")
        _write_trace(trace, diag)
        if diag.violations:
            log.warning("%s: %d log-likelihood decreases", noisy, len(diag.violations))
        final = diag.loglik[-1] if diag.loglik else diag.initial_loglik
        print(f"{out}\tloglik\t{final!r}"
              f"\tviolations\t{len(diag.violations)}")


def cmd_eval(config: RunConfig, args):
    if not Path(args.pairs).is_file():
        raise UsageError(f"pairs manifest not found: {args.pairs}")
    pairs = corpus.read_pairs(args.pairs, args.enhanced_dir)
    if not pairs:
        raise UsageError(f"{args.pairs}: manifest is empty")
    for ref, noisy, enh, _, _ in pairs:
        if enh is None:
            raise UsageError("pairs manifest has no enhanced column; pass --enhanced-dir")
        for p in (ref, noisy, enh):
            if not Path(p).is_file():
                raise UsageError(f"missing file {p}")
    report = metrics.evaluate_corpus(pairs, offset=config.window_len)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="stvae", description=__doc__.split("\n")[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic corpus and manifests")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a vae or stvae model")
    p.add_argument("--manifest", required=True, help="training manifest (role<TAB>path)")
    p.add_argument("--valid", required=True, help="validation manifest")
    p.add_argument("--model", choices=genmodel.MODEL_KINDS, default="stvae")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="per-epoch loss CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("autoencode", parents=[common], help="auto-encode a clean file with its original phase")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wav_in")
    p.add_argument("wav_out")
    p.set_defaults(func=cmd_autoencode)

    p = sub.add_parser("enhance", parents=[common], help="EM speech enhancement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("noisy_wav", nargs="?")
    p.add_argument("out_wav", nargs="?")
    p.add_argument("--baseline", action="store_true", help="unweighted w = 1 pipeline")
    p.add_argument("--trace", help="log-likelihood trace CSV (default: <out>.trace.csv)")
    p.add_argument("--pairs", help="enhance every noisy file of a pairs manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", parents=[common], help="SI-SDR report for enhanced files")
    p.add_argument("--pairs", required=True)
    p.add_argument("--enhanced-dir", help="directory holding enhanced files named like the noisy ones")
    p.add_argument("--report", help="write the report here as well as to stdout")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"stvae: error: {exc}", file=sys.stderr)
        return 2
    if getattr(args, "print_config", False):
        sys.stdout.write(config.to_text())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.func(config, args)
    except (UsageError, AudioFormatError, genmodel.CheckpointError, FileNotFoundError) as exc:
        print(f"stvae: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"stvae: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"stvae: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
