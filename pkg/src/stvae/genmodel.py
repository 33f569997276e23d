"""Gaussian VAE and weighted-variance (Student-t) VAE speech models.

Both models share the same networks: the encoder maps a power-spectrogram
frame ``|s_t|^2`` to the mean and log-variance of ``q(z_t | s_t)``, the decoder
maps ``z_t`` to the per-bin log-variance ``log sigma^2(z_t)`` of a zero-mean
circular complex Gaussian. They differ in the reconstruction term of the loss:

* ``vae``:   sum_f [log sigma_f^2 + |s_f|^2 / sigma_f^2]
* ``stvae``: sum_f log sigma_f^2 + (alpha + F) log(beta + sum_f |s_f|^2 / sigma_f^2)
             - sum_{l<F} log(alpha + l) - alpha log beta

The Student-t term is the frame weight ``w_t ~ Gamma(alpha, beta)``
integrated out exactly, which is what the Gamma posterior of
:func:`gamma_posterior` makes tractable. The ``F log(pi)`` constant of the
complex Gaussian density is left out of both losses.

All losses are *negative* ELBOs (lower is better) and are summed over frames.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffnet import AdamState, DenseLayer, Mlp, adam_step
from .signal import Spectrogram, StftConfig, power_frames

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "STVAE-CHECKPOINT"
CHECKPOINT_VERSION = 1
VAR_FLOOR = 1e-10
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
MODEL_KINDS = ("vae", "stvae")
INPUT_TRANSFORMS = ("power", "log")
LOG_INPUT_OFFSET = 1e-10


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class GammaPrior:
    alpha: float = 100.0
    beta: float = 100.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("Gamma prior needs alpha > 0 and beta > 0")

    @property
    def mean(self):
        return self.alpha / self.beta

    def log_norm(self, n_freq):
        """``sum_{l<F} log(alpha + l) + alpha log(beta)``."""
        return float(np.sum(np.log(self.alpha + np.arange(n_freq))) + self.alpha * math.log(self.beta))


@dataclass
class EncoderOutput:
    mu: np.ndarray
    log_var: np.ndarray


@dataclass
class DecoderOutput:
    log_var_s: np.ndarray

    @property
    def variance(self):
        return np.exp(self.log_var_s)


@dataclass
class GammaPosteriorParams:
    alpha_p: float
    beta_p: float


class SpeechVAE:
    """Encoder/decoder pair plus the Gamma prior and STFT settings they were trained with."""

    def __init__(self, kind, encoder: Mlp, decoder: Mlp, prior=None, stft_config=None,
                 input_transform="power"):
        if kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
        if input_transform not in INPUT_TRANSFORMS:
            raise ValueError(f"input transform must be one of {INPUT_TRANSFORMS}")
        self.kind = kind
        self.input_transform = input_transform
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior if prior is not None else GammaPrior()
        self.stft_config = stft_config if stft_config is not None else StftConfig()
        if encoder.n_out % 2:
            raise ValueError("encoder output must hold mean and log-variance heads")
        if decoder.n_in != self.latent_dim or decoder.n_out != encoder.n_in:
            raise ValueError(
                f"decoder {decoder.n_in}->{decoder.n_out} does not match encoder "
                f"{encoder.n_in}->{self.latent_dim}"
            )
        if encoder.n_in != self.stft_config.n_freq:
            raise ValueError("encoder input size does not match the STFT configuration")

    @classmethod
    def init(cls, kind, rng, stft_config=None, latent_dim=32, hidden=(128,), prior=None,
             input_transform="power"):
        stft_config = stft_config or StftConfig()
        n_freq = stft_config.n_freq
        hidden = list(hidden)
        acts = ["tanh"] * len(hidden) + ["identity"]
        encoder = Mlp.init([n_freq, *hidden, 2 * latent_dim], acts, rng)
        decoder = Mlp.init([latent_dim, *hidden[::-1], n_freq], acts, rng)
        return cls(kind, encoder, decoder, prior, stft_config, input_transform)

    def encoder_input(self, power):
        """What the encoder actually sees: raw power or ``log(power + 1e-10)``."""
        if self.input_transform == "log":
            return np.log(power + LOG_INPUT_OFFSET)
        return power

    @property
    def n_freq(self):
        return self.encoder.n_in

    @property
    def latent_dim(self):
        return self.encoder.n_out // 2

    @property
    def hidden(self):
        return self.encoder.sizes[1:-1]

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def touch(self):
        self.encoder.touch()
        self.decoder.touch()

    def copy(self):
        return SpeechVAE(self.kind, self.encoder.copy(), self.decoder.copy(),
                         GammaPrior(self.prior.alpha, self.prior.beta), self.stft_config,
                         self.input_transform)


def encode(model: SpeechVAE, power_frame) -> EncoderOutput:
    p = np.asarray(power_frame, dtype=np.float64)
    if p.shape[-1] != model.n_freq:
        raise ValueError(f"power frame has {p.shape[-1]} bins, model expects {model.n_freq}")
    y, _ = model.encoder.forward(model.encoder_input(p))
    L = model.latent_dim
    return EncoderOutput(y[..., :L], y[..., L:])


def reparametrize(enc: EncoderOutput, rng=None, eps=None) -> np.ndarray:
    """``z = mu + exp(log_var / 2) * eps`` with ``eps`` standard normal (drawn from ``rng`` if not given)."""
    if eps is None:
        eps = rng.standard_normal(np.shape(enc.mu))
    return enc.mu + np.exp(0.5 * enc.log_var) * eps


def decode(model: SpeechVAE, z) -> DecoderOutput:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent vector has size {z.shape[-1]}, model expects {model.latent_dim}")
    y, _ = model.decoder.forward(z)
    return DecoderOutput(y)


def kl_gauss_std(enc: EncoderOutput):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the latent axis."""
    mu, lv = enc.mu, enc.log_var
    return 0.5 * np.sum(mu ** 2 + np.exp(lv) - lv - 1.0, axis=-1)


def gamma_posterior(prior: GammaPrior, power_frame, dec_out: DecoderOutput) -> GammaPosteriorParams:
    p = np.asarray(power_frame, dtype=np.float64)
    inv_var = np.exp(-np.maximum(dec_out.log_var_s, LOG_VAR_FLOOR))
    return GammaPosteriorParams(prior.alpha + p.shape[-1], prior.beta + float(np.sum(p * inv_var)))


def reconstruction_terms(kind, log_var_s, power, prior=None):
    """Per-frame reconstruction loss and its derivative w.r.t. ``log_var_s``.

    Shapes: ``log_var_s`` and ``power`` are ``B x F``; returns ``(B,)`` and ``B x F``.
    For ``stvae`` the value includes the prior constants, and two extra ``(B,)``
    arrays with derivatives w.r.t. alpha and beta are returned.
    """
    # the variance floor applies to every occurrence of sigma^2; flooring only
    # the ratio would leave sum(log sigma^2) unbounded below
    active = log_var_s > LOG_VAR_FLOOR
    ls = np.maximum(log_var_s, LOG_VAR_FLOOR)
    ratio = power * np.exp(-ls)
    if kind == "vae":
        value = np.sum(ls + ratio, axis=-1)
        return value, (1.0 - ratio) * active, None, None
    alpha, beta = prior.alpha, prior.beta
    n_freq = log_var_s.shape[-1]
    beta_p = beta + np.sum(ratio, axis=-1)
    value = (np.sum(ls, axis=-1) + (alpha + n_freq) * np.log(beta_p)
             - prior.log_norm(n_freq))
    scale = (alpha + n_freq) / beta_p
    d_ls = (1.0 - scale[:, None] * ratio) * active
    d_alpha = np.log(beta_p) - np.sum(1.0 / (alpha + np.arange(n_freq))) - math.log(beta)
    d_beta = scale - alpha / beta
    return value, d_ls, d_alpha, d_beta


@dataclass
class LossResult:
    loss: float  # summed over the batch
    recon: np.ndarray  # per frame
    kl: np.ndarray  # per frame
    grads: list | None = None  # mirrors SpeechVAE.params()
    d_alpha: float = 0.0
    d_beta: float = 0.0

    @property
    def per_frame(self):
        return self.recon + self.kl


def loss_and_grads(model: SpeechVAE, power, eps, kind=None, need_grad=True) -> LossResult:
    """Negative ELBO of a batch of frames with fixed reparametrization noise ``eps``."""
    kind = kind or model.kind
    power = np.atleast_2d(np.asarray(power, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    L = model.latent_dim
    y_enc, enc_cache = model.encoder.forward(model.encoder_input(power))
    mu, lv = y_enc[:, :L], y_enc[:, L:]
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    ls, dec_cache = model.decoder.forward(z)
    recon, d_ls, d_alpha, d_beta = reconstruction_terms(kind, ls, power, model.prior)
    kl = kl_gauss_std(EncoderOutput(mu, lv))
    total = float(np.sum(recon) + np.sum(kl))
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")
    result = LossResult(total, recon, kl)
    if not need_grad:
        return result
    dec_grads, dz = model.decoder.backward(dec_cache, d_ls)
    d_mu = dz + mu
    d_lv = 0.5 * dz * eps * std + 0.5 * (np.exp(lv) - 1.0)
    enc_grads, _ = model.encoder.backward(enc_cache, np.concatenate([d_mu, d_lv], axis=1))
    result.grads = enc_grads + dec_grads
    if d_alpha is not None:
        result.d_alpha = float(np.sum(d_alpha))
        result.d_beta = float(np.sum(d_beta))
    return result


def _frame_loss(kind, model, power_frame, rng, eps):
    p = np.asarray(power_frame, dtype=np.float64)
    if p.shape[-1] != model.n_freq:
        raise ValueError(f"power frame has {p.shape[-1]} bins, model expects {model.n_freq}")
    if eps is None:
        eps = rng.standard_normal(model.latent_dim)
    return loss_and_grads(model, p, eps, kind, need_grad=False).loss


def vae_frame_loss(model, power_frame, rng=None, eps=None):
    """Negative single-sample ELBO of the Gaussian VAE for one frame."""
    return _frame_loss("vae", model, power_frame, rng, eps)


def stvae_frame_loss(model, power_frame, rng=None, eps=None):
    """Negative single-sample ELBO of the weighted-variance VAE for one frame (prior constants included)."""
    return _frame_loss("stvae", model, power_frame, rng, eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 500
    learn_prior: bool = False


@dataclass
class TrainHistory:
    initial_train_loss: float = float("nan")
    initial_valid_loss: float = float("nan")
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self):
        return len(self.train_loss)


def mean_loss(model, frames, seed, kind=None, chunk=1024):
    """Mean per-frame loss with reparametrization noise drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, len(frames), chunk):
        block = frames[start:start + chunk]
        eps = rng.standard_normal((len(block), model.latent_dim))
        total += loss_and_grads(model, block, eps, kind, need_grad=False).loss
    return total / len(frames)


def train(model: SpeechVAE, train_frames, valid_frames, config: TrainConfig, rng):
    """Minibatch Adam on the model's own loss with early stopping on validation loss.

    ``train_frames`` / ``valid_frames`` are ``T x F`` power-spectrogram frames.
    Returns the parameters with the best validation loss and the history.
    """
    train_frames = np.asarray(train_frames, dtype=np.float64)
    valid_frames = np.asarray(valid_frames, dtype=np.float64)
    if len(train_frames) == 0 or len(valid_frames) == 0:
        raise ValueError("training and validation data must be non-empty")
    if not (np.all(np.isfinite(train_frames)) and np.all(np.isfinite(valid_frames))):
        raise ValueError("training and validation frames must be finite")
    model = model.copy()
    params = model.params()
    state = AdamState(learning_rate=config.learning_rate)
    prior_log = np.array([math.log(model.prior.alpha), math.log(model.prior.beta)])
    prior_state = AdamState(learning_rate=config.learning_rate)
    valid_seed = int(rng.integers(2 ** 63))
    history = TrainHistory()
    try:
        history.initial_train_loss = mean_loss(model, train_frames, valid_seed)
        history.initial_valid_loss = mean_loss(model, valid_frames, valid_seed)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"initial evaluation: {exc}", history) from exc
    best = model.copy()
    best_loss = math.inf
    wait = 0
    n = len(train_frames)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = rng.standard_normal((len(idx), model.latent_dim))
            try:
                res = loss_and_grads(model, train_frames[idx], eps)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            total += res.loss
            scale = 1.0 / len(idx)
            try:
                adam_step(params, [g * scale for g in res.grads], state)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            if config.learn_prior and model.kind == "stvae":
                g_prior = np.array([res.d_alpha * model.prior.alpha,
                                    res.d_beta * model.prior.beta]) * scale
                adam_step([prior_log], [g_prior], prior_state)
                model.prior = GammaPrior(*np.exp(prior_log))
            model.touch()
        train_loss = total / n
        valid_loss = mean_loss(model, valid_frames, valid_seed)
        history.train_loss.append(train_loss)
        history.valid_loss.append(valid_loss)
        if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss", history)
        log.info("epoch %d train %.6g valid %.6g", epoch, train_loss, valid_loss)
        if valid_loss < best_loss:
            best_loss = valid_loss
            best = model.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
        if wait >= config.patience:
            break
    return best, history


def autoencode(model: SpeechVAE, spec: Spectrogram, rng_mode="mean", rng=None) -> Spectrogram:
    """Replace each frame's magnitude by ``sigma(z)``, keeping the input phase.

    ``z`` is the encoder mean (``rng_mode="mean"``) or one posterior sample
    (``rng_mode="sample"``, requires ``rng``).
    """
    if spec.data.shape[0] != model.n_freq:
        raise ValueError("spectrogram does not match the model's frequency resolution")
    enc = encode(model, power_frames(spec).T)
    if rng_mode == "mean":
        z = enc.mu
    elif rng_mode == "sample":
        z = reparametrize(enc, rng)
    else:
        raise ValueError(f"unknown rng_mode {rng_mode!r}")
    magnitude = np.exp(0.5 * decode(model, z).log_var_s).T
    phase = np.angle(spec.data)
    return Spectrogram(magnitude * np.exp(1j * phase), spec.config)


# Checkpoint layout: UTF-8 "key=value" header lines terminated by "end_header\n",
# then every parameter array as little-endian float64, row-major, in the order
# encoder (W0, b0, W1, b1, ...) followed by decoder (W0, b0, ...).

def save_checkpoint(model: SpeechVAE, path) -> None:
    arrays = model.params()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "n_freq": model.n_freq,
        "latent_dim": model.latent_dim,
        "hidden": ",".join(str(h) for h in model.hidden),
        "encoder_activations": ",".join(model.encoder.activations),
        "decoder_activations": ",".join(model.decoder.activations),
        "alpha": float(model.prior.alpha).hex(),
        "beta": float(model.prior.beta).hex(),
        "window_len": model.stft_config.window_len,
        "hop": model.stft_config.hop,
        "window_kind": model.stft_config.window_kind,
        "input_transform": model.input_transform,
        "payload_bytes": len(payload),
    }
    text = CHECKPOINT_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in header.items()) + "end_header\n"
    Path(path).write_bytes(text.encode("utf-8") + payload)


def load_checkpoint(path) -> SpeechVAE:
    blob = Path(path).read_bytes()
    marker = b"end_header\n"
    cut = blob.find(marker)
    if not blob.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file or header is corrupt")
    lines = blob[:cut].decode("utf-8").splitlines()[1:]
    try:
        meta = dict(line.split("=", 1) for line in lines)
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header line") from exc
    try:
        version = int(meta["version"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid version field") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    payload = blob[cut + len(marker):]
    try:
        if len(payload) != int(meta["payload_bytes"]):
            raise CheckpointError(
                f"{path}: corrupt file, expected {meta['payload_bytes']} payload bytes, found {len(payload)}"
            )
        n_freq = int(meta["n_freq"])
        latent = int(meta["latent_dim"])
        hidden = [int(h) for h in meta["hidden"].split(",") if h]
        enc_acts = meta["encoder_activations"].split(",")
        dec_acts = meta["decoder_activations"].split(",")
        prior = GammaPrior(float.fromhex(meta["alpha"]), float.fromhex(meta["beta"]))
        stft_config = StftConfig(int(meta["window_len"]), int(meta["hop"]), meta["window_kind"])
        kind = meta["kind"]
        input_transform = meta["input_transform"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: header is missing field {exc}") from exc
    values = np.frombuffer(payload, dtype="<f8")
    offset = 0

    def build(sizes, acts):
        nonlocal offset
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], acts):
            w = values[offset:offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = values[offset:offset + n_out]
            offset += n_out
            layers.append(DenseLayer(w.copy(), b.copy(), act))
        return Mlp(layers)

    try:
        encoder = build([n_freq, *hidden, 2 * latent], enc_acts)
        decoder = build([latent, *hidden[::-1], n_freq], dec_acts)
    except ValueError as exc:
        raise CheckpointError(f"{path}: parameter arrays do not match header: {exc}") from exc
    if offset != len(values):
        raise CheckpointError(f"{path}: payload size does not match header dimensions")
    try:
        return SpeechVAE(kind, encoder, decoder, prior, stft_config, input_transform)
    except ValueError as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {exc}") from exc

