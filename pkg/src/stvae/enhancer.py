"""EM speech enhancement with a pretrained speech VAE and an NMF noise model.

Noisy frames are modelled as ``x_t ~ Nc(0, diag(sigma^2(z_t) / w_t + W h_t))``.
Each EM iteration

1. moves ``(z_t, u_t = log w_t)`` towards the mode of
   ``log p(x_t | z_t, w_t) + log p(z_t) + log p(w_t)`` with a few Adam steps,
   warm-started from the previous iteration;
2. applies the Itakura-Saito multiplicative update to ``H`` and then ``W``,
   recomputing the variance field ``V`` before each.

The clean speech is the Wiener-style posterior mean at the final parameters.
The unweighted baseline runs the same loop with ``w_t`` frozen at 1 and no
weight-prior term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .diffnet import AdamState, adam_step
from .genmodel import GammaPrior, SpeechVAE, encode
from .signal import Spectrogram, power_frames

log = logging.getLogger(__name__)

NMF_FLOOR = 1e-10


@dataclass
class NmfModel:
    W: np.ndarray  # F x K
    H: np.ndarray  # K x T

    @property
    def noise_variance(self):
        return np.maximum(self.W @ self.H, NMF_FLOOR)


@dataclass
class EStepState:
    z: np.ndarray  # T x L
    u: np.ndarray  # T, log-weights

    @property
    def w(self):
        return np.exp(self.u)

    def copy(self):
        return EStepState(self.z.copy(), self.u.copy())


@dataclass
class EnhanceOptions:
    nmf_rank: int = 8
    em_iters: int = 100
    estep_lr: float = 0.005
    estep_iters: int = 10
    weighted: bool = True  # False gives the unweighted (w = 1) baseline
    z_init: str = "prior"  # "prior": z = 0; "encoder": encoder mean of the noisy frame


@dataclass
class Diagnostics:
    initial_loglik: float
    loglik: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    violations: list = field(default_factory=list)  # (iteration, previous, current)


def _decoder_log_var(model, z):
    ls, _ = model.decoder.forward(z)
    return ls


def speech_variance(model: SpeechVAE, state: EStepState) -> np.ndarray:
    """``sigma^2(z_t) / w_t`` as an F x T matrix."""
    return np.exp(_decoder_log_var(model, state.z) - state.u[:, None]).T


def variance_field(model: SpeechVAE, state: EStepState, nmf: NmfModel) -> np.ndarray:
    return speech_variance(model, state) + nmf.noise_variance


def init_enhancement(model: SpeechVAE, noisy_spec: Spectrogram, K, rng, weighted=True, z_init="prior"):
    """Initial latents, prior-mean weights and a random NMF scaled to the noisy power.

    ``z_init="prior"`` starts every frame at the prior mode ``z = 0``;
    ``z_init="encoder"`` uses the encoder mean of the noisy frame. The encoder
    only ever saw clean speech, and on noisy frames it tends to return latents
    far outside the prior that the E-step cannot leave in 100 iterations.
    """
    if K < 1:
        raise ValueError(f"NMF rank must be at least 1, got {K}")
    power = power_frames(noisy_spec)
    n_freq, n_frames = power.shape
    if z_init == "encoder":
        z = encode(model, power.T).mu.copy()
    elif z_init == "prior":
        z = np.zeros((n_frames, model.latent_dim))
    else:
        raise ValueError(f"unknown z_init {z_init!r}")
    u0 = np.log(model.prior.mean) if weighted else 0.0
    state = EStepState(z, np.full(n_frames, u0))
    W = rng.uniform(0.1, 1.0, size=(n_freq, K))
    H = rng.uniform(0.1, 1.0, size=(K, n_frames))
    target = max(float(np.mean(power)), NMF_FLOOR)
    scale = np.sqrt(target / np.mean(W @ H))
    return state, NmfModel(W * scale, H * scale)


def loglik(power, V):
    """``-sum(log V + |X|^2 / V)``, the complex-Gaussian log-likelihood without the pi constant."""
    return -float(np.sum(np.log(V) + power / V))


def noisy_loglik_frame(model: SpeechVAE, x_t, z_t, w_t, W, h_t):
    power = np.abs(np.asarray(x_t)) ** 2
    speech = np.exp(_decoder_log_var(model, np.asarray(z_t, dtype=np.float64)[None, :])[0]) / w_t
    v = speech + np.maximum(W @ h_t, NMF_FLOOR)
    return loglik(power, v)


def estep_terms(model, power, z, u, noise_var, prior, weighted=True):
    """Per-frame E-step objective and its gradients.

    ``power`` and ``noise_var`` are T x F, ``z`` is T x L, ``u`` is length T.
    Returns ``(values, d_z, d_u)``.
    """
    ls, cache = model.decoder.forward(z)
    speech = np.exp(ls - u[:, None])
    v = speech + noise_var
    values = -np.sum(np.log(v) + power / v, axis=1) - 0.5 * np.sum(z ** 2, axis=1)
    d_v = (power / v - 1.0) / v
    d_ls = d_v * speech
    _, d_z = model.decoder.backward(cache, d_ls, param_grads=False)
    d_z = d_z - z
    if weighted:
        values = values + (prior.alpha - 1.0) * u - prior.beta * np.exp(u)
        d_u = -np.sum(d_ls, axis=1) + (prior.alpha - 1.0) - prior.beta * np.exp(u)
    else:
        d_u = np.zeros_like(u)
    return values, d_z, d_u


def estep_objective(model: SpeechVAE, x_t, z_t, u_t, W, h_t, prior: GammaPrior, weighted=True):
    """Log of the unnormalized joint ``p(x_t|z_t,w_t) p(z_t) p(w_t)`` at ``w_t = exp(u_t)``."""
    power = (np.abs(np.asarray(x_t)) ** 2)[None, :]
    noise = np.maximum(W @ h_t, NMF_FLOOR)[None, :]
    z = np.asarray(z_t, dtype=np.float64)[None, :]
    values, _, _ = estep_terms(model, power, z, np.array([float(u_t)]), noise, prior, weighted)
    return float(values[0])


def estep_optimize(state: EStepState, model: SpeechVAE, noisy_spec, nmf: NmfModel,
                   prior: GammaPrior, opts: EnhanceOptions) -> EStepState:
    """Adam ascent on the per-frame E-step objective.

    Every frame keeps the best iterate seen, so its objective never drops
    below the starting value. Adam moments are fresh on each call.
    """
    if opts.estep_iters == 0:
        return state.copy()
    power = power_frames(noisy_spec).T
    noise = nmf.noise_variance.T
    z = state.z.copy()
    u = state.u.copy()
    best_z, best_u = z.copy(), u.copy()
    best_val = np.full(len(u), -np.inf)
    adam = AdamState(learning_rate=opts.estep_lr)
    params = [z, u] if opts.weighted else [z]
    for step in range(opts.estep_iters + 1):
        values, d_z, d_u = estep_terms(model, power, z, u, noise, prior, opts.weighted)
        bad = ~np.isfinite(values)
        if np.any(bad):
            raise FloatingPointError(f"non-finite E-step objective at frame {int(np.argmax(bad))}")
        better = values > best_val
        best_val = np.where(better, values, best_val)
        best_z[better] = z[better]
        best_u[better] = u[better]
        if step == opts.estep_iters:
            break
        grads = [-d_z, -d_u] if opts.weighted else [-d_z]
        adam_step(params, grads, adam)
    return EStepState(best_z, best_u)


def mstep_update_h(nmf: NmfModel, noisy_power, V) -> NmfModel:
    W, H = nmf.W, nmf.H
    num = W.T @ ((noisy_power / V) / V)
    den = W.T @ (1.0 / V)
    return NmfModel(W, np.maximum(H * np.sqrt(num / den), NMF_FLOOR))


def mstep_update_w(nmf: NmfModel, noisy_power, V) -> NmfModel:
    W, H = nmf.W, nmf.H
    num = ((noisy_power / V) / V) @ H.T
    den = (1.0 / V) @ H.T
    return NmfModel(np.maximum(W * np.sqrt(num / den), NMF_FLOOR), H)


def wiener_gain(speech_var, noise_var):
    speech_var = np.asarray(speech_var, dtype=np.float64)
    return speech_var / (speech_var + noise_var)


def wiener_estimate(model: SpeechVAE, noisy_spec: Spectrogram, state: EStepState,
                    nmf: NmfModel) -> Spectrogram:
    gain = wiener_gain(speech_variance(model, state), nmf.noise_variance)
    return Spectrogram(gain * noisy_spec.data, noisy_spec.config)


def em_enhance(model: SpeechVAE, noisy_spec: Spectrogram, opts: EnhanceOptions = None, rng=None):
    """Run EM and return ``(estimated spectrogram, Diagnostics)``.

    The log-likelihood trace holds one value per iteration, measured after the
    W update. Decreases beyond 1e-6 relative are recorded in
    ``Diagnostics.violations`` and logged.
    """
    opts = opts or EnhanceOptions()
    if rng is None:
        rng = np.random.default_rng(0)
    prior = model.prior
    power = power_frames(noisy_spec)
    state, nmf = init_enhancement(model, noisy_spec, opts.nmf_rank, rng, opts.weighted, opts.z_init)
    prev = loglik(power, variance_field(model, state, nmf))
    diag = Diagnostics(initial_loglik=prev)
    for it in range(1, opts.em_iters + 1):
        state = estep_optimize(state, model, noisy_spec, nmf, prior, opts)
        V = variance_field(model, state, nmf)
        nmf = mstep_update_h(nmf, power, V)
        V = variance_field(model, state, nmf)
        nmf = mstep_update_w(nmf, power, V)
        V = variance_field(model, state, nmf)
        current = loglik(power, V)
        values, _, _ = estep_terms(model, power.T, state.z, state.u, nmf.noise_variance.T,
                                   prior, opts.weighted)
        diag.loglik.append(current)
        diag.objective.append(float(np.sum(values)))
        if current < prev - 1e-6 * abs(prev):
            diag.violations.append((it, prev, current))
            log.warning("EM iteration %d: log-likelihood decreased %.9g -> %.9g", it, prev, current)
        prev = current
    return wiener_estimate(model, noisy_spec, state, nmf), diag


def baseline_vae_enhance(model: SpeechVAE, noisy_spec: Spectrogram, opts: EnhanceOptions = None, rng=None):
    """The same EM loop with ``w_t = 1`` fixed and no weight prior."""
    opts = opts or EnhanceOptions()
    return em_enhance(model, noisy_spec, replace(opts, weighted=False), rng)
