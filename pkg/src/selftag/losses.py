"""Student training objectives: the masked sequence-labeling loss with the
partially huberised cross-entropy (gradient magnitude capped at tau), the
Gaussian consistency regularizer on perturbed hidden states, and their
weighted combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .model import gaussian_project
from .numerics import PROB_FLOOR, Tensor

LOSS_KINDS = ("phce", "cross_entropy")


@dataclass(frozen=True)
class RobustLossConfig:
    tau: float = 10.0
    lam: float = 0.5
    k_perturb: int = 3
    loss_kind: str = "phce"
    stop_gradient: bool = True  # treat the clean branch of the KL as constant

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError("tau must be > 1")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.k_perturb < 1:
            raise ValueError("k_perturb must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


def phce(p, tau):
    """Partially huberised cross-entropy of a label probability.

    Linear with slope -tau below p = 1/tau, plain -ln p above; continuous and
    once-differentiable at the junction.
    """
    if not tau > 1.0:
        raise ValueError("tau must be > 1")
    p = min(1.0, max(PROB_FLOOR, float(p)))
    if p <= 1.0 / tau:
        return -tau * p + math.log(tau) + 1.0
    return 0.0 if p == 1.0 else -math.log(p)


def _phce_term(log_p, tau):
    """Taped counterpart of phce() given the label log-probability."""
    if float(log_p.values) <= -math.log(tau):
        return N.add(N.mul(N.exp(log_p), -tau), math.log(tau) + 1.0)
    return N.neg(log_p)


def msl_loss(log_probs, pseudo, mask, config):
    """Masked mean of the per-token noise-robust loss at the pseudo labels.

    log_probs: (L, |Y|) Tensor of per-token log distributions. Returns
    (scalar Tensor, skipped) where skipped marks an all-masked-out sentence
    (loss 0).
    """
    mask = np.asarray(mask)
    pseudo = np.asarray(pseudo, dtype=np.intp)
    if log_probs.values.shape[0] != len(pseudo) or len(pseudo) != len(mask):
        raise ValueError("log_probs, pseudo and mask lengths must agree")
    selected = np.flatnonzero(mask)
    if selected.size == 0:
        return Tensor(np.asarray(0.0)), True
    label_log_p = N.clip(N.pick_per_row(log_probs, pseudo), math.log(PROB_FLOOR), 0.0)
    total = None
    for j in selected:
        lp = N.narrow(label_log_p, 0, int(j), 1).sum()
        if config.loss_kind == "cross_entropy":
            term = N.neg(lp)
        else:
            term = _phce_term(lp, config.tau)
        total = term if total is None else N.add(total, term)
    return N.mul(total, 1.0 / selected.size), False


def gaussian_perturb(hidden, mu, sigma, epsilon):
    """hidden * (mu + sigma * epsilon), elementwise; epsilon is a constant."""
    eps = np.asarray(epsilon, dtype=np.float64)
    return N.mul(hidden, N.add(mu, N.mul(sigma, eps)))


def gcr_loss(model, encoded, config, rng):
    """Consistency of token distributions under Gaussian hidden-state noise.

    Per noise draw: perturb every hidden state via the reparameterized
    Gaussian heads, re-run the prediction head, and take KL(clean branch ||
    perturbed branch) per token; average over L tokens and k_perturb draws.
    The clean branch is a constant target unless config.stop_gradient is off.
    """
    hidden = encoded.hidden
    length, width = hidden.values.shape
    mu, sigma = gaussian_project(model, hidden)

    if config.stop_gradient:
        p_clean = np.clip(encoded.probs, PROB_FLOOR, 1.0)
        clean_self = float((p_clean * np.log(p_clean)).sum())  # sum_j sum_c p ln p
    else:
        log_clean = N.clip(encoded.log_probs, math.log(PROB_FLOOR), 0.0)
        p_clean_t = N.exp(log_clean)
        clean_self = N.mul(p_clean_t, log_clean).sum()
        p_clean = p_clean_t.values

    total = None
    for _ in range(config.k_perturb):
        eps = rng.standard_normal(width)  # one draw shared by all tokens
        perturbed = gaussian_perturb(hidden, mu, sigma, eps)
        emissions = model.emissions_from_hidden(perturbed)
        log_q = N.clip(model.log_probs_from_emissions(emissions),
                       math.log(PROB_FLOOR), 0.0)
        cross = N.mul(log_q, p_clean if config.stop_gradient else p_clean_t).sum()
        kl = N.add(clean_self, N.neg(cross))
        total = kl if total is None else N.add(total, kl)
    return N.mul(total, 1.0 / (length * config.k_perturb))


def combined_objective(batch, model, config, seed, dropout_active=True):
    """Sum over pseudo-labeled sentences of masked loss + lambda * consistency.

    batch: iterable of (sentence, pseudo_labels, mask). A fresh encode runs
    per sentence (training dropout derives from `seed`); lambda = 0 skips the
    regularizer entirely, consuming no noise. Aborts on a non-finite loss.
    """
    items = list(batch)
    if not items:
        return Tensor(np.asarray(0.0))
    noise_rng = N.rng_stream(seed, "gcr-noise")
    drop_rng = N.rng_stream(seed, "step-dropout")
    total = None
    for sentence, pseudo, mask in items:
        enc = model.encode(sentence, dropout_active=dropout_active,
                           noise_seed=int(drop_rng.integers(0, 2**32)))
        loss, _ = msl_loss(enc.log_probs, pseudo, mask, config)
        if config.lam > 0.0:
            loss = N.add(loss, N.mul(gcr_loss(model, enc, config, noise_rng), config.lam))
        if not np.isfinite(loss.values):
            raise FloatingPointError(
                f"non-finite loss on sentence {' '.join(sentence.tokens)!r}")
        total = loss if total is None else N.add(total, loss)
    return total
