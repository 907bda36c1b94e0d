"""Token-level uncertainty estimation over MC-dropout passes: pseudo labels
from the averaged posterior, BALD disagreement, confidence and certainty
scores, normalized per-sentence sampling weights, and the reliable-token mask.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .numerics import entropy, rng_stream

logger = logging.getLogger(__name__)

SELECTION_MODES = ("weighted", "top")


@dataclass(frozen=True)
class McPredictions:
    """(T, L, |Y|) class probabilities from T stochastic passes."""
    probs: np.ndarray
    seeds: tuple

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[0] < 1:
            raise ValueError("McPredictions needs a (T, L, |Y|) tensor with T >= 1")
        sums = self.probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("every row of McPredictions must sum to 1 within 1e-6")

    @property
    def t_passes(self):
        return self.probs.shape[0]

    @property
    def length(self):
        return self.probs.shape[1]

    @property
    def num_classes(self):
        return self.probs.shape[2]


def mc_predict(model, sentence, t_passes, seed, dropout_active=True):
    """Stack t_passes per-token distributions, each from an independently
    seeded dropout mask. dropout_active=False gives the deterministic pass
    (used by the plain self-training baseline)."""
    if t_passes < 1:
        raise ValueError("t_passes must be >= 1")
    seed_rng = rng_stream(seed, "mc-pass-seeds")
    seeds = tuple(int(s) for s in seed_rng.integers(0, 2**32, size=t_passes))
    slices = []
    for pass_seed in seeds:
        enc = model.encode(sentence, dropout_active=dropout_active, noise_seed=pass_seed)
        slices.append(enc.probs)
    return McPredictions(np.stack(slices), seeds)


def _mc_mean(probs):
    """Posterior mean over passes; bit-exact when every pass is identical,
    so zero-dropout models keep BALD at exactly 0 and certainty at exactly 1."""
    if probs.shape[0] == 1 or np.all(probs == probs[0]):
        return probs[0].copy()
    return probs.mean(axis=0)


def pseudo_annotate(mc):
    """Argmax class of the T-averaged posterior per token, lowest index wins ties."""
    mean = _mc_mean(mc.probs)
    return [int(i) for i in np.argmax(mean, axis=1)]


def bald_score(mc, token):
    """Entropy of the mean minus mean of the entropies, clamped at 0."""
    rows = mc.probs[:, token, :]
    if np.all(rows == rows[0]):
        return 0.0
    mean_entropy = float(np.mean([entropy(r) for r in rows]))
    return max(0.0, entropy(_normalize(rows.mean(axis=0))) - mean_entropy)


def _normalize(p):
    return p / p.sum()


def confidence_score(mc, token, pseudo):
    """Mean probability the passes assign to the pseudo label."""
    rows = mc.probs[:, token, pseudo]
    if np.all(rows == rows[0]):
        return float(rows[0])
    return float(rows.mean())


def certainty_score(bald, num_classes):
    """1 - BALD normalized by its ln|Y| maximum, clamped into [0, 1]."""
    if bald < 0:
        raise ValueError("BALD score must be non-negative")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return min(1.0, max(0.0, 1.0 - bald / math.log(num_classes)))


def sampling_weights(confidence, certainty):
    """Per-sentence weights s = cf*ct normalized to sum 1; an all-zero
    product vector falls back to uniform with a warning."""
    cf = np.asarray(confidence, dtype=np.float64)
    ct = np.asarray(certainty, dtype=np.float64)
    if cf.shape != ct.shape or cf.ndim != 1 or cf.size < 1:
        raise ValueError("confidence/certainty must be equal-length vectors")
    if np.any(cf < 0) or np.any(ct < 0):
        raise ValueError("scores must be non-negative")
    products = cf * ct
    total = products.sum()
    if total <= 0.0:
        logger.warning("all sampling weights zero; falling back to uniform")
        return np.full(cf.size, 1.0 / cf.size)
    return products / total


def select_tokens(weights, rho, seed, mode="weighted"):
    """0/1 mask with ceil(rho*L) ones.

    weighted: draw without replacement proportional to the weights (seed
    deterministic); top: the largest weights, ties to the lowest index.
    rho=1 short-circuits to all ones without consuming randomness.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weights must be a non-empty vector")
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must be in (0, 1]")
    if mode not in SELECTION_MODES:
        raise ValueError(f"mode must be one of {SELECTION_MODES}")
    length = w.size
    n = math.ceil(rho * length)
    mask = np.zeros(length, dtype=np.int8)
    if n >= length:
        mask[:] = 1
        return mask
    if mode == "top":
        chosen = np.argsort(-w, kind="stable")[:n]
    else:
        nonzero = np.flatnonzero(w > 0)
        if nonzero.size < n:
            # too few positive weights to draw from: take them all, then pad
            # deterministically with the lowest zero-weight indices
            chosen = list(nonzero)
            chosen.extend(i for i in range(length) if w[i] == 0)
            chosen = np.asarray(chosen[:n])
        else:
            rng = rng_stream(seed, "token-select")
            chosen = rng.choice(length, size=n, replace=False, p=w / w.sum())
    mask[chosen] = 1
    return mask


@dataclass(frozen=True)
class SelectionReport:
    """Per-token selection evidence for one sentence."""
    pseudo: tuple
    bald: np.ndarray
    confidence: np.ndarray
    certainty: np.ndarray
    weights: np.ndarray
    mask: np.ndarray

    @property
    def selected_count(self):
        return int(self.mask.sum())


def build_selection_report(mc, rho, seed, mode="weighted"):
    """Full per-sentence selection pipeline over one McPredictions."""
    pseudo = pseudo_annotate(mc)
    num_classes = mc.num_classes
    bald = np.array([bald_score(mc, j) for j in range(mc.length)])
    conf = np.array([confidence_score(mc, j, pseudo[j]) for j in range(mc.length)])
    cert = np.array([certainty_score(b, num_classes) for b in bald])
    weights = sampling_weights(conf, cert)
    mask = select_tokens(weights, rho, seed, mode=mode)
    return SelectionReport(tuple(pseudo), bald, conf, cert, weights, mask)


def write_selection_reports(path, sentences, reports, scheme):
    """One tab-separated record per token for audit and error analysis."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sentence\tposition\ttoken\tpseudo_tag\tbald\tconfidence\tcertainty\tweight\tselected\n")
        for sid, (sentence, report) in enumerate(zip(sentences, reports)):
            for j, token in enumerate(sentence.tokens):
                fh.write("\t".join([
                    str(sid),
                    str(j),
                    token,
                    scheme.tag(report.pseudo[j]),
                    repr(float(report.bald[j])),
                    repr(float(report.confidence[j])),
                    repr(float(report.certainty[j])),
                    repr(float(report.weights[j])),
                    str(int(report.mask[j])),
                ]) + "\n")
