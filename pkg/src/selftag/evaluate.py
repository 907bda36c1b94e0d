"""Entity-level span F1, selection error-rate analysis across strategies,
and the per-token hidden-state export.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import rng_stream
from .uncertainty import (
    bald_score,
    certainty_score,
    confidence_score,
    pseudo_annotate,
    sampling_weights,
    select_tokens,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "confidence", "certainty", "both")


@dataclass(frozen=True)
class EntitySpan:
    sentence_id: int
    start: int
    end: int  # exclusive
    label: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError("need 0 <= start < end")


def decode_spans(tags, sentence_id=0, lenient_warn=True):
    """BIO tags to spans: B-X opens, consecutive I-X extend, anything else
    closes. A stray I-X opens a new span (lenient), optionally logged."""
    spans = []
    start, label = None, None

    def close(end):
        nonlocal start, label
        if start is not None:
            spans.append(EntitySpan(sentence_id, start, end, label))
            start, label = None, None

    for j, tag in enumerate(tags):
        if tag == "O":
            close(j)
        elif tag.startswith("B-"):
            close(j)
            start, label = j, tag[2:]
        elif tag.startswith("I-"):
            if label != tag[2:]:
                if lenient_warn:
                    logger.warning("stray %s at position %d opens a new span", tag, j)
                close(j)
                start, label = j, tag[2:]
        else:
            raise ValueError(f"tag {tag!r} is not O, B-X or I-X")
    close(len(tags))
    return spans


def encode_spans(spans, length, sentence_id=0):
    """Inverse of decode_spans for non-overlapping spans of one sentence."""
    tags = ["O"] * length
    for span in sorted(spans, key=lambda s: s.start):
        if span.end > length:
            raise ValueError("span exceeds sentence length")
        if any(t != "O" for t in tags[span.start:span.end]):
            raise ValueError("overlapping spans")
        tags[span.start] = f"B-{span.label}"
        for j in range(span.start + 1, span.end):
            tags[j] = f"I-{span.label}"
    return tags


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    per_class: dict
    gold_count: int
    pred_count: int
    match_count: int
    metadata: dict = field(default_factory=dict)


def _prf(match, pred, gold):
    p = match / pred if pred else 0.0
    r = match / gold if gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def entity_f1(gold, pred):
    """Exact-match micro F1 over spans (boundaries and class both correct),
    with a per-class breakdown."""
    gold_set, pred_set = set(gold), set(pred)
    if len(gold_set) != len(gold) or len(pred_set) != len(pred):
        raise ValueError("duplicate spans in input")
    matches = gold_set & pred_set
    labels = sorted({s.label for s in gold_set | pred_set})
    per_class = {}
    for label in labels:
        per_class[label] = _prf(
            sum(1 for s in matches if s.label == label),
            sum(1 for s in pred_set if s.label == label),
            sum(1 for s in gold_set if s.label == label),
        )
    p, r, f1 = _prf(len(matches), len(pred_set), len(gold_set))
    return MetricsReport(p, r, f1, per_class, len(gold_set), len(pred_set), len(matches))


def corpus_spans(tag_sequences, lenient_warn=False):
    spans = []
    for sid, tags in enumerate(tag_sequences):
        spans.extend(decode_spans(tags, sentence_id=sid, lenient_warn=lenient_warn))
    return spans


def corpus_f1(model, sentences):
    """Entity F1 of a model's deterministic predictions against gold tags."""
    gold, pred = [], []
    for s in sentences:
        if s.gold_tags is None:
            raise ValueError("corpus_f1 needs gold tags")
        gold.append(s.gold_tags)
        pred.append(model.predict_tags(s))
    return entity_f1(corpus_spans(gold), corpus_spans(pred))


def selection_error_rates(mc_list, gold_indices, rho, seed, mode="weighted"):
    """Fraction of selected tokens whose pseudo label disagrees with gold,
    per strategy, all computed from the same MC predictions and the same
    per-sentence selection seed.

    none scores every token (no selection), so it is independent of rho,
    seed and mode; the others weight by confidence only, certainty only, or
    their product.
    """
    totals = {s: [0, 0] for s in STRATEGIES}  # errors, selected
    seed_rng = rng_stream(seed, "analysis-select")
    for mc, gold in zip(mc_list, gold_indices):
        gold = np.asarray(gold)
        pseudo = np.asarray(pseudo_annotate(mc))
        if gold.shape != pseudo.shape:
            raise ValueError("gold tag length does not match predictions")
        wrong = pseudo != gold
        length = mc.length
        conf = np.array([confidence_score(mc, j, pseudo[j]) for j in range(length)])
        cert = np.array([
            certainty_score(bald_score(mc, j), mc.num_classes) for j in range(length)
        ])
        ones = np.ones(length)
        sentence_seed = int(seed_rng.integers(0, 2**32))
        totals["none"][0] += int(wrong.sum())
        totals["none"][1] += length
        for strategy, cf, ct in (("confidence", conf, ones),
                                 ("certainty", ones, cert),
                                 ("both", conf, cert)):
            mask = select_tokens(sampling_weights(cf, ct), rho, sentence_seed, mode=mode)
            picked = mask == 1
            totals[strategy][0] += int(wrong[picked].sum())
            totals[strategy][1] += int(picked.sum())
    return {
        strategy: (errors / selected if selected else 0.0)
        for strategy, (errors, selected) in totals.items()
    }


def export_embeddings(model, sentences, path):
    """Per-token hidden states as tab-separated text (one row per token)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sentence\tposition\ttoken\tgold_tag\tpred_tag\thidden\n")
        for sid, sentence in enumerate(sentences):
            enc = model.encode(sentence, with_log_probs=False)
            pred = model.predict_tags(sentence)
            gold = sentence.gold_tags or ("-",) * len(sentence)
            for j, token in enumerate(sentence.tokens):
                hidden = " ".join(repr(float(v)) for v in enc.hidden.values[j])
                fh.write(f"{sid}\t{j}\t{token}\t{gold[j]}\t{pred[j]}\t{hidden}\n")
