"""Corpora: CoNLL-style parsing, BIO label schemes, greedy K-shot splits and
the synthetic corpus generator used by the oracle tests and desk experiments.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

from .numerics import rng_stream

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    gold_tags: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("a sentence needs at least one token")
        if self.gold_tags is not None:
            object.__setattr__(self, "gold_tags", tuple(self.gold_tags))
            if len(self.gold_tags) != len(self.tokens):
                raise ValueError("gold_tags length must match tokens")

    def __len__(self):
        return len(self.tokens)


class LabelScheme:
    """BIO tag inventory: O at index 0, then B-X/I-X per entity class."""

    def __init__(self, entity_classes):
        classes = tuple(entity_classes)
        if not classes:
            raise ValueError("at least one entity class is required")
        if len(set(classes)) != len(classes):
            raise ValueError("duplicate entity classes")
        for c in classes:
            if not c or c == "O" or c.startswith(("B-", "I-")):
                raise ValueError(f"bad entity class name: {c!r}")
        self.entity_classes = classes
        tags = ["O"]
        for c in classes:
            tags.extend((f"B-{c}", f"I-{c}"))
        self.tags = tuple(tags)
        self.tag_to_index = {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def from_tag_set(cls, tags):
        classes = set()
        for t in tags:
            if t == "O":
                continue
            if t.startswith(("B-", "I-")) and len(t) > 2:
                classes.add(t[2:])
            else:
                raise ValueError(f"tag {t!r} is not O, B-X or I-X")
        return cls(sorted(classes))

    def __len__(self):
        return len(self.tags)

    def index(self, tag):
        try:
            return self.tag_to_index[tag]
        except KeyError:
            raise ValueError(f"tag {tag!r} not in scheme") from None

    def tag(self, index):
        return self.tags[index]

    def is_valid_bio(self, tags):
        """True when no I-X appears without a preceding B-X or I-X."""
        prev = "O"
        for t in tags:
            if t not in self.tag_to_index:
                return False
            if t.startswith("I-") and prev not in (f"B-{t[2:]}", t):
                return False
            prev = t
        return True

    def entity_class_counts(self, tags):
        """Entity spans per class; a stray I-X also opens a span (lenient)."""
        counts = {}
        prev = "O"
        for t in tags:
            if t.startswith("B-") or (t.startswith("I-") and prev not in (f"B-{t[2:]}", t)):
                cls = t[2:]
                counts[cls] = counts.get(cls, 0) + 1
            prev = t
        return counts


def parse_conll(text, scheme, max_length=64):
    """Parse two-column `token tag` text, blank lines separating sentences.

    Sentences longer than max_length are truncated (warning logged).
    """
    if max_length <= 0:
        raise ValueError("max_length must be positive")
    sentences = []
    tokens, tags = [], []
    saw_content = False

    def flush():
        if not tokens:
            return
        if len(tokens) > max_length:
            logger.warning(
                "sentence %d truncated from %d to %d tokens",
                len(sentences) + 1, len(tokens), max_length)
            del tokens[max_length:], tags[max_length:]
        sentences.append(Sentence(tuple(tokens), tuple(tags)))
        tokens.clear()
        tags.clear()

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            flush()
            continue
        saw_content = True
        cols = line.split()
        if len(cols) != 2:
            raise ValueError(f"line {lineno}: expected `token tag`, got {line!r}")
        token, tag = cols
        if tag not in scheme.tag_to_index:
            raise ValueError(f"line {lineno}: tag {tag!r} not in scheme")
        tokens.append(token)
        tags.append(tag)
    flush()
    if not saw_content:
        raise ValueError("empty corpus file")
    return sentences


def serialize_conll(sentences):
    blocks = []
    for s in sentences:
        tags = s.gold_tags if s.gold_tags is not None else ("O",) * len(s)
        blocks.append("\n".join(f"{tok} {tag}" for tok, tag in zip(s.tokens, tags)))
    return "\n\n".join(blocks) + "\n"


class CorpusSplit:
    """Labeled / validation / unlabeled partition of one corpus.

    Gold tags of the unlabeled part are quarantined: `unlabeled` sentences
    carry no tags, and training code has no path to them. They are reachable
    only through `unlabeled_gold_tags_for_analysis` for error-rate reporting.
    """

    def __init__(self, labeled, validation, unlabeled_with_gold, seed, shots):
        self.labeled = tuple(labeled)
        self.validation = tuple(validation)
        self.unlabeled = tuple(Sentence(s.tokens, None) for s in unlabeled_with_gold)
        self._unlabeled_gold = tuple(s.gold_tags for s in unlabeled_with_gold)
        self.seed = seed
        self.shots = shots
        if len(self.labeled) > len(self.unlabeled):
            raise ValueError(
                f"labeled part ({len(self.labeled)}) exceeds unlabeled part "
                f"({len(self.unlabeled)}); lower k or grow the corpus")

    def unlabeled_gold_tags_for_analysis(self):
        return self._unlabeled_gold

    def sizes(self):
        return len(self.labeled), len(self.validation), len(self.unlabeled)


def _greedy_pick(corpus, order, scheme, k):
    """One greedy pass: admit a sentence iff it feeds an under-filled class
    and no class count would exceed k. Returns (picked, rest, counts)."""
    counts = {c: 0 for c in scheme.entity_classes}
    picked, rest = [], []
    done = False
    for i in order:
        if done:
            rest.append(i)
            continue
        sent_counts = scheme.entity_class_counts(corpus[i].gold_tags)
        feeds = any(counts[c] < k for c in sent_counts)
        fits = all(counts[c] + n <= k for c, n in sent_counts.items())
        if sent_counts and feeds and fits:
            picked.append(i)
            for c, n in sent_counts.items():
                counts[c] += n
            if all(v >= k for v in counts.values()):
                done = True
        else:
            rest.append(i)
    return picked, rest, counts


def greedy_kshot_split(corpus, scheme, k, seed):
    """Greedy per-class K-shot split into labeled, validation and unlabeled."""
    if k <= 0:
        raise ValueError("k must be positive")
    if any(s.gold_tags is None for s in corpus):
        raise ValueError("K-shot split needs gold tags on every sentence")
    order = rng_stream(seed, "split").permutation(len(corpus))
    labeled_idx, rest, counts_l = _greedy_pick(corpus, order, scheme, k)
    for c, n in counts_l.items():
        if n < k:
            logger.warning("class %s: only %d of %d entities available for the labeled set", c, n, k)
    val_idx, rest, counts_v = _greedy_pick(corpus, rest, scheme, k)
    for c, n in counts_v.items():
        if n < k:
            logger.warning("class %s: only %d of %d entities available for the validation set", c, n, k)
    return CorpusSplit(
        [corpus[i] for i in labeled_idx],
        [corpus[i] for i in val_idx],
        [corpus[i] for i in rest],
        seed=seed,
        shots=k,
    )


def save_split(split, scheme, out_dir):
    """Persist a split as three CoNLL files plus a manifest.

    unlabeled.conll keeps the gold column for later error-rate scoring;
    load_split re-quarantines it.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labeled.conll"), "w", encoding="utf-8") as fh:
        fh.write(serialize_conll(split.labeled))
    with open(os.path.join(out_dir, "validation.conll"), "w", encoding="utf-8") as fh:
        fh.write(serialize_conll(split.validation))
    gold = split.unlabeled_gold_tags_for_analysis()
    unlabeled = [Sentence(s.tokens, g) for s, g in zip(split.unlabeled, gold)]
    with open(os.path.join(out_dir, "unlabeled.conll"), "w", encoding="utf-8") as fh:
        fh.write(serialize_conll(unlabeled))
    counts = {c: 0 for c in scheme.entity_classes}
    for s in split.labeled:
        for c, n in scheme.entity_class_counts(s.gold_tags).items():
            counts[c] += n
    lines = [
        f"seed = {split.seed}",
        f"shots = {split.shots}",
        f"classes = {','.join(scheme.entity_classes)}",
        f"sizes = {len(split.labeled)},{len(split.validation)},{len(split.unlabeled)}",
    ]
    for c in scheme.entity_classes:
        lines.append(f"labeled_entities.{c} = {counts[c]}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(split_dir, max_length=64):
    """Rebuild a CorpusSplit (and its scheme) from a save_split directory."""
    manifest = {}
    with open(os.path.join(split_dir, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                manifest[key.strip()] = value.strip()
    scheme = LabelScheme(manifest["classes"].split(","))

    def read(name):
        with open(os.path.join(split_dir, name), encoding="utf-8") as fh:
            return parse_conll(fh.read(), scheme, max_length=max_length)

    split = CorpusSplit(
        read("labeled.conll"),
        read("validation.conll"),
        read("unlabeled.conll"),
        seed=int(manifest["seed"]),
        shots=int(manifest["shots"]),
    )
    return split, scheme


@dataclass(frozen=True)
class SynthSpec:
    """Settings for the synthetic trigger-lexicon corpus.

    Each entity class owns `lexicon_size` trigger tokens disjoint from the
    background vocabulary, so the tagging task is learnable from the tokens
    alone; span lengths run 1..max_span_length.
    """
    num_classes: int = 5
    vocab_size: int = 100
    corpus_size: int = 2000
    min_length: int = 5
    max_length: int = 15
    lexicon_size: int = 8
    max_span_length: int = 3
    entity_rate: float = 0.25

    def __post_init__(self):
        if self.num_classes < 1 or self.corpus_size < 0:
            raise ValueError("num_classes must be >= 1 and corpus_size >= 0")
        if not (1 <= self.min_length <= self.max_length):
            raise ValueError("need 1 <= min_length <= max_length")
        if self.lexicon_size < 1 or self.max_span_length < 1:
            raise ValueError("lexicon_size and max_span_length must be >= 1")
        if not (0.0 <= self.entity_rate <= 1.0):
            raise ValueError("entity_rate must be in [0, 1]")
        if self.num_classes * self.lexicon_size >= self.vocab_size:
            raise ValueError("trigger lexicons leave no background vocabulary")


def synth_scheme(spec):
    return LabelScheme([f"C{i + 1}" for i in range(spec.num_classes)])


def synth_corpus(spec, seed):
    """Seed-deterministic gold-tagged corpus per SynthSpec."""
    scheme = synth_scheme(spec)
    rng = rng_stream(seed, "synth")
    lexicons = [
        [f"ent{c + 1}_{j}" for j in range(spec.lexicon_size)]
        for c in range(spec.num_classes)
    ]
    n_background = spec.vocab_size - spec.num_classes * spec.lexicon_size
    background = [f"w{j}" for j in range(n_background)]

    sentences = []
    for _ in range(spec.corpus_size):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        tokens, tags = [], []
        pos = 0
        while pos < length:
            room = length - pos
            if rng.random() < spec.entity_rate:
                c = int(rng.integers(spec.num_classes))
                span = int(rng.integers(1, min(spec.max_span_length, room) + 1))
                for s in range(span):
                    tokens.append(lexicons[c][int(rng.integers(spec.lexicon_size))])
                    tags.append(("B-" if s == 0 else "I-") + scheme.entity_classes[c])
                pos += span
            else:
                tokens.append(background[int(rng.integers(n_background))])
                tags.append("O")
                pos += 1
        sentences.append(Sentence(tuple(tokens), tuple(tags)))
    return sentences
