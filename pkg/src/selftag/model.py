"""The sequence labeler: embedding + BiLSTM encoder with dropout, a softmax
or CRF prediction head, and the two Gaussian projection heads used by the
consistency regularizer. All forward math runs on the numerics engine so the
same code serves inference (no tape) and training (tape active).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .data import UNK_TOKEN
from .numerics import Tensor

CHECKPOINT_MAGIC = "selftag-checkpoint-v1"

HEADS = ("softmax", "crf")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 32
    dropout: float = 0.1
    head: str = "softmax"
    init_scale: float = 0.1

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")


def build_vocab(sentence_groups):
    """Token -> index map in first-seen order, with <unk> at index 0."""
    vocab = {UNK_TOKEN: 0}
    for group in sentence_groups:
        for sentence in group:
            for token in sentence.tokens:
                if token not in vocab:
                    vocab[token] = len(vocab)
    return vocab


@dataclass
class EncodedSentence:
    """One forward pass: hidden states (L, 2h), emissions and per-token
    log-probabilities (L, |Y|), all on the active tape if there is one."""
    hidden: Tensor
    emissions: Tensor
    log_probs: Tensor

    @property
    def probs(self):
        return np.exp(self.log_probs.values)


class SequenceLabeler:

    def __init__(self, config, scheme, vocab, seed=0, params=None):
        self.config = config
        self.scheme = scheme
        self.vocab = dict(vocab)
        self.num_tags = len(scheme)
        if params is not None:
            self.params = params
            return
        rng = N.rng_stream(seed, "init")
        s = config.init_scale
        d, h = config.embed_dim, config.hidden_dim
        hp = 2 * h  # bidirectional concatenation

        def uniform(*shape):
            return Tensor.param(rng.uniform(-s, s, size=shape))

        def zeros(*shape):
            return Tensor.param(np.zeros(shape))

        p = {"embed": uniform(len(self.vocab), d)}
        for direction in ("f", "b"):
            p[f"lstm_{direction}.w_ih"] = uniform(d, 4 * h)
            p[f"lstm_{direction}.w_hh"] = uniform(h, 4 * h)
            p[f"lstm_{direction}.b"] = zeros(4 * h)
        p["head.w"] = uniform(hp, self.num_tags)
        p["head.b"] = zeros(self.num_tags)
        if config.head == "crf":
            p["crf.trans"] = zeros(self.num_tags, self.num_tags)
        for name in ("mu", "sigma"):
            p[f"{name}.w1"] = uniform(hp, hp)
            p[f"{name}.b1"] = zeros(hp)
            p[f"{name}.w2"] = uniform(hp, hp)
            p[f"{name}.b2"] = zeros(hp)
        self.params = p

    @property
    def hidden_width(self):
        return 2 * self.config.hidden_dim

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad[...] = 0.0

    def state_arrays(self):
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_state(self, state):
        if set(state) != set(self.params):
            raise ValueError("checkpoint parameter names do not match model")
        for k, t in self.params.items():
            if state[k].shape != t.values.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.values[...] = state[k]

    def clone(self):
        params = {k: Tensor.param(t.values) for k, t in self.params.items()}
        return SequenceLabeler(self.config, self.scheme, self.vocab, params=params)

    def token_indices(self, sentence):
        unk = self.vocab[UNK_TOKEN]
        return np.array([self.vocab.get(t, unk) for t in sentence.tokens], dtype=np.intp)

    def encode(self, sentence, dropout_active=False, noise_seed=0, with_log_probs=True):
        """One (possibly dropout-masked) forward pass over a sentence.

        With dropout_active and rate > 0, one inverted-dropout mask multiplies
        the embeddings and another the encoder outputs; both derive from
        noise_seed only, so a pass is replayable. Rate 0 draws nothing and is
        identical to deterministic inference. with_log_probs=False skips the
        per-token log distributions (the CRF sequence loss never reads them).
        """
        cfg = self.config
        idx = self.token_indices(sentence)
        L = len(idx)
        emb = N.embedding_rows(self.params["embed"], idx)
        rate = cfg.dropout if dropout_active else 0.0
        mask_e = mask_h = None
        if rate > 0.0:
            rng = N.rng_stream(noise_seed, "dropout-mask")
            keep = 1.0 - rate
            mask_e = (rng.random((L, cfg.embed_dim)) >= rate) / keep
            mask_h = (rng.random((L, self.hidden_width)) >= rate) / keep
        if mask_e is not None:
            emb = N.mul(emb, mask_e)
        fwd = self._lstm(emb, "f", reverse=False)
        bwd = self._lstm(emb, "b", reverse=True)
        hidden = N.concat([fwd, bwd], axis=1)
        if mask_h is not None:
            hidden = N.mul(hidden, mask_h)
        emissions = self.emissions_from_hidden(hidden)
        log_probs = self.log_probs_from_emissions(emissions) if with_log_probs else None
        return EncodedSentence(hidden, emissions, log_probs)

    def _lstm(self, emb, direction, reverse):
        cfg = self.config
        h = cfg.hidden_dim
        x = N.flip(emb, axis=0) if reverse else emb
        L = x.values.shape[0]
        # input projection for all steps at once; recurrent part is sequential
        xp = N.add(N.matmul(x, self.params[f"lstm_{direction}.w_ih"]),
                   self.params[f"lstm_{direction}.b"])
        w_hh = self.params[f"lstm_{direction}.w_hh"]
        h_t = Tensor(np.zeros((1, h)))
        c_t = Tensor(np.zeros((1, h)))
        rows = []
        for t in range(L):
            gates = N.add(N.narrow(xp, 0, t, 1), N.matmul(h_t, w_hh))
            i_g = N.sigmoid(N.narrow(gates, 1, 0, h))
            f_g = N.sigmoid(N.narrow(gates, 1, h, h))
            g_g = N.tanh(N.narrow(gates, 1, 2 * h, h))
            o_g = N.sigmoid(N.narrow(gates, 1, 3 * h, h))
            c_t = N.add(N.mul(f_g, c_t), N.mul(i_g, g_g))
            h_t = N.mul(o_g, N.tanh(c_t))
            rows.append(h_t)
        out = N.concat(rows, axis=0)
        return N.flip(out, axis=0) if reverse else out

    def emissions_from_hidden(self, hidden):
        return N.add(N.matmul(hidden, self.params["head.w"]), self.params["head.b"])

    def log_probs_from_emissions(self, emissions):
        """Per-token log distributions: log-softmax rows for the softmax head,
        forward-backward log-marginals under the CRF head."""
        if self.config.head == "softmax":
            return N.log_softmax(emissions, axis=1)
        return crf_token_log_marginals(emissions, self.params["crf.trans"])

    def predict_tag_indices(self, sentence):
        """Deterministic decoding: per-token argmax (softmax) or Viterbi (CRF)."""
        enc = self.encode(sentence, with_log_probs=False)
        if self.config.head == "softmax":
            return [int(i) for i in np.argmax(enc.emissions.values, axis=1)]
        return crf_viterbi(enc.emissions.values, self.params["crf.trans"].values)

    def predict_tags(self, sentence):
        return [self.scheme.tag(i) for i in self.predict_tag_indices(sentence)]


def softmax_head(model, hidden):
    """Probability vector of the emission affine for one hidden vector."""
    hidden = np.asarray(hidden, dtype=np.float64)
    logits = hidden @ model.params["head.w"].values + model.params["head.b"].values
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def gaussian_project(model, hidden):
    """Per-token Gaussian parameters (mu, sigma) from the projection heads.

    Accepts a single hidden vector or an (L, 2h) Tensor/matrix; sigma is the
    diagonal covariance, kept non-negative by a final softplus.
    """
    single = not isinstance(hidden, Tensor) and np.asarray(hidden).ndim == 1
    if not isinstance(hidden, Tensor):
        hidden = Tensor(np.atleast_2d(np.asarray(hidden, dtype=np.float64)))

    def mlp(name):
        p = model.params
        z = N.relu(N.add(N.matmul(hidden, p[f"{name}.w1"]), p[f"{name}.b1"]))
        return N.add(N.matmul(z, p[f"{name}.w2"]), p[f"{name}.b2"])

    mu = mlp("mu")
    sigma = N.softplus(mlp("sigma"))
    if single:
        return Tensor(mu.values[0]), Tensor(sigma.values[0])
    return mu, sigma


# ---------------------------------------------------------------------------
# CRF head: log partition, gold-path score, Viterbi, token marginals
# ---------------------------------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def crf_log_partition(emissions, transitions):
    """log sum over all tag paths of exp(path score), by the forward
    recursion in log space. Path score is emission(j, y_j) summed over
    positions plus transition(y_{j-1}, y_j) summed over adjacent pairs."""
    em, tr = _as_tensor(emissions), _as_tensor(transitions)
    L = em.values.shape[0]
    alpha = N.narrow(em, 0, 0, 1)  # (1, Y)
    for j in range(1, L):
        # alpha'[c] = em[j,c] + lse over prev of (alpha[prev] + tr[prev, c])
        alpha = N.add(N.logsumexp(N.add(N.transpose(alpha), tr), axis=0, keepdims=True),
                      N.narrow(em, 0, j, 1))
    return N.logsumexp(alpha, axis=1).sum()


def crf_gold_score(emissions, transitions, tag_indices):
    em, tr = _as_tensor(emissions), _as_tensor(transitions)
    tags = np.asarray(tag_indices, dtype=np.intp)
    score = N.pick_per_row(em, tags).sum()
    if len(tags) > 1:
        score = N.add(score, N.gather_pairs(tr, tags[:-1], tags[1:]).sum())
    return score


def crf_viterbi(emissions, transitions):
    """Highest-scoring tag path; ties break toward the lowest tag index."""
    em = np.asarray(emissions, dtype=np.float64)
    tr = np.asarray(transitions, dtype=np.float64)
    L, Y = em.shape
    best = em[0].copy()
    back = np.zeros((L, Y), dtype=np.intp)
    for j in range(1, L):
        cand = best[:, None] + tr  # (prev, cur)
        back[j] = np.argmax(cand, axis=0)  # argmax picks lowest index on ties
        best = cand[back[j], np.arange(Y)] + em[j]
    path = [int(np.argmax(best))]
    for j in range(L - 1, 0, -1):
        path.append(int(back[j][path[-1]]))
    return path[::-1]


def crf_token_log_marginals(emissions, transitions):
    """Forward-backward in log space; row j is log p(y_j = c | X)."""
    em, tr = _as_tensor(emissions), _as_tensor(transitions)
    L = em.values.shape[0]
    alphas = [N.narrow(em, 0, 0, 1)]
    for j in range(1, L):
        alphas.append(N.add(
            N.logsumexp(N.add(N.transpose(alphas[-1]), tr), axis=0, keepdims=True),
            N.narrow(em, 0, j, 1)))
    betas = [None] * L
    betas[L - 1] = Tensor(np.zeros((1, em.values.shape[1])))
    for j in range(L - 2, -1, -1):
        nxt = N.add(N.narrow(em, 0, j + 1, 1), betas[j + 1])  # (1, Y)
        # beta[prev] = lse over cur of (tr[prev, cur] + em[j+1, cur] + beta')
        betas[j] = N.transpose(N.logsumexp(N.add(tr, nxt), axis=1, keepdims=True))
    log_z = N.logsumexp(alphas[-1], axis=1, keepdims=True)
    rows = [N.add(N.add(a, b), N.neg(log_z)) for a, b in zip(alphas, betas)]
    return N.concat(rows, axis=0)


def crf_token_marginals(emissions, transitions):
    return N.exp(crf_token_log_marginals(emissions, transitions))


# ---------------------------------------------------------------------------
# checkpoints: structured text, bit-exact round trip via shortest float repr
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    cfg = model.config
    lines = [CHECKPOINT_MAGIC, "[config]"]
    lines.append(f"embed_dim = {cfg.embed_dim}")
    lines.append(f"hidden_dim = {cfg.hidden_dim}")
    lines.append(f"dropout = {cfg.dropout!r}")
    lines.append(f"head = {cfg.head}")
    lines.append(f"init_scale = {cfg.init_scale!r}")
    lines.append("[classes]")
    lines.extend(model.scheme.entity_classes)
    lines.append("[vocab]")
    tokens = sorted(model.vocab, key=model.vocab.get)
    lines.extend(tokens)
    for name in sorted(model.params):
        t = model.params[name]
        dims = " ".join(str(d) for d in t.values.shape)
        lines.append(f"[param {name} {dims}]")
        lines.append(" ".join(repr(float(v)) for v in t.values.reshape(-1)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    from .data import LabelScheme

    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} file")
    config_raw, classes, tokens, params = {}, [], [], {}
    section = None
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("[param "):
            _, name, *dims = line[1:-1].split()
            shape = tuple(int(d) for d in dims)
            values = np.array([float(v) for v in lines[i + 1].split()])
            params[name] = values.reshape(shape)
            i += 2
            continue
        if line.startswith("["):
            section = line[1:-1]
        elif section == "config":
            key, value = line.split(" = ", 1)
            config_raw[key] = value
        elif section == "classes":
            classes.append(line)
        elif section == "vocab":
            tokens.append(line)
        i += 1
    config = ModelConfig(
        embed_dim=int(config_raw["embed_dim"]),
        hidden_dim=int(config_raw["hidden_dim"]),
        dropout=float(config_raw["dropout"]),
        head=config_raw["head"],
        init_scale=float(config_raw["init_scale"]),
    )
    scheme = LabelScheme(classes)
    vocab = {tok: i for i, tok in enumerate(tokens)}
    model = SequenceLabeler(config, scheme, vocab, seed=0)
    model.load_state(params)
    return model
