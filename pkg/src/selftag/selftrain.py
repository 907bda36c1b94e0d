"""The self-training loop: fine-tune a teacher on the labeled shots, pseudo
annotate the unlabeled pool, select reliable tokens per sentence, train a
student from the original initialization on the masked noise-robust objective,
promote it to teacher, repeat until validation F1 stops improving. The plain
self-training baseline and the supervised-only baseline are configurations of
the same loop.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .evaluate import corpus_f1
from .losses import LOSS_KINDS, RobustLossConfig, combined_objective
from .model import (
    ModelConfig,
    SequenceLabeler,
    build_vocab,
    crf_gold_score,
    crf_log_partition,
    save_checkpoint,
)
from .uncertainty import SELECTION_MODES, build_selection_report, mc_predict

logger = logging.getLogger(__name__)

MODES = ("sequst", "sst", "supervised_only")

# grid the defaults were tuned over; off-grid values warn, they do not fail
SEARCH_SPACE = {
    "batch_size": (1, 4, 8, 16),
    "learning_rate": (1e-5, 2e-5, 5e-5, 1e-4, 2e-4),
    "dropout": (0.1, 0.3, 0.5),
    "t_passes": (5, 10, 15, 20),
    "warmup_frac": (0.1,),
    "max_length": (64,),
    "lam": (0.25, 0.5, 0.75, 1.0),
    "k_perturb": (1, 2, 3, 4, 5),
    "tau": (10.0,),
}


class ConfigError(ValueError):
    def __init__(self, name, message):
        self.name = name
        super().__init__(f"{name}: {message}")


@dataclass(frozen=True)
class TrainingConfig:
    # optimizer
    learning_rate: float = 2e-4
    warmup_frac: float = 0.1
    batch_size: int = 8
    weight_decay: float = 0.01
    teacher_epochs: int = 20
    student_epochs: int = 5
    # uncertainty and selection
    t_passes: int = 20
    rho: float = 0.5
    selection_mode: str = "weighted"
    # losses
    tau: float = 10.0
    lam: float = 0.5
    k_perturb: int = 3
    loss_kind: str = "phce"
    stop_gradient: bool = True
    student_labeled_loss: bool = False
    # loop
    mode: str = "sequst"
    max_iterations: int = 5
    patience: int = 2
    seed: int = 42
    # model
    embed_dim: int = 32
    hidden_dim: int = 32
    dropout: float = 0.1
    head: str = "softmax"
    max_length: int = 64

    def __post_init__(self):
        checks = [
            ("learning_rate", self.learning_rate >= 0, "must be >= 0"),
            ("warmup_frac", 0.0 <= self.warmup_frac <= 1.0, "must be in [0, 1]"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("teacher_epochs", self.teacher_epochs >= 0, "must be >= 0"),
            ("student_epochs", self.student_epochs >= 0, "must be >= 0"),
            ("t_passes", self.t_passes >= 1, "must be >= 1"),
            ("rho", 0.0 < self.rho <= 1.0, "must be in (0, 1]"),
            ("selection_mode", self.selection_mode in SELECTION_MODES,
             f"must be one of {SELECTION_MODES}"),
            ("tau", self.tau > 1.0, "must be > 1"),
            ("lam", self.lam >= 0.0, "must be >= 0"),
            ("k_perturb", self.k_perturb >= 1, "must be >= 1"),
            ("loss_kind", self.loss_kind in LOSS_KINDS, f"must be one of {LOSS_KINDS}"),
            ("mode", self.mode in MODES, f"must be one of {MODES}"),
            ("max_iterations", self.max_iterations >= 0, "must be >= 0"),
            ("patience", self.patience >= 1, "must be >= 1"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("embed_dim", self.embed_dim >= 1, "must be >= 1"),
            ("hidden_dim", self.hidden_dim >= 1, "must be >= 1"),
            ("dropout", 0.0 <= self.dropout < 1.0, "must be in [0, 1)"),
            ("head", self.head in ("softmax", "crf"), "must be softmax or crf"),
            ("max_length", self.max_length >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(name, message)
        for name, space in SEARCH_SPACE.items():
            value = getattr(self, name)
            if not any(math.isclose(value, v) for v in space):
                logger.warning("%s = %s is outside the tuned grid %s", name, value, space)

    def effective(self):
        """Collapse the baseline modes onto the shared pipeline settings."""
        if self.mode == "sst":
            # hard pseudo labels from one deterministic pass, every token
            # kept, plain cross-entropy, no consistency term
            return dataclasses.replace(
                self, t_passes=1, rho=1.0, loss_kind="cross_entropy", lam=0.0)
        if self.mode == "supervised_only":
            return dataclasses.replace(self, max_iterations=0)
        return self

    @property
    def mc_dropout(self):
        return self.mode != "sst"

    def robust_config(self):
        return RobustLossConfig(tau=self.tau, lam=self.lam, k_perturb=self.k_perturb,
                                loss_kind=self.loss_kind, stop_gradient=self.stop_gradient)

    def model_config(self):
        return ModelConfig(embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                           dropout=self.dropout, head=self.head)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigError(key, "unknown configuration field")
            if raw is None:
                continue
            ftype = fields[key].type
            try:
                if ftype == "bool" or isinstance(fields[key].default, bool):
                    if isinstance(raw, bool):
                        kwargs[key] = raw
                    elif str(raw).lower() in ("true", "1", "yes"):
                        kwargs[key] = True
                    elif str(raw).lower() in ("false", "0", "no"):
                        kwargs[key] = False
                    else:
                        raise ValueError("expected true/false")
                elif isinstance(fields[key].default, int) and not isinstance(raw, float):
                    kwargs[key] = int(raw)
                elif isinstance(fields[key].default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(key, f"bad value {raw!r} ({exc})") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        mapping = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"line {lineno}", "expected `key = value`")
                key, value = line.split("=", 1)
                mapping[key.strip()] = value.strip().strip("'\"")
        return cls.from_mapping(mapping)


class AdamW:
    """Decoupled-weight-decay Adam over the engine's parameter tensors."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self, lr_scale=1.0):
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.values -= lr * (update + self.weight_decay * p.values)


def _warmup_scale(step, warmup_steps):
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def supervised_loss(model, sentence, dropout_active, noise_seed):
    """Negative log-likelihood of the gold tags for one sentence: token-mean
    cross-entropy under the softmax head, sequence NLL (log partition minus
    gold path score) under the CRF head."""
    gold = np.array([model.scheme.index(t) for t in sentence.gold_tags], dtype=np.intp)
    if model.config.head == "softmax":
        enc = model.encode(sentence, dropout_active, noise_seed)
        return N.neg(N.pick_per_row(enc.log_probs, gold).mean())
    enc = model.encode(sentence, dropout_active, noise_seed, with_log_probs=False)
    trans = model.params["crf.trans"]
    return N.add(crf_log_partition(enc.emissions, trans),
                 N.neg(crf_gold_score(enc.emissions, trans, gold)))


def train_supervised(model, labeled, validation, config, phase=("finetune", 0)):
    """Mini-batch AdamW with linear warmup on gold-tagged sentences; restores
    the epoch snapshot with the best validation F1. Returns (model, history)
    where history rows are (epoch, mean_loss, val_f1)."""
    labeled = list(labeled)
    if not labeled:
        raise ValueError("empty labeled set")
    if any(s.gold_tags is None for s in labeled):
        raise ValueError("supervised training needs gold tags")
    data_rng = N.rng_stream(config.seed, "data", *phase)
    noise_rng = N.rng_stream(config.seed, "dropout-seeds", *phase)
    opt = AdamW(model.parameters(), lr=config.learning_rate,
                weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(labeled) / config.batch_size)
    warmup_steps = max(1, round(config.warmup_frac * config.teacher_epochs * steps_per_epoch))
    best_f1, best_state = -1.0, None
    history = []
    step = 0
    for epoch in range(config.teacher_epochs):
        order = data_rng.permutation(len(labeled))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = [labeled[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            opt.zero_grad()
            with N.Tape() as tape:
                total = None
                for sentence in batch:
                    loss = supervised_loss(model, sentence, True,
                                           int(noise_rng.integers(0, 2**32)))
                    total = loss if total is None else N.add(total, loss)
                total = N.mul(total, 1.0 / len(batch))
            if not np.isfinite(total.values):
                raise FloatingPointError(f"non-finite supervised loss at epoch {epoch}")
            tape.backward(total)
            step += 1
            opt.step(_warmup_scale(step, warmup_steps))
            epoch_losses.append(float(total.values))
        val_f1 = corpus_f1(model, validation).f1 if validation else 0.0
        history.append((epoch, float(np.mean(epoch_losses)), val_f1))
        if val_f1 > best_f1:
            best_f1, best_state = val_f1, model.state_arrays()
    if best_state is not None:
        model.load_state(best_state)
    return model, history


@dataclass(frozen=True)
class SelectionStats:
    mean_bald: float
    mean_confidence: float
    tokens_selected: int
    tokens_total: int


@dataclass(frozen=True)
class IterationRecord:
    """Observability for one pass of the while-loop; append-only."""
    iteration: int
    teacher_val_f1: float
    selection: SelectionStats = None
    student_losses: tuple = None
    checkpoint_path: str = None

    def to_lines(self):
        lines = [
            f"iteration = {self.iteration}",
            f"teacher_val_f1 = {self.teacher_val_f1!r}",
        ]
        if self.selection is not None:
            lines += [
                f"mean_bald = {self.selection.mean_bald!r}",
                f"mean_confidence = {self.selection.mean_confidence!r}",
                f"tokens_selected = {self.selection.tokens_selected}",
                f"tokens_total = {self.selection.tokens_total}",
            ]
        if self.student_losses is not None:
            lines.append("student_losses = " + " ".join(repr(v) for v in self.student_losses))
        if self.checkpoint_path is not None:
            lines.append(f"checkpoint = {os.path.basename(self.checkpoint_path)}")
        return lines


def select_for_round(teacher, unlabeled, config, iteration):
    """Freeze pseudo labels and masks for one round: MC passes, scores and
    the per-sentence reliable-token mask, all with the frozen teacher."""
    mc_rng = N.rng_stream(config.seed, "mc-seeds", iteration)
    select_rng = N.rng_stream(config.seed, "select-seeds", iteration)
    reports = []
    for sentence in unlabeled:
        mc = mc_predict(teacher, sentence, config.t_passes,
                        int(mc_rng.integers(0, 2**32)),
                        dropout_active=config.mc_dropout)
        reports.append(build_selection_report(
            mc, config.rho, int(select_rng.integers(0, 2**32)),
            mode=config.selection_mode))
    return reports


def _selection_stats(reports):
    bald = np.concatenate([r.bald for r in reports])
    conf = np.concatenate([r.confidence for r in reports])
    selected = int(sum(r.selected_count for r in reports))
    return SelectionStats(float(bald.mean()), float(conf.mean()), selected, bald.size)


def student_round(base_state, teacher, unlabeled, labeled, config, iteration):
    """Lines 5-13 of the loop: re-initialize the student from the original
    parameters, train on the frozen pseudo-labeled masked corpus under the
    combined objective. Returns (student, reports, stats, loss_curve)."""
    unlabeled = list(unlabeled)
    if not unlabeled:
        raise ValueError("empty unlabeled set")
    reports = select_for_round(teacher, unlabeled, config, iteration)
    if all(r.selected_count == 0 for r in reports):
        raise RuntimeError("teacher selected no tokens in any sentence; "
                           "raise rho or check the teacher")
    stats = _selection_stats(reports)

    student = teacher.clone()
    student.load_state(base_state)
    robust = config.robust_config()
    data_rng = N.rng_stream(config.seed, "data", "student", iteration)
    step_rng = N.rng_stream(config.seed, "step-seeds", iteration)
    sup_rng = N.rng_stream(config.seed, "student-sup", iteration)
    opt = AdamW(student.parameters(), lr=config.learning_rate,
                weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(unlabeled) / config.batch_size)
    warmup_steps = max(1, round(config.warmup_frac * config.student_epochs * steps_per_epoch))
    losses = []
    step = 0
    for _ in range(config.student_epochs):
        order = data_rng.permutation(len(unlabeled))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [(unlabeled[i], reports[i].pseudo, reports[i].mask) for i in idx]
            opt.zero_grad()
            with N.Tape() as tape:
                total = N.mul(
                    combined_objective(batch, student, robust,
                                       int(step_rng.integers(0, 2**32))),
                    1.0 / len(batch))
                if config.student_labeled_loss and labeled:
                    pick = sup_rng.permutation(len(labeled))[:config.batch_size]
                    sup = None
                    for i in pick:
                        term = supervised_loss(student, labeled[i], True,
                                               int(sup_rng.integers(0, 2**32)))
                        sup = term if sup is None else N.add(sup, term)
                    total = N.add(total, N.mul(sup, 1.0 / len(pick)))
            tape.backward(total)
            step += 1
            opt.step(_warmup_scale(step, warmup_steps))
            losses.append(float(total.values))
    return student, reports, stats, tuple(losses)


def self_train(model, split, config, run_dir=None, scheme=None):
    """The full loop; returns (best_teacher, records).

    Iteration i fine-tunes the current teacher on the labeled shots and
    evaluates it; unless converged (patience exceeded) or out of iterations,
    a student then trains on the pseudo-labeled unlabeled pool and becomes
    the next teacher. The returned model is the best-validation teacher.
    max_iterations = 0 therefore returns the once-fine-tuned teacher.
    """
    cfg = config.effective()
    base_state = model.state_arrays()
    teacher = model
    records = []
    best_f1, best_state, best_it = -1.0, None, 0
    for iteration in range(cfg.max_iterations + 1):
        teacher, _ = train_supervised(teacher, split.labeled, split.validation,
                                      cfg, phase=("finetune", iteration))
        val_f1 = corpus_f1(teacher, split.validation).f1 if split.validation else 0.0
        if val_f1 > best_f1:
            best_f1, best_state, best_it = val_f1, teacher.state_arrays(), iteration
        ckpt = None
        if run_dir is not None:
            ckpt = os.path.join(run_dir, "checkpoints", f"iter_{iteration}.ckpt")
            save_checkpoint(teacher, ckpt)
        converged = iteration - best_it >= cfg.patience
        if iteration == cfg.max_iterations or converged:
            records.append(IterationRecord(iteration, val_f1, checkpoint_path=ckpt))
            _persist_records(records, run_dir)
            break
        student, reports, stats, losses = student_round(
            base_state, teacher, split.unlabeled, split.labeled, cfg, iteration)
        records.append(IterationRecord(iteration, val_f1, stats, losses, ckpt))
        _persist_records(records, run_dir)
        if run_dir is not None and scheme is not None:
            from .uncertainty import write_selection_reports
            write_selection_reports(
                os.path.join(run_dir, "selection", f"iter_{iteration}.tsv"),
                split.unlabeled, reports, scheme)
        teacher = student
    best = teacher.clone()
    best.load_state(best_state)
    return best, records


def _persist_records(records, run_dir):
    if run_dir is None:
        return
    os.makedirs(run_dir, exist_ok=True)
    blocks = ["\n".join(r.to_lines()) for r in records]
    with open(os.path.join(run_dir, "iterations.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(blocks) + "\n")


def run_experiment(split, scheme, config, out_dir):
    """One full run into a directory: config snapshot, per-iteration
    checkpoints and records, selection exports, final checkpoint + metrics."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    vocab = build_vocab([split.labeled, split.unlabeled])
    model = SequenceLabeler(config.model_config(), scheme, vocab, seed=config.seed)
    best, records = self_train(model, split, config, run_dir=out_dir, scheme=scheme)
    save_checkpoint(best, os.path.join(out_dir, "final.ckpt"))
    metrics = {
        "mode": config.mode,
        "seed": config.seed,
        "config_hash": config.hash(),
        "iterations": len(records),
        "best_val_f1": max(r.teacher_val_f1 for r in records),
    }
    for r in records:
        metrics[f"val_f1.{r.iteration}"] = r.teacher_val_f1
    write_metrics(metrics, os.path.join(out_dir, "metrics.txt"))
    return best, records, metrics


def write_metrics(metrics, path):
    """Flat key = value metrics, keys sorted, floats via repr: two runs with
    identical configs and seeds produce byte-identical files."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if " = " in line:
                key, value = line.strip().split(" = ", 1)
                out[key] = value
    return out
