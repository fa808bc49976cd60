"""Adam, batching, and the pretrain / fine-tune loops.

Pretraining runs on synthesized samples with soft positions on; fine-tuning
runs on parallel text with soft positions off (the table stays in the
checkpoint untouched). Both loops validate between epochs, keep the best
parameters by validation token accuracy, and stop early after `patience`
validations without improvement.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (AllPositionsPadded, ConfigMismatch, DivergedLoss,
                     EmptyDataset)
from .model import Model
from .samples import TypeTable
from .vocab import MAX_SENT_SUBWORDS, SPECIAL_TOKENS

_BOS = SPECIAL_TOKENS.index("[bos]")
_EOS = SPECIAL_TOKENS.index("[eos]")


class Adam:
    """Adam with bias correction; per-parameter step counters so tensors that
    receive no gradient (a frozen table) keep unbiased statistics."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[k] += 1
            t = self.t[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            m_hat = m / (1.0 - self.b1 ** t)
            v_hat = v / (1.0 - self.b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 0        # pretraining budget, in optimizer steps
    max_epochs: int = 0       # fine-tuning budget, in epochs
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)   # one dict per validation
    steps: int = 0
    best_metric: float = float("-inf")
    best_step: int = -1
    stopped_early: bool = False

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for e in self.entries:
                f.write(json.dumps(e, sort_keys=True) + "\n")
            f.write(json.dumps({
                "summary": True, "steps": self.steps,
                "best_metric": self.best_metric, "best_step": self.best_step,
                "stopped_early": self.stopped_early}, sort_keys=True) + "\n")


@dataclass
class Batch:
    enc_tokens: np.ndarray
    enc_types: np.ndarray
    enc_mask: np.ndarray
    dec_tokens: np.ndarray
    dec_types: np.ndarray
    dec_hard: np.ndarray
    dec_soft: np.ndarray
    dec_mask: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray


def _rows(rows, dtype=np.int64):
    n = max(len(r) for r in rows)
    out = np.zeros((len(rows), n), dtype=dtype)
    for b, r in enumerate(rows):
        out[b, :len(r)] = r
    return out


def collate(samples) -> Batch:
    """Pad a list of pretraining samples into one batch (pad id 0)."""
    enc_tokens = _rows([s.enc_tokens for s in samples])
    dec_tokens = _rows([s.dec_in_tokens for s in samples])
    enc_mask = np.zeros(enc_tokens.shape, dtype=bool)
    dec_mask = np.zeros(dec_tokens.shape, dtype=bool)
    for b, s in enumerate(samples):
        enc_mask[b, :len(s.enc_tokens)] = True
        dec_mask[b, :len(s.dec_in_tokens)] = True
    return Batch(
        enc_tokens, _rows([s.enc_types for s in samples]), enc_mask,
        dec_tokens, _rows([s.dec_in_types for s in samples]),
        _rows([s.dec_hard_pos for s in samples]),
        _rows([s.dec_soft_pos for s in samples]), dec_mask,
        _rows([s.target_tokens for s in samples]), dec_mask.copy())


def _check_bounds(samples, config):
    max_tok = max(max(max(s.enc_tokens), max(s.target_tokens)) for s in samples)
    max_type = max(max(s.enc_types) for s in samples)
    if max_tok >= config.vocab_size:
        raise ConfigMismatch(
            f"token id {max_tok} outside model vocab {config.vocab_size}")
    if max_type >= config.n_types:
        raise ConfigMismatch(
            f"type id {max_type} outside model type table {config.n_types}")


def _forward_loss(model: Model, batch: Batch, use_soft, train, rng):
    enc_states, enc_mask = model.encode_forward(
        batch.enc_tokens, batch.enc_types, batch.enc_mask, train=train, rng=rng)
    logits = model.decode_forward(
        batch.dec_tokens, batch.dec_types, batch.dec_hard, batch.dec_soft,
        enc_states, enc_mask, use_soft=use_soft, dec_mask=batch.dec_mask,
        train=train, rng=rng)
    return model.loss(logits, batch.target, batch.target_mask)


def evaluate_batches(model: Model, batches, use_soft=False):
    """Teacher-forced metrics: smoothed loss, token accuracy, and perplexity
    from the un-smoothed NLL, all over real target tokens."""
    tot = correct = 0
    nll_sum = loss_sum = 0.0
    for batch in batches:
        loss, stats = _forward_loss(model, batch, use_soft, train=False, rng=None)
        tot += stats["n_tokens"]
        correct += stats["n_correct"]
        nll_sum += stats["nll_sum"]
        loss_sum += float(loss.data) * stats["n_tokens"]
    if tot == 0:
        raise AllPositionsPadded("validation set has no target tokens")
    return {"loss": loss_sum / tot, "acc": correct / tot,
            "nll": nll_sum / tot, "ppl": math.exp(nll_sum / tot)}


def _batched(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


class _EarlyStop:
    """Keeps the best parameter snapshot by a validation metric."""

    def __init__(self, model, patience):
        self.model = model
        self.patience = patience
        self.best = model.clone_params()
        self.best_metric = float("-inf")
        self.best_step = 0
        self.bad = 0

    def update(self, metric, step):
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_step = step
            self.best = self.model.clone_params()
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def restore(self):
        self.model.params = self.best


def _run_epochs(model, train_items, val_batches, cfg, use_soft, make_batch,
                budget_steps, budget_epochs, epoch_hook=None):
    opt = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    stopper = _EarlyStop(model, cfg.patience) if val_batches else None
    log = TrainLog()
    steps = epoch = 0
    while True:
        if budget_steps and steps >= budget_steps:
            break
        if budget_epochs and epoch >= budget_epochs:
            break
        if not budget_steps and not budget_epochs:
            break
        epoch += 1
        order = rng.permutation(len(train_items))
        loss_sum = n_step = 0
        for chunk in _batched(order, cfg.batch_size):
            batch = make_batch([train_items[i] for i in chunk])
            opt.zero_grad()
            loss, _ = _forward_loss(model, batch, use_soft, train=True, rng=rng)
            if not np.isfinite(loss.data):
                raise DivergedLoss(f"loss {float(loss.data)} at step {steps + 1}")
            loss.backward()
            opt.step()
            loss_sum += float(loss.data)
            n_step += 1
            steps += 1
            if budget_steps and steps >= budget_steps:
                break
        entry = {"epoch": epoch, "step": steps,
                 "train_loss": loss_sum / max(n_step, 1)}
        if val_batches:
            val = evaluate_batches(model, val_batches, use_soft=use_soft)
            entry["val_loss"] = val["loss"]
            entry["val_acc"] = val["acc"]
            entry["val_ppl"] = val["ppl"]
        if epoch_hook is not None:
            extra = epoch_hook(model, epoch)
            if extra:
                entry.update(extra)
        log.entries.append(entry)
        if val_batches and stopper.update(entry["val_acc"], steps):
            log.stopped_early = True
            break
    if stopper is not None:
        stopper.restore()
        log.best_metric = stopper.best_metric
        log.best_step = stopper.best_step
    log.steps = steps
    return log


def pretrain(model: Model, samples, cfg: TrainConfig) -> TrainLog:
    """Train on synthesized samples for up to cfg.max_steps optimizer steps.

    A cfg.val_fraction slice (seeded split) is held out for validation and
    early stopping; the model ends at its best validation accuracy.
    """
    if not samples:
        raise EmptyDataset("no pretraining samples")
    _check_bounds(samples, model.config)
    if cfg.max_steps <= 0:
        return TrainLog()
    split_rng = np.random.default_rng(cfg.seed)
    perm = split_rng.permutation(len(samples))
    n_val = int(len(samples) * cfg.val_fraction)
    val = [samples[i] for i in perm[:n_val]]
    train = [samples[i] for i in perm[n_val:]]
    if not train:
        raise EmptyDataset("validation split leaves no training samples")
    val_batches = [collate(c) for c in _batched(val, cfg.batch_size)]
    return _run_epochs(model, train, val_batches, cfg, use_soft=True,
                       make_batch=collate, budget_steps=cfg.max_steps,
                       budget_epochs=0)


def encode_pairs(pairs, vocab, max_subwords=MAX_SENT_SUBWORDS):
    """(src_text, tgt_text) pairs to id pairs; drops pairs where either side
    is empty or longer than max_subwords. Returns (pairs_ids, n_skipped)."""
    out, skipped = [], 0
    for src, tgt in pairs:
        s = vocab.encode(src).ids
        t = vocab.encode(tgt).ids
        if not s or not t or len(s) > max_subwords or len(t) > max_subwords:
            skipped += 1
            continue
        out.append((s, t))
    return out, skipped


def make_nmt_batch(pairs_ids, src_type, tgt_type) -> Batch:
    """Encoder reads [bos] src [eos]; the decoder predicts tgt [eos] from
    [bos] tgt. Soft positions are zeros (unused at fine-tune time)."""
    enc_rows = [[_BOS] + s + [_EOS] for s, _ in pairs_ids]
    dec_rows = [[_BOS] + t for _, t in pairs_ids]
    tgt_rows = [t + [_EOS] for _, t in pairs_ids]
    enc_tokens = _rows(enc_rows)
    dec_tokens = _rows(dec_rows)
    enc_mask = np.zeros(enc_tokens.shape, dtype=bool)
    dec_mask = np.zeros(dec_tokens.shape, dtype=bool)
    for b, r in enumerate(enc_rows):
        enc_mask[b, :len(r)] = True
    for b, r in enumerate(dec_rows):
        dec_mask[b, :len(r)] = True
    hard = np.broadcast_to(np.arange(dec_tokens.shape[1]), dec_tokens.shape).copy()
    return Batch(
        enc_tokens, np.full_like(enc_tokens, src_type) * enc_mask, enc_mask,
        dec_tokens, np.full_like(dec_tokens, tgt_type) * dec_mask,
        hard * dec_mask, np.zeros_like(dec_tokens), dec_mask,
        _rows(tgt_rows), dec_mask.copy())


def finetune(model: Model, train_pairs, val_pairs, vocab, src_lang, tgt_lang,
             cfg: TrainConfig, epoch_hook=None) -> TrainLog:
    """Supervised translation training, up to cfg.max_epochs epochs with
    early stopping on validation token accuracy."""
    types = TypeTable((src_lang, tgt_lang))
    if types.n_types > model.config.n_types:
        raise ConfigMismatch("model type table too small for language pair")
    src_t, tgt_t = types.lang_id(src_lang), types.lang_id(tgt_lang)
    train_ids, _ = encode_pairs(train_pairs, vocab)
    if not train_ids:
        raise EmptyDataset("no usable training pairs")
    val_ids, _ = encode_pairs(val_pairs, vocab)
    if vocab.size > model.config.vocab_size:
        raise ConfigMismatch(
            f"vocab size {vocab.size} exceeds model vocab {model.config.vocab_size}")
    val_batches = [make_nmt_batch(c, src_t, tgt_t)
                   for c in _batched(val_ids, cfg.batch_size)]
    return _run_epochs(model, train_ids, val_batches, cfg, use_soft=False,
                       make_batch=lambda c: make_nmt_batch(c, src_t, tgt_t),
                       budget_steps=0, budget_epochs=cfg.max_epochs,
                       epoch_hook=epoch_hook)


def translate_corpus(model: Model, sentences, vocab, src_type, tgt_type,
                     batch_size=32, max_len=None):
    """Greedy-decode a list of sentences; returns detokenized strings.

    Inputs longer than the pretraining sentence cap are truncated to it.
    """
    out = []
    for chunk in _batched(list(sentences), batch_size):
        rows = [[_BOS] + vocab.encode(s).ids[:MAX_SENT_SUBWORDS] + [_EOS]
                for s in chunk]
        toks = _rows(rows)
        types = np.where(toks != 0, src_type, 0)
        hyps, _ = model.greedy_decode_batch(toks, types, tgt_type, _BOS, _EOS)
        out.extend(vocab.decode(ids) for ids in hyps)
    return out
