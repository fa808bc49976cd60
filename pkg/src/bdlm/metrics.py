"""Translation metrics: corpus BLEU, eligible-word precision, frequency
buckets, and cross-attention export.

The word-precision metric is clipped per-sentence occurrence matching: a
reference occurrence counts as matched when the paired hypothesis still has
an unconsumed occurrence of the same word. Scores aggregate per word type
(matched / total reference occurrences), then average over types. All text
metrics case-fold by default; reports record the flag.
"""

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, IndexOutOfRange, LengthMismatch
from .vocab import MAX_SENT_SUBWORDS, SPECIAL_TOKENS

_BOS = SPECIAL_TOKENS.index("[bos]")
_EOS = SPECIAL_TOKENS.index("[eos]")


def _split(text, fold):
    return text.lower().split() if fold else text.split()


def _check_paired(hypotheses, references):
    if len(hypotheses) != len(references):
        raise LengthMismatch(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EmptyInput("no sentence pairs")


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4, case_insensitive=True) -> float:
    """Corpus-level BLEU in [0, 100]: clipped modified n-gram precisions up
    to max_n, geometric mean, multiplicative brevity penalty. Any empty
    precision level makes the score 0.0 (no smoothing)."""
    _check_paired(hypotheses, references)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hw, rw = _split(hyp, case_insensitive), _split(ref, case_insensitive)
        hyp_len += len(hw)
        ref_len += len(rw)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(hw, n), _ngrams(rw, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(hw) - n + 1, 0)
    if any(m == 0 or t == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def _type_scores(hypotheses, references, eligible, case_insensitive):
    matched, total = Counter(), Counter()
    for hyp, ref in zip(hypotheses, references):
        hc = Counter(_split(hyp, case_insensitive))
        rc = Counter(_split(ref, case_insensitive))
        for w, c in rc.items():
            if w in eligible:
                total[w] += c
                matched[w] += min(c, hc[w])
    return matched, total


def prec_info(hypotheses, references, eligible_words, case_insensitive=True):
    """Mean over eligible word types of (matched / reference occurrences).

    Returns None when no eligible word occurs in any reference: an empty
    set is not a zero score."""
    _check_paired(hypotheses, references)
    eligible = {w.lower() for w in eligible_words} if case_insensitive \
        else set(eligible_words)
    matched, total = _type_scores(hypotheses, references, eligible,
                                  case_insensitive)
    if not total:
        return None
    # sorted so the result is independent of sentence ordering quirks
    return sum(matched[w] / total[w] for w in sorted(total)) / len(total)


def freq_bucket_precision(hypotheses, references, train_freq, n_buckets=5,
                          case_insensitive=True):
    """Per-bucket precision with words grouped by log2 training frequency.

    Bucket edges partition [1, max_freq] evenly in log space; each bucket
    reports its range, the precision over its word types (None when the
    bucket holds none), and the type count.
    """
    _check_paired(hypotheses, references)
    if n_buckets < 2:
        raise ValueError("need at least 2 buckets")
    freq = Counter()
    for w, f in train_freq.items():
        key = w.lower() if case_insensitive else w
        freq[key] += f
    if not freq:
        raise EmptyInput("empty training frequency table")
    max_freq = max(freq.values())
    span = math.log2(max_freq) if max_freq > 1 else 1.0
    edges = [2.0 ** (span * k / n_buckets) for k in range(n_buckets + 1)]

    def bucket_of(f):
        return min(n_buckets - 1, int(n_buckets * math.log2(f) / span))

    matched, total = _type_scores(hypotheses, references, set(freq),
                                  case_insensitive)
    scores = [[] for _ in range(n_buckets)]
    for w in sorted(total):
        scores[bucket_of(freq[w])].append(matched[w] / total[w])
    return [{"lo": edges[k], "hi": edges[k + 1],
             "precision": (sum(s) / len(s) if (s := scores[k]) else None),
             "word_count": len(scores[k])}
            for k in range(n_buckets)]


@dataclass
class EvalReport:
    bleu: float
    prec_rare: float = None
    prec_dict: float = None
    buckets: list = field(default_factory=list)
    perplexity: float = float("nan")
    token_accuracy: float = float("nan")
    case_insensitive: bool = True

    def __post_init__(self):
        if not math.isfinite(self.bleu) or not 0.0 <= self.bleu <= 100.0:
            raise ValueError(f"bleu out of range: {self.bleu}")
        for name in ("prec_rare", "prec_dict"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of range: {v}")

    def to_dict(self):
        return {
            "bleu": self.bleu,
            "prec_rare": self.prec_rare,
            "prec_dict": self.prec_dict,
            "buckets": self.buckets,
            "perplexity": self.perplexity,
            "token_accuracy": self.token_accuracy,
            "case_insensitive": self.case_insensitive,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


def cross_attention(model, vocab, sentence, src_type, tgt_type, layer, head):
    """Greedy-decode one sentence and return the cross-attention of the
    chosen layer/head for the decoded steps.

    Returns (matrix (n_steps, n_src), src_pieces, tgt_pieces). The matrix row
    for step i is the attention used when predicting output token i; a
    sentence decoded to nothing keeps the single end-token step.
    """
    cfg = model.config
    if not 0 <= layer < cfg.dec_layers:
        raise IndexOutOfRange(f"layer {layer} outside 0..{cfg.dec_layers - 1}")
    if not 0 <= head < cfg.n_heads:
        raise IndexOutOfRange(f"head {head} outside 0..{cfg.n_heads - 1}")
    src_ids = [_BOS] + vocab.encode(sentence).ids[:MAX_SENT_SUBWORDS] + [_EOS]
    src = np.asarray([src_ids])
    types = np.full_like(src, src_type)
    hyp, _ = model.greedy_decode(src_ids, [src_type] * len(src_ids),
                                 tgt_type, _BOS, _EOS)
    dec_in = [_BOS] + hyp[:-1] if hyp else [_BOS]
    dec = np.asarray([dec_in])
    enc_states, enc_mask = model.encode_forward(src, types)
    collected = []
    model.decode_forward(dec, np.full_like(dec, tgt_type),
                         np.arange(len(dec_in))[None, :], None,
                         enc_states, enc_mask, use_soft=False,
                         dec_mask=np.ones_like(dec, dtype=bool),
                         collect_attn=collected)
    matrix = collected[layer][0, head]
    src_pieces = [vocab.subwords[i] for i in src_ids]
    tgt_pieces = [vocab.subwords[i] for i in hyp] or [SPECIAL_TOKENS[_EOS]]
    return matrix, src_pieces, tgt_pieces


def export_attention(path, model, vocab, sentence, src_type, tgt_type,
                     layer, head):
    """Write one sentence's cross-attention as CSV: a header row of source
    pieces, then one row per decoded step prefixed by its token string."""
    matrix, src_pieces, tgt_pieces = cross_attention(
        model, vocab, sentence, src_type, tgt_type, layer, head)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target\\source"] + src_pieces)
        for piece, row in zip(tgt_pieces, matrix):
            w.writerow([piece] + [f"{x:.8f}" for x in row])
    return matrix
