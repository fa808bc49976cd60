"""Pretraining sample synthesis: span masking, payload substitution, shards.

Three objectives share one encoder-decoder format. MLM masks dictionary
spans and recovers them; RLM swaps spans for one dictionary payload and
recovers the originals; IPLM masks spans and predicts every payload of the
chosen kind, [sep]-joined. Soft positions anchor each target token to the
encoder slot of its span; hard positions are plain output indices.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dictionary import (InfoKind, KIND_ORDER, TAG_KINDS, expand_tag,
                         match_phrases)
from .errors import (EmptyDataset, EmptyShards, MissingPayload,
                     NoMappableWords, OverlappingSpans, SampleTooLong,
                     UnknownLanguage)
from .vocab import MAX_SENT_SUBWORDS, SPECIAL_TOKENS, Vocabulary

MAX_ENC_LEN = MAX_SENT_SUBWORDS + 2      # sentence cap plus start/end tokens

_COUNT_TAG = 1 << 30                     # spawn keys outside the repeat range
_SHUFFLE_TAG = 1 << 31

SHARD_MAGIC = b"bdlm-shard v1\n"


class Objective(Enum):
    MLM = 0
    RLM = 1
    IPLM = 2


_START_ID = {o: SPECIAL_TOKENS.index(f"[{o.name.lower()}_s]") for o in Objective}
_END_ID = {o: SPECIAL_TOKENS.index(f"[{o.name.lower()}_e]") for o in Objective}
_MASK_ID = SPECIAL_TOKENS.index("[mask]")
_SEP_ID = SPECIAL_TOKENS.index("[sep]")


class TypeTable:
    """Type-embedding ids: sorted languages first, then the five info kinds."""

    def __init__(self, languages):
        self.languages = tuple(sorted(set(languages)))
        self._kind_base = len(self.languages)

    @property
    def n_types(self):
        return self._kind_base + len(KIND_ORDER)

    def lang_id(self, language):
        try:
            return self.languages.index(language)
        except ValueError:
            raise UnknownLanguage(f"language {language!r} not in {self.languages}") from None

    def kind_id(self, kind: InfoKind):
        return self._kind_base + KIND_ORDER.index(kind)

    def payload_type(self, kind: InfoKind, sentence_language) -> int:
        """Translation payloads carry the other language's id; other kinds
        carry their own kind id."""
        if kind is InfoKind.TRANSLATION:
            others = [l for l in self.languages if l != sentence_language]
            if len(others) != 1:
                raise UnknownLanguage(
                    f"translation typing needs a language pair, have {self.languages}")
            return self.lang_id(others[0])
        return self.kind_id(kind)


@dataclass
class PretrainConfig:
    languages: tuple
    mask_ratio: float = 0.15
    sample_rate: float = 1.0
    mix_ratio: tuple = (1.0, 1.0, 1.0)
    info_kind: InfoKind = InfoKind.TRANSLATION
    seed: int = 0

    def __post_init__(self):
        self.languages = tuple(self.languages)
        if len(self.languages) != 2 or len(set(self.languages)) != 2:
            raise ValueError("languages must be a distinct pair")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        if self.sample_rate < 0.0:
            raise ValueError("sample_rate must be non-negative")
        self.mix_ratio = tuple(float(w) for w in self.mix_ratio)
        if len(self.mix_ratio) != 3 or min(self.mix_ratio) < 0 or sum(self.mix_ratio) <= 0:
            raise ValueError("mix_ratio must be three non-negative weights")


@dataclass
class PretrainSample:
    objective: Objective
    enc_tokens: list
    enc_types: list
    dec_in_tokens: list
    dec_in_types: list
    dec_hard_pos: list
    dec_soft_pos: list
    target_tokens: list

    def validate(self):
        n = len(self.target_tokens)
        assert n >= 1, "sample must mask at least one span"
        assert len(self.enc_tokens) == len(self.enc_types) <= MAX_ENC_LEN
        assert self.enc_tokens[0] == _START_ID[self.objective]
        assert self.enc_tokens[-1] == _END_ID[self.objective]
        assert (len(self.dec_in_tokens) == len(self.dec_in_types)
                == len(self.dec_hard_pos) == len(self.dec_soft_pos) == n)
        assert self.dec_hard_pos == list(range(n))
        assert all(0 <= s < len(self.enc_tokens) for s in self.dec_soft_pos)


def derive_decoder_inputs(objective, enc_types, soft, target):
    """Decoder-side arrays from the stored shard fields.

    dec_in is the target shifted right behind the objective start token.
    MLM/RLM targets are sentence-language words, so their types repeat the
    start token's type; IPLM targets are payload tokens, typed by the
    kind-typed mask they anchor to (shifted with the tokens).
    """
    n = len(target)
    dec_in_tokens = [_START_ID[objective]] + list(target[:-1])
    if objective is Objective.IPLM:
        dec_in_types = [enc_types[0]] + [enc_types[s] for s in soft[:n - 1]]
    else:
        dec_in_types = [enc_types[0]] * n
    return dec_in_tokens, dec_in_types, list(range(n))


def _check_spans(words, spans):
    prev_end = 0
    for m in spans:
        if m.start < prev_end:
            raise OverlappingSpans(f"span at {m.start} overlaps previous")
        if m.start + m.length > len(words):
            raise OverlappingSpans(f"span at {m.start} beyond sentence end")
        prev_end = m.start + m.length
    if not spans:
        raise NoMappableWords("no spans to mask")


def _word_subwords(words, vocab):
    enc = vocab.encode_words(words)
    per_word = [[] for _ in words]
    for tid, w in zip(enc.ids, enc.word_ids):
        per_word[w].append(tid)
    return per_word


def _finish(objective, enc_tokens, enc_types, soft, target, target_types=None):
    if len(enc_tokens) > MAX_ENC_LEN:
        raise SampleTooLong(f"encoder length {len(enc_tokens)}")
    if len(target) > MAX_ENC_LEN:
        raise SampleTooLong(f"target length {len(target)}")
    dec_in_tokens, dec_in_types, hard = derive_decoder_inputs(
        objective, enc_types, soft, target)
    sample = PretrainSample(objective, enc_tokens, enc_types, dec_in_tokens,
                            dec_in_types, hard, soft, target)
    sample.validate()
    return sample


def _masked_encoder(objective, words, spans, per_word, src, mask_type):
    """Encoder stream with each span collapsed to one [mask]. Returns the
    token/type lists and the mask position of each span, in span order."""
    enc_tokens = [_START_ID[objective]]
    enc_types = [src]
    anchors = []
    spans_by_start = {m.start: m for m in spans}
    w = 0
    while w < len(words):
        m = spans_by_start.get(w)
        if m is None:
            enc_tokens.extend(per_word[w])
            enc_types.extend([src] * len(per_word[w]))
            w += 1
        else:
            anchors.append(len(enc_tokens))
            enc_tokens.append(_MASK_ID)
            enc_types.append(mask_type)
            w += m.length
    enc_tokens.append(_END_ID[objective])
    enc_types.append(src)
    return enc_tokens, enc_types, anchors


def _span_targets(spans, anchors, per_word):
    target, soft = [], []
    for m, anchor in zip(spans, anchors):
        span_toks = [t for i in range(m.start, m.start + m.length)
                     for t in per_word[i]]
        target.extend(span_toks)
        soft.extend([anchor] * len(span_toks))
    return target, soft


def make_mlm(words, language, spans, vocab: Vocabulary,
             types: TypeTable) -> PretrainSample:
    """Mask each span with a single [mask]; targets are the original subwords."""
    words = list(words)
    spans = sorted(spans, key=lambda m: m.start)
    _check_spans(words, spans)
    src = types.lang_id(language)
    per_word = _word_subwords(words, vocab)
    enc_tokens, enc_types, anchors = _masked_encoder(
        Objective.MLM, words, spans, per_word, src, src)
    target, soft = _span_targets(spans, anchors, per_word)
    return _finish(Objective.MLM, enc_tokens, enc_types, soft, target)


def _payload_text(entry, kind, payload):
    if kind in TAG_KINDS:
        return " ".join(expand_tag(payload, len(entry.words)))
    return payload


def make_rlm(words, language, spans, vocab: Vocabulary, types: TypeTable,
             kind: InfoKind, rng) -> PretrainSample:
    """Replace each span with one uniformly chosen payload of `kind`;
    targets are the original subwords. Spans without such a payload are
    skipped; a sample with no usable span is an error."""
    words = list(words)
    spans = sorted(spans, key=lambda m: m.start)
    _check_spans(words, spans)
    usable = [m for m in spans if m.entry.get(kind)]
    if not usable:
        raise MissingPayload(kind)
    src = types.lang_id(language)
    ptype = types.payload_type(kind, language)
    per_word = _word_subwords(words, vocab)

    enc_tokens = [_START_ID[Objective.RLM]]
    enc_types = [src]
    anchors = []
    spans_by_start = {m.start: m for m in usable}
    w = 0
    while w < len(words):
        m = spans_by_start.get(w)
        if m is None:
            enc_tokens.extend(per_word[w])
            enc_types.extend([src] * len(per_word[w]))
            w += 1
        else:
            payloads = m.entry.get(kind)
            pick = payloads[int(rng.integers(len(payloads)))]
            rep = vocab.encode(_payload_text(m.entry, kind, pick)).ids
            anchors.append(len(enc_tokens))
            enc_tokens.extend(rep)
            enc_types.extend([ptype] * len(rep))
            w += m.length
    enc_tokens.append(_END_ID[Objective.RLM])
    enc_types.append(src)

    target, soft = _span_targets(usable, anchors, per_word)
    return _finish(Objective.RLM, enc_tokens, enc_types, soft, target)


def make_iplm(words, language, spans, vocab: Vocabulary, types: TypeTable,
              kind: InfoKind) -> PretrainSample:
    """Mask spans as in MLM; the target is every payload of `kind` for each
    span, [sep]-joined in dictionary order. Masks carry the payload type so
    the encoder knows which information to produce."""
    words = list(words)
    spans = sorted(spans, key=lambda m: m.start)
    _check_spans(words, spans)
    usable = [m for m in spans if m.entry.get(kind)]
    if not usable:
        raise MissingPayload(kind)
    src = types.lang_id(language)
    ptype = types.payload_type(kind, language)
    per_word = _word_subwords(words, vocab)
    enc_tokens, enc_types, anchors = _masked_encoder(
        Objective.IPLM, words, usable, per_word, src, ptype)

    target, soft = [], []
    for m, anchor in zip(usable, anchors):
        block = []
        for j, payload in enumerate(m.entry.get(kind)):
            if j:
                block.append(_SEP_ID)
            block.extend(vocab.encode(_payload_text(m.entry, kind, payload)).ids)
        target.extend(block)
        soft.extend([anchor] * len(block))
    return _finish(Objective.IPLM, enc_tokens, enc_types, soft, target)


def select_spans(sentence_words, dictionary, language, mask_ratio, rng):
    """Independent mask_ratio coin per dictionary match; when every coin
    misses, one match is drawn uniformly so each sample masks something."""
    candidates = match_phrases(sentence_words, dictionary, language)
    if not candidates:
        raise NoMappableWords("sentence has no dictionary match")
    coins = rng.random(len(candidates))
    chosen = [m for m, c in zip(candidates, coins) if c < mask_ratio]
    if not chosen:
        chosen = [candidates[int(rng.integers(len(candidates)))]]
    return chosen


_MAKERS = {
    Objective.MLM: lambda words, lang, spans, vocab, types, kind, rng:
        make_mlm(words, lang, spans, vocab, types),
    Objective.RLM: lambda words, lang, spans, vocab, types, kind, rng:
        make_rlm(words, lang, spans, vocab, types, kind, rng),
    Objective.IPLM: lambda words, lang, spans, vocab, types, kind, rng:
        make_iplm(words, lang, spans, vocab, types, kind),
}


def _sentence_rng(seed, index, tag):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(index, tag))))


def build_dataset(corpus, dictionary, config: PretrainConfig, vocab: Vocabulary):
    """corpus: iterable of (sentence, language). Returns (samples, stats).

    Per-sentence randomness derives from (seed, sentence index, repeat
    index), so regeneration is order-independent; the output is shuffled by
    a seeded permutation.
    """
    types = TypeTable(config.languages)
    whole, frac = int(math.floor(config.sample_rate)), config.sample_rate % 1.0
    weights = np.array(config.mix_ratio, dtype=float)
    thresholds = np.cumsum(weights / weights.sum())
    stats = {
        "sentences": 0, "samples": 0,
        "skipped_too_long": 0, "skipped_no_match": 0,
        "skipped_missing_payload": 0, "skipped_too_long_sample": 0,
        "objective_counts": {o.name.lower(): 0 for o in Objective},
    }
    samples = []
    for i, (text, language) in enumerate(corpus):
        stats["sentences"] += 1
        words = text.split()
        if len(vocab.encode_words(words)) > MAX_SENT_SUBWORDS:
            stats["skipped_too_long"] += 1
            continue
        repeats = whole
        if frac > 0.0:
            coin = _sentence_rng(config.seed, i, _COUNT_TAG).random()
            repeats += int(coin < frac)
        for r in range(repeats):
            rng = _sentence_rng(config.seed, i, r)
            objective = Objective(int(np.searchsorted(thresholds, rng.random(),
                                                      side="right")))
            try:
                spans = select_spans(words, dictionary, language,
                                     config.mask_ratio, rng)
                sample = _MAKERS[objective](words, language, spans, vocab,
                                            types, config.info_kind, rng)
            except NoMappableWords:
                stats["skipped_no_match"] += 1
                continue
            except MissingPayload:
                stats["skipped_missing_payload"] += 1
                continue
            except SampleTooLong:
                stats["skipped_too_long_sample"] += 1
                continue
            samples.append(sample)
            stats["samples"] += 1
            stats["objective_counts"][objective.name.lower()] += 1
    if not samples:
        raise EmptyDataset("no pretraining samples were generated")
    perm = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(config.seed, spawn_key=(_SHUFFLE_TAG,)))
    ).permutation(len(samples))
    return [samples[j] for j in perm], stats


# --- shard files ---

def _put_varint(buf: bytearray, x: int):
    while True:
        b = x & 0x7F
        x >>= 7
        buf.append(b | (0x80 if x else 0))
        if not x:
            return


def _put_array(buf: bytearray, xs):
    _put_varint(buf, len(xs))
    for x in xs:
        _put_varint(buf, x)


def _get_varint(buf, pos):
    x = shift = 0
    while True:
        b = buf[pos]
        pos += 1
        x |= (b & 0x7F) << shift
        if not b & 0x80:
            return x, pos
        shift += 7


def _get_array(buf, pos):
    n, pos = _get_varint(buf, pos)
    out = [0] * n
    for i in range(n):
        out[i], pos = _get_varint(buf, pos)
    return out, pos


def write_shard(path, samples):
    """Header line, then length-prefixed records: objective byte plus the
    four arrays that determine everything else."""
    out = bytearray(SHARD_MAGIC)
    for s in samples:
        rec = bytearray([s.objective.value])
        _put_array(rec, s.enc_tokens)
        _put_array(rec, s.enc_types)
        _put_array(rec, s.dec_soft_pos)
        _put_array(rec, s.target_tokens)
        _put_varint(out, len(rec))
        out.extend(rec)
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_shard(path):
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(SHARD_MAGIC):
        raise EmptyShards(f"{path}: not a {SHARD_MAGIC.strip().decode()} file")
    pos = len(SHARD_MAGIC)
    samples = []
    while pos < len(buf):
        rec_len, pos = _get_varint(buf, pos)
        end = pos + rec_len
        objective = Objective(buf[pos])
        pos += 1
        enc_tokens, pos = _get_array(buf, pos)
        enc_types, pos = _get_array(buf, pos)
        soft, pos = _get_array(buf, pos)
        target, pos = _get_array(buf, pos)
        if pos != end:
            raise EmptyShards(f"{path}: corrupt record")
        dec_in_tokens, dec_in_types, hard = derive_decoder_inputs(
            objective, enc_types, soft, target)
        samples.append(PretrainSample(objective, enc_tokens, enc_types,
                                      dec_in_tokens, dec_in_types, hard,
                                      soft, target))
    return samples


def read_shards(paths):
    samples = []
    for p in paths:
        samples.extend(read_shard(p))
    if not samples:
        raise EmptyShards("no samples in shard files")
    return samples
