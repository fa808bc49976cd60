"""Deterministic synthetic language pair for end-to-end experiments.

A word-substitution cipher: every source word maps 1:1 to a target word,
sentences are drawn from a Zipf distribution over the common inventory, and
a small rare tail is planted with exactly two training occurrences per word
(plus one dev and one test occurrence). The dictionary covers the whole
inventory in both directions with all payload kinds, including top-bigram
phrase entries, so dictionary-driven pretraining can see words the parallel
data barely shows.

Source and target words use disjoint letter sets, which keeps the joint
subword vocabulary unambiguous and lets a generous merge budget turn every
word into a single piece.
"""

import os
from collections import Counter

import numpy as np

from .dictionary import BilingualDictionary, DictEntry, InfoKind

SRC_LANG, TGT_LANG = "src", "tgt"
_SRC_ALPHABET = "bcdfgklmnprst"
_TGT_ALPHABET = "aehiouwyz"
_TAGS = ("noun", "verb", "adj", "per", "loc")


def _make_words(rng, alphabet, n, lo=3, hi=6):
    out, seen = [], set()
    while len(out) < n:
        k = int(rng.integers(lo, hi + 1))
        w = "".join(alphabet[i] for i in rng.integers(len(alphabet), size=k))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _zipf_weights(n, a):
    w = (np.arange(1, n + 1, dtype=float)) ** -a
    return w / w.sum()


def _sentences(rng, n_sent, n_common, weights, min_len, max_len):
    out = []
    for _ in range(n_sent):
        k = int(rng.integers(min_len, max_len + 1))
        out.append(list(rng.choice(n_common, size=k, p=weights)))
    return out


def _plant(rng, sentences, word_index, copies):
    """Insert `word_index` into `copies` distinct sentences at random slots."""
    slots = rng.choice(len(sentences), size=copies, replace=False)
    for s in slots:
        pos = int(rng.integers(len(sentences[s]) + 1))
        sentences[s].insert(pos, word_index)


def _build_dictionary(src_words, tgt_words, n_common, bigrams):
    entries = []
    n_total = len(src_words)
    for k in range(n_total):
        w, c = src_words[k], tgt_words[k]
        tag = _TAGS[k % 3]
        src_payloads = {InfoKind.TRANSLATION: [c], InfoKind.POS: [tag]}
        tgt_payloads = {InfoKind.TRANSLATION: [w], InfoKind.POS: [tag]}
        if k % 3 == 0:
            j = (k + 1) % n_total
            src_payloads[InfoKind.SYNONYM] = [src_words[j]]
            tgt_payloads[InfoKind.SYNONYM] = [tgt_words[j]]
        if k % 4 == 0:
            a, b = (k * 7 + 3) % n_common, (k * 11 + 5) % n_common
            src_payloads[InfoKind.DEFINITION] = [f"{src_words[a]} {src_words[b]}"]
            tgt_payloads[InfoKind.DEFINITION] = [f"{tgt_words[a]} {tgt_words[b]}"]
        if 30 <= k < 40:
            src_payloads[InfoKind.NAMED_ENTITY] = ["per"]
            tgt_payloads[InfoKind.NAMED_ENTITY] = ["per"]
        entries.append(DictEntry(w, SRC_LANG, src_payloads))
        entries.append(DictEntry(c, TGT_LANG, tgt_payloads))
    for a, b in bigrams:
        sp = f"{src_words[a]} {src_words[b]}"
        tp = f"{tgt_words[a]} {tgt_words[b]}"
        entries.append(DictEntry(sp, SRC_LANG, {
            InfoKind.TRANSLATION: [tp], InfoKind.NAMED_ENTITY: ["loc"]}))
        entries.append(DictEntry(tp, TGT_LANG, {
            InfoKind.TRANSLATION: [sp], InfoKind.NAMED_ENTITY: ["loc"]}))
    return BilingualDictionary(entries)


def synth_toy(out_dir, n_train=2000, n_dev=200, n_test=200, seed=1,
              n_common=220, n_rare=40, n_phrases=15, zipf_a=1.1,
              min_len=3, max_len=9):
    """Write train/dev/test TSVs, dict.jsonl, and tags.txt into out_dir.

    Returns a stats dict with the paths and generation counts. Same
    arguments, same bytes.
    """
    rng = np.random.default_rng(seed)
    n_total = n_common + n_rare
    src_words = _make_words(rng, _SRC_ALPHABET, n_total)
    tgt_words = _make_words(rng, _TGT_ALPHABET, n_total)
    weights = _zipf_weights(n_common, zipf_a)

    splits = {
        "train": _sentences(rng, n_train, n_common, weights, min_len, max_len),
        "dev": _sentences(rng, n_dev, n_common, weights, min_len, max_len),
        "test": _sentences(rng, n_test, n_common, weights, min_len, max_len),
    }
    for j in range(n_rare):
        _plant(rng, splits["train"], n_common + j, copies=2)
    for j in range(n_rare):
        _plant(rng, splits["dev"], n_common + j, copies=1)
    for j in range(n_rare):
        _plant(rng, splits["test"], n_common + j, copies=1)

    pair_counts = Counter()
    for sent in splits["train"]:
        pair_counts.update(zip(sent, sent[1:]))
    bigrams = sorted(pair_counts, key=lambda p: (-pair_counts[p], p))[:n_phrases]

    out = {"languages": [SRC_LANG, TGT_LANG], "n_rare": n_rare,
           "n_words": n_total, "n_phrases": len(bigrams)}
    os.makedirs(out_dir, exist_ok=True)
    for name, sents in splits.items():
        path = os.path.join(out_dir, f"{name}.tsv")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for sent in sents:
                src = " ".join(src_words[i] for i in sent)
                tgt = " ".join(tgt_words[i] for i in sent)
                f.write(f"{src}\t{tgt}\n")
        out[name] = path
        out[f"n_{name}"] = len(sents)

    dico = _build_dictionary(src_words, tgt_words, n_common, bigrams)
    dict_path = os.path.join(out_dir, "dict.jsonl")
    dico.save(dict_path)
    out["dict"] = dict_path
    out["n_entries"] = len(dico)

    # tag expansion tokens, so the subword alphabet covers payload text
    tags_path = os.path.join(out_dir, "tags.txt")
    with open(tags_path, "w", encoding="utf-8", newline="\n") as f:
        for tag in _TAGS:
            f.write(f"B-{tag} M-{tag} E-{tag}\n")
    out["tags"] = tags_path
    return out


def read_tsv(path):
    """[(src, tgt)] from a two-column TSV."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            src, tgt = line.split("\t")
            pairs.append((src, tgt))
    return pairs
