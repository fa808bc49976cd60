"""Bilingual dictionary: JSONL loading, merging, corpus cleaning, phrase matching.

Entries are keyed by (language, headword); headwords may be multi-word
phrases. Matching is greedy leftmost-longest and never overlaps.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .errors import ConflictingLanguage, EmptyCorpus, ParseError, UnknownLanguage


class InfoKind(Enum):
    TRANSLATION = "translation"
    POS = "pos"
    SYNONYM = "synonym"
    DEFINITION = "definition"
    NAMED_ENTITY = "ne"


KIND_ORDER = (InfoKind.TRANSLATION, InfoKind.POS, InfoKind.SYNONYM,
              InfoKind.DEFINITION, InfoKind.NAMED_ENTITY)

# kinds whose payloads are base tags expanded per headword token
TAG_KINDS = (InfoKind.POS, InfoKind.NAMED_ENTITY)


def expand_tag(tag: str, n_tokens: int):
    """Expand a base tag over an n-token chunk with B/M/E prefixes.

    One token begins (and implicitly ends) its chunk; O is reserved for
    tokens outside any chunk and never appears in a payload expansion.
    """
    if n_tokens <= 0:
        raise ValueError("chunk must contain at least one token")
    if n_tokens == 1:
        return [f"B-{tag}"]
    return [f"B-{tag}"] + [f"M-{tag}"] * (n_tokens - 2) + [f"E-{tag}"]


@dataclass
class DictEntry:
    headword: str
    language: str
    payloads: dict = field(default_factory=dict)   # InfoKind -> list[str]

    @property
    def words(self):
        return tuple(self.headword.split())

    def get(self, kind: InfoKind):
        return self.payloads.get(kind, [])


class Match(NamedTuple):
    start: int
    length: int
    entry: DictEntry


class BilingualDictionary:
    def __init__(self, entries=()):
        # (language, headword) -> DictEntry, insertion-ordered
        self.entries = {}
        for e in entries:
            self.entries[(e.language, e.headword)] = e
        self._reindex()

    def _reindex(self):
        self._by_lang = defaultdict(dict)   # lang -> {word tuple: entry}
        self._max_len = defaultdict(int)
        for e in self.entries.values():
            words = e.words
            self._by_lang[e.language][words] = e
            self._max_len[e.language] = max(self._max_len[e.language], len(words))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def languages(self):
        return set(self._by_lang)

    def lookup(self, language, headword):
        return self.entries.get((language, headword))

    def save(self, path):
        """One JSONL line per (entry, kind), deterministic order."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for e in self.entries.values():
                for kind in KIND_ORDER:
                    if kind in e.payloads:
                        rec = {"headword": e.headword, "language": e.language,
                               "kind": kind.value, "payloads": e.payloads[kind]}
                        f.write(json.dumps(rec, ensure_ascii=False) + "\n")


_KIND_BY_NAME = {k.value: k for k in InfoKind}


def _parse_line(path, line_no, line):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(path, line_no, f"invalid JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise ParseError(path, line_no, "record must be a JSON object")
    for key in ("headword", "language", "kind", "payloads"):
        if key not in obj:
            raise ParseError(path, line_no, f"missing field {key!r}")
    headword, language = obj["headword"], obj["language"]
    if not isinstance(headword, str) or not headword.split():
        raise ParseError(path, line_no, "headword must be a non-empty string")
    if not isinstance(language, str) or not language:
        raise ParseError(path, line_no, "language must be a non-empty string")
    kind = _KIND_BY_NAME.get(obj["kind"])
    if kind is None:
        raise ParseError(path, line_no, f"unknown kind {obj['kind']!r}")
    payloads = obj["payloads"]
    if (not isinstance(payloads, list) or not payloads
            or not all(isinstance(p, str) and p.split() for p in payloads)):
        raise ParseError(path, line_no, "payloads must be a non-empty list of non-empty strings")
    return headword, language, kind, payloads


def load_dictionary(paths) -> BilingualDictionary:
    """Load and merge one or more JSONL files.

    Payload lists for the same (language, headword, kind) merge with
    duplicates removed, first-seen order preserved. A headword declared under
    two languages within a single file is a data error.
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    merged = {}
    for path in paths:
        seen_lang = {}
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                headword, language, kind, payloads = _parse_line(path, line_no, line)
                prev = seen_lang.setdefault(headword, language)
                if prev != language:
                    raise ConflictingLanguage(
                        f"{path}:{line_no}: headword {headword!r} declared as "
                        f"{language!r} after {prev!r}")
                key = (language, headword)
                entry = merged.get(key)
                if entry is None:
                    entry = merged[key] = DictEntry(headword, language, {})
                known = entry.payloads.setdefault(kind, [])
                for p in payloads:
                    if p not in known:
                        known.append(p)
    return BilingualDictionary(merged.values())


def clean(dictionary: BilingualDictionary, corpus) -> BilingualDictionary:
    """Keep entries with at least one translation fully present in the corpus.

    Translation payloads are filtered to those whose every word occurs in the
    combined corpus; an entry with no surviving translation is dropped whole,
    even if it carries other payload kinds.
    """
    corpus_words = set()
    n_sentences = 0
    for line in corpus:
        n_sentences += 1
        corpus_words.update(line.split())
    if not corpus_words:
        raise EmptyCorpus("corpus has no words" if n_sentences else "corpus is empty")

    kept = []
    for e in dictionary:
        translations = [p for p in e.get(InfoKind.TRANSLATION)
                        if all(w in corpus_words for w in p.split())]
        if not translations:
            continue
        payloads = dict(e.payloads)
        payloads[InfoKind.TRANSLATION] = translations
        kept.append(DictEntry(e.headword, e.language, payloads))
    return BilingualDictionary(kept)


def match_phrases(sentence_words, dictionary: BilingualDictionary, language=None):
    """Greedy leftmost-longest non-overlapping headword matching.

    Returns disjoint Match(start, length, entry) triples sorted by start.
    With language=None, headwords of every language are eligible (ties
    between languages resolve toward the lexicographically first language).
    """
    words = list(sentence_words)
    if language is None:
        langs = sorted(dictionary._by_lang)
    else:
        langs = [language]
    indexes = [dictionary._by_lang[l] for l in langs if l in dictionary._by_lang]
    if not indexes:
        return []
    max_len = max((dictionary._max_len[l] for l in langs if l in dictionary._max_len),
                  default=0)
    out = []
    i, n = 0, len(words)
    while i < n:
        hit = None
        for L in range(min(max_len, n - i), 0, -1):
            key = tuple(words[i:i + L])
            for idx in indexes:
                entry = idx.get(key)
                if entry is not None:
                    hit = Match(i, L, entry)
                    break
            if hit is not None:
                break
        if hit is None:
            i += 1
        else:
            out.append(hit)
            i += hit.length
    return out


def coverage(dictionary: BilingualDictionary, corpus, language: str) -> float:
    """Fraction of corpus word tokens covered by greedy headword matches."""
    if language not in dictionary.languages():
        raise UnknownLanguage(f"no entries for language {language!r}")
    total = covered = 0
    for line in corpus:
        words = line.split()
        total += len(words)
        for m in match_phrases(words, dictionary, language):
            covered += m.length
    if total == 0:
        raise EmptyCorpus("corpus has no words")
    return covered / total
