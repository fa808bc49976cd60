"""Joint subword vocabulary: BPE training, greedy encoding, file round-trip.

One vocabulary is shared by all languages. Special tokens occupy the lowest
id block and are never produced by merges; text is pre-tokenized on
whitespace and merges never cross word boundaries.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .errors import EmptyCorpus, IdOutOfRange, TargetSizeTooSmall

PAD, UNK, BOS, EOS, MASK, SEP = "[pad]", "[unk]", "[bos]", "[eos]", "[mask]", "[sep]"
MLM_S, MLM_E = "[mlm_s]", "[mlm_e]"
RLM_S, RLM_E = "[rlm_s]", "[rlm_e]"
IPLM_S, IPLM_E = "[iplm_s]", "[iplm_e]"

SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, MASK, SEP,
                  MLM_S, MLM_E, RLM_S, RLM_E, IPLM_S, IPLM_E)

MAX_SENT_SUBWORDS = 60

VOCAB_MAGIC = "bdlm-vocab v1"


@dataclass
class Encoding:
    """Token ids plus, for each id, the index of the source word it came from."""
    ids: list
    word_ids: list

    def __len__(self):
        return len(self.ids)


@dataclass
class Vocabulary:
    subwords: list                      # id -> string, specials first
    merges: list                        # (left, right) pairs in learned order
    special_ids: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.special_ids:
            self.special_ids = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        self._piece_ids = {s: i for i, s in enumerate(self.subwords)
                           if i >= len(SPECIAL_TOKENS)}
        self._max_piece = max((len(s) for s in self._piece_ids), default=0)

    @property
    def size(self):
        return len(self.subwords)

    @property
    def pad_id(self):
        return self.special_ids[PAD]

    @property
    def unk_id(self):
        return self.special_ids[UNK]

    @property
    def bos_id(self):
        return self.special_ids[BOS]

    @property
    def eos_id(self):
        return self.special_ids[EOS]

    @property
    def mask_id(self):
        return self.special_ids[MASK]

    @property
    def sep_id(self):
        return self.special_ids[SEP]

    def objective_ids(self, name):
        """Return (start_id, end_id) for an objective name 'mlm'|'rlm'|'iplm'."""
        return (self.special_ids[f"[{name}_s]"], self.special_ids[f"[{name}_e]"])

    def encode(self, text: str) -> Encoding:
        """Greedy longest-match segmentation per whitespace word.

        Unknown characters map to [unk], one id per character. Never fails.
        """
        ids, word_ids = [], []
        pieces, max_len = self._piece_ids, self._max_piece
        for w_idx, word in enumerate(text.split()):
            i, n = 0, len(word)
            while i < n:
                for L in range(min(max_len, n - i), 0, -1):
                    piece = word[i:i + L]
                    pid = pieces.get(piece)
                    if pid is not None:
                        ids.append(pid)
                        word_ids.append(w_idx)
                        i += L
                        break
                else:
                    ids.append(self.unk_id)
                    word_ids.append(w_idx)
                    i += 1
        return Encoding(ids, word_ids)

    def encode_words(self, words) -> Encoding:
        """encode() over an already-split word sequence."""
        return self.encode(" ".join(words))

    def decode(self, ids, word_ids=None) -> str:
        """Inverse of encode. With word_ids, pieces of one word are joined and
        words are separated by single spaces; without, each piece stands as
        its own word. Special ids render as their bracketed names."""
        pieces = []
        for t in ids:
            t = int(t)
            if not 0 <= t < self.size:
                raise IdOutOfRange(f"token id {t} outside [0, {self.size})")
            pieces.append(self.subwords[t])
        if word_ids is None:
            return " ".join(pieces)
        out, prev = [], None
        for piece, w in zip(pieces, word_ids):
            if prev is not None and w == prev:
                out[-1] += piece
            else:
                out.append(piece)
            prev = w
        return " ".join(out)

    def n_subwords(self, text: str) -> int:
        return len(self.encode(text).ids)

    def save(self, path):
        """Write `bdlm-vocab v1 <size>`, one subword per line in id order,
        then a `#merges` section."""
        lines = [f"{VOCAB_MAGIC} {self.size}"]
        lines.extend(self.subwords)
        lines.append("#merges")
        lines.extend(f"{a} {b}" for a, b in self.merges)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].rsplit(" ", 1)
        if len(head) != 2 or head[0] != VOCAB_MAGIC:
            raise IdOutOfRange(f"{path}: not a {VOCAB_MAGIC} file")
        size = int(head[1])
        subwords = lines[1:1 + size]
        if len(subwords) != size or lines[1 + size] != "#merges":
            raise IdOutOfRange(f"{path}: truncated vocabulary file")
        merges = [tuple(ln.split(" ", 1)) for ln in lines[2 + size:]]
        return cls(subwords, merges)


def _merge_seq(syms, a, b):
    out, i, n = [], 0, len(syms)
    ab = a + b
    while i < n:
        if i + 1 < n and syms[i] == a and syms[i + 1] == b:
            out.append(ab)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def build_vocab(corpus, target_size: int) -> Vocabulary:
    """Learn a joint BPE vocabulary of at most target_size entries.

    The highest-frequency adjacent pair merges first; ties break toward the
    lexicographically smallest pair. Stops early when no pair remains.
    """
    word_freq = Counter()
    for line in corpus:
        word_freq.update(line.split())
    if not word_freq:
        raise EmptyCorpus("no words in corpus")

    alphabet = sorted({ch for w in word_freq for ch in w})
    n_base = len(SPECIAL_TOKENS) + len(alphabet)
    if target_size < n_base:
        raise TargetSizeTooSmall(
            f"target_size {target_size} cannot fit {len(SPECIAL_TOKENS)} special "
            f"tokens plus {len(alphabet)} characters")

    subwords = list(SPECIAL_TOKENS) + alphabet
    piece_set = set(subwords)
    word_syms = {w: tuple(w) for w in word_freq}

    pair_counts = Counter()
    pair_words = defaultdict(set)
    for w, syms in word_syms.items():
        f = word_freq[w]
        for p in zip(syms, syms[1:]):
            pair_counts[p] += f
            pair_words[p].add(w)

    merges = []
    while len(subwords) < target_size and pair_counts:
        top = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == top)
        a, b = best
        merges.append(best)
        product = a + b
        if product not in piece_set:
            subwords.append(product)
            piece_set.add(product)
        for w in list(pair_words[best]):
            f = word_freq[w]
            old = word_syms[w]
            for p in zip(old, old[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                pair_words[p].discard(w)
            new = _merge_seq(old, a, b)
            word_syms[w] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                pair_words[p].add(w)
    return Vocabulary(subwords, merges)


def filter_sentences(sentences, vocab: Vocabulary, max_subwords: int = MAX_SENT_SUBWORDS):
    """Drop sentences whose encoding exceeds max_subwords. Returns (kept, n_dropped)."""
    kept, dropped = [], 0
    for s in sentences:
        if vocab.n_subwords(s) <= max_subwords:
            kept.append(s)
        else:
            dropped += 1
    return kept, dropped
