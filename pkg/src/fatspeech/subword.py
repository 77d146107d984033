"""Byte-pair subword vocabulary shared across source and target text.

Words are whitespace tokens prefixed with the boundary marker "▁"; the initial
segmentation is the marker followed by the word's characters. Training
repeatedly merges the most frequent adjacent symbol pair (ties broken by the
lexicographic order of the merged piece, so retraining on the same corpus is
byte-identical). The id table is: five reserved tokens, then the sorted base
alphabet, then merge products in merge order.

The on-disk format is plain text: a version line, a reserved-token line, an
alphabet line, then one "left right" merge per line. Loading replays the
merges, so a save/load/save cycle is byte-identical.
"""

import hashlib
import io

from .errors import DataError

BOUNDARY = "▁"
PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>", "<mask>")
_FILE_VERSION = 1


class Vocabulary:
    def __init__(self, alphabet, merges):
        self.alphabet = tuple(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.pieces = list(RESERVED) + list(self.alphabet)
        seen = set(self.pieces)
        for left, right in self.merges:
            piece = left + right
            if piece not in seen:
                self.pieces.append(piece)
                seen.add(piece)
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        self.merge_rank = {m: r for r, m in enumerate(self.merges)}

    @property
    def size(self):
        return len(self.pieces)

    def _segment_word(self, word):
        symbols = [BOUNDARY] + list(word)
        while len(symbols) > 1:
            best_rank = None
            best_pair = None
            for a, b in zip(symbols, symbols[1:]):
                rank = self.merge_rank.get((a, b))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = (a, b)
            if best_pair is None:
                break
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best_pair:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def encode(self, text):
        """Token ids for a text; characters outside the alphabet map to <unk>.

        No bos/eos are added here; sequence framing is the caller's business.
        """
        ids = []
        for word in text.split():
            for sym in self._segment_word(word):
                ids.append(self.piece_to_id.get(sym, UNK))
        return ids

    def decode(self, ids):
        """Text for a token id sequence. Ids outside the table are an error."""
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.pieces):
                raise DataError(f"decode: id {i} outside vocabulary of size {self.size}")
            if i in (PAD, BOS, EOS):
                continue
            out.append(self.pieces[i])
        return "".join(out).replace(BOUNDARY, " ").strip()

    def serialize(self):
        buf = io.StringIO()
        buf.write(f"#version {_FILE_VERSION}\n")
        buf.write("#reserved " + " ".join(RESERVED) + "\n")
        buf.write("#alphabet " + " ".join(self.alphabet) + "\n")
        for left, right in self.merges:
            buf.write(f"{left} {right}\n")
        return buf.getvalue().encode("utf-8")

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.serialize())

    @property
    def content_hash(self):
        return hashlib.sha256(self.serialize()).hexdigest()


def load_vocabulary(path):
    try:
        with open(path, "rb") as f:
            lines = f.read().decode("utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: unreadable vocabulary file ({e})") from e
    if len(lines) < 3 or not lines[0].startswith("#version "):
        raise DataError(f"{path}: missing vocabulary header")
    version = lines[0].split()[1]
    if version != str(_FILE_VERSION):
        raise DataError(f"{path}: unsupported vocabulary version {version}")
    if not lines[1].startswith("#reserved "):
        raise DataError(f"{path}: missing reserved-token line")
    if tuple(lines[1].split()[1:]) != RESERVED:
        raise DataError(f"{path}: reserved tokens do not match {RESERVED}")
    if not lines[2].startswith("#alphabet"):
        raise DataError(f"{path}: missing alphabet line")
    alphabet = tuple(lines[2].split()[1:])
    merges = []
    for n, line in enumerate(lines[3:], start=4):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected 'left right', got {line!r}")
        merges.append((parts[0], parts[1]))
    return Vocabulary(alphabet, merges)


def train_bpe(texts, vocab_size):
    """Learn a joint vocabulary of at most vocab_size pieces from raw texts.

    vocab_size must cover the reserved tokens plus the corpus alphabet; the
    remaining budget becomes merges. Training stops early when no adjacent
    pair is left to merge.
    """
    word_freq = {}
    chars = set()
    for text in texts:
        for word in text.split():
            word_freq[word] = word_freq.get(word, 0) + 1
            chars.update(word)
    alphabet = tuple(sorted(chars | {BOUNDARY}))
    floor = len(RESERVED) + len(alphabet)
    if vocab_size < floor:
        raise DataError(f"train_bpe: vocab_size {vocab_size} below reserved + "
                        f"alphabet floor {floor}")

    words = {w: [BOUNDARY] + list(w) for w in word_freq}
    merges = []
    table = set(alphabet)
    table_size = floor
    while table_size < vocab_size:
        pair_freq = {}
        for w, symbols in words.items():
            f = word_freq[w]
            for pair in zip(symbols, symbols[1:]):
                pair_freq[pair] = pair_freq.get(pair, 0) + f
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0][0] + kv[0][1]))
        pair = best[0]
        merges.append(pair)
        piece = pair[0] + pair[1]
        if piece not in table:
            table.add(piece)
            table_size += 1
        for w, symbols in words.items():
            if len(symbols) < 2:
                continue
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                    merged.append(piece)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            words[w] = merged
    return Vocabulary(alphabet, merges)
