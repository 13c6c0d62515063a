"""Word-level vocabulary shared by report rendering and the text encoders."""

import json
import re

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
NEWLINE = "<nl>"
UNKNOWN_SEQUENCE = "<unkseq>"
UNKNOWN_STUDY = "<unkstudy>"
SPECIALS = (PAD, BOS, EOS, UNK, NEWLINE, UNKNOWN_SEQUENCE, UNKNOWN_STUDY)

_PUNCT = re.compile(r"([.,:;])")


def normalize_line(line):
    line = _PUNCT.sub(r" \1 ", line.lower())
    return " ".join(line.split())


def normalize_text(text):
    """Lower-case, split punctuation off words, collapse blanks, drop empty lines."""
    lines = (normalize_line(l) for l in text.splitlines())
    return "\n".join(l for l in lines if l)


def split_words(text):
    words = []
    for i, line in enumerate(normalize_text(text).split("\n")):
        if not line:
            continue
        if i:
            words.append(NEWLINE)
        words.extend(line.split(" "))
    return words


class Vocabulary:
    def __init__(self, words):
        words = [w for w in words if w not in SPECIALS]
        self.itos = list(SPECIALS) + sorted(set(words))
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary entries must be unique")

    pad_id = property(lambda self: self.stoi[PAD])
    bos_id = property(lambda self: self.stoi[BOS])
    eos_id = property(lambda self: self.stoi[EOS])
    unk_id = property(lambda self: self.stoi[UNK])

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @classmethod
    def from_texts(cls, texts):
        words = set()
        for t in texts:
            words.update(split_words(t))
        return cls(words)

    def encode(self, text):
        return [self.stoi.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids):
        out, line = [], []
        for i in ids:
            w = self.itos[i]
            if w in (PAD, BOS, EOS):
                continue
            if w == NEWLINE:
                out.append(" ".join(line))
                line = []
            else:
                line.append(w)
        out.append(" ".join(line))
        return "\n".join(l for l in out if l)

    def to_json(self):
        return json.dumps({"version": 1, "itos": self.itos}, indent=1)

    @classmethod
    def from_json(cls, s):
        payload = json.loads(s)
        vocab = cls([])
        vocab.itos = list(payload["itos"])
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        if tuple(vocab.itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("serialized vocabulary does not reserve the special ids")
        return vocab
