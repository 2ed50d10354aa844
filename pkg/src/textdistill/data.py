"""Tokenization, the class-conditional special-token scheme, dataset IO, and
the synthetic desk-scale classification tasks.

Sequences fed to the generator look like

    <bos_c> tokens of sentence 1 [<sep> tokens of sentence 2] <eos>

where <bos_c> is one class-specific begin token per class. Content token ids
come first in the vocabulary; special ids sit in a reserved block above them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token <-> id map with per-class BOS ids, separator, EOS and PAD.

    ``tokens`` are the content tokens (ids 0..n-1); ``unit`` is "char" or
    "word" and controls text joining on decode.
    """

    tokens: tuple
    num_classes: int
    unit: str = "char"
    token_to_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise DataError("vocab needs at least one class")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate content tokens")
        if self.unit not in ("char", "word"):
            raise DataError(f"unknown vocab unit {self.unit!r}")
        object.__setattr__(self, "token_to_id",
                           {t: i for i, t in enumerate(self.tokens)})

    @property
    def content_size(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return len(self.tokens)

    @property
    def sep_id(self):
        return len(self.tokens) + 1

    @property
    def eos_id(self):
        return len(self.tokens) + 2

    @property
    def bos_ids(self):
        base = len(self.tokens) + 3
        return tuple(range(base, base + self.num_classes))

    def bos_id(self, label):
        if not 0 <= label < self.num_classes:
            raise DataError(f"label {label} outside [0, {self.num_classes})")
        return len(self.tokens) + 3 + label

    @property
    def size(self):
        return len(self.tokens) + 3 + self.num_classes

    def id_to_token(self, i):
        if i < len(self.tokens):
            return self.tokens[i]
        specials = ["<pad>", "<sep>", "<eos>"] + [f"<bos_{c}>" for c in range(self.num_classes)]
        return specials[i - len(self.tokens)]

    def encode_text(self, text):
        parts = list(text) if self.unit == "char" else text.split()
        ids = []
        for t in parts:
            if t not in self.token_to_id:
                raise DataError(f"unknown token {t!r}")
            ids.append(self.token_to_id[t])
        return ids

    def decode_tokens(self, ids):
        joiner = "" if self.unit == "char" else " "
        return joiner.join(self.tokens[i] for i in ids)

    def to_dict(self):
        return {"tokens": list(self.tokens), "num_classes": self.num_classes,
                "unit": self.unit}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["tokens"]), int(d["num_classes"]), d.get("unit", "char"))


@dataclass(frozen=True)
class Sample:
    """Content token ids with a class label; pair_split marks where sentence 2
    begins for two-sentence tasks."""

    tokens: tuple
    label: int
    pair_split: int = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.pair_split is not None and not 0 < self.pair_split < len(self.tokens):
            raise DataError(
                f"pair_split {self.pair_split} outside (0, {len(self.tokens)})")

    @property
    def sentences(self):
        if self.pair_split is None:
            return (self.tokens,)
        return (self.tokens[:self.pair_split], self.tokens[self.pair_split:])


@dataclass
class LabeledDataset:
    """Samples grouped per class; classes[c] holds samples with label c."""

    classes: list
    vocab: Vocab

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def size(self):
        return sum(len(bucket) for bucket in self.classes)

    def all_samples(self):
        return [s for bucket in self.classes for s in bucket]

    def min_class_size(self):
        return min(len(bucket) for bucket in self.classes)

    def validate(self):
        if len(self.classes) != self.vocab.num_classes:
            raise DataError("class count differs from vocab")
        for c, bucket in enumerate(self.classes):
            if not bucket:
                raise DataError(f"class {c} bucket is empty")
            for s in bucket:
                if s.label != c:
                    raise DataError(f"sample labeled {s.label} in bucket {c}")
                if any(t >= self.vocab.content_size or t < 0 for t in s.tokens):
                    raise DataError("token id outside content range")
        return self


def encode_for_generator(sample, vocab, max_len=32):
    """<bos_label> content [..<sep>..] <eos>, truncated before <eos> if longer
    than max_len."""
    bos = vocab.bos_id(sample.label)
    for t in sample.tokens:
        if not 0 <= t < vocab.content_size:
            raise DataError(f"unknown token id {t}")
    if sample.pair_split is None:
        middle = list(sample.tokens)
    else:
        middle = (list(sample.tokens[:sample.pair_split]) + [vocab.sep_id]
                  + list(sample.tokens[sample.pair_split:]))
    seq = [bos] + middle + [vocab.eos_id]
    if len(seq) > max_len:
        seq = seq[:max_len - 1] + [vocab.eos_id]
    return seq


def decode_generated(ids, vocab, label):
    """Inverse of encode_for_generator for a generated id stream (no BOS,
    possibly no EOS). Structurally stray separators (leading, repeated or
    trailing) are dropped so that every stream decodes to a valid Sample;
    an empty stream decodes to the empty sentence."""
    content = []
    split = None
    for t in ids:
        if t == vocab.eos_id:
            break
        if t == vocab.sep_id:
            if split is None and content:
                split = len(content)
            continue
        if 0 <= t < vocab.content_size:
            content.append(t)
    if split is not None and not 0 < split < len(content):
        split = None
    return Sample(tuple(content), label, split)


def sample_to_record(sample, vocab, synthetic=False):
    sents = sample.sentences
    rec = {"text": vocab.decode_tokens(sents[0]), "label": sample.label}
    if len(sents) == 2:
        rec["text2"] = vocab.decode_tokens(sents[1])
    if synthetic:
        rec["synthetic"] = True
    return rec


# ---------------------------------------------------------------------------
# file IO: JSONL and 2/3-column TSV
# ---------------------------------------------------------------------------


@dataclass
class DataSchema:
    num_classes: int
    unit: str = "char"
    vocab: Vocab = None  # built from file content when None


def _bucketize(rows, schema, source):
    """rows: list of (text, text2 or None, label, line_no)."""
    if schema.vocab is None:
        seen = set()
        for text, text2, _, _ in rows:
            seen.update(list(text) if schema.unit == "char" else text.split())
            if text2 is not None:
                seen.update(list(text2) if schema.unit == "char" else text2.split())
        vocab = Vocab(tuple(sorted(seen)), schema.num_classes, schema.unit)
    else:
        vocab = schema.vocab
    classes = [[] for _ in range(schema.num_classes)]
    for text, text2, label, line_no in rows:
        if not 0 <= label < schema.num_classes:
            raise DataError(f"{source}:{line_no}: label {label} outside "
                            f"[0, {schema.num_classes})")
        try:
            ids = vocab.encode_text(text)
            split = None
            if text2 is not None:
                ids2 = vocab.encode_text(text2)
                split = len(ids)
                ids = ids + ids2
        except DataError as e:
            raise DataError(f"{source}:{line_no}: {e}") from None
        classes[label].append(Sample(tuple(ids), label, split))
    return LabeledDataset(classes, vocab).validate()


def load_jsonl(path, schema):
    """Load {"text": str, "text2": str?, "label": int} lines. A leading
    {"_provenance": ...} header line (as written for distilled sets) is
    skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: malformed JSON ({e.msg})") from None
            if line_no == 1 and isinstance(obj, dict) and "_provenance" in obj:
                continue
            if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                raise DataError(f"{path}:{line_no}: object needs 'text' and 'label'")
            if not isinstance(obj["label"], int):
                raise DataError(f"{path}:{line_no}: label must be an integer")
            rows.append((obj["text"], obj.get("text2"), obj["label"], line_no))
    return _bucketize(rows, schema, str(path))


def load_tsv(path, schema):
    """2 columns = text, label; 3 columns = text, text2, label."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) == 2:
                text, text2, label_str = cols[0], None, cols[1]
            elif len(cols) == 3:
                text, text2, label_str = cols[0], cols[1], cols[2]
            else:
                raise DataError(f"{path}:{line_no}: expected 2 or 3 columns, "
                                f"got {len(cols)}")
            try:
                label = int(label_str)
            except ValueError:
                raise DataError(f"{path}:{line_no}: label {label_str!r} is not "
                                f"an integer") from None
            rows.append((text, text2, label, line_no))
    return _bucketize(rows, schema, str(path))


def write_jsonl(path, samples, vocab, synthetic=False, provenance=None):
    with open(path, "w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"_provenance": provenance}) + "\n")
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, vocab, synthetic)) + "\n")


# ---------------------------------------------------------------------------
# synthetic desk-scale tasks (Bayes accuracy 1.0 by construction)
# ---------------------------------------------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _keyword_task(n_per_class, rng, n_letters=20, triggers_per_class=4,
                  min_len=5, max_len=10):
    """Two classes; each sentence is filler characters with exactly one
    trigger character from the class's disjoint trigger set."""
    letters = _LETTERS[:n_letters]
    trig = [letters[:triggers_per_class],
            letters[triggers_per_class:2 * triggers_per_class]]
    fillers = letters[2 * triggers_per_class:]
    if not fillers:
        raise DataError("keyword task needs filler letters")
    vocab = Vocab(tuple(letters), 2, "char")
    classes = [[], []]
    for c in (0, 1):
        for _ in range(n_per_class):
            length = int(rng.integers(min_len, max_len + 1))
            chars = [fillers[i] for i in rng.integers(0, len(fillers), size=length)]
            pos = int(rng.integers(0, length))
            chars[pos] = trig[c][int(rng.integers(0, len(trig[c])))]
            classes[c].append(Sample(tuple(vocab.token_to_id[ch] for ch in chars), c))
    return LabeledDataset(classes, vocab).validate()


def _pair_match_task(n_per_class, rng, n_letters=12, min_len=2, max_len=4):
    """Two classes; label 1 iff the two short sequences share a token."""
    letters = _LETTERS[:n_letters]
    vocab = Vocab(tuple(letters), 2, "char")
    classes = [[], []]
    ids = np.arange(n_letters)
    for c in (0, 1):
        for _ in range(n_per_class):
            l1 = int(rng.integers(min_len, max_len + 1))
            l2 = int(rng.integers(min_len, max_len + 1))
            first = rng.choice(ids, size=l1, replace=False)
            rest = np.setdiff1d(ids, first)
            second = rng.choice(rest, size=l2, replace=False)
            if c == 1:
                second[int(rng.integers(0, l2))] = first[int(rng.integers(0, l1))]
            tokens = tuple(int(t) for t in first) + tuple(int(t) for t in second)
            classes[c].append(Sample(tokens, c, pair_split=l1))
    return LabeledDataset(classes, vocab).validate()


def _pair_order3_task(n_per_class, rng, n_letters=10, min_len=2, max_len=4):
    """Three classes from the lexicographic relation between two sequences:
    0 = first < second, 1 = equal, 2 = first > second."""
    letters = _LETTERS[:n_letters]
    vocab = Vocab(tuple(letters), 3, "char")
    classes = [[], [], []]

    def draw():
        length = int(rng.integers(min_len, max_len + 1))
        return tuple(int(t) for t in rng.integers(0, n_letters, size=length))

    for _ in range(n_per_class):
        a = draw()
        b = draw()
        while a == b:
            b = draw()
        lo, hi = (a, b) if a < b else (b, a)
        classes[0].append(Sample(lo + hi, 0, pair_split=len(lo)))
        classes[2].append(Sample(hi + lo, 2, pair_split=len(hi)))
        eq = draw()
        classes[1].append(Sample(eq + eq, 1, pair_split=len(eq)))
    return LabeledDataset(classes, vocab).validate()


_TASKS = {
    "keyword": (_keyword_task, "accuracy"),
    "pair-match": (_pair_match_task, "acc_f1_mean"),
    "pair-order3": (_pair_order3_task, "accuracy"),
}


def make_synthetic_task(kind, n_per_class, seed, **kw):
    """Reproducible balanced dataset for one of the synthetic task kinds."""
    if kind not in _TASKS:
        raise DataError(f"unknown task kind {kind!r} (choose from {sorted(_TASKS)})")
    maker, _ = _TASKS[kind]
    return maker(n_per_class, np.random.default_rng(seed), **kw)


@dataclass
class TaskBundle:
    """A task's train split, held-out test split, and scoring metric."""

    name: str
    train: LabeledDataset
    test: LabeledDataset
    metric: str

    @property
    def is_pair(self):
        return any(s.pair_split is not None for s in self.train.all_samples())


def build_task(kind, train_per_class, test_per_class, seed, **kw):
    if kind not in _TASKS:
        raise DataError(f"unknown task kind {kind!r} (choose from {sorted(_TASKS)})")
    maker, metric = _TASKS[kind]
    train = maker(train_per_class, np.random.default_rng((seed, 0)), **kw)
    test = maker(test_per_class, np.random.default_rng((seed, 1)), **kw)
    return TaskBundle(kind, train, test, metric)
