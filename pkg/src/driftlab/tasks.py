"""Deterministic synthetic corpora: templated instruction-following tasks
for pretraining/retention probes, and a key-value retrieval QA task with
distractors and abstention for downstream fine-tuning.

Byte-level tokenization (ids 0..255) plus reserved BOS/EOS/SEP/PAD ids.
All generation is a pure function of TaskSpec; randomness comes from
numpy's PCG64 seeded with (spec.seed, stream-salt) sequences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import SpanMasks

BOS, EOS, SEP, PAD = 256, 257, 258, 259
VOCAB_SIZE = 260
ABSTAIN_TEXT = "NOANSWER"

_LETTERS = "abcdefghijkl"
_DIGITS = "0123456789"

_GENERAL_SALT = 0xD1CE
_RAG_SALT = 0x4A6B
_SPLIT_SALT = 0x51F7


class SpecError(ValueError):
    """A TaskSpec cannot be realized (e.g. infeasible length budget)."""


class Tokenizer:
    """Byte-level vocabulary with reserved ids appended."""

    vocab_size = VOCAB_SIZE
    bos, eos, sep, pad = BOS, EOS, SEP, PAD

    def encode(self, text) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(raw)

    def decode_bytes(self, ids) -> bytes:
        ids = list(ids)
        if any(i < 0 or i >= 256 for i in ids):
            raise ValueError("decode: id outside the byte range")
        return bytes(ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8")


TOKENIZER = Tokenizer()


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seed: int = 0
    n_examples: int = 1000
    n_docs: int = 4
    doc_len: int = 26
    distractor_rate: float = 0.3
    unanswerable_rate: float = 0.1
    max_seq_len: int = 512

    def __post_init__(self):
        if self.kind not in ("general_instruction", "rag_qa"):
            raise SpecError(f"unknown task kind {self.kind!r}")
        for name in ("distractor_rate", "unanswerable_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        if self.n_examples < 1:
            raise SpecError("n_examples must be positive")
        if self.kind == "rag_qa":
            if self.n_docs < 1 or self.doc_len < 12:
                raise SpecError("rag_qa needs n_docs >= 1 and doc_len >= 12")
            budget = self.n_docs * (self.doc_len + 1) + 40
            if budget > self.max_seq_len:
                raise SpecError(
                    f"infeasible length budget: {self.n_docs} docs x {self.doc_len} tokens "
                    f"needs ~{budget} > max_seq_len {self.max_seq_len}"
                )


@dataclass(frozen=True)
class TrainExample:
    input_text: str
    response_text: str
    meta: dict = field(default_factory=dict)

    @property
    def input_tokens(self) -> list[int]:
        return TOKENIZER.encode(self.input_text)

    @property
    def response_tokens(self) -> list[int]:
        return TOKENIZER.encode(self.response_text)

    @property
    def encoded_length(self) -> int:
        return len(self.input_tokens) + len(self.response_tokens) + 3


@dataclass
class Corpus:
    train: list[TrainExample]
    probe: list[TrainExample]

    @property
    def all_examples(self) -> list[TrainExample]:
        return self.train + self.probe


def _word(rng: np.random.Generator, lo: int = 3, hi: int = 4) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(_LETTERS[i] for i in rng.integers(0, len(_LETTERS), n))


def _value(rng: np.random.Generator) -> str:
    # values are 5-letter words: the base model's copy circuits transfer,
    # so the retrieval format is the thing being learned
    return _word(rng, 5, 5)


def general_oracle(input_text: str) -> str:
    """Gold response for any generated general-instruction input."""
    op, rest = input_text.split(" ", 1)
    words = rest.split(" ")
    if op == "echo":
        return rest
    if op in ("rep2", "rep3"):
        return " ".join([rest] * int(op[3]))
    if op == "up":
        return rest.upper()
    if op == "first":
        return words[0]
    if op == "last":
        return words[-1]
    if op == "len":
        return str(len(rest))
    raise ValueError(f"unrecognized instruction {input_text!r}")


def _gen_one_general(rng: np.random.Generator) -> TrainExample:
    task = int(rng.integers(0, 6))
    if task == 0:
        # multi-word echoes keep longer positions in-distribution
        m = int(rng.integers(1, 9))
        inp = "echo " + " ".join(_word(rng) for _ in range(m))
    elif task == 1:
        k = int(rng.integers(2, 4))
        inp = f"rep{k} {_word(rng)}"
    elif task == 2:
        inp = f"up {_word(rng)}"
    elif task == 3:
        inp = f"first {_word(rng)} {_word(rng)}"
    elif task == 4:
        inp = f"last {_word(rng)} {_word(rng)}"
    else:
        inp = f"len {_word(rng)}"
    return TrainExample(inp, general_oracle(inp), {"kind": "general_instruction", "task": task})


def _split(examples: list[TrainExample], seed: int) -> Corpus:
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, _SPLIT_SALT))))
    order = rng.permutation(len(examples))
    n_probe = max(1, len(examples) // 5)
    probe_idx = set(order[:n_probe].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in probe_idx]
    probe = [ex for i, ex in enumerate(examples) if i in probe_idx]
    return Corpus(train=train, probe=probe)


def gen_general(spec: TaskSpec) -> Corpus:
    if spec.kind != "general_instruction":
        raise SpecError(f"gen_general got kind {spec.kind!r}")
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((spec.seed, _GENERAL_SALT))))
    seen: set[str] = set()
    examples: list[TrainExample] = []
    while len(examples) < spec.n_examples:
        ex = _gen_one_general(rng)
        if ex.input_text in seen:
            continue
        seen.add(ex.input_text)
        examples.append(ex)
    return _split(examples, spec.seed)


def _gen_one_rag(rng: np.random.Generator, spec: TaskSpec) -> TrainExample:
    answerable = bool(rng.random() >= spec.unanswerable_rate)
    qkey = _word(rng)
    used_keys = {qkey}
    used_values: set[str] = set()

    def fresh_key() -> str:
        while True:
            if rng.random() < spec.distractor_rate:
                k = qkey[:2] + _word(rng, 1, 3)
            else:
                k = _word(rng)
            if k not in used_keys:
                used_keys.add(k)
                return k

    def fresh_value() -> str:
        while True:
            v = _value(rng)
            if v not in used_values:
                used_values.add(v)
                return v

    answer = fresh_value() if answerable else ABSTAIN_TEXT
    docs: list[str] = []
    answer_doc = int(rng.integers(0, spec.n_docs)) if answerable else -1
    for di in range(spec.n_docs):
        facts: list[str] = []
        length = 0
        while True:
            fact = f"{fresh_key()}={fresh_value()}"
            if facts and length + 1 + len(fact) > spec.doc_len:
                break
            length += len(fact) + (1 if facts else 0)
            facts.append(fact)
        if di == answer_doc:
            slot = int(rng.integers(0, len(facts)))
            facts[slot] = f"{qkey}={answer}"
        docs.append(";".join(facts))
    input_text = "find\n" + "\n".join(docs) + "\nq " + qkey + "?"
    return TrainExample(
        input_text,
        answer,
        {"kind": "rag_qa", "answerable": answerable, "n_docs": spec.n_docs,
         "doc_len": spec.doc_len},
    )


def gen_rag(spec: TaskSpec) -> Corpus:
    if spec.kind != "rag_qa":
        raise SpecError(f"gen_rag got kind {spec.kind!r}")
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((spec.seed, _RAG_SALT))))
    seen: set[str] = set()
    examples: list[TrainExample] = []
    while len(examples) < spec.n_examples:
        ex = _gen_one_rag(rng, spec)
        if ex.input_text in seen:
            continue
        seen.add(ex.input_text)
        examples.append(ex)
    return _split(examples, spec.seed)


def generate(spec: TaskSpec) -> Corpus:
    return gen_general(spec) if spec.kind == "general_instruction" else gen_rag(spec)


# Context-length sweep profiles: approximate average input length -> layout.
CTX_PROFILES = {64: (2, 26), 128: (4, 28), 256: (8, 29), 448: (14, 30)}


def rag_spec_for_ctx(target_len: int, seed: int, n_examples: int,
                     unanswerable_rate: float = 0.1,
                     distractor_rate: float = 0.3) -> TaskSpec:
    if target_len not in CTX_PROFILES:
        raise SpecError(f"no context profile for target length {target_len}")
    n_docs, doc_len = CTX_PROFILES[target_len]
    return TaskSpec(kind="rag_qa", seed=seed, n_examples=n_examples, n_docs=n_docs,
                    doc_len=doc_len, distractor_rate=distractor_rate,
                    unanswerable_rate=unanswerable_rate)


@dataclass
class EncodedBatch:
    tokens: np.ndarray   # [B, L] int64, PAD-filled
    labels: np.ndarray   # [B, L] int64, labels[i] = tokens[i+1], PAD past the end
    masks: SpanMasks
    lengths: np.ndarray  # real sequence lengths

    def __len__(self) -> int:
        return self.tokens.shape[0]


class LengthError(ValueError):
    """An example does not fit the length budget; names the example index."""


def encode_batch(examples: list[TrainExample], max_len: int,
                 pad_to: Optional[int] = None) -> EncodedBatch:
    """Lay out [BOS, input..., SEP, response..., EOS], right-padded.

    Labels and masks are aligned to predictions: position i predicts token
    i+1; the input mask covers predictions of input bytes and SEP, the
    response mask covers predictions of response bytes and EOS.
    """
    seqs = []
    for idx, ex in enumerate(examples):
        seq = [BOS] + ex.input_tokens + [SEP] + ex.response_tokens + [EOS]
        if len(seq) > max_len:
            raise LengthError(f"example {idx} needs {len(seq)} tokens, max_len {max_len}")
        seqs.append(seq)
    width = pad_to if pad_to is not None else max(len(s) for s in seqs)
    if width > max_len:
        raise LengthError(f"pad_to {width} exceeds max_len {max_len}")
    n = len(seqs)
    tokens = np.full((n, width), PAD, dtype=np.int64)
    labels = np.full((n, width), PAD, dtype=np.int64)
    input_mask = np.zeros((n, width), dtype=bool)
    response_mask = np.zeros((n, width), dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    for i, (seq, ex) in enumerate(zip(seqs, examples)):
        L = len(seq)
        lengths[i] = L
        tokens[i, :L] = seq
        labels[i, : L - 1] = seq[1:]
        n_in = len(ex.input_tokens)
        # predictions 0..n_in target input bytes then SEP; the rest of the
        # real positions target response bytes then EOS
        input_mask[i, 0 : n_in + 1] = True
        response_mask[i, n_in + 1 : L - 1] = True
    pad_mask = ~(input_mask | response_mask)
    return EncodedBatch(tokens=tokens, labels=labels,
                        masks=SpanMasks(input_mask, response_mask, pad_mask),
                        lengths=lengths)


def export_corpus(examples: list[TrainExample], path) -> None:
    """One JSON record per line: input, response, meta."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"input": ex.input_text, "response": ex.response_text,
                                 "meta": ex.meta}, sort_keys=True) + "\n")


def import_corpus(path) -> list[TrainExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(TrainExample(rec["input"], rec["response"], rec.get("meta", {})))
    return out
