"""Toy tokenizer, synthetic two-domain corpora, and the chunking protocol.

Documents are joined into one contiguous token stream per corpus with an
EOS separator after every document, then tiled into fixed-length chunks
(256 tokens by default) from a random per-epoch start offset so the two
training epochs cover disjoint spans. Chunks are partitioned 60/40 per
corpus; standalone paths train on the 60% sub-collections, composed models
on the 40% remainder, baselines on everything.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from papaformer.tensor import RngState

SEQ_LEN_DEFAULT = 256
CHUNKSTORE_MAGIC = b"PPCH"
CHUNKSTORE_VERSION = 1

EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"\S+")


class DataError(ValueError):
    """Corpus or chunk-store contents violate the pipeline's contract."""


@dataclass
class Corpus:
    documents: list
    domain_tag: str  # "story" | "math"

    def __post_init__(self):
        if not self.documents or any(not d for d in self.documents):
            raise DataError(f"corpus {self.domain_tag!r} has empty documents")


@dataclass
class ToyTokenizer:
    """Whitespace word-level tokenizer with optional byte fallback.

    ids are dense: 0 = EOS, 1 = UNK, then (in byte-fallback mode) 256 byte
    tokens, then the word vocabulary in first-seen order.
    """

    vocab: dict  # token string -> id
    byte_fallback: bool = False

    EOS = 0
    UNK = 1

    @classmethod
    def build(cls, corpora: list, byte_fallback: bool = False) -> "ToyTokenizer":
        vocab = {EOS_TOKEN: cls.EOS, UNK_TOKEN: cls.UNK}
        if byte_fallback:
            for b in range(256):
                vocab[f"<0x{b:02X}>"] = len(vocab)
        for corpus in corpora:
            for doc in corpus.documents:
                for w in _WORD_RE.findall(doc):
                    if w not in vocab:
                        vocab[w] = len(vocab)
        return cls(vocab=vocab, byte_fallback=byte_fallback)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for tok, idx in sorted(self.vocab.items(), key=lambda kv: kv[1]):
            h.update(f"{idx}:{tok}\n".encode())
        return h.hexdigest()[:16]

    def tokenize(self, text: str) -> np.ndarray:
        ids = []
        for w in _WORD_RE.findall(text):
            idx = self.vocab.get(w)
            if idx is not None:
                ids.append(idx)
            elif self.byte_fallback:
                ids.extend(2 + b for b in w.encode("utf-8"))
            else:
                ids.append(self.UNK)
        return np.asarray(ids, dtype=np.uint32)

    def detokenize(self, ids) -> str:
        inv = self.id_to_token()
        out = []
        pending_bytes = []
        for i in ids:
            tok = inv[int(i)]
            if self.byte_fallback and tok.startswith("<0x") and tok.endswith(">"):
                pending_bytes.append(int(tok[3:-1], 16))
                continue
            if pending_bytes:
                out.append(bytes(pending_bytes).decode("utf-8", errors="replace"))
                pending_bytes = []
            out.append(tok)
        if pending_bytes:
            out.append(bytes(pending_bytes).decode("utf-8", errors="replace"))
        return " ".join(out)

    def id_to_token(self) -> list:
        inv = [None] * len(self.vocab)
        for tok, idx in self.vocab.items():
            inv[idx] = tok
        return inv

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "byte_fallback": self.byte_fallback}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyTokenizer":
        return cls(vocab=dict(d["vocab"]), byte_fallback=bool(d["byte_fallback"]))


@dataclass
class Chunk:
    tokens: np.ndarray  # exactly seq_len uint32 ids
    corpus: str  # domain tag of the source corpus
    epoch: int  # 1 or 2
    start: int  # stream offset of the first token
    sub_collection: int = 0  # 60 or 40 once assigned

    @property
    def span(self) -> tuple:
        return (self.corpus, self.start, self.start + len(self.tokens))


def build_stream(corpus: Corpus, tokenizer: ToyTokenizer) -> np.ndarray:
    """concat(doc_1, EOS, doc_2, EOS, ...) in document order."""
    pieces = []
    for doc in corpus.documents:
        pieces.append(tokenizer.tokenize(doc))
        pieces.append(np.array([tokenizer.EOS], dtype=np.uint32))
    return np.concatenate(pieces)


def chunk_stream(
    stream: np.ndarray,
    seq_len: int,
    epoch: int,
    rng: RngState,
    corpus_tag: str = "",
    offset: int | None = None,
    forbidden_offset: int | None = None,
) -> list:
    """Tile non-overlapping seq_len windows from a random start offset.

    The offset is drawn in [0, seq_len); passing the other epoch's offset as
    ``forbidden_offset`` guarantees the two chunkings share no [start, end)
    span. The trailing remainder is dropped.
    """
    if len(stream) < 2 * seq_len:
        raise DataError(f"stream of {len(stream)} tokens is too short for seq_len {seq_len}")
    if offset is None:
        offset = int(rng.integers(0, seq_len))
        while forbidden_offset is not None and offset == forbidden_offset:
            offset = int(rng.integers(0, seq_len))
    chunks = []
    for start in range(offset, len(stream) - seq_len + 1, seq_len):
        chunks.append(
            Chunk(tokens=stream[start : start + seq_len].copy(), corpus=corpus_tag, epoch=epoch, start=start)
        )
    return chunks


def two_epoch_chunks(stream: np.ndarray, seq_len: int, rng: RngState, corpus_tag: str) -> list:
    """Both epochs' chunkings with guaranteed distinct offsets."""
    first = chunk_stream(stream, seq_len, 1, rng, corpus_tag)
    second = chunk_stream(stream, seq_len, 2, rng, corpus_tag, forbidden_offset=first[0].start % seq_len)
    return first + second


def split_collections(chunks: list, fraction: float = 0.6, rng: RngState | None = None) -> tuple:
    """Random disjoint (60%, 40%) partition; tags each chunk in place.

    Splitting is per (corpus, epoch is ignored): callers pass one corpus's
    chunks at a time when per-corpus splits are required.
    """
    if not (0.0 < fraction < 1.0):
        raise DataError(f"split fraction {fraction} outside (0, 1)")
    n = len(chunks)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    n60 = round(fraction * n)
    sub60 = [chunks[i] for i in order[:n60]]
    sub40 = [chunks[i] for i in order[n60:]]
    for c in sub60:
        c.sub_collection = 60
    for c in sub40:
        c.sub_collection = 40
    return sub60, sub40


def make_batches(chunk_sets: list, batch_size: int, rng: RngState) -> list:
    """Seeded shuffle of the union, grouped into fixed-size batches.

    The trailing partial batch is dropped. Returns a list of lists of
    chunks; iteration order is fully determined by the rng state.
    """
    pool = [c for cs in chunk_sets for c in cs]
    if not pool:
        raise DataError("no chunks to batch")
    order = rng.permutation(len(pool))
    batches = []
    for i in range(0, len(pool) - batch_size + 1, batch_size):
        batches.append([pool[j] for j in order[i : i + batch_size]])
    return batches


# -- synthetic desk corpora ------------------------------------------------

_STORY_NAMES = ["Lily", "Tom", "Mia", "Ben", "Sara", "Max"]
_STORY_PLACES = ["park", "forest", "garden", "lake", "house", "school"]
_STORY_THINGS = ["ball", "kite", "puppy", "flower", "cake", "boat"]
_STORY_VERBS = ["played", "laughed", "ran", "jumped", "sang", "smiled"]

_MATH_OPS = [("plus", lambda a, b: a + b), ("minus", lambda a, b: a - b), ("times", lambda a, b: a * b)]


def synthetic_story_corpus(n_docs: int, seed: int) -> Corpus:
    """Template children's-story sentences with a story-only surface vocabulary."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        name = _STORY_NAMES[rng.integers(len(_STORY_NAMES))]
        sentences = [f"Once upon a time there was a little one named {name} ."]
        # variable document lengths keep chunk phases from locking to the
        # template, which would make offsets trivially predictable
        for _ in range(int(rng.integers(1, 4))):
            place = _STORY_PLACES[rng.integers(len(_STORY_PLACES))]
            thing = _STORY_THINGS[rng.integers(len(_STORY_THINGS))]
            verb = _STORY_VERBS[rng.integers(len(_STORY_VERBS))]
            verb2 = _STORY_VERBS[rng.integers(len(_STORY_VERBS))]
            sentences.append(f"{name} went to the {place} with a {thing} .")
            sentences.append(f"{name} {verb} and {verb2} all day .")
        sentences.append("The end .")
        docs.append(" ".join(sentences))
    return Corpus(documents=docs, domain_tag="story")


def synthetic_math_corpus(n_docs: int, seed: int) -> Corpus:
    """Template arithmetic-instruction strings with a math-only vocabulary."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        problems = []
        for _ in range(int(rng.integers(1, 3))):
            a, b = int(rng.integers(0, 10)), int(rng.integers(0, 10))
            op_name, op = _MATH_OPS[rng.integers(len(_MATH_OPS))]
            problems.append(
                f"Solve this problem : what is {a} {op_name} {b} ? "
                f"Compute the value step by step . The answer is {op(a, b)} ."
            )
        docs.append(" ".join(problems))
    return Corpus(documents=docs, domain_tag="math")


def load_corpus_file(path: str, domain_tag: str) -> Corpus:
    """One document per non-empty line, UTF-8."""
    with open(path, encoding="utf-8") as f:
        docs = [line.strip() for line in f if line.strip()]
    if not docs:
        raise DataError(f"corpus file {path} is empty")
    return Corpus(documents=docs, domain_tag=domain_tag)


# -- chunk-store persistence ----------------------------------------------


@dataclass
class ChunkStore:
    """All chunks of a preprocessing run plus the tokenizer that made them."""

    seq_len: int
    chunks: list
    tokenizer: ToyTokenizer

    def select(self, corpus: str | None = None, sub: int | None = None, epoch: int | None = None) -> list:
        out = self.chunks
        if corpus is not None:
            out = [c for c in out if c.corpus == corpus]
        if sub is not None:
            out = [c for c in out if c.sub_collection == sub]
        if epoch is not None:
            out = [c for c in out if c.epoch == epoch]
        return out

    def save(self, path: str) -> None:
        header = struct.pack(
            "<4sIIQ", CHUNKSTORE_MAGIC, CHUNKSTORE_VERSION, self.seq_len, len(self.chunks)
        )
        provenance = {
            "tokenizer": self.tokenizer.to_dict(),
            "tokenizer_fingerprint": self.tokenizer.fingerprint(),
            "chunks": [
                {"corpus": c.corpus, "sub": c.sub_collection, "epoch": c.epoch, "start": c.start}
                for c in self.chunks
            ],
        }
        with open(path, "wb") as f:
            f.write(header)
            for c in self.chunks:
                if len(c.tokens) != self.seq_len:
                    raise DataError(f"chunk at {c.start} has {len(c.tokens)} tokens, want {self.seq_len}")
                f.write(np.asarray(c.tokens, dtype="<u4").tobytes())
            f.write(json.dumps(provenance).encode("utf-8"))

    @classmethod
    def load(cls, path: str) -> "ChunkStore":
        with open(path, "rb") as f:
            raw = f.read()
        magic, version, seq_len, count = struct.unpack_from("<4sIIQ", raw, 0)
        if magic != CHUNKSTORE_MAGIC:
            raise DataError(f"{path}: not a chunk store (bad magic {magic!r})")
        if version != CHUNKSTORE_VERSION:
            raise DataError(f"{path}: unsupported chunk-store version {version}")
        offset = struct.calcsize("<4sIIQ")
        payload_bytes = count * seq_len * 4
        tokens = np.frombuffer(raw, dtype="<u4", count=count * seq_len, offset=offset)
        provenance = json.loads(raw[offset + payload_bytes :].decode("utf-8"))
        tokenizer = ToyTokenizer.from_dict(provenance["tokenizer"])
        chunks = []
        for i, meta in enumerate(provenance["chunks"]):
            chunks.append(
                Chunk(
                    tokens=tokens[i * seq_len : (i + 1) * seq_len].copy(),
                    corpus=meta["corpus"],
                    epoch=meta["epoch"],
                    start=meta["start"],
                    sub_collection=meta["sub"],
                )
            )
        return cls(seq_len=seq_len, chunks=chunks, tokenizer=tokenizer)


def build_chunk_store(
    corpora: list,
    seq_len: int = SEQ_LEN_DEFAULT,
    split_fraction: float = 0.6,
    seed: int = 42,
    byte_fallback: bool = False,
) -> ChunkStore:
    """Full preprocessing pipeline: tokenize, chunk twice, split 60/40 per corpus."""
    tokenizer = ToyTokenizer.build(corpora, byte_fallback=byte_fallback)
    rng = RngState(seed)
    all_chunks = []
    for corpus in corpora:
        stream = build_stream(corpus, tokenizer)
        chunks = two_epoch_chunks(stream, seq_len, rng, corpus.domain_tag)
        split_collections(chunks, split_fraction, rng)
        all_chunks.extend(chunks)
    return ChunkStore(seq_len=seq_len, chunks=all_chunks, tokenizer=tokenizer)
