"""Corpus handling: vocabulary, padded batches, synthetic tasks, LM windows."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import RngState

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Token <-> id bijection with stable reserved ids."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED)
        seen = set(RESERVED)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self.id_to_token.append(t)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED)] != list(RESERVED):
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        v = cls.__new__(cls)
        v.id_to_token = lines
        v.token_to_id = {t: i for i, t in enumerate(lines)}
        return v


def synthetic_task(kind: str, vocab_size: int, length_range: tuple[int, int],
                   n_pairs: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Deterministic toy parallel corpus; `reverse` mirrors the source."""
    if kind not in ("copy", "reverse"):
        raise ValueError(f"unknown synthetic task {kind!r}")
    if vocab_size < 10:
        raise ValueError("synthetic vocab must be >= 10")
    words = [f"w{i:03d}" for i in range(vocab_size)]
    rng = RngState(seed).child(f"synthetic.{kind}")
    lo, hi = length_range
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [words[int(i)] for i in rng.integers(0, vocab_size, n)]
        tgt = src[::-1] if kind == "reverse" else list(src)
        pairs.append((src, tgt))
    return pairs


def write_parallel(pairs, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for src, tgt in pairs:
            fs.write(" ".join(src) + "\n")
            ft.write(" ".join(tgt) + "\n")


def read_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError("parallel files have different line counts")
    return [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]


@dataclass
class Batch:
    """Padded id matrices; masks are True exactly at pad positions."""

    src: np.ndarray
    src_pad: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_pad: np.ndarray

    @property
    def target_tokens(self) -> int:
        return int((~self.tgt_pad).sum())


def make_batch(pairs, vocab: Vocab) -> Batch:
    """Encode (src, tgt) token pairs; source gets a trailing EOS, target is
    teacher-forced as BOS+y / y+EOS."""
    src_ids = [vocab.encode(s) + [EOS] for s, _ in pairs]
    tgt_ids = [vocab.encode(t) for _, t in pairs]
    b = len(pairs)
    s_len = max(len(x) for x in src_ids)
    t_len = max(len(x) for x in tgt_ids) + 1
    src = np.full((b, s_len), PAD, dtype=np.int64)
    tgt_in = np.full((b, t_len), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(src_ids, tgt_ids)):
        src[i, : len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    return Batch(src, src == PAD, tgt_in, tgt_out, tgt_out == PAD)


def batch_stream(pairs, vocab: Vocab, batch_size: int, seed: int):
    """Endless shuffled batch iterator (fresh permutation every epoch)."""
    rng = RngState(seed).child("batches")
    order = np.arange(len(pairs))
    while True:
        rng.shuffle(order)
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            yield make_batch([pairs[i] for i in idx], vocab)


def batches_once(pairs, vocab: Vocab, batch_size: int):
    return [make_batch(pairs[lo : lo + batch_size], vocab)
            for lo in range(0, len(pairs), batch_size)]


# -- language modeling ---------------------------------------------------------


def synthetic_lm_corpus(n_tokens: int, vocab_size: int = 150, seed: int = 0,
                        branching: int = 4) -> list[str]:
    """Deterministic Markov-chain text lines for desk-scale LM experiments.

    Each word has `branching` possible successors with fixed random weights,
    so the stream has bounded per-token entropy and is learnable by a small
    model.  Returns lines of 8..20 words.
    """
    rng = RngState(seed).child("lm_corpus")
    succ = rng.integers(0, vocab_size, (vocab_size, branching))
    weights = rng.random((vocab_size, branching)) + 0.05
    weights /= weights.sum(axis=1, keepdims=True)
    cum = np.cumsum(weights, axis=1)
    lines = []
    state = 0
    produced = 0
    while produced < n_tokens:
        length = int(rng.integers(8, 21))
        words = []
        for _ in range(length):
            u = rng.random(())
            state = int(succ[state, int(np.searchsorted(cum[state], u))])
            words.append(f"v{state:03d}")
        lines.append(" ".join(words))
        produced += length + 1  # the loader appends <eos> per line
    return lines


def load_lm_tokens(path) -> list[str]:
    """Whitespace-tokenized stream; every line contributes a trailing <eos>."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    tokens: list[str] = []
    with open(p, encoding="utf-8") as f:
        for line in f:
            words = line.split()
            if words:
                tokens.extend(words)
                tokens.append("<eos>")
    if not tokens:
        raise ValueError(f"corpus file is empty: {path}")
    return tokens


def lm_vocab(tokens) -> Vocab:
    return Vocab(sorted(set(tokens)))


def lm_batchify(ids, batch_size: int) -> np.ndarray:
    """Chop a token stream into `batch_size` contiguous lanes, dropping the
    remainder: (batch_size, len // batch_size)."""
    ids = np.asarray(ids, dtype=np.int64)
    lane = len(ids) // batch_size
    if lane == 0:
        raise ValueError("stream shorter than batch size")
    return ids[: lane * batch_size].reshape(batch_size, lane)


def lm_windows(lanes: np.ndarray, seq_len: int):
    """Full (input, target, keep) windows over batchified lanes.

    Targets are the next token within each lane; the very last position of a
    lane has no successor, so its target is PAD with keep=False.
    """
    b, lane = lanes.shape
    n_windows = lane // seq_len
    out = []
    for w in range(n_windows):
        lo = w * seq_len
        inp = lanes[:, lo : lo + seq_len]
        tgt = np.full((b, seq_len), PAD, dtype=np.int64)
        keep = np.ones((b, seq_len), dtype=bool)
        hi = min(lo + seq_len + 1, lane)
        tgt[:, : hi - lo - 1] = lanes[:, lo + 1 : hi]
        if hi - lo - 1 < seq_len:
            keep[:, hi - lo - 1 :] = False
        out.append((inp, tgt, keep))
    return out
