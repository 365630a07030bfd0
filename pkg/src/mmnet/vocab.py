"""Closed word-level vocabulary for the synthetic expressions.

The vocabulary file format (an external interface) is plain text, one
token per line, where the line index is the token id.
"""

from __future__ import annotations

from .errors import InputError

SPECIALS = ["<pad>", "<sos>", "<eos>", "<unk>"]
WORDS = [
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "small", "large",
    "on", "the",
    "top", "bottom", "left", "right", "center",
]

VOCAB = SPECIALS + WORDS
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
_TOKEN_TO_ID = {t: i for i, t in enumerate(VOCAB)}


def vocab_size() -> int:
    return len(VOCAB)


def encode(text: str, max_len: int) -> list[int]:
    """Tokenize ``text`` and wrap in SOS/EOS, padding to ``max_len``."""
    words = text.lower().split()
    if len(words) + 2 > max_len:
        raise InputError(
            f"expression {text!r} needs {len(words) + 2} slots, max_len is {max_len}")
    ids = [SOS_ID] + [_TOKEN_TO_ID.get(w, UNK_ID) for w in words] + [EOS_ID]
    return ids + [PAD_ID] * (max_len - len(ids))


def decode(ids) -> str:
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        if i in (SOS_ID, PAD_ID):
            continue
        words.append(VOCAB[i] if 0 <= i < len(VOCAB) else "<unk>")
    return " ".join(words)


def write_vocab_file(path) -> None:
    with open(path, "w") as f:
        for tok in VOCAB:
            f.write(tok + "\n")


def read_vocab_file(path) -> list[str]:
    with open(path) as f:
        toks = [line.rstrip("\n") for line in f if line.strip()]
    if toks[:4] != SPECIALS:
        raise InputError(f"vocab file {path} must start with {SPECIALS}")
    return toks
