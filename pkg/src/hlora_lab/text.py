"""Fixed word-level text vocabulary shared by data, model and CLI."""

from __future__ import annotations

TEXT_TOKENS: tuple[str, ...] = (
    "<pad>", "<eos>", "?", ";",
    "count", "shape", "where", "draw", "flip", "recon",
    "square", "frame", "cross",
    "top", "bottom", "left", "right",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "size", "at", "row", "col", "image",
)  # fmt: skip

TOKEN_ID = {tok: i for i, tok in enumerate(TEXT_TOKENS)}
PAD_ID = TOKEN_ID["<pad>"]
EOS_ID = TOKEN_ID["<eos>"]
TEXT_VOCAB_SIZE = len(TEXT_TOKENS)


class TokenizeError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    """Whitespace/semicolon/equals split into known words."""
    words = text.replace("=", " ").replace(";", " ; ").replace("?", " ? ").split()
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise TokenizeError(f"unknown word {exc.args[0]!r}") from None


def detokenize(ids) -> str:
    return " ".join(TEXT_TOKENS[i] for i in ids)
