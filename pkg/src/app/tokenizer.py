"""Character-level tokenizer over printable ASCII plus four special tokens."""

from collections.abc import Iterable

from app.utils.errors import ContractError

PAD = 0
BOS = 1
EOS = 2
IMG = 3

SPECIAL_TOKENS: dict[str, int] = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "<img>": IMG}

_FIRST_CHAR = 32
_LAST_CHAR = 126
_OFFSET = len(SPECIAL_TOKENS)

VOCAB_SIZE = _OFFSET + (_LAST_CHAR - _FIRST_CHAR + 1)


def encode(text: str) -> list[int]:
    """Map each character of ``text`` to its token id.

    Raises:
        ContractError: If a character is outside printable ASCII.

    """
    ids = []
    for ch in text:
        code = ord(ch)
        if not _FIRST_CHAR <= code <= _LAST_CHAR:
            raise ContractError(f"character {ch!r} is not in the tokenizer alphabet")
        ids.append(code - _FIRST_CHAR + _OFFSET)
    return ids


def decode(ids: Iterable[int]) -> str:
    """Map ids back to text, stopping at EOS and skipping other specials."""
    chars = []
    for token in ids:
        token = int(token)
        if token == EOS:
            break
        if token < _OFFSET:
            continue
        chars.append(chr(token - _OFFSET + _FIRST_CHAR))
    return "".join(chars)


def token_for(ch: str) -> int:
    """Return the id of a single character."""
    (token,) = encode(ch)
    return token
