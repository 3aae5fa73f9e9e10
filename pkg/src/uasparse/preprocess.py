"""Character edits, whitespace tokenization and truncation for UA strings."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

# Applied in order, each globally. "%20" has to run before "%".
DEFAULT_SUBSTITUTIONS = (
    ("%20", " "),
    ("_", "."),
    ("(", "( "),
    (")", " ) "),
    ("/", " "),
    (";", ""),
    (":", " : "),
    ("%", " "),
)

MAX_TOKENS = 50

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class RawUas:
    text: str


@dataclass(frozen=True)
class PreprocessConfig:
    max_tokens: int = MAX_TOKENS
    substitutions: tuple = DEFAULT_SUBSTITUTIONS

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class TokenizedUas:
    tokens: tuple
    original_token_count: int
    truncated: bool = field(default=False)

    def __len__(self):
        return len(self.tokens)


DEFAULT_CONFIG = PreprocessConfig()


def _text(raw):
    return raw.text if isinstance(raw, RawUas) else raw


def apply_substitutions(raw, config=DEFAULT_CONFIG):
    """Return the normalized, single-spaced form of a UA string."""
    text = _text(raw) or ""
    for pattern, replacement in config.substitutions:
        text = text.replace(pattern, replacement)
    return _WHITESPACE.sub(" ", text).strip()


def tokenize(raw, config=DEFAULT_CONFIG):
    normalized = apply_substitutions(raw, config)
    words = normalized.split(" ") if normalized else []
    return TokenizedUas(
        tokens=tuple(words[: config.max_tokens]),
        original_token_count=len(words),
        truncated=len(words) > config.max_tokens,
    )
