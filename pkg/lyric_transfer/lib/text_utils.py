"""
Character inventory and lyric text normalization.

### Main Functionalities
1. **Token inventory**:
   `TokenInventory` holds the ordered symbol list (blank, bos, eos, word boundary, apostrophe and the 26
   letters by default) and the id maps used by every model. It serializes to a plain-text file, one
   symbol per line, where the line number is the id.

2. **Normalization**:
   `normalize_line` prepares a raw lyric line for training: meaningless lines such as
   `**guitar solo**` or `[Chorus]` are dropped, accents are stripped, numbers are spelled out in words,
   letters are upper-cased, out-of-vocabulary characters are discarded and whitespace is collapsed.

3. **Encoding**:
   `encode` and `decode` convert between normalized text and token ids. Spaces map to the word-boundary
   token and back.
"""
import hashlib
import logging
import re
import unicodedata
from enum import Enum
from pathlib import Path
from string import ascii_uppercase
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, PrivateAttr, model_validator

from lyric_transfer.lib.errors import InvalidIdError, UnknownSymbolError

BLANK = "<blank>"
BOS = "<bos>"
EOS = "<eos>"
WORD_BOUNDARY = "|"
QUOTE = "'"

DEFAULT_MEANINGLESS_PATTERNS: Tuple[str, ...] = (
    r"^\s*\*+[^*]*\*+\s*$",
    r"^\s*\[[^\]]*\]\s*$",
)
"""Raw lines matching any of these patterns are stage directions, not lyrics."""


class TokenInventory(BaseModel):
    """
    Ordered token vocabulary shared by the CTC head, the attention decoder and the language model.

    Attributes:
        symbols (List[str]): Token strings; the position of a symbol is its id.
        blank (str): CTC blank symbol.
        bos (str): Beginning-of-sequence symbol fed to the autoregressive models.
        eos (str): End-of-sequence symbol.
        word_boundary (Optional[str]): Symbol standing for a space between words.
        quote (Optional[str]): The single quotation mark token.
    """
    symbols: List[str] = Field(..., min_length=3, description="Ordered symbol list, id = position.")
    blank: str = Field(BLANK, description="CTC blank symbol.")
    bos: str = Field(BOS, description="Beginning-of-sequence symbol.")
    eos: str = Field(EOS, description="End-of-sequence symbol.")
    word_boundary: Optional[str] = Field(WORD_BOUNDARY, description="Symbol standing for a space.")
    quote: Optional[str] = Field(QUOTE, description="Quotation mark symbol.")

    _index: Dict[str, int] = PrivateAttr(default_factory=dict)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _check_symbols(self) -> "TokenInventory":
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("inventory symbols must be unique")
        for name in ("blank", "bos", "eos", "word_boundary", "quote"):
            value = getattr(self, name)
            if value is not None and value not in self.symbols:
                raise ValueError(f"{name} symbol {value!r} is not in the inventory")
        return self

    def model_post_init(self, __context) -> None:
        self._index = {symbol: i for i, symbol in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return self._index[self.blank]

    @property
    def bos_id(self) -> int:
        return self._index[self.bos]

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    @property
    def word_boundary_id(self) -> Optional[int]:
        return None if self.word_boundary is None else self._index[self.word_boundary]

    @property
    def control_ids(self) -> Tuple[int, int, int]:
        """Ids that never appear inside a label sequence: blank, bos and eos."""
        return self.blank_id, self.bos_id, self.eos_id

    @property
    def label_ids(self) -> List[int]:
        """Ids that may appear inside a label sequence (everything but blank, bos and eos)."""
        control = set(self.control_ids)
        return [i for i in range(self.size) if i not in control]

    @property
    def emittable_ids(self) -> List[int]:
        """
        Ids an autoregressive model can predict: every label plus eos.

        Blank belongs to CTC only and bos is never predicted, it only primes the state.
        """
        return sorted(self.label_ids + [self.eos_id])

    @property
    def text_characters(self) -> str:
        """Single-character symbols that normalized text may contain, besides the space."""
        skip = {self.blank, self.bos, self.eos, self.word_boundary}
        return "".join(s for s in self.symbols if len(s) == 1 and s not in skip)

    def id_of(self, symbol: str) -> int:
        """
        Returns the id of a symbol.

        Raises:
            UnknownSymbolError: If the symbol is not in the inventory.
        """
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownSymbolError(f"symbol {symbol!r} is not in the inventory") from None

    def symbol_of(self, token_id: int) -> str:
        """
        Returns the symbol of an id.

        Raises:
            InvalidIdError: If the id is out of range.
        """
        if not 0 <= int(token_id) < self.size:
            raise InvalidIdError(f"token id {token_id} is outside [0, {self.size})")
        return self.symbols[int(token_id)]

    def fingerprint(self) -> str:
        """
        Returns the SHA-256 hex digest of the ordered symbol list.

        Stored in checkpoint metadata so that models trained on another inventory are rejected.
        """
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()

    def save(self, path: Path) -> None:
        """Writes the inventory as one symbol per line; line number = id."""
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "TokenInventory":
        """Reads an inventory written by `save`. Optional symbols absent from the file are disabled."""
        symbols = [line for line in Path(path).read_text(encoding="utf-8").split("\n") if line]
        return cls(
            symbols=symbols,
            word_boundary=WORD_BOUNDARY if WORD_BOUNDARY in symbols else None,
            quote=QUOTE if QUOTE in symbols else None,
        )


def default_inventory() -> TokenInventory:
    """
    Returns the 31-symbol character inventory: blank, bos, eos, word boundary, apostrophe, A to Z.
    """
    return TokenInventory(symbols=[BLANK, BOS, EOS, WORD_BOUNDARY, QUOTE, *ascii_uppercase])


# Number grammar

_ONES = [
    "ZERO", "ONE", "TWO", "THREE", "FOUR", "FIVE", "SIX", "SEVEN", "EIGHT", "NINE",
    "TEN", "ELEVEN", "TWELVE", "THIRTEEN", "FOURTEEN", "FIFTEEN", "SIXTEEN",
    "SEVENTEEN", "EIGHTEEN", "NINETEEN",
]
_TENS = ["", "", "TWENTY", "THIRTY", "FORTY", "FIFTY", "SIXTY", "SEVENTY", "EIGHTY", "NINETY"]
_ORDINAL_EXCEPTIONS = {
    "ONE": "FIRST", "TWO": "SECOND", "THREE": "THIRD", "FIVE": "FIFTH",
    "EIGHT": "EIGHTH", "NINE": "NINTH", "TWELVE": "TWELFTH",
}
MAX_SPELLED_NUMBER = 9999

_ORDINAL_RE = re.compile(r"(\d+)(st|nd|rd|th)\b", re.IGNORECASE)
_DIGITS_RE = re.compile(r"\d+")
_WHITESPACE_RE = re.compile(r"\s+")
_SINGLE_QUOTES = str.maketrans({"‘": "'", "’": "'", "‚": "'", "‛": "'", "`": "'", "´": "'"})


def _below_hundred(n: int) -> List[str]:
    if n < 20:
        return [_ONES[n]]
    tens, ones = divmod(n, 10)
    return [_TENS[tens]] if ones == 0 else [_TENS[tens], _ONES[ones]]


def number_to_words(digits: str) -> str:
    """
    Spells an unsigned integer written in digits.

    Values up to 9999 are read as a number without hyphens or "AND" ("1999" becomes
    "ONE THOUSAND NINE HUNDRED NINETY NINE"). Larger values and digit runs with a leading zero
    ("007") are read digit by digit.

    Args:
        digits (str): A non-empty run of ASCII digits.

    Returns:
        str: Upper-case words separated by single spaces.
    """
    if (len(digits) > 1 and digits[0] == "0") or int(digits) > MAX_SPELLED_NUMBER:
        return " ".join(_ONES[int(d)] for d in digits)
    n = int(digits)
    if n == 0:
        return _ONES[0]
    words: List[str] = []
    thousands, rest = divmod(n, 1000)
    hundreds, rest = divmod(rest, 100)
    if thousands:
        words += [_ONES[thousands], "THOUSAND"]
    if hundreds:
        words += [_ONES[hundreds], "HUNDRED"]
    if rest:
        words += _below_hundred(rest)
    return " ".join(words)


def ordinal_to_words(digits: str) -> str:
    """Spells an ordinal ("21" for "21st" becomes "TWENTY FIRST")."""
    words = number_to_words(digits).split(" ")
    last = words[-1]
    if last in _ORDINAL_EXCEPTIONS:
        words[-1] = _ORDINAL_EXCEPTIONS[last]
    elif last.endswith("Y"):
        words[-1] = last[:-1] + "IETH"
    else:
        words[-1] = last + "TH"
    return " ".join(words)


# Normalization

class DropReason(str, Enum):
    """Why `classify_line` dropped a line."""
    KEPT = "kept"
    MEANINGLESS_PATTERN = "meaningless_pattern"
    NO_CONTENT = "no_content"


def _strip_accents(text: str) -> str:
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def classify_line(
    raw: str,
    inventory: Optional[TokenInventory] = None,
    patterns: Sequence[str] = DEFAULT_MEANINGLESS_PATTERNS,
) -> Tuple[Optional[str], DropReason]:
    """
    Normalizes one raw line and reports whether it was kept.

    Characters outside the inventory are deleted, whitespace excepted, so `"L@VE"` becomes `"LVE"`. A line
    with nothing left is dropped as `NO_CONTENT`.

    Args:
        raw (str): Arbitrary unicode text.
        inventory (Optional[TokenInventory]): Inventory defining the allowed characters.
        patterns (Sequence[str]): Regular expressions marking meaningless lines.

    Returns:
        Tuple[Optional[str], DropReason]: The normalized line (None when dropped) and the reason code.
    """
    inventory = inventory or default_inventory()
    for pattern in patterns:
        if re.search(pattern, raw):
            return None, DropReason.MEANINGLESS_PATTERN

    text = raw.translate(_SINGLE_QUOTES)
    text = _strip_accents(text)
    text = _ORDINAL_RE.sub(lambda m: f" {ordinal_to_words(m.group(1))} ", text)
    text = _DIGITS_RE.sub(lambda m: f" {number_to_words(m.group(0))} ", text)
    text = text.upper()

    allowed = set(inventory.text_characters)
    text = "".join(" " if ch.isspace() else ch for ch in text if ch in allowed or ch.isspace())
    text = _WHITESPACE_RE.sub(" ", text).strip()

    if not text:
        return None, DropReason.NO_CONTENT
    return text, DropReason.KEPT


def normalize_line(
    raw: str,
    inventory: Optional[TokenInventory] = None,
    patterns: Sequence[str] = DEFAULT_MEANINGLESS_PATTERNS,
) -> Optional[str]:
    """
    Normalizes one lyric line, returning None when the line is dropped.

    Idempotent: a normalized line normalizes to itself.
    """
    text, _ = classify_line(raw, inventory, patterns)
    return text


def normalize_lines(
    lines: Iterable[str],
    inventory: Optional[TokenInventory] = None,
    patterns: Sequence[str] = DEFAULT_MEANINGLESS_PATTERNS,
) -> Iterator[Tuple[int, Optional[str], DropReason]]:
    """
    Normalizes a stream of lines, yielding `(line_number, text, reason)` for each input line.
    """
    for number, raw in enumerate(lines, start=1):
        text, reason = classify_line(raw.rstrip("\r\n"), inventory, patterns)
        if text is None:
            logging.debug(f"Line {number} dropped ({reason.value}): {raw.strip()!r}")
        yield number, text, reason


# Encoding

def encode(text: str, inventory: TokenInventory) -> List[int]:
    """
    Converts normalized text into label ids. Spaces become the word-boundary token.

    Raises:
        UnknownSymbolError: If a character has no token (only possible on non-normalized input).
    """
    ids: List[int] = []
    allowed = inventory.text_characters
    wb = inventory.word_boundary_id
    for ch in text:
        if ch == " ":
            if wb is None:
                raise UnknownSymbolError("the inventory has no word-boundary token for a space")
            ids.append(wb)
        elif ch in allowed:
            ids.append(inventory.id_of(ch))
        else:
            raise UnknownSymbolError(f"character {ch!r} is not in the inventory")
    return ids


def decode(ids: Iterable[int], inventory: TokenInventory) -> str:
    """
    Converts label ids back into text. The word-boundary token renders as a space.

    Raises:
        InvalidIdError: On an out-of-range id or a blank, bos or eos id.
    """
    control = set(inventory.control_ids)
    wb = inventory.word_boundary_id
    chars: List[str] = []
    for token_id in ids:
        symbol = inventory.symbol_of(token_id)
        if int(token_id) in control:
            raise InvalidIdError(f"control token {symbol} cannot be rendered as text")
        chars.append(" " if token_id == wb else symbol)
    return "".join(chars)


def strip_control(ids: Iterable[int], inventory: TokenInventory) -> List[int]:
    """Removes blank, bos and eos ids, keeping label ids in order."""
    control = set(inventory.control_ids)
    return [int(i) for i in ids if int(i) not in control]
