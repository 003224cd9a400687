"""5x3 bitmap font used to render words into task images."""

import numpy as np
from PIL import ImageDraw

from app.utils.errors import ContractError

GLYPH_ROWS = 5
GLYPH_COLS = 3
GLYPH_PITCH = GLYPH_COLS + 1

_GLYPHS: dict[str, tuple[str, str, str, str, str]] = {
    "a": ("010", "101", "111", "101", "101"),
    "b": ("110", "101", "110", "101", "110"),
    "c": ("011", "100", "100", "100", "011"),
    "d": ("110", "101", "101", "101", "110"),
    "e": ("111", "100", "110", "100", "111"),
    "f": ("111", "100", "110", "100", "100"),
    "g": ("011", "100", "101", "101", "011"),
    "h": ("101", "101", "111", "101", "101"),
    "i": ("111", "010", "010", "010", "111"),
    "j": ("001", "001", "001", "101", "010"),
    "k": ("101", "101", "110", "101", "101"),
    "l": ("100", "100", "100", "100", "111"),
    "m": ("101", "111", "111", "101", "101"),
    "n": ("111", "101", "101", "101", "101"),
    "o": ("010", "101", "101", "101", "010"),
    "p": ("110", "101", "110", "100", "100"),
    "q": ("010", "101", "101", "110", "011"),
    "r": ("110", "101", "110", "101", "101"),
    "s": ("011", "100", "010", "001", "110"),
    "t": ("111", "010", "010", "010", "010"),
    "u": ("101", "101", "101", "101", "111"),
    "v": ("101", "101", "101", "101", "010"),
    "w": ("101", "101", "111", "111", "101"),
    "x": ("101", "101", "010", "101", "101"),
    "y": ("101", "101", "010", "010", "010"),
    "z": ("111", "001", "010", "100", "111"),
}

ALPHABET = "".join(sorted(_GLYPHS))


class GlyphFont:
    """Bitmap lookup and rendering for the lowercase alphabet."""

    def __init__(self, glyphs: dict[str, tuple[str, ...]] | None = None) -> None:
        """Build boolean bitmaps; raises ContractError on a malformed or duplicate glyph."""
        source = glyphs if glyphs is not None else _GLYPHS
        self._bitmaps: dict[str, np.ndarray] = {}
        seen: dict[bytes, str] = {}
        for ch, rows in source.items():
            if len(rows) != GLYPH_ROWS or any(len(r) != GLYPH_COLS for r in rows):
                raise ContractError(f"glyph {ch!r} is not {GLYPH_ROWS}x{GLYPH_COLS}")
            bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
            key = np.packbits(bitmap).tobytes()
            if key in seen:
                raise ContractError(f"glyphs {seen[key]!r} and {ch!r} are identical")
            seen[key] = ch
            self._bitmaps[ch] = bitmap

    @property
    def characters(self) -> str:
        return "".join(self._bitmaps)

    def bitmap(self, ch: str) -> np.ndarray:
        try:
            return self._bitmaps[ch]
        except KeyError:
            raise ContractError(f"no glyph for character {ch!r}") from None

    def word_width(self, word: str) -> int:
        """Pixel width of a rendered word (no trailing gap)."""
        return max(len(word) * GLYPH_PITCH - 1, 0)

    def draw_word(
        self,
        draw: ImageDraw.ImageDraw,
        word: str,
        x: int,
        y: int,
        color: tuple[int, int, int],
    ) -> None:
        """Draw ``word`` with its top-left corner at (x, y)."""
        points = []
        for offset, ch in enumerate(word):
            rows, cols = np.nonzero(self.bitmap(ch))
            left = x + offset * GLYPH_PITCH
            points.extend(zip((left + cols).tolist(), (y + rows).tolist()))
        draw.point(points, fill=color)


DEFAULT_FONT = GlyphFont()
