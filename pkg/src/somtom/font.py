"""Fixed 8x12 bitmap digits, so rendered labels are bit-identical everywhere."""

import numpy as np

GLYPH_W = 8
GLYPH_H = 12

_DIGITS = {
    "0": [
        "........",
        "..####..",
        ".##..##.",
        ".##..##.",
        ".##.###.",
        ".######.",
        ".###.##.",
        ".##..##.",
        ".##..##.",
        "..####..",
        "........",
        "........",
    ],
    "1": [
        "........",
        "...##...",
        "..###...",
        ".####...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        ".######.",
        "........",
        "........",
    ],
    "2": [
        "........",
        "..####..",
        ".##..##.",
        ".....##.",
        "....##..",
        "...##...",
        "..##....",
        ".##.....",
        ".##.....",
        ".######.",
        "........",
        "........",
    ],
    "3": [
        "........",
        "..####..",
        ".##..##.",
        ".....##.",
        "...###..",
        ".....##.",
        ".....##.",
        ".....##.",
        ".##..##.",
        "..####..",
        "........",
        "........",
    ],
    "4": [
        "........",
        "....##..",
        "...###..",
        "..####..",
        ".##.##..",
        ".##.##..",
        ".######.",
        "....##..",
        "....##..",
        "....##..",
        "........",
        "........",
    ],
    "5": [
        "........",
        ".######.",
        ".##.....",
        ".##.....",
        ".#####..",
        ".....##.",
        ".....##.",
        ".....##.",
        ".##..##.",
        "..####..",
        "........",
        "........",
    ],
    "6": [
        "........",
        "..####..",
        ".##.....",
        ".##.....",
        ".#####..",
        ".##..##.",
        ".##..##.",
        ".##..##.",
        ".##..##.",
        "..####..",
        "........",
        "........",
    ],
    "7": [
        "........",
        ".######.",
        ".....##.",
        ".....##.",
        "....##..",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "........",
        "........",
    ],
    "8": [
        "........",
        "..####..",
        ".##..##.",
        ".##..##.",
        "..####..",
        ".##..##.",
        ".##..##.",
        ".##..##.",
        ".##..##.",
        "..####..",
        "........",
        "........",
    ],
    "9": [
        "........",
        "..####..",
        ".##..##.",
        ".##..##.",
        ".##..##.",
        "..#####.",
        ".....##.",
        ".....##.",
        "....##..",
        "..###...",
        "........",
        "........",
    ],
}

GLYPHS = {
    ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
    for ch, rows in _DIGITS.items()
}


def render_text(text: str, scale: int = 1) -> np.ndarray:
    """Boolean mask of ``text`` at integer ``scale``; only digits are supported."""
    try:
        glyphs = [GLYPHS[ch] for ch in text]
    except KeyError as exc:
        raise ValueError(f"no glyph for {exc.args[0]!r}") from None
    mask = np.concatenate(glyphs, axis=1)
    if scale > 1:
        mask = np.repeat(np.repeat(mask, scale, axis=0), scale, axis=1)
    return mask
