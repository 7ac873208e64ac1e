"""PCSEQ text format.

::

    PCSEQ 1 <T> [label]
    <m_1>
    x y z          (m_1 lines)
    <m_2>
    ...

A file may hold several sequences back to back.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInput, ParseError
from .geometry import CloudSequence


def format_sequence(seq: CloudSequence) -> str:
    header = f"PCSEQ 1 {seq.T}" + ("" if seq.label is None else f" {int(seq.label)}")
    lines = [header]
    for frame in seq.frames:
        lines.append(str(len(frame)))
        lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in frame.coords.tolist())
    return "\n".join(lines) + "\n"


def dumps(seqs) -> str:
    if isinstance(seqs, CloudSequence):
        seqs = [seqs]
    return "".join(format_sequence(s) for s in seqs)


def _int(tok, what, line):
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not an integer", line) from None
    return v


def loads(text: str) -> list[CloudSequence]:
    """Parse every sequence in ``text``; errors name the 1-based line."""
    lines = text.splitlines()
    pos, out = 0, []
    n = len(lines)

    def next_line():
        nonlocal pos
        while pos < n and not lines[pos].strip():
            pos += 1
        if pos >= n:
            raise ParseError("unexpected end of file", n)
        pos += 1
        return lines[pos - 1].split(), pos

    while True:
        while pos < n and not lines[pos].strip():
            pos += 1
        if pos >= n:
            break
        tok, ln = next_line()
        if len(tok) not in (3, 4) or tok[0] != "PCSEQ":
            raise ParseError("expected header 'PCSEQ 1 <T> [label]'", ln)
        if tok[1] != "1":
            raise ParseError(f"unsupported version {tok[1]!r}", ln)
        T = _int(tok[2], "frame count", ln)
        if T < 1:
            raise ParseError("frame count must be >= 1", ln)
        label = _int(tok[3], "label", ln) if len(tok) == 4 else None
        frames = []
        for _ in range(T):
            tok, ln = next_line()
            if len(tok) != 1:
                raise ParseError("expected a point count", ln)
            m = _int(tok[0], "point count", ln)
            if m < 1:
                raise ParseError("point count must be >= 1", ln)
            pts = np.empty((m, 3))
            for k in range(m):
                tok, ln = next_line()
                if len(tok) != 3:
                    raise ParseError(f"expected 'x y z', got {len(tok)} fields", ln)
                try:
                    pts[k] = [float(v) for v in tok]
                except ValueError:
                    raise ParseError(f"bad coordinate in {' '.join(tok)!r}", ln) from None
                if not np.all(np.isfinite(pts[k])):
                    raise ParseError("non-finite coordinate", ln)
            frames.append(pts)
        out.append(CloudSequence.from_arrays(frames, label))
    if not out:
        raise ParseError("no sequence found", 1)
    return out


def read(path) -> list[CloudSequence]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return loads(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write(path, seqs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(seqs))
