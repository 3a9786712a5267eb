"""Tab-separated report files."""

import os
from pathlib import Path


def fmt(value):
    """Shortest repr that round-trips; stable across runs and platforms."""
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    return repr(float(value))


def write_tsv(path, header, rows):
    """Write ``rows`` (sequences of cells) under ``header``, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(c if isinstance(c, str) else fmt(c) for c in row))
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    os.replace(tmp, path)
    return path


def read_tsv(path):
    """Return ``(header, rows)`` with every cell as a string."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return header, [line.split("\t") for line in lines[1:] if line]
