"""Exports of a trained AUX layer: weight heatmap and relationship table."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ContractError, DataError
from .topology import aux_matrix


def _require_aux(checkpoint):
    if checkpoint.topology.variant != "mcnn_aux":
        raise ContractError(f"need an mcnn_aux checkpoint, got {checkpoint.topology.variant!r}")


def write_heatmap_csv(path, matrix, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["aux\\mcnn"] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_heatmap_csv(path):
    """Returns ``(matrix, row_names, column_names)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return matrix, names, cols


def heatmap_scale(matrix):
    s = float(np.max(np.abs(matrix)))
    return s if s > 0 else 1.0


def heatmap_gray(matrix):
    """Gray levels: 128 is a zero weight, 128 +/- 127 is +/- the largest |weight|."""
    s = heatmap_scale(matrix)
    return np.clip(np.rint(128 + 127 * np.asarray(matrix, dtype=np.float64) / s), 0, 255).astype(np.int64)


def write_pgm(path, gray, comment=""):
    gray = np.asarray(gray, dtype=np.int64)
    h, w = gray.shape
    with open(path, "w") as fh:
        fh.write("P2\n")
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        fh.write(f"{w} {h}\n255\n")
        for row in gray:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_pgm(path):
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise DataError(f"{path}: not an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(t) for t in tokens[4:4 + w * h]])
    if values.size != w * h:
        raise DataError(f"{path}: truncated PGM")
    return values.reshape(h, w)


def export_heatmap(checkpoint, out_prefix):
    """Write ``<prefix>.csv``, ``<prefix>.pgm`` and signed ``_pos``/``_neg`` PGMs.

    Rows are AUX units and columns MCNN score units, both in vocabulary order.
    """
    _require_aux(checkpoint)
    matrix = np.asarray(aux_matrix(checkpoint.params))
    names = list(checkpoint.topology.output_attrs)
    s = heatmap_scale(matrix)
    write_heatmap_csv(f"{out_prefix}.csv", matrix, names)
    write_pgm(f"{out_prefix}.pgm", heatmap_gray(matrix),
              f"gray = round(128 + 127 * w / S), S = max|w| = {s!r}\n"
              "rows: AUX units, columns: MCNN score units (vocabulary order)")
    pos = np.rint(255 * np.clip(matrix, 0, None) / s).astype(np.int64)
    neg = np.rint(255 * np.clip(-matrix, 0, None) / s).astype(np.int64)
    write_pgm(f"{out_prefix}_pos.pgm", pos, f"gray = round(255 * max(w, 0) / S), S = {s!r}")
    write_pgm(f"{out_prefix}_neg.pgm", neg, f"gray = round(255 * max(-w, 0) / S), S = {s!r}")
    return matrix


@dataclass
class Relationship:
    attribute: str
    positive: List[Tuple[str, float]] = field(default_factory=list)
    negative: List[Tuple[str, float]] = field(default_factory=list)


def relationships_from_matrix(matrix, names, tau=0.5):
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    matrix = np.asarray(matrix, dtype=np.float64)
    off = matrix - np.diag(np.diag(matrix))
    peak = float(np.max(np.abs(off)))
    table = []
    for i, name in enumerate(names):
        rel = Relationship(name)
        if peak > 0:
            for j, other in enumerate(names):
                if j == i:
                    continue
                w = matrix[i, j]
                if w >= tau * peak:
                    rel.positive.append((other, float(w)))
                elif w <= -tau * peak:
                    rel.negative.append((other, float(w)))
        rel.positive.sort(key=lambda t: -abs(t[1]))
        rel.negative.sort(key=lambda t: -abs(t[1]))
        table.append(rel)
    return table


def extract_relationships(checkpoint, tau=0.5):
    _require_aux(checkpoint)
    return relationships_from_matrix(aux_matrix(checkpoint.params), checkpoint.topology.output_attrs, tau)


def format_relationships(table, with_weights=False):
    def cell(items):
        if not items:
            return "N/A"
        if with_weights:
            return ", ".join(f"{n} ({w:+.3f})" for n, w in items)
        return ", ".join(n for n, _ in items)

    rows = [("Attribute", "Positive Influences", "Negative Influences")]
    rows += [(r.attribute, cell(r.positive), cell(r.negative)) for r in table]
    widths = [max(len(r[k]) for r in rows) for k in range(3)]
    lines = [" | ".join(r[k].ljust(widths[k]) for k in range(3)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
