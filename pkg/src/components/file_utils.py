"""Utility functions for reading and writing run artifacts.

Every artifact starts with its provenance: CSV files with a comment line
`# digest=<config digest> version=<tool version>`, JSONL files with a header
record of kind "header".
"""

import json
import os
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from src.components.errors import ValidationError
from src.models.betasearch import BetaStage
from src.models.operator import OFFSETS, BandedUnitary, FullLine, HalfLine


def artifact_header(digest: str, version: str) -> str:
    return f"# digest={digest} version={version}"


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        raise ValidationError(f"Missing artifact header: {line.strip()!r}", "header")
    fields = {}
    for token in line.lstrip("#").split():
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def write_csv(path: str, frame: pd.DataFrame, digest: str, version: str) -> None:
    """Writes a frame as CSV below a provenance comment line."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(artifact_header(digest, version) + "\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")


def read_csv(path: str) -> tuple[dict[str, str], pd.DataFrame]:
    """Reads a CSV artifact.

    Returns:
        The header fields (digest, version) and the table.
    """
    with open(path, "r", encoding="utf-8") as f:
        header = _parse_header(f.readline())
        frame = pd.read_csv(f, float_precision="round_trip")
    return header, frame


def write_jsonl(
    path: str, records: Iterable[dict], digest: str, version: str
) -> None:
    """Writes a header record followed by one JSON object per line."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"kind": "header", "digest": digest, "version": version}))
        for record in records:
            f.write(_dumps(record))


def append_jsonl(path: str, record: dict) -> None:
    """Appends one record to an existing JSONL artifact."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(_dumps(record))


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def read_jsonl(path: str) -> tuple[dict, list[dict]]:
    """Reads a JSONL artifact into its header and records.

    A truncated last line (interrupted writer) is dropped.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if i >= len(lines) - 2:
                break
            raise ValidationError(f"Corrupt record on line {i + 1} of {path}")
    if not records or records[0].get("kind") != "header":
        raise ValidationError(f"Missing header record in {path}", "header")
    return records[0], records[1:]


def stage_record(stage: BetaStage) -> dict:
    return {"kind": "stage", **stage.to_dict()}


def load_stages(path: str, digest: Optional[str] = None) -> list[BetaStage]:
    """Reads completed construction stages for a resumed run.

    Raises:
        ValidationError: If `digest` is given and differs from the file's.
    """
    header, records = read_jsonl(path)
    if digest is not None and header.get("digest") != digest:
        raise ValidationError(
            f"Audit {path} belongs to config {header.get('digest')}, not {digest}",
            "digest",
        )
    return [BetaStage.from_dict(r) for r in records if r.get("kind") == "stage"]


def write_operator(path: str, u: BandedUnitary, params: dict) -> None:
    """Columnar text export: header lines, then `col row re im` per entry.

    Sites are 1-based on the half line and signed on the full line.
    """
    geometry = u.geometry
    size = geometry.half_width if isinstance(geometry, FullLine) else geometry.n_dim
    sites = geometry.sites()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# geometry={geometry.kind} N={size} boundary={u.boundary}\n")
        f.write(f"# params={json.dumps(params, sort_keys=True)}\n")
        f.write("col row re im\n")
        for col in range(u.n_dim):
            for offset in OFFSETS:
                row = col + offset
                if not 0 <= row < u.n_dim:
                    continue
                value = complex(u.bands[offset + 2, col])
                f.write(f"{sites[col]} {sites[row]} {value.real!r} {value.imag!r}\n")


def read_operator(path: str) -> BandedUnitary:
    """Inverse of `write_operator`."""
    with open(path, "r", encoding="utf-8") as f:
        header = _parse_header(f.readline())
        params = json.loads(f.readline().partition("params=")[2])
        frame = pd.read_csv(f, sep=" ", float_precision="round_trip")
    size = int(header["N"])
    geometry = FullLine(size) if header["geometry"] == "full" else HalfLine(size)
    bands = np.zeros((len(OFFSETS), geometry.n_dim), dtype=complex)
    for col, row, re, im in frame.itertuples(index=False):
        c, r = geometry.index(int(col)), geometry.index(int(row))
        bands[r - c + 2, c] = complex(re, im)
    digest = params.get("digest", "")
    return BandedUnitary(geometry, bands, digest, header["boundary"])
