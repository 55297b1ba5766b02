"""JSON-lines dataset ingestion with strict schemas.

Each record is one JSON object:

    {"system_ids": [...], "instruction_ids": [...],
     "vision": <variant>, "max_new_tokens": n}

where the vision variant is exactly one of

    {"inline": [[...], ...]}            encoder-space rows, given verbatim
    {"seed": n, "n_vis": n}             seeded pseudo-image
    {"noncontent": {"n_vis": n}}        constant contentless rows

`max_new_tokens` is optional (default 8). Unknown fields anywhere are
rejected, and parse errors carry the 1-based line number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import ModelWeights
from .sequence import (
    MultimodalSequence,
    VisionInput,
    build_sequence,
    empty_vision,
    inline_vision,
    make_noncontent_vision,
    make_seeded_vision,
)
from .validation import DatasetError

DEFAULT_MAX_NEW_TOKENS = 8


@dataclass(frozen=True)
class VisionSpec:
    """Unresolved vision variant; materialized once the model width is known."""

    kind: str  # "inline" | "seeded" | "noncontent"
    n_vis: int
    seed: int | None = None
    rows: tuple | None = None

    def materialize(self, dim: int) -> VisionInput:
        if self.n_vis == 0:
            return empty_vision(dim)
        if self.kind == "inline":
            return inline_vision(self.rows)
        if self.kind == "seeded":
            return make_seeded_vision(self.seed, self.n_vis, dim)
        return make_noncontent_vision(self.n_vis, dim)


@dataclass(frozen=True)
class Record:
    system_ids: tuple
    instruction_ids: tuple
    vision: VisionSpec
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS


def _id_list(value, key: str, line: int) -> tuple:
    if not isinstance(value, list) or any(
        not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in value
    ):
        raise DatasetError(f"{key} must be a list of nonnegative integers", line)
    return tuple(value)


def _count(value, key: str, line: int, minimum: int = 0) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise DatasetError(f"{key} must be an integer >= {minimum}", line)
    return value


def _parse_vision(value, line: int) -> VisionSpec:
    if not isinstance(value, dict):
        raise DatasetError("vision must be an object", line)
    keys = set(value)
    if keys == {"inline"}:
        rows = value["inline"]
        if not isinstance(rows, list) or any(not isinstance(r, list) for r in rows):
            raise DatasetError("inline vision must be a list of rows", line)
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise DatasetError("inline vision rows must share one width", line)
        for r in rows:
            for v in r:
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise DatasetError("inline vision entries must be numbers", line)
        return VisionSpec("inline", n_vis=len(rows), rows=tuple(map(tuple, rows)))
    if keys == {"seed", "n_vis"}:
        return VisionSpec(
            "seeded",
            n_vis=_count(value["n_vis"], "n_vis", line, minimum=1),
            seed=_count(value["seed"], "seed", line),
        )
    if keys == {"noncontent"}:
        inner = value["noncontent"]
        if not isinstance(inner, dict) or set(inner) != {"n_vis"}:
            raise DatasetError('noncontent vision must be {"n_vis": n}', line)
        return VisionSpec("noncontent", n_vis=_count(inner["n_vis"], "n_vis", line, minimum=1))
    raise DatasetError(f"unrecognized vision variant with keys {sorted(keys)}", line)


def parse_record(doc, line: int = 0) -> Record:
    if not isinstance(doc, dict):
        raise DatasetError("record must be a JSON object", line)
    allowed = {"system_ids", "instruction_ids", "vision", "max_new_tokens"}
    unknown = set(doc) - allowed
    if unknown:
        raise DatasetError(f"unknown record fields: {sorted(unknown)}", line)
    missing = {"system_ids", "instruction_ids", "vision"} - set(doc)
    if missing:
        raise DatasetError(f"missing record fields: {sorted(missing)}", line)
    return Record(
        system_ids=_id_list(doc["system_ids"], "system_ids", line),
        instruction_ids=_id_list(doc["instruction_ids"], "instruction_ids", line),
        vision=_parse_vision(doc["vision"], line),
        max_new_tokens=_count(
            doc.get("max_new_tokens", DEFAULT_MAX_NEW_TOKENS), "max_new_tokens", line
        ),
    )


def load_records(path: str | Path) -> list[Record]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", line_no) from exc
            records.append(parse_record(doc, line_no))
    if not records:
        raise DatasetError(f"no records found in {path}")
    return records


def record_sequence(record: Record, weights: ModelWeights) -> MultimodalSequence:
    """Resolve the vision variant against the model and build the sequence."""
    vision = record.vision.materialize(weights.config.vision_embed_dim)
    return build_sequence(record.system_ids, vision, record.instruction_ids, weights)
