"""Append-only JSON Lines persistence for image results.

Each line is one complete image result, written in a single call so a crash
can never leave a torn record. Re-indexed images supersede older lines by
last-write-wins at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path
from typing import Any, Iterable

from .core import ImageResult, RecordsError, RetrievalRecord, Source


def result_to_json(result: ImageResult) -> dict[str, Any]:
    return {
        "image_id": result.image_id,
        "records": [
            {
                "component": record.component,
                "exists": record.exists,
                "state": record.state,
                "confidence": record.confidence,
                "source": record.source.value,
                "retries_used": record.retries_used,
            }
            for record in result.records
        ],
    }


def result_from_json(obj: Any, context: str = "") -> ImageResult:
    where = f"{context}: " if context else ""
    if not isinstance(obj, dict) or "image_id" not in obj:
        raise RecordsError(f"{where}result line needs an image_id")
    raw_records = obj.get("records")
    if not isinstance(raw_records, list):
        raise RecordsError(f"{where}result line needs a records list")
    records = []
    for entry in raw_records:
        try:
            records.append(
                RetrievalRecord(
                    component=entry["component"],
                    exists=entry["exists"],
                    state=entry["state"],
                    confidence=entry["confidence"],
                    source=Source(entry["source"]),
                    retries_used=entry["retries_used"],
                )
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise RecordsError(f"{where}malformed record entry: {exc}") from exc
    return ImageResult(image_id=obj["image_id"], records=tuple(records))


def append_results(path: str | Path, results: Iterable[ImageResult]) -> int:
    """Append results to a records file, one line per image. Returns the
    number of lines written."""
    written = 0
    try:
        with open(path, "a", encoding="utf-8") as handle:
            for result in results:
                line = json.dumps(
                    result_to_json(result), ensure_ascii=False, separators=(",", ":")
                )
                handle.write(line + "\n")
                handle.flush()
                written += 1
    except OSError as exc:
        raise RecordsError(f"cannot write records to {path}: {exc}") from exc
    return written


@dataclass(frozen=True)
class LoadedRecords:
    """Deduplicated results plus the count of lines skipped in lenient mode."""

    results: tuple[ImageResult, ...]
    skipped: int = 0


def load_results(path: str | Path, lenient: bool = False) -> LoadedRecords:
    """Read a records file back into image results.

    Malformed lines abort with the offending line number, unless ``lenient``
    is set, in which case they are skipped and counted. Duplicate image ids
    keep their first position but take the content of the last line.
    """
    by_image: dict[str, ImageResult] = {}
    skipped = 0
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise RecordsError(f"cannot read records from {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                result = result_from_json(obj, context=f"{path}: line {lineno}")
            except RecordsError:
                if lenient:
                    skipped += 1
                    continue
                raise
            except json.JSONDecodeError as exc:
                if lenient:
                    skipped += 1
                    continue
                raise RecordsError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            by_image[result.image_id] = result
    return LoadedRecords(results=tuple(by_image.values()), skipped=skipped)
