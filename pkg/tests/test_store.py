import json
import random

import pytest

from detvlm.core import ImageResult, RecordsError, RetrievalRecord, Source
from detvlm.store import append_results, load_results, result_from_json, result_to_json


def _result(image_id, *records):
    return ImageResult(image_id=image_id, records=tuple(records))


def _record(component, exists=1, state="N/A", confidence=0.9, source=Source.VLM, retries=0):
    return RetrievalRecord(
        component=component,
        exists=exists,
        state=state,
        confidence=confidence,
        source=source,
        retries_used=retries,
    )


def _sample_results():
    return [
        _result(
            "img_001",
            _record("chepai", exists=1, confidence=0.92, source=Source.DETECTOR),
            _record("sun_visor", exists=1, state="lowered", confidence=0.9),
        ),
        _result(
            "img_002",
            _record("chepai", exists=0, confidence=0.75, retries=1),
            _record("sun_visor", exists=0, confidence=0.5),
        ),
    ]


def test_round_trip_two_results(tmp_path):
    path = tmp_path / "records.jsonl"
    results = _sample_results()
    assert append_results(path, results) == 2
    loaded = load_results(path)
    assert list(loaded.results) == results
    assert loaded.skipped == 0


def test_load_empty_file(tmp_path):
    path = tmp_path / "records.jsonl"
    path.write_text("")
    assert load_results(path).results == ()


def test_missing_file_raises_records_error(tmp_path):
    with pytest.raises(RecordsError):
        load_results(tmp_path / "absent.jsonl")


def test_corrupted_line_lenient_skips_and_counts(tmp_path):
    path = tmp_path / "records.jsonl"
    results = [
        _result(f"img_{i:03d}", _record("chepai", exists=i % 2, confidence=0.8))
        for i in range(10)
    ]
    append_results(path, results)
    lines = path.read_text().splitlines()
    lines[4] = '{"image_id": "img_004", "records": [{"component"'
    path.write_text("\n".join(lines) + "\n")
    loaded = load_results(path, lenient=True)
    assert len(loaded.results) == 9
    assert loaded.skipped == 1
    assert all(result.image_id != "img_004" for result in loaded.results)


def test_corrupted_line_strict_reports_line_number(tmp_path):
    path = tmp_path / "records.jsonl"
    append_results(path, _sample_results())
    with open(path, "a", encoding="utf-8") as handle:
        handle.write("{broken\n")
    with pytest.raises(RecordsError, match="line 3"):
        load_results(path)


def test_rerun_supersedes_by_last_write_wins(tmp_path):
    path = tmp_path / "records.jsonl"
    first = _result("img_001", _record("chepai", exists=0, confidence=0.5))
    second = _result("img_001", _record("chepai", exists=1, confidence=0.9))
    append_results(path, [first])
    append_results(path, [second])
    loaded = load_results(path)
    assert len(loaded.results) == 1
    assert loaded.results[0] == second


def test_each_result_is_one_line(tmp_path):
    path = tmp_path / "records.jsonl"
    append_results(path, _sample_results())
    lines = [line for line in path.read_text().splitlines() if line]
    assert len(lines) == 2
    parsed = json.loads(lines[0])
    assert set(parsed) == {"image_id", "records"}
    assert set(parsed["records"][0]) == {
        "component", "exists", "state", "confidence", "source", "retries_used",
    }


def test_result_json_round_trip_random():
    rng = random.Random(5)
    states = ["N/A", "raised", "lowered", "unknown"]
    for _ in range(200):
        records = []
        for i in range(rng.randint(1, 5)):
            exists = rng.randint(0, 1)
            records.append(
                _record(
                    f"c{i}",
                    exists=exists,
                    state=rng.choice(states[1:]) if exists else "N/A",
                    confidence=round(rng.random(), 4),
                    source=rng.choice([Source.DETECTOR, Source.VLM]),
                    retries=rng.randint(0, 1),
                )
            )
        result = _result(f"img_{rng.randrange(1000)}", *records)
        assert result_from_json(result_to_json(result)) == result


def test_malformed_record_entry_names_context():
    with pytest.raises(RecordsError, match="line 9"):
        result_from_json(
            {"image_id": "x", "records": [{"component": "c"}]}, context="f: line 9"
        )
