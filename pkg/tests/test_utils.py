import json
import pytest
import numpy as np
from src.utils import Result, check_file_integrity, load_png, save_png, staged_output, to_uint8, write_json

INTEGRITY_TESTS = [
    ('{"name": "a", "frames": []}', ("name", "frames"), None, Result.VALID),
    ('{"name": "a"}', ("name", "frames"), None, Result.ERROR_UNREADABLE_FILE),
    ('{"name": "a"', (), None, Result.ERROR_UNREADABLE_FILE),
    ('[1, 2]', (), None, Result.ERROR_UNREADABLE_FILE),
    ('{"version": 1}', (), 2, Result.ERROR_VERSION_MISMATCH),
    ('{"version": 2}', (), 2, Result.VALID),
]


@pytest.mark.parametrize("contents, fields, version, expected", INTEGRITY_TESTS)
def test_check_file_integrity(tmp_path, contents, fields, version, expected):
    file_location = tmp_path / "data.json"
    file_location.write_text(contents)
    result, _ = check_file_integrity(str(file_location), fields, version)
    assert result == expected


def test_check_file_integrity_missing_file(tmp_path):
    assert check_file_integrity(str(tmp_path / "missing.json")) == (Result.ERROR_MISSING_FILE, {})


def test_write_json(tmp_path):
    file_location = tmp_path / "nested" / "data.json"
    write_json(str(file_location), {"a": [1, 2]})
    assert json.loads(file_location.read_text()) == {"a": [1, 2]}
    # Assert that no temporary files are left behind
    assert [path.name for path in file_location.parent.iterdir()] == ["data.json"]


def test_staged_output_replaces_target(tmp_path):
    target = tmp_path / "out"
    target.mkdir()
    (target / "old.txt").write_text("old")
    with staged_output(str(target)) as staging:
        with open(f"{staging}/new.txt", "w", encoding="utf-8") as new_file:
            new_file.write("new")
    assert sorted(path.name for path in target.iterdir()) == ["new.txt"]


def test_staged_output_discards_on_error(tmp_path):
    target = tmp_path / "out"
    target.mkdir()
    (target / "old.txt").write_text("old")
    with pytest.raises(RuntimeError):
        with staged_output(str(target)):
            raise RuntimeError("interrupted")
    # Assert that the previous output is untouched and the staging folder is gone
    assert sorted(path.name for path in tmp_path.iterdir()) == ["out"]
    assert (target / "old.txt").read_text() == "old"


def test_png_round_trip(tmp_path):
    image = np.random.default_rng(0).uniform(size=(5, 7, 3))
    save_png(str(tmp_path / "image.png"), to_uint8(image))
    assert np.array_equal(load_png(str(tmp_path / "image.png")), to_uint8(image) / 255.0)
    assert to_uint8(np.array([-0.5, 0.5, 1.5])).tolist() == [0, 128, 255]
