import csv

import numpy as np
import pytest

from optb.cli import main

FAST = ["--hidden-layers", "3", "--width", "16", "--epochs", "2", "--n-train", "320", "--n-test", "80",
        "--batch-size", "32"]


@pytest.fixture
def raw_images(tmp_path, rng):
    paths = []
    for i in range(9):
        p = tmp_path / f"img{i}.raw"
        p.write_bytes(rng.integers(0, 256, 4 * 4 * 3, dtype=np.uint8).tobytes())
        paths.append(p)
    return paths


def rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def test_encode_decode_byte_identical(tmp_path, raw_images):
    out = tmp_path / "b.optb"
    args = [str(p) for p in raw_images[:8]]
    assert main(["encode", *args, "--shape", "4,4,3", "--mode", "exact64", "-o", str(out)]) == 0
    assert main(["decode", str(out), "-o", str(tmp_path / "dec")]) == 0
    for i, p in enumerate(raw_images[:8]):
        assert (tmp_path / "dec" / f"b_{i}.raw").read_bytes() == p.read_bytes()


def test_capacity_error_exit_code(tmp_path, raw_images, capsys):
    args = [str(p) for p in raw_images]
    code = main(["encode", *args, "--shape", "4,4,3", "--mode", "exact64", "-o", str(tmp_path / "x.optb")])
    assert code == 2
    assert "exact64" in capsys.readouterr().err


def test_bad_magic(tmp_path, capsys):
    bad = tmp_path / "bad.optb"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["decode", str(bad), "-o", str(tmp_path)]) == 2
    assert "magic" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--ed"],
        ["train", "--baseline", "--mp"],
        ["train", "--encode-mode", "exact32"],
        ["train", "--lr", "0"],
        ["frobnicate"],
        ["bench", "--pipelines", "B,Q"],
    ],
)
def test_usage_errors(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_train_writes_config_header_and_timing(tmp_path, monkeypatch):
    monkeypatch.setenv("OPTB_SEED", "7")
    m, t = tmp_path / "m.csv", tmp_path / "t.csv"
    assert main(["train", *FAST, "--ed", "--encode-mode", "exact128", "--sc", "auto:2", "--metrics", str(m),
                 "--timing", str(t)]) == 0
    text = m.read_text()
    assert "# seed=7" in text and "# pipeline=E-D+S-C" in text and "# checkpoints=" in text
    table = rows(m)
    assert table[0][:3] == ["epoch", "loss", "accuracy"] and len(table) == 3
    assert rows(t)[0] == ["epoch", "prepare_ms", "train_ms", "overlap_ms"]


def test_train_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["train", *FAST, "--metrics", str(a)]) == 0
    assert main(["train", *FAST, "--metrics", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_numeric_failure_exit_code(tmp_path):
    assert main(["train", *FAST, "--lr", "1e9", "--metrics", str(tmp_path / "m.csv")]) == 3


def test_bench_single_pipeline(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", *FAST, "--pipelines", "S-C", "-o", str(out)]) == 0
    table = rows(out)
    assert len(table) == 2 and table[1][0] == "S-C"


def test_missing_data_file(tmp_path):
    assert main(["train", *FAST, "--data", str(tmp_path / "none.bin"), "--metrics", str(tmp_path / "m")]) == 2
