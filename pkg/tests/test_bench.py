import csv

import pytest

import shakti.bench as bench
from conftest import tiny_config
from shakti import tokenizer as tok
from shakti.bench import CSV_COLUMNS, PROTOCOL, append_csv, read_csv, run_bench, synth_prompt
from shakti.cli import main
from shakti.model import random_weights
from shakti.store import write_model


@pytest.fixture
def model_file(tmp_path):
    cfg = tiny_config()
    return write_model(tmp_path / "m.skt", cfg, random_weights(cfg, 0, std=0.2))


def test_synth_prompt():
    p = synth_prompt(50)
    assert len(p) == 50 and p[0] == tok.BOS
    assert p == synth_prompt(50) and synth_prompt(1) == [tok.BOS]
    with pytest.raises(ValueError):
        synth_prompt(0)


def test_rows_and_summary(model_file):
    rows = run_bench(model_file, 12, 5, 3, "laptop")
    assert len(rows) == 4
    assert [r.repeat for r in rows] == ["1", "2", "3", PROTOCOL]
    for r in rows:
        assert r.decode_tps > 0 and r.prefill_tps > 0
        assert (r.prompt_tokens, r.gen_tokens, r.device_label, r.format) == (12, 5, "laptop", "F32")
        assert r.model_file_bytes == model_file.stat().st_size
    runs, summary = rows[:3], rows[3]
    dec = sum(r.decode_seconds for r in runs)
    assert summary.decode_tps == pytest.approx(5 * 3 / dec)
    assert summary.prefill_tps == pytest.approx(12 * 3 / sum(r.prefill_seconds for r in runs))


def test_warmup_excluded(model_file, monkeypatch):
    calls = []
    real = bench.timed_run

    def spy(*a):
        out = real(*a)
        calls.append(out)
        return out

    monkeypatch.setattr(bench, "timed_run", spy)
    rows = run_bench(model_file, 8, 3, 2)
    assert len(calls) == 3
    assert [(r.prefill_seconds, r.decode_seconds) for r in rows[:2]] == calls[1:]


def test_timed_run_generates_exactly_m(model_file, monkeypatch):
    from shakti.store import open_model
    model = open_model(model_file).load_model()
    steps = []
    real = model.decode_step
    monkeypatch.setattr(model, "decode_step", lambda t, c: steps.append(t) or real(t, c))
    bench.timed_run(model, synth_prompt(6), 7)
    assert len(steps) == 7 and tok.EOS not in steps


def test_invalid_arguments(model_file):
    with pytest.raises(ValueError):
        run_bench(model_file, 0, 1, 1)
    with pytest.raises(ValueError, match="max_positions"):
        run_bench(model_file, 500, 100, 1)


def test_csv_schema_and_parse_back(model_file, tmp_path):
    path = tmp_path / "out.csv"
    append_csv(path, run_bench(model_file, 8, 4, 3, "box a"))
    append_csv(path, run_bench(model_file, 8, 4, 1, "box b"))
    with open(path, newline="") as f:
        lines = list(csv.reader(f))
    assert lines[0] == CSV_COLUMNS
    assert len(lines) == 1 + 4 + 2  # header written once
    recs = read_csv(path)
    assert [r["device_label"] for r in recs] == ["box a"] * 4 + ["box b"] * 2
    assert all(r["decode_tps"] > 0 and r["gen_tokens"] == 4 for r in recs)
    assert recs[3]["repeat"] == PROTOCOL


def test_read_csv_rejects_foreign_schema(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(p)


def test_cli_bench(model_file, tmp_path, capsys):
    path = tmp_path / "b.csv"
    assert main(["bench", str(model_file), "--prompt-tokens", "8", "--gen-tokens", "4", "--repeat", "3",
                 "--device-label", "ci", "--csv", str(path)]) == 0
    assert len(read_csv(path)) == 4
    assert capsys.readouterr().out.count("decode_tps=") == 4


def test_cli_bench_unwritable_csv(model_file, tmp_path):
    assert main(["bench", str(model_file), "--repeat", "1", "--csv", str(tmp_path / "no" / "dir.csv")]) == 3
    assert main(["bench", str(model_file), "--repeat", "1", "--csv", str(tmp_path)]) == 3
