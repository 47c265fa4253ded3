import csv
import io
import json
import random

import pytest

from srcr.exceptions import DataError
from srcr.metrics import CompressionConfig
from srcr.results import (
    ScoreDataset,
    dump_scores,
    emit_plot_data,
    emit_table,
    load_scores,
    paper_tables_dir,
    retention_report,
)
from fractions import Fraction as F


@pytest.fixture(scope="module")
def fixtures():
    return load_scores(paper_tables_dir())


def test_fixture_dataset_shape(fixtures):
    assert fixtures.models == ["llama", "mistral"]
    assert fixtures.get("llama", CompressionConfig(F(1, 4), 4), "mean").score == 31.5


def test_report_examples(fixtures):
    rep = retention_report(fixtures, "mistral")
    assert round(rep.find(CompressionConfig(0, 3)).sr, 4) == 0.7191
    base = rep.find(CompressionConfig())
    assert all(r == 1 for r, _ in base.retention.values()) and base.sr == 1 and base.srcr.srcr == 0
    llama = retention_report(fixtures, "llama", "mean").find(CompressionConfig(F(1, 4), 4))
    assert round(llama.sr_mean, 4) == 0.8182 and round(llama.srcr.srcr, 4) == 0.2045


def test_report_is_order_independent(fixtures):
    recs = list(fixtures.records)
    random.Random(0).shuffle(recs)
    a = emit_table(retention_report(fixtures, "llama"))
    b = emit_table(retention_report(ScoreDataset(recs), "llama"))
    assert a == b == emit_table(retention_report(fixtures, "llama"))


def test_mean_cells_are_flagged(fixtures):
    flagged = {(r.label) for r in retention_report(fixtures, "llama").rows if r.mean_mismatch}
    assert "s=0;q=4b [nf4]" in flagged


def test_table_csv_round_trip(fixtures):
    rep = retention_report(fixtures, "llama")
    rows = list(csv.DictReader(io.StringIO(emit_table(rep, "csv"))))
    assert len(rows) == len(rep.rows)
    for row, r in zip(rows, rep.rows):
        assert float(row["TCr"]) == round(float(r.tcr), 4)
        assert float(row["Sr2"]) == round(r.sr, 4)
        assert float(row["SrCr"]) == round(r.srcr.srcr, 4)
        for t, (v, _) in r.retention.items():
            assert float(row[f"R_{t}"]) == round(v, 4)


def test_table_rows_sorted_by_rate(fixtures):
    rep = retention_report(fixtures, "mistral")
    rates = [r.tcr for r in rep.rows]
    assert rates == sorted(rates)


def test_single_row_table(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("model,sparsity,bits,pattern,task,score,stderr\nm,0,16,none,bbh,50,1\n")
    text = emit_table(retention_report(load_scores(path), "m"))
    assert text.count("\n") == 3
    assert "| m | s=0;q=16b | 0.0000 | 1.0000 | 1.0000 | 0.0000 |" in text


def test_plot_bundles(fixtures):
    rep = retention_report(fixtures, "llama")
    bars = emit_plot_data(rep, "retention_bars")
    assert len(bars.points) == len(rep.rows) * (len(rep.tasks) + 1)
    assert bars.to_csv().count("\n") == len(bars.points) + 1
    assert bars.to_svg().startswith("<svg")
    pairs = emit_plot_data(rep, "joint_vs_quant")
    groups = {g for g, _, _ in pairs.points}
    assert "81.25%" in groups
    assert ("81.25%", "s=0;q=3b") in {(g, s) for g, s, _ in pairs.points}
    srcr = emit_plot_data(rep, "srcr_bars")
    assert {"SrCr_p", "SrCr_q", "SrCr_j", "SrCr_est"} <= {s for _, s, _ in srcr.points}
    with pytest.raises(DataError):
        emit_plot_data(rep, "pie")


def test_plot_requires_pair_partner(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("model,sparsity,bits,pattern,task,score,stderr\n"
                    "m,0,16,none,bbh,50,1\nm,1/4,4,unstructured,bbh,40,1\n")
    rep = retention_report(load_scores(path), "m")
    with pytest.raises(DataError, match="3-bit"):
        emit_plot_data(rep, "joint_vs_quant")


def test_empty_report_errors():
    from srcr.results import RetentionReport
    with pytest.raises(DataError):
        emit_plot_data(RetentionReport([]), "retention_bars")
    with pytest.raises(DataError):
        emit_table(RetentionReport([]))


def _write(path, body):
    path.write_text("model,sparsity,bits,pattern,task,score,stderr\n" + body)
    return path


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_scores(_write(tmp_path / "e.csv", ""))
    with pytest.raises(DataError, match="105"):
        load_scores(_write(tmp_path / "r.csv", "m,0,16,none,bbh,105,1\n"))
    with pytest.raises(DataError, match=":3"):
        load_scores(_write(tmp_path / "p.csv", "m,0,16,none,bbh,50,1\nm,x,16,none,bbh,50,1\n"))
    with pytest.raises(DataError, match="baseline"):
        load_scores(_write(tmp_path / "b.csv", "m,1/2,16,unstructured,bbh,50,1\n"))
    with pytest.raises(DataError, match="duplicate"):
        load_scores(_write(tmp_path / "d.csv", "m,0,16,none,bbh,50,1\nm,0,16,none,bbh,50,1\n"))
    with pytest.raises(DataError):
        load_scores(tmp_path / "missing.csv")


def test_directory_merge_rules(tmp_path):
    a = tmp_path / "a"
    a.mkdir()
    _write(a / "1.csv", "m,0,16,none,bbh,50,1\n")
    _write(a / "2.csv", "m,0,16,none,bbh,50,1\nm,0,4,none,bbh,40,1\n")
    assert len(load_scores(a)) == 2
    _write(a / "3.csv", "m,0,16,none,bbh,51,1\n")
    with pytest.raises(DataError, match="conflicting"):
        load_scores(a)


def test_json_round_trip(tmp_path, fixtures):
    path = tmp_path / "s.json"
    path.write_text(dump_scores(fixtures, "json"))
    again = load_scores(path)
    assert {r.key: (r.score, r.stderr) for r in again.records} == \
        {r.key: (r.score, r.stderr) for r in fixtures.records}
    assert emit_table(retention_report(again, "llama")) == emit_table(retention_report(fixtures, "llama"))
    items = json.loads(path.read_text())
    assert {"model", "config", "task", "score", "stderr"} <= set(items[0])


def test_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('[{"model": "m"}]')
    with pytest.raises(DataError):
        load_scores(p)
    p.write_text("{")
    with pytest.raises(DataError, match="line 1"):
        load_scores(p)


def test_fixture_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SRCR_FIXTURES", str(tmp_path))
    assert paper_tables_dir() == tmp_path / "paper_tables"
