import os

import pytest

from editflow import EditFlowPipeline
from editflow.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from editflow.sampler import GenerationTrace, TraceStep
from editflow.schemas.config_schemas import coupling_toy_preset
from editflow.schemas.record_schemas import HeatmapRow, MetricsRecord, TraceRecord
from editflow.structures import Vocab, delete, insert, substitute
from editflow.utils.io_ops import RecordWriter, make_header, read_heatmap_csv, read_records, write_heatmap_csv

SMALL = [
    "--set", "model.max_length=4",
    "--set", "data.source_length=2",
    "--set", "data.target_length=2",
    "--set", "train.steps=5",
    "--set", "train.batch_size=4",
    "--set", "sampler.steps=10",
]


@pytest.fixture(autouse=True)
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("EDITFLOW_OUTPUT_DIR", str(tmp_path / "out"))
    monkeypatch.delenv("EDITFLOW_CACHE_DIR", raising=False)
    return tmp_path


@pytest.fixture
def checkpoint(workspace):
    path = str(workspace / "model.ckpt")
    assert main(["train", *SMALL, "--seed", "3", "--out", path]) == EXIT_OK
    return path


def test_train_writes_checkpoint_and_metrics(checkpoint):
    header, records = read_records(os.path.splitext(checkpoint)[0] + ".metrics.ndjson")
    assert header.kind == "metrics" and header.seed == 3
    metrics = [MetricsRecord.model_validate(r) for r in records]
    assert [m.step for m in metrics] == list(range(5))


def test_training_is_reproducible(checkpoint, workspace):
    again = str(workspace / "again.ckpt")
    assert main(["train", *SMALL, "--seed", "3", "--out", again]) == EXIT_OK
    with open(checkpoint, "rb") as a, open(again, "rb") as b:
        assert a.read() == b.read()


def test_train_defaults_to_the_output_dir(workspace, capsys):
    assert main(["train", *SMALL]) == EXIT_OK
    expected = os.path.join(str(workspace / "out"), "checkpoint.ckpt")
    assert capsys.readouterr().out.strip() == expected
    assert os.path.exists(expected)


def test_train_reverse(workspace):
    out = str(workspace / "fwd.ckpt")
    assert main(["train", *SMALL, "--set", "run.train_reverse=true", "--out", out]) == EXIT_OK
    assert os.path.exists(str(workspace / "fwd.reverse.ckpt"))


def test_sample_with_no_traces(checkpoint, workspace):
    out = str(workspace / "none.ndjson")
    assert main(["sample", *SMALL, "--checkpoint", checkpoint, "--count", "0", "--out", out]) == EXIT_OK
    header, records = read_records(out)
    assert header.kind == "traces"
    assert records == []


def test_sample_traces(checkpoint, workspace):
    out = str(workspace / "traces.ndjson")
    assert main(["sample", *SMALL, "--checkpoint", checkpoint, "--count", "3", "--out", out]) == EXIT_OK
    _, records = read_records(out)
    traces = [TraceRecord.model_validate(r) for r in records]
    assert [t.trace for t in traces] == [0, 1, 2]
    for t in traces:
        assert len(t.steps) == 10
        assert t.final == t.steps[-1].sequence
        assert t.final[0] == 2 and len(t.final) - 1 <= 4
        assert t.text is not None and len(t.text) == len(t.final) - 1


def test_sampling_is_reproducible(checkpoint, workspace):
    paths = [str(workspace / f"t{k}.ndjson") for k in range(2)]
    for path in paths:
        assert main(["sample", *SMALL, "--checkpoint", checkpoint, "--count", "4", "--seed", "8", "--out", path]) == EXIT_OK
    assert read_records(paths[0])[1] == read_records(paths[1])[1]


def test_corrector_without_reverse_checkpoint_fails(checkpoint):
    code = main(["sample", *SMALL, "--checkpoint", checkpoint, "--count", "1", "--set", "sampler.alpha=1"])
    assert code == EXIT_FAILED


def test_coupling_heatmap(checkpoint, workspace, capsys):
    out = str(workspace / "heat.csv")
    assert main(["coupling-heatmap", *SMALL, "--checkpoint", checkpoint, "--count", "6", "--out", out]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert printed == [out, str(workspace / "heat.reference.csv")]

    with open(out, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0].startswith("# {")
    assert lines[1] == "x0,x1,count,prob"

    header, rows = read_heatmap_csv(out)
    assert header.kind == "heatmap"
    assert len(rows) == 4 * 5
    for x0 in {r.x0 for r in rows}:
        mine = [r for r in rows if r.x0 == x0]
        assert sum(r.count for r in mine) == 6
        assert sum(r.prob for r in mine) == pytest.approx(1.0)

    _, reference = read_heatmap_csv(printed[1])
    assert len(reference) == 16
    assert all(r.prob == pytest.approx(0.25) for r in reference)


def test_heatmap_needs_samples(checkpoint):
    assert main(["coupling-heatmap", *SMALL, "--checkpoint", checkpoint, "--count", "0"]) == EXIT_USAGE


def test_missing_checkpoint_is_a_usage_error(workspace):
    assert main(["sample", *SMALL, "--checkpoint", str(workspace / "nope.ckpt")]) == EXIT_USAGE


def test_vocabulary_mismatch_is_rejected(checkpoint):
    code = main([
        "sample", *SMALL, "--checkpoint", checkpoint,
        "--set", "data.vocab_size=3", "--set", "model.vocab_size=3",
    ])
    assert code == EXIT_FAILED


@pytest.mark.parametrize("argv", [
    ["verify", "--suite", "nope"],
    ["train", "--set", "train.bogus=1"],
    ["train", "--set", "train.localized=true"],
    ["train", "--set", "steps"],
    ["train", "--preset", "nope"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_verify(workspace, capsys):
    out = str(workspace / "report.txt")
    assert main(["verify", "--suite", "cfg-identities", "--samples", "5", "--out", out]) == EXIT_OK
    assert capsys.readouterr().out.strip() == out
    assert os.path.exists(str(workspace / "report.json"))


@pytest.mark.slow
def test_coupling_toy_preset_end_to_end(workspace):
    ckpt = str(workspace / "coupling_toy.ckpt")
    assert main(["train", "--preset", "coupling_toy", "--seed", "0", "--out", ckpt]) == EXIT_OK
    _, records = read_records(os.path.splitext(ckpt)[0] + ".metrics.ndjson")
    losses = [r["loss"] for r in records]
    assert sum(losses[-100:]) / 100 < sum(losses[:100]) / 100

    out = str(workspace / "coupling_toy.csv")
    assert main(["coupling-heatmap", "--preset", "coupling_toy", "--checkpoint", ckpt, "--count", "200", "--out", out]) == EXIT_OK
    _, rows = read_heatmap_csv(out)
    assert len(rows) == 16 * 17
    _, reference = read_heatmap_csv(os.path.splitext(out)[0] + ".reference.csv")
    assert all(r.prob == pytest.approx(1 / 16) for r in reference)

    count = 2000
    pipe = EditFlowPipeline(coupling_toy_preset(), output_dir=str(workspace / "heat"))
    try:
        _, _, summary = pipe.coupling_heatmap(checkpoint=ckpt, count=count)
    finally:
        pipe.close_cache()
    assert summary.marginal_tv() <= 0.05
    ab = Vocab(size=2, names=("A", "B"))
    aaaa, bbbb = ab.encode("AAAA"), ab.encode("BBBB")
    assert summary.conditional(aaaa, aaaa) / max(summary.conditional(aaaa, bbbb), 1 / count) >= 5
    assert summary.mean_distance < summary.coupling_mean_distance


# --- Output formats ---

DATA = os.path.join(os.path.dirname(__file__), "data")
ZERO_HASH = "0" * 64


def _golden(name: str) -> bytes:
    with open(os.path.join(DATA, name), "rb") as f:
        return f.read()


def test_heatmap_csv_matches_golden_file(workspace):
    rows = [
        HeatmapRow(x0="AB", x1="BA", count=3, prob=0.75),
        HeatmapRow(x0="AB", x1="other", count=1, prob=0.25),
        HeatmapRow(x0="", x1="AB", count=0, prob=0.0),
    ]
    path = write_heatmap_csv(str(workspace / "heat.csv"), rows, make_header("heatmap", ZERO_HASH, 0))
    with open(path, "rb") as f:
        assert f.read() == _golden("heatmap_golden.csv")
    header, parsed = read_heatmap_csv(path)
    assert header.seed == 0 and parsed == rows


def test_trace_stream_matches_golden_file(workspace):
    trace = GenerationTrace((2, 0), [
        TraceStep(0, 0.0, [insert(0, 1)], (2, 1, 0)),
        TraceStep(1, 0.5, [substitute(1, 0), delete(2)], (2, 0)),
    ])
    assert trace.replay() == trace.final
    path = str(workspace / "traces.ndjson")
    with RecordWriter(path, make_header("traces", ZERO_HASH, 7)) as writer:
        writer.write(trace.to_record(0, Vocab(size=2, names=("A", "B"))))
    with open(path, "rb") as f:
        assert f.read() == _golden("traces_golden.ndjson")
