import json

import numpy as np
import pytest

from spikingdd.checkpoint import save_checkpoint
from spikingdd.cli import main
from spikingdd.events import EventStream, read_events, write_events
from spikingdd.evsim import write_pgm
from spikingdd.network import spiking_dd

SYNTH = ["--n-per-class", "3", "--width", "64", "--height", "48", "--duration-us", "200000"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-synth", "-o", str(d), "--seed", "1", *SYNTH]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("model") / "m.sdd"
    assert main(["train", str(dataset), "-o", str(ckpt), "--epochs", "2", "--deterministic"]) == 0
    return ckpt


# ------------------------------------------------------------------ simulate


def test_simulate_identical_frames(tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(4):
        write_pgm(np.full((6, 8), 0.5), frames / f"{i:03d}.pgm")
    code, out, _ = run(capsys, "simulate", frames, "--fps", 100, "-o", tmp_path / "ev.csv")
    assert code == 0
    assert json.loads(out)["events"] == 0
    s = read_events(tmp_path / "ev.csv")
    assert len(s) == 0 and s.geometry == (8, 6)
    assert (tmp_path / "ev.csv.run.json").is_file()


def test_simulate_round_trip_and_overwrite(tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    rng = np.random.default_rng(0)
    for i in range(5):
        write_pgm(rng.random((6, 8)), frames / f"{i:03d}.pgm")
    out_path = tmp_path / "ev.bin"
    code, out, _ = run(capsys, "simulate", frames, "--fps", 50, "-o", out_path)
    assert code == 0
    s = read_events(out_path, "bin")
    assert len(s) == json.loads(out)["events"] > 0
    write_events(s, tmp_path / "copy.bin", "bin")
    assert (tmp_path / "copy.bin").read_bytes() == out_path.read_bytes()
    assert run(capsys, "simulate", frames, "--fps", 50, "-o", out_path)[0] == 5
    assert run(capsys, "simulate", frames, "--fps", 50, "-o", out_path, "--overwrite")[0] == 0


def test_simulate_missing_dir(tmp_path, capsys):
    code, out, err = run(capsys, "simulate", tmp_path / "missing", "--fps", 30, "-o", tmp_path / "e.csv")
    assert code == 3 and out == "" and "missing" in err


def test_simulate_bad_threshold(tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(2):
        write_pgm(np.full((2, 2), 0.5), frames / f"{i}.pgm")
    code, _, _ = run(capsys, "simulate", frames, "--fps", 30, "-o", tmp_path / "e.csv", "--contrast-threshold", -1)
    assert code == 2


# ------------------------------------------------------------------ gen-synth


def test_gen_synth_layout(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["streams"]) == 6
    assert len(list((dataset / "streams").glob("*.bin"))) == 6
    assert (dataset / "run.json").is_file()


def test_gen_synth_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-synth", "-o", tmp_path / name, "--seed", 4, *SYNTH)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        if rel.name == "run.json":
            continue
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_gen_synth_config_file_and_errors(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"width": 32, "height": 24, "n_streams_per_class": 1, "stream_duration_us": 50000}))
    code, out, _ = run(capsys, "gen-synth", "--config", cfg, "-o", tmp_path / "d", "--n-per-class", 2)
    assert code == 0 and json.loads(out)["streams"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "gen-synth", "--config", bad, "-o", tmp_path / "e")[0] == 2
    bad.write_text(json.dumps({"colour": "red"}))
    assert run(capsys, "gen-synth", "--config", bad, "-o", tmp_path / "e")[0] == 2
    assert run(capsys, "gen-synth", "--config", cfg, "-o", tmp_path / "d")[0] == 5


# ------------------------------------------------------------------ train


def test_train_zero_epochs(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "train", dataset, "-o", tmp_path / "m.sdd", "--epochs", 0)
    assert code == 0
    assert json.loads(out)["epochs"] == 0
    assert (tmp_path / "m.metrics.jsonl").read_text() == ""
    assert (tmp_path / "m.sdd").stat().st_size > 0


def test_train_deterministic_twice(dataset, tmp_path, capsys):
    for name in ("a", "b"):
        argv = ["train", dataset, "-o", tmp_path / f"{name}.sdd", "--epochs", 2, "--deterministic", "--seed", 7]
        assert run(capsys, *argv)[0] == 0
    assert (tmp_path / "a.metrics.jsonl").read_bytes() == (tmp_path / "b.metrics.jsonl").read_bytes()
    assert (tmp_path / "a.sdd").read_bytes() == (tmp_path / "b.sdd").read_bytes()
    rows = [json.loads(line) for line in (tmp_path / "a.metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and "wall_time_s" not in rows[0]


def test_train_default_epochs(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "train", dataset, "-o", tmp_path / "m.sdd")
    assert code == 0
    assert len((tmp_path / "m.metrics.jsonl").read_text().splitlines()) == 30
    manifest = json.loads((tmp_path / "m.sdd.run.json").read_text())
    assert manifest["config"]["optim"]["epochs"] == 30 and manifest["command"] == "train"


def test_train_errors(dataset, tmp_path, capsys):
    assert run(capsys, "train", tmp_path / "none", "-o", tmp_path / "m.sdd")[0] == 3
    (tmp_path / "empty").mkdir()
    assert run(capsys, "train", tmp_path / "empty", "-o", tmp_path / "m.sdd")[0] == 2
    assert run(capsys, "train", dataset, "-o", tmp_path / "m.sdd", "--batch-size", 0)[0] == 2
    assert run(capsys, "train", dataset, "-o", tmp_path / "m.sdd", "--epochs", 0)[0] == 0
    assert run(capsys, "train", dataset, "-o", tmp_path / "m.sdd", "--epochs", 0)[0] == 5


# ------------------------------------------------------------------ eval / infer / inspect


def test_eval_report(trained, dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", trained, dataset, "--report", tmp_path / "r.json")
    assert code == 0
    report = json.loads(out)
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["segments"] == len(report["predictions"]) == 6 * 6
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_eval_corrupt_checkpoint(trained, dataset, tmp_path, capsys):
    raw = bytearray(trained.read_bytes())
    raw[40] ^= 0xFF
    bad = tmp_path / "bad.sdd"
    bad.write_bytes(bytes(raw))
    assert run(capsys, "eval", bad, dataset)[0] == 4


def test_eval_empty_dataset(trained, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "eval", trained, tmp_path / "empty")[0] == 2


def test_infer_matches_eval(trained, dataset, capsys):
    _, out, _ = run(capsys, "eval", trained, dataset)
    preds = json.loads(out)["predictions"]
    got = []
    for path in sorted((dataset / "streams").glob("*.bin")):
        code, out, _ = run(capsys, "infer", trained, path)
        assert code == 0
        lines = [json.loads(line) for line in out.splitlines()]
        assert [d["segment"] for d in lines] == list(range(len(lines)))
        assert all(len(d["rates"]) == 2 and d["class"] in (0, 1) for d in lines)
        got += [d["class"] for d in lines]
    assert got == preds


def test_infer_short_stream(trained, tmp_path, capsys):
    write_events(EventStream.empty(64, 48, 20_000), tmp_path / "short.csv")
    code, out, err = run(capsys, "infer", trained, tmp_path / "short.csv")
    assert code == 0 and out == "" and "0 segments" in err


def test_infer_malformed_events(trained, tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("64,48,1000\n1,2,3\n")
    assert run(capsys, "infer", trained, tmp_path / "bad.csv")[0] == 4


def test_inspect_default_model(tmp_path, capsys):
    save_checkpoint(spiking_dd(), tmp_path / "default.sdd")
    code, out, err = run(capsys, "inspect", tmp_path / "default.sdd")
    assert code == 0
    info = json.loads(out)
    assert info["params"] == 402_128 and "402,128" in err
    assert info["chain"] == ["2x480x640", "pool7", "flatten", "dense 12558->32", "dense 32->8", "dense 8->2"]
    dense = [layer for layer in info["layers"] if layer["kind"] == "dense"]
    assert all(layer["neuron"]["threshold"] == 1.25 for layer in dense)


def test_inspect_corrupt(tmp_path, capsys):
    (tmp_path / "junk.sdd").write_bytes(b"not a checkpoint")
    assert run(capsys, "inspect", tmp_path / "junk.sdd")[0] == 4


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
