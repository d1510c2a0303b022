import csv
import json

import numpy as np
import pytest

from bssd import cli
from bssd.container import save_tensor
from bssd.signal import read_wav


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    spec = {"duration": 3.0, "sources": [{"synth": "interleaved", "doa": 10},
                                         {"synth": "interleaved", "doa": 55, "gain": 0.7},
                                         {"synth": "interleaved", "doa": 90, "gain": 0.5}]}
    (d / "scene.json").write_text(json.dumps(spec))
    assert cli.main(["mix", str(d / "scene.json"), str(d / "mix")]) == 0
    return d / "mix"


def test_mix_outputs(scene):
    man = json.loads((scene / "manifest.json").read_text())
    assert man["doas"] == [10, 55, 90]
    z = read_wav(scene / "mixture.wav")
    assert z.samples.shape == (48000, 6)
    assert len(man["references"]) == 3


def test_separate_finds_all_sources(scene, tmp_path, capsys):
    code, recs = run(capsys, "separate", scene / "mixture.wav", tmp_path, "--manifest", scene / "manifest.json")
    assert code == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert sorted(e["doa"] for e in man["sources"]) == [10, 55, 90]
    code, recs = run(capsys, "eval", "--estimate", tmp_path / "source_0.wav",
                     "--reference", scene / "reference_0.wav", "--mixture", scene / "mixture.wav")
    assert code == 0 and recs[0]["improvement"] > 0


def test_localize_records(scene, capsys):
    code, recs = run(capsys, "localize", scene / "mixture.wav", "--manifest", scene / "manifest.json")
    assert code == 0
    assert recs[-1]["doas"] == [10, 55, 90] and recs[-1]["iterations"] == 4
    assert len(recs) == 5


def test_eval_identical_hits_cap(scene, capsys):
    ref = scene / "reference_0.wav"
    code, recs = run(capsys, "eval", "--estimate", ref, "--reference", ref)
    assert code == 0 and recs[0]["si_sdr"] == 300.0


def test_export_map_has_one_row_per_direction(scene, tmp_path, capsys):
    code, recs = run(capsys, "export-map", scene / "mixture.wav", tmp_path / "m.csv", "--kind", "raw",
                     "--frames", tmp_path / "f.csv")
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0][0] == "d" and len(rows) == 101
    assert len(list(csv.reader(open(tmp_path / "f.csv")))[0]) == 101


def test_diarize_writes_streams(scene, tmp_path, capsys):
    code, recs = run(capsys, "diarize", scene / "mixture.wav", tmp_path, "--block-len", "1.5",
                     "--manifest", scene / "manifest.json")
    assert code == 0 and len(recs) == 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert len(man["speakers"]) == 3
    assert read_wav(tmp_path / "speaker_0.wav").num_samples == 48000


def test_output_is_deterministic(scene, tmp_path, capsys):
    for sub in ("a", "b"):
        assert cli.main(["separate", str(scene / "mixture.wav"), str(tmp_path / sub),
                         "--manifest", str(scene / "manifest.json")]) == 0
    capsys.readouterr()
    assert (tmp_path / "a/source_1.wav").read_bytes() == (tmp_path / "b/source_1.wav").read_bytes()


def test_simulate_rir(tmp_path, capsys):
    code, recs = run(capsys, "simulate-rir", tmp_path, "--rooms", 2, "--rotations", 2, "--seed", 4)
    assert code == 0 and len(recs) == 4
    assert (tmp_path / "rir_0001_rot1.json").exists()
    assert all(0 <= r["doa"] < 100 for r in recs)


def test_eer_command(tmp_path, capsys):
    batch = np.array([[[0, 0], [0.1, 0]], [[5, 5], [5, 5.1]]], dtype=np.float32)
    save_tensor(tmp_path / "e.bin", batch)
    code, recs = run(capsys, "eer", tmp_path / "e.bin")
    assert code == 0 and recs[0]["eer"] == 0


def test_gradcheck_command(capsys):
    code, recs = run(capsys, "gradcheck", "--points", 3)
    assert code == 0 and all(r["passed"] for r in recs)


def test_usage_errors_exit_2(tmp_path, scene, capsys):
    (tmp_path / "empty.json").write_text("{}")
    assert cli.main(["mix", str(tmp_path / "empty.json"), str(tmp_path / "o")]) == 2
    # oracle embedder without references
    assert cli.main(["localize", str(scene / "mixture.wav")]) == 2
    assert cli.main(["localize", str(scene / "mixture.wav"), "--set", "t_a=0"]) == 2
    assert cli.main(["eval"]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert cli.main(["eval", "--estimate", str(tmp_path / "no.wav"), "--reference", str(tmp_path / "no.wav")]) == 1


def test_bad_thread_count(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("BSSD_THREADS", "zero")
    assert cli.main(["simulate-rir", str(tmp_path)]) == 2
