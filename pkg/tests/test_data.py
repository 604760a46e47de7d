import json

import numpy as np
import pytest

from slap.data import Record, describe, read_manifest, synth_dataset, tone_sequences, write_manifest
from slap.dsp import load_wav, mel_spectrogram
from slap.errors import ManifestError
from slap.evaluation import embed_manifest, read_embeddings, zero_shot_classify
from slap.errors import InputError
from slap.model import SlapModel


def _write(tmp_path, rows):
    p = tmp_path / "m.jsonl"
    p.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return p


GOOD = {"id": "a", "audio_path": "a.wav", "caption": "a low tone", "duration_s": 1.0}


def test_manifest_roundtrip_and_relative_paths(tmp_path):
    p = _write(tmp_path, [GOOD, "", {**GOOD, "id": "b", "audio_path": "/abs/b.wav"}])
    recs = read_manifest(p)
    assert recs[0].audio_path == str(tmp_path / "a.wav")
    assert recs[1].audio_path == "/abs/b.wav"
    write_manifest(tmp_path / "n.jsonl", recs)
    assert read_manifest(tmp_path / "n.jsonl") == recs


@pytest.mark.parametrize(
    "bad, line",
    [
        ("{not json", 2),
        ({"id": "b", "audio_path": "b.wav", "caption": "x"}, 2),
        (GOOD, 2),
        ({**GOOD, "id": "c", "duration_s": 0}, 2),
        ({**GOOD, "id": "c", "duration_s": 31}, 2),
        ({**GOOD, "id": "c", "caption": "  "}, 2),
        ("[1, 2]", 2),
    ],
)
def test_manifest_errors_name_line(tmp_path, bad, line):
    with pytest.raises(ManifestError, match=f"line {line}"):
        read_manifest(_write(tmp_path, [GOOD, bad]))


def test_tone_captions():
    seqs = list(tone_sequences())
    assert len(seqs) == 3 + 9 + 27 + 81
    assert describe(("low", "high")) == "a low tone then a high tone"


def test_synth_dataset(tmp_path):
    recs = synth_dataset(tmp_path, n_pairs=5, seed=3)
    assert len(recs) == 5 and len({r.caption for r in recs}) == 5
    for r in recs:
        w = load_wav(r.audio_path)
        assert 1.0 - 0.01 <= w.duration <= 8.0 + 0.01
        assert abs(w.duration - r.duration_s) < 1e-3
    again = synth_dataset(tmp_path / "again", n_pairs=5, seed=3)
    assert [r.caption for r in again] == [r.caption for r in recs]
    assert (tmp_path / "clip_0000.wav").read_bytes() == (tmp_path / "again" / "clip_0000.wav").read_bytes()


def test_synth_tone_energy_in_named_band(tmp_path):
    rec = next(r for r in synth_dataset(tmp_path, n_pairs=40, seed=0) if " then " not in r.caption)
    m = mel_spectrogram(load_wav(rec.audio_path)).frames.mean(axis=0)
    peak = int(np.argmax(m))
    expected = {"low": (0, 20), "mid": (15, 40), "high": (35, 64)}[rec.caption.split()[1]]
    assert expected[0] <= peak < expected[1]


def test_embed_manifest_reports_missing(tmp_path, tiny_cfg, synth_manifest):
    recs = list(synth_manifest[:2]) + [Record("ghost", str(tmp_path / "none.wav"), "a low tone", 1.0)]
    missing = embed_manifest(SlapModel(tiny_cfg), recs, tmp_path / "e.bin")
    assert missing == ["ghost"]
    out = read_embeddings(tmp_path / "e.bin")
    assert [(r.id, r.modality) for r in out] == [
        (recs[0].id, 0), (recs[1].id, 0), (recs[0].id, 1), (recs[1].id, 1), ("ghost", 1)
    ]
    assert all(abs(np.linalg.norm(r.vector) - 1) < 1e-5 for r in out)


def test_zero_shot_validation(tiny_cfg):
    model = SlapModel(tiny_cfg)
    a = model.embed_text(["x", "y"])
    preds, acc = zero_shot_classify(model, a, ["x", "y"], labels=[0, 1], template="{}")
    assert preds.shape == (2,) and 0.0 <= acc <= 1.0
    with pytest.raises(InputError):
        zero_shot_classify(model, a, ["x"])
    with pytest.raises(InputError):
        zero_shot_classify(model, a, ["x", "x"])
