"""Dataset manifests and the synthetic tone corpus used for desk-scale runs."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from slap.dsp import SAMPLE_RATE, Waveform, save_wav
from slap.errors import ManifestError

MAX_DURATION = 30.0
FIELDS = ("id", "audio_path", "caption", "duration_s")


@dataclass
class Record:
    id: str
    audio_path: str
    caption: str
    duration_s: float


def read_manifest(path) -> list:
    """Parse a JSON-lines manifest; paths are resolved against its directory."""
    path = Path(path)
    records, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", lineno) from e
            if not isinstance(obj, dict):
                raise ManifestError("record must be a JSON object", lineno)
            for key in FIELDS:
                if key not in obj:
                    raise ManifestError(f"missing field {key!r}", lineno)
            rid = str(obj["id"])
            if rid in seen:
                raise ManifestError(f"duplicate id {rid!r}", lineno)
            try:
                dur = float(obj["duration_s"])
            except (TypeError, ValueError) as e:
                raise ManifestError("duration_s is not a number", lineno) from e
            if not 0.0 < dur <= MAX_DURATION:
                raise ManifestError(f"duration_s {dur} outside (0, {MAX_DURATION}]", lineno)
            caption = str(obj["caption"])
            if not caption.strip():
                raise ManifestError("caption is empty", lineno)
            audio = Path(obj["audio_path"])
            if not audio.is_absolute():
                audio = path.parent / audio
            seen.add(rid)
            records.append(Record(rid, str(audio), caption, dur))
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


PITCHES = {"low": 220.0, "mid": 880.0, "high": 3000.0}


def tone_sequences():
    """All pitch sequences of length 1..4, shortest first."""
    names = list(PITCHES)
    for n in range(1, 5):
        yield from itertools.product(names, repeat=n)


def describe(seq) -> str:
    return " then ".join(f"a {p} tone" for p in seq)


def render(seq, tone_s: float, rng: np.random.Generator) -> Waveform:
    n = int(round(tone_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    fade = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01)
    parts = [0.5 * np.sin(2 * np.pi * PITCHES[p] * t) * fade for p in seq]
    x = np.concatenate(parts) + 0.003 * rng.standard_normal(n * len(seq))
    return Waveform(np.clip(x, -1, 1).astype(np.float32))


def synth_dataset(out_dir, n_pairs: int = 16, seed: int = 0) -> list:
    """Write ``n_pairs`` tone-pattern WAVs plus ``manifest.jsonl``.

    Each clip is a distinct pitch sequence with a caption naming it, so the
    audio/text pairing is one-to-one. Clips last between 1 and 8 seconds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pool = list(tone_sequences())
    if n_pairs > len(pool):
        raise ValueError(f"at most {len(pool)} distinct tone patterns")
    order = rng.permutation(len(pool))[:n_pairs]
    records = []
    for i, j in enumerate(order):
        seq = pool[j]
        w = render(seq, float(rng.uniform(1.0, 8.0)) / len(seq), rng)
        name = f"clip_{i:04d}.wav"
        save_wav(out / name, w)
        records.append(Record(f"clip_{i:04d}", name, describe(seq), round(w.duration, 4)))
    write_manifest(out / "manifest.jsonl", records)
    return read_manifest(out / "manifest.jsonl")
