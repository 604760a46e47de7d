import struct

import numpy as np
import pytest
import torch


def riff_wav(pcm: np.ndarray, sample_rate: int, channels: int = 1, fmt_code: int = 1, bits: int = 16, extra_chunk=False) -> bytes:
    """Hand-assembled RIFF/WAVE bytes, independent of the stdlib writer."""
    data = np.asarray(pcm, dtype="<i2").tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_code, channels, sample_rate, sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if extra_chunk:
        chunks += b"LIST" + struct.pack("<I", 4) + b"INFO"
    chunks += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


@pytest.fixture
def write_wav(tmp_path):
    def _write(name, pcm, sample_rate=16000, **kw):
        p = tmp_path / name
        p.write_bytes(riff_wav(pcm, sample_rate, **kw))
        return p

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def tiny_model_config():
    from slap.encoders import AudioEncoderConfig, TextEncoderConfig
    from slap.heads import CaptionDecoderConfig, HeadConfig
    from slap.model import ModelConfig

    return ModelConfig(
        audio=AudioEncoderConfig(n_layers=3, n_heads=2, hidden=16, ffn=32),
        text=TextEncoderConfig(n_layers=1, n_heads=2, hidden=16, ffn=32, max_len=48),
        decoder=CaptionDecoderConfig(n_layers=1, n_heads=2, hidden=16, ffn=32, max_len=48),
        heads=HeadConfig(embed_dim=8, map_heads=2, proto_hidden=16, proto_dim=8, n_prototypes=8),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from slap.data import synth_dataset

    d = tmp_path_factory.mktemp("synth")
    synth_dataset(d, n_pairs=6, seed=0)
    return d


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    from slap.data import read_manifest

    return read_manifest(synth_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def synth_bank(synth_manifest):
    from slap.trainer import ClipBank

    return ClipBank.from_manifest(synth_manifest, 48)
