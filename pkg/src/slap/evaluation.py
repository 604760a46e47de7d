"""Retrieval recall@k, zero-shot classification and embedding export."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from slap.errors import DataError, InputError
from slap.heads import l2_normalize

log = logging.getLogger(__name__)

EMBED_MAGIC = b"SLPE"
EMBED_VERSION = 1
AUDIO, TEXT = 0, 1


def similarity_matrix(audio_emb, text_emb) -> np.ndarray:
    a = l2_normalize(torch.as_tensor(audio_emb, dtype=torch.float64))
    t = l2_normalize(torch.as_tensor(text_emb, dtype=torch.float64))
    return (a @ t.T).clamp(-1.0, 1.0).numpy()


def rank(scores: np.ndarray) -> np.ndarray:
    """Candidate indices by descending score; equal scores keep lower index first."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def recall_at_k(S, pairs, k: int, direction: str = "a2t") -> float:
    """Fraction of queries with at least one relevant candidate in the top k.

    ``S`` is (n_audio, n_text); ``pairs`` lists relevant (audio_idx, text_idx)
    pairs. ``direction`` is "a2t" (audio queries) or "t2a" (text queries).
    """
    S = np.asarray(S)
    if direction == "t2a":
        S = S.T
        pairs = [(t, a) for a, t in pairs]
    elif direction != "a2t":
        raise InputError(f"direction must be 'a2t' or 't2a', got {direction!r}")
    relevant = {}
    for q, c in pairs:
        relevant.setdefault(int(q), set()).add(int(c))
    if len(relevant) != S.shape[0]:
        raise InputError("every query needs at least one relevant candidate")
    if k > S.shape[1]:
        log.warning("k=%d exceeds %d candidates; clamping", k, S.shape[1])
        k = S.shape[1]
    top = rank(S)[:, :k]
    hits = [bool(relevant[q] & set(top[q].tolist())) for q in range(S.shape[0])]
    return float(np.mean(hits))


def retrieval_report(S, pairs, ks=(1, 5, 10)) -> dict:
    return {f"{d}_R@{k}": recall_at_k(S, pairs, k, d) for d in ("a2t", "t2a") for k in ks}


def classify(audio_emb, class_emb) -> np.ndarray:
    """Index of the most similar class per clip; ties go to the lower index."""
    return rank(similarity_matrix(audio_emb, class_emb))[:, 0]


def zero_shot_classify(model, audio_emb, class_names, labels=None, template=None):
    """Encode class names with the text tower and label each clip by cosine argmax.

    Returns (predicted indices, top-1 accuracy or None when no labels given).
    """
    if len(class_names) < 2:
        raise InputError("zero-shot classification needs at least two classes")
    if len(set(class_names)) != len(class_names):
        raise InputError("duplicate class names")
    texts = [template.format(c) if template else c for c in class_names]
    preds = classify(audio_emb, model.embed_text(texts))
    acc = None if labels is None else float(np.mean(preds == np.asarray(labels)))
    return preds, acc


@dataclass
class EmbeddingRecord:
    id: str
    modality: int
    vector: np.ndarray


def write_embeddings(path, records) -> None:
    records = list(records)
    dims = {len(r.vector) for r in records}
    if len(dims) > 1:
        raise InputError("all embeddings must share one dimension")
    D = dims.pop() if dims else 0
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC + struct.pack("<III", EMBED_VERSION, len(records), D))
        for r in records:
            raw = r.id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw + struct.pack("<B", r.modality))
            f.write(np.asarray(r.vector, dtype="<f4").tobytes())


def read_embeddings(path) -> list:
    buf = Path(path).read_bytes()
    if buf[:4] != EMBED_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    version, count, D = struct.unpack_from("<III", buf, 4)
    if version != EMBED_VERSION:
        raise DataError(f"{path}: unsupported embedding file version {version}")
    off, out = 16, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            rid = buf[off + 4 : off + 4 + n].decode("utf-8")
            off += 4 + n
            modality = buf[off]
            vec = np.frombuffer(buf, dtype="<f4", count=D, offset=off + 1).copy()
            off += 1 + 4 * D
            out.append(EmbeddingRecord(rid, modality, vec))
    except (struct.error, ValueError, IndexError) as e:
        raise DataError(f"{path}: truncated embedding file") from e
    return out


def embed_manifest(model, manifest, out_path, batch_size: int = 16) -> list:
    """Write audio and text embeddings for every record; returns ids whose audio is missing."""
    from slap.dsp import wav_to_patches

    present, missing = [], []
    for r in manifest:
        (present if Path(r.audio_path).exists() else missing).append(r)
    for r in missing:
        log.error("missing audio for %s: %s", r.id, r.audio_path)
    seqs = [wav_to_patches(r.audio_path) for r in present]
    model.eval()
    a = model.embed_audio(seqs, batch_size).numpy() if seqs else np.zeros((0, 0))
    t = model.embed_text([r.caption for r in manifest]).numpy()
    records = [EmbeddingRecord(r.id, AUDIO, v) for r, v in zip(present, a)]
    records += [EmbeddingRecord(r.id, TEXT, v) for r, v in zip(manifest, t)]
    write_embeddings(out_path, records)
    return [r.id for r in missing]


def paired_retrieval(model, seqs, captions, ks=(1, 5, 10)) -> dict:
    """Recall@k over clips whose i-th caption is the i-th text."""
    S = similarity_matrix(model.embed_audio(seqs), model.embed_text(captions))
    return retrieval_report(S, [(i, i) for i in range(len(captions))], ks)
