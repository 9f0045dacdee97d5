"""JSON persistence for weights, residuals and token embeddings.

Every file is a versioned envelope ``{format_version, kind, hash, metadata,
payload}`` where ``hash`` is the SHA-256 of the canonical payload JSON.
Weight arrays are stored as hex strings of their little-endian float64 bytes
so a round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .customization import ResidualConceptEmbedding
from .denoiser import DenoiserConfig, DenoiserWeights
from .errors import ContractError, IntegrityError, MigrationError

FORMAT_VERSION = 1
KINDS = ("base-weights", "finetuned-weights", "residual", "token-embedding")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "hex": a.tobytes().hex()}


def decode_array(doc: dict) -> np.ndarray:
    try:
        raw = bytes.fromhex(doc["hex"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return arr.reshape(doc["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"malformed array record: {exc}") from None


def weights_payload(weights: DenoiserWeights) -> dict:
    return {
        "config": weights.config.to_dict(),
        "fingerprint": weights.fingerprint(),
        "tensors": [{"name": k, **encode_array(weights.params[k])} for k in sorted(weights.params)],
    }


def weights_from_payload(payload: dict) -> DenoiserWeights:
    config = DenoiserConfig.from_dict(payload["config"])
    params = {rec["name"]: decode_array(rec) for rec in payload["tensors"]}
    weights = DenoiserWeights(config, params)
    if weights.fingerprint() != payload.get("fingerprint"):
        raise IntegrityError("weights fingerprint does not match their content")
    return weights


@dataclass
class Checkpoint:
    kind: str
    payload: dict
    metadata: dict = field(default_factory=dict)
    hash: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown checkpoint kind {self.kind!r}")
        if not self.hash:
            self.hash = content_hash(self.payload)

    def to_document(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "hash": self.hash,
            "metadata": self.metadata,
            "payload": self.payload,
        }

    def weights(self) -> DenoiserWeights:
        if self.kind not in ("base-weights", "finetuned-weights"):
            raise ContractError(f"checkpoint of kind {self.kind!r} holds no weights")
        return weights_from_payload(self.payload)

    def residual(self, base: DenoiserWeights | None = None) -> ResidualConceptEmbedding:
        if self.kind != "residual":
            raise ContractError(f"checkpoint of kind {self.kind!r} holds no residual")
        return ResidualConceptEmbedding.from_dict(self.payload, base)

    def token_embedding(self) -> tuple[str, np.ndarray]:
        if self.kind != "token-embedding":
            raise ContractError(f"checkpoint of kind {self.kind!r} holds no token embedding")
        return self.payload["token"], decode_array(self.payload["embedding"])


def weights_checkpoint(weights: DenoiserWeights, kind: str = "base-weights", **metadata) -> Checkpoint:
    return Checkpoint(kind, weights_payload(weights), metadata)


def residual_checkpoint(emb: ResidualConceptEmbedding, **metadata) -> Checkpoint:
    return Checkpoint("residual", emb.to_dict(), metadata)


def token_checkpoint(token: str, embedding: np.ndarray, base_fingerprint: str, **metadata) -> Checkpoint:
    payload = {"token": token, "embedding": encode_array(embedding), "base_fingerprint": base_fingerprint}
    return Checkpoint("token-embedding", payload, metadata)


def serialize(ckpt: Checkpoint) -> str:
    return canonical_json(ckpt.to_document()) + "\n"


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> int:
    """Write ``ckpt`` atomically; returns the file size in bytes."""
    text = serialize(ckpt)
    write_atomic(path, text)
    return len(text.encode())


def parse_checkpoint(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"checkpoint is not valid JSON (truncated?): {exc}") from None
    if not isinstance(doc, dict) or "payload" not in doc:
        raise IntegrityError("checkpoint envelope is malformed")
    if doc.get("format_version") != FORMAT_VERSION:
        raise MigrationError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    expected = doc.get("hash")
    actual = content_hash(doc["payload"])
    if expected != actual:
        raise IntegrityError(f"checkpoint hash mismatch: header {str(expected)[:12]}, content {actual[:12]}")
    return Checkpoint(doc["kind"], doc["payload"], doc.get("metadata", {}), actual)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))
