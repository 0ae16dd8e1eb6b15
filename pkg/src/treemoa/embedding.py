"""Token-embedding providers: deterministic mock, file-backed, and remote HTTP.

All three expose ``embed(item) -> np.ndarray`` of shape (n, h) where ``item``
is a token-id sequence or a text string.

Binary file layout (little-endian)::

    magic   b"TMEB"  version u32 (=1)  count u32
    count x { key_len u32, key utf-8 bytes, n u32, h u32, n*h float64 row-major }

The JSON debug variant is ``{"<key>": {"shape": [n, h], "data": [...]}}``.
Keys for token inputs are the ids joined by single spaces.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

DEFAULT_HIDDEN = 64
_MAGIC = b"TMEB"


class EmbeddingError(RuntimeError):
    pass


class EmbeddingKeyError(EmbeddingError, KeyError):
    def __init__(self, key: str) -> None:
        super().__init__(f"no stored embedding for key {key!r}")
        self.key = key


class EmbeddingTransportError(EmbeddingError):
    pass


def item_key(item: str | Sequence[int]) -> str:
    if isinstance(item, str):
        return item
    return " ".join(str(int(t)) for t in item)


def _check_input(item: Any) -> None:
    if item is None or len(item) == 0:
        raise EmbeddingError("cannot embed an empty input")


class MockEmbeddingProvider:
    """Hash-seeded embeddings, a pure function of ``(seed, input)``.

    Each token's row comes from a generator seeded by a hash of
    ``(seed, token)``, centred to zero mean across the hidden dimension. By
    default the row ignores position, so the Gram matrix depends only on the
    token multiset and outputs sharing tokens come out similar.
    ``position_weight`` mixes in a per-position component.
    """

    def __init__(self, seed: int = 0, h: int = DEFAULT_HIDDEN, position_weight: float = 0.0) -> None:
        if h < 2:
            raise EmbeddingError("hidden size must be >= 2")
        self.seed = seed
        self.h = h
        self.position_weight = position_weight
        self._rows: dict[tuple[str, Any], np.ndarray] = {}
        self._lock = threading.Lock()

    def _row(self, kind: str, value: Any) -> np.ndarray:
        key = (kind, value)
        row = self._rows.get(key)
        if row is None:
            digest = hashlib.blake2b(f"{self.seed}|{kind}|{value}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            row = rng.standard_normal(self.h)
            row -= row.mean()
            with self._lock:
                self._rows[key] = row
        return row

    def embed(self, item: str | Sequence[int]) -> np.ndarray:
        _check_input(item)
        tokens = item.split() if isinstance(item, str) else [int(t) for t in item]
        out = np.stack([self._row("tok", t) for t in tokens])
        if self.position_weight:
            out = out + self.position_weight * np.stack([self._row("pos", i) for i in range(len(tokens))])
        return out


class FileEmbeddingProvider:
    """Embeddings looked up by key from a stored table (binary or JSON)."""

    def __init__(self, table: Mapping[str, np.ndarray]) -> None:
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        hs = {v.shape[1] for v in self.table.values()}
        if len(hs) > 1:
            raise EmbeddingError(f"stored embeddings disagree on hidden size: {sorted(hs)}")
        self.h = hs.pop() if hs else None

    @classmethod
    def load(cls, path: str | Path) -> "FileEmbeddingProvider":
        path = Path(path)
        if path.suffix == ".json":
            return cls(load_json(path))
        return cls(load_binary(path))

    def embed(self, item: str | Sequence[int]) -> np.ndarray:
        _check_input(item)
        key = item_key(item)
        try:
            return self.table[key].copy()
        except KeyError:
            raise EmbeddingKeyError(key) from None


def save_binary(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<II", 1, len(table))]
    for key, mat in table.items():
        mat = np.asarray(mat, dtype="<f8")
        if mat.ndim != 2:
            raise EmbeddingError(f"embedding for {key!r} must be 2-D")
        kb = key.encode()
        chunks.append(struct.pack("<I", len(kb)) + kb + struct.pack("<II", *mat.shape))
        chunks.append(np.ascontiguousarray(mat).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_binary(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise EmbeddingError(f"{path}: not an embedding table (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    off = 12
    table = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        key = data[off:off + klen].decode()
        off += klen
        n, h = struct.unpack_from("<II", data, off)
        off += 8
        table[key] = np.frombuffer(data, dtype="<f8", count=n * h, offset=off).reshape(n, h).astype(float)
        off += 8 * n * h
    return table


def save_json(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    payload = {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
               for k, v in table.items()}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_json(path: str | Path) -> dict[str, np.ndarray]:
    raw = json.loads(Path(path).read_text())
    return {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in raw.items()}


class RemoteEmbeddingProvider:
    """Embeddings over HTTP.

    Request: ``POST {endpoint}`` with ``{"model": ..., "input": <text or ids>}``.
    Response: ``{"data": [{"token_embeddings": [[...], ...]}]}`` for per-token
    vectors, or OpenAI-style ``{"data": [{"embedding": [...]}]}`` for a pooled
    vector, which is returned as a single row (n = 1).
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        h: int | None = None,
        api_key_env: str = "TREEMOA_EMBEDDING_API_KEY",
        max_in_flight: int = 4,
        timeout: float = 30.0,
        client: Any = None,
        memo: bool = False,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.h = h
        self.api_key = os.environ.get(api_key_env)
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._memo: dict[str, np.ndarray] | None = {} if memo else None

    def embed(self, item: str | Sequence[int]) -> np.ndarray:
        _check_input(item)
        key = hashlib.sha256(item_key(item).encode()).hexdigest()
        if self._memo is not None and key in self._memo:
            return self._memo[key].copy()
        body = {"model": self.model, "input": item if isinstance(item, str) else [int(t) for t in item]}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._slots:
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
                resp.raise_for_status()
                payload = resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                raise EmbeddingTransportError(f"embedding request to {self.endpoint} failed: {exc}") from exc
        try:
            entry = payload["data"][0]
            if "token_embeddings" in entry:
                mat = np.asarray(entry["token_embeddings"], dtype=float)
            else:
                mat = np.asarray(entry["embedding"], dtype=float)[None, :]
        except (KeyError, IndexError, TypeError) as exc:
            raise EmbeddingTransportError(f"malformed embedding response: {exc}") from exc
        if mat.ndim != 2 or (self.h is not None and mat.shape[1] != self.h):
            raise EmbeddingTransportError(f"unexpected embedding shape {mat.shape}")
        if self._memo is not None:
            self._memo[key] = mat
        return mat.copy()


@dataclass
class ProviderSpec:
    kind: str = "mock"
    h: int = DEFAULT_HIDDEN
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "file", "remote"):
            raise EmbeddingError(f"unknown provider kind {self.kind!r}")
        if self.h < 2:
            raise EmbeddingError("hidden size must be >= 2")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProviderSpec":
        d = dict(d)
        return cls(kind=d.pop("kind", "mock"), h=int(d.pop("h", DEFAULT_HIDDEN)), params=d)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "h": self.h, **self.params}

    def build(self, default_seed: int = 0) -> Any:
        if self.kind == "mock":
            return MockEmbeddingProvider(seed=int(self.params.get("seed", default_seed)), h=self.h,
                                         position_weight=float(self.params.get("position_weight", 0.0)))
        if self.kind == "file":
            return FileEmbeddingProvider.load(self.params["path"])
        return RemoteEmbeddingProvider(
            endpoint=self.params["endpoint"],
            model=self.params["model"],
            h=self.h,
            max_in_flight=int(self.params.get("max_in_flight", 4)),
            memo=bool(self.params.get("memo", False)),
        )
