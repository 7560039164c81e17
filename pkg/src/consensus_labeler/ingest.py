"""Manifest and embedding-matrix I/O, dimension unification, view pairing.

The canonical on-disk embedding format is DECM, a little-endian binary record:
magic ``DECM``, u32 version (=1), u32 n, u32 d, u16 name_len, UTF-8 encoder
name, then n*d float32 values row-major. A CSV fallback (first line
``encoder=<name>``, then one comma-separated row per sample) is accepted on
read for interoperability; binary is canonical because floats do not
round-trip losslessly through text.

Manifests are line-oriented: one JSON object per line with fields ``id``
(required), ``image`` (optional), ``label`` (optional). Order is significant
and preserved.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

DECM_MAGIC = b"DECM"
DECM_VERSION = 1
_HEADER = struct.Struct("<4sIIIH")

UNIFIED_DIM = 2048


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str | None = None
    truth_label: str | None = None


@dataclass
class Manifest:
    samples: list[SampleRecord]
    label_space: list[str] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def truth_labels(self) -> list[str | None]:
        return [s.truth_label for s in self.samples]

    def has_truth_labels(self) -> bool:
        return any(s.truth_label is not None for s in self.samples)

    def index_of(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.samples)}

    def validate(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.image_path is not None and not s.image_path:
                raise ValidationError(f"sample {s.id!r}: image_path present but empty")
        if self.label_space is not None:
            space = set(self.label_space)
            for s in self.samples:
                if s.truth_label is not None and s.truth_label not in space:
                    raise ValidationError(
                        f"sample {s.id!r}: label {s.truth_label!r} outside label space"
                    )


@dataclass
class EmbeddingMatrix:
    encoder_name: str
    values: np.ndarray  # n x d float32, row i aligned to manifest sample i

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])

    def validate(self) -> None:
        if self.values.ndim != 2:
            raise ValidationError("embedding values must be a 2-D matrix")
        if self.d <= 0:
            raise ValidationError("embedding dimension must be positive")
        _check_finite(self.values)


@dataclass
class PairedEmbeddings:
    view_a: EmbeddingMatrix
    view_b: EmbeddingMatrix
    manifest: Manifest
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.view_a.n


def _check_finite(values: np.ndarray) -> None:
    finite = np.isfinite(values)
    if not finite.all():
        row, col = np.argwhere(~finite)[0]
        raise ValidationError(f"non-finite value at row {int(row)}, col {int(col)}")


def load_manifest(path: str | Path) -> Manifest:
    """Parse a line-oriented manifest, preserving record order.

    The label space, when any record carries a label, is the sorted set of
    labels seen in the file.
    """
    path = Path(path)
    samples: list[SampleRecord] = []
    seen: set[str] = set()
    labels: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if not isinstance(rec, dict) or "id" not in rec:
                raise ValidationError(f"{path}:{lineno}: record missing required field 'id'")
            sid = str(rec["id"])
            if sid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            image = rec.get("image")
            label = rec.get("label")
            if image is not None and not str(image):
                raise ValidationError(f"{path}:{lineno}: empty image path")
            if label is not None:
                labels.add(str(label))
            samples.append(
                SampleRecord(
                    id=sid,
                    image_path=str(image) if image is not None else None,
                    truth_label=str(label) if label is not None else None,
                )
            )
    manifest = Manifest(samples=samples, label_space=sorted(labels) if labels else None)
    manifest.validate()
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    lines = []
    for s in manifest.samples:
        rec: dict[str, str] = {"id": s.id}
        if s.image_path is not None:
            rec["image"] = s.image_path
        if s.truth_label is not None:
            rec["label"] = s.truth_label
        lines.append(json.dumps(rec, sort_keys=True))
    _atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def load_embeddings(path: str | Path, expected_n: int | None = None) -> EmbeddingMatrix:
    """Read a DECM binary file, or the CSV fallback when the magic is absent."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == DECM_MAGIC:
        matrix = _parse_decm(raw, path)
    else:
        matrix = _parse_csv(raw, path)
    if expected_n is not None and matrix.n != expected_n:
        raise ValidationError(
            f"{path}: expected {expected_n} rows, file holds {matrix.n}"
        )
    _check_finite(matrix.values)
    return matrix


def _parse_decm(raw: bytes, path: Path) -> EmbeddingMatrix:
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, n, d, name_len = _HEADER.unpack_from(raw, 0)
    if magic != DECM_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != DECM_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    if len(raw) < offset + name_len:
        raise ValidationError(f"{path}: truncated encoder name")
    name = raw[offset : offset + name_len].decode("utf-8")
    offset += name_len
    payload = raw[offset:]
    expected = n * d * 4
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: header declares {n}x{d} ({expected} payload bytes), "
            f"file holds {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return EmbeddingMatrix(encoder_name=name, values=values)


def _parse_csv(raw: bytes, path: Path) -> EmbeddingMatrix:
    text = raw.decode("utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("encoder="):
        raise ValidationError(f"{path}: neither DECM magic nor 'encoder=' CSV header")
    name = lines[0][len("encoder=") :].strip()
    rows = []
    width = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ValidationError(f"{path}:{lineno}: ragged row ({len(parts)} vs {width})")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: bad float: {exc}") from exc
    values = np.asarray(rows, dtype=np.float32)
    if values.size == 0:
        values = values.reshape(0, width or 0)
    return EmbeddingMatrix(encoder_name=name, values=values)


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write the canonical DECM binary; atomic via temp file + rename."""
    matrix.validate()
    path = Path(path)
    name = matrix.encoder_name.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ValidationError("encoder name too long for format")
    header = _HEADER.pack(DECM_MAGIC, DECM_VERSION, matrix.n, matrix.d, len(name))
    payload = np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    _atomic_write_bytes(path, header + name + payload)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def unify_dimension(
    matrix: EmbeddingMatrix, target_d: int = UNIFIED_DIM, seed: int = 0
) -> EmbeddingMatrix:
    """Project a matrix onto ``target_d`` dimensions.

    Identity passthrough when the dimension already matches; otherwise a
    seed-deterministic Gaussian random projection with entries drawn i.i.d.
    from N(0, 1/target_d), which preserves pairwise distances in expectation.
    """
    if target_d == 0:
        raise ValidationError("target dimension must be positive")
    matrix.validate()
    if matrix.d == target_d:
        return matrix
    rng = np.random.default_rng(seed)
    projection = (rng.standard_normal((matrix.d, target_d)) / math.sqrt(target_d)).astype(
        np.float32
    )
    return EmbeddingMatrix(
        encoder_name=matrix.encoder_name, values=matrix.values @ projection
    )


def pair_views(
    a: EmbeddingMatrix, b: EmbeddingMatrix, manifest: Manifest
) -> PairedEmbeddings:
    """Bind two unified views to a manifest, keeping rows in manifest order."""
    manifest.validate()
    a.validate()
    b.validate()
    if a.n != b.n or a.n != len(manifest):
        raise ValidationError(
            f"row-count mismatch: view_a={a.n}, view_b={b.n}, manifest={len(manifest)}"
        )
    if a.d != b.d:
        raise ValidationError(f"dimension mismatch: view_a d={a.d}, view_b d={b.d}")
    recorded: list[str] = []
    if a.encoder_name == b.encoder_name:
        msg = f"both views carry encoder name {a.encoder_name!r}"
        recorded.append(msg)
        warnings.warn(msg, stacklevel=2)
    return PairedEmbeddings(view_a=a, view_b=b, manifest=manifest, warnings=recorded)
