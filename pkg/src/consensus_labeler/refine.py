"""Dual projection heads trained with a symmetric InfoNCE objective.

The two encoder views of the same sample form the positive pair; every other
sample in the (full-dataset) batch is a negative. Each view gets its own
2048 -> hidden -> out MLP head with rectifier nonlinearity and L2-normalized
outputs. View rows are L2-normalized before entering the heads: encoder
magnitude artifacts carry no pair information, so the heads only ever see
directions. Training is full-batch adaptive-moment gradient descent, bitwise
deterministic for a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PipelineError, ValidationError
from .ingest import PairedEmbeddings, _atomic_write_bytes

DECH_MAGIC = b"DECH"
DECH_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sIIII")

BRANCHES = ("view_a", "view_b", "concat")


@dataclass
class RefineConfig:
    temperature: float = 0.1
    learning_rate: float = 0.001
    epochs: int = 200
    seed: int = 0
    branch_select: str = "view_a"
    hidden_dim: int = 512
    out_dim: int = 128

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.branch_select not in BRANCHES:
            raise ValidationError(f"branch_select must be one of {BRANCHES}")


@dataclass
class ProjectionHead:
    w1: np.ndarray  # in_dim x hidden
    b1: np.ndarray  # hidden
    w2: np.ndarray  # hidden x out
    b2: np.ndarray  # out

    @property
    def in_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.w2.shape[1])

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class RefinedEmbeddings:
    values: np.ndarray  # n x p (or n x 2p for concat), unit-norm rows
    branch: str
    config: RefineConfig
    final_loss: float | None = None


def init_heads(config: RefineConfig, in_dim: int = 2048) -> tuple[ProjectionHead, ProjectionHead]:
    """Seed-deterministic head pair; fan-in-scaled uniform weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def make() -> ProjectionHead:
        lim1 = np.sqrt(6.0 / in_dim)
        lim2 = np.sqrt(6.0 / config.hidden_dim)
        return ProjectionHead(
            w1=rng.uniform(-lim1, lim1, size=(in_dim, config.hidden_dim)).astype(np.float32),
            b1=np.zeros(config.hidden_dim, dtype=np.float32),
            w2=rng.uniform(-lim2, lim2, size=(config.hidden_dim, config.out_dim)).astype(
                np.float32
            ),
            b2=np.zeros(config.out_dim, dtype=np.float32),
        )

    return make(), make()


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Unit-norm rows; the head-input convention for view matrices."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x, axis=1)
    if (norms < 1e-12).any():
        row = int(np.argmax(norms < 1e-12))
        raise ValidationError(f"cannot normalize zero row {row}")
    return x / norms[:, None]


def _forward(head: ProjectionHead, x: np.ndarray) -> tuple[np.ndarray, dict]:
    hidden = np.maximum(x @ head.w1 + head.b1, 0.0)
    pre = hidden @ head.w2 + head.b2
    norms = np.linalg.norm(pre, axis=1)
    if (norms < 1e-12).any():
        row = int(np.argmax(norms < 1e-12))
        raise PipelineError(f"degenerate row {row}: pre-normalization norm below 1e-12")
    z = pre / norms[:, None]
    return z, {"hidden": hidden, "norms": norms, "z": z}


def head_forward(head: ProjectionHead, x: np.ndarray) -> np.ndarray:
    """L2-normalize(w2.T @ relu(w1.T @ x_i + b1) + b2) for each row."""
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValidationError("non-finite input to head_forward")
    if x.shape[1] != head.in_dim:
        raise ValidationError(f"input dim {x.shape[1]} != head input dim {head.in_dim}")
    z, _ = _forward(head, x)
    return z


def info_nce_loss(
    za: np.ndarray, zb: np.ndarray, temperature: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE over cross-view dot-product similarities.

    loss = mean over both directions of
      -log[ exp(sim(za_i, zb_i)/t) / sum_j exp(sim(za_i, zb_j)/t) ]

    Returns the loss together with the exact analytic gradients with respect
    to the raw entries of za and zb. Computed in float64 so closed-form
    checks hold to ~1e-12 regardless of the caller's dtype.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 2 or za.shape[0] < 1:
        raise ValidationError(f"shape mismatch: {za.shape} vs {zb.shape}")
    n = za.shape[0]
    logits = (za @ zb.T) / temperature
    diag = np.diagonal(logits)

    row_max = logits.max(axis=1, keepdims=True)
    row_lse = np.log(np.exp(logits - row_max).sum(axis=1)) + row_max[:, 0]
    col_max = logits.max(axis=0, keepdims=True)
    col_lse = np.log(np.exp(logits - col_max).sum(axis=0)) + col_max[0, :]
    loss = float(((row_lse - diag).sum() + (col_lse - diag).sum()) / (2 * n))

    p_row = np.exp(logits - row_lse[:, None])
    p_col = np.exp(logits - col_lse[None, :])
    eye = np.eye(n)
    dlogits = ((p_row - eye) + (p_col - eye)) / (2 * n * temperature)
    return loss, dlogits @ zb, dlogits.T @ za


def _backward(head: ProjectionHead, x: np.ndarray, cache: dict, dz: np.ndarray) -> list[np.ndarray]:
    # Backprop through row normalization: dy = (dz - z (z . dz)) / ||y||
    z = cache["z"]
    dy = (dz - z * (dz * z).sum(axis=1, keepdims=True)) / cache["norms"][:, None]
    hidden = cache["hidden"]
    dw2 = hidden.T @ dy
    db2 = dy.sum(axis=0)
    dhidden = (dy @ head.w2.T) * (hidden > 0)
    dw1 = x.T @ dhidden
    db1 = dhidden.sum(axis=0)
    return [dw1, db1, dw2, db2]


class _Adam:
    """Adaptive-moment update, beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        correction = np.float32(
            np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        )
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(np.float32, copy=False)
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            p -= self.lr * correction * m / (np.sqrt(v) + eps)


def train_heads(
    pair: PairedEmbeddings, config: RefineConfig
) -> tuple[ProjectionHead, ProjectionHead, list[float]]:
    """Jointly train both heads full-batch; returns heads and per-epoch losses.

    The loss curve has exactly ``epochs`` entries (loss at each epoch's
    forward pass, before that epoch's update). A non-finite loss aborts with
    a divergence error naming the epoch.
    """
    config.validate()
    xa = normalize_rows(pair.view_a.values)
    xb = normalize_rows(pair.view_b.values)
    head_a, head_b = init_heads(config, in_dim=xa.shape[1])
    opt_a = _Adam(head_a.params(), config.learning_rate)
    opt_b = _Adam(head_b.params(), config.learning_rate)
    curve: list[float] = []
    for epoch in range(config.epochs):
        za, cache_a = _forward(head_a, xa)
        zb, cache_b = _forward(head_b, xb)
        loss, dza, dzb = info_nce_loss(za, zb, config.temperature)
        if not np.isfinite(loss):
            raise PipelineError(f"training diverged at epoch {epoch}: loss={loss}")
        curve.append(loss)
        grads_a = _backward(head_a, xa, cache_a, dza.astype(np.float32))
        grads_b = _backward(head_b, xb, cache_b, dzb.astype(np.float32))
        opt_a.step(head_a.params(), grads_a)
        opt_b.step(head_b.params(), grads_b)
    return head_a, head_b, curve


def refine(
    heads: tuple[ProjectionHead, ProjectionHead],
    pair: PairedEmbeddings,
    branch_select: str = "view_a",
    config: RefineConfig | None = None,
    final_loss: float | None = None,
) -> RefinedEmbeddings:
    """Emit clustering-ready embeddings from the selected branch."""
    if branch_select not in BRANCHES:
        raise ValidationError(f"branch_select must be one of {BRANCHES}")
    head_a, head_b = heads
    if branch_select == "view_a":
        values = head_forward(head_a, normalize_rows(pair.view_a.values))
    elif branch_select == "view_b":
        values = head_forward(head_b, normalize_rows(pair.view_b.values))
    else:
        za = head_forward(head_a, normalize_rows(pair.view_a.values))
        zb = head_forward(head_b, normalize_rows(pair.view_b.values))
        values = np.concatenate([za, zb], axis=1)
        values = values / np.linalg.norm(values, axis=1, keepdims=True)
    cfg = config if config is not None else RefineConfig(branch_select=branch_select)
    return RefinedEmbeddings(
        values=values.astype(np.float32), branch=branch_select, config=cfg,
        final_loss=final_loss,
    )


def save_head(head: ProjectionHead, path: str | Path) -> None:
    """DECH binary record: magic, version, dims, float32 parameters in order."""
    path = Path(path)
    header = _HEAD_HEADER.pack(
        DECH_MAGIC, DECH_VERSION, head.in_dim, head.hidden_dim, head.out_dim
    )
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for p in head.params()
    )
    _atomic_write_bytes(path, header + blob)


def load_head(path: str | Path) -> ProjectionHead:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD_HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, in_dim, hidden, out = _HEAD_HEADER.unpack_from(raw, 0)
    if magic != DECH_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != DECH_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    sizes = [in_dim * hidden, hidden, hidden * out, out]
    expected = sum(sizes) * 4
    payload = raw[_HEAD_HEADER.size :]
    if len(payload) != expected:
        raise ValidationError(f"{path}: payload length {len(payload)} != {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return ProjectionHead(
        w1=parts[0].reshape(in_dim, hidden).astype(np.float32),
        b1=parts[1].astype(np.float32),
        w2=parts[2].reshape(hidden, out).astype(np.float32),
        b2=parts[3].astype(np.float32),
    )


def save_loss_curve(curve: list[float], path: str | Path) -> None:
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(curve)]
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))
