"""Frozen projection heads with trainable low-rank updates, a symmetric
contrastive objective, analytic gradients, and a deterministic SGD loop.

The frozen map is W; the trainable update is delta_W = (alpha/rank) * B @ A
with A Gaussian-initialized and B zero-initialized, so training starts
exactly at the frozen baseline. No ML framework is involved: forwards,
losses, and gradients are explicit NumPy.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmall,
    DimMismatch,
    FormatError,
    InsufficientData,
    RankTooLarge,
    UnsupportedVersion,
    ZeroVector,
)
from .io_utils import atomic_write_bytes

DEFAULT_RANK = 16
DEFAULT_ALPHA = 32.0
DEFAULT_DROPOUT = 0.05
DEFAULT_LOGIT_SCALE = math.log(1.0 / 0.07)
MOMENTUM = 0.9
NORM_EPS = 1e-12

LORA_MAGIC = b"ALRA"
LORA_VERSION = 1


@dataclass
class ProjectionHead:
    """A frozen projection matrix W of shape (d_out, d_in)."""

    W: np.ndarray
    name: str  # "visual" | "text"

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float32)
        if self.W.ndim != 2:
            raise DimMismatch("projection matrix must be 2-D")

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]


@dataclass
class LoraAdapter:
    """Low-rank factors for one head: A (rank, d_in), B (d_out, rank)."""

    A: np.ndarray
    B: np.ndarray
    rank: int
    alpha: float
    dropout_p: float
    seed: int = 0

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float32)
        self.B = np.ascontiguousarray(self.B, dtype=np.float32)
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise DimMismatch("factor shapes disagree with rank")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


def init_adapter(
    d_in: int,
    d_out: int,
    rank: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
    seed: int = 0,
) -> LoraAdapter:
    """Gaussian A (std 1/sqrt(rank)), zero B: the update starts at zero and
    the adapted head starts exactly at the frozen baseline."""
    if rank > min(d_in, d_out):
        raise RankTooLarge(f"rank {rank} > min({d_in}, {d_out})")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    A = (rng.standard_normal((rank, d_in)) / math.sqrt(rank)).astype(np.float32)
    B = np.zeros((d_out, rank), dtype=np.float32)
    return LoraAdapter(A=A, B=B, rank=rank, alpha=float(alpha), dropout_p=float(dropout_p), seed=seed)


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted dropout: zeros with probability p, survivors scaled 1/(1-p)."""
    keep = rng.random(size=shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def project(
    head: ProjectionHead,
    adapter: LoraAdapter,
    x,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Adapted projection W x + scale * B (A x~), float32.

    Dropout applies to the low-rank branch input only (x~); the frozen path
    always sees the raw x. With B still zero the output is the frozen
    projection bit-for-bit.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (head.d_in,):
        raise DimMismatch(f"x shape {x.shape} != ({head.d_in},)")
    if adapter.d_in != head.d_in or adapter.d_out != head.d_out:
        raise DimMismatch("adapter shape does not fit head")
    base = head.W @ x
    if not adapter.B.any():
        return base  # zero update: identical to the frozen head
    xt = x
    if train_mode and adapter.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        xt = (x * dropout_mask(rng, x.shape, adapter.dropout_p)).astype(np.float32)
    delta = np.float32(adapter.scale) * (adapter.B @ (adapter.A @ xt))
    return base + delta


def l2_normalize(v) -> np.ndarray:
    """v / ||v|| with a double-precision norm; rejects near-zero vectors."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < NORM_EPS:
        raise ZeroVector(f"norm {n:g} below {NORM_EPS:g}")
    return v / n


def merge(head: ProjectionHead, adapter: LoraAdapter) -> np.ndarray:
    """Materialized effective weights W + scale * B @ A (float32)."""
    if adapter.d_in != head.d_in or adapter.d_out != head.d_out:
        raise DimMismatch("adapter shape does not fit head")
    if not adapter.B.any():
        return head.W.copy()
    delta = adapter.scale * (adapter.B.astype(np.float64) @ adapter.A.astype(np.float64))
    return (head.W.astype(np.float64) + delta).astype(np.float32)


# --- batches and loss ---------------------------------------------------------

@dataclass
class TrainBatch:
    """Matched pre-projection features; row i of each side is one pair."""

    image_feats: np.ndarray  # (n, d_in_img)
    text_feats: np.ndarray  # (n, d_in_txt)

    def __post_init__(self):
        self.image_feats = np.asarray(self.image_feats, dtype=np.float32)
        self.text_feats = np.asarray(self.text_feats, dtype=np.float32)
        if self.image_feats.shape[0] != self.text_feats.shape[0]:
            raise DimMismatch("image/text row counts differ")
        if self.image_feats.shape[0] < 2:
            raise BatchTooSmall("contrastive batches need n >= 2")

    def __len__(self) -> int:
        return self.image_feats.shape[0]


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-2
    seed: int = 0
    logit_scale: float = DEFAULT_LOGIT_SCALE  # fixed, not trained
    momentum: bool = False  # SGD with momentum 0.9 when set

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def contrastive_loss(img_emb, txt_emb, logit_scale: float = DEFAULT_LOGIT_SCALE) -> float:
    """Symmetric cross-entropy over scaled cosine logits, in-batch negatives.

    logits S = exp(logit_scale) * img @ txt.T for L2-normalized rows; the
    loss averages row-wise and column-wise cross-entropy against the
    diagonal. Computed in double precision with max-subtracted logsumexp.
    """
    U = np.asarray(img_emb, dtype=np.float64)
    V = np.asarray(txt_emb, dtype=np.float64)
    if U.shape != V.shape or U.ndim != 2:
        raise DimMismatch(f"embedding shapes {U.shape} vs {V.shape}")
    if U.shape[0] < 2:
        raise BatchTooSmall("contrastive loss needs n >= 2")
    S = math.exp(logit_scale) * (U @ V.T)
    return 0.5 * (_mean_diag_ce(S) + _mean_diag_ce(S.T))


def _mean_diag_ce(S: np.ndarray) -> float:
    m = S.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(S - m).sum(axis=1))
    return float(np.mean(lse - np.diag(S)))


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1, keepdims=True)
    e = np.exp(S - m)
    return e / e.sum(axis=1, keepdims=True)


def batch_embeddings(
    head: ProjectionHead,
    adapter: LoraAdapter,
    X: np.ndarray,
    mask: np.ndarray | None = None,
    A: np.ndarray | None = None,
    B: np.ndarray | None = None,
):
    """Normalized adapted embeddings for a feature batch, in float64.

    mask, if given, is a pre-scaled inverted-dropout mask applied to the
    low-rank branch input only. A/B override the adapter factors (used by
    the finite-difference harness to evaluate perturbed parameters).
    """
    A64 = adapter.A.astype(np.float64) if A is None else np.asarray(A, dtype=np.float64)
    B64 = adapter.B.astype(np.float64) if B is None else np.asarray(B, dtype=np.float64)
    X64 = np.asarray(X, dtype=np.float64)
    Xt = X64 if mask is None else X64 * mask
    H = Xt @ A64.T  # (n, r)
    Z = X64 @ head.W.astype(np.float64).T + adapter.scale * (H @ B64.T)
    norms = np.linalg.norm(Z, axis=1)
    if (norms < NORM_EPS).any():
        raise ZeroVector("a projected batch row has near-zero norm")
    U = Z / norms[:, None]
    return U, Z, H, Xt, norms


@dataclass
class AdapterGradients:
    dA_img: np.ndarray
    dB_img: np.ndarray
    dA_txt: np.ndarray
    dB_txt: np.ndarray


def loss_and_grad(
    batch: TrainBatch,
    heads: tuple[ProjectionHead, ProjectionHead],
    adapters: tuple[LoraAdapter, LoraAdapter],
    config: TrainConfig,
    masks: tuple[np.ndarray | None, np.ndarray | None] = (None, None),
) -> tuple[float, AdapterGradients]:
    """Loss plus exact analytic gradients w.r.t. the four adapter factors.

    Backprop runs loss -> normalization -> projection; the frozen W never
    receives gradient. The normalization Jacobian contributes
    (g - (g.u)u)/||z|| per row.
    """
    head_img, head_txt = heads
    ad_img, ad_txt = adapters
    mask_img, mask_txt = masks
    n = len(batch)

    U, _, H_img, Xt_img, norms_img = batch_embeddings(head_img, ad_img, batch.image_feats, mask_img)
    V, _, H_txt, Xt_txt, norms_txt = batch_embeddings(head_txt, ad_txt, batch.text_feats, mask_txt)

    c = math.exp(config.logit_scale)
    S = c * (U @ V.T)
    loss = 0.5 * (_mean_diag_ce(S) + _mean_diag_ce(S.T))

    P_rows = _softmax_rows(S)
    P_cols = _softmax_rows(S.T).T
    G = (P_rows + P_cols - 2.0 * np.eye(n)) / (2.0 * n)  # dLoss/dS

    dU = c * (G @ V)
    dV = c * (G.T @ U)

    dZ_img = (dU - (dU * U).sum(axis=1, keepdims=True) * U) / norms_img[:, None]
    dZ_txt = (dV - (dV * V).sum(axis=1, keepdims=True) * V) / norms_txt[:, None]

    B_img64 = ad_img.B.astype(np.float64)
    B_txt64 = ad_txt.B.astype(np.float64)
    grads = AdapterGradients(
        dA_img=ad_img.scale * (dZ_img @ B_img64).T @ Xt_img,
        dB_img=ad_img.scale * dZ_img.T @ H_img,
        dA_txt=ad_txt.scale * (dZ_txt @ B_txt64).T @ Xt_txt,
        dB_txt=ad_txt.scale * dZ_txt.T @ H_txt,
    )
    return float(loss), grads


def grad(
    batch: TrainBatch,
    heads: tuple[ProjectionHead, ProjectionHead],
    adapters: tuple[LoraAdapter, LoraAdapter],
    config: TrainConfig,
    masks: tuple[np.ndarray | None, np.ndarray | None] = (None, None),
) -> AdapterGradients:
    """Analytic adapter gradients; dropout is off unless fixed masks are given."""
    return loss_and_grad(batch, heads, adapters, config, masks)[1]


# --- training loop -------------------------------------------------------------

@dataclass
class PairFeatures:
    """Feature store for aligned pairs: one image row and one text row per qid."""

    qids: list[str]
    image: np.ndarray  # (n, d_in_img) float32
    text: np.ndarray  # (n, d_in_txt) float32

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.text = np.ascontiguousarray(self.text, dtype=np.float32)
        if not (len(self.qids) == self.image.shape[0] == self.text.shape[0]):
            raise DimMismatch("qids/image/text row counts differ")

    def __len__(self) -> int:
        return len(self.qids)


def train(
    features: PairFeatures,
    heads: tuple[ProjectionHead, ProjectionHead],
    config: TrainConfig,
    *,
    rank: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> tuple[LoraAdapter, LoraAdapter, list[float]]:
    """SGD over shuffled in-batch-negative batches; returns both adapters and
    the mean training loss per epoch.

    The epoch RNG (shuffle order and dropout masks) restarts from the run
    seed each epoch, so a zero learning rate leaves both the adapters and
    the loss history exactly constant. Single-threaded by contract: a fixed
    seed reproduces the trajectory bit-for-bit.
    """
    head_img, head_txt = heads
    n = len(features)
    if n < 2 * config.batch_size:
        raise InsufficientData(f"need at least {2 * config.batch_size} pairs, have {n}")

    ad_img = init_adapter(head_img.d_in, head_img.d_out, rank, alpha, dropout_p, seed=config.seed)
    ad_txt = init_adapter(head_txt.d_in, head_txt.d_out, rank, alpha, dropout_p, seed=config.seed + 1)

    vel = None
    if config.momentum:
        vel = [np.zeros(a.shape, dtype=np.float64) for a in (ad_img.A, ad_img.B, ad_txt.A, ad_txt.B)]

    history: list[float] = []
    for _ in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(config.seed))
        order = rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # drop an undersized tail batch
            batch = TrainBatch(features.image[idx], features.text[idx])
            masks: tuple[np.ndarray | None, np.ndarray | None] = (None, None)
            if dropout_p > 0.0:
                masks = (
                    dropout_mask(rng, batch.image_feats.shape, dropout_p),
                    dropout_mask(rng, batch.text_feats.shape, dropout_p),
                )
            loss, g = loss_and_grad(batch, (head_img, head_txt), (ad_img, ad_txt), config, masks)
            batch_losses.append(loss)

            steps = (g.dA_img, g.dB_img, g.dA_txt, g.dB_txt)
            if vel is not None:
                for v, s in zip(vel, steps):
                    v *= MOMENTUM
                    v += s
                steps = tuple(vel)
            lr = config.learning_rate
            ad_img.A = (ad_img.A.astype(np.float64) - lr * steps[0]).astype(np.float32)
            ad_img.B = (ad_img.B.astype(np.float64) - lr * steps[1]).astype(np.float32)
            ad_txt.A = (ad_txt.A.astype(np.float64) - lr * steps[2]).astype(np.float32)
            ad_txt.B = (ad_txt.B.astype(np.float64) - lr * steps[3]).astype(np.float32)
        history.append(float(np.mean(batch_losses)))
    return ad_img, ad_txt, history


# --- adapter files ---------------------------------------------------------------

def save_adapter(adapter: LoraAdapter, path, head_name: str = "", config_digest: str = "") -> None:
    """Binary .lora file; round-trips factor bits exactly."""
    name_raw = head_name.encode("utf-8")
    digest_raw = config_digest.encode("utf-8")
    buf = bytearray()
    buf += LORA_MAGIC
    buf += struct.pack("<I", LORA_VERSION)
    buf += struct.pack("<I", len(name_raw)) + name_raw
    buf += struct.pack("<IIIffQ", adapter.d_in, adapter.d_out, adapter.rank,
                       adapter.alpha, adapter.dropout_p, adapter.seed)
    buf += struct.pack("<I", len(digest_raw)) + digest_raw
    buf += adapter.A.tobytes(order="C")
    buf += adapter.B.tobytes(order="C")
    atomic_write_bytes(path, bytes(buf))


def load_adapter(path) -> tuple[LoraAdapter, str, str]:
    """Read a .lora file; returns (adapter, head_name, config_digest)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError("truncated header", len(blob))
    if blob[:4] != LORA_MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != LORA_VERSION:
        raise UnsupportedVersion(f"lora format version {version} unsupported")
    offset = 8

    def _read_str(off: int) -> tuple[str, int]:
        if off + 4 > len(blob):
            raise FormatError("string length truncated", off)
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + length > len(blob):
            raise FormatError("string bytes truncated", off)
        return blob[off : off + length].decode("utf-8"), off + length

    head_name, offset = _read_str(offset)
    fixed = struct.Struct("<IIIffQ")
    if offset + fixed.size > len(blob):
        raise FormatError("fixed fields truncated", offset)
    d_in, d_out, rank, alpha, dropout_p, seed = fixed.unpack_from(blob, offset)
    offset += fixed.size
    config_digest, offset = _read_str(offset)

    a_bytes = rank * d_in * 4
    b_bytes = d_out * rank * 4
    if len(blob) - offset != a_bytes + b_bytes:
        raise FormatError("factor payload size mismatch", offset)
    A = np.frombuffer(blob, dtype="<f4", count=rank * d_in, offset=offset).reshape(rank, d_in)
    offset += a_bytes
    B = np.frombuffer(blob, dtype="<f4", count=d_out * rank, offset=offset).reshape(d_out, rank)
    adapter = LoraAdapter(A=A.copy(), B=B.copy(), rank=rank, alpha=float(alpha),
                          dropout_p=float(dropout_p), seed=seed)
    return adapter, head_name, config_digest
