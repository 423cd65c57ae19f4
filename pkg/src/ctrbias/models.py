"""FM and NFM models over sparse field features, with exact gradients.

Both architectures share the scoring form

    logit(x) = w0 + sum_i w_i x_i + f(x)

where f is the second-order part. The pairwise interactions are computed
through the sum-square identity

    bi_k(x) = 0.5 * [(sum_i x_i V_ik)^2 - sum_i x_i^2 V_ik^2]

which is linear in the number of live features. FM scores f = sum_k bi_k;
NFM feeds the bi-interaction vector through one ReLU hidden layer and a
linear readout. Padded entries (value 0) contribute nothing to any term.

Serialization is a fixed little-endian binary layout with a schema digest
and a provenance record, so downstream tools can refuse weight files that
do not match the feature space they expect.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ModelFormatError
from .numeric import bce_loss, sigmoid

MAGIC = b"CTRB"
FORMAT_VERSION = 1
ARCH_TAGS = {"fm": 0, "nfm": 1}
ARCH_NAMES = {v: k for k, v in ARCH_TAGS.items()}
DEFAULT_HIDDEN = 64
PREDICT_CHUNK = 8192
COMPONENTS = ("full", "linear_only", "high_order_only", "zero_bias_linear")


@dataclass
class MlpParams:
    """One hidden ReLU layer and a linear readout for the NFM head."""

    W1: np.ndarray
    b1: np.ndarray
    w_out: np.ndarray
    b_out: float

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.w_out.copy(),
                         float(self.b_out))

    def l2_norm_sq(self) -> float:
        return float((self.W1 ** 2).sum() + (self.b1 ** 2).sum()
                     + (self.w_out ** 2).sum() + self.b_out ** 2)


@dataclass
class ModelParams:
    """All weights of one model plus identity metadata.

    schema_digest ties the weight vector to the feature space it was
    trained on; provenance records how the weights were produced (training
    run, or a post-hoc adjustment of another model).
    """

    arch: str
    w0: float
    w: np.ndarray
    V: np.ndarray
    mlp: MlpParams | None = None
    schema_digest: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCH_TAGS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch == "nfm" and self.mlp is None:
            raise ConfigError("nfm requires mlp parameters")
        if self.w.ndim != 1 or self.V.ndim != 2 or self.V.shape[0] != self.w.shape[0]:
            raise ConfigError("w must be (n,) and V (n, d)")

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, float(self.w0), self.w.copy(), self.V.copy(),
                           self.mlp.copy() if self.mlp else None,
                           self.schema_digest, dict(self.provenance))

    def l2_norm_sq(self) -> float:
        """Squared norm of all regularized weights; the global bias is exempt."""
        total = float((self.w ** 2).sum() + (self.V ** 2).sum())
        if self.mlp is not None:
            total += self.mlp.l2_norm_sq()
        return total


def init_params(n: int, d: int, arch: str, seed: int, hidden: int = DEFAULT_HIDDEN,
                v_scale: float = 0.01, schema_digest: str = "") -> ModelParams:
    """Fresh weights: zero linear part, small normal embeddings, He-init MLP."""
    if n < 1 or d < 1:
        raise ConfigError(f"need n >= 1 and d >= 1, got n={n} d={d}")
    rng = np.random.default_rng(seed)
    V = rng.normal(0.0, v_scale, size=(n, d))
    mlp = None
    if arch == "nfm":
        mlp = MlpParams(
            W1=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, hidden)),
            b1=np.zeros(hidden),
            w_out=rng.normal(0.0, np.sqrt(2.0 / hidden), size=hidden),
            b_out=0.0,
        )
    return ModelParams(arch, 0.0, np.zeros(n), V, mlp, schema_digest,
                       provenance={"created_by": "init", "seed": seed})


@dataclass
class ForwardCache:
    """Intermediates kept for the backward pass of one batch."""

    indices: np.ndarray
    values: np.ndarray
    gathered_V: np.ndarray
    sum_v: np.ndarray
    bi: np.ndarray
    bi_used: np.ndarray
    z1: np.ndarray | None
    a1_used: np.ndarray | None
    mask_bi: np.ndarray | None
    mask_hidden: np.ndarray | None
    logits: np.ndarray


@dataclass
class PredictionParts:
    """Per-sample decomposition of the logit into its additive pieces."""

    logits: np.ndarray
    linear: np.ndarray
    high_order: np.ndarray
    bias_linear: np.ndarray


def _interaction(params: ModelParams, indices, values):
    gathered = params.V[indices]
    xv = values[..., None] * gathered
    sum_v = xv.sum(axis=1)
    sum_sq = ((values ** 2)[..., None] * gathered ** 2).sum(axis=1)
    bi = 0.5 * (sum_v * sum_v - sum_sq)
    return bi, sum_v, gathered


def forward(params: ModelParams, indices, values, train: bool = False,
            dropout: tuple[float, float] = (0.0, 0.0),
            rng: np.random.Generator | None = None) -> ForwardCache:
    """Score a batch, keeping intermediates. Dropout only fires when train=True.

    dropout = (p_interaction, p_hidden); inverted scaling keeps expected
    activations unchanged, so evaluation needs no compensation.
    """
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    linear = params.w0 + (params.w[indices] * values).sum(axis=1)
    bi, sum_v, gathered = _interaction(params, indices, values)

    p_bi, p_h = dropout if train else (0.0, 0.0)
    mask_bi = mask_hidden = None
    bi_used = bi
    if p_bi > 0:
        if rng is None:
            raise ConfigError("dropout requires a random generator")
        mask_bi = (rng.random(bi.shape) >= p_bi) / (1.0 - p_bi)
        bi_used = bi * mask_bi

    if params.arch == "fm":
        high = bi_used.sum(axis=1)
        z1 = a1_used = None
    else:
        mlp = params.mlp
        z1 = bi_used @ mlp.W1 + mlp.b1
        a1 = np.maximum(z1, 0.0)
        a1_used = a1
        if p_h > 0:
            if rng is None:
                raise ConfigError("dropout requires a random generator")
            mask_hidden = (rng.random(a1.shape) >= p_h) / (1.0 - p_h)
            a1_used = a1 * mask_hidden
        high = a1_used @ mlp.w_out + mlp.b_out

    logits = linear + high
    return ForwardCache(indices, values, gathered, sum_v, bi, bi_used,
                        z1, a1_used, mask_bi, mask_hidden, logits)


def predict(params: ModelParams, indices, values, component: str = "full",
            bias_range: tuple[int, int] | None = None,
            chunk: int = PREDICT_CHUNK) -> np.ndarray:
    """Logits for a dataset-sized batch, computed in bounded-memory chunks.

    component selects which additive pieces enter the logit;
    "zero_bias_linear" scores as if every linear weight inside bias_range
    were zero, leaving embeddings untouched.
    """
    if component not in COMPONENTS:
        raise ConfigError(f"unknown component {component!r}")
    if component == "zero_bias_linear" and bias_range is None:
        raise ConfigError("zero_bias_linear needs the bias index range")
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    out = np.empty(len(indices))
    for lo in range(0, len(indices), chunk):
        idx = indices[lo:lo + chunk]
        val = values[lo:lo + chunk]
        wx = params.w[idx] * val
        if component == "zero_bias_linear":
            start, end = bias_range
            wx = np.where((idx >= start) & (idx < end), 0.0, wx)
        linear = params.w0 + wx.sum(axis=1)
        if component == "linear_only":
            out[lo:lo + chunk] = linear
            continue
        bi, _, _ = _interaction(params, idx, val)
        if params.arch == "fm":
            high = bi.sum(axis=1)
        else:
            mlp = params.mlp
            a1 = np.maximum(bi @ mlp.W1 + mlp.b1, 0.0)
            high = a1 @ mlp.w_out + mlp.b_out
        if component == "high_order_only":
            out[lo:lo + chunk] = params.w0 + high
        else:
            out[lo:lo + chunk] = linear + high
    return out


def prediction_parts(params: ModelParams, indices, values,
                     bias_range: tuple[int, int],
                     chunk: int = PREDICT_CHUNK) -> PredictionParts:
    """Per-sample linear, high-order, and bias-field linear contributions."""
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = len(indices)
    linear = np.empty(n)
    high = np.empty(n)
    bias_linear = np.empty(n)
    start, end = bias_range
    for lo in range(0, n, chunk):
        idx = indices[lo:lo + chunk]
        val = values[lo:lo + chunk]
        wx = params.w[idx] * val
        linear[lo:lo + chunk] = wx.sum(axis=1)
        in_bias = (idx >= start) & (idx < end)
        bias_linear[lo:lo + chunk] = np.where(in_bias, wx, 0.0).sum(axis=1)
        bi, _, _ = _interaction(params, idx, val)
        if params.arch == "fm":
            high[lo:lo + chunk] = bi.sum(axis=1)
        else:
            mlp = params.mlp
            a1 = np.maximum(bi @ mlp.W1 + mlp.b1, 0.0)
            high[lo:lo + chunk] = a1 @ mlp.w_out + mlp.b_out
    return PredictionParts(params.w0 + linear + high, linear, high, bias_linear)


def loss_and_grads(params: ModelParams, indices, values, labels, l2: float = 0.0,
                   train: bool = False, dropout: tuple[float, float] = (0.0, 0.0),
                   rng: np.random.Generator | None = None):
    """Mean BCE plus L2 penalty, and its exact gradient for every weight.

    Returns (loss, grads, cache) with grads keyed "w0", "w", "V" and, for
    NFM, "W1", "b1", "w_out", "b_out". The L2 term covers w, V and the MLP
    but not the global bias w0.
    """
    labels = np.asarray(labels, dtype=np.float64)
    cache = forward(params, indices, values, train=train, dropout=dropout, rng=rng)
    m = len(labels)
    loss = float(np.mean(bce_loss(cache.logits, labels))) + l2 * params.l2_norm_sq()

    dlogit = (sigmoid(cache.logits) - labels) / m
    grads: dict[str, np.ndarray | float] = {}
    grads["w0"] = float(dlogit.sum())
    dw = np.zeros_like(params.w)
    np.add.at(dw, cache.indices.ravel(), (dlogit[:, None] * cache.values).ravel())

    if params.arch == "fm":
        dbi_used = np.broadcast_to(dlogit[:, None], cache.bi.shape)
    else:
        mlp = params.mlp
        da1_used = dlogit[:, None] * mlp.w_out
        da1 = da1_used if cache.mask_hidden is None else da1_used * cache.mask_hidden
        dz1 = da1 * (cache.z1 > 0)
        grads["W1"] = cache.bi_used.T @ dz1 + 2.0 * l2 * mlp.W1
        grads["b1"] = dz1.sum(axis=0) + 2.0 * l2 * mlp.b1
        grads["w_out"] = cache.a1_used.T @ dlogit + 2.0 * l2 * mlp.w_out
        grads["b_out"] = float(dlogit.sum()) + 2.0 * l2 * mlp.b_out
        dbi_used = dz1 @ mlp.W1.T

    dbi = dbi_used if cache.mask_bi is None else dbi_used * cache.mask_bi
    # d bi_k / d V_jk = x_j * sum_v_k - x_j^2 * V_jk, scattered per live entry
    val = cache.values
    contrib = (val[..., None] * (dbi[:, None, :] * cache.sum_v[:, None, :])
               - (val ** 2)[..., None] * dbi[:, None, :] * cache.gathered_V)
    dV = np.zeros_like(params.V)
    np.add.at(dV, cache.indices.ravel(), contrib.reshape(-1, params.d))

    grads["w"] = dw + 2.0 * l2 * params.w
    grads["V"] = dV + 2.0 * l2 * params.V
    return loss, grads, cache


def pairwise_logit_reference(params: ModelParams, sample_indices, sample_values) -> float:
    """Quadratic-time FM score for one sample, for checking the fast path.

    Only valid for arch == "fm"; sums w_i x_i and all i < j pairwise
    dot-product interactions explicitly.
    """
    if params.arch != "fm":
        raise ConfigError("reference scorer only covers fm")
    idx = np.asarray(sample_indices, dtype=np.int64)
    val = np.asarray(sample_values, dtype=np.float64)
    total = params.w0
    for i in range(len(idx)):
        total += params.w[idx[i]] * val[i]
    for i in range(len(idx)):
        for j in range(i + 1, len(idx)):
            total += float(params.V[idx[i]] @ params.V[idx[j]]) * val[i] * val[j]
    return float(total)


def serialize(params: ModelParams) -> bytes:
    """Fixed binary layout; equal params always produce equal bytes."""
    digest_hex = params.schema_digest or "0" * 64
    try:
        digest_raw = bytes.fromhex(digest_hex)
    except ValueError:
        raise ConfigError(f"schema digest is not hex: {params.schema_digest!r}")
    if len(digest_raw) != 32:
        raise ConfigError("schema digest must be 32 bytes of hex")
    prov = json.dumps(params.provenance, sort_keys=True,
                      separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += digest_raw
    out += struct.pack("<B", ARCH_TAGS[params.arch])
    out += struct.pack("<I", len(prov))
    out += prov
    out += struct.pack("<QQ", params.n, params.d)
    out += struct.pack("<d", params.w0)
    out += np.ascontiguousarray(params.w, dtype="<f8").tobytes()
    out += np.ascontiguousarray(params.V, dtype="<f8").tobytes()
    if params.arch == "nfm":
        mlp = params.mlp
        hidden = mlp.b1.shape[0]
        out += struct.pack("<Q", hidden)
        out += np.ascontiguousarray(mlp.W1, dtype="<f8").tobytes()
        out += np.ascontiguousarray(mlp.b1, dtype="<f8").tobytes()
        out += np.ascontiguousarray(mlp.w_out, dtype="<f8").tobytes()
        out += struct.pack("<d", mlp.b_out)
    return bytes(out)


class _Cursor:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise ModelFormatError(
                f"{self.origin}: truncated, needed {count} bytes at offset {self.pos}"
            )
        chunk = self.buf[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def deserialize(buf: bytes, origin: str = "<bytes>") -> ModelParams:
    cur = _Cursor(buf, origin)
    if cur.take(4) != MAGIC:
        raise ModelFormatError(f"{origin}: bad magic, not a model file")
    (version,) = cur.unpack("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{origin}: unsupported format version {version}")
    digest_hex = cur.take(32).hex()
    (arch_tag,) = cur.unpack("<B")
    if arch_tag not in ARCH_NAMES:
        raise ModelFormatError(f"{origin}: unknown architecture tag {arch_tag}")
    arch = ARCH_NAMES[arch_tag]
    (prov_len,) = cur.unpack("<I")
    try:
        provenance = json.loads(cur.take(prov_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{origin}: corrupt provenance record: {exc}")
    n, d = cur.unpack("<QQ")
    (w0,) = cur.unpack("<d")
    w = cur.floats(n)
    V = cur.floats(n * d).reshape(n, d)
    mlp = None
    if arch == "nfm":
        (hidden,) = cur.unpack("<Q")
        W1 = cur.floats(d * hidden).reshape(d, hidden)
        b1 = cur.floats(hidden)
        w_out = cur.floats(hidden)
        (b_out,) = cur.unpack("<d")
        mlp = MlpParams(W1, b1, w_out, float(b_out))
    if cur.pos != len(buf):
        raise ModelFormatError(f"{origin}: {len(buf) - cur.pos} trailing bytes")
    return ModelParams(arch, float(w0), w, V, mlp, digest_hex, provenance)


def save_model(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_model(path, expected_schema_digest: str | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        params = deserialize(fh.read(), origin=str(path))
    if (expected_schema_digest is not None
            and params.schema_digest != expected_schema_digest):
        raise ModelFormatError(
            f"{path}: model was trained on a different feature schema "
            f"({params.schema_digest[:12]}... != {expected_schema_digest[:12]}...)"
        )
    return params


def model_digest(params: ModelParams) -> str:
    return hashlib.sha256(serialize(params)).hexdigest()
