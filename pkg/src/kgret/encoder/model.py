"""Small pre-LN transformer encoder with hand-written reverse-mode gradients.

Layout per layer: x += Attn(LN1(x)); x += FFN(LN2(x)), GELU (tanh form) in the
feed-forward block. The sequence vector is the mean over non-PAD positions
(or the first position), optionally L2-normalized. There is no final
LayerNorm so that freshly initialized embeddings have small inner products.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kgret.encoder.tokenizer import PAD, Tokenizer
from kgret.errors import MalformedRecord, NonFiniteActivation, ShapeMismatch

MAGIC = b"KGRE"
FORMAT_VERSION = 1
LN_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_MASK_FILL = -1e9

POOLING = ("mean", "first")


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int = 4096
    dim: int = 128
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ValueError("max_len must be at least 3")


def param_shapes(d: EncoderDims) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in serialization order."""
    shapes = [("tok_emb", (d.vocab_size, d.dim)), ("pos_emb", (d.max_len, d.dim))]
    for i in range(d.layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1_g", (d.dim,)), (p + "ln1_b", (d.dim,)),
            (p + "wq", (d.dim, d.dim)), (p + "bq", (d.dim,)),
            (p + "wk", (d.dim, d.dim)), (p + "bk", (d.dim,)),
            (p + "wv", (d.dim, d.dim)), (p + "bv", (d.dim,)),
            (p + "wo", (d.dim, d.dim)), (p + "bo", (d.dim,)),
            (p + "ln2_g", (d.dim,)), (p + "ln2_b", (d.dim,)),
            (p + "w1", (d.dim, d.ffn_dim)), (p + "b1", (d.ffn_dim,)),
            (p + "w2", (d.ffn_dim, d.dim)), (p + "b2", (d.dim,)),
        ]
    return shapes


def init_params(d: EncoderDims, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """normal(0, 0.02) weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(d):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return params


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


class EncoderModel:
    """Transformer parameters, pooling config and (optionally) a tokenizer."""

    def __init__(
        self,
        dims: EncoderDims,
        params: dict[str, np.ndarray] | None = None,
        tokenizer: Tokenizer | None = None,
        pooling: str = "mean",
        normalize: bool = False,
        seed: int = 0,
        dtype=np.float32,
    ):
        if pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        if tokenizer is not None and tokenizer.vocab_size > dims.vocab_size:
            raise ValueError("tokenizer vocabulary exceeds the embedding table")
        self.dims = dims
        self.params = params if params is not None else init_params(dims, seed, dtype)
        self.tokenizer = tokenizer
        self.pooling = pooling
        self.normalize = normalize
        for name, shape in param_shapes(dims):
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            self.dims, {k: v.copy() for k, v in self.params.items()},
            self.tokenizer, self.pooling, self.normalize,
        )

    def astype(self, dtype) -> "EncoderModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return EncoderModel(self.dims, params, self.tokenizer, self.pooling, self.normalize)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        if self.tokenizer is None:
            raise ValueError("model has no tokenizer attached")
        L = self.dims.max_len
        return np.array([self.tokenizer.encode(t, L) for t in texts], dtype=np.int64).reshape(-1, L)

    # -- forward / backward ---------------------------------------------------

    def forward(self, ids: np.ndarray) -> tuple[np.ndarray, dict]:
        """Pooled embeddings for a (B, Lmax) id batch plus a backward cache.

        Trailing all-PAD columns are trimmed; masking makes that exact.
        """
        # overflow is reported as NonFiniteActivation below, not as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward(ids)

    def _forward(self, ids: np.ndarray) -> tuple[np.ndarray, dict]:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[0] < 1 or ids.shape[1] != self.dims.max_len:
            raise ShapeMismatch(f"ids must have shape (B>=1, {self.dims.max_len}), got {ids.shape}")
        P, d = self.params, self.dims
        nonpad = ids != PAD
        used = int(nonpad.any(0).nonzero()[0].max()) + 1 if nonpad.any() else 1
        ids = ids[:, :used]
        mask = (ids != PAD).astype(self.dtype)
        B, L = ids.shape
        H, dh = d.heads, d.dim // d.heads
        scale = 1.0 / math.sqrt(dh)
        bias = ((1.0 - mask) * _MASK_FILL)[:, None, None, :].astype(self.dtype)

        x = P["tok_emb"][ids] + P["pos_emb"][:L]
        layers = []
        for i in range(d.layers):
            p = f"layer{i}."
            h, ln1 = _layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])
            q = (h @ P[p + "wq"] + P[p + "bq"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (h @ P[p + "wk"] + P[p + "bk"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            v = (h @ P[p + "wv"] + P[p + "bv"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) * scale + bias
            s = s - s.max(-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(-1, keepdims=True)
            ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, d.dim)
            x = x + ctx @ P[p + "wo"] + P[p + "bo"]
            h2, ln2 = _layernorm(x, P[p + "ln2_g"], P[p + "ln2_b"])
            u = h2 @ P[p + "w1"] + P[p + "b1"]
            gu, t = _gelu(u)
            x = x + gu @ P[p + "w2"] + P[p + "b2"]
            layers.append(dict(h=h, ln1=ln1, q=q, k=k, v=v, a=a, ctx=ctx, h2=h2, ln2=ln2, u=u, gu=gu, t=t))

        if self.pooling == "mean":
            count = mask.sum(1, keepdims=True)
            pooled = (x * mask[:, :, None]).sum(1) / count
        else:
            count = None
            pooled = x[:, 0]
        norm = None
        if self.normalize:
            norm = np.sqrt((pooled * pooled).sum(-1, keepdims=True))
            pooled = pooled / norm
        if not np.isfinite(pooled).all():
            raise NonFiniteActivation("encoder produced non-finite embeddings")
        cache = dict(ids=ids, mask=mask, count=count, layers=layers, pooled=pooled, norm=norm)
        return pooled, cache

    def backward(self, cache: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(pooled * upstream) with respect to every parameter."""
        P, d = self.params, self.dims
        ids, mask = cache["ids"], cache["mask"]
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != cache["pooled"].shape:
            raise ShapeMismatch(f"upstream gradient {upstream.shape} vs output {cache['pooled'].shape}")
        B, L = ids.shape
        H, dh = d.heads, d.dim // d.heads
        scale = 1.0 / math.sqrt(dh)
        grads = {name: np.zeros_like(P[name]) for name in P}

        g = upstream
        if self.normalize:
            y = cache["pooled"]
            g = (g - y * (g * y).sum(-1, keepdims=True)) / cache["norm"]
        if self.pooling == "mean":
            dx = mask[:, :, None] * (g / cache["count"])[:, None, :]
        else:
            dx = np.zeros((B, L, d.dim), dtype=self.dtype)
            dx[:, 0] = g

        for i in reversed(range(d.layers)):
            p = f"layer{i}."
            c = cache["layers"][i]
            # feed-forward block
            grads[p + "b2"] += dx.reshape(-1, d.dim).sum(0)
            grads[p + "w2"] += c["gu"].reshape(-1, d.ffn_dim).T @ dx.reshape(-1, d.dim)
            dgu = dx @ P[p + "w2"].T
            du = _gelu_back(dgu, c["u"], c["t"])
            grads[p + "b1"] += du.reshape(-1, d.ffn_dim).sum(0)
            grads[p + "w1"] += c["h2"].reshape(-1, d.dim).T @ du.reshape(-1, d.ffn_dim)
            dh2 = du @ P[p + "w1"].T
            dln, dg_, db_ = _layernorm_back(dh2, P[p + "ln2_g"], c["ln2"])
            grads[p + "ln2_g"] += dg_
            grads[p + "ln2_b"] += db_
            dx = dx + dln
            # attention block
            grads[p + "bo"] += dx.reshape(-1, d.dim).sum(0)
            grads[p + "wo"] += c["ctx"].reshape(-1, d.dim).T @ dx.reshape(-1, d.dim)
            dctx = (dx @ P[p + "wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            a, q, k, v = c["a"], c["q"], c["k"], c["v"]
            da = dctx @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ dctx
            ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            h = c["h"].reshape(-1, d.dim)
            dh_total = np.zeros((B * L, d.dim), dtype=self.dtype)
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                flat = dproj.transpose(0, 2, 1, 3).reshape(-1, d.dim)
                grads[p + "b" + name] += flat.sum(0)
                grads[p + "w" + name] += h.T @ flat
                dh_total += flat @ P[p + "w" + name].T
            dln, dg_, db_ = _layernorm_back(dh_total.reshape(B, L, d.dim), P[p + "ln1_g"], c["ln1"])
            grads[p + "ln1_g"] += dg_
            grads[p + "ln1_b"] += db_
            dx = dx + dln

        np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, d.dim))
        grads["pos_emb"][:L] += dx.sum(0)
        return grads

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        d = self.dims
        flags = POOLING.index(self.pooling) | (int(self.normalize) << 4)
        header = MAGIC + struct.pack(
            "<7I", FORMAT_VERSION, d.vocab_size, d.dim, d.layers, d.heads, d.ffn_dim, d.max_len
        ) + struct.pack("<I", flags)
        body = b"".join(self.params[name].astype("<f4").tobytes() for name, _ in param_shapes(d))
        return header + body

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, tokenizer: Tokenizer | None = None) -> "EncoderModel":
        if len(blob) < 36 or blob[:4] != MAGIC:
            raise MalformedRecord(0, "not a KGRE model file")
        version, V, D, N, H, F, Lmax = struct.unpack_from("<7I", blob, 4)
        if version != FORMAT_VERSION:
            raise MalformedRecord(0, f"unsupported model format version {version}")
        (flags,) = struct.unpack_from("<I", blob, 32)
        dims = EncoderDims(V, D, N, H, F, Lmax)
        offset = 36
        params = {}
        for name, shape in param_shapes(dims):
            n = int(np.prod(shape))
            if offset + 4 * n > len(blob):
                raise MalformedRecord(0, "model file is truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            params[name] = arr.astype(np.float32)
            offset += 4 * n
        if offset != len(blob):
            raise MalformedRecord(0, "model file has trailing or missing bytes")
        return cls(dims, params, tokenizer, POOLING[flags & 0xF], bool(flags >> 4 & 1))

    @classmethod
    def load(cls, path: str | Path, tokenizer: Tokenizer | None = None) -> "EncoderModel":
        return cls.from_bytes(Path(path).read_bytes(), tokenizer)

    def dims_record(self) -> dict:
        return asdict(self.dims)


def embed(model: EncoderModel, ids: np.ndarray) -> np.ndarray:
    return model.forward(ids)[0]


def backward(model: EncoderModel, ids: np.ndarray, upstream_grad: np.ndarray) -> dict[str, np.ndarray]:
    _, cache = model.forward(ids)
    return model.backward(cache, upstream_grad)


def embed_texts(model: EncoderModel, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """Embed texts in chunks; rows come back in input order."""
    if not texts:
        return np.zeros((0, model.dims.dim), dtype=model.dtype)
    out = []
    for start in range(0, len(texts), batch_size):
        out.append(embed(model, model.encode_texts(texts[start:start + batch_size])))
    return np.concatenate(out)
