"""A small trainable self-attention encoder for text pairs.

Pure numpy, float64, with hand-written backward passes so analytic gradients
can be checked against finite differences. The vocabulary is whitespace +
lowercase over the training corpus; unseen tokens map to a shared unknown
symbol. Pairs are encoded BERT-style as [CLS] a [SEP] b [SEP] with segment
embeddings, pooled either at the leading position or by masked mean.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = 0, 1, 2, 3
_SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Token-to-id mapping with reserved special symbols."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != _SPECIALS:
            tokens = list(_SPECIALS) + [t for t in tokens if t not in _SPECIALS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> "Vocab":
        counts = Counter(t for text in texts for t in tokenize(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [t for t, c in ranked if c >= min_freq]
        if max_size is not None:
            kept = kept[: max(0, max_size - len(_SPECIALS))]
        return cls(list(_SPECIALS) + kept)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]


def truncate_pair(tokens_a: list[str], tokens_b: list[str], max_tokens: int) -> tuple[list[str], list[str]]:
    """Trim tokens alternately from the end of the longer segment until the
    joint encoded length ([CLS] a [SEP] b [SEP]) fits within max_tokens."""
    budget = max_tokens - 3
    if budget < 0:
        budget = 0
    a, b = list(tokens_a), list(tokens_b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b) and a:
            a.pop()
        elif b:
            b.pop()
        else:
            break
    return a, b


def _gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = c * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_grad(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _linear_grad(x: np.ndarray, dy: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 32
    layers: int = 2
    heads: int = 2
    ffn_width: int = 64
    max_len: int = 200
    pooling: str = "cls"  # or "mean"

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


class TinyTransformerEncoder:
    """Two-ish layers of post-norm self-attention over a tiny vocabulary.

    Exposes forward/backward on prepared id batches for the trainer, and a
    plain encode() for inference. Parameters live in a flat name->array dict.
    """

    def __init__(self, vocab: Vocab, config: EncoderConfig = EncoderConfig(), rng_seed: int = 0):
        self.vocab = vocab
        self.config = config
        rng = np.random.default_rng(rng_seed)
        d, f = config.width, config.ffn_width
        # fan-in scaling: at this width, the convention-sized 0.02 init leaves
        # attention outputs orders of magnitude below the residual stream and
        # the model cannot separate examples within a desk-scale step budget
        w_scale = 1.0 / math.sqrt(d)
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, 0.5, (len(vocab), d)),
            "pos_emb": rng.normal(0.0, 0.5, (config.max_len, d)),
            "seg_emb": rng.normal(0.0, 0.5, (2, d)),
        }
        for i in range(config.layers):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{i}.{name}"] = rng.normal(0.0, w_scale, (d, d))
                p[f"l{i}.b{name[1]}"] = np.zeros(d)
            p[f"l{i}.ln1_g"] = np.ones(d)
            p[f"l{i}.ln1_b"] = np.zeros(d)
            p[f"l{i}.w1"] = rng.normal(0.0, w_scale, (d, f))
            p[f"l{i}.b1"] = np.zeros(f)
            p[f"l{i}.w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
            p[f"l{i}.b2"] = np.zeros(d)
            p[f"l{i}.ln2_g"] = np.ones(d)
            p[f"l{i}.ln2_b"] = np.zeros(d)
        self.params = p

    @property
    def width(self) -> int:
        return self.config.width

    # ---- input preparation -------------------------------------------------

    def prepare(self, text_a: str, text_b: str, max_tokens: int) -> tuple[list[int], list[int]]:
        """Tokenize, truncate, and wrap a pair into ids and segment ids."""
        cap = min(max_tokens, self.config.max_len)
        tokens_a, tokens_b = truncate_pair(tokenize(text_a), tokenize(text_b), cap)
        ids = [CLS] + self.vocab.ids(tokens_a) + [SEP] + self.vocab.ids(tokens_b) + [SEP]
        segs = [0] * (len(tokens_a) + 2) + [1] * (len(tokens_b) + 1)
        return ids, segs

    def prepare_batch(self, pairs: Sequence[tuple[str, str]], max_tokens: int):
        """Pad a batch of prepared pairs to a common length."""
        prepped = [self.prepare(a, b, max_tokens) for a, b in pairs]
        length = max(len(ids) for ids, _ in prepped)
        n = len(prepped)
        ids = np.full((n, length), PAD, dtype=np.int64)
        segs = np.zeros((n, length), dtype=np.int64)
        mask = np.zeros((n, length), dtype=np.float64)
        for row, (i, s) in enumerate(prepped):
            ids[row, : len(i)] = i
            segs[row, : len(s)] = s
            mask[row, : len(i)] = 1.0
        return ids, segs, mask

    # ---- forward / backward ------------------------------------------------

    def forward(self, ids: np.ndarray, segs: np.ndarray, mask: np.ndarray):
        """Run the encoder; returns (pooled [B, width], cache for backward)."""
        p = self.params
        cfg = self.config
        n, length = ids.shape
        h, dk = cfg.heads, cfg.width // cfg.heads

        x = p["tok_emb"][ids] + p["pos_emb"][:length][None, :, :] + p["seg_emb"][segs]
        key_bias = (1.0 - mask)[:, None, None, :] * -1e9

        layer_caches = []
        for i in range(cfg.layers):
            x_in = x
            q = x @ p[f"l{i}.wq"] + p[f"l{i}.bq"]
            k = x @ p[f"l{i}.wk"] + p[f"l{i}.bk"]
            v = x @ p[f"l{i}.wv"] + p[f"l{i}.bv"]
            qh = q.reshape(n, length, h, dk).transpose(0, 2, 1, 3)
            kh = k.reshape(n, length, h, dk).transpose(0, 2, 1, 3)
            vh = v.reshape(n, length, h, dk).transpose(0, 2, 1, 3)
            scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dk) + key_bias
            attn = _softmax(scores)
            ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(n, length, cfg.width)
            attn_out = ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"]
            x1, ln1_cache = _layernorm(x_in + attn_out, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            h1 = x1 @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
            act = _gelu(h1)
            ffn_out = act @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
            x, ln2_cache = _layernorm(x1 + ffn_out, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            layer_caches.append((x_in, qh, kh, vh, attn, ctx, ln1_cache, x1, h1, act, ln2_cache))

        if cfg.pooling == "cls":
            pooled = x[:, 0, :]
        else:
            denom = mask.sum(axis=1, keepdims=True)
            pooled = (x * mask[:, :, None]).sum(axis=1) / denom

        cache = (ids, segs, mask, layer_caches)
        return pooled, cache

    def backward(self, cache, grad_pooled: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate d(loss)/d(pooled) to every encoder parameter."""
        p = self.params
        cfg = self.config
        ids, segs, mask, layer_caches = cache
        n, length = ids.shape
        h, dk = cfg.heads, cfg.width // cfg.heads
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}

        if cfg.pooling == "cls":
            dx = np.zeros((n, length, cfg.width))
            dx[:, 0, :] = grad_pooled
        else:
            denom = mask.sum(axis=1, keepdims=True)
            dx = (grad_pooled / denom)[:, None, :] * mask[:, :, None]

        for i in reversed(range(cfg.layers)):
            x_in, qh, kh, vh, attn, ctx, ln1_cache, x1, h1, act, ln2_cache = layer_caches[i]

            dsum2, dg, db = _layernorm_grad(dx, ln2_cache, p[f"l{i}.ln2_g"])
            grads[f"l{i}.ln2_g"] += dg
            grads[f"l{i}.ln2_b"] += db

            dact, dw2, db2 = _linear_grad(act, dsum2, p[f"l{i}.w2"])
            grads[f"l{i}.w2"] += dw2
            grads[f"l{i}.b2"] += db2
            dh1 = dact * _gelu_grad(h1)
            dx1_ffn, dw1, db1 = _linear_grad(x1, dh1, p[f"l{i}.w1"])
            grads[f"l{i}.w1"] += dw1
            grads[f"l{i}.b1"] += db1
            dx1 = dsum2 + dx1_ffn

            dsum1, dg, db = _layernorm_grad(dx1, ln1_cache, p[f"l{i}.ln1_g"])
            grads[f"l{i}.ln1_g"] += dg
            grads[f"l{i}.ln1_b"] += db

            dctx, dwo, dbo = _linear_grad(ctx, dsum1, p[f"l{i}.wo"])
            grads[f"l{i}.wo"] += dwo
            grads[f"l{i}.bo"] += dbo

            dctx_h = dctx.reshape(n, length, h, dk).transpose(0, 2, 1, 3)
            dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
            dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(dk)
            dqh = dscores @ kh
            dkh = dscores.transpose(0, 1, 3, 2) @ qh

            dq = dqh.transpose(0, 2, 1, 3).reshape(n, length, cfg.width)
            dk_ = dkh.transpose(0, 2, 1, 3).reshape(n, length, cfg.width)
            dv = dvh.transpose(0, 2, 1, 3).reshape(n, length, cfg.width)

            dx_q, dwq, dbq = _linear_grad(x_in, dq, p[f"l{i}.wq"])
            dx_k, dwk, dbk = _linear_grad(x_in, dk_, p[f"l{i}.wk"])
            dx_v, dwv, dbv = _linear_grad(x_in, dv, p[f"l{i}.wv"])
            grads[f"l{i}.wq"] += dwq
            grads[f"l{i}.bq"] += dbq
            grads[f"l{i}.wk"] += dwk
            grads[f"l{i}.bk"] += dbk
            grads[f"l{i}.wv"] += dwv
            grads[f"l{i}.bv"] += dbv

            dx = dsum1 + dx_q + dx_k + dx_v

        np.add.at(grads["tok_emb"], ids, dx)
        grads["pos_emb"][:length] += dx.sum(axis=0)
        np.add.at(grads["seg_emb"], segs, dx)
        return grads

    # ---- inference ---------------------------------------------------------

    def encode(self, text_a: str, text_b: str, max_tokens: int) -> np.ndarray:
        """Fixed-width vector for a single pair (inference path)."""
        ids, segs, mask = self.prepare_batch([(text_a, text_b)], max_tokens)
        pooled, _ = self.forward(ids, segs, mask)
        return pooled[0]

    # ---- state -------------------------------------------------------------

    def copy(self) -> "TinyTransformerEncoder":
        clone = object.__new__(TinyTransformerEncoder)
        clone.vocab = self.vocab
        clone.config = self.config
        clone.params = {name: arr.copy() for name, arr in self.params.items()}
        return clone
