"""Transformer encoder-decoder with a pointer-generator output layer.

Blocks are post-norm (residual, then layer norm).  The output layer mixes a
softmax over the fixed vocabulary with a copy distribution over source
positions; copied probability mass is scattered into an extended vocabulary
that numbers each example's source OOV words after the fixed vocabulary.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, PAD, UNK
from .seeding import derive_rng

LOG_EPS = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    dropout: float = 0.1
    tie_embeddings: bool = True
    max_positions: int = 256

    def __post_init__(self):
        for name in ("vocab_size", "n_layers_enc", "n_layers_dec", "d_model",
                     "n_heads", "d_ffn", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "desk": dict(n_layers_enc=2, n_layers_dec=2, d_model=64, n_heads=4, d_ffn=256,
                 dropout=0.1, tie_embeddings=True, max_positions=256),
    "paper": dict(vocab_size=50000 + 4, n_layers_enc=6, n_layers_dec=6, d_model=512,
                  n_heads=8, d_ffn=4096, dropout=0.2, tie_embeddings=True,
                  max_positions=1024),
}


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    rng = derive_rng(seed, "init")
    d, f = cfg.d_model, cfg.d_ffn
    p: OrderedDict[str, Tensor] = OrderedDict()

    def linear(name, fan_in, fan_out, bias=True):
        p[f"{name}.w"] = ad.parameter(_xavier(rng, fan_in, fan_out))
        if bias:
            p[f"{name}.b"] = ad.parameter(np.zeros(fan_out))

    def norm(name):
        p[f"{name}.g"] = ad.parameter(np.ones(d))
        p[f"{name}.b"] = ad.parameter(np.zeros(d))

    def attention(name):
        for proj in "qkvo":
            linear(f"{name}.{proj}", d, d)

    def embed(name):
        p[name] = ad.parameter(rng.normal(0.0, d ** -0.5, size=(cfg.vocab_size, d)))

    if cfg.tie_embeddings:
        embed("embed")
    else:
        embed("enc_embed")
        embed("dec_embed")
        embed("out_embed")
    for l in range(cfg.n_layers_enc):
        attention(f"enc.{l}.self")
        norm(f"enc.{l}.ln1")
        linear(f"enc.{l}.ffn1", d, f)
        linear(f"enc.{l}.ffn2", f, d)
        norm(f"enc.{l}.ln2")
    for l in range(cfg.n_layers_dec):
        attention(f"dec.{l}.self")
        norm(f"dec.{l}.ln1")
        attention(f"dec.{l}.cross")
        norm(f"dec.{l}.ln2")
        linear(f"dec.{l}.ffn1", d, f)
        linear(f"dec.{l}.ffn2", f, d)
        norm(f"dec.{l}.ln3")
    linear("copy.q", d, d, bias=False)
    linear("copy.k", d, d, bias=False)
    linear("gen", d, 1)
    return p


class Seq2Seq:
    """Parameters plus the forward computations of the network."""

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._pe = positional_encoding(cfg.max_positions, cfg.d_model)

    # ------------------------------------------------------------- plumbing
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def embedding_table(self, role: str) -> Tensor:
        if self.cfg.tie_embeddings:
            return self.params["embed"]
        return self.params[{"enc": "enc_embed", "dec": "dec_embed", "out": "out_embed"}[role]]

    def _linear(self, x, name, bias=True):
        y = ad.matmul(x, self.params[f"{name}.w"])
        return ad.add(y, self.params[f"{name}.b"]) if bias else y

    def _norm(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x, train, rng):
        return ad.dropout(x, self.cfg.dropout, rng, train)

    def _in_vocab(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return np.where(ids >= self.cfg.vocab_size, UNK, ids)

    def _embed(self, ids, role, train, rng):
        ids = self._in_vocab(ids)
        L = ids.shape[-1]
        if L > self.cfg.max_positions:
            raise ConfigError(f"sequence length {L} exceeds max_positions {self.cfg.max_positions}")
        x = ad.embedding(self.embedding_table(role), ids)
        x = ad.scale(x, math.sqrt(self.cfg.d_model))
        x = ad.add(x, ad.as_tensor(self._pe[:L], dtype=x.dtype))
        return self._drop(x, train, rng)

    def _split_heads(self, x):
        B, L, d = x.shape
        H = self.cfg.n_heads
        return ad.transpose(ad.reshape(x, (B, L, H, d // H)), (0, 2, 1, 3))

    def multi_head_attention(self, name, queries, keys, values, mask=None):
        """Scaled dot-product attention over ``n_heads`` heads.

        ``mask`` is boolean, True where a key must be hidden, broadcastable to
        (B, H, Lq, Lk).  Returns the projected output and the weights.
        """
        q = self._split_heads(self._linear(queries, f"{name}.q"))
        k = self._split_heads(self._linear(keys, f"{name}.k"))
        v = self._split_heads(self._linear(values, f"{name}.v"))
        dh = self.cfg.d_model // self.cfg.n_heads
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.masked_fill(scores, mask, -np.inf)
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v)
        Bq, Lq = ctx.shape[0], ctx.shape[2]
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (Bq, Lq, self.cfg.d_model))
        return self._linear(ctx, f"{name}.o"), weights

    def _ffn(self, x, name, train, rng):
        h = ad.relu(self._linear(x, f"{name}.ffn1"))
        h = self._drop(h, train, rng)
        return self._linear(h, f"{name}.ffn2")

    # -------------------------------------------------------------- network
    def encode(self, src_ext, src_pad=None, train=False, rng=None) -> Tensor:
        """Encoder states, shape (B, S, d_model); accepts 1-D or 2-D ids."""
        src_ext = np.atleast_2d(np.asarray(src_ext, dtype=np.int64))
        if src_ext.shape[-1] == 0:
            raise ValueError("encode: empty source")
        key_mask = None if src_pad is None else np.asarray(src_pad, bool)[:, None, None, :]
        x = self._embed(src_ext, "enc", train, rng)
        for l in range(self.cfg.n_layers_enc):
            a, _ = self.multi_head_attention(f"enc.{l}.self", x, x, x, key_mask)
            x = self._norm(ad.add(x, self._drop(a, train, rng)), f"enc.{l}.ln1")
            x = self._norm(ad.add(x, self._drop(self._ffn(x, f"enc.{l}", train, rng), train, rng)),
                           f"enc.{l}.ln2")
        return x

    def decode(self, h_enc, tgt_in, src_pad=None, train=False, rng=None) -> Tensor:
        """Decoder states for every prefix position, shape (B, T, d_model)."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        T = tgt_in.shape[-1]
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)[None, None]
        key_mask = None if src_pad is None else np.asarray(src_pad, bool)[:, None, None, :]
        x = self._embed(tgt_in, "dec", train, rng)
        for l in range(self.cfg.n_layers_dec):
            a, _ = self.multi_head_attention(f"dec.{l}.self", x, x, x, causal)
            x = self._norm(ad.add(x, self._drop(a, train, rng)), f"dec.{l}.ln1")
            c, _ = self.multi_head_attention(f"dec.{l}.cross", x, h_enc, h_enc, key_mask)
            x = self._norm(ad.add(x, self._drop(c, train, rng)), f"dec.{l}.ln2")
            x = self._norm(ad.add(x, self._drop(self._ffn(x, f"dec.{l}", train, rng), train, rng)),
                           f"dec.{l}.ln3")
        return x

    def copy_attention(self, h_dec, h_enc, src_pad=None) -> Tensor:
        q = self._linear(h_dec, "copy.q", bias=False)
        k = self._linear(h_enc, "copy.k", bias=False)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.cfg.d_model))
        if src_pad is not None:
            scores = ad.masked_fill(scores, np.asarray(src_pad, bool)[:, None, :], -np.inf)
        return ad.softmax(scores, axis=-1)

    def pointer_generator(self, h_dec, h_enc, src_ext, n_ext, src_pad=None, p_gen=None):
        """Mixture distribution over the extended vocabulary.

        Returns ``(probs, alpha, p_gen)`` with probs of shape (B, T, n_ext).
        Passing ``p_gen`` overrides the learned gate.
        """
        V = self.cfg.vocab_size
        src_ext = np.atleast_2d(np.asarray(src_ext, dtype=np.int64))
        alpha = self.copy_attention(h_dec, h_enc, src_pad)
        if p_gen is None:
            pooled = ad.matmul(alpha, h_enc)
            p_gen = ad.sigmoid(self._linear(pooled, "gen"))
        else:
            p_gen = ad.as_tensor(np.full(h_dec.shape[:-1] + (1,), p_gen), dtype=h_dec.dtype)
        logits = ad.matmul(h_dec, ad.transpose(self.embedding_table("out"), (1, 0)))
        p_vocab = ad.softmax(logits, axis=-1)
        if n_ext > V:
            pad = ad.as_tensor(np.zeros(p_vocab.shape[:-1] + (n_ext - V,)), dtype=p_vocab.dtype)
            p_vocab = ad.concat([p_vocab, pad], axis=-1)
        copy = ad.index_add(alpha, src_ext[:, None, :], n_ext)
        probs = ad.add(ad.mul(p_gen, p_vocab), ad.mul(ad.sub(1.0, p_gen), copy))
        return probs, alpha, p_gen

    def forward_probs(self, src_ext, tgt_in, n_ext, src_pad=None, train=False, rng=None):
        h_enc = self.encode(src_ext, src_pad, train, rng)
        h_dec = self.decode(h_enc, tgt_in, src_pad, train, rng)
        probs, _, _ = self.pointer_generator(h_dec, h_enc, src_ext, n_ext, src_pad)
        return probs

    def label_logprobs(self, src_ext, tgt_in, labels, n_ext, src_pad=None, train=False, rng=None):
        """log p(label_t | source, prefix) for each target position, shape (B, T)."""
        probs = self.forward_probs(src_ext, tgt_in, n_ext, src_pad, train, rng)
        return ad.log(ad.add_scalar(ad.take(probs, labels), LOG_EPS))

    def forward_logprobs(self, src_ext, target_ext, n_ext=None) -> np.ndarray:
        """Teacher-forced log-probability matrix for one example (eval mode).

        ``target_ext`` are the label ids (EOS-terminated); the decoder input is
        BOS followed by all labels but the last.  Returns (len(target), n_ext).
        """
        src_ext = np.asarray(src_ext, dtype=np.int64)
        target_ext = np.asarray(target_ext, dtype=np.int64)
        if n_ext is None:
            n_ext = max(self.cfg.vocab_size, int(src_ext.max()) + 1)
        tgt_in = np.concatenate([[BOS], target_ext[:-1]])
        with ad.no_grad():
            probs = self.forward_probs(src_ext[None], tgt_in[None], n_ext)
        with np.errstate(divide="ignore"):
            return np.log(probs.data[0])

    def decode_step(self, h_enc, prefix, src_pad=None) -> np.ndarray:
        """Decoder state at the last prefix position, shape (B, d_model)."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        if np.any(prefix[:, 0] != BOS):
            raise ValueError("decode_step: prefix must start with BOS")
        with ad.no_grad():
            h = self.decode(h_enc, prefix, src_pad)
        return h.data[:, -1]

    def step_probs(self, h_enc, prefixes, src_ext, n_ext, src_pad=None) -> np.ndarray:
        """Next-token distributions for a batch of prefixes sharing one source."""
        with ad.no_grad():
            h = self.decode_step(h_enc, prefixes, src_pad)
            probs, _, _ = self.pointer_generator(Tensor(h[:, None]), h_enc, src_ext, n_ext, src_pad)
        return probs.data[:, 0]


def n_parameters(params) -> int:
    seen, total = set(), 0
    for t in params.values():
        if id(t) not in seen:
            seen.add(id(t))
            total += t.data.size
    return total


def pad_batch(seqs, pad=PAD) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    arr = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
    mask = np.arange(L)[None, :] >= np.array([len(s) for s in seqs])[:, None]
    return arr, mask
