"""Deterministic decoder-only transformer with per-layer hidden-state taps.

Everything downstream (twin provisioning, the hidden-state codec, the
attacker studies) depends on this module's bit-reproducibility, which rests
on two pinned implementation rules:

1. Every GEMM runs with a row count of at least ``M_MIN`` (smaller inputs
   are zero-padded). The BLAS picks different microkernels for very small
   row counts, and those kernels reduce in a different order; at >= M_MIN
   rows an output row's bits depend only on that row's content and the
   weight matrix. All other GEMM dimensions are fixed by the architecture.

2. Attention reduces over keys in fixed ``KEY_SEG``-wide segments combined
   in ascending order, with the key axis zero-padded to a segment multiple
   and masked. A position's attention output therefore has identical bits
   whether it is computed inside a long teacher-forced pass, an incremental
   step against a KV cache, or a batched hypothesis evaluation.

Elementwise transcendentals come from :mod:`ciphermind.detmath`; add, mul,
div and sqrt are IEEE-exact and need no pinning.

The "hidden state at layer l" is the residual stream after block l's final
residual addition (1-indexed), before the next block's first layer norm.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import detmath
from .scheduler import GOLDEN, MASK64

F32 = np.float32

M_MIN = 32
KEY_SEG = 128
MASK_FILL = -1e30

PARAM_MAGIC = b"CMWT"
PARAM_VERSION = 1


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared verbatim by both twins."""

    n_blocks: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 260
    max_seq: int = 512
    ln_epsilon: float = 1e-5

    def __post_init__(self):
        # single-block configs exist for gradient probes; anything that taps
        # a middle layer (codec, scheduler) separately demands >= 2 blocks
        if self.n_blocks < 1:
            raise ModelError("need at least 1 block")
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.ln_epsilon <= 0:
            raise ModelError("ln_epsilon must be positive")
        # the epsilon lives in binary32 arithmetic; canonicalize so that a
        # config survives its own 28-byte wire encoding exactly
        object.__setattr__(self, "ln_epsilon", float(np.float32(self.ln_epsilon)))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def weight_count(self) -> int:
        """Total serialized float32 weights (the tied head contributes none)."""
        per_block = 4 * self.d_model * self.d_model
        per_block += 2 * self.d_model * self.d_ff
        per_block += 4 * self.d_model  # two LN gain/bias pairs
        return self.vocab_size * self.d_model + self.n_blocks * per_block + 2 * self.d_model

    def pack(self) -> bytes:
        """Fixed 28-byte config block (ln_epsilon stored as its f32 bits)."""
        eps_bits = struct.unpack("<I", struct.pack("<f", self.ln_epsilon))[0]
        return struct.pack("<7I", self.n_blocks, self.d_model, self.n_heads,
                           self.d_ff, self.vocab_size, self.max_seq, eps_bits)

    @classmethod
    def unpack(cls, blob: bytes) -> "ModelConfig":
        vals = struct.unpack("<7I", blob)
        eps = struct.unpack("<f", struct.pack("<I", vals[6]))[0]
        return cls(*vals[:6], ln_epsilon=eps)


@dataclass
class BlockParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    g1: np.ndarray
    b1: np.ndarray
    g2: np.ndarray
    b2: np.ndarray

    FIELD_ORDER = ("wq", "wk", "wv", "wo", "w1", "w2", "g1", "b1", "g2", "b2")

    def fields(self):
        return tuple(getattr(self, name) for name in self.FIELD_ORDER)


@dataclass
class ParameterSet:
    """Full weights. Arrays are frozen after construction; the output head
    is tied to the embedding, so the canonical serialization covers the
    embedding, the blocks in field order, and the final norm only."""

    config: ModelConfig
    emb: np.ndarray
    blocks: list
    gf: np.ndarray
    bf: np.ndarray
    head_w: np.ndarray = field(default=None, repr=False)  # derived: emb.T contiguous

    def __post_init__(self):
        if self.head_w is None:
            self.head_w = np.ascontiguousarray(self.emb.T)
        for arr in self.iter_arrays():
            arr.flags.writeable = False
        self.head_w.flags.writeable = False

    def iter_arrays(self):
        yield self.emb
        for bp in self.blocks:
            yield from bp.fields()
        yield self.gf
        yield self.bf

    @property
    def dtype(self):
        return self.emb.dtype

    def astype(self, dtype) -> "ParameterSet":
        blocks = [BlockParams(*(a.astype(dtype) for a in bp.fields())) for bp in self.blocks]
        return ParameterSet(self.config, self.emb.astype(dtype), blocks,
                            self.gf.astype(dtype), self.bf.astype(dtype))

    def replace_weights(self, updates: dict) -> "ParameterSet":
        """New ParameterSet with some block matrices swapped (adapter merge).

        updates: {block_index: {field_name: new_array}}
        """
        blocks = []
        for i, bp in enumerate(self.blocks):
            fields_ = dict(zip(BlockParams.FIELD_ORDER, bp.fields()))
            for name, arr in updates.get(i, {}).items():
                fields_[name] = arr
            blocks.append(BlockParams(**fields_))
        return ParameterSet(self.config, self.emb, blocks, self.gf, self.bf)


def init_parameters(config: ModelConfig, seed: int) -> ParameterSet:
    """Draw all matrix weights from the SplitMix64 stream.

    Each u64 maps to uniform [-a, a] with a = 1/sqrt(d_model) via its top
    24 bits; layer-norm gains start at one, biases at zero. The draw order
    equals the serialization order, so (seed, config) pins every bit.
    """
    scale = F32(1.0) / np.sqrt(F32(config.d_model))
    state = seed & MASK64

    def draw(shape):
        nonlocal state
        n = int(np.prod(shape))
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(state) + idx * np.uint64(GOLDEN)
        state = (state + n * GOLDEN) & MASK64
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        u = (z >> np.uint64(40)).astype(np.float32) * F32(2.0 ** -24)
        return ((u * F32(2.0) - F32(1.0)) * scale).reshape(shape)

    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    emb = draw((v, d))
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(BlockParams(
            wq=draw((d, d)), wk=draw((d, d)), wv=draw((d, d)), wo=draw((d, d)),
            w1=draw((d, dff)), w2=draw((dff, d)),
            g1=np.ones(d, dtype=np.float32), b1=np.zeros(d, dtype=np.float32),
            g2=np.ones(d, dtype=np.float32), b2=np.zeros(d, dtype=np.float32),
        ))
    return ParameterSet(config, emb, blocks,
                        np.ones(d, dtype=np.float32), np.zeros(d, dtype=np.float32))


def fingerprint(params: ParameterSet) -> bytes:
    """SHA-256 over the canonical little-endian float32 serialization."""
    h = hashlib.sha256()
    for arr in params.iter_arrays():
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.digest()


def save_parameters(path, params: ParameterSet) -> None:
    with open(path, "wb") as f:
        f.write(PARAM_MAGIC)
        f.write(bytes([PARAM_VERSION]))
        f.write(params.config.pack())
        for arr in params.iter_arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_parameters(path) -> ParameterSet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PARAM_MAGIC:
        raise ModelError("not a parameter file (bad magic)")
    if blob[4] != PARAM_VERSION:
        raise ModelError(f"unsupported parameter file version {blob[4]}")
    config = ModelConfig.unpack(blob[5:33])
    payload = blob[33:]
    want = config.weight_count() * 4
    if len(payload) != want:
        raise ModelError(f"parameter payload is {len(payload)} bytes, expected {want}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(flat)):
        raise ModelError("parameter file contains non-finite weights")

    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    emb = take((v, d))
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(BlockParams(
            wq=take((d, d)), wk=take((d, d)), wv=take((d, d)), wo=take((d, d)),
            w1=take((d, dff)), w2=take((dff, d)),
            g1=take((d,)), b1=take((d,)), g2=take((d,)), b2=take((d,)),
        ))
    return ParameterSet(config, emb, blocks, take((d,)), take((d,)))


_PE_CACHE: dict = {}


def positional_table(config: ModelConfig, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal position table, built once per (d_model, max_seq)."""
    key = (config.d_model, config.max_seq, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        d = config.d_model
        pos = np.arange(config.max_seq, dtype=np.float64)[:, None]
        i = np.arange(0, d, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, i / d)
        table = np.zeros((config.max_seq, d), dtype=np.float64)
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle)
        out = table.astype(dtype)
        out.flags.writeable = False
        _PE_CACHE[key] = out
    return _PE_CACHE[key]


def _mm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2-D GEMM with the M_MIN row floor."""
    a = np.ascontiguousarray(a)
    m = a.shape[0]
    if m >= M_MIN:
        return a @ w
    buf = np.zeros((M_MIN, a.shape[1]), dtype=a.dtype)
    buf[:m] = a
    return (buf @ w)[:m]


def _layer_norm(x, g, b, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xn = xc * inv
    return xn * g + b, xn, inv


class KVCache:
    """Grow-only per-block key/value store for one decode stream.

    Appending never mutates earlier positions. A cache is single-owner:
    one cache must not serve two concurrent decode streams. fork() yields
    an independent copy for speculative continuation.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.length = 0
        self._k = [np.zeros((config.max_seq, config.d_model), dtype=dtype)
                   for _ in range(config.n_blocks)]
        self._v = [np.zeros((config.max_seq, config.d_model), dtype=dtype)
                   for _ in range(config.n_blocks)]

    def keys(self, block: int) -> np.ndarray:
        return self._k[block][: self.length]

    def values(self, block: int) -> np.ndarray:
        return self._v[block][: self.length]

    def write(self, block: int, k: np.ndarray, v: np.ndarray) -> None:
        new_len = self.length + k.shape[0]
        if new_len > self.config.max_seq:
            raise ModelError("KV cache overflow")
        self._k[block][self.length:new_len] = k
        self._v[block][self.length:new_len] = v

    def commit(self, n_new: int) -> None:
        self.length += n_new

    def fork(self) -> "KVCache":
        out = KVCache(self.config, dtype=self._k[0].dtype)
        out.length = self.length
        for i in range(self.config.n_blocks):
            out._k[i][: self.length] = self._k[i][: self.length]
            out._v[i][: self.length] = self._v[i][: self.length]
        return out


def _split_heads(x, n_heads):
    # (B, S, d) -> (B, H, S, hd)
    b, s, d = x.shape
    return np.ascontiguousarray(x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _attention(q, k_pref, v_pref, k_new, v_new, base, cfg, need_aux=False):
    """Segmented causal attention.

    q, k_new, v_new: (B, S, d); k_pref/v_pref: (P, d) prefix shared by the
    whole batch (may be empty). Query row i sits at absolute position
    base + i and attends keys 0 .. base + i. Returns (B, S, d).
    """
    dtype = q.dtype
    B, S, d = q.shape
    H, hd = cfg.n_heads, cfg.head_dim
    P = k_pref.shape[0]
    T = P + k_new.shape[1]
    t_pad = ((T + KEY_SEG - 1) // KEY_SEG) * KEY_SEG
    n_seg = t_pad // KEY_SEG

    inv_scale = dtype.type(1.0) / np.sqrt(dtype.type(hd))
    qh = _split_heads(q * inv_scale, H)

    kbuf = np.zeros((B, H, t_pad, hd), dtype=dtype)
    vbuf = np.zeros((B, H, t_pad, hd), dtype=dtype)
    if P:
        kbuf[:, :, :P] = np.ascontiguousarray(k_pref.reshape(P, H, hd).transpose(1, 0, 2))
        vbuf[:, :, :P] = np.ascontiguousarray(v_pref.reshape(P, H, hd).transpose(1, 0, 2))
    kbuf[:, :, P:T] = _split_heads(k_new, H)
    vbuf[:, :, P:T] = _split_heads(v_new, H)

    # pad the query axis so per-item GEMMs stay in the stable kernel regime
    s_pad = max(S, M_MIN)
    if s_pad != S:
        qp = np.zeros((B, H, s_pad, hd), dtype=dtype)
        qp[:, :, :S] = qh
        qh = qp

    blocked = np.arange(t_pad)[None, :] > (base + np.arange(s_pad))[:, None]
    blocked[S:] = False  # padded query rows: keep scores finite, rows are dropped

    qf = qh.reshape(B * H, s_pad, hd)
    kf = kbuf.reshape(B * H, t_pad, hd)
    vf = vbuf.reshape(B * H, t_pad, hd)

    scores = np.empty((B * H, s_pad, t_pad), dtype=dtype)
    for seg in range(n_seg):
        sl = slice(seg * KEY_SEG, (seg + 1) * KEY_SEG)
        k_seg = np.ascontiguousarray(kf[:, sl])
        scores[:, :, sl] = np.matmul(qf, k_seg.transpose(0, 2, 1))
    scores[:, blocked] = dtype.type(MASK_FILL)
    rowmax = np.max(scores, axis=-1, keepdims=True)

    out = np.zeros((B * H, s_pad, hd), dtype=dtype)
    den = np.zeros((B * H, s_pad, 1), dtype=dtype)
    ones_block = np.ones((KEY_SEG, M_MIN), dtype=dtype)
    for seg in range(n_seg):
        sl = slice(seg * KEY_SEG, (seg + 1) * KEY_SEG)
        e_seg = detmath.exp(np.ascontiguousarray(scores[:, :, sl]) - rowmax)
        out += np.matmul(e_seg, np.ascontiguousarray(vf[:, sl]))
        den += np.matmul(e_seg, ones_block)[:, :, :1]

    attn = (out / den).reshape(B, H, s_pad, hd)[:, :, :S]
    merged = np.ascontiguousarray(attn.transpose(0, 2, 1, 3)).reshape(B, S, d)
    aux = (scores, rowmax, den, qf, kf, vf, s_pad, t_pad) if need_aux else None
    return merged, aux


def _forward(params: ParameterSet, cfg: ModelConfig, tokens: np.ndarray, *,
             cache: KVCache | None = None,
             append_cache: bool = False,
             upto_block: int | None = None,
             last_only_final_block: bool = False,
             want_logits: bool = True,
             collect_hidden: bool = True,
             stash: list | None = None,
             ln_stats: list | None = None):
    """Shared engine behind every public forward path.

    tokens: (B, S) ids for the new positions; with a cache they sit after
    the cache frontier. append_cache requires B == 1 and a full-depth run.
    """
    dtype = params.dtype
    B, S = tokens.shape
    base = cache.length if cache is not None else 0
    if base + S > cfg.max_seq:
        raise ModelError(f"sequence length {base + S} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    n_run = cfg.n_blocks if upto_block is None else upto_block
    if append_cache and (B != 1 or n_run != cfg.n_blocks):
        raise ModelError("cache extension requires a single sequence and all blocks")

    pe = positional_table(cfg, dtype)
    emb_scale = np.sqrt(dtype.type(cfg.d_model))
    x = np.ascontiguousarray(params.emb[tokens] * emb_scale + pe[base:base + S][None])
    if stash is not None:
        stash.append({"tokens": tokens.copy(), "x0": x})

    hidden = [] if collect_hidden else None
    empty_pref = np.zeros((0, cfg.d_model), dtype=dtype)

    for bi in range(n_run):
        bp = params.blocks[bi]
        last_partial = last_only_final_block and bi == n_run - 1

        a, xn1, inv1 = _layer_norm(x, bp.g1, bp.b1, cfg.ln_epsilon)
        if ln_stats is not None:
            ln_stats.append((xn1.mean(axis=-1), (xn1 * xn1).mean(axis=-1)))
        a2 = a.reshape(B * S, cfg.d_model)
        k_new = _mm(a2, bp.wk).reshape(B, S, cfg.d_model)
        v_new = _mm(a2, bp.wv).reshape(B, S, cfg.d_model)

        k_pref = cache.keys(bi) if cache is not None else empty_pref
        v_pref = cache.values(bi) if cache is not None else empty_pref
        if append_cache:
            cache.write(bi, k_new[0], v_new[0])

        if last_partial:
            q = _mm(a[:, -1, :], bp.wq).reshape(B, 1, cfg.d_model)
            attn, aux = _attention(q, k_pref, v_pref, k_new, v_new,
                                   base + S - 1, cfg)
            o = _mm(attn.reshape(B, cfg.d_model), bp.wo).reshape(B, 1, cfg.d_model)
            x = x[:, -1:, :] + o
            S_eff = 1
        else:
            q = _mm(a2, bp.wq).reshape(B, S, cfg.d_model)
            attn, aux = _attention(q, k_pref, v_pref, k_new, v_new, base, cfg,
                                   need_aux=stash is not None)
            o = _mm(attn.reshape(B * S, cfg.d_model), bp.wo).reshape(B, S, cfg.d_model)
            x = x + o
            S_eff = S

        f, xn2, inv2 = _layer_norm(x, bp.g2, bp.b2, cfg.ln_epsilon)
        if ln_stats is not None:
            ln_stats.append((xn2.mean(axis=-1), (xn2 * xn2).mean(axis=-1)))
        u = _mm(f.reshape(B * S_eff, cfg.d_model), bp.w1)
        g = detmath.gelu(u)
        y = _mm(g, bp.w2).reshape(B, S_eff, cfg.d_model)
        x = x + y

        if stash is not None:
            stash.append({"xn1": xn1, "inv1": inv1, "a": a, "att": aux,
                          "attn_merged": attn, "xn2": xn2, "inv2": inv2,
                          "u": u, "g": g})
        if collect_hidden:
            hidden.append(x.copy())

    if append_cache:
        cache.commit(S)

    logits = None
    if want_logits:
        xf, xnf, invf = _layer_norm(x, params.gf, params.bf, cfg.ln_epsilon)
        logits = _mm(xf.reshape(-1, cfg.d_model), params.head_w).reshape(
            x.shape[0], x.shape[1], cfg.vocab_size)
        if stash is not None:
            stash.append({"xnf": xnf, "invf": invf, "xf": xf})

    return hidden, logits, x


def forward_full(params: ParameterSet, config: ModelConfig, tokens):
    """Teacher-forced pass over one sequence.

    Returns (hidden, logits): hidden[l-1][p] is the residual-stream output
    of block l at position p; logits[p] spans the vocabulary.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ModelError("tokens must be a non-empty 1-D sequence")
    hidden, logits, _ = _forward(params, config, tokens[None])
    return np.stack([h[0] for h in hidden]), logits[0]


def forward_step(params: ParameterSet, config: ModelConfig, cache: KVCache,
                 token: int):
    """Feed one token against a cache; bitwise-equal to the matching
    forward_full column. Returns (per-layer hidden (L, d), logits (V,))."""
    tokens = np.array([[token]], dtype=np.int64)
    hidden, logits, _ = _forward(params, config, tokens, cache=cache,
                                 append_cache=True)
    return np.stack([h[0, 0] for h in hidden]), logits[0, 0]


def extend_cache(params: ParameterSet, config: ModelConfig, cache: KVCache,
                 tokens):
    """Teacher-forced multi-token cache extension (batched forward_step)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ModelError("tokens must be a non-empty 1-D sequence")
    hidden, logits, _ = _forward(params, config, tokens[None], cache=cache,
                                 append_cache=True)
    return np.stack([h[0] for h in hidden]), logits[0]


def hypothesis_taps(params: ParameterSet, config: ModelConfig, cache: KVCache,
                    suffixes, layer: int) -> np.ndarray:
    """Residual-stream tap of block `layer` at the last position of
    prefix+suffix for a batch of equal-length suffixes. The cache is read
    but never modified. Returns (B, d_model)."""
    suffixes = np.asarray(suffixes, dtype=np.int64)
    if suffixes.ndim != 2 or suffixes.shape[1] == 0:
        raise ModelError("suffixes must be (B, S) with S >= 1")
    if not 1 <= layer <= config.n_blocks:
        raise ModelError("tap layer out of range")
    _, _, x = _forward(params, config, suffixes, cache=cache,
                       upto_block=layer, last_only_final_block=True,
                       want_logits=False, collect_hidden=False)
    return x[:, -1, :]


def greedy_next(logits: np.ndarray) -> int:
    """Index of the maximum logit; ties break to the lowest index."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ModelError("non-finite logits")
    return int(np.argmax(logits))
