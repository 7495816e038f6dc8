"""Plaintext <-> hidden-state frame codec built on the twin model.

Byte-level tokenizer: ids 0..255 are raw bytes, then <bos>=256, <eos>=257,
<sep>=258, <pad>=259. Every message is wrapped in the fixed repeat prompt
("<bos>repeat: " ... "<sep>"), mirroring the objective the twins were
tuned on.

Two wire-compatible modes:

* incremental - one teacher-forced prompt per token, containing only the
  already-shared prefix plus the new token. The receiver re-creates each
  candidate context bit-for-bit, so the true candidate scores cosine 1.0
  and decoding is exact regardless of model quality.
* oneshot - the whole plaintext sits in one prompt and the model must
  actually repeat it token by token (greedy); a mismatch aborts the send.
  Receiver-side matching is approximate because the sender's prompt
  contains plaintext the receiver does not have yet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import scheduler

BOS = 256
EOS = 257
SEP = 258
PAD = 259
VOCAB_SIZE = 260

TEMPLATE_TEXT = b"repeat: "
TEMPLATE_VERSION = 1
MAX_MESSAGE_LEN = 64

END_HYPOTHESIS = EOS  # reported token id when the end-of-message wins

DEFAULT_THETA = 0.9999
DEFAULT_DELTA = 0.01


class CodecError(Exception):
    pass


class MessageTooLong(CodecError):
    pass


class EncodeMismatch(CodecError):
    """Strict-mode transmission failure: greedy output diverged."""

    def __init__(self, index: int, expected: int, got: int):
        super().__init__(f"greedy mismatch at token {index}: expected {expected}, got {got}")
        self.index = index
        self.expected = expected
        self.got = got


class DecodeFailure(CodecError):
    def __init__(self, msg: str, score: float = float("nan")):
        super().__init__(msg)
        self.score = score


class AmbiguousDecode(CodecError):
    def __init__(self, margin: float):
        super().__init__(f"ambiguous decode: margin {margin:.6f}")
        self.margin = margin


def encode_bytes(data: bytes) -> list[int]:
    return list(data)


def decode_bytes(tokens) -> bytes:
    out = bytearray()
    for t in tokens:
        if not 0 <= t <= 255:
            raise CodecError(f"token {t} is not a payload byte")
        out.append(t)
    return bytes(out)


def template_tokens() -> list[int]:
    return [BOS] + encode_bytes(TEMPLATE_TEXT)


def cosine(u, v) -> np.float32:
    """Cosine similarity with float64 accumulation, result in binary32.

    Bitwise-equal inputs score exactly 1.0. Zero vectors are rejected.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise CodecError("cosine operands must have equal length")
    nu = float(np.sqrt(np.sum(u * u)))
    nv = float(np.sqrt(np.sum(v * v)))
    if nu == 0.0 or nv == 0.0:
        raise CodecError("cosine of zero vector")
    c = float(np.sum(u * v)) / (nu * nv)
    return np.float32(min(1.0, max(-1.0, c)))


def _cosine_many(taps: np.ndarray, payload: np.ndarray) -> np.ndarray:
    """Row-wise cosine(taps[i], payload) in float64, clamped, as float32."""
    t = taps.astype(np.float64)
    p = payload.astype(np.float64)
    num = np.sum(t * p, axis=-1)
    nt = np.sqrt(np.sum(t * t, axis=-1))
    npay = float(np.sqrt(np.sum(p * p)))
    if npay == 0.0:
        raise CodecError("cosine of zero vector")
    nt = np.where(nt == 0.0, np.inf, nt)  # zero tap can never win
    return np.clip(num / (nt * npay), -1.0, 1.0).astype(np.float32)


@dataclass
class TokenFrame:
    seq: int
    payload: np.ndarray  # d_model float32
    is_final: bool = False


@dataclass
class DecodeResult:
    token: int          # byte value, or END_HYPOTHESIS for the final frame
    score: float
    margin: float


@dataclass
class CodecParams:
    theta: float = DEFAULT_THETA
    delta: float = DEFAULT_DELTA
    strict: bool = False  # incremental encode aborts on greedy mismatch


# --------------------------------------------------------------- encoding

def _check_message(plaintext: bytes, cfg: M.ModelConfig) -> None:
    if len(plaintext) > MAX_MESSAGE_LEN:
        raise MessageTooLong(f"message is {len(plaintext)} bytes; cap is {MAX_MESSAGE_LEN}")
    need = len(template_tokens()) + 2 * len(plaintext) + 2
    if need > cfg.max_seq:
        raise MessageTooLong("message does not fit max_seq")
    if cfg.n_blocks < 2:
        raise CodecError("codec needs at least 2 blocks")


def encode_message_incremental(params: M.ParameterSet, cfg: M.ModelConfig,
                               key: bytes, nonce: int, msg_seq: int,
                               plaintext: bytes, *, strict: bool = False):
    """One tapped frame per plaintext byte plus the final end-marker frame.

    Context for frame t: template ++ P[:t+1] ++ <sep> ++ P[:t]; the tap is
    the scheduled layer's output at the last position. In strict mode the
    greedy prediction at that position must equal the transmitted token.
    """
    _check_message(plaintext, cfg)
    topen = template_tokens()
    state = scheduler.init_chain(key, nonce, msg_seq)
    frames = []
    n = len(plaintext)
    for t in range(n + 1):
        prompt_part = plaintext[: t + 1] if t < n else plaintext
        done_part = plaintext[:t] if t < n else plaintext
        ctx = topen + encode_bytes(prompt_part) + [SEP] + encode_bytes(done_part)
        hid, logits = M.forward_full(params, cfg, ctx)
        layer = scheduler.layer_of(state, cfg.n_blocks)
        expected = plaintext[t] if t < n else EOS
        if strict:
            got = M.greedy_next(logits[-1])
            if got != expected:
                raise EncodeMismatch(t, expected, got)
        frames.append(TokenFrame(seq=t, payload=hid[layer - 1, -1].copy(),
                                 is_final=t == n))
        if t < n:
            state = scheduler.advance(state, plaintext[t], cfg.vocab_size)
    return frames


def encode_message_oneshot(params: M.ParameterSet, cfg: M.ModelConfig,
                           key: bytes, nonce: int, msg_seq: int,
                           plaintext: bytes):
    """Single-prompt greedy repetition; aborts on the first greedy miss.

    Greedy generation equals teacher forcing while every pick matches, so
    the whole trajectory is verified with one batched pass (bitwise equal
    to stepping, per the engine's step/full equivalence).
    """
    _check_message(plaintext, cfg)
    topen = template_tokens()
    ctx = topen + encode_bytes(plaintext) + [SEP]
    expected = encode_bytes(plaintext) + [EOS]
    seq = ctx + expected
    hid, logits = M.forward_full(params, cfg, seq[:-1])
    state = scheduler.init_chain(key, nonce, msg_seq)
    frames = []
    gen_base = len(ctx) - 1
    for t, want in enumerate(expected):
        pos = gen_base + t
        got = M.greedy_next(logits[pos])
        if got != want:
            raise EncodeMismatch(t, want, got)
        layer = scheduler.layer_of(state, cfg.n_blocks)
        frames.append(TokenFrame(seq=t, payload=hid[layer - 1, pos].copy(),
                                 is_final=want == EOS))
        if want != EOS:
            state = scheduler.advance(state, want, cfg.vocab_size)
    return frames


# --------------------------------------------------------------- decoding

class HypothesisScorer:
    """Shared-prefix candidate evaluation against intercepted frames.

    Maintains a KV cache over template ++ accepted-prefix. For a frame with
    t accepted bytes, candidate byte c is scored on the context
    template ++ D ++ c ++ <sep> ++ D and the end-of-message hypothesis on
    template ++ D ++ <sep> ++ D, tapping the supplied layer at the last
    position. Candidate order is bytes 0..255 then END; ties resolve to the
    lowest index.
    """

    def __init__(self, params: M.ParameterSet, cfg: M.ModelConfig):
        self.params = params
        self.cfg = cfg
        self.cache = M.KVCache(cfg)
        M.extend_cache(params, cfg, self.cache, template_tokens())
        self.decoded = bytearray()

    @property
    def prefix(self) -> bytes:
        return bytes(self.decoded)

    def score_frame(self, payload: np.ndarray, layer: int, *,
                    include_end: bool = True):
        """Returns (token, score, margin, scores[257]) for one frame."""
        d = list(self.decoded)
        t = len(d)
        sufs = np.empty((256, t + 2), dtype=np.int64)
        sufs[:, 0] = np.arange(256)
        sufs[:, 1] = SEP
        if t:
            sufs[:, 2:] = d
        taps = M.hypothesis_taps(self.params, self.cfg, self.cache, sufs, layer)
        scores = np.full(257, -np.inf, dtype=np.float64)
        scores[:256] = _cosine_many(taps, payload)
        if include_end:
            end_suf = np.array([[SEP] + d], dtype=np.int64)
            end_tap = M.hypothesis_taps(self.params, self.cfg, self.cache,
                                        end_suf, layer)
            scores[256] = _cosine_many(end_tap, payload)[0]
        best = int(np.argmax(scores))
        best_score = float(scores[best])
        rest = np.delete(scores, best)
        second = float(rest.max()) if np.isfinite(rest.max()) else -1.0
        margin = best_score - second
        token = END_HYPOTHESIS if best == 256 else best
        return token, best_score, margin, scores

    def push(self, byte_val: int) -> None:
        """Commit one accepted byte into the shared prefix."""
        self.decoded.append(byte_val)
        M.extend_cache(self.params, self.cfg, self.cache, [byte_val])


class IncrementalDecoder:
    """Exact decoder for incremental-mode frames (theta/delta gated)."""

    def __init__(self, params, cfg, key: bytes, nonce: int, msg_seq: int,
                 codec_params: CodecParams | None = None):
        self.cfg = cfg
        self.cp = codec_params or CodecParams()
        self.scorer = HypothesisScorer(params, cfg)
        self.state = scheduler.init_chain(key, nonce, msg_seq)
        self.next_seq = 0
        self.done = False
        self.layers_used: list[int] = []

    def feed(self, frame: TokenFrame) -> DecodeResult:
        if self.done:
            raise CodecError("message already complete")
        if frame.seq != self.next_seq:
            raise DecodeFailure(f"out-of-order frame {frame.seq}, expected {self.next_seq}")
        payload = np.asarray(frame.payload, dtype=np.float32)
        if not np.any(payload):
            raise DecodeFailure("zero payload", score=0.0)
        layer = scheduler.layer_of(self.state, self.cfg.n_blocks)
        self.layers_used.append(layer)
        token, score, margin, _ = self.scorer.score_frame(payload, layer)
        if score < self.cp.theta:
            raise DecodeFailure(
                f"no hypothesis reached theta={self.cp.theta}: best {score:.6f}",
                score=score)
        if margin < self.cp.delta:
            raise AmbiguousDecode(margin)
        if token == END_HYPOTHESIS:
            if not frame.is_final:
                raise DecodeFailure("end hypothesis won a non-final frame", score=score)
            self.done = True
        else:
            if frame.is_final:
                raise DecodeFailure("byte hypothesis won the final frame", score=score)
            self.scorer.push(token)
            self.state = scheduler.advance(self.state, token, self.cfg.vocab_size)
        self.next_seq += 1
        return DecodeResult(token=token, score=score, margin=margin)

    @property
    def plaintext(self) -> bytes:
        if not self.done:
            raise CodecError("message not complete")
        return self.scorer.prefix


def decode_message_incremental(params, cfg, key: bytes, nonce: int,
                               msg_seq: int, frames,
                               codec_params: CodecParams | None = None) -> bytes:
    dec = IncrementalDecoder(params, cfg, key, nonce, msg_seq, codec_params)
    for frame in frames:
        dec.feed(frame)
    return dec.plaintext


def decode_message_oneshot(params, cfg, key: bytes, nonce: int, msg_seq: int,
                           frames):
    """Approximate prefix-only matching for one-shot transcripts.

    Non-final frames pick the best byte hypothesis (the transport flag
    already marks the end, so END only competes on the final frame).
    Returns (bytes, per-frame scores); accuracy is measured, not promised.
    """
    scorer = None
    scores = []
    out = bytearray()
    state = None
    for frame in frames:
        if scorer is None:
            # deferred so the function signature stays symmetric with encode
            scorer = HypothesisScorer(params, cfg)
            state = scheduler.init_chain(key, nonce, msg_seq)
        layer = scheduler.layer_of(state, cfg.n_blocks)
        payload = np.asarray(frame.payload, dtype=np.float32)
        token, score, _, _ = scorer.score_frame(payload, layer,
                                                include_end=frame.is_final)
        scores.append(float(score))
        if frame.is_final:
            break
        if token == END_HYPOTHESIS:
            # END may only be reported on final frames; take the best byte
            _, _, _, vec = scorer.score_frame(payload, layer, include_end=False)
            token = int(np.argmax(vec[:256]))
        out.append(token)
        scorer.push(token)
        state = scheduler.advance(state, token, cfg.vocab_size)
    return bytes(out), scores


def decode_message_incremental_naive(params, cfg, key: bytes, nonce: int,
                                     msg_seq: int, frames,
                                     codec_params: CodecParams | None = None) -> bytes:
    """Reference decoder: one full forward pass per hypothesis, no caching.

    Semantically identical to decode_message_incremental; exists as the
    baseline for the decode benchmark and as a cross-check oracle.
    """
    cp = codec_params or CodecParams()
    topen = template_tokens()
    state = scheduler.init_chain(key, nonce, msg_seq)
    decoded = bytearray()
    for frame in frames:
        payload = np.asarray(frame.payload, dtype=np.float32)
        if not np.any(payload):
            raise DecodeFailure("zero payload", score=0.0)
        layer = scheduler.layer_of(state, cfg.n_blocks)
        d = list(decoded)
        taps = np.empty((257, cfg.d_model), dtype=np.float32)
        for c in range(256):
            ctx = topen + d + [c, SEP] + d
            hid, _ = M.forward_full(params, cfg, ctx)
            taps[c] = hid[layer - 1, -1]
        ctx = topen + d + [SEP] + d
        hid, _ = M.forward_full(params, cfg, ctx)
        taps[256] = hid[layer - 1, -1]
        scores = _cosine_many(taps, payload).astype(np.float64)
        best = int(np.argmax(scores))
        best_score = float(scores[best])
        margin = best_score - float(np.delete(scores, best).max())
        if best_score < cp.theta:
            raise DecodeFailure("below theta", score=best_score)
        if margin < cp.delta:
            raise AmbiguousDecode(margin)
        if best == 256:
            if not frame.is_final:
                raise DecodeFailure("end hypothesis won a non-final frame")
            return bytes(decoded)
        if frame.is_final:
            raise DecodeFailure("byte hypothesis won the final frame")
        decoded.append(best)
        state = scheduler.advance(state, best, cfg.vocab_size)
    raise DecodeFailure("frames ended without a final frame")
