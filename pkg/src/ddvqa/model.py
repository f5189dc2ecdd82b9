"""Image encoder, question encoder, image-grounded question encoder, answer decoder.

All stacks use pre-layer-norm residual blocks. The question is encoded with
bidirectional self-attention, then cross-attends to the image tokens; the
answer decoder runs causal self-attention and cross-attends to the grounded
question, and an MLP head maps its states to next-token logits.

Decoder sequences are laid out as ``[CLS] [BOS] a_1 ... a_k``; position 0
carries the answer representation, position 1 triggers generation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .tensor import Module, Tensor
from .tokenizer import BOS, CLS, PAD, SEP

NEG_INF = -1e30


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers_text: int = 2
    n_layers_image: int = 2
    n_layers_ground: int = 2
    n_layers_decoder: int = 2
    patch_size: int = 8
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    max_q_len: int = 32
    max_a_len: int = 50
    ff_mult: int = 4
    init_std: float = 0.02
    ln_eps: float = 1e-5
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    vocab_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def decoder_positions(self) -> int:
        # [CLS] [BOS] + up to max_a_len generated tokens
        return self.max_a_len + 2

    def to_json(self) -> str:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# -- layers ------------------------------------------------------------------------
class Linear(Module):
    def __init__(self, rng, d_in, d_out, std):
        self.w = T.normal_init(rng, (d_in, d_out), std)
        self.b = T.param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, eps):
        self.gain = T.param(np.ones(d))
        self.bias = T.param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng, d, n_heads, std):
        self.n_heads = n_heads
        self.wq = Linear(rng, d, d, std)
        self.wk = Linear(rng, d, d, std)
        self.wv = Linear(rng, d, d, std)
        self.wo = Linear(rng, d, d, std)
        self.record = False
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != kv.shape[-1]:
            raise ValueError(f"attention width mismatch: {x.shape} vs {kv.shape}")
        b, lq, d = x.shape
        lk = kv.shape[1]
        h = self.n_heads
        dh = d // h
        q = T.transpose(T.reshape(self.wq(x), (b, lq, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.wk(kv), (b, lk, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self.wv(kv), (b, lk, h, dh)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, mask)
        weights = T.softmax(scores, axis=-1)
        if self.record:
            self.last_weights = weights.data.copy()
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, lq, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, rng, d, mult, std):
        self.fc1 = Linear(rng, d, d * mult, std)
        self.fc2 = Linear(rng, d * mult, d, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SelfBlock(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, cfg.init_std)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(rng, cfg.d_model, cfg.ff_mult, cfg.init_std)

    def __call__(self, x, mask=None):
        hx = self.ln1(x)
        x = x + self.attn(hx, hx, mask)
        return x + self.ff(self.ln2(x))


class CrossBlock(Module):
    """Query tokens cross-attend to a context sequence, then a feed-forward."""

    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.xattn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, cfg.init_std)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(rng, cfg.d_model, cfg.ff_mult, cfg.init_std)

    def __call__(self, x, ctx, ctx_mask=None):
        x = x + self.xattn(self.ln1(x), ctx, ctx_mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, cfg.init_std)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.xattn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, cfg.init_std)
        self.ln3 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(rng, cfg.d_model, cfg.ff_mult, cfg.init_std)

    def __call__(self, x, self_mask, ctx, ctx_mask):
        hx = self.ln1(x)
        x = x + self.attn(hx, hx, self_mask)
        x = x + self.xattn(self.ln2(x), ctx, ctx_mask)
        return x + self.ff(self.ln3(x))


# -- masks -------------------------------------------------------------------------
def key_padding_mask(ids: np.ndarray) -> np.ndarray:
    """Additive (B, 1, 1, L) mask that removes PAD keys."""
    return np.where(ids == PAD, NEG_INF, 0.0)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    """Additive (1, 1, n, n) mask; row i sees keys 0..i."""
    allowed = np.tril(np.ones((n, n), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF)[None, None]


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, m, patch*patch*C), patches in row-major grid order."""
    b, h, w, c = pixels.shape
    x = pixels.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, (h // patch) * (w // patch), patch * patch * c))


# -- model -------------------------------------------------------------------------
class DdvqaModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, std = cfg.d_model, cfg.init_std
        p = cfg.patch_size
        # image encoder
        self.patch_proj = Linear(rng, p * p * cfg.channels, d, std)
        self.img_cls = T.normal_init(rng, (1, 1, d), std)
        self.img_pos = T.normal_init(rng, (1, cfg.n_patches + 1, d), std)
        self.img_blocks = [SelfBlock(rng, cfg) for _ in range(cfg.n_layers_image)]
        self.img_ln = LayerNorm(d, cfg.ln_eps)
        # shared token embeddings for questions and answers
        # unit-scale after the sqrt(d) lookup factor, matching the sinusoids
        self.tok_emb = T.normal_init(rng, (cfg.vocab_size, d), d ** -0.5)
        self._emb_scale = math.sqrt(d)
        self.q_blocks = [SelfBlock(rng, cfg) for _ in range(cfg.n_layers_text)]
        self.q_ln = LayerNorm(d, cfg.ln_eps)
        self.ground_blocks = [CrossBlock(rng, cfg) for _ in range(cfg.n_layers_ground)]
        self.ground_ln = LayerNorm(d, cfg.ln_eps)
        self.dec_blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.n_layers_decoder)]
        self.dec_ln = LayerNorm(d, cfg.ln_eps)
        self.head_fc = Linear(rng, d, d, std)
        self.head_out = Linear(rng, d, cfg.vocab_size, std)
        self._q_pos = T.sinusoidal_positions(cfg.max_q_len, d)
        self._a_pos = T.sinusoidal_positions(cfg.decoder_positions, d)

    # -- image ---------------------------------------------------------------------
    def encode_images(self, pixels: np.ndarray) -> Tensor:
        """(B, H, W, C) pixels -> (B, m+1, d) tokens; row 0 is the image [CLS]."""
        pixels = np.asarray(pixels, dtype=np.float64)
        cfg = self.cfg
        expect = (*cfg.image_size, cfg.channels)
        if pixels.ndim != 4 or pixels.shape[1:] != expect:
            raise ValueError(f"image batch shape {pixels.shape} does not match (B, {expect})")
        b = pixels.shape[0]
        pixels = (pixels - cfg.pixel_mean) / cfg.pixel_std
        x = self.patch_proj(Tensor(patchify(pixels, cfg.patch_size)))
        cls = T.mul(self.img_cls, np.ones((b, 1, 1)))
        x = T.add(T.concat([cls, x], axis=1), self.img_pos)
        for blk in self.img_blocks:
            x = blk(x)
        return self.img_ln(x)

    def encode_image(self, pixels: np.ndarray) -> Tensor:
        """(H, W, C) -> (m+1, d)."""
        return self.encode_images(np.asarray(pixels)[None])[0]

    def image_cls_representation(self, pixels: np.ndarray) -> Tensor:
        return self.encode_image(pixels)[0]

    # -- question ------------------------------------------------------------------
    def embed(self, ids: np.ndarray) -> Tensor:
        return T.mul(T.embedding(self.tok_emb, ids), self._emb_scale)

    def encode_questions(self, q_ids: np.ndarray) -> Tensor:
        q_ids = np.atleast_2d(np.asarray(q_ids, dtype=np.int64))
        if q_ids.shape[1] > self.cfg.max_q_len:
            raise ValueError(f"question length {q_ids.shape[1]} exceeds {self.cfg.max_q_len}")
        x = T.add(self.embed(q_ids), self._q_pos[: q_ids.shape[1]])
        mask = key_padding_mask(q_ids)
        for blk in self.q_blocks:
            x = blk(x, mask)
        return self.q_ln(x)

    def ground(self, x_q: Tensor, image_tokens: Tensor, q_ids: np.ndarray | None = None) -> Tensor:
        """Inject image tokens into question states by cross-attention."""
        if x_q.shape[-1] != image_tokens.shape[-1]:
            raise ValueError(f"d_model mismatch: {x_q.shape} vs {image_tokens.shape}")
        x = x_q
        for blk in self.ground_blocks:
            x = blk(x, image_tokens)
        return self.ground_ln(x)

    def encode_grounded(self, pixels: np.ndarray, q_ids: np.ndarray) -> Tensor:
        return self.ground(self.encode_questions(q_ids), self.encode_images(pixels), q_ids)

    # -- decoder -------------------------------------------------------------------
    def decode_hidden(self, dec_ids: np.ndarray, xbar_q: Tensor, q_ids: np.ndarray,
                      causal: bool = True) -> Tensor:
        dec_ids = np.atleast_2d(np.asarray(dec_ids, dtype=np.int64))
        n = dec_ids.shape[1]
        if n > self.cfg.decoder_positions:
            raise ValueError(f"decoder prefix length {n} exceeds {self.cfg.decoder_positions}")
        x = T.add(self.embed(dec_ids), self._a_pos[:n])
        self_mask = key_padding_mask(dec_ids)
        if causal:
            self_mask = self_mask + causal_mask(n)
        ctx_mask = key_padding_mask(np.atleast_2d(q_ids))
        for blk in self.dec_blocks:
            x = blk(x, self_mask, xbar_q, ctx_mask)
        return self.dec_ln(x)

    def head(self, hidden: Tensor) -> Tensor:
        return self.head_out(T.gelu(self.head_fc(hidden)))

    def decoder_logits(self, dec_ids, xbar_q, q_ids) -> Tensor:
        return self.head(self.decode_hidden(dec_ids, xbar_q, q_ids, causal=True))

    def decode_step(self, prefix: np.ndarray, xbar_q: Tensor, q_ids: np.ndarray) -> Tensor:
        """Next-token logits (k, V) for a single prefix starting ``[CLS] [BOS]``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if xbar_q.ndim == 2:
            xbar_q = T.reshape(xbar_q, (1, *xbar_q.shape))
        return self.decoder_logits(prefix[None], xbar_q, np.atleast_2d(q_ids))[0]

    def text_cls_representation(self, answer_ids: np.ndarray, xbar_q: Tensor,
                                q_ids: np.ndarray) -> Tensor:
        """Final-layer [CLS] row of the decoder run bidirectionally over the answer.

        ``answer_ids`` is (B, L) in decoder layout (``[CLS] [BOS] ... [SEP]``).
        Returns (B, d).
        """
        hidden = self.decode_hidden(answer_ids, xbar_q, q_ids, causal=False)
        return hidden[:, 0, :]

    # -- attention recording -------------------------------------------------------
    def set_attention_recording(self, on: bool) -> None:
        for blk in self.ground_blocks:
            blk.xattn.record = on
            if not on:
                blk.xattn.last_weights = None

    # -- persistence ---------------------------------------------------------------
    def save(self, path, dtype: str = "f4") -> None:
        path = Path(path)
        save_tensors(path, self.state_dict(), dtype=dtype)
        path.with_suffix(".json").write_text(self.cfg.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DdvqaModel":
        path = Path(path)
        side = path.with_suffix(".json")
        try:
            cfg = ModelConfig.from_json(side.read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"missing model config sidecar {side}: {exc}") from exc
        model = cls(cfg)
        model.load_state_dict(load_tensors(path))
        return model


def decoder_io(answer_ids: list[int]) -> tuple[list[int], list[int]]:
    """Teacher-forcing input/target pair for a framed answer ``[CLS] a.. [SEP]``."""
    body = answer_ids[1:]  # a_1 .. a_k [SEP]
    inputs = [CLS, BOS] + body[:-1]
    targets = [PAD] + body
    return inputs, targets


def representation_ids(answer_ids: list[int]) -> list[int]:
    """Decoder-layout sequence used for the answer [CLS] representation."""
    return [CLS, BOS] + answer_ids[1:]


def pad_batch(seqs: list[list[int]], value: int = PAD) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


__all__ = ["ModelConfig", "DdvqaModel", "decoder_io", "representation_ids", "pad_batch",
           "patchify", "causal_mask", "key_padding_mask", "SEP"]
