"""The denoising network: sentence encoder, span encoder, boundary pointers, classifier.

Everything is batched over sentences. Padded word positions are masked out of the
cross-attention keys and receive boundary probability exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import Sentence, discretize_batch, encode_indices
from .errors import ConfigurationError, ValidationError

ACTIVATIONS = {"gelu": nn.GELU, "tanh": nn.Tanh, "relu": nn.ReLU}
INPLACE = {"tanh": torch.tanh_, "relu": torch.relu_}
PAD, UNK = "<pad>", "<unk>"
POINTER_CHUNK = 1 << 19  # elements of the (words, spans, h) fusion tensor evaluated at once


def sinusoidal_embedding(t, h: int) -> np.ndarray:
    """Interleaved ``(sin(t / 10000^(2i/h)), cos(t / 10000^(2i/h)))`` pairs.

    ``t`` may be a scalar or an array; the embedding dimension is appended. Odd ``h``
    is zero padded in the last slot.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValidationError("timestep must be non-negative")
    half = h // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / h)
    args = t[..., None] * freqs
    out = np.zeros(t.shape + (h,), dtype=np.float64)
    out[..., 0 : 2 * half : 2] = np.sin(args)
    out[..., 1 : 2 * half : 2] = np.cos(args)
    return out


timestep_embedding = sinusoidal_embedding


def default_heads(h: int, preferred: int = 8) -> int:
    return max(d for d in range(1, preferred + 1) if h % d == 0)


@dataclass
class ModelConfig:
    hidden_size: int = 64
    num_types: int = 2
    encoder: str = "toy"  # "toy" or "pretrained:<name>"
    encoder_width: int = 128
    encoder_layers: int = 2
    encoder_ffn: int = 4  # width multiplier of encoder feed-forward sublayers
    decoder_ffn: int = 1  # width multiplier of span-encoder feed-forward sublayers
    heads: int = 8  # reduced to the largest divisor of the width when needed
    dropout: float = 0.1
    pointer_activation: str = "gelu"
    vocab: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- blocks


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)
        self.last_weights = None

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.dk).transpose(1, 2)

    def project_kv(self, x):
        return self._split(self.k(x)), self._split(self.v(x))

    def forward(self, x, kv=None, key_mask=None, keep_weights=False):
        """``key_mask`` is ``(B, L_k)`` with True for real positions."""
        B, L, D = x.shape
        k, v = kv if kv is not None else self.project_kv(x)
        q = self._split(self.q(x))
        scores = (q / math.sqrt(self.dk)) @ k.transpose(-1, -2)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        out = self.drop(weights) @ v
        return self.o(out.transpose(1, 2).reshape(B, L, D))


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, d * mult), nn.GELU(), nn.Dropout(dropout), nn.Linear(d * mult, d))

    def forward(self, x):
        return self.net(x)


class AttentionBlock(nn.Module):
    """Post-norm attention sublayer followed by a feed-forward sublayer."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ffn, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, kv=None, key_mask=None, keep_weights=False):
        x = self.norm1(x + self.drop(self.attn(x, kv=kv, key_mask=key_mask, keep_weights=keep_weights)))
        return self.norm2(x + self.drop(self.ff(x)))


# ------------------------------------------------------------------------- encoders


def _pad_mask(lengths: Sequence[int], device=None) -> torch.Tensor:
    lengths = torch.as_tensor(lengths, device=device)
    return torch.arange(int(lengths.max()), device=device)[None, :] < lengths[:, None]


class BiLSTM(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        if d_out % 2:
            raise ConfigurationError(f"bidirectional width must be even, got {d_out}")
        self.lstm = nn.LSTM(d_in, d_out // 2, batch_first=True, bidirectional=True)

    def forward(self, x, lengths):
        packed = pack_padded_sequence(x, torch.as_tensor(lengths).cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class ToyEncoder(nn.Module):
    """Trainable embeddings, a small self-attention stack and a BiLSTM."""

    def __init__(self, vocab: Sequence[str], h: int, width: int, layers: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.vocab = [PAD, UNK] + [w for w in vocab if w not in (PAD, UNK)]
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.width = width
        self.embed = nn.Embedding(len(self.vocab), width, padding_idx=0)
        heads = default_heads(width, heads)
        self.blocks = nn.ModuleList(AttentionBlock(width, heads, ffn, dropout) for _ in range(layers))
        self.rnn = BiLSTM(width, width)
        self.out = nn.Linear(width, h) if width != h else nn.Identity()
        self.drop = nn.Dropout(dropout)

    def token_ids(self, sentences: Sequence[Sentence]):
        lengths = [s.M for s in sentences]
        ids = torch.zeros(len(sentences), max(lengths), dtype=torch.long)
        for b, s in enumerate(sentences):
            ids[b, : s.M] = torch.tensor([self.index.get(w, 1) for w in s.tokens])
        return ids, lengths

    def forward(self, sentences: Sequence[Sentence]):
        ids, lengths = self.token_ids(sentences)
        mask = _pad_mask(lengths)
        pos = torch.as_tensor(sinusoidal_embedding(np.arange(ids.shape[1]), self.width), dtype=self.embed.weight.dtype)
        x = self.drop(self.embed(ids) * math.sqrt(self.width) + pos)
        for block in self.blocks:
            x = block(x, key_mask=mask)
        x = self.rnn(x, lengths)
        return self.out(x), mask


class PretrainedEncoder(nn.Module):
    """Adapter around a subword contextual encoder.

    ``tokenize`` maps a word list to ``(subword_ids, word_index_per_subword)``;
    ``backbone(input_ids, attention_mask)`` returns ``(B, S, width)`` states.
    Subword states are max-pooled into words, projected to ``h`` and passed through
    a BiLSTM.
    """

    def __init__(self, backbone: nn.Module, tokenize: Callable, width: int, h: int, pad_id: int = 0):
        super().__init__()
        self.backbone = backbone
        self.tokenize = tokenize
        self.pad_id = pad_id
        self.proj = nn.Linear(width, h)
        self.rnn = BiLSTM(h, h)

    @classmethod
    def from_pretrained(cls, name: str, h: int) -> "PretrainedEncoder":
        from transformers import AutoModel, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(name)
        model = AutoModel.from_pretrained(name)

        def tokenize(words):
            enc = tok(list(words), is_split_into_words=True, truncation=True)
            ids, wid = [], []
            for i, w in zip(enc["input_ids"], enc.word_ids()):
                if w is not None:
                    ids.append(i)
                    wid.append(w)
            return ids, wid

        def backbone(input_ids, attention_mask):
            return model(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state

        enc = cls(backbone=_Callable(model, backbone), tokenize=tokenize, width=model.config.hidden_size, h=h,
                  pad_id=tok.pad_token_id or 0)
        return enc

    def forward(self, sentences: Sequence[Sentence]):
        pieces = []
        for s in sentences:
            try:
                pieces.append(self.tokenize(s.tokens))
            except Exception as exc:
                raise RuntimeError(f"tokenizer failed on sentence {s.id!r}: {exc}") from exc
        S = max(len(ids) for ids, _ in pieces)
        M = max(s.M for s in sentences)
        B = len(sentences)
        ids = torch.full((B, S), self.pad_id, dtype=torch.long)
        word = torch.full((B, S), M, dtype=torch.long)  # padding subwords go to a dump slot
        att = torch.zeros(B, S, dtype=torch.long)
        for b, (sub, wid) in enumerate(pieces):
            ids[b, : len(sub)] = torch.tensor(sub, dtype=torch.long)
            word[b, : len(wid)] = torch.tensor(wid, dtype=torch.long)
            att[b, : len(sub)] = 1
        states = self.backbone(ids, att)
        d = states.shape[-1]
        pooled = torch.full((B, M + 1, d), float("-inf"), dtype=states.dtype)
        pooled = pooled.scatter_reduce(1, word[..., None].expand(B, S, d), states, reduce="amax", include_self=True)
        pooled = pooled[:, :M]
        pooled = torch.where(torch.isinf(pooled), torch.zeros_like(pooled), pooled)
        lengths = [s.M for s in sentences]
        x = self.rnn(self.proj(pooled), lengths)
        return x, _pad_mask(lengths)


class _Callable(nn.Module):
    def __init__(self, module, fn):
        super().__init__()
        self.module = module
        self.fn = fn

    def forward(self, *args):
        return self.fn(*args)


# ------------------------------------------------------------------------- decoder


@dataclass
class SentenceEncoding:
    """Encoder output for a batch of sentences plus step-invariant projections."""

    H: torch.Tensor  # (B, M, h)
    mask: torch.Tensor  # (B, M) bool
    lengths: np.ndarray  # (B,)
    cache: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.H.shape[0]


@dataclass
class DenoiserOutput:
    p_left: torch.Tensor  # (B, K, M)
    p_right: torch.Tensor  # (B, K, M)
    p_type: torch.Tensor  # (B, K, C + 1); last column is the no-entity class
    x0_hat: np.ndarray  # (B, K, 2)
    lengths: np.ndarray  # (B,)
    left_idx: np.ndarray  # (B, K) argmax of p_left
    right_idx: np.ndarray  # (B, K) argmax of p_right

    def item(self, b: int) -> "DenoiserOutput":
        """Single-sentence view with padding stripped; arrays lose the batch axis."""
        M = int(self.lengths[b])
        return DenoiserOutput(
            p_left=self.p_left[b, :, :M],
            p_right=self.p_right[b, :, :M],
            p_type=self.p_type[b],
            x0_hat=self.x0_hat[b],
            lengths=self.lengths[b : b + 1],
            left_idx=self.left_idx[b],
            right_idx=self.right_idx[b],
        )


def pool_span_reps(H: torch.Tensor, spans, lengths=None) -> torch.Tensor:
    """Mean of ``H`` rows ``l..r`` inclusive for each span.

    ``H`` is ``(M, h)`` with ``spans`` ``(K, 2)``, or batched ``(B, M, h)`` with
    ``(B, K, 2)``.
    """
    spans = np.asarray(spans, dtype=np.int64)
    batched = H.dim() == 3
    if not batched:
        H, spans = H[None], spans[None]
    M = H.shape[1]
    lengths = np.full(H.shape[0], M) if lengths is None else np.asarray(lengths)
    l, r = spans[..., 0], spans[..., 1]
    if (l < 0).any() or (l > r).any() or (r >= lengths[:, None]).any():
        raise ValidationError("span indices must satisfy 0 <= l <= r <= M - 1")
    pos = np.arange(M)
    inside = (pos >= l[..., None]) & (pos <= r[..., None])
    weights = inside / (r - l + 1)[..., None]
    out = torch.as_tensor(weights, dtype=H.dtype) @ H
    return out if batched else out[0]


class SpanEncoder(nn.Module):
    """Self-attention among spans, then cross-attention from spans to words."""

    def __init__(self, h: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.self_block = AttentionBlock(h, heads, ffn, dropout)
        self.cross_block = AttentionBlock(h, heads, ffn, dropout)

    def forward(self, H_X, H_S=None, mask=None, kv=None, t_emb=None, keep_weights=False):
        """``kv`` may carry cached cross-attention key/value projections of ``H_S``."""
        if kv is None:
            kv = self.cross_block.attn.project_kv(H_S)
        x = self.self_block(H_X, keep_weights=keep_weights)
        x = self.cross_block(x, kv=kv, key_mask=mask, keep_weights=keep_weights)
        if t_emb is not None:
            x = x + t_emb
        return x


class BoundaryPointer(nn.Module):
    """Scores every word as a boundary of every span.

    The fusion ``H_S W_S + H_X W_X`` is fed through a two-layer perceptron. The first
    perceptron layer is linear, so it is applied to the two projections separately and
    broadcast-summed; only the activation runs at ``(B, K, M, h)`` size.
    """

    def __init__(self, h: int, activation: str = "gelu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.W_S = nn.Linear(h, h, bias=False)
        self.W_X = nn.Linear(h, h, bias=False)
        self.hidden = nn.Linear(h, h)
        self.activation = activation
        self.act = ACTIVATIONS[activation]()
        self.score = nn.Linear(h, 1)

    def word_side(self, H_S):
        return F.linear(self.W_S(H_S), self.hidden.weight)

    def forward(self, H_S, H_bar_X, mask=None, word_side=None):
        ws = self.word_side(H_S) if word_side is None else word_side
        ss = self.hidden(self.W_X(H_bar_X))
        B, K, h = ss.shape
        M = ws.shape[1]
        # a few sentences at a time keeps the (K, M, h) fusion tensor cache resident
        step = max(1, POINTER_CHUNK // max(1, K * M * h))
        w = self.score.weight[0]
        if torch.is_grad_enabled() or self.activation not in INPLACE:
            logits = []
            for s in range(0, B, step):
                z = self.act(ss[s : s + step, :, None, :] + ws[s : s + step, None, :, :])
                logits.append(z @ w)
            logits = torch.cat(logits)
        else:
            # inference: reuse one scratch buffer and activate in place
            buf = ss.new_empty(min(step, B), K, M, h)
            logits = ss.new_empty(B, K, M)
            for s in range(0, B, step):
                z = buf[: min(step, B - s)]
                torch.add(ss[s : s + step, :, None, :], ws[s : s + step, None, :, :], out=z)
                INPLACE[self.activation](z)
                torch.matmul(z, w, out=logits[s : s + step])
        logits = logits + self.score.bias[0]
        if mask is not None:
            logits = logits.masked_fill(~mask.unsqueeze(-2), float("-inf"))
        return torch.sigmoid(logits)


class EntityClassifier(nn.Module):
    def __init__(self, h: int, num_types: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(h, h), nn.GELU(), nn.Linear(h, num_types + 1))

    def forward(self, H_bar_X):
        return torch.softmax(self.net(H_bar_X), dim=-1)


class BoundaryDenoiser(nn.Module):
    """``f(x_t, S, t)``: predicts boundary and type distributions for noisy spans."""

    def __init__(self, config: ModelConfig, encoder: nn.Module | None = None):
        super().__init__()
        self.config = config
        h = config.hidden_size
        if encoder is None:
            encoder = build_encoder(config)
        self.encoder = encoder
        heads = default_heads(h, config.heads)
        self.span_encoder = SpanEncoder(h, heads, config.decoder_ffn, config.dropout)
        self.left = BoundaryPointer(h, config.pointer_activation)
        self.right = BoundaryPointer(h, config.pointer_activation)
        self.classifier = EntityClassifier(h, config.num_types)

    @property
    def num_types(self) -> int:
        return self.config.num_types

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, sentences: Sequence[Sentence]) -> SentenceEncoding:
        if not sentences:
            raise ValidationError("cannot encode an empty batch")
        H, mask = self.encoder(sentences)
        return SentenceEncoding(H=H, mask=mask, lengths=np.array([s.M for s in sentences]))

    def _cached(self, enc: SentenceEncoding):
        # step-invariant projections are only reused when no gradient flows through them
        if torch.is_grad_enabled() and self.training:
            return self._project(enc)
        if "proj" not in enc.cache:
            enc.cache["proj"] = self._project(enc)
        return enc.cache["proj"]

    def _project(self, enc: SentenceEncoding):
        return (
            self.span_encoder.cross_block.attn.project_kv(enc.H),
            self.left.word_side(enc.H),
            self.right.word_side(enc.H),
        )

    def forward(self, x_t: np.ndarray, enc: SentenceEncoding, t, scale: float = 1.0) -> DenoiserOutput:
        """Run one denoising pass.

        ``x_t`` is ``(B, K, 2)`` in signal space; ``t`` is a scalar or ``(B,)`` array.
        """
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 3 or x_t.shape[0] != enc.batch_size or x_t.shape[2] != 2:
            raise ValidationError(f"x_t shape {x_t.shape} incompatible with batch of {enc.batch_size}")
        spans = discretize_batch(x_t, enc.lengths, scale)
        H_X = pool_span_reps(enc.H, spans, enc.lengths)
        kv, ws_left, ws_right = self._cached(enc)
        t = np.broadcast_to(np.asarray(t), (enc.batch_size,))
        t_emb = torch.as_tensor(sinusoidal_embedding(t, self.config.hidden_size), dtype=enc.H.dtype)[:, None, :]
        H_bar = self.span_encoder(H_X, mask=enc.mask, kv=kv, t_emb=t_emb)
        p_left = self.left(enc.H, H_bar, enc.mask, word_side=ws_left)
        p_right = self.right(enc.H, H_bar, enc.mask, word_side=ws_right)
        p_type = self.classifier(H_bar)
        left_idx = np.argmax(p_left.detach().cpu().numpy(), axis=-1)
        right_idx = np.argmax(p_right.detach().cpu().numpy(), axis=-1)
        M = enc.lengths[:, None]
        x0_hat = np.stack([encode_indices(left_idx, M, scale), encode_indices(right_idx, M, scale)], axis=-1)
        return DenoiserOutput(p_left, p_right, p_type, x0_hat, enc.lengths, left_idx, right_idx)

    denoise = forward

    def encoder_parameters(self):
        return list(self.encoder.parameters())


def build_encoder(config: ModelConfig) -> nn.Module:
    if config.encoder == "toy":
        return ToyEncoder(
            config.vocab,
            config.hidden_size,
            config.encoder_width,
            config.encoder_layers,
            config.heads,
            config.encoder_ffn,
            config.dropout,
        )
    if config.encoder.startswith("pretrained:"):
        return PretrainedEncoder.from_pretrained(config.encoder.split(":", 1)[1], config.hidden_size)
    raise ConfigurationError(f"unknown encoder {config.encoder!r}")
