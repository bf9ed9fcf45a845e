"""Shared pre-LN transformer encoder plus class-token / positional utilities.

The same encoder is instantiated three times in the full detector (camera,
lidar and fusion stages) with different depths and widths. Blocks follow the
pre-LN residual form

    Z'_l = MSA(LN(Z_{l-1})) + Z_{l-1}
    Z_l  = MLP(LN(Z'_l))   + Z'_l

with attention logits scaled by 1/sqrt(dim/heads), GELU in the token MLP
and dropout (training mode only) after the attention weights and each MLP
hidden activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    EVAL,
    ConfigError,
    Dropout,
    GELU,
    LayerNorm,
    Linear,
    Mode,
    Module,
    MultiHeadSelfAttention,
    Param,
    trunc_normal,
)


@dataclass
class TokenSequence:
    """Ordered (S, D) embedding matrix; class token sits at row 0 if present."""

    tokens: np.ndarray
    has_class_token: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ConfigError(f"token matrix must be (S>=1, D), got {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    dim: int
    heads: int
    mlp_hidden: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {self.dropout_rate}")


class TokenMLP(Module):
    """Per-token MLP of an encoder block (dim -> hidden -> dim)."""

    def __init__(self, rng, dim: int, hidden: int, dropout: float):
        self.fc1 = Linear(rng, dim, hidden)
        self.act = GELU()
        self.drop = Dropout(dropout)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x, mode: Mode):
        return self.fc2.forward(self.drop.forward(self.act.forward(self.fc1.forward(x)), mode))

    def backward(self, dout):
        return self.fc1.backward(self.act.backward(self.drop.backward(self.fc2.backward(dout))))


class EncoderBlock(Module):
    def __init__(self, rng, cfg: EncoderConfig):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadSelfAttention(rng, cfg.dim, cfg.heads, cfg.dropout_rate)
        self.ln2 = LayerNorm(cfg.dim)
        self.mlp = TokenMLP(rng, cfg.dim, cfg.mlp_hidden, cfg.dropout_rate)

    def forward(self, x, mode: Mode):
        h = x + self.attn.forward(self.ln1.forward(x), mode)
        return h + self.mlp.forward(self.ln2.forward(h), mode)

    def backward(self, dout):
        dh = dout + self.ln2.backward(self.mlp.backward(dout))
        return dh + self.ln1.backward(self.attn.backward(dh))


class TransformerEncoder(Module):
    """Stack of pre-LN blocks; depth 0 is the identity map on tokens."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.cfg = cfg
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.depth)]

    def forward(self, z: TokenSequence, mode: Mode = EVAL) -> TokenSequence:
        if z.width != self.cfg.dim:
            raise ConfigError(f"token width {z.width} != encoder dim {self.cfg.dim}")
        x = z.tokens
        for block in self.blocks:
            x = block.forward(x, mode)
        return TokenSequence(x, z.has_class_token)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            dout = block.backward(dout)
        return dout


class TokenEmbedder(Module):
    """Projects raw feature vectors to tokens, prepends the learnable class
    token and adds learned positional embeddings.

    Output row 0 is class_token + positions[0]; row i is
    projection(features[i-1]) + positions[i].
    """

    def __init__(self, rng, d_feat: int, dim: int, max_len: int):
        self.proj = Linear(rng, d_feat, dim)
        self.class_token = Param(trunc_normal(rng, (dim,)))
        self.positions = Param(trunc_normal(rng, (max_len + 1, dim)))
        self._S = None

    @property
    def max_len(self) -> int:
        return self.positions.data.shape[0] - 1

    def forward(self, features: np.ndarray) -> TokenSequence:
        features = np.asarray(features, dtype=np.float64)
        S = features.shape[0]
        if S > self.max_len:
            raise ConfigError(f"sequence length {S} exceeds positional table {self.max_len}")
        tok = self.proj.forward(features)
        if tok.shape[-1] != self.class_token.data.shape[0]:
            raise ConfigError("projection width does not match class token width")
        z = np.empty((S + 1, tok.shape[-1]))
        z[0] = self.class_token.data + self.positions.data[0]
        z[1:] = tok + self.positions.data[1:S + 1]
        self._S = S
        return TokenSequence(z, has_class_token=True)

    def backward(self, dz: np.ndarray) -> np.ndarray:
        S = self._S
        self.class_token.grad += dz[0]
        self.positions.grad[0] += dz[0]
        self.positions.grad[1:S + 1] += dz[1:]
        return self.proj.backward(dz[1:])


class ClassReadout(Module):
    """Final LayerNorm over all tokens; splits the class-token readout from
    the per-position sequence feature."""

    def __init__(self, dim: int):
        self.ln = LayerNorm(dim)

    def forward(self, z: TokenSequence):
        if not z.has_class_token:
            raise ConfigError("readout requires a class token at position 0")
        normed = self.ln.forward(z.tokens)
        return normed[0], normed[1:]

    def backward(self, d_readout, d_seq):
        dz = np.concatenate([d_readout[None, :], d_seq], axis=0)
        return self.ln.backward(dz)


def embed_tokens(features, embedder: TokenEmbedder) -> TokenSequence:
    """Functional alias for TokenEmbedder.forward."""
    return embedder.forward(features)


def encode(z: TokenSequence, encoder: TransformerEncoder, mode: Mode = EVAL) -> TokenSequence:
    """Functional alias for TransformerEncoder.forward."""
    return encoder.forward(z, mode)


def readout(z: TokenSequence, norm: ClassReadout) -> np.ndarray:
    """LayerNorm of the class token."""
    vec, _ = norm.forward(z)
    return vec
