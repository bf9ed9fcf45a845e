"""Fusion stage: combine camera and lidar token sequences and re-encode.

Three combination strategies are supported (the concat form is the
default):

* ``concat``        -- concatenate along the token axis, then a shared
                       per-token MLP maps each token to the fused width.
* ``sum``           -- zero-pad the shorter sequence, add elementwise, then
                       the shared per-token MLP.
* ``direct_concat`` -- flatten both sequences into one long vector and map
                       it with a single MLP to N_m fused tokens.

All strategies emit a readout of the same width, so one detection head
attaches to any of them.
"""

from __future__ import annotations

import numpy as np

from .encoder import ClassReadout, EncoderConfig, TokenEmbedder, TransformerEncoder
from .nn import EVAL, ConfigError, Linear, MLP, Mode, Module

STRATEGIES = ("concat", "sum", "direct_concat")


class FusionStage(Module):
    """Combine branch token sequences and run the fusion transformer."""

    def __init__(self, rng, *, strategy: str, token_width: int,
                 n_camera_tokens: int, n_lidar_max: int, max_tokens: int,
                 mlp_widths, encoder_cfg: EncoderConfig):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {strategy!r}")
        D = encoder_cfg.dim
        self.strategy = strategy
        self.token_width = token_width
        self.n_camera = n_camera_tokens
        self.n_lidar_max = n_lidar_max
        if strategy == "concat":
            self.n_fused_max = min(n_camera_tokens + n_lidar_max, max_tokens)
            self.token_mlp = MLP(rng, token_width, mlp_widths, D,
                                 activation="gelu", dropout=encoder_cfg.dropout_rate)
        elif strategy == "sum":
            self.n_fused_max = max(n_camera_tokens, n_lidar_max)
            self.token_mlp = MLP(rng, token_width, mlp_widths, D,
                                 activation="gelu", dropout=encoder_cfg.dropout_rate)
        else:
            self.n_fused_max = min(n_camera_tokens + n_lidar_max, max_tokens)
            flat_in = token_width * (n_camera_tokens + n_lidar_max)
            self.token_mlp = MLP(rng, flat_in, mlp_widths, self.n_fused_max * D,
                                 activation="gelu", dropout=encoder_cfg.dropout_rate)
        self.embed = TokenEmbedder(rng, D, D, self.n_fused_max)
        self.encoder = TransformerEncoder(rng, encoder_cfg)
        self.norm = ClassReadout(D)
        self._cache = None

    @property
    def dim(self) -> int:
        return self.encoder.cfg.dim

    def combine(self, h_cam: np.ndarray, h_lidar: np.ndarray) -> np.ndarray:
        """Raw (pre-MLP) combination of the two sequences."""
        if h_cam.shape[1] != h_lidar.shape[1]:
            raise ConfigError(
                f"branch token widths differ: {h_cam.shape[1]} vs {h_lidar.shape[1]}")
        n_c, n_l = h_cam.shape[0], h_lidar.shape[0]
        if self.strategy == "concat":
            keep_l = min(n_l, self.n_fused_max - n_c)
            self._cache = ("concat", n_c, n_l, keep_l)
            return np.concatenate([h_cam, h_lidar[:keep_l]], axis=0)
        if self.strategy == "sum":
            n = max(n_c, n_l)
            x = np.zeros((n, self.token_width))
            x[:n_c] += h_cam
            x[:n_l] += h_lidar
            self._cache = ("sum", n_c, n_l, n)
            return x
        # direct_concat: fixed-width flatten (lidar zero-padded/truncated)
        keep_l = min(n_l, self.n_lidar_max)
        w = self.token_width
        flat = np.zeros(w * (self.n_camera + self.n_lidar_max))
        flat[:n_c * w] = h_cam.ravel()
        flat[self.n_camera * w:self.n_camera * w + keep_l * w] = h_lidar[:keep_l].ravel()
        self._cache = ("direct_concat", n_c, n_l, keep_l)
        return flat[None, :]

    def fuse(self, h_cam: np.ndarray, h_lidar: np.ndarray, mode: Mode = EVAL):
        """Fused (post-MLP, pre-encoder) token sequence."""
        x = self.combine(h_cam, h_lidar)
        out = self.token_mlp.forward(x, mode)
        if self.strategy == "direct_concat":
            out = out.reshape(self.n_fused_max, self.dim)
        return out

    def _fuse_backward(self, dx):
        kind, n_c, n_l, aux = self._cache
        w = self.token_width
        if kind == "concat":
            dtok = self.token_mlp.backward(dx)
            d_cam = dtok[:n_c]
            d_lidar = np.zeros((n_l, w))
            d_lidar[:aux] = dtok[n_c:]
            return d_cam, d_lidar
        if kind == "sum":
            dtok = self.token_mlp.backward(dx)
            return dtok[:n_c].copy(), dtok[:n_l].copy()
        dflat = self.token_mlp.backward(dx.reshape(1, -1))[0]
        d_cam = dflat[:n_c * w].reshape(n_c, w)
        d_lidar = np.zeros((n_l, w))
        d_lidar[:aux] = dflat[self.n_camera * w:self.n_camera * w + aux * w].reshape(aux, w)
        return d_cam, d_lidar

    def forward(self, h_cam: np.ndarray, h_lidar: np.ndarray, mode: Mode = EVAL):
        """Returns the fused readout vector (D_m,)."""
        x = self.fuse(h_cam, h_lidar, mode)
        z = self.encoder.forward(self.embed.forward(x), mode)
        vec, seq = self.norm.forward(z)
        self._n_tokens = seq.shape[0]
        return vec

    def backward(self, d_readout: np.ndarray):
        d_seq = np.zeros((self._n_tokens, self.dim))
        dz = self.norm.backward(d_readout, d_seq)
        dz = self.encoder.backward(dz)
        dx = self.embed.backward(dz)
        return self._fuse_backward(dx)


class LinearFusionStage(Module):
    """Ablation stand-in for the fusion transformer: concat + shared token
    MLP, mean-pool, and a single linear layer to the fused width."""

    def __init__(self, rng, *, token_width: int, n_camera_tokens: int,
                 n_lidar_max: int, max_tokens: int, mlp_widths, dim: int):
        self.strategy = "concat"
        self.token_width = token_width
        self.n_fused_max = min(n_camera_tokens + n_lidar_max, max_tokens)
        self.n_camera = n_camera_tokens
        self.token_mlp = MLP(rng, token_width, mlp_widths, dim, activation="gelu")
        self.proj = Linear(rng, dim, dim)
        self._dim = dim
        self._cache = None

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, h_cam: np.ndarray, h_lidar: np.ndarray, mode: Mode = EVAL):
        n_c, n_l = h_cam.shape[0], h_lidar.shape[0]
        keep_l = min(n_l, self.n_fused_max - n_c)
        x = np.concatenate([h_cam, h_lidar[:keep_l]], axis=0)
        tok = self.token_mlp.forward(x, mode)
        self._cache = (n_c, n_l, keep_l, tok.shape[0])
        return self.proj.forward(tok.mean(axis=0))

    def backward(self, d_readout: np.ndarray):
        n_c, n_l, keep_l, n_tok = self._cache
        dmean = self.proj.backward(d_readout)
        dtok = np.broadcast_to(dmean / n_tok, (n_tok, self._dim)).copy()
        dx = self.token_mlp.backward(dtok)
        d_cam = dx[:n_c]
        d_lidar = np.zeros((n_l, self.token_width))
        d_lidar[:keep_l] = dx[n_c:]
        return d_cam, d_lidar
