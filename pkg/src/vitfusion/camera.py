"""Camera branch: image patching and the patch-sequence transformer encoder.

An RGB image is cut into non-overlapping patches, each flattened patch runs
through a shared MLP, and the resulting tokens (plus class token and
positional embeddings) go through the shared transformer. The branch exposes
both the LayerNormed per-patch sequence and the class-token readout.
"""

from __future__ import annotations

import numpy as np

from .encoder import ClassReadout, EncoderConfig, TokenEmbedder, TransformerEncoder
from .nn import EVAL, ConfigError, MLP, Mode, Module


class PatchShapeError(ConfigError):
    """Image dimensions are not a multiple of the patch size."""


def pad_to_multiple(img: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """Edge-replicate pad so both image dims divide the patch size."""
    H, W = img.shape[:2]
    ph = (-H) % patch_h
    pw = (-W) % patch_w
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")


def patchify(img: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """(H, W, 3) image -> (N, patch_h*patch_w*3) row-major patch grid.

    Lossless: unpatchify inverts it exactly.
    """
    H, W, C = img.shape
    if H % patch_h != 0 or W % patch_w != 0:
        raise PatchShapeError(
            f"image {H}x{W} not divisible by patch {patch_h}x{patch_w}; pad first")
    gh, gw = H // patch_h, W // patch_w
    patches = img.reshape(gh, patch_h, gw, patch_w, C).transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, patch_h * patch_w * C)


def unpatchify(patches: np.ndarray, H: int, W: int, patch_h: int, patch_w: int,
               channels: int = 3) -> np.ndarray:
    gh, gw = H // patch_h, W // patch_w
    img = patches.reshape(gh, gw, patch_h, patch_w, channels).transpose(0, 2, 1, 3, 4)
    return img.reshape(H, W, channels)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float64 in [0, 1]. Float inputs pass through unscaled."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


class ImageBranch(Module):
    """Patch MLP + shared transformer over the patch tokens."""

    def __init__(self, rng, *, image_hw: tuple[int, int], patch: int,
                 mlp_widths, encoder_cfg: EncoderConfig):
        H, W = image_hw
        if H % patch != 0 or W % patch != 0:
            raise PatchShapeError(f"configured image {H}x{W} not divisible by patch {patch}")
        self.patch = patch
        self.image_hw = (H, W)
        self.n_patches = (H // patch) * (W // patch)
        d_patch = patch * patch * 3
        D = encoder_cfg.dim
        self.patch_mlp = MLP(rng, d_patch, mlp_widths, D,
                             activation="gelu", dropout=encoder_cfg.dropout_rate)
        self.embed = TokenEmbedder(rng, D, D, self.n_patches)
        self.encoder = TransformerEncoder(rng, encoder_cfg)
        self.norm = ClassReadout(D)

    @property
    def dim(self) -> int:
        return self.encoder.cfg.dim

    def forward(self, img: np.ndarray, mode: Mode = EVAL):
        """Returns (seq (N_c, D), readout (D,)) for an image in [0, 1]."""
        img = normalize_image(img)
        img = pad_to_multiple(img, self.patch, self.patch)
        patches = patchify(img, self.patch, self.patch)
        feats = self.patch_mlp.forward(patches, mode)
        z = self.encoder.forward(self.embed.forward(feats), mode)
        vec, seq = self.norm.forward(z)
        return seq, vec

    def backward(self, d_seq, d_readout):
        dz = self.norm.backward(d_readout, d_seq)
        dz = self.encoder.backward(dz)
        dfeats = self.embed.backward(dz)
        self.patch_mlp.backward(dfeats)


class LinearImageBranch(Module):
    """Ablation stand-in: the camera transformer replaced by one shared
    linear layer from the flattened patch to the token width."""

    def __init__(self, rng, *, image_hw: tuple[int, int], patch: int, dim: int):
        from .nn import Linear

        H, W = image_hw
        if H % patch != 0 or W % patch != 0:
            raise PatchShapeError(f"configured image {H}x{W} not divisible by patch {patch}")
        self.patch = patch
        self.image_hw = (H, W)
        self.n_patches = (H // patch) * (W // patch)
        self.proj = Linear(rng, patch * patch * 3, dim)
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, img: np.ndarray, mode: Mode = EVAL):
        img = pad_to_multiple(normalize_image(img), self.patch, self.patch)
        patches = patchify(img, self.patch, self.patch)
        seq = self.proj.forward(patches)
        return seq, seq.mean(axis=0)

    def backward(self, d_seq, d_readout):
        d_seq = d_seq + d_readout[None, :] / d_seq.shape[0]
        self.proj.backward(d_seq)
