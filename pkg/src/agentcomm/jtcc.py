"""Joint token and channel coding: a mirrored per-token autoencoder."""

from __future__ import annotations

import math

import numpy as np

from . import numkit as nk
from .numkit import Tensor

STAGE_WIDTH = {"raw": "L_emb", "coded": "L_t", "received": "L_t", "decoded": "L_emb"}


class StageError(ValueError):
    """Machine tokens are at the wrong stage or width for this operation."""


class MachineTokens:
    """Machine-token matrix ``[K, width]`` (or ``[B, K, width]``) tagged with its stage."""

    __slots__ = ("values", "stage", "flags")

    def __init__(self, values: Tensor, stage: str, flags: tuple[str, ...] = ()):
        if stage not in STAGE_WIDTH:
            raise StageError(f"unknown stage {stage!r}")
        if values.ndim < 2 or values.shape[-2] < 1:
            raise StageError(f"machine tokens need K >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values.data)):
            raise FloatingPointError(f"non-finite machine tokens at stage {stage}")
        self.values = values
        self.stage = stage
        self.flags = tuple(flags)

    @property
    def K(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def __repr__(self) -> str:
        return f"MachineTokens(stage={self.stage}, shape={self.values.shape})"


class JtccCodec:
    """Encoder L_emb -> hidden -> L_t and its mirror image, tanh hidden layers."""

    def __init__(self, L_emb: int, L_t: int, rng: np.random.Generator, hidden: int | None = None):
        if not 1 <= L_t < L_emb:
            raise ValueError(f"JTCC needs 1 <= L_t < L_emb, got L_t={L_t}, L_emb={L_emb}")
        self.L_emb, self.L_t = L_emb, L_t
        self.hidden = hidden or (L_emb + L_t) // 2
        widths = {"enc": (L_emb, self.hidden, L_t), "dec": (L_t, self.hidden, L_emb)}
        self.params: dict[str, Tensor] = {}
        for side, (a, h, b) in widths.items():
            self.params[f"jtcc.{side}.w1"] = Tensor(rng.normal(0, 1 / math.sqrt(a), (a, h)).astype(np.float32))
            self.params[f"jtcc.{side}.b1"] = Tensor(np.zeros(h))
            self.params[f"jtcc.{side}.w2"] = Tensor(rng.normal(0, 1 / math.sqrt(h), (h, b)).astype(np.float32))
            self.params[f"jtcc.{side}.b2"] = Tensor(np.zeros(b))
        for k, t in self.params.items():
            t.name = k

    def layer_widths(self, side: str) -> tuple[int, int, int]:
        w1 = self.params[f"jtcc.{side}.w1"].shape
        w2 = self.params[f"jtcc.{side}.w2"].shape
        return (w1[0], w1[1], w2[1])

    def _mlp(self, side: str, x: Tensor) -> Tensor:
        p = self.params
        h = nk.tanh(nk.add(nk.matmul(x, p[f"jtcc.{side}.w1"]), p[f"jtcc.{side}.b1"]))
        return nk.add(nk.matmul(h, p[f"jtcc.{side}.w2"]), p[f"jtcc.{side}.b2"])

    def encode_values(self, x: Tensor) -> Tensor:
        return self._mlp("enc", x)

    def decode_values(self, y: Tensor) -> Tensor:
        return self._mlp("dec", y)

    def encode(self, tokens: MachineTokens) -> MachineTokens:
        if tokens.stage != "raw" or tokens.width != self.L_emb:
            raise StageError(f"encode wants raw tokens of width {self.L_emb}, got {tokens!r}")
        return MachineTokens(self.encode_values(tokens.values), "coded")

    def decode(self, tokens: MachineTokens) -> MachineTokens:
        if tokens.stage != "received" or tokens.width != self.L_t:
            raise StageError(f"decode wants received tokens of width {self.L_t}, got {tokens!r}")
        return MachineTokens(self.decode_values(tokens.values), "decoded", tokens.flags)

    def train_step_denoise(self, tokens: Tensor, noise_sigma: float, rng: np.random.Generator) -> Tensor:
        """Reconstruction MSE of decode(encode(x) + N(0, sigma^2)), recorded on the tape."""
        return denoise_loss(self, tokens, noise_sigma, rng)

    def set_trainable(self, flag: bool = True) -> list[Tensor]:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return list(self.params.values()) if flag else []

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in state:
                raise nk.ManifestError(f"checkpoint missing tensor {k}")
            if state[k].shape != t.shape:
                raise nk.ManifestError(f"{k}: shape {state[k].shape} != expected {t.shape}")
            t.data = np.asarray(state[k], dtype=np.float32).copy()


def denoise_loss(codec: JtccCodec, tokens: Tensor, noise_sigma: float, rng: np.random.Generator) -> Tensor:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    coded = codec.encode_values(tokens)
    if noise_sigma > 0:
        noise = Tensor(rng.normal(0.0, noise_sigma, size=coded.shape).astype(np.float32))
        coded = nk.add(coded, noise)
    recon = codec.decode_values(coded)
    return nk.mse_loss(recon, tokens.detach())


def relative_row_error(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row ||x - y|| / ||x||."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    y = np.asarray(y, dtype=np.float64).reshape(-1, y.shape[-1])
    return np.linalg.norm(x - y, axis=1) / np.maximum(np.linalg.norm(x, axis=1), 1e-12)


def variance_captured(tokens: np.ndarray, L_t: int) -> float:
    """Fraction of total variance in the top ``L_t`` principal components."""
    X = np.asarray(tokens, dtype=np.float64).reshape(-1, tokens.shape[-1])
    X = X - X.mean(axis=0)
    s = np.linalg.svd(X, compute_uv=False)
    ev = s * s
    return float(ev[:L_t].sum() / max(ev.sum(), 1e-300))
