"""Analog transmission of coded tokens over a real MIMO channel on OFDM subcarriers.

Each symbol period carries ``K_c * A_t`` amplitudes: one per (subcarrier,
transmit antenna).  The receiver sees ``Y[s, f, m] = sum_k H[k, m, f] X[s, f, k]``
plus white Gaussian noise and inverts each subcarrier by least squares.

SNR convention: ``modulate`` scales the payload to unit mean power per
element, and the receive noise has variance ``10 ** (-snr_db / 10)`` per
antenna sample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .jtcc import MachineTokens, StageError
from .numkit import Tensor

log = logging.getLogger(__name__)

RIDGE_LAMBDA = 1e-3
RANK_TOL = 1e-6


@dataclass
class ChannelState:
    H: np.ndarray  # [A_t, A_r, K_c]
    snr_db: float
    seed: int = 0
    episode: int = 0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim != 3 or min(self.H.shape) < 1:
            raise nk.DimensionError(f"H must be [A_t, A_r, K_c] with positive extents, got {self.H.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("channel matrix has non-finite entries")

    @property
    def A_t(self) -> int:
        return self.H.shape[0]

    @property
    def A_r(self) -> int:
        return self.H.shape[1]

    @property
    def K_c(self) -> int:
        return self.H.shape[2]

    @property
    def noise_var(self) -> float:
        return noise_variance(self.snr_db)

    def noise_stream(self) -> np.random.Generator:
        return nk.stream(self.seed, "noise", self.episode)


def noise_variance(snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def draw_channel(A_t: int, A_r: int, K_c: int, snr_db: float, seed: int, episode: int = 0) -> ChannelState:
    """i.i.d. N(0, 1) gains per (tx, rx, subcarrier), reproducible from (seed, episode)."""
    rng = nk.stream(seed, "channel", episode)
    H = rng.normal(0.0, 1.0, size=(A_t, A_r, K_c))
    return ChannelState(H, snr_db, seed, episode)


def identity_channel(A: int, K_c: int, snr_db: float = math.inf, seed: int = 0, episode: int = 0) -> ChannelState:
    H = np.repeat(np.eye(A)[:, :, None], K_c, axis=2)
    return ChannelState(H, snr_db, seed, episode)


def save_channel(path, ch: ChannelState) -> None:
    nk.save_tensors(path, {"ofat.H": ch.H.astype(np.float32)})


def load_channel(path, snr_db: float, seed: int = 0, episode: int = 0) -> ChannelState:
    return ChannelState(nk.load_tensors(path)["ofat.H"], snr_db, seed, episode)


@dataclass
class SymbolGrid:
    values: np.ndarray  # [S, K_c, A_t]
    pad_len: int
    n_values: int

    @property
    def n_symbols(self) -> int:
        return self.values.shape[0]


def grid_symbols(n_values: int, A_t: int, K_c: int) -> int:
    return -(-n_values // (K_c * A_t))


def modulate(tokens, A_t: int, K_c: int) -> tuple[SymbolGrid, float]:
    """Flatten token-major, scale to unit mean power, fill (symbol, subcarrier, antenna)."""
    if isinstance(tokens, MachineTokens):
        if tokens.stage != "coded":
            raise StageError(f"modulate wants coded tokens, got stage {tokens.stage}")
        tokens = tokens.values
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    flat = arr.astype(np.float64).reshape(-1)
    if flat.size < 1:
        raise ValueError("nothing to modulate")
    power_scale = float(np.sqrt(np.mean(flat * flat)))
    if power_scale == 0.0:
        power_scale = 1.0
    per_symbol = K_c * A_t
    S = grid_symbols(flat.size, A_t, K_c)
    pad_len = S * per_symbol - flat.size
    buf = np.zeros(S * per_symbol)
    buf[: flat.size] = flat / power_scale
    return SymbolGrid(buf.reshape(S, K_c, A_t), pad_len, flat.size), power_scale


def transmit(grid: SymbolGrid, ch: ChannelState, rng: np.random.Generator | None = None) -> np.ndarray:
    """Received samples ``[S, K_c, A_r]``; noise drawn from the channel's episode stream."""
    S, K_c, A_t = grid.values.shape
    if A_t != ch.A_t or K_c != ch.K_c:
        raise nk.DimensionError(
            f"grid has {K_c} subcarriers x {A_t} antennas, channel has {ch.K_c} x {ch.A_t}")
    Y = np.einsum("kmf,sfk->sfm", ch.H, grid.values)
    var = ch.noise_var
    if var > 0:
        rng = rng if rng is not None else ch.noise_stream()
        Y = Y + rng.normal(0.0, math.sqrt(var), size=Y.shape)
    return Y


def equalizer(ch: ChannelState) -> tuple[np.ndarray, bool]:
    """Per-subcarrier left inverse ``[K_c, A_t, A_r]`` and whether ridge was needed."""
    Ht = np.transpose(ch.H, (2, 1, 0))  # [K_c, A_r, A_t]: y = Ht @ t
    ridge = ch.A_r < ch.A_t
    if not ridge:
        s = np.linalg.svd(Ht, compute_uv=False)
        ridge = bool(np.any(s[:, -1] <= RANK_TOL * np.maximum(s[:, 0], 1e-300)))
    if not ridge:
        return np.linalg.pinv(Ht), False
    G = np.einsum("fmk,fml->fkl", Ht, Ht) + RIDGE_LAMBDA * np.eye(ch.A_t)
    return np.linalg.solve(G, np.transpose(Ht, (0, 2, 1))), True


def recover(received: np.ndarray, ch: ChannelState, shape: tuple[int, int], power_scale: float,
            n_values: int | None = None) -> MachineTokens:
    """Least-squares inversion per (symbol, subcarrier), then un-flatten and rescale."""
    S, K_c, A_r = received.shape
    if A_r != ch.A_r or K_c != ch.K_c:
        raise nk.DimensionError(f"received grid {received.shape} does not match channel {ch.H.shape}")
    W, ridge = equalizer(ch)
    if ridge:
        log.warning("recover: ridge fallback (A_t=%d, A_r=%d)", ch.A_t, ch.A_r)
    T = np.einsum("fkm,sfm->sfk", W, received).reshape(-1)
    n = int(np.prod(shape)) if n_values is None else n_values
    vals = (T[:n] * power_scale).reshape(shape)
    flags = ("ridge",) if ridge else ()
    return MachineTokens(Tensor(vals), "received", flags)


def channel_pass(coded: np.ndarray, ch: ChannelState) -> tuple[np.ndarray, bool]:
    """modulate -> transmit -> recover for one episode's ``[K, L_t]`` payload."""
    grid, scale = modulate(coded, ch.A_t, ch.K_c)
    Y = transmit(grid, ch)
    rec = recover(Y, ch, coded.shape, scale)
    return rec.values.data, "ridge" in rec.flags


def straight_through(received: np.ndarray, transmitted: Tensor) -> Tensor:
    """Forward: the received values.  Backward: gradient copied onto ``transmitted``."""
    return nk.straight_through(received, transmitted)
