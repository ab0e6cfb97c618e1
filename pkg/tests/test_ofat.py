import math

import numpy as np
import pytest

from agentcomm import numkit as nk
from agentcomm import ofat
from agentcomm.jtcc import MachineTokens, StageError
from agentcomm.numkit import Tensor


def coded(values):
    return MachineTokens(Tensor(np.asarray(values, dtype=np.float32)), "coded")


def test_grid_sizes():
    g, _ = ofat.modulate(np.ones((5, 16)), A_t=2, K_c=8)
    assert g.values.shape == (5, 8, 2) and g.pad_len == 0
    g, _ = ofat.modulate(np.ones((1, 3)), A_t=2, K_c=2)
    assert g.n_symbols == 1 and g.pad_len == 1
    assert g.values.reshape(-1)[-1] == 0.0


def test_modulate_unit_power_and_fill_order():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 7)) * 4.0
    g, scale = ofat.modulate(x, A_t=2, K_c=4)
    flat = g.values.reshape(-1)[: x.size]
    assert np.mean(flat ** 2) == pytest.approx(1.0, abs=1e-6)
    # (symbol, subcarrier, antenna) order over the token-major flattening
    np.testing.assert_allclose(flat * scale, x.reshape(-1), rtol=1e-12)
    assert g.values[0, 0, 1] * scale == pytest.approx(x[0, 1])
    assert g.values[0, 1, 0] * scale == pytest.approx(x[0, 2])


def test_modulate_all_zero_scale_one():
    _, scale = ofat.modulate(np.zeros((2, 4)), 2, 2)
    assert scale == 1.0


def test_modulate_stage_checked():
    with pytest.raises(StageError):
        ofat.modulate(MachineTokens(Tensor(np.ones((2, 4))), "raw"), 2, 2)


def test_identity_channel_exact():
    ch = ofat.identity_channel(1, 4)
    g, _ = ofat.modulate(np.arange(1, 9, dtype=float).reshape(2, 4), 1, 4)
    assert np.array_equal(ofat.transmit(g, ch)[..., 0], g.values[..., 0])


def test_hand_computed_two_by_two():
    H = np.zeros((2, 2, 1))
    H[:, :, 0] = [[1, 0], [0, 2]]
    ch = ofat.ChannelState(H, math.inf)
    grid = ofat.SymbolGrid(np.array([[[3.0, 5.0]]]), 0, 2)
    np.testing.assert_array_equal(ofat.transmit(grid, ch), [[[3.0, 10.0]]])


def test_zero_channel_is_pure_noise():
    ch = ofat.ChannelState(np.zeros((1, 4, 8)), snr_db=3.0, seed=1, episode=2)
    grid = ofat.SymbolGrid(np.ones((3200, 8, 1)), 0, 3200 * 8)
    Y = ofat.transmit(grid, ch)  # 102400 samples
    assert np.var(Y) == pytest.approx(10 ** -0.3, rel=0.05)


def test_dimension_mismatch():
    ch = ofat.draw_channel(2, 2, 4, 10.0, 0)
    g, _ = ofat.modulate(np.ones((2, 6)), A_t=3, K_c=4)
    with pytest.raises(nk.DimensionError):
        ofat.transmit(g, ch)


def test_round_trip_square_noiseless_100_seeds():
    worst = 0.0
    done = 0
    seed = 0
    while done < 100:
        ch = ofat.draw_channel(4, 4, 8, math.inf, seed)
        seed += 1
        if np.linalg.cond(np.transpose(ch.H, (2, 1, 0))).max() >= 1e3:
            continue
        x = np.random.default_rng(seed).normal(size=(5, 16))
        g, scale = ofat.modulate(x, 4, 8)
        rec = ofat.recover(ofat.transmit(g, ch), ch, x.shape, scale)
        err = np.linalg.norm(rec.values.data - x) / np.linalg.norm(x)
        worst = max(worst, err)
        assert rec.stage == "received" and rec.flags == ()
        done += 1
    assert worst < 1e-4


def test_padding_neutral():
    ch = ofat.identity_channel(2, 4)
    x = np.random.default_rng(3).normal(size=(1, 5))
    g, scale = ofat.modulate(x, 2, 4)
    assert g.pad_len == 3
    rec = ofat.recover(ofat.transmit(g, ch), ch, x.shape, scale)
    np.testing.assert_allclose(rec.values.data, x, rtol=1e-6)


def test_noise_variance_matches_snr_million_samples():
    for snr in (-5.0, 0.0, 10.0):
        ch = ofat.ChannelState(np.zeros((1, 8, 8)), snr, seed=4)
        grid = ofat.SymbolGrid(np.zeros((15625, 8, 1)), 0, 0)  # 10^6 receive samples
        Y = ofat.transmit(grid, ch)
        assert Y.size == 1_000_000
        assert np.var(Y) == pytest.approx(10 ** (-snr / 10), rel=0.02)


def _recovery_mse(snr_db, H, episodes=10_000):
    x = np.random.default_rng(0).normal(size=(2, 8))
    errs = []
    for e in range(episodes):
        ch = ofat.ChannelState(H, snr_db, seed=9, episode=e)
        g, scale = ofat.modulate(x, 2, 4)
        rec = ofat.recover(ofat.transmit(g, ch), ch, x.shape, scale)
        errs.append(np.mean((rec.values.data - x) ** 2))
    return float(np.mean(errs))


def test_recovery_mse_linear_in_noise_power():
    H = ofat.draw_channel(2, 2, 4, 0.0, 5).H
    lo = _recovery_mse(10.0, H, 5000)
    hi = _recovery_mse(10.0 - 10 * math.log10(2), H, 5000)
    assert hi / lo == pytest.approx(2.0, rel=0.10)


def test_ridge_fallback_flagged():
    ch = ofat.draw_channel(4, 2, 4, 20.0, 0)
    x = np.random.default_rng(0).normal(size=(2, 8))
    g, scale = ofat.modulate(x, 4, 4)
    rec = ofat.recover(ofat.transmit(g, ch), ch, x.shape, scale)
    assert "ridge" in rec.flags
    assert np.all(np.isfinite(rec.values.data))
    H = np.ones((2, 2, 4))  # rank one on every subcarrier
    _, ridge = ofat.equalizer(ofat.ChannelState(H, 10.0))
    assert ridge


def test_episode_noise_reproducible():
    ch = ofat.draw_channel(2, 4, 8, 5.0, seed=3, episode=11)
    g, _ = ofat.modulate(np.ones((5, 16)), 2, 8)
    assert np.array_equal(ofat.transmit(g, ch), ofat.transmit(g, ofat.draw_channel(2, 4, 8, 5.0, 3, 11)))
    other = ofat.draw_channel(2, 4, 8, 5.0, seed=3, episode=12)
    assert not np.array_equal(ch.H, other.H)


def test_channel_save_load(tmp_path):
    ch = ofat.draw_channel(2, 4, 8, 5.0, seed=3)
    ofat.save_channel(tmp_path / "h.ckpt", ch)
    back = ofat.load_channel(tmp_path / "h.ckpt", 5.0)
    np.testing.assert_array_equal(back.H, ch.H.astype(np.float32))


def test_channel_state_validation():
    with pytest.raises(nk.DimensionError):
        ofat.ChannelState(np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        ofat.ChannelState(np.full((1, 1, 1), np.nan), 0.0)


def test_straight_through_identity_grad():
    src = Tensor(np.random.default_rng(1).normal(size=(5, 16)), requires_grad=True)
    ch = ofat.draw_channel(2, 4, 8, 0.0, 0)
    rx, _ = ofat.channel_pass(src.data, ch)
    g = np.random.default_rng(2).normal(size=(5, 16)).astype(np.float32)
    with nk.Tape() as tape:
        out = ofat.straight_through(rx, src)
        tape.backward(out, grad=g)
    assert np.array_equal(out.data, rx.astype(np.float32))
    assert np.array_equal(src.grad, g)


def test_grid_capacity_structural():
    for A_t, K_c in ((1, 1), (2, 8), (3, 5)):
        g, _ = ofat.modulate(np.ones((1, A_t * K_c)), A_t, K_c)
        assert g.values.shape[1] * g.values.shape[2] == A_t * K_c
        assert g.n_symbols == 1
