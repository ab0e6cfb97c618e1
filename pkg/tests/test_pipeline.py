import math

import numpy as np
import pytest

from agentcomm import numkit as nk
from agentcomm import ofat
from agentcomm.jtcc import JtccCodec, MachineTokens, StageError
from agentcomm.numkit import Tensor
from agentcomm.pipeline import (VAGUE_TEMPLATES, Agents, CategoryError, end_to_end, obfuscate,
                                run_episodes, sensor_encode, task_decode, task_logits)
from agentcomm.scenes import (ANSWERS, COLORS, DIGITS, SHAPES, CorpusConfig, gen_corpus,
                              tokenize)
from agentcomm.toylm import LmConfig, SequenceLengthError, ToyLM


@pytest.fixture(scope="module")
def rows():
    train, _ = gen_corpus(0, CorpusConfig(n_train=40, n_test=4))
    return train


def make_agents(seed=0, L_t=16):
    cfg = LmConfig()
    return Agents(ToyLM(cfg, nk.stream(seed, "s"), scene_grid=(4, 4)),
                  ToyLM(cfg, nk.stream(seed, "t"), scene_grid=(4, 4)),
                  JtccCodec(64, L_t, nk.stream(seed, "j")))


def test_obfuscate_templates(rows):
    assert obfuscate("what color is the cube at (2,3)?", "color") == \
        "a question about the colors of objects in the scene"
    assert obfuscate("how many spheres are there?", "count") == \
        "a question about counting objects in the scene"
    with pytest.raises(CategoryError):
        obfuscate("x", "weight")
    values = set(COLORS) | set(SHAPES) | {s + "s" for s in SHAPES} | set(DIGITS) | {"yes", "no"}
    for v in VAGUE_TEMPLATES.values():
        assert not set(v.split()) & values
    for qa in rows:
        assert qa.answer not in qa.vague.split()


def test_sensor_encode_shape_and_scene_dependence(rows):
    ag = make_agents()
    a = sensor_encode(rows[0].vague, rows[0].scene, ag.sensor, 5)
    b = sensor_encode(rows[0].vague, rows[1].scene, ag.sensor, 5)
    assert a.values.shape == (5, 64) and a.stage == "raw"
    assert not np.array_equal(a.values.data, b.values.data)


def test_sensor_language_before_scene(rows):
    """Machine tokens sit in the scene block: changing the vague text changes them only through attention."""
    ag = make_agents()
    qa = rows[0]
    ids = tokenize(qa.vague)
    text = ag.sensor.embed_text(np.array([ids])).tokens
    scene = ag.sensor.embed_scene([qa.scene]).tokens
    manual = ag.sensor.forward_blocks(nk.concat([text, scene], axis=1)).data[0, -5:]
    got = sensor_encode(qa.vague, qa.scene, ag.sensor, 5).values.data
    np.testing.assert_allclose(got, manual, atol=1e-5)


def test_gradients_reach_lora_and_projection(rows):
    ag = make_agents()
    params = ag.sensor.set_trainable(base=False, lora=True, scene=True)
    for t in ag.sensor.lora.values():  # give the up matrices a value so both factors see gradient
        if t.name.endswith(".up"):
            t.data[:] = 0.01
    with nk.Tape() as tape:
        out = sensor_encode(rows[0].vague, rows[0].scene, ag.sensor, 5)
        tape.backward(nk.sum_all(nk.mul(out.values, out.values)))
    for p in params:
        assert p.grad is not None and np.any(p.grad != 0), p.name


def test_task_prefix_occupies_first_positions(rows):
    ag = make_agents()
    prefix = Tensor(np.random.default_rng(0).normal(size=(1, 4, 64)))
    question = rows[0].detailed
    ids = tokenize(question)
    text = ag.task.embed_text(np.array([ids]), np.array([4 + np.arange(len(ids))])).tokens
    out = ag.task.forward_blocks(nk.concat([prefix, text], axis=1))
    manual = ag.task.lm_head_decode(nk.take(out, slice(3 + len(ids), 4 + len(ids)), axis=1)).data[0, 0]
    got = task_logits(prefix, [question], ag.task).data[0]
    from agentcomm.scenes import ANSWER_IDS
    np.testing.assert_allclose(got, manual[list(ANSWER_IDS)], atol=1e-5)


def test_task_decode_empty_prefix_and_stage(rows):
    ag = make_agents()
    answer, logits = task_decode(None, rows[0].detailed, ag.task)
    assert answer in ANSWERS and logits.shape == (1, len(ANSWERS))
    with pytest.raises(StageError):
        task_decode(MachineTokens(Tensor(np.ones((5, 64))), "raw"), rows[0].detailed, ag.task)


def test_task_overflow(rows):
    ag = make_agents()
    with pytest.raises(SequenceLengthError):
        task_logits(Tensor(np.zeros((1, 60, 64))), [rows[0].detailed], ag.task)


def test_untrained_loss_near_uniform(rows):
    ag = make_agents()
    chans = [ofat.identity_channel(2, 8) for _ in rows]
    ep = run_episodes(rows, ag, chans, 5)
    assert float(ep.task_loss.data) == pytest.approx(math.log(len(ANSWERS)), rel=0.2)


def test_stage_order_and_barrier(rows):
    ag = make_agents()
    seen = []

    def tap(values):
        seen.append(values.copy())
        return values

    ep = run_episodes(rows[:3], ag, None, 5, channel_override=tap)
    assert ep.stages == ["raw", "coded", "received", "decoded"]
    raw = sensor_encode([qa.vague for qa in rows[:3]], [qa.scene for qa in rows[:3]], ag.sensor, 5)
    expected = ag.codec.encode(raw).values.data
    assert len(seen) == 1 and seen[0].shape == (3, 5, 16)
    np.testing.assert_array_equal(seen[0], expected)


def test_end_to_end_deterministic(rows):
    ag = make_agents()
    ch = ofat.draw_channel(2, 4, 8, 10.0, seed=1, episode=0)
    assert end_to_end(rows[0], ag, ch, 5) == end_to_end(rows[0], ag, ch, 5)


def test_bench_modes_run(rows):
    ag = make_agents()
    for mode in ("bench1", "bench3"):
        ep = run_episodes(rows[:4], ag, None, 5, mode)
        assert len(ep.answers) == 4 and ep.stages == []
    chans = [ofat.draw_channel(2, 4, 8, 10.0, 0, i) for i in range(4)]
    ep = run_episodes(rows[:4], ag, chans, 5, "bench4")
    assert ep.coded.shape == (4, 5, 64)


def test_full_pipeline_gradient_check(rows):
    """Finite differences through sensor, codec, noiseless channel and receiver (K = 4)."""
    ag = make_agents(L_t=8)
    batch = rows[:2]
    chans = [ofat.identity_channel(2, 8) for _ in batch]
    rng = np.random.default_rng(0)
    for t in (ag.sensor.lora["lora.1.value.up"], ag.task.lora["lora.0.key.up"]):
        t.data = rng.normal(0, 0.05, size=t.shape).astype(np.float32)

    def task_loss(_):
        return run_episodes(batch, ag, chans, 4).task_loss

    def full_loss(_):
        return run_episodes(batch, ag, chans, 4).loss

    # the reconstruction target is detached, so the combined loss is only a
    # true objective for the codec weights
    checks = [(task_loss, ag.sensor.lora["lora.1.value.up"]), (task_loss, ag.sensor.scene["scene_proj.w"]),
              (task_loss, ag.codec.params["jtcc.enc.w1"]), (full_loss, ag.codec.params["jtcc.dec.w2"]),
              (task_loss, ag.task.lora["lora.0.key.down"])]
    for f, p in checks:
        coords = rng.choice(p.data.size, size=6, replace=False)
        assert nk.grad_check(f, p, eps=1e-3, coords=coords) < 1e-2, p.name


def test_straight_through_sensor_gradients_nonzero_with_noise(rows):
    ag = make_agents()
    params = ag.sensor.set_trainable(base=False, lora=True, scene=True) + ag.codec.set_trainable(True)
    chans = [ofat.draw_channel(2, 4, 8, 0.0, 3, i) for i in range(4)]
    with nk.Tape() as tape:
        ep = run_episodes(rows[:4], ag, chans, 5)
        tape.backward(ep.loss)
    ups = [p for p in params if p.name and p.name.startswith("lora.") and p.name.endswith(".up")]
    assert ups and all(np.any(p.grad != 0) for p in ups)
