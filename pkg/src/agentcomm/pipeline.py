"""Sensor agent -> channel -> task agent.

Sensor side:  machine tokens = last K outputs of sensor_lm(cat(vague text, scene)).
Task side:    answer = task_lm(cat(received machine tokens, detailed question)).

All functions take batches (lists of QA records) because that is how the
trainer and evaluator use them; single-example wrappers sit on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from . import ofat
from .jtcc import JtccCodec, MachineTokens, StageError
from .numkit import Tensor
from .scenes import (ANSWER_IDS, ANSWERS, CATEGORIES, PAD_ID, SceneQA, SceneSpec,
                     describe_scene_text, tokenize)
from .toylm import SequenceLengthError, ToyLM, extract_machine_tokens

VAGUE_TEMPLATES = {
    "color": "a question about the colors of objects in the scene",
    "count": "a question about counting objects in the scene",
    "spatial": "a question about the positions of objects in the scene",
    "existence": "a question about the presence of objects in the scene",
}

MODES = ("proposed", "bench1", "bench3", "bench4")


class CategoryError(ValueError):
    pass


def obfuscate(detailed: str, category: str) -> str:
    """De-identified task description: names the category, nothing else."""
    if category not in VAGUE_TEMPLATES:
        raise CategoryError(f"unknown question category {category!r}")
    return VAGUE_TEMPLATES[category]


# ---------------------------------------------------------------------------
# sensor side
# ---------------------------------------------------------------------------


def _left_pad(seqs: list[list[int]]):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    pos = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, T - n:] = s
        pos[i, T - n:] = np.arange(n)
        mask[i, T - n:] = True
    return ids, pos, mask


def sensor_encode(vague, scenes, sensor: ToyLM, K: int) -> MachineTokens:
    """Raw machine tokens ``[B, K, L_emb]`` (``[K, L_emb]`` for a single example).

    The vague text comes first, the scene tokens after it, so the last K
    positions always fall inside the scene block for K <= cells.
    """
    single = isinstance(vague, str)
    vagues = [vague] if single else list(vague)
    scene_list = [scenes] if single else list(scenes)
    ids, pos, mask = _left_pad([tokenize(v) for v in vagues])
    text = sensor.embed_text(ids, pos).tokens
    scene = sensor.embed_scene(scene_list).tokens
    if text.shape[1] + scene.shape[1] > sensor.cfg.max_seq:
        raise SequenceLengthError(
            f"sensor input {text.shape[1]}+{scene.shape[1]} exceeds max_seq={sensor.cfg.max_seq}")
    x = nk.concat([text, scene], axis=1)
    key_mask = np.concatenate([mask, np.ones(scene.shape[:2], dtype=bool)], axis=1)
    out = sensor.forward_blocks(x, key_mask)
    tokens = extract_machine_tokens(out, K)
    if single:
        tokens = nk.reshape(tokens, tokens.shape[1:])
    return MachineTokens(tokens, "raw")


# ---------------------------------------------------------------------------
# task side
# ---------------------------------------------------------------------------


def task_logits(prefix: Tensor | None, detailed: list[str], task: ToyLM) -> Tensor:
    """Answer-vocabulary logits ``[B, |answers|]`` read at each question's last token."""
    seqs = [tokenize(d) for d in detailed]
    K = 0 if prefix is None else prefix.shape[1]
    lens = np.array([len(s) for s in seqs])
    T = int(lens.max())
    if K + T + 1 > task.cfg.max_seq:
        raise SequenceLengthError(f"prefix {K} + question {T} + answer exceeds max_seq={task.cfg.max_seq}")
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    pos = np.broadcast_to(K + np.arange(T), ids.shape)
    text = task.embed_text(ids, pos).tokens
    x = text if prefix is None else nk.concat([prefix, text], axis=1)
    out = task.forward_blocks(x)
    last = nk.pick_rows(out, K + lens - 1)
    logits = task.lm_head_decode(last)
    return nk.take(logits, np.asarray(ANSWER_IDS), axis=1)


def task_decode(received: MachineTokens | None, detailed, task: ToyLM):
    """Answer(s) and answer-vocabulary logits from decoded machine tokens plus I_d."""
    single = isinstance(detailed, str)
    prefix = None
    if received is not None:
        if received.stage != "decoded":
            raise StageError(f"task_decode wants decoded tokens, got stage {received.stage}")
        prefix = received.values
        if single and prefix.ndim == 2:
            prefix = nk.reshape(prefix, (1,) + prefix.shape)
    logits = task_logits(prefix, [detailed] if single else list(detailed), task)
    answers = [ANSWERS[i] for i in np.argmax(logits.data, axis=1)]
    return (answers[0], logits) if single else (answers, logits)


def answer_targets(rows: list[SceneQA]) -> np.ndarray:
    return np.array([ANSWERS.index(qa.answer) for qa in rows], dtype=np.int64)


# ---------------------------------------------------------------------------
# full episodes
# ---------------------------------------------------------------------------


@dataclass
class Agents:
    sensor: ToyLM
    task: ToyLM
    codec: JtccCodec | None


@dataclass
class ChannelSpec:
    A_t: int = 2
    A_r: int = 4
    K_c: int = 8
    allow_ridge: bool = False


@dataclass
class EpisodeBatch:
    answers: list[str]
    logits: Tensor
    task_loss: Tensor
    loss: Tensor
    recon_mse: float = 0.0
    stages: list[str] = field(default_factory=list)
    coded: np.ndarray | None = None
    raw: np.ndarray | None = None
    ridge_episodes: int = 0


def _transmit_batch(values: Tensor, channels: list[ofat.ChannelState]) -> tuple[np.ndarray, int]:
    out = np.empty(values.shape, dtype=nk.compute_dtype())
    ridge = 0
    for i, ch in enumerate(channels):
        out[i], used = ofat.channel_pass(values.data[i], ch)
        ridge += used
    return out, ridge


def run_episodes(rows: list[SceneQA], agents: Agents, channels: list[ofat.ChannelState] | None,
                 K: int, mode: str = "proposed", jtcc_weight: float = 0.1,
                 channel_override=None) -> EpisodeBatch:
    """Forward one batch of episodes end to end and compute the training loss.

    ``channels`` holds one channel state per row (ignored by bench1/bench3).
    ``channel_override`` replaces the physical channel with a function on the
    transmitted array, used by ablations.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    detailed = [qa.detailed for qa in rows]
    targets = answer_targets(rows)
    stages: list[str] = []
    recon = None
    coded_np = raw_np = None
    ridge = 0
    if mode in ("proposed", "bench4"):
        raw = sensor_encode([qa.vague for qa in rows], [qa.scene for qa in rows], agents.sensor, K)
        stages.append(raw.stage)
        raw_np = raw.values.data
        if mode == "proposed":
            tx = agents.codec.encode(raw)
            tx_values = tx.values
        else:
            tx_values = raw.values
        stages.append("coded")
        coded_np = tx_values.data
        if channel_override is not None:
            rx_np = np.asarray(channel_override(tx_values.data), dtype=nk.compute_dtype())
        else:
            rx_np, ridge = _transmit_batch(tx_values, channels)
        received = MachineTokens(ofat.straight_through(rx_np, tx_values), "received")
        stages.append(received.stage)
        if mode == "proposed":
            decoded = agents.codec.decode(received)
            recon = nk.mse_loss(decoded.values, raw.values.detach())
        else:
            decoded = MachineTokens(received.values, "decoded")
        stages.append(decoded.stage)
        prefix = decoded.values
    elif mode == "bench1":
        prefix = agents.task.embed_scene([qa.scene for qa in rows]).tokens
    else:  # bench3: natural-language summary sent losslessly as token ids
        prefix = None
        detailed = [describe_scene_text(qa.scene) + " ; " + qa.detailed for qa in rows]
    logits = task_logits(prefix, detailed, agents.task)
    task_loss = nk.softmax_ce_loss(logits, targets)
    loss = task_loss
    if recon is not None and jtcc_weight > 0:
        loss = nk.add(task_loss, nk.scale(recon, jtcc_weight))
    answers = [ANSWERS[i] for i in np.argmax(logits.data, axis=1)]
    return EpisodeBatch(answers=answers, logits=logits, task_loss=task_loss, loss=loss,
                        recon_mse=float(recon.data) if recon is not None else 0.0,
                        stages=stages, coded=coded_np, raw=raw_np, ridge_episodes=ridge)


def end_to_end(qa: SceneQA, agents: Agents, channel: ofat.ChannelState, K: int,
               mode: str = "proposed") -> tuple[str, float]:
    """One episode: obfuscate -> encode -> channel -> decode -> answer, and its loss."""
    vague = obfuscate(qa.detailed, qa.category)
    if vague != qa.vague:
        qa = SceneQA(qa.scene, qa.question, qa.detailed, vague, qa.category, qa.answer, qa.info_rank)
    out = run_episodes([qa], agents, [channel], K, mode)
    return out.answers[0], float(out.task_loss.data)
