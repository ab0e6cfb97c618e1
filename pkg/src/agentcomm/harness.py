"""Training, evaluation, sweeps and the command-line entry point.

Output directory layout::

    out/data/{train,test}.jsonl, manifest.txt
    out/ckpt/base-<hash>.ckpt       pretrained sensor and task weights, keyed by config
    out/ckpt/<mode>-K<k>.ckpt       adapters, scene projections and codec after training
    out/results/*.csv, *.svg
    out/manifest.txt                config hash, seeds, file digests
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit as nk
from . import ofat
from .jtcc import JtccCodec, variance_captured
from .pipeline import (MODES, Agents, answer_targets, run_episodes, sensor_encode,
                       task_logits)
from .scenes import (ANSWER_IDS, CATEGORIES, CorpusConfig, SceneConfig, SceneQA, Unanswerable,
                     describe_scene_text, gen_corpus, gen_question, gen_scene,
                     majority_baseline, read_split, write_corpus)
from .toylm import LmConfig, ToyLM

log = logging.getLogger("agentcomm")

WALL_FIELDS = ("wall_time",)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    n_train: int = 5000
    n_test: int = 1000
    grid_w: int = 4
    grid_h: int = 4
    min_objects: int = 1
    max_objects: int = 5
    max_info_rank: int = 3  # 0: no filter


@dataclass
class PretrainConfig:
    steps: int = 6000
    batch: int = 32
    lr: float = 0.05


@dataclass
class TrainConfig:
    steps: int = 6000
    batch: int = 32
    lr: float = 0.05
    lam: float = 1.0
    clip: float = 1.0
    freeze_task_model: bool = True
    snr_low: float = -5.0
    snr_high: float = 15.0


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "proposed"
    K: int = 5
    L_t: int = 16
    A_t: int = 2
    A_r: int = 4
    K_c: int = 8
    allow_ridge: bool = False
    snr_db: float = 15.0
    snr_sweep: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0)
    k_sweep: tuple = (1, 2, 3, 4, 5, 6, 7)
    seeds: tuple = (0, 1, 2)
    sensor: LmConfig = field(default_factory=LmConfig)
    task: LmConfig = field(default_factory=LmConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # dotted key -> (owner attribute path)
    SECTIONS = {"model.sensor": "sensor", "model.task": "task", "data": "data",
                "pretrain": "pretrain", "train": "train"}

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for lm in (self.sensor, self.task):
            try:
                lm.validate()
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if self.sensor.L_emb != self.task.L_emb:
            raise ConfigError("sensor and task models must share L_emb")
        if not 1 <= self.L_t < self.sensor.L_emb:
            raise ConfigError(f"need 1 <= L_t < L_emb, got L_t={self.L_t}")
        if min(self.A_t, self.A_r, self.K_c) < 1:
            raise ConfigError("antenna and subcarrier counts must be positive")
        if self.A_r < self.A_t and not self.allow_ridge:
            raise ConfigError(f"A_r={self.A_r} < A_t={self.A_t} needs allow_ridge = true")
        cells = self.data.grid_w * self.data.grid_h
        for k in (self.K,) + tuple(self.k_sweep):
            if not 1 <= k <= cells:
                raise ConfigError(f"K={k} must be in [1, {cells}] (machine tokens come from scene cells)")
        # longest prompts each side must fit max_seq
        from .scenes import tokenize
        from .pipeline import VAGUE_TEMPLATES
        vague = max(len(tokenize(v)) for v in VAGUE_TEMPLATES.values())
        if vague + cells > self.sensor.max_seq:
            raise ConfigError(f"sensor prompt {vague}+{cells} exceeds max_seq={self.sensor.max_seq}")
        longest_q = 10
        k_max = max((self.K,) + tuple(self.k_sweep))
        if max(k_max, cells) + longest_q + 1 > self.task.max_seq:
            raise ConfigError(f"task prompt exceeds max_seq={self.task.max_seq}")
        if self.train.steps < 1 or self.train.batch < 1 or self.train.lr <= 0:
            raise ConfigError("train.steps, train.batch and train.lr must be positive")

    def corpus_config(self) -> CorpusConfig:
        d = self.data
        return CorpusConfig(scene=SceneConfig(d.grid_w, d.grid_h, d.min_objects, d.max_objects),
                            n_train=d.n_train, n_test=d.n_test,
                            max_info_rank=d.max_info_rank or None)

    def flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                section = next(k for k, a in self.SECTIONS.items() if a == f.name)
                for g in dataclasses.fields(v):
                    out[f"{section}.{g.name}"] = _fmt(getattr(v, g.name))
            else:
                out[f.name] = _fmt(v)
        return out

    def digest(self) -> str:
        text = "\n".join(f"{k} = {v}" for k, v in sorted(self.flat().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        cfg = parse_config_lines([f"{k} = {v}" for k, v in self.flat().items()])
        for k, v in changes.items():
            _assign(cfg, k, v)
        return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_as(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            elem = like[0] if like else 0.0
            return tuple(_parse_as(p.strip(), elem, key) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _assign(cfg: RunConfig, key: str, value) -> None:
    owner, name = cfg, key
    for section, attr in RunConfig.SECTIONS.items():
        if key.startswith(section + "."):
            owner, name = getattr(cfg, attr), key[len(section) + 1:]
            break
    if name not in {f.name for f in dataclasses.fields(owner)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(owner, name)
    parsed = _parse_as(value, current, key) if isinstance(value, str) else value
    if isinstance(owner, LmConfig):
        owner = dataclasses.replace(owner, **{name: parsed})
        setattr(cfg, RunConfig.SECTIONS[key.rsplit(".", 1)[0]], owner)
    else:
        setattr(owner, name, parsed)


def parse_config_lines(lines) -> RunConfig:
    cfg = RunConfig()
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _assign(cfg, key, value)
    return cfg


def load_config(spec: str | None, overrides: dict | None = None) -> RunConfig:
    """``spec`` is a path to a key-value file, or ``default``/None for defaults."""
    if spec in (None, "default"):
        cfg = RunConfig()
    else:
        path = Path(spec)
        if not path.is_file():
            raise ConfigError(f"config file not found: {spec}")
        cfg = parse_config_lines(path.read_text().splitlines())
    for k, v in (overrides or {}).items():
        _assign(cfg, k, v)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def gen_data(cfg: RunConfig, out: Path) -> Path:
    train, test = gen_corpus(cfg.seed, cfg.corpus_config())
    d = out / "data"
    write_corpus(d, train, test, {"seed": cfg.seed, "config": cfg.digest(),
                                  "n_train": len(train), "n_test": len(test),
                                  "majority": "%s %.4f" % majority_baseline(test)})
    return d


def load_data(out: Path) -> tuple[list[SceneQA], list[SceneQA]]:
    d = out / "data"
    for name in ("train.jsonl", "test.jsonl"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing dataset file {d / name}; run gen-data first")
    return read_split(d / "train.jsonl"), read_split(d / "test.jsonl")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def build_agents(cfg: RunConfig, with_codec: bool = True) -> Agents:
    grid = (cfg.data.grid_w, cfg.data.grid_h)
    sensor = ToyLM(cfg.sensor, nk.stream(cfg.seed, "init", "sensor"), scene_grid=grid)
    task = ToyLM(cfg.task, nk.stream(cfg.seed, "init", "task"), scene_grid=grid)
    codec = JtccCodec(cfg.sensor.L_emb, cfg.L_t, nk.stream(cfg.seed, "init", "jtcc")) if with_codec else None
    return Agents(sensor, task, codec)


def agents_state(agents: Agents) -> dict[str, np.ndarray]:
    state = {**agents.sensor.state_dict("sensor."), **agents.task.state_dict("task.")}
    if agents.codec is not None:
        state.update(agents.codec.state_dict())
    return state


def load_agents_state(agents: Agents, state: dict[str, np.ndarray]) -> None:
    agents.sensor.load_state_dict(state, "sensor.")
    agents.task.load_state_dict(state, "task.")
    if agents.codec is not None:
        agents.codec.load_state_dict(state)


def _cosine(step: int, total: int, warmup: int = 100) -> float:
    if step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(total - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


def _fresh_rows(rng, n: int, scene_cfg: SceneConfig, exclude: set[str]) -> list[SceneQA]:
    rows = []
    while len(rows) < n:
        scene = gen_scene(rng, scene_cfg)
        if scene.serialize() in exclude:
            continue
        try:
            rows.append(gen_question(scene, CATEGORIES[int(rng.integers(len(CATEGORIES)))], rng))
        except Unanswerable:
            pass
    return rows


def _answer_logits_after_scene(model: ToyLM, rows: list[SceneQA], rng=None) -> nk.Tensor:
    """Question first, scene after; the answer is read at the last scene cell."""
    out = sensor_encode([qa.detailed for qa in rows], [qa.scene for qa in rows], model, 1)
    last = nk.reshape(out.values, (len(rows), model.cfg.L_emb))
    return nk.take(model.lm_head_decode(last), np.asarray(ANSWER_IDS), axis=1)


def _answer_logits_scene_prefix(model: ToyLM, rows: list[SceneQA], rng=None) -> nk.Tensor:
    return task_logits(model.embed_scene([qa.scene for qa in rows]).tokens,
                       [qa.detailed for qa in rows], model)


def _answer_logits_scene_tail(model: ToyLM, rows: list[SceneQA], rng) -> nk.Tensor:
    """Scene prefix cut to its last L cells (objects sit at the tail, so none are lost)."""
    cells = rows[0].scene.grid_w * rows[0].scene.grid_h
    need = max(len(qa.scene.objects) for qa in rows)
    keep = max(int(rng.integers(1, cells + 1)), need, 1)
    tok = model.embed_scene([qa.scene for qa in rows]).tokens
    return task_logits(nk.take(tok, slice(cells - keep, cells), axis=1), [qa.detailed for qa in rows], model)


def _answer_logits_text(model: ToyLM, rows: list[SceneQA], rng=None) -> nk.Tensor:
    return task_logits(None, [describe_scene_text(qa.scene) + " ; " + qa.detailed for qa in rows], model)


PRETRAIN_FORMATS = {
    "sensor": (_answer_logits_after_scene, _answer_logits_scene_prefix),
    "task": (_answer_logits_scene_prefix, _answer_logits_scene_tail, _answer_logits_text),
}


def pretrain_base(model: ToyLM, role: str, cfg: RunConfig, exclude: set[str], log_fn=None) -> list[float]:
    """Stand-in for a pretrained multimodal LLM: next-token answer prediction on
    freshly drawn scenes (never the held-out ones), cycling prompt formats."""
    formats = PRETRAIN_FORMATS[role]
    p = cfg.pretrain
    rng = nk.stream(cfg.seed, "pretrain", role)
    params = model.set_trainable(base=True, lora=False, scene=True)
    opt = nk.Momentum(params, lr=p.lr, momentum=0.9, clip=cfg.train.clip)
    scene_cfg = cfg.corpus_config().scene
    losses = []
    for step in range(p.steps):
        rows = _fresh_rows(rng, p.batch, scene_cfg, exclude)
        fmt = formats[step % len(formats)]
        opt.zero_grad()
        with nk.Tape() as tape:
            loss = nk.softmax_ce_loss(fmt(model, rows, rng), answer_targets(rows))
            tape.backward(loss)
        opt.lr = p.lr * _cosine(step, p.steps)
        opt.step()
        losses.append(float(loss.data))
        if log_fn and (step % 500 == 0 or step == p.steps - 1):
            log_fn(f"pretrain {role} step {step} loss {losses[-1]:.4f}")
    model.set_trainable(base=False, lora=False, scene=False)
    return losses


def ensure_base(cfg: RunConfig, out: Path, test: list[SceneQA], log_fn=None) -> dict[str, np.ndarray]:
    """Pretrained sensor and task weights, cached under ckpt/ by config digest."""
    key = cfg.replace(mode="proposed", K=5, L_t=16, **{"train.steps": 1}).digest()
    path = out / "ckpt" / f"base-{key}.ckpt"
    if path.is_file():
        return nk.load_tensors(path)
    agents = build_agents(cfg, with_codec=False)
    exclude = {qa.scene.serialize() for qa in test}
    pretrain_base(agents.sensor, "sensor", cfg, exclude, log_fn)
    pretrain_base(agents.task, "task", cfg, exclude, log_fn)
    state = agents_state(agents)
    path.parent.mkdir(parents=True, exist_ok=True)
    nk.save_tensors(path, state)
    return state


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def train_channels(cfg: RunConfig, step: int, rng) -> list[ofat.ChannelState]:
    chans = []
    for i in range(cfg.train.batch):
        snr = float(rng.uniform(cfg.train.snr_low, cfg.train.snr_high))
        chans.append(ofat.draw_channel(cfg.A_t, cfg.A_r, cfg.K_c, snr,
                                       seed=cfg.seed + 1_000_003, episode=step * cfg.train.batch + i))
    return chans


def trainable_params(agents: Agents, cfg: RunConfig) -> list[nk.Tensor]:
    params = agents.sensor.set_trainable(base=False, lora=True, scene=True)
    if agents.codec is not None:
        params += agents.codec.set_trainable(True)
    params += agents.task.set_trainable(base=False, lora=not cfg.train.freeze_task_model, scene=False)
    return params


def train(cfg: RunConfig, out: Path, log_fn=None) -> tuple[Path, list[float]]:
    """Communication training of one mode; returns the checkpoint path and loss log."""
    train_rows, test_rows = load_data(out)
    base = ensure_base(cfg, out, test_rows, log_fn)
    agents = build_agents(cfg, with_codec=cfg.mode == "proposed")
    load_agents_state(agents, {**base, **(agents.codec.state_dict() if agents.codec else {})})
    losses: list[float] = []
    if cfg.mode in ("proposed", "bench4"):
        params = trainable_params(agents, cfg)
        t = cfg.train
        opt = nk.Momentum(params, lr=t.lr, momentum=0.9, clip=t.clip)
        rng = nk.stream(cfg.seed, "train", cfg.mode, cfg.K)
        for step in range(t.steps):
            rows = [train_rows[i] for i in rng.integers(len(train_rows), size=t.batch)]
            chans = train_channels(cfg, step, rng)
            opt.zero_grad()
            with nk.Tape() as tape:
                ep = run_episodes(rows, agents, chans, cfg.K, cfg.mode, jtcc_weight=t.lam)
                tape.backward(ep.loss)
            value = float(ep.loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged at step {step} (loss {value})")
            opt.lr = t.lr * _cosine(step, t.steps)
            opt.step()
            losses.append(value)
            if log_fn and (step % 500 == 0 or step == t.steps - 1):
                log_fn(f"train {cfg.mode} K={cfg.K} step {step} loss {value:.4f}")
        for p in params:
            p.requires_grad = False
    path = checkpoint_path(out, cfg.mode, cfg.K)
    path.parent.mkdir(parents=True, exist_ok=True)
    nk.save_tensors(path, agents_state(agents))
    log_path = out / "results" / f"trainlog-{cfg.mode}-K{cfg.K}.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, f"{v:.6f}"] for i, v in enumerate(losses))
    return path, losses


def checkpoint_path(out: Path, mode: str, K: int) -> Path:
    return out / "ckpt" / f"{mode}-K{K}.ckpt"


@dataclass
class RunResult:
    mode: str
    snr_db: float
    K: int
    L_t: int
    seed: int
    accuracy: float
    mean_loss: float
    bytes_transmitted: int
    wall_time: float
    by_category: dict = field(default_factory=dict)

    CSV_FIELDS = ("mode", "snr_db", "K", "L_t", "seed", "accuracy", "mean_loss", "bytes_transmitted", "wall_time")

    def row(self) -> list:
        return [self.mode, f"{self.snr_db:g}", self.K, self.L_t, self.seed, f"{self.accuracy:.6f}",
                f"{self.mean_loss:.6f}", self.bytes_transmitted, f"{self.wall_time:.3f}"]


def load_trained(cfg: RunConfig, out: Path, mode: str | None = None, K: int | None = None) -> Agents:
    mode = mode or cfg.mode
    K = cfg.K if K is None else K
    path = checkpoint_path(out, mode, K)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint {path}; run train first")
    agents = build_agents(cfg, with_codec=mode == "proposed")
    load_agents_state(agents, nk.load_tensors(path))
    return agents


def evaluate(cfg: RunConfig, agents: Agents, rows: list[SceneQA], mode: str, snr_db: float,
             seed: int, K: int | None = None, batch: int = 100, trace=None) -> RunResult:
    """Exact-match accuracy; channel and noise for episode i come from (seed, i)."""
    K = cfg.K if K is None else K
    t0 = time.perf_counter()
    correct, loss_sum = 0, 0.0
    cats: dict[str, list[int]] = {}
    for start in range(0, len(rows), batch):
        chunk = rows[start:start + batch]
        chans = None
        if mode in ("proposed", "bench4"):
            chans = [ofat.draw_channel(cfg.A_t, cfg.A_r, cfg.K_c, snr_db, seed, start + i)
                     for i in range(len(chunk))]
        ep = run_episodes(chunk, agents, chans, K, mode)
        logp = _row_losses(ep.logits.data, answer_targets(chunk))
        for i, (qa, ans) in enumerate(zip(chunk, ep.answers)):
            ok = int(ans == qa.answer)
            correct += ok
            loss_sum += logp[i]
            cats.setdefault(qa.category, [0, 0])
            cats[qa.category][0] += ok
            cats[qa.category][1] += 1
            if trace is not None:
                trace.write(json.dumps({"scene": qa.scene.serialize(), "vague": qa.vague,
                                        "detailed": qa.detailed, "K": K, "snr_db": snr_db,
                                        "answer": ans, "truth": qa.answer,
                                        "loss": round(float(logp[i]), 6)}) + "\n")
    n = max(len(rows), 1)
    return RunResult(mode, float(snr_db), K, cfg.L_t, seed, correct / n, loss_sum / n,
                     mean_bytes(cfg, rows, mode, K), time.perf_counter() - t0,
                     {c: a / b for c, (a, b) in sorted(cats.items())})


def _row_losses(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(targets)), targets]


# ---------------------------------------------------------------------------
# bytes on the air
# ---------------------------------------------------------------------------


def episode_bytes(cfg: RunConfig, qa: SceneQA, mode: str, K: int | None = None) -> int:
    K = cfg.K if K is None else K
    if mode == "bench1":
        return len(qa.scene.serialize().encode("utf-8"))
    if mode == "bench3":
        return len(describe_scene_text(qa.scene).encode("utf-8"))
    if mode == "bench4":
        return K * cfg.sensor.L_emb * 4
    if mode == "proposed":
        return K * cfg.L_t * 4
    raise ValueError(f"unknown mode {mode!r}")


def mean_bytes(cfg: RunConfig, rows: list[SceneQA], mode: str, K: int | None = None) -> int:
    if not rows:
        return 0
    return int(round(float(np.mean([episode_bytes(cfg, qa, mode, K) for qa in rows]))))


def compression_report(cfg: RunConfig, rows: list[SceneQA]) -> list[list]:
    """Per-mode mean bytes per episode and ratios against the proposed scheme."""
    modes = ("bench1", "bench3", "bench4", "proposed")
    means = {m: float(np.mean([episode_bytes(cfg, qa, m) for qa in rows])) for m in modes}
    multi = [qa for qa in rows if len(qa.scene.objects) >= 2]
    frac = (float(np.mean([episode_bytes(cfg, qa, "proposed") < episode_bytes(cfg, qa, "bench3")
                           for qa in multi])) if multi else float("nan"))
    table = [["mode", "mean_bytes", "ratio_to_proposed"]]
    for m in modes:
        table.append([m, f"{means[m]:.3f}", f"{means[m] / means['proposed']:.6f}"])
    table.append(["proposed_below_bench3_frac_2plus_objects", f"{frac:.6f}", ""])
    return table


def sparsity_report(cfg: RunConfig, agents: Agents, rows: list[SceneQA], K: int | None = None) -> float:
    """Fraction of machine-token variance inside the top ``L_t`` principal directions."""
    K = cfg.K if K is None else K
    toks = []
    for start in range(0, len(rows), 100):
        chunk = rows[start:start + 100]
        raw = sensor_encode([qa.vague for qa in chunk], [qa.scene for qa in chunk], agents.sensor, K)
        toks.append(raw.values.data.reshape(-1, raw.width))
    return variance_captured(np.concatenate(toks), cfg.L_t)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    if np.ptp(np.asarray(x, float)) == 0 or np.ptp(np.asarray(y, float)) == 0:
        return 0.0
    r = spearmanr(x, y).statistic
    return float(r) if np.isfinite(r) else 0.0


def sweep_snr(cfg: RunConfig, out: Path, modes=None, log_fn=None) -> list[RunResult]:
    _, test = load_data(out)
    modes = tuple(modes or MODES)
    results = []
    for mode in modes:
        agents = load_trained(cfg, out, mode)
        for snr in cfg.snr_sweep:
            for seed in cfg.seeds:
                r = evaluate(cfg, agents, test, mode, snr, seed)
                results.append(r)
                if log_fn:
                    log_fn(f"sweep-snr {mode} {snr:g} dB seed {seed}: {r.accuracy:.4f}")
    write_results(out / "results" / "snr_sweep.csv", results)
    curves = {m: [(s, np.mean([r.accuracy for r in results if r.mode == m and r.snr_db == s]))
                  for s in cfg.snr_sweep] for m in modes}
    write_svg(out / "results" / "snr_sweep.svg", curves, "SNR (dB)", "accuracy")
    return results


def saturation_point(ks, acc, gain: float = 0.03) -> int:
    """Smallest K after which one more token adds less than ``gain`` accuracy."""
    pairs = sorted(zip(ks, acc))
    for (k, a), (_, b) in zip(pairs, pairs[1:]):
        if b - a < gain:
            return k
    return pairs[-1][0]


def sweep_tokens(cfg: RunConfig, out: Path, log_fn=None, snrs=(0.0, 15.0)) -> list[RunResult]:
    """One proposed-mode training per K, evaluated at each SNR in ``snrs``."""
    _, test = load_data(out)
    results = []
    for K in cfg.k_sweep:
        kcfg = cfg.replace(K=K, mode="proposed")
        if not checkpoint_path(out, "proposed", K).is_file():
            train(kcfg, out, log_fn)
        agents = load_trained(kcfg, out, "proposed", K)
        for snr in snrs:
            for seed in cfg.seeds[:1]:
                r = evaluate(kcfg, agents, test, "proposed", snr, seed, K=K)
                results.append(r)
                if log_fn:
                    log_fn(f"sweep-tokens K={K} {snr:g} dB: {r.accuracy:.4f}")
    write_results(out / "results" / "token_sweep.csv", results)
    curves = {f"{s:g} dB": [(r.K, r.accuracy) for r in results if r.snr_db == s] for s in snrs}
    write_svg(out / "results" / "token_sweep.svg", curves, "machine tokens K", "accuracy")
    return results


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_results(path: Path, results: list[RunResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RunResult.CSV_FIELDS)
        for r in results:
            w.writerow(r.row())


def read_results(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_table(path: Path, table: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(table)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_svg(path: Path, curves: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str,
              width: int = 480, height: int = 320) -> None:
    """Minimal line chart: axes, ticks at data x values, polyline per curve, legend."""
    pad_l, pad_r, pad_t, pad_b = 50, 110, 15, 40
    xs = sorted({x for pts in curves.values() for x, _ in pts})
    if not xs:
        xs = [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x1 = x0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1.0 - y) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{x:g}</text>')
    for y in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{pad_l - 6}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.2f}</text>')
    parts.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="12" y="{pad_t + ph / 2:.1f}" transform="rotate(-90 12 {pad_t + ph / 2:.1f})" '
                 f'text-anchor="middle">{ylabel}</text>')
    for i, (name, pts) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = pad_t + 14 * i + 8
        parts.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{pad_l + pw + 34}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")


def file_sha256(path: Path) -> str:
    return nk.file_digest(path)


def stable_digest(path: Path) -> str:
    """File hash that ignores ``wall_time`` columns of result CSVs."""
    if path.suffix != ".csv":
        return file_sha256(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    drop = {i for i, name in enumerate(rows[0]) if name in WALL_FIELDS} if rows else set()
    text = "\n".join(",".join(v for i, v in enumerate(r) if i not in drop) for r in rows)
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(cfg: RunConfig, out: Path) -> None:
    lines = [f"config = {cfg.digest()}", f"seed = {cfg.seed}",
             "seeds = " + ",".join(str(s) for s in cfg.seeds)]
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.txt" and "traces" not in p.parts:
            lines.append(f"{p.relative_to(out).as_posix()} {stable_digest(p)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agentcomm", description="Machine-token agent communication simulator")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in ("gen-data", "train", "eval", "sweep-snr", "sweep-tokens", "compression-report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default="default", help="key-value config file or 'default'")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        if name in ("train", "eval"):
            p.add_argument("--mode", choices=MODES, default=None)
        if name == "eval":
            p.add_argument("--snr", type=float, default=None)
            p.add_argument("--trace", action="store_true", help="dump per-episode records")
        if name == "sweep-snr":
            p.add_argument("--modes", default=",".join(MODES))
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    return out


def run_command(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    say = lambda msg: print(msg, file=sys.stderr, flush=True)  # noqa: E731
    if args.command == "gen-data":
        d = gen_data(cfg, out)
        say(f"wrote {d}")
    elif args.command == "train":
        path, losses = train(cfg, out, say)
        say(f"wrote {path}")
    elif args.command == "eval":
        _, test = load_data(out)
        agents = load_trained(cfg, out)
        snr = cfg.snr_db if args.snr is None else args.snr
        trace = None
        if args.trace:
            tp = out / "results" / "traces" / f"{cfg.mode}-K{cfg.K}-{snr:g}dB.jsonl"
            tp.parent.mkdir(parents=True, exist_ok=True)
            trace = open(tp, "w")
        try:
            r = evaluate(cfg, agents, test, cfg.mode, snr, cfg.seed, trace=trace)
        finally:
            if trace is not None:
                trace.close()
        write_results(out / "results" / f"eval-{cfg.mode}-K{cfg.K}.csv", [r])
        say(f"{cfg.mode} K={cfg.K} snr={snr:g} accuracy={r.accuracy:.4f}")
    elif args.command == "sweep-snr":
        modes = [m for m in args.modes.split(",") if m]
        bad = [m for m in modes if m not in MODES]
        if bad:
            raise UsageError(f"unknown modes {bad}")
        sweep_snr(cfg, out, modes, say)
    elif args.command == "sweep-tokens":
        sweep_tokens(cfg, out, say)
    elif args.command == "compression-report":
        _, test = load_data(out)
        write_table(out / "results" / "compression.csv", compression_report(cfg, test))
        say(f"wrote {out / 'results' / 'compression.csv'}")
    write_manifest(cfg, out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    try:
        return run_command(args)
    except (ConfigError, UsageError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 3
    except nk.ManifestError as e:
        print(f"error: manifest: {e}", file=sys.stderr)
        return 4
    except FloatingPointError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
