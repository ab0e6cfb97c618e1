"""Toy decoder-only transformer with LoRA adapters on the key/value projections.

One class serves both agents: the sensor model (which also owns the scene
projection) and the task model.  Inputs are batched ``[B, T, L_emb]`` tensors;
a per-row key mask supports left-padded prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Tensor
from .scenes import COLORS, PAD_ID, SHAPES, SIZES, SceneSpec, VOCAB

LORA_TARGETS = ("key", "value")


class VocabError(IndexError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 64
    L_emb: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    max_seq: int = 64
    lora_rank: int = 2
    mlp_mult: int = 4

    def validate(self) -> None:
        if self.L_emb % self.n_heads:
            raise ValueError(f"L_emb={self.L_emb} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.lora_rank <= self.L_emb // 4:
            raise ValueError(f"lora_rank must be in [1, L_emb/4], got {self.lora_rank}")
        if self.vocab_size < len(VOCAB):
            raise ValueError(f"vocab_size {self.vocab_size} < corpus vocabulary {len(VOCAB)}")


@dataclass
class TokenEmbeddingSeq:
    tokens: Tensor  # [seq, L_emb] or [B, seq, L_emb]
    origin: str  # language | modality | machine

    def __post_init__(self):
        if self.origin not in ("language", "modality", "machine"):
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[-2]


def sinusoidal(positions, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    out = np.zeros(pos.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(pos * freq)
    out[..., 1::2] = np.cos(pos * freq)
    return out.astype(np.float32)


def cell_feature_dim(grid_w: int, grid_h: int) -> int:
    return 1 + len(SHAPES) + len(COLORS) + len(SIZES) + len(SHAPES) * len(COLORS) + grid_h + grid_w + 2 + 2 * len(SHAPES)


def cell_features(scene: SceneSpec) -> np.ndarray:
    """One-hot attribute vector per grid cell, ``[grid_w*grid_h, feature_dim]``.

    Empty cells carry only the reserved ``empty`` bit.  Occupied cells carry
    shape, colour, size, the joint shape-colour code, row/column one-hots,
    the centred column/row coordinates scaled to [-1, 1], and the same two
    coordinates again in a slot pair reserved for the cell's shape.
    """
    w, h = scene.grid_w, scene.grid_h
    feats = np.zeros((w * h, cell_feature_dim(w, h)), dtype=np.float32)
    feats[:, 0] = 1.0
    base_color = 1 + len(SHAPES)
    base_size = base_color + len(COLORS)
    base_joint = base_size + len(SIZES)
    base_row = base_joint + len(SHAPES) * len(COLORS)
    base_col = base_row + h
    base_xy = base_col + w
    for o in scene.objects:
        c = o.y * w + o.x
        s, k = SHAPES.index(o.shape), COLORS.index(o.color)
        feats[c, 0] = 0.0
        feats[c, 1 + s] = 1.0
        feats[c, base_color + k] = 1.0
        feats[c, base_size + SIZES.index(o.size)] = 1.0
        feats[c, base_joint + s * len(COLORS) + k] = 1.0
        feats[c, base_row + o.y] = 1.0
        feats[c, base_col + o.x] = 1.0
        feats[c, base_xy] = _centred(o.x, w)
        feats[c, base_xy + 1] = _centred(o.y, h)
        feats[c, base_xy + 2 + 2 * s] = _centred(o.x, w)
        feats[c, base_xy + 3 + 2 * s] = _centred(o.y, h)
    return feats


def cell_order(scene: SceneSpec) -> np.ndarray:
    """Token order for the scene block: empty cells first, occupied cells last.

    Both groups keep raster order.  Putting the objects at the tail means the
    last-K extraction reads object tokens directly instead of relying on a
    2-block model to gather scattered cells into a few trailing positions.
    """
    w = scene.grid_w
    occ = sorted(o.y * w + o.x for o in scene.objects)
    taken = set(occ)
    return np.array([c for c in range(w * scene.grid_h) if c not in taken] + occ, dtype=np.int64)


def _centred(i: int, n: int) -> float:
    return 0.0 if n == 1 else 2.0 * i / (n - 1) - 1.0


def empty_cell_vector(grid_w: int, grid_h: int) -> np.ndarray:
    v = np.zeros(cell_feature_dim(grid_w, grid_h), dtype=np.float32)
    v[0] = 1.0
    return v


class ToyLM:
    """Pre-LN causal transformer; parameters live in ``self.params`` by name."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator, scene_grid: tuple[int, int] | None = None):
        cfg.validate()
        self.cfg = cfg
        D, H = cfg.L_emb, cfg.mlp_mult * cfg.L_emb
        p: dict[str, Tensor] = {}

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32))

        p["tok_emb"] = normal((cfg.vocab_size, D), 1.0)
        out_std = 1.0 / math.sqrt(D) / math.sqrt(2 * cfg.n_blocks)
        for b in range(cfg.n_blocks):
            pre = f"blocks.{b}"
            p[f"{pre}.ln1.g"] = Tensor(np.ones(D))
            p[f"{pre}.ln1.b"] = Tensor(np.zeros(D))
            for name in ("query", "key", "value"):
                p[f"{pre}.attn.{name}"] = normal((D, D), 1.0 / math.sqrt(D))
            p[f"{pre}.attn.out"] = normal((D, D), out_std)
            p[f"{pre}.ln2.g"] = Tensor(np.ones(D))
            p[f"{pre}.ln2.b"] = Tensor(np.zeros(D))
            p[f"{pre}.mlp.w1"] = normal((D, H), 1.0 / math.sqrt(D))
            p[f"{pre}.mlp.b1"] = Tensor(np.zeros(H))
            p[f"{pre}.mlp.w2"] = normal((H, D), 1.0 / math.sqrt(H) / math.sqrt(2 * cfg.n_blocks))
            p[f"{pre}.mlp.b2"] = Tensor(np.zeros(D))
        p["ln_f.g"] = Tensor(np.ones(D))
        p["ln_f.b"] = Tensor(np.zeros(D))
        p["head.w"] = normal((D, cfg.vocab_size), 1.0 / math.sqrt(D))
        p["head.b"] = Tensor(np.zeros(cfg.vocab_size))
        self.params = p

        self.lora: dict[str, Tensor] = {}
        for b in range(cfg.n_blocks):
            for target in LORA_TARGETS:
                self.lora[f"lora.{b}.{target}.down"] = normal((D, cfg.lora_rank), 1.0 / math.sqrt(D))
                self.lora[f"lora.{b}.{target}.up"] = Tensor(np.zeros((cfg.lora_rank, D)))

        self.scene: dict[str, Tensor] = {}
        self.scene_grid = scene_grid
        if scene_grid is not None:
            fdim = cell_feature_dim(*scene_grid)
            self.scene["scene_proj.w"] = normal((fdim, D), 1.0 / math.sqrt(2.0))
            self.scene["scene_proj.b"] = Tensor(np.zeros(D))
        for name, t in self.all_tensors().items():
            t.name = name

    # -- parameter bookkeeping -------------------------------------------------

    def all_tensors(self) -> dict[str, Tensor]:
        return {**self.params, **self.lora, **self.scene}

    def base_param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def lora_param_count(self) -> int:
        return sum(t.data.size for t in self.lora.values())

    def set_trainable(self, base: bool = False, lora: bool = True, scene: bool = True) -> list[Tensor]:
        groups = ((self.params, base), (self.lora, lora), (self.scene, scene))
        out = []
        for group, flag in groups:
            for t in group.values():
                t.requires_grad = flag
                t.grad = None
                if flag:
                    out.append(t)
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: t.data.copy() for k, t in self.all_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        tensors = self.all_tensors()
        for k, t in tensors.items():
            key = prefix + k
            if key not in state:
                raise nk.ManifestError(f"checkpoint missing tensor {key}")
            arr = np.asarray(state[key], dtype=np.float32)
            if arr.shape != t.shape:
                raise nk.ManifestError(f"{key}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()

    # -- embeddings ------------------------------------------------------------

    def embed_text(self, ids, positions=None) -> TokenEmbeddingSeq:
        """Token-table rows plus sinusoidal encoding of ``positions`` (default 0..n-1)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabError(f"token id out of range [0, {self.cfg.vocab_size})")
        n = ids.shape[-1]
        if n > self.cfg.max_seq:
            raise SequenceLengthError(f"text of {n} tokens exceeds max_seq={self.cfg.max_seq}")
        if positions is None:
            positions = np.broadcast_to(np.arange(n), ids.shape)
        pe = Tensor(sinusoidal(np.maximum(positions, 0), self.cfg.L_emb))
        rows = nk.gather_rows(self.params["tok_emb"], ids)
        return TokenEmbeddingSeq(nk.add(rows, pe), "language")

    def embed_scene(self, scenes) -> TokenEmbeddingSeq:
        """One token per grid cell via the trainable scene projection."""
        if not self.scene:
            raise ValueError("this model has no scene projection")
        single = isinstance(scenes, SceneSpec)
        batch = [scenes] if single else list(scenes)
        for s in batch:
            if (s.grid_w, s.grid_h) != self.scene_grid:
                raise ValueError(f"scene grid {(s.grid_w, s.grid_h)} != model grid {self.scene_grid}")
        feats = Tensor(np.stack([cell_features(s)[cell_order(s)] for s in batch]))
        tok = nk.add(nk.matmul(feats, self.scene["scene_proj.w"]), self.scene["scene_proj.b"])
        if single:
            tok = nk.reshape(tok, tok.shape[1:])
        return TokenEmbeddingSeq(tok, "modality")

    # -- transformer -------------------------------------------------------------

    def _attention(self, b: int, x: Tensor, mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, T, D = x.shape
        nh, dh = cfg.n_heads, D // cfg.n_heads
        p, lo = self.params, self.lora
        pre = f"blocks.{b}.attn"

        def proj(name, target=None):
            y = nk.matmul(x, p[f"{pre}.{name}"])
            if target is not None:
                down, up = lo[f"lora.{b}.{target}.down"], lo[f"lora.{b}.{target}.up"]
                y = nk.add(y, nk.matmul(nk.matmul(x, down), up))
            return nk.transpose(nk.reshape(y, (B, T, nh, dh)), (0, 2, 1, 3))

        q = proj("query")
        k = proj("key", "key")
        v = proj("value", "value")
        scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = nk.softmax(scores, mask)
        ctx = nk.matmul(att, v)
        ctx = nk.reshape(nk.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        return nk.matmul(ctx, p[f"{pre}.out"])

    def forward_blocks(self, seq, key_mask: np.ndarray | None = None) -> Tensor:
        """Causal transformer over ``[T, D]`` or ``[B, T, D]``; returns the normalized last hidden state.

        ``key_mask[b, j]`` False hides position j from every query of row b
        (used for left padding).  A position always sees itself.
        """
        x = seq.tokens if isinstance(seq, TokenEmbeddingSeq) else seq
        single = x.ndim == 2
        if single:
            x = nk.reshape(x, (1,) + x.shape)
        B, T, D = x.shape
        if T > self.cfg.max_seq:
            raise SequenceLengthError(f"sequence of {T} tokens exceeds max_seq={self.cfg.max_seq}")
        if D != self.cfg.L_emb:
            raise nk.DimensionError(f"token width {D} != L_emb {self.cfg.L_emb}")
        causal = np.tril(np.ones((T, T), dtype=bool))
        if key_mask is None:
            mask = causal[None, None]
        else:
            km = np.asarray(key_mask, dtype=bool).reshape(B, 1, 1, T)
            mask = causal[None, None] & (km | np.eye(T, dtype=bool)[None, None])
        p = self.params
        for b in range(self.cfg.n_blocks):
            pre = f"blocks.{b}"
            h = nk.layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            x = nk.add(x, self._attention(b, h, mask))
            h = nk.layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            h = nk.relu(nk.add(nk.matmul(h, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
            h = nk.add(nk.matmul(h, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
            x = nk.add(x, h)
        x = nk.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        if single:
            x = nk.reshape(x, (T, D))
        return x

    def lm_head_decode(self, block_out: Tensor) -> Tensor:
        p = self.params
        return nk.add(nk.matmul(block_out, p["head.w"]), p["head.b"])


def extract_machine_tokens(block_out: Tensor, K: int) -> Tensor:
    """Last ``K`` positions of the final block, order preserved."""
    seq = block_out.shape[-2]
    if not 1 <= K <= seq:
        raise nk.ContractError(f"cannot take K={K} machine tokens from a {seq}-token sequence")
    return nk.take(block_out, slice(seq - K, seq), axis=block_out.ndim - 2)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


# ---------------------------------------------------------------------------
# base-model pre-training
# ---------------------------------------------------------------------------


def pad_right(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def next_token_loss(model: ToyLM, ids: np.ndarray, mask: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross-entropy over real (non-pad) target positions."""
    emb = model.embed_text(ids[:, :-1])
    out = model.forward_blocks(emb)
    logits = model.lm_head_decode(out)
    B, T, V = logits.shape
    w = mask[:, 1:].astype(np.float64)
    if weights is not None:
        w = w * weights[:, 1:]
    return nk.softmax_ce_loss(nk.reshape(logits, (B * T, V)), ids[:, 1:].reshape(-1), w.reshape(-1))


def pretrain(model: ToyLM, corpus: list[list[int]], steps: int, rng: np.random.Generator,
             batch: int = 32, lr: float = 0.05, clip: float = 1.0,
             weights: list[np.ndarray] | None = None, log=None) -> list[float]:
    """Next-token training of the base weights (adapters and scene projection untouched)."""
    params = model.set_trainable(base=True, lora=False, scene=False)
    opt = nk.Momentum(params, lr=lr, momentum=0.9, clip=clip)
    losses = []
    for step in range(steps):
        idx = rng.integers(len(corpus), size=batch)
        ids, mask = pad_right([corpus[i] for i in idx])
        w = None
        if weights is not None:
            w, _ = _pad_weights([weights[i] for i in idx], ids.shape[1])
        opt.zero_grad()
        with nk.Tape() as tape:
            loss = next_token_loss(model, ids, mask, w)
            tape.backward(loss)
        opt.lr = lr * _cosine(step, steps)
        opt.step()
        losses.append(float(loss.data))
        if log is not None and (step % 200 == 0 or step == steps - 1):
            log(step, losses[-1])
    model.set_trainable(base=False, lora=False, scene=False)
    return losses


def _pad_weights(ws, T):
    out = np.zeros((len(ws), T))
    for i, w in enumerate(ws):
        out[i, : len(w)] = w
    return out, None


def _cosine(step: int, total: int, warmup: int = 50) -> float:
    if step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(total - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))
