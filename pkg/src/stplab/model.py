"""Minimal pre-norm decoder-only transformer on top of :mod:`stplab.tensor`.

``forward`` returns logits and the last-layer hidden trajectory (the
post-final-norm rows that enter the unembedding).  Inputs are batched
``(B, L)`` id arrays; right padding is safe because attention is causal.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, apply_primitive

PAD, BOS, EOS, MASK, SEP = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_seq_len: int = 96
    tie_embeddings: bool = False

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (PAD, BOS, EOS, MASK are reserved)")
        if self.max_seq_len < 8:
            raise ConfigError("max_seq_len must be >= 8")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("widths and counts must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    lnf_g: Tensor
    lnf_b: Tensor
    unembed: Tensor | None  # None when tied to tok_emb

    def tensors(self) -> list[Tensor]:
        """All parameter tensors in the fixed serialization order."""
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out.extend(getattr(layer, f.name) for f in fields(LayerParams))
        out.extend([self.lnf_g, self.lnf_b])
        if self.unembed is not None:
            out.append(self.unembed)
        return out


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq_len, d))]
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    for i in range(cfg.n_layers):
        shapes.extend((f"layers.{i}.{k}", s) for k, s in per_layer.items())
    shapes.extend([("lnf_g", (d,)), ("lnf_b", (d,))])
    if not cfg.tie_embeddings:
        shapes.append(("unembed", (d, cfg.vocab_size)))
    return shapes


def _assemble(cfg: ModelConfig, arrays: list[np.ndarray]) -> ModelParams:
    it = iter(Tensor(a, requires_grad=True) for a in arrays)
    tok, pos = next(it), next(it)
    layers = [LayerParams(*(next(it) for _ in fields(LayerParams))) for _ in range(cfg.n_layers)]
    lnf_g, lnf_b = next(it), next(it)
    unembed = None if cfg.tie_embeddings else next(it)
    return ModelParams(tok, pos, layers, lnf_g, lnf_b, unembed)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ N(0, 0.02^2); norm gains 1, biases 0."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in _param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arrays.append(np.ones(shape))
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arrays.append(np.zeros(shape))
        else:
            arrays.append(rng.normal(0.0, 0.02, size=shape))
    return _assemble(cfg, arrays)


def _attention(x: Tensor, layer: LayerParams, n_heads: int) -> Tensor:
    B, L, d = x.shape
    dh = d // n_heads

    def heads(w):
        proj = T.matmul(x, w)
        proj = apply_primitive("reshape", [proj], shape=(B, L, n_heads, dh))
        return apply_primitive("permute", [proj], axes=(0, 2, 1, 3))

    q, k, v = heads(layer.wq), heads(layer.wk), heads(layer.wv)
    scores = T.matmul(q, apply_primitive("transpose", [k])) * (1.0 / math.sqrt(dh))
    attn = T.row_softmax(apply_primitive("causal_mask", [scores]))
    ctx = apply_primitive("permute", [T.matmul(attn, v)], axes=(0, 2, 1, 3))
    ctx = apply_primitive("reshape", [ctx], shape=(B, L, d))
    return T.matmul(ctx, layer.wo)


def _check_ids(cfg: ModelConfig, ids: np.ndarray) -> None:
    L = ids.shape[-1]
    if L < 1 or L > cfg.max_seq_len:
        raise CapacityError(f"sequence length {L} outside [1, {cfg.max_seq_len}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")


def forward(params: ModelParams, cfg: ModelConfig, tokens) -> tuple[Tensor, Tensor]:
    """Run the model on ``tokens`` of shape ``(L,)`` or ``(B, L)``.

    Returns ``(logits, hidden)`` with shapes ``(B, L, vocab)`` and
    ``(B, L, d_model)`` (batch axis dropped for 1-D input).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    _check_ids(cfg, ids)
    L = ids.shape[1]

    x = apply_primitive("embed_lookup", [params.tok_emb], ids=ids)
    x = x + apply_primitive("slice_rows", [params.pos_emb], start=0, stop=L)
    for layer in params.layers:
        x = x + _attention(T.layer_norm(x, layer.ln1_g, layer.ln1_b), layer, cfg.n_heads)
        h = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
        h = T.gelu(T.matmul(h, layer.w1) + layer.b1)
        x = x + (T.matmul(h, layer.w2) + layer.b2)
    hidden = T.layer_norm(x, params.lnf_g, params.lnf_b)
    unembed = params.unembed
    if unembed is None:
        unembed = apply_primitive("transpose", [params.tok_emb])
    logits = T.matmul(hidden, unembed)
    if single:
        logits = apply_primitive("reshape", [logits], shape=logits.shape[1:])
        hidden = apply_primitive("reshape", [hidden], shape=hidden.shape[1:])
    return logits, hidden


def greedy_decode(
    params: ModelParams,
    cfg: ModelConfig,
    prompt,
    max_new: int,
    stop_at_eos: bool = True,
) -> list[int]:
    """Append argmax tokens (ties go to the lowest id) until EOS or ``max_new``."""
    return batch_greedy_decode(params, cfg, [prompt], max_new, stop_at_eos)[0]


def batch_greedy_decode(params, cfg, prompts, max_new, stop_at_eos: bool = True) -> list[list[int]]:
    """Greedy decoding for several prompts at once.

    Rows are right-padded; each row reads logits at its own last position, so
    the result per prompt equals the unbatched decode.
    """
    prompts = [list(map(int, p)) for p in prompts]
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompt must be nonempty")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    longest = max(len(p) for p in prompts)
    if longest + max_new > cfg.max_seq_len:
        raise CapacityError(
            f"prompt length {longest} + max_new {max_new} exceeds max_seq_len {cfg.max_seq_len}"
        )
    seqs = [list(p) for p in prompts]
    done = [False] * len(seqs)
    with T.no_grad():
        for _ in range(max_new):
            active = [i for i, f in enumerate(done) if not f]
            if not active:
                break
            width = max(len(seqs[i]) for i in active)
            batch = np.full((len(active), width), PAD, dtype=np.int64)
            for row, i in enumerate(active):
                batch[row, : len(seqs[i])] = seqs[i]
            logits, _ = forward(params, cfg, batch)
            for row, i in enumerate(active):
                nxt = int(np.argmax(logits.values[row, len(seqs[i]) - 1]))
                seqs[i].append(nxt)
                if stop_at_eos and nxt == EOS:
                    done[i] = True
    return seqs


# ---------------------------------------------------------------------------
# checkpoint: "STPC", u32 version, 7 x u32 config, f32 LE parameters
# ---------------------------------------------------------------------------

MAGIC = b"STPC"
VERSION = 1
_HEADER = struct.Struct("<4sI7I")


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    header = _HEADER.pack(
        MAGIC, VERSION, cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
        cfg.d_ff, cfg.max_seq_len, int(cfg.tie_embeddings),
    )
    blob = np.concatenate([t.values.reshape(-1) for t in params.tensors()]).astype("<f4")
    Path(path).write_bytes(header + blob.tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, *dims = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    vocab, d_model, n_layers, n_heads, d_ff, max_len, tie = dims
    try:
        cfg = ModelConfig(vocab, d_model, n_layers, n_heads, d_ff, max_len, bool(tie)).validate()
    except ConfigError as exc:
        raise CheckpointFormatError(f"{path}: invalid header config: {exc}") from None
    body = raw[_HEADER.size:]
    if len(body) % 4:
        raise CheckpointTruncatedError(f"{path}: parameter blob is not a whole number of f32")
    shapes = [s for _, s in _param_shapes(cfg)]
    expected = sum(int(np.prod(s)) for s in shapes)
    if len(body) // 4 != expected:
        raise CheckpointShapeError(
            f"{path}: header implies {expected} parameters, blob holds {len(body) // 4}"
        )
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    arrays, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(flat[offset:offset + n].reshape(shape))
        offset += n
    return _assemble(cfg, arrays), cfg
