"""Next-token cross-entropy, the tube (STP) loss, and its ablation variants.

Hidden states arrive batched as a ``(B, L, d)`` tensor with one
:class:`IndexTriple` per row; every auxiliary loss is the mean over rows.
All cosines use guarded norms (see ``tensor.GUARD_EPS``).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Marks
from .model import MASK
from .tensor import Tensor, apply_primitive


class LossInputError(ValueError):
    pass


class Variant(str, Enum):
    STP = "STP"
    STP_ZERO = "STP_Zero"
    STP_PRED = "STP_Pred"
    TWO_VIEW = "TwoView"
    TWO_VIEW_WARMUP = "TwoView_Warmup"
    TWO_VIEW_PRED = "TwoView_Pred"
    TWO_VIEW_MEAN = "TwoView_Mean"
    MASK = "Mask"
    MASK_FULL = "Mask_Full"
    MASK_PRED = "Mask_Pred"
    CURVATURE = "Curvature"
    CURVATURE_SIGNED = "Curvature_Signed"
    NONE = "None"


PRED_VARIANTS = {Variant.STP_PRED, Variant.TWO_VIEW_PRED, Variant.MASK_PRED}
MASK_VARIANTS = {Variant.MASK, Variant.MASK_FULL, Variant.MASK_PRED}
TWO_VIEW_VARIANTS = {
    Variant.TWO_VIEW, Variant.TWO_VIEW_WARMUP, Variant.TWO_VIEW_PRED, Variant.TWO_VIEW_MEAN,
}


@dataclass(frozen=True)
class IndexTriple:
    s: int
    r: int
    t: int
    r_skip: int | None = None

    def validate(self, seq_len: int) -> "IndexTriple":
        if not (0 <= self.s < self.r < self.t < seq_len):
            raise LossInputError(f"need 0 <= s < r < t < {seq_len}, got {self}")
        if self.r_skip is not None and not (self.r < self.r_skip <= self.t - 1):
            raise LossInputError(f"need r < r' <= t-1, got {self}")
        return self

    @property
    def head(self) -> int:
        """Start of the second segment: r' when skipping, else r."""
        return self.r if self.r_skip is None else self.r_skip


@dataclass
class AuxLossSpec:
    variant: Variant = Variant.STP
    lam: float = 0.02
    warmup_steps: int | None = None
    projector: Tensor | None = None
    mask_token_id: int = MASK
    # Pred target: "tr" -> h_t - h_r, "ts" -> h_t - h_s
    pred_target: str = "tr"
    skip_instruction: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not np.isfinite(self.lam) or self.lam < 0:
            raise LossInputError(f"lambda must be finite and >= 0, got {self.lam}")
        if (self.projector is not None) != (self.variant in PRED_VARIANTS):
            raise LossInputError(f"projector must be present iff variant is Pred ({self.variant})")
        if self.pred_target not in ("tr", "ts"):
            raise LossInputError(f"pred_target must be 'tr' or 'ts', got {self.pred_target!r}")

    @property
    def strategy(self) -> str:
        if self.variant in TWO_VIEW_VARIANTS:
            return "two_view"
        if self.variant == Variant.STP_ZERO:
            return "zero"
        return "random"


def make_aux_spec(variant, lam: float, d_model: int, seed: int = 0, **kw) -> AuxLossSpec:
    """Build a spec, initializing the projector ~ N(0, 0.02^2) for Pred variants."""
    variant = Variant(variant)
    projector = None
    if variant in PRED_VARIANTS:
        rng = np.random.default_rng([seed, 2])
        projector = Tensor(rng.normal(0.0, 0.02, size=(d_model, d_model)), requires_grad=True)
    return AuxLossSpec(variant, lam, projector=projector, **kw)


# ---------------------------------------------------------------------------


def ntp_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise LossInputError(
            f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape} not aligned"
        )
    count = mask.sum()
    if count == 0:
        raise LossInputError("every position is masked")
    picked = apply_primitive("pick", [T.log_softmax(logits)], ids=targets)
    return T.tsum(picked * Tensor(mask)) * (-1.0 / count)


def _rows(hidden: Tensor, positions) -> Tensor:
    pos = np.asarray(positions, dtype=np.int64)
    return apply_primitive("gather_rows", [hidden], batch=np.arange(len(pos)), pos=pos)


def _as_batch(hidden) -> Tensor:
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if len(hidden.shape) == 2:
        hidden = apply_primitive("reshape", [hidden], shape=(1, *hidden.shape))
    return hidden


def _one_minus_mean_cos(a: Tensor, b: Tensor) -> Tensor:
    return 1.0 - T.tmean(T.cosine(a, b))


def stp_loss(traj, triple: IndexTriple | Sequence[IndexTriple]) -> Tensor:
    """1 - cos(h_t - h_{r or r'}, h_r - h_s), averaged over the batch.

    ``traj`` is a single ``(L, d)`` trajectory with one triple, or a
    ``(B, L, d)`` batch with one triple per row.
    """
    hidden = _as_batch(traj)
    triples = [triple] if isinstance(triple, IndexTriple) else list(triple)
    if len(triples) != hidden.shape[0]:
        raise LossInputError(f"{len(triples)} triples for batch of {hidden.shape[0]}")
    for tr in triples:
        tr.validate(hidden.shape[1])
    hs = _rows(hidden, [tr.s for tr in triples])
    hr = _rows(hidden, [tr.r for tr in triples])
    hh = _rows(hidden, [tr.head for tr in triples])
    ht = _rows(hidden, [tr.t for tr in triples])
    return _one_minus_mean_cos(ht - hh, hr - hs)


def sample_triple(rng: np.random.Generator, seq_len: int, strategy: str = "random",
                  marks: Marks | None = None, start: int = 0) -> IndexTriple:
    """Draw s < r < t.

    ``random``: uniform over all increasing triples in [start, seq_len).
    ``zero``: s = start (0 by default), (r, t) uniform.
    ``two_view``: (query_start, query_end, answer_end) from ``marks``.
    """
    if seq_len < 3:
        raise LossInputError(f"seq_len must be >= 3, got {seq_len}")
    if strategy == "two_view":
        if marks is None:
            raise LossInputError("two_view sampling needs query/answer marks")
        return IndexTriple(marks.query_start, marks.query_end, marks.answer_end).validate(seq_len)
    if seq_len - start < 3:
        raise LossInputError(f"fewer than 3 positions after start={start}")
    if strategy == "random":
        s, r, t = np.sort(rng.choice(np.arange(start, seq_len), size=3, replace=False))
        return IndexTriple(int(s), int(r), int(t))
    if strategy == "zero":
        r, t = np.sort(rng.choice(np.arange(start + 1, seq_len), size=2, replace=False))
        return IndexTriple(start, int(r), int(t))
    raise LossInputError(f"unknown strategy {strategy!r}")


def masked_tokens(ids: np.ndarray, triples: Sequence[IndexTriple], mask_token: int = MASK):
    """Copy of ``ids`` (B, L) with span [s, r] of each row replaced by MASK."""
    out = np.array(ids, copy=True)
    for row, tr in enumerate(triples):
        out[row, tr.s: tr.r + 1] = mask_token
    return out


def _span_means(hidden: Tensor, spans) -> Tensor:
    B, L, _ = hidden.shape
    w = np.zeros((B, 1, L))
    for row, (lo, hi) in enumerate(spans):
        w[row, 0, lo: hi + 1] = 1.0 / (hi - lo + 1)
    out = T.matmul(Tensor(w), hidden)
    return apply_primitive("reshape", [out], shape=(B, hidden.shape[2]))


def curvature_loss(hidden, lengths=None) -> Tensor:
    """Mean turning angle between consecutive increments, per row then batch.

    Angles come from arccos of clamped cosines, so they lie in [0, pi].
    """
    hidden = _as_batch(hidden)
    B, L, _ = hidden.shape
    lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
    if L < 3 or lengths.min() < 3:
        raise LossInputError("curvature needs at least 3 positions per row")
    steps = (apply_primitive("slice_rows", [hidden], start=1, stop=L, axis=1)
             - apply_primitive("slice_rows", [hidden], start=0, stop=L - 1, axis=1))
    prev = apply_primitive("slice_rows", [steps], start=0, stop=L - 2, axis=1)
    nxt = apply_primitive("slice_rows", [steps], start=1, stop=L - 1, axis=1)
    angles = apply_primitive("arccos", [T.cosine(prev, nxt)])
    # angle j is between h_{j+1}-h_j and h_{j+2}-h_{j+1}; valid while j+2 < length
    j = np.arange(L - 2)[None, :]
    weights = (j + 2 < lengths[:, None]).astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True) * B
    return T.tsum(angles * Tensor(weights))


def _project(spec: AuxLossSpec, x: Tensor) -> Tensor:
    # row-vector convention: P(x) = x @ P
    return T.matmul(x, spec.projector)


def aux_loss(spec: AuxLossSpec, hidden, triples: Sequence[IndexTriple] | IndexTriple,
             masked_hidden=None, lengths=None) -> Tensor | None:
    """Dispatch on ``spec.variant``; returns None for ``Variant.NONE``.

    Mask variants need ``masked_hidden``: the trajectory of the sequence whose
    span [s, r] was replaced by MASK (one extra forward pass).
    """
    v = spec.variant
    if v == Variant.NONE:
        return None
    hidden = _as_batch(hidden)
    triples = [triples] if isinstance(triples, IndexTriple) else list(triples)
    if v in (Variant.CURVATURE, Variant.CURVATURE_SIGNED):
        # arccos is non-negative, so the signed form coincides with |theta|
        return curvature_loss(hidden, lengths)
    if len(triples) != hidden.shape[0]:
        raise LossInputError(f"{len(triples)} triples for batch of {hidden.shape[0]}")
    if v in (Variant.STP, Variant.STP_ZERO, Variant.TWO_VIEW, Variant.TWO_VIEW_WARMUP):
        return stp_loss(hidden, triples)

    for tr in triples:
        tr.validate(hidden.shape[1])
    hs = _rows(hidden, [tr.s for tr in triples])
    hr = _rows(hidden, [tr.r for tr in triples])
    ht = _rows(hidden, [tr.t for tr in triples])

    if v in (Variant.STP_PRED, Variant.TWO_VIEW_PRED):
        if spec.projector is None:
            raise LossInputError(f"{v.value} needs a projector")
        target = ht - hr if spec.pred_target == "tr" else ht - hs
        return _one_minus_mean_cos(_project(spec, hr - hs), target)
    if v == Variant.TWO_VIEW_MEAN:
        first = _span_means(hidden, [(tr.s, tr.r) for tr in triples])
        second = _span_means(hidden, [(tr.r, tr.t) for tr in triples])
        return _one_minus_mean_cos(first, second)
    if v in MASK_VARIANTS:
        if masked_hidden is None:
            raise LossInputError(f"{v.value} needs the masked-sequence trajectory")
        gt = _rows(_as_batch(masked_hidden), [tr.t for tr in triples])
        if v == Variant.MASK:
            return _one_minus_mean_cos(hr - hs, gt)
        if v == Variant.MASK_FULL:
            return _one_minus_mean_cos(ht, gt)
        if spec.projector is None:
            raise LossInputError("Mask_Pred needs a projector")
        return _one_minus_mean_cos(_project(spec, hr - hs), gt)
    raise LossInputError(f"unhandled variant {v}")


def lambda_at(spec: AuxLossSpec, step: int, total_steps: int) -> float:
    """Constant lambda, or a linear ramp from 0 for TwoView_Warmup."""
    if spec.variant != Variant.TWO_VIEW_WARMUP:
        return spec.lam
    horizon = spec.warmup_steps or total_steps
    if horizon <= 0:
        return spec.lam
    return spec.lam * min(step, horizon) / horizon


def combined_loss(ntp: Tensor, aux: Tensor | None, lambda_now: float) -> Tensor:
    if aux is None:
        return ntp
    return ntp + aux * float(lambda_now)
