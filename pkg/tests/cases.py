"""Gradient-check instances shared by the unit and acceptance tests.

A case builder takes a Generator and returns ``(f, params)``: ``f`` rebuilds a
scalar from the current parameter values and ``params`` lists the tensors to
check.  Every primitive output is contracted with a fixed random weight so
that each output coordinate contributes a distinct gradient.
"""

from __future__ import annotations

import numpy as np

from stplab import losses as L
from stplab.model import ModelConfig, forward, init_params
from stplab.tensor import Tensor, apply_primitive, tsum

D, SEQ = 8, 8


def _leaf(rng, *shape, lo=None, hi=None):
    if lo is None:
        return Tensor(rng.normal(size=shape), requires_grad=True)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _contract(rng, out_shape):
    w = Tensor(rng.normal(size=out_shape))
    return lambda y: tsum(y * w)


def _unary(kind, in_shape=(3, 5), lo=None, hi=None, **attrs):
    def build(rng):
        x = _leaf(rng, *in_shape, lo=lo, hi=hi)
        out = apply_primitive(kind, [x], **attrs).shape
        c = _contract(rng, out)
        return (lambda: c(apply_primitive(kind, [x], **attrs))), [x]
    return build


def _binary(kind, sa, sb, lo_b=None, hi_b=None):
    def build(rng):
        a = _leaf(rng, *sa)
        b = _leaf(rng, *sb, lo=lo_b, hi=hi_b)
        out = apply_primitive(kind, [a, b]).shape
        c = _contract(rng, out)
        return (lambda: c(apply_primitive(kind, [a, b]))), [a, b]
    return build


def _layer_norm(rng):
    x, g, b = _leaf(rng, 4, D), _leaf(rng, D), _leaf(rng, D)
    c = _contract(rng, (4, D))
    return (lambda: c(apply_primitive("layer_norm", [x, g, b]))), [x, g, b]


def _embed(rng):
    table = _leaf(rng, 6, D)
    ids = rng.integers(0, 6, size=(2, 5))
    c = _contract(rng, (2, 5, D))
    return (lambda: c(apply_primitive("embed_lookup", [table], ids=ids))), [table]


def _concat(rng):
    a, b = _leaf(rng, 2, D), _leaf(rng, 3, D)
    c = _contract(rng, (5, D))
    return (lambda: c(apply_primitive("concat_rows", [a, b]))), [a, b]


def _gather(rng):
    x = _leaf(rng, 3, 5, D)
    batch, pos = np.arange(3), rng.integers(0, 5, size=3)
    c = _contract(rng, (3, D))
    return (lambda: c(apply_primitive("gather_rows", [x], batch=batch, pos=pos))), [x]


def _pick(rng):
    x = _leaf(rng, 2, 4, 6)
    ids = rng.integers(0, 6, size=(2, 4))
    c = _contract(rng, (2, 4))
    return (lambda: c(apply_primitive("pick", [x], ids=ids))), [x]


def _causal(rng):
    x = _leaf(rng, 2, 5, 5)
    c = _contract(rng, (2, 5, 5))
    # contract after a softmax so the masked (constant) entries matter
    return (lambda: c(apply_primitive("row_softmax", [apply_primitive("causal_mask", [x])]))), [x]


PRIMITIVE_CASES = {
    "matmul": _binary("matmul", (3, 4), (4, 5)),
    "matmul_batched": _binary("matmul", (2, 3, 4), (2, 4, 5)),
    "matmul_shared_weight": _binary("matmul", (2, 3, 4), (4, 5)),
    "add": _binary("add", (3, 4), (3, 4)),
    "add_broadcast": _binary("add", (3, 4), (4,)),
    "sub": _binary("sub", (3, 4), (3, 4)),
    "mul": _binary("mul", (3, 4), (3, 4)),
    "div": _binary("div", (3, 4), (3, 4), lo_b=0.5, hi_b=2.0),
    "scalar_mul": _unary("scalar_mul", scale=-1.7),
    "row_softmax": _unary("row_softmax"),
    "log_softmax": _unary("log_softmax"),
    "layer_norm": _layer_norm,
    "gelu": _unary("gelu", lo=-3.0, hi=3.0),
    "embed_lookup": _embed,
    "transpose": _unary("transpose", in_shape=(2, 3, 4)),
    "permute": _unary("permute", in_shape=(2, 3, 4), axes=(1, 0, 2)),
    "reshape": _unary("reshape", in_shape=(2, 6), shape=(3, 4)),
    "sum": _unary("sum"),
    "sum_axis": _unary("sum", axis=1),
    "mean": _unary("mean"),
    "mean_axis": _unary("mean", axis=0),
    "dot": _binary("dot", (3, D), (3, D)),
    "l2_norm": _unary("l2_norm", in_shape=(3, D)),
    "concat_rows": _concat,
    "slice_rows": _unary("slice_rows", in_shape=(6, 4), start=1, stop=4),
    "gather_rows": _gather,
    "pick": _pick,
    "causal_mask": _causal,
    "arccos": _unary("arccos", lo=-0.9, hi=0.9),
}


# ---------------------------------------------------------------------------
# loss variants on random (B, SEQ, D) trajectories
# ---------------------------------------------------------------------------


def _random_triples(rng, batch, strategy):
    marks = [None] * batch
    if strategy == "two_view":
        from stplab.data import Marks
        marks = []
        for _ in range(batch):
            r = int(rng.integers(1, SEQ - 1))
            marks.append(Marks(0, r, int(rng.integers(r + 1, SEQ))))
    return [L.sample_triple(rng, SEQ, strategy, m) for m in marks]


def variant_case(variant):
    def build(rng):
        spec = L.make_aux_spec(variant, 0.02, D, seed=int(rng.integers(1 << 30)))
        if spec.projector is not None:
            spec.projector.values = rng.normal(size=(D, D))
        hidden = _leaf(rng, 2, SEQ, D)
        triples = _random_triples(rng, 2, spec.strategy)
        params = [hidden]
        masked = None
        if spec.variant in L.MASK_VARIANTS:
            masked = _leaf(rng, 2, SEQ, D)
            params.append(masked)
        if spec.projector is not None:
            params.append(spec.projector)
        lengths = np.array([SEQ, SEQ - 2])
        return (lambda: L.aux_loss(spec, hidden, triples, masked, lengths)), params
    return build


VARIANT_CASES = {v.value: variant_case(v) for v in L.Variant if v != L.Variant.NONE}


def transformer_case(rng, with_aux=True):
    """Tiny model, combined NTP + tube loss; checks every parameter tensor."""
    cfg = ModelConfig(vocab_size=8, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=8)
    params = init_params(cfg, int(rng.integers(1 << 30)))
    for p in params.tensors():
        # larger weights so the check is not dominated by near-linear behaviour
        p.values = p.values * 10 + (0 if p.values.ndim > 1 else rng.normal(0, 0.1, p.shape))
    tokens = rng.integers(0, 8, size=(2, 6))
    mask = np.ones((2, 5), dtype=bool)
    triples = [L.sample_triple(rng, 6) for _ in range(2)]

    def f():
        logits, hidden = forward(params, cfg, tokens)
        logits = apply_primitive("slice_rows", [logits], start=0, stop=5, axis=1)
        ntp = L.ntp_loss(logits, tokens[:, 1:], mask)
        if not with_aux:
            return ntp
        return L.combined_loss(ntp, L.stp_loss(hidden, triples), 0.5)

    return f, params.tensors()
