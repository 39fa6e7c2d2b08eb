"""Training loop (NTP + lambda * auxiliary loss) and exact-match evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .config import TrainConfig
from .data import (
    INSTRUCTION, STAR, STARSTAR, DatasetSplit, ExamplePair,
    generate_copy_task, generate_pattern_task, prepend_instruction, subset_fraction,
)
from .model import EOS, PAD, ModelParams, batch_greedy_decode, forward, init_params, save_checkpoint
from .tensor import Tensor, apply_primitive, backward, new_tape, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "loss_ntp", "loss_stp", "lambda", "lr", "seed"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list[dict] = field(default_factory=list)
    accuracy: float = math.nan
    acc_star: float = math.nan
    acc_starstar: float = math.nan
    final_ntp: float = math.nan
    final_stp: float = math.nan
    total_steps: int = 0
    steps_per_epoch: int = 0
    wall_time: float = 0.0
    checkpoint: str = ""
    params: ModelParams | None = None
    projector: Tensor | None = None  # trained P for Pred variants

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.rows:
            w.writerow([
                row["step"], row["epoch"], repr(row["loss_ntp"]), repr(row["loss_stp"]),
                repr(row["lambda"]), repr(row["lr"]), row["seed"],
            ])
        return buf.getvalue()

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def build_split(cfg: TrainConfig) -> DatasetSplit:
    if cfg.task == "pattern":
        split = generate_pattern_task(
            cfg.data_seed, cfg.n_train, cfg.n_test, cfg.suffix_ratio,
            cfg.min_clauses, cfg.max_clauses, cfg.max_seq_len,
        )
    elif cfg.task == "copy":
        split = generate_copy_task(
            cfg.data_seed, cfg.n_train, cfg.payload_len, cfg.n_test,
            max_seq_len=cfg.max_seq_len, vocab_size=cfg.vocab_size,
        )
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    if cfg.instruction:
        split.train = [prepend_instruction(p, INSTRUCTION, cfg.max_seq_len) for p in split.train]
        split.test = [prepend_instruction(p, INSTRUCTION, cfg.max_seq_len) for p in split.test]
    return split


def make_batch(pairs: list[ExamplePair]):
    """Right-padded ids (B, L), next-token targets and loss mask (B, L-1), lengths."""
    seqs = [p.tokens for p in pairs]
    lengths = np.array([len(s) for s in seqs])
    width = int(lengths.max())
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width - 1), dtype=bool)
    for i, (s, p) in enumerate(zip(seqs, pairs)):
        ids[i, : len(s)] = s
        mask[i, : len(s) - 1] = p.loss_mask()
    return ids, ids[:, 1:], mask, lengths


def _triples(cfg: TrainConfig, spec: L.AuxLossSpec, pairs, indices, epoch) -> list[L.IndexTriple]:
    # one stream per (run seed, epoch, example); independent of the variant
    out = []
    for pair, idx in zip(pairs, indices):
        rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
        marks = pair.marks
        start = marks.query_start if spec.skip_instruction else 0
        out.append(L.sample_triple(rng, len(pair.tokens), spec.strategy, marks, start))
    return out


def step_losses(params, mcfg, spec: L.AuxLossSpec, pairs, triples):
    """Forward pass of one batch; returns (ntp, aux or None, stp monitor value)."""
    ids, targets, mask, lengths = make_batch(pairs)
    logits, hidden = forward(params, mcfg, ids)
    width = ids.shape[1]
    logits = apply_primitive("slice_rows", [logits], start=0, stop=width - 1, axis=1)
    ntp = L.ntp_loss(logits, targets, mask)
    masked_hidden = None
    if spec.variant in L.MASK_VARIANTS:
        _, masked_hidden = forward(params, mcfg, L.masked_tokens(ids, triples, spec.mask_token_id))
    aux = L.aux_loss(spec, hidden, triples, masked_hidden, lengths)
    if aux is None:
        with no_grad():
            monitor = L.stp_loss(Tensor(hidden.values), triples).item()
    else:
        monitor = aux.item()
    return ntp, aux, monitor


def train_run(cfg: TrainConfig, split: DatasetSplit | None = None, keep_params: bool = True) -> RunRecord:
    """Train one model; deterministic in ``cfg`` (and ``split`` when given)."""
    t0 = time.perf_counter()
    mcfg = cfg.model_config()
    if split is None:
        split = build_split(cfg)
    split, multiplier, lr_scale = subset_fraction(split, cfg.fraction, cfg.seed, cfg.half_compute)
    epochs = int(round(cfg.epochs * multiplier))
    n = len(split.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    base_steps = math.ceil(cfg.n_train / cfg.batch_size) * cfg.epochs
    cap = cfg.max_step_multiplier * base_steps
    if epochs * steps_per_epoch > cap:
        log.warning("step budget %d exceeds %dx base; capping", epochs * steps_per_epoch,
                    cfg.max_step_multiplier)
        epochs = max(1, cap // steps_per_epoch)
    total_steps = epochs * steps_per_epoch
    lr = cfg.lr * lr_scale

    params = init_params(mcfg, cfg.seed)
    spec = L.make_aux_spec(
        cfg.variant, cfg.lam, mcfg.d_model, cfg.seed,
        warmup_steps=cfg.warmup_steps or None, pred_target=cfg.pred_target,
        skip_instruction=cfg.skip_instruction,
    )
    trainable = params.tensors() + ([spec.projector] if spec.projector is not None else [])
    opt = Adam(trainable, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    order_rng = np.random.default_rng([cfg.seed, 1])

    record = RunRecord(cfg, total_steps=total_steps, steps_per_epoch=steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            pairs = [split.train[i] for i in idx]
            triples = _triples(cfg, spec, pairs, idx, epoch)
            lam_now = L.lambda_at(spec, step, total_steps)
            new_tape()
            ntp, aux, monitor = step_losses(params, mcfg, spec, pairs, triples)
            loss = L.combined_loss(ntp, aux, lam_now)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            record.rows.append({
                "step": step, "epoch": epoch, "loss_ntp": ntp.item(), "loss_stp": monitor,
                "lambda": lam_now, "lr": lr, "seed": cfg.seed,
            })
            step += 1

    last = [r for r in record.rows if r["epoch"] == epochs - 1]
    record.final_ntp = float(np.mean([r["loss_ntp"] for r in last]))
    record.final_stp = float(np.mean([r["loss_stp"] for r in last]))
    record.accuracy, per_class = evaluate_exact_match(params, mcfg, split.test, cfg.eval_batch)
    record.acc_star = per_class.get(STAR, math.nan)
    record.acc_starstar = per_class.get(STARSTAR, math.nan)
    record.wall_time = time.perf_counter() - t0
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(record.metrics_csv())
        save_checkpoint(params, mcfg, out / "model.stpc")
        record.checkpoint = str(out / "model.stpc")
    if keep_params:
        record.params = params
        record.projector = spec.projector
    return record


def evaluate_exact_match(params, mcfg, test: list[ExamplePair], batch: int = 100):
    """Greedy-decode each prompt; exact match of answer + EOS.

    Returns (overall accuracy, {suffix_class: accuracy}) for classes present.
    """
    if not test:
        return math.nan, {}
    hits = np.zeros(len(test), dtype=bool)
    for lo in range(0, len(test), batch):
        chunk = test[lo: lo + batch]
        max_new = max(len(p.answer) for p in chunk) + 1
        outs = batch_greedy_decode(params, mcfg, [p.prompt for p in chunk], max_new)
        for k, (p, out) in enumerate(zip(chunk, outs)):
            hits[lo + k] = out[len(p.prompt):] == [*p.answer, EOS]
    per_class = {}
    classes = np.array([p.suffix_class for p in test])
    for cls in (STAR, STARSTAR):
        sel = classes == cls
        if sel.any():
            per_class[cls] = float(hits[sel].mean())
    return float(hits.mean()), per_class


def p1_check(record: RunRecord, ntp_range_max: float = 0.05, stp_drop_min: float = 0.05):
    """NTP flat while the tube loss still falls over the final quarter.

    Works on per-epoch means inside the last 25% of steps (per-step values
    are minibatch noise).  Returns (holds, ntp_range, stp_drop).
    """
    total = len(record.rows)
    window = [r for r in record.rows if r["step"] >= 0.75 * total]
    epochs = sorted({r["epoch"] for r in window})
    if len(epochs) < 2:
        raise ValueError("final quarter spans fewer than two epochs")
    ntp = [np.mean([r["loss_ntp"] for r in window if r["epoch"] == e]) for e in epochs]
    stp = [np.mean([r["loss_stp"] for r in window if r["epoch"] == e]) for e in epochs]
    ntp_range = float(max(ntp) - min(ntp))
    stp_drop = float(stp[0] - stp[-1])
    return (ntp_range < ntp_range_max and stp_drop > stp_drop_min), ntp_range, stp_drop
