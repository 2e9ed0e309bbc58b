"""Mini-batch SGD over gate parameters with frozen base weights."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import mergenet as mn
from . import netgraph as ng
from . import tensorcore as tc
from .datazoo import Dataset, DivergenceError
from .tensorcore import Tensor


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 150
    batch_size: int = 32
    lam: float = 5.0
    seed: int = 0
    level: str = "model"
    sites: Optional[list] = None
    prime: int = 0
    mode: str = "stochastic"
    sigma_init: float = 0.01
    train_beta: bool = False
    model_loss: str = "combined"
    # summed over the mini-batch: lam is then a per-batch trade-off, see README
    reduction: str = "sum"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunReport:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    log_alpha: list = field(default_factory=list)
    init_bank: Optional[mn.GateBank] = None
    final_bank: Optional[mn.GateBank] = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        bank = self.final_bank
        gate_cols = [f"log_alpha_s{s}_m{j}" for s in bank.sites for j in range(bank.n_models)]
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", *gate_cols])
        for e in range(self.epochs):
            w.writerow(
                [e + 1, repr(self.train_loss[e]), repr(self.val_loss[e]), repr(self.val_acc[e])]
                + [repr(float(v)) for v in self.log_alpha[e].reshape(-1)]
            )
        return buf.getvalue()

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        return self.to_csv() == other.to_csv() and self.train_acc == other.train_acc


def evaluate(model, data: Dataset) -> tuple:
    """(mean cross-entropy, accuracy) with deterministic gates for merged models."""
    if isinstance(model, mn.MergedModel):
        logits = mn.forward_merged(model, data.x, mode="deterministic")
    else:
        logits = ng.forward(model, data.x)
    loss = tc.softmax_cross_entropy(logits, data.y).item()
    acc = float(np.mean(np.argmax(logits.data, axis=1) == data.y))
    return loss, acc


def train_gates(
    zoo: Sequence[ng.ModelDef],
    data_train: Dataset,
    data_val: Dataset,
    cfg: TrainConfig,
    bank: Optional[mn.GateBank] = None,
) -> tuple:
    """Learn gates for ``zoo`` on ``data_train``; returns ``(GateBank, RunReport)``.

    Each mini-batch draws one stochastic gate per (site, model), computes
    task loss + lam * (sum of gates - n_sites), and takes a plain SGD descent
    step on log_alpha (and on u_beta when ``cfg.train_beta``).
    """
    ng.assert_same_arch(zoo)
    if len(data_train) == 0 or len(data_val) == 0:
        raise ValueError("training and validation data must be nonempty")
    t0 = time.perf_counter()
    spec = mn.MergeSpec.build(cfg.level, zoo, cfg.sites, cfg.prime)
    init_seq, shuffle_seq, gate_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    if bank is None:
        bank = mn.init_gates(spec, int(init_seq.generate_state(1)[0]), cfg.sigma_init)
    else:
        bank = bank.copy()
    merged = mn.MergedModel(list(zoo), spec, bank, mode=cfg.mode, model_loss=cfg.model_loss, reduction=cfg.reduction)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    gate_rng = np.random.default_rng(gate_seq)

    report = RunReport(init_bank=bank.copy())
    n = len(data_train)
    # leaves share storage with the bank, so in-place updates train the bank itself
    la = Tensor(bank.log_alpha, requires_grad=True)
    ub = Tensor(bank.u_beta, requires_grad=cfg.train_beta)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data_train.x[idx], data_train.y[idx]
            la.grad = ub.grad = None
            with tc.Tape():
                gates = mn.gate_values(merged, gate_rng, cfg.mode, (la, ub))
                out = mn.forward_with_gates(merged, x, gates)
                task = (
                    mn.task_loss(merged, x, y, gates)
                    if merged.model_loss == "per_model"
                    else tc.softmax_cross_entropy(out, y, cfg.reduction)
                )
                loss = task + mn.penalty(gates, cfg.lam, len(spec.sites)) if cfg.lam else task
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch + 1}, batch starting {start}")
            if loss.requires_grad:
                tc.backward(loss)
            if la.grad is not None:
                bank.log_alpha -= cfg.lr * la.grad
            if ub.grad is not None:
                bank.u_beta -= cfg.lr * ub.grad
            losses.append(value * (len(idx) if cfg.reduction == "mean" else 1))
            correct += int(np.sum(np.argmax(out.data, axis=1) == y))
        report.train_loss.append(float(np.sum(losses) / n))
        report.train_acc.append(correct / n)
        vl, va = evaluate(merged, data_val)
        report.val_loss.append(vl)
        report.val_acc.append(va)
        report.log_alpha.append(bank.log_alpha.copy())
    report.final_bank = bank.copy()
    report.wall_time = time.perf_counter() - t0
    return bank, report
