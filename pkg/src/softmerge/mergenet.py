"""Gated combination of architecture-identical frozen models.

At every selected merge site the J candidate branches see the same input and
their outputs are summed with hard concrete gates, ``sum_j g_j * branch_j(h)``.
Sites that are not selected run the prime model's component unchanged.
Gates multiply outputs only; stored weights are never touched.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import hardconcrete as hc
from . import netgraph as ng
from . import tensorcore as tc
from .tensorcore import Tensor

log = logging.getLogger(__name__)

LEVELS = ("model", "module", "layer")


def available_sites(level: str, arch: ng.ModelDef) -> list:
    if level == "model":
        return [0]
    if level == "module":
        return list(range(len(arch.groups)))
    if level == "layer":
        return arch.dense_indices
    raise ValueError(f"unknown merge level {level!r}; expected one of {LEVELS}")


@dataclass
class MergeSpec:
    level: str
    n_models: int
    sites: list
    prime: int = 0

    @classmethod
    def build(cls, level: str, zoo: Sequence[ng.ModelDef], sites=None, prime: int = 0) -> "MergeSpec":
        if not zoo:
            raise ValueError("empty model zoo")
        valid = available_sites(level, zoo[0])
        spec = cls(level, len(zoo), list(valid) if sites is None else sorted(int(s) for s in sites), prime)
        spec.validate(zoo[0])
        return spec

    def validate(self, arch: ng.ModelDef) -> None:
        valid = available_sites(self.level, arch)
        if not self.sites:
            raise ValueError("merge spec needs at least one selected site")
        bad = [s for s in self.sites if s not in valid]
        if bad:
            raise ValueError(f"sites {bad} invalid for level {self.level!r}; valid sites are {valid}")
        if len(set(self.sites)) != len(self.sites):
            raise ValueError(f"duplicate sites in {self.sites}")
        if not 0 <= self.prime < self.n_models:
            raise ValueError(f"prime model {self.prime} out of range for J={self.n_models}")


@dataclass
class GateBank:
    """Gate parameters for every (selected site, model) pair, stored as [T, J] arrays."""

    sites: list
    log_alpha: np.ndarray
    u_beta: np.ndarray
    gamma: float = hc.GAMMA
    zeta: float = hc.ZETA

    def __post_init__(self):
        self.log_alpha = np.array(self.log_alpha, dtype=np.float64)
        self.u_beta = np.array(self.u_beta, dtype=np.float64)
        la = self.log_alpha
        if la.ndim != 2 or la.shape[0] != len(self.sites) or self.u_beta.shape != la.shape:
            raise ValueError("log_alpha and u_beta must both be [n_sites, J]")

    @property
    def n_models(self) -> int:
        return self.log_alpha.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return hc.logistic(self.u_beta)

    def params(self, t: int, j: int) -> hc.GateParams:
        return hc.GateParams(float(self.log_alpha[t, j]), float(self.u_beta[t, j]), self.gamma, self.zeta)

    def deterministic(self) -> np.ndarray:
        return hc.deterministic_gates(self.log_alpha, self.gamma, self.zeta)

    def copy(self) -> "GateBank":
        return GateBank(list(self.sites), self.log_alpha.copy(), self.u_beta.copy(), self.gamma, self.zeta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "model", "log_alpha", "beta"])
        beta = self.beta
        for t, site in enumerate(self.sites):
            for j in range(self.n_models):
                w.writerow([site, j, repr(float(self.log_alpha[t, j])), repr(float(beta[t, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GateBank":
        rows = list(csv.DictReader(io.StringIO(text)))
        sites = sorted({int(r["site"]) for r in rows})
        n_models = max(int(r["model"]) for r in rows) + 1
        la = np.zeros((len(sites), n_models))
        ub = np.zeros_like(la)
        for r in rows:
            t, j = sites.index(int(r["site"])), int(r["model"])
            la[t, j] = float(r["log_alpha"])
            ub[t, j] = hc.logit(float(r["beta"]))
        return cls(sites, la, ub)


def init_gates(spec: MergeSpec, seed: int, sigma_init: float = 0.01, beta: float = hc.BETA) -> GateBank:
    if sigma_init < 0:
        raise ValueError("sigma_init must be >= 0")
    rng = np.random.default_rng(seed)
    shape = (len(spec.sites), spec.n_models)
    la = rng.normal(0.0, sigma_init, size=shape) if sigma_init > 0 else np.zeros(shape)
    return GateBank(list(spec.sites), la, np.full(shape, hc.logit(beta)))


def one_hot_bank(spec: MergeSpec, assignment: Sequence[int], magnitude: float = 10.0) -> GateBank:
    """Bank whose deterministic gates are exactly 1 on the assigned model of each site and 0 elsewhere."""
    if len(assignment) != len(spec.sites):
        raise ValueError(f"assignment has {len(assignment)} entries for {len(spec.sites)} sites")
    la = np.full((len(spec.sites), spec.n_models), -magnitude)
    for t, j in enumerate(assignment):
        la[t, j] = magnitude
    return GateBank(list(spec.sites), la, np.zeros_like(la))


@dataclass
class MergedModel:
    zoo: list
    spec: MergeSpec
    bank: GateBank
    mode: str = "deterministic"
    model_loss: str = "combined"
    reduction: str = "mean"

    def __post_init__(self):
        ng.assert_same_arch(self.zoo)
        if len(self.zoo) != self.spec.n_models:
            raise ValueError(f"spec expects {self.spec.n_models} models, zoo has {len(self.zoo)}")
        self.spec.validate(self.zoo[0])
        if list(self.bank.sites) != list(self.spec.sites) or self.bank.n_models != self.spec.n_models:
            raise ValueError("gate bank does not match merge spec")
        if self.mode not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if self.model_loss not in ("combined", "per_model"):
            raise ValueError(f"unknown model_loss {self.model_loss!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def gate_values(
    m: MergedModel,
    rng: Optional[np.random.Generator] = None,
    mode: Optional[str] = None,
    leaves: Optional[tuple] = None,
) -> Tensor:
    """Gate matrix [T, J] for one forward pass.

    Stochastic mode draws one noise value per (site, model). ``leaves`` are the
    trainable ``(log_alpha, u_beta)`` tensors; without them the bank's values
    are used as constants.
    """
    mode = mode or m.mode
    bank = m.bank
    if mode == "deterministic":
        if leaves:
            width = bank.zeta - bank.gamma
            return tc.clip(tc.sigmoid(leaves[0]) * width + bank.gamma, 0.0, 1.0)
        return Tensor(hc.deterministic_gates(bank.log_alpha, bank.gamma, bank.zeta))
    if rng is None:
        raise ValueError("stochastic gates need an rng")
    la, ub = leaves if leaves else (Tensor(bank.log_alpha), Tensor(bank.u_beta))
    u = hc.uniform_noise(rng, bank.log_alpha.shape)
    return hc.gate_tensor(la, ub, u, bank.gamma, bank.zeta)


def _combine(branch, n_models: int, gates: Tensor, t: int, zero_shape: tuple) -> Tensor:
    # gate 0 skips the branch (so non-finite outputs cannot leak in); gate 1 adds it unscaled
    acc = None
    for j in range(n_models):
        gv = gates.data[t, j]
        if gv == 0.0:
            continue
        out = branch(j)
        term = out if gv == 1.0 else tc.scale(out, gates[t, j])
        acc = term if acc is None else acc + term
    return Tensor(np.zeros(zero_shape)) if acc is None else acc


def forward_with_gates(m: MergedModel, x, gates: Tensor) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    spec, zoo = m.spec, m.zoo
    if spec.level == "model":
        return _combine(lambda j: ng.forward(zoo[j], x), spec.n_models, gates, 0, ng.out_shape(zoo[0].layers, x.shape))
    prime = zoo[spec.prime]
    pos = {s: t for t, s in enumerate(spec.sites)}
    h = x
    if spec.level == "module":
        for mi, (a, b) in enumerate(prime.groups):
            if mi in pos:
                shape = ng.out_shape(prime.layers[a : b + 1], h.shape)
                h = _combine(lambda j, h=h, a=a, b=b: ng.run_layers(zoo[j].layers[a : b + 1], h), spec.n_models, gates, pos[mi], shape)
            else:
                h = ng.run_layers(prime.layers[a : b + 1], h)
        return h
    for li, layer in enumerate(prime.layers):
        if li in pos:
            h = _combine(lambda j, h=h, li=li: zoo[j].layers[li].apply(h), spec.n_models, gates, pos[li], layer.out_shape(h.shape))
        else:
            h = layer.apply(h)
    return h


def forward_merged(m: MergedModel, x, rng: Optional[np.random.Generator] = None, mode: Optional[str] = None) -> Tensor:
    return forward_with_gates(m, x, gate_values(m, rng, mode))


def penalty(gates: Tensor, lam: float, n_sites: Optional[int] = None) -> Tensor:
    """``lam * (sum of sampled gates - T)``; each of the T sites targets unit gate mass."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    gates = gates if isinstance(gates, Tensor) else Tensor(gates)
    n_sites = gates.shape[0] if n_sites is None else n_sites
    return (gates.sum() - float(n_sites)) * lam


def task_loss(m: MergedModel, x, y, gates: Tensor) -> Tensor:
    if m.spec.level == "model" and m.model_loss == "per_model":
        x = x if isinstance(x, Tensor) else Tensor(x)
        total = None
        for j, model in enumerate(m.zoo):
            gv = gates.data[0, j]
            if gv == 0.0:
                logits = Tensor(np.zeros(ng.out_shape(model.layers, x.shape)))
            else:
                out = ng.forward(model, x)
                logits = out if gv == 1.0 else tc.scale(out, gates[0, j])
            term = tc.softmax_cross_entropy(logits, y, m.reduction)
            total = term if total is None else total + term
        return total
    return tc.softmax_cross_entropy(forward_with_gates(m, x, gates), y, m.reduction)


def merged_loss(
    m: MergedModel,
    x,
    y,
    lam: float,
    rng: Optional[np.random.Generator] = None,
    leaves: Optional[tuple] = None,
    mode: Optional[str] = None,
) -> Tensor:
    gates = gate_values(m, rng, mode, leaves)
    loss = task_loss(m, x, y, gates)
    if lam == 0:
        return loss
    return loss + penalty(gates, lam, len(m.spec.sites))


def extract_winner(bank: GateBank, t: int) -> int:
    """Model with the largest deterministic gate at site position ``t``.

    Ordering uses log_alpha directly, which agrees with the deterministic gate
    and still separates gates that both saturate at 1. Exact ties go to the
    lowest index and are logged.
    """
    row = bank.log_alpha[t]
    best = int(np.argmax(row))
    tied = np.flatnonzero(row == row[best])
    if len(tied) > 1:
        log.warning("site %s: tie between models %s, picking %d", bank.sites[t], tied.tolist(), best)
    return best


def winners(bank: GateBank) -> list:
    return [extract_winner(bank, t) for t in range(len(bank.sites))]


def assemble(zoo: Sequence[ng.ModelDef], spec: MergeSpec, assignment: Sequence[int]) -> ng.ModelDef:
    """Single model taking each selected site from its assigned model, the prime model elsewhere."""
    if spec.level == "model":
        return zoo[assignment[0]].copy()
    out = zoo[spec.prime].copy()
    for site, j in zip(spec.sites, assignment):
        if spec.level == "module":
            a, b = out.groups[site]
            for li in range(a, b + 1):
                out.layers[li] = zoo[j].layers[li].copy()
        else:
            out.layers[site] = zoo[j].layers[site].copy()
    return out


def finalize(m: MergedModel) -> ng.ModelDef:
    return assemble(m.zoo, m.spec, winners(m.bank))
