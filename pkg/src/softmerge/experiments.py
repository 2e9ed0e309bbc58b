"""Desk-scale merging scenarios shared by the acceptance suite and the README.

Each function runs one seed end to end and returns a flat dict of outcomes,
including weight checksums taken before and after gate training.
"""

from __future__ import annotations

import numpy as np

from . import datazoo as dz
from . import mergenet as mn
from . import netgraph as ng
from . import oracle as orc
from . import trainer as tr

STAIRCASE = [
    "randomize",
    "noise:2.0",
    "noise:1.5",
    "noise:1.0",
    "noise:0.8",
    "noise:0.6",
    "trained:1",
    "noise:0.45",
    "noise:0.3",
    "base",
]


def _checksums(zoo) -> list:
    return [m.checksum() for m in zoo]


def _split(data: dz.Dataset, n_train: int) -> tuple:
    return data.subset(slice(0, n_train), "train"), data.subset(slice(n_train, len(data)), "val")


def model_level_staircase(seed: int, epochs: int = 40, lr: float = 0.003, lam: float = 5.0) -> dict:
    """Ten 8-16-4 MLPs of graded quality on overlapping 4-class blobs; gates pick one."""
    train, val = _split(dz.gen_blobs(4, 8, 2000, 3.0, seed), 1000)
    zoo = dz.build_zoo(ng.mlp([8, 16, 4]), train, STAIRCASE, seed, base_epochs=40)
    # shuffle positions so the best model is not always last
    order = np.random.default_rng([seed, 7]).permutation(len(zoo))
    zoo = [zoo[i] for i in order]
    accs = np.array([tr.evaluate(m, val)[1] for m in zoo])
    before = _checksums(zoo)
    cfg = tr.TrainConfig(lr=lr, epochs=epochs, batch_size=32, lam=lam, seed=seed, level="model")
    bank, report = tr.train_gates(zoo, train, val, cfg)
    return {
        "base_acc": accs,
        "best": int(np.argmax(accs)),
        "winner": mn.winners(bank)[0],
        "merged_acc": report.val_acc[-1],
        "init_log_alpha": report.init_bank.log_alpha[0],
        "final_log_alpha": bank.log_alpha[0],
        "finite": bool(np.all(np.isfinite(report.train_loss))),
        "weights_unchanged": before == _checksums(zoo),
    }


def _mlp10() -> ng.ModelDef:
    return ng.mlp([16, 32, 32, 10])


def module_level_three(seed: int, epochs: int = 30, lr: float = 0.001, lam: float = 5.0) -> dict:
    """One trained and two untrained 16-32-32-10 MLPs, each split into two modules."""
    train, val = _split(dz.gen_blobs(10, 16, 3000, 6.0, seed), 2000)
    tmpl = _mlp10()
    tmpl = ng.ModelDef(tmpl.layers, ng.split_groups(tmpl, 2))
    zoo = dz.build_zoo(tmpl, train, ["trained:0", "base", "trained:0"], seed, base_epochs=100, lr=0.1)
    accs = np.array([tr.evaluate(m, val)[1] for m in zoo])
    before = _checksums(zoo)
    cfg = tr.TrainConfig(lr=lr, epochs=epochs, batch_size=16, lam=lam, seed=seed, level="module", sigma_init=0.01)
    bank, report = tr.train_gates(zoo, train, val, cfg)
    return {
        "trained": 1,
        "base_acc": accs,
        "winners": mn.winners(bank),
        "merged_acc": report.val_acc[-1],
        "final_log_alpha": bank.log_alpha,
        "finite": bool(np.all(np.isfinite(report.train_loss))),
        "weights_unchanged": before == _checksums(zoo),
    }


def layer_level_oracle(seed: int, epochs: int = 20, lr: float = 0.001, lam: float = 5.0) -> dict:
    """Two copies of one trained MLP with complementary layers randomized; three dense sites."""
    train, val = _split(dz.gen_blobs(10, 16, 3000, 6.0, seed), 2000)
    zoo = dz.build_zoo(_mlp10(), train, ["partial:2", "partial:0+4"], seed, base_epochs=60, lr=0.1)
    spec = mn.MergeSpec.build("layer", zoo)
    n_assign = sum(1 for _ in orc.enumerate_assignments(spec))
    best, best_loss = orc.brute_force_best(zoo, spec, val)
    before = _checksums(zoo)
    cfg = tr.TrainConfig(lr=lr, epochs=epochs, batch_size=16, lam=lam, seed=seed, level="layer")
    bank, report = tr.train_gates(zoo, train, val, cfg)
    final = mn.finalize(mn.MergedModel(zoo, spec, bank))
    final_loss, final_acc = tr.evaluate(final, val)
    return {
        "n_assignments": n_assign,
        "oracle": tuple(best),
        "oracle_loss": best_loss,
        "learned": tuple(mn.winners(bank)),
        "finalized_loss": final_loss,
        "finalized_acc": final_acc,
        "finite": bool(np.all(np.isfinite(report.train_loss))),
        "weights_unchanged": before == _checksums(zoo),
    }


def robustness(seed: int, epochs: int = 30, lr: float = 0.001, lam: float = 5.0) -> dict:
    """Same model-level run with and without an extreme(1e6) copy of the trained model."""
    train, val = _split(dz.gen_blobs(10, 16, 3000, 6.0, seed), 2000)
    zoo = dz.build_zoo(_mlp10(), train, ["base", "randomize", "extreme:1e6"], seed, base_epochs=60, lr=0.1)
    before = _checksums(zoo)
    cfg = tr.TrainConfig(lr=lr, epochs=epochs, batch_size=16, lam=lam, seed=seed, level="model")
    bank, report = tr.train_gates(zoo, train, val, cfg)
    clean_bank, clean_report = tr.train_gates(zoo[:2], train, val, cfg)
    return {
        "malicious": 2,
        "winner": mn.winners(bank)[0],
        "clean_winner": mn.winners(clean_bank)[0],
        "merged_acc": report.val_acc[-1],
        "clean_merged_acc": clean_report.val_acc[-1],
        "finite": bool(np.all(np.isfinite(report.train_loss)) and np.all(np.isfinite(report.val_loss))),
        "weights_unchanged": before == _checksums(zoo),
    }
