"""Exhaustive search over one-hot site assignments, used as ground truth."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from typing import Iterator, Sequence

import numpy as np

from . import mergenet as mn
from . import netgraph as ng
from .datazoo import Dataset
from .trainer import evaluate

log = logging.getLogger(__name__)

DEFAULT_CAP = 4096


class CapExceeded(ValueError):
    pass


def enumerate_assignments(spec: mn.MergeSpec, cap: int = DEFAULT_CAP) -> Iterator[tuple]:
    total = spec.n_models ** len(spec.sites)
    if total > cap:
        raise CapExceeded(f"{spec.n_models}^{len(spec.sites)} = {total} assignments exceeds cap {cap}")
    return itertools.product(range(spec.n_models), repeat=len(spec.sites))


def score_assignments(zoo: Sequence[ng.ModelDef], spec: mn.MergeSpec, data_val: Dataset, cap: int = DEFAULT_CAP) -> list:
    """``[(assignment, val_loss, val_acc), ...]`` in lexicographic order."""
    rows = []
    for assignment in enumerate_assignments(spec, cap):
        merged = mn.MergedModel(list(zoo), spec, mn.one_hot_bank(spec, assignment))
        loss, acc = evaluate(merged, data_val)
        rows.append((assignment, loss, acc))
    return rows


def brute_force_best(zoo: Sequence[ng.ModelDef], spec: mn.MergeSpec, data_val: Dataset, cap: int = DEFAULT_CAP) -> tuple:
    """Lowest validation loss assignment; ties go to the lexicographically smallest."""
    rows = score_assignments(zoo, spec, data_val, cap)
    best_a, best_loss = rows[0][0], np.inf
    for assignment, loss, _ in rows:
        if loss < best_loss:  # NaN never wins
            best_a, best_loss = assignment, loss
    ties = [a for a, l, _ in rows if l == best_loss]
    if len(ties) > 1:
        log.warning("oracle tie between %d assignments, picking %s", len(ties), best_a)
    return best_a, best_loss


def to_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["assignment", "val_loss", "val_acc"])
    for assignment, loss, acc in rows:
        w.writerow(["-".join(str(j) for j in assignment), repr(float(loss)), repr(float(acc))])
    return buf.getvalue()
