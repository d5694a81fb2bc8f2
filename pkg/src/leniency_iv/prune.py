"""Recursive removal of singletons, collinear columns and leverage-one cases.

One pass applies, in order: singleton observations (sole member of a
fixed-effect level or sole case of an examiner), collinear instrument and
control columns, and observations whose leave-one-out quantities are
undefined (``M_ii - H_ii`` numerically zero). Passes repeat until nothing
changes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .design import LEVERAGE_TOL, DesignContext, encode_design
from .errors import DegenerateDesignError

log = logging.getLogger(__name__)


@dataclass
class PruneReport:
    dropped_singleton: int = 0
    dropped_leverage_one: int = 0
    dropped_instrument_columns: int = 0
    dropped_control_columns: int = 0
    reference_instruments_omitted: int = 0
    iterations: int = 0
    dropped_rows: dict = field(default_factory=lambda: {"singleton": [], "leverage_one": []})

    @property
    def dropped_observations(self) -> int:
        return self.dropped_singleton + self.dropped_leverage_one

    def to_dict(self) -> dict:
        return {
            "dropped_observations": self.dropped_observations,
            "dropped_singleton": self.dropped_singleton,
            "dropped_leverage_one": self.dropped_leverage_one,
            "dropped_instrument_columns": self.dropped_instrument_columns,
            "dropped_control_columns": self.dropped_control_columns,
            "reference_instruments_omitted": self.reference_instruments_omitted,
            "iterations": self.iterations,
        }


def _singleton_mask(ds: Dataset) -> np.ndarray:
    bad = np.bincount(ds.examiner, minlength=len(ds.examiner_levels))[ds.examiner] == 1
    for j in range(ds.fe.shape[1]):
        codes = ds.fe[:, j]
        bad |= np.bincount(codes, minlength=len(ds.fe_levels[j]))[codes] == 1
    return bad


def prune(ds: Dataset, leverage_tol: float = LEVERAGE_TOL) -> tuple[Dataset, PruneReport]:
    report = PruneReport()
    while True:
        report.iterations += 1
        changed = False

        while ds.n:
            bad = _singleton_mask(ds)
            if not bad.any():
                break
            report.dropped_singleton += int(bad.sum())
            report.dropped_rows["singleton"].extend(int(r) for r in ds.row_ids[bad])
            ds = ds.subset(~bad)
            changed = True
        if ds.n == 0:
            raise DegenerateDesignError("pruning dropped every observation")

        enc = encode_design(ds)
        report.dropped_instrument_columns = enc.n_collinear_instruments
        report.dropped_control_columns = enc.n_collinear_controls
        report.reference_instruments_omitted = enc.n_reference_omitted
        if enc.Z.shape[1] == 0:
            raise DegenerateDesignError("no instrument columns survive pruning")

        ctx = DesignContext(enc.Z, enc.W, dataset=ds, check_leverage=False)
        bad = ctx.gap < leverage_tol
        if bad.any():
            report.dropped_leverage_one += int(bad.sum())
            report.dropped_rows["leverage_one"].extend(int(r) for r in ds.row_ids[bad])
            ds = ds.subset(~bad)
            changed = True
            if ds.n == 0:
                raise DegenerateDesignError("pruning dropped every observation")

        if not changed:
            break
        log.debug("prune pass %d: n=%d", report.iterations, ds.n)
    return ds, report
