"""Structure-informed transport: pooling source data whose mechanisms are
declared equal to the target's, then fitting one predictor per target module.

The single-module procedures pool whole datasets (coarse per-source
discrepancy sets); the circuit procedure pools per position via the
fine-grained discrepancy oracle and composes the fitted modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .inference import (
    DEFAULT_ALPHA,
    CircuitPredictor,
    Cpt,
    PositionCpd,
    fit_cpt,
    pool_rows,
)
from .scm import TARGET_DOMAIN, CausalDiagram, Dataset, DiscrepancyOracle


@dataclass(frozen=True)
class ParentLists:
    """Ordered label parents per domain; order is significant."""

    by_domain: dict

    def arity(self, domain) -> int:
        return len(self.by_domain[domain])


@dataclass(frozen=True)
class DeltaSets:
    """Coarse discrepancy sets: positions possibly mismatched vs the target."""

    by_source: dict

    def shares_label(self, j, y_index) -> bool:
        return y_index not in self.by_source[j]


@dataclass(frozen=True)
class ModuleTrResult:
    cpt: Cpt
    target_parents: tuple[int, ...]
    used_sources: tuple[int, ...]
    pooled_n: int


@dataclass(frozen=True)
class PositionStatus:
    position: int
    transported: bool
    pooled_pairs: tuple
    pooled_n: float
    flagged_rows: int


@dataclass(frozen=True)
class CircuitTrResult:
    predictor: CircuitPredictor
    positions: tuple[PositionStatus, ...]

    def manifest(self) -> dict:
        return {
            "prefix_len": self.predictor.prefix_len,
            "n_vars": self.predictor.n_vars,
            "positions": [
                {
                    "position": s.position,
                    "transported": s.transported,
                    "pooled_pairs": [list(map(str, p)) for p in s.pooled_pairs],
                    "pooled_n": s.pooled_n,
                    "flagged_rows": s.flagged_rows,
                }
                for s in self.positions
            ],
        }


def simple_tr(sources, target: Dataset, delta: DeltaSets, vocab_size: int,
              y_index: int = 1, x_index: int = 0, alpha: float = DEFAULT_ALPHA) -> Cpt:
    """Pool whole datasets from sources sharing the label mechanism, plus the
    target data, and fit a single-covariate conditional."""
    mappings = [
        (ds, y_index, (x_index,))
        for j, ds in enumerate(sources, start=1)
        if delta.shares_label(j, y_index)
    ]
    mappings.append((target, y_index, (x_index,)))
    xs, ys, w = pool_rows(mappings)
    return fit_cpt(xs, ys, vocab_size, 1, alpha=alpha, weights=w)


def module_tr(sources, target: Dataset, delta: DeltaSets, parents: ParentLists,
              vocab_size: int, y_index: int | None = None,
              alpha: float = DEFAULT_ALPHA) -> ModuleTrResult:
    """Pool label rows from mechanism-sharing sources, reordered so that each
    source's parent list aligns with the target's, and fit one module.

    The returned table conditions on the target parent order.
    """
    target_parents = tuple(parents.by_domain[TARGET_DOMAIN])
    if y_index is None:
        y_index = target.n_vars - 1
    used = tuple(
        j for j in range(1, len(sources) + 1) if delta.shares_label(j, y_index)
    )
    mappings = [(sources[j - 1], y_index, tuple(parents.by_domain[j])) for j in used]
    mappings.append((target, y_index, target_parents))
    xs, ys, w = pool_rows(mappings)
    cpt = fit_cpt(xs, ys, vocab_size, len(target_parents), alpha=alpha, weights=w)
    return ModuleTrResult(
        cpt=cpt, target_parents=target_parents, used_sources=used, pooled_n=len(ys)
    )


def pooled_data_for_position(i: int, datasets: dict, oracle: DiscrepancyOracle,
                             diagrams: dict):
    """Projection mappings for target position ``i``: every source
    position-domain pair with a matching mechanism, plus (i, target) itself."""
    pairs = [
        (i2, j2)
        for (i2, j2) in oracle.matches(i, TARGET_DOMAIN)
        if j2 != TARGET_DOMAIN
    ]
    pairs.sort(key=lambda p: (str(p[1]), p[0]))
    mappings = [(datasets[j2], i2, tuple(diagrams[j2].parents[i2])) for i2, j2 in pairs]
    mappings.append((datasets[TARGET_DOMAIN], i, tuple(diagrams[TARGET_DOMAIN].parents[i])))
    return mappings, tuple(pairs)


def circuit_tr(datasets: dict, oracle: DiscrepancyOracle, diagrams: dict,
               prefix_len: int, vocab_size: int,
               alpha: float = DEFAULT_ALPHA) -> CircuitTrResult:
    """Fit one module per target position from mechanism-matched pooled data,
    compose them over the target diagram, and return the marginalizing
    predictor for P(v_last | v_prefix).

    Positions with no matching source pairs fall back to target rows only;
    with no target rows either, the module is a uniform flagged table.
    """
    target_diagram: CausalDiagram = diagrams[TARGET_DOMAIN]
    T = target_diagram.n_vars
    if not 0 < prefix_len < T:
        raise ContractViolation(f"prefix length {prefix_len} out of range for {T} variables")
    cache: dict = {}
    cpds, statuses = [], []
    for i in range(prefix_len, T):
        mappings, pairs = pooled_data_for_position(i, datasets, oracle, diagrams)
        arity = len(target_diagram.parents[i])
        key = tuple((id(m[0]), m[1], m[2]) for m in mappings)
        if key in cache:
            cpt, pooled = cache[key]
        else:
            xs, ys, w = pool_rows(mappings)
            cpt = fit_cpt(xs, ys, vocab_size, arity, alpha=alpha, weights=w)
            pooled = float(len(ys) if w is None else w.sum())
            cache[key] = (cpt, pooled)
        cpds.append(PositionCpd(index=i, parents=tuple(target_diagram.parents[i]), cpt=cpt))
        statuses.append(
            PositionStatus(
                position=i,
                transported=bool(pairs),
                pooled_pairs=pairs,
                pooled_n=pooled,
                flagged_rows=len(cpt.flagged_rows),
            )
        )
    predictor = CircuitPredictor(
        vocab_size=vocab_size, prefix_len=prefix_len, n_vars=T, cpds=tuple(cpds)
    )
    return CircuitTrResult(predictor=predictor, positions=tuple(statuses))
