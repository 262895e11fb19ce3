"""Structure-agnostic few-shot adaptation.

Every hypothetical structure (a partition of position-domain pairs into
mechanism classes plus one diagram per domain) yields a composed predictor
trained on pooled source data and half of the target data; held-out target
likelihood selects among them.  Exhaustive enumeration is guarded by caps and
a guided mode takes an explicit candidate list, always extended with the
no-transport hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, SizeBudgetError
from .inference import DEFAULT_ALPHA, Cpt, fit_cpt, nll_risk, pool_rows
from .scm import TARGET_DOMAIN, CausalDiagram, Dataset, DiscrepancyOracle
from .transport import circuit_tr


def domain_order(labels) -> list:
    sources = sorted(l for l in labels if l != TARGET_DOMAIN)
    return sources + [TARGET_DOMAIN]


def pair_space(sizes: dict) -> list:
    """Canonical ordering of position-domain pairs."""
    return [(i, j) for j in domain_order(sizes) for i in range(sizes[j])]


@dataclass(frozen=True)
class StructureHypothesis:
    """A partition of the pair space (restricted-growth string) plus diagrams."""

    sizes: tuple  # ((label, T), ...) in canonical domain order
    partition: tuple
    diagrams: tuple  # CausalDiagram per domain, same order as sizes

    def labels(self) -> list:
        return [l for l, _ in self.sizes]

    def diagram_map(self) -> dict:
        return dict(zip(self.labels(), self.diagrams))

    def oracle(self) -> DiscrepancyOracle:
        sizes = dict(self.sizes)
        pairs = pair_space(sizes)
        if len(pairs) != len(self.partition):
            raise ContractViolation("partition length must match the pair space")
        return DiscrepancyOracle(class_ids=dict(zip(pairs, self.partition)))

    def encoding(self) -> tuple:
        return (self.partition, tuple(d.parents for d in self.diagrams))


def hypothesis_from_domains(domains, oracle: DiscrepancyOracle | None = None) -> StructureHypothesis:
    """The ground-truth hypothesis of a domain collection."""
    from .scm import induced_discrepancy_oracle

    oracle = oracle or induced_discrepancy_oracle(domains)
    sizes = {j: scm.n_vars for j, scm in domains.domains.items()}
    pairs = pair_space(sizes)
    seen: dict = {}
    partition = []
    for p in pairs:
        cls = oracle.class_ids[p]
        seen.setdefault(cls, len(seen))
        partition.append(seen[cls])
    order = domain_order(sizes)
    diagrams = tuple(domains.domains[j].diagram for j in order)
    return StructureHypothesis(
        sizes=tuple((j, sizes[j]) for j in order),
        partition=tuple(partition),
        diagrams=diagrams,
    )


def no_transport_hypothesis(sizes: dict) -> StructureHypothesis:
    """All-singleton classes with empty-parent diagrams: pure target fallback."""
    order = domain_order(sizes)
    n = sum(sizes.values())
    return StructureHypothesis(
        sizes=tuple((j, sizes[j]) for j in order),
        partition=tuple(range(n)),
        diagrams=tuple(CausalDiagram(sizes[j], ((),) * sizes[j]) for j in order),
    )


@dataclass(frozen=True)
class SearchConfig:
    prefix_len: int
    max_parents: int = 2
    partition_cap: int = 10_000
    diagram_cap: int = 10_000
    candidates: tuple | None = None
    holdout_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ContractViolation("holdout fraction must lie in (0, 1)")
        if self.partition_cap < 1 or self.diagram_cap < 1:
            raise ContractViolation("caps must be >= 1")


def _restricted_growth_strings(n: int):
    """All set partitions of range(n) in lexicographic RGS order."""
    rgs = [0] * n

    def rec(k, maxval):
        if k == n:
            yield tuple(rgs)
            return
        for v in range(maxval + 2):
            rgs[k] = v
            yield from rec(k + 1, max(maxval, v))

    if n == 0:
        yield ()
        return
    yield from rec(1, 0)


def _node_parent_options(i: int, max_parents: int) -> list:
    """Ordered parent tuples for node i: none, single, then ordered pairs."""
    opts: list[tuple[int, ...]] = [()]
    opts += [(p,) for p in range(i)]
    if max_parents >= 2:
        opts += [(p, q) for p in range(i) for q in range(i) if q != p]
    return opts


def diagram_count(n_vars: int, max_parents: int) -> int:
    return math.prod(len(_node_parent_options(i, max_parents)) for i in range(n_vars))


def _all_diagrams(n_vars: int, max_parents: int):
    import itertools

    per_node = [_node_parent_options(i, max_parents) for i in range(n_vars)]
    for combo in itertools.product(*per_node):
        yield CausalDiagram(n_vars, tuple(combo))


def bell_number(n: int) -> int:
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0] if n else 1


def enumerate_structures(config: SearchConfig, sizes: dict):
    """Candidate stream: exhaustive under caps, else the guided list.

    Guided mode always appends the no-transport hypothesis.  Exhaustive mode
    errors when the partition or diagram count exceeds its cap, naming the
    count.
    """
    import itertools

    if config.candidates is not None:
        yield from config.candidates
        yield no_transport_hypothesis(sizes)
        return
    order = domain_order(sizes)
    n_pairs = sum(sizes.values())
    n_partitions = bell_number(n_pairs)
    if n_partitions > config.partition_cap:
        raise ContractViolation(
            f"{n_partitions} partitions of {n_pairs} pairs exceed the cap "
            f"{config.partition_cap}; provide a guided candidate list"
        )
    n_diagrams = math.prod(diagram_count(sizes[j], config.max_parents) for j in order)
    if n_diagrams > config.diagram_cap:
        raise ContractViolation(
            f"{n_diagrams} diagram combinations exceed the cap "
            f"{config.diagram_cap}; provide a guided candidate list"
        )
    sizes_t = tuple((j, sizes[j]) for j in order)
    diagram_lists = [list(_all_diagrams(sizes[j], config.max_parents)) for j in order]
    for partition in _restricted_growth_strings(n_pairs):
        for diagrams in itertools.product(*diagram_lists):
            yield StructureHypothesis(sizes=sizes_t, partition=partition, diagrams=diagrams)


def split_rows(rows: np.ndarray, seed: int, fraction: float = 0.5):
    """Deterministic shuffle split; the first part has floor(n * fraction) rows."""
    rows = np.asarray(rows)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(rows.shape[0])
    cut = int(rows.shape[0] * fraction)
    return rows[perm[:cut]], rows[perm[cut:]]


@dataclass(frozen=True)
class SelectionResult:
    chosen: object
    chosen_hypothesis: object
    chosen_index: int
    heldout_nlls: tuple
    count: int

    @property
    def log_count(self) -> float:
        return math.log(self.count)


def circuit_ad(source_datasets: dict, target: Dataset, config: SearchConfig,
               vocab_size: int, split_seed: int = 0,
               alpha: float = DEFAULT_ALPHA) -> SelectionResult:
    """Fit every candidate structure on sources plus half the target data and
    return the one with the smallest held-out target NLL.

    Candidates whose classes mix arities (or exceed the elimination budget)
    are skipped.  Ties break on the lexicographically smallest encoding, so
    the choice does not depend on stream order.
    """
    if target.n < 2:
        raise ContractViolation("adaptation needs at least 2 target rows")
    tr_rows, te_rows = split_rows(target.rows, split_seed, config.holdout_fraction)
    tr = Dataset(domain_id=TARGET_DOMAIN, rows=tr_rows, seed=split_seed)
    sizes = {j: ds.n_vars for j, ds in source_datasets.items()}
    sizes[TARGET_DOMAIN] = target.n_vars
    evaluated = []
    for idx, hyp in enumerate(enumerate_structures(config, sizes)):
        datasets = dict(source_datasets)
        datasets[TARGET_DOMAIN] = tr
        try:
            result = circuit_tr(
                datasets, hyp.oracle(), hyp.diagram_map(), config.prefix_len,
                vocab_size, alpha=alpha,
            )
            nll = nll_risk(result.predictor, te_rows)
        except (ContractViolation, SizeBudgetError):
            evaluated.append((idx, hyp, None, math.inf))
            continue
        evaluated.append((idx, hyp, result, nll))
    if not evaluated:
        raise ContractViolation("empty candidate stream")
    valid = [e for e in evaluated if e[2] is not None]
    if not valid:
        raise ContractViolation("no evaluable candidate in the stream")
    idx, hyp, result, _ = min(valid, key=lambda e: (e[3], e[1].encoding()))
    return SelectionResult(
        chosen=result.predictor,
        chosen_hypothesis=hyp,
        chosen_index=idx,
        heldout_nlls=tuple(e[3] for e in evaluated),
        count=len(evaluated),
    )


@dataclass(frozen=True)
class SimpleAdResult:
    chosen: Cpt
    chosen_subset: tuple
    heldout_nlls: tuple
    count: int


def simple_ad(source_datasets, target: Dataset, vocab_size: int,
              split_seed: int = 0, alpha: float = DEFAULT_ALPHA) -> SimpleAdResult:
    """Two-variable agnostic adaptation: one predictor per source subset,
    selected by held-out target NLL with lexicographic tie-break."""
    if target.n < 2:
        raise ContractViolation("adaptation needs at least 2 target rows")
    K = len(source_datasets)
    tr_rows, te_rows = split_rows(target.rows, split_seed, 0.5)
    te = (te_rows[:, :1], te_rows[:, 1])
    entries = []
    for mask in range(2**K):
        subset = tuple(j for j in range(1, K + 1) if mask >> (j - 1) & 1)
        mappings = [(source_datasets[j - 1], 1, (0,)) for j in subset]
        mappings.append((tr_rows, 1, (0,)))
        xs, ys, w = pool_rows(mappings)
        cpt = fit_cpt(xs, ys, vocab_size, 1, alpha=alpha, weights=w)
        entries.append((subset, cpt, nll_risk(cpt, te)))
    subset, cpt, _ = min(entries, key=lambda e: (e[2], e[0]))
    return SimpleAdResult(
        chosen=cpt,
        chosen_subset=subset,
        heldout_nlls=tuple(e[2] for e in entries),
        count=len(entries),
    )


@dataclass(frozen=True)
class HypothesisCount:
    count: int
    log_count: float

    def excess_bound(self, n: int) -> float:
        return math.sqrt(self.log_count / n)


def hypothesis_count(config: SearchConfig, n_sources: int, n_vars: int) -> HypothesisCount:
    """Exact size of the exhaustive hypothesis space for equal-length domains."""
    n_pairs = n_vars * (n_sources + 1)
    count = bell_number(n_pairs) * diagram_count(n_vars, config.max_parents) ** (n_sources + 1)
    return HypothesisCount(count=count, log_count=math.log(count))


@dataclass(frozen=True)
class RegimeReport:
    regime: str
    threshold: float


def regime_report(circuit_size: int, n: int, n_sources: int) -> RegimeReport:
    """Fast/slow adaptability split at the cube-root sample threshold."""
    if circuit_size < 1 or n < 1 or n_sources < 1:
        raise ContractViolation("circuit size, n and source count must be >= 1")
    threshold = (n / n_sources) ** (1.0 / 3.0)
    return RegimeReport(regime="fast" if circuit_size <= threshold else "slow", threshold=threshold)
