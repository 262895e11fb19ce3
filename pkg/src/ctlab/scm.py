"""Discrete structural causal models over a shared token vocabulary.

A model assigns every position ``i`` a mechanism that maps the values of an
ordered list of earlier positions (its parents) to a distribution over tokens
``0..V-1``.  Two mechanism families are supported:

* ``NoisyOperator``: a deterministic arithmetic skeleton (mod V) emitted with
  probability ``1 - noise_p``, otherwise a uniformly random token.
* ``TableMechanism``: an explicit conditional table, optionally indexed by
  shared exogenous confounder variables (used by the confounded two-variable
  fixtures).

The entailed joint distribution is computed exactly, either by accumulating
per-position transition tables in causal order or, when confounders are
present, by enumerating their configurations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SizeBudgetError

TARGET_DOMAIN = "*"

DEFAULT_ENTRY_BUDGET = 100_000_000


def entry_budget() -> int:
    """Maximum number of float entries for dense joint tables."""
    raw = os.environ.get("CTLAB_BUDGET")
    return int(float(raw)) if raw else DEFAULT_ENTRY_BUDGET


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ContractViolation(f"vocabulary size must be >= 2, got {self.size}")


# skeleton functions are vectorized over numpy integer arrays; reduction
# mod V happens in apply_operator / operator_table
_SKELETONS = {
    "unif": (0, None),
    "copy": (1, lambda x: x),
    "plus1": (1, lambda x: x + 1),
    "minus1": (1, lambda x: x - 1),
    "times2": (1, lambda x: 2 * x),
    "sum": (2, lambda a, b: a + b),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "subtract": (2, lambda a, b: a - b),
    "mult": (2, lambda a, b: a * b),
    # b = 0 maps to a, keeping the operator total and matching gcd(a, 0) = a
    "mod": (2, lambda a, b: np.where(np.asarray(b) == 0, a, np.mod(a, np.maximum(b, 1)))),
}

OPERATOR_KINDS = tuple(_SKELETONS)


@dataclass(frozen=True)
class NoisyOperator:
    kind: str
    noise_p: float = 0.0

    def __post_init__(self):
        if self.kind not in _SKELETONS:
            raise ContractViolation(f"unknown operator kind {self.kind!r}")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ContractViolation(f"noise_p must be in [0, 1], got {self.noise_p}")

    @property
    def arity(self) -> int:
        return _SKELETONS[self.kind][0]

    def skeleton(self, *args):
        if self.kind == "unif":
            raise ContractViolation("unif has no deterministic skeleton")
        return _SKELETONS[self.kind][1](*args)


@dataclass(frozen=True)
class TableMechanism:
    """Explicit conditional table P(v | parents, confounders).

    ``table`` has one axis of length V per parent (in parent order), then one
    axis per referenced confounder (in ``confounder_ids`` order), then the
    value axis of length V.  Rows must sum to one.
    """

    table: np.ndarray
    confounder_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))
        sums = self.table.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ContractViolation("TableMechanism rows must sum to 1")

    @property
    def arity(self) -> int:
        return self.table.ndim - 1 - len(self.confounder_ids)


Mechanism = NoisyOperator | TableMechanism


@dataclass(frozen=True)
class Confounder:
    """Shared exogenous variable with a finite support."""

    cardinality: int
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) != self.cardinality:
            raise ContractViolation("confounder probs length must match cardinality")
        if abs(sum(self.probs) - 1.0) > 1e-12:
            raise ContractViolation("confounder probs must sum to 1")


@dataclass(frozen=True)
class CausalDiagram:
    n_vars: int
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.parents) != self.n_vars:
            raise ContractViolation("one parent list per variable required")
        for i, pa in enumerate(self.parents):
            if len(set(pa)) != len(pa):
                raise ContractViolation(f"duplicate parents at position {i}")
            if any(p < 0 or p >= i for p in pa):
                raise ContractViolation(f"parents of position {i} must be earlier positions")


@dataclass(frozen=True)
class Scm:
    vocab: Vocabulary
    diagram: CausalDiagram
    mechanisms: tuple[Mechanism, ...]
    confounders: tuple[Confounder, ...] = ()

    def __post_init__(self):
        if len(self.mechanisms) != self.diagram.n_vars:
            raise ContractViolation("one mechanism per position required")
        for i, mech in enumerate(self.mechanisms):
            if mech.arity != len(self.diagram.parents[i]):
                raise ContractViolation(
                    f"mechanism arity {mech.arity} != |parents| at position {i}"
                )
            if isinstance(mech, TableMechanism):
                for c in mech.confounder_ids:
                    if c < 0 or c >= len(self.confounders):
                        raise ContractViolation(f"unknown confounder id {c} at position {i}")

    @property
    def n_vars(self) -> int:
        return self.diagram.n_vars


@dataclass(frozen=True)
class DomainCollection:
    sources: tuple[Scm, ...]
    target: Scm

    def __post_init__(self):
        if not self.sources:
            raise ContractViolation("at least one source domain required")
        sizes = {s.vocab.size for s in self.sources} | {self.target.vocab.size}
        if len(sizes) != 1:
            raise ContractViolation("all domains must share one vocabulary")

    @property
    def domains(self) -> dict:
        out = {j + 1: scm for j, scm in enumerate(self.sources)}
        out[TARGET_DOMAIN] = self.target
        return out


@dataclass(frozen=True)
class Dataset:
    domain_id: object
    rows: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        if self.rows.ndim != 2:
            raise ContractViolation("rows must be a 2-d token matrix")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def n_vars(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class JointTable:
    vocab: Vocabulary
    probs: np.ndarray  # shape (V,) * T

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if (self.probs < -1e-12).any():
            raise ContractViolation("joint probabilities must be nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-10:
            raise ContractViolation("joint must sum to 1")

    @property
    def n_vars(self) -> int:
        return self.probs.ndim

    def marginal(self, keep: tuple[int, ...]) -> np.ndarray:
        """Marginal over ``keep`` (axes ordered as given)."""
        drop = tuple(a for a in range(self.n_vars) if a not in keep)
        marg = self.probs.sum(axis=drop) if drop else self.probs
        kept_sorted = tuple(sorted(keep))
        perm = tuple(kept_sorted.index(k) for k in keep)
        return np.transpose(marg, perm) if perm != tuple(range(len(keep))) else marg


@dataclass(frozen=True)
class PositivityReport:
    ok: bool
    min_mass: float


@dataclass(frozen=True)
class DiscrepancyOracle:
    """Mechanism-equality structure over (position, domain) pairs.

    The zero-relation of Delta is an equivalence; it is stored as a class id
    per pair, which makes symmetry, reflexivity and transitivity structural.
    """

    class_ids: dict = field(default_factory=dict)

    def delta(self, i, j, i2, j2) -> int:
        a = self.class_ids.get((i, j))
        b = self.class_ids.get((i2, j2))
        if a is None or b is None:
            raise ContractViolation(f"unknown position-domain pair {(i, j)} or {(i2, j2)}")
        return 0 if a == b else 1

    def matches(self, i, j) -> list:
        """All pairs sharing the mechanism of (i, j), excluding (i, j) itself."""
        cls = self.class_ids[(i, j)]
        return [p for p, c in self.class_ids.items() if c == cls and p != (i, j)]


def apply_operator(op: NoisyOperator, args, vocab: Vocabulary, noise_u: float, noise_token: int):
    """One draw of a noisy operator given pre-sampled noise.

    ``noise_u`` is a uniform [0,1) variate deciding corruption, ``noise_token``
    a uniform token used when corruption fires (and always, for ``unif``).
    """
    args = tuple(int(a) for a in args)
    if len(args) != op.arity:
        raise ContractViolation(f"{op.kind} expects {op.arity} args, got {len(args)}")
    V = vocab.size
    if any(a < 0 or a >= V for a in args):
        raise ContractViolation("token out of range")
    if not (0 <= noise_token < V):
        raise ContractViolation("noise token out of range")
    if op.kind == "unif" or noise_u < op.noise_p:
        return int(noise_token)
    return int(op.skeleton(*args) % V)


def operator_table(op: NoisyOperator, vocab: Vocabulary) -> np.ndarray:
    """Exact transition table, shape (V,)*arity + (V,)."""
    V = vocab.size
    if op.kind == "unif":
        return np.full((V,), 1.0 / V)
    grids = np.meshgrid(*[np.arange(V)] * op.arity, indexing="ij")
    skel = np.asarray(op.skeleton(*grids)) % V
    table = np.full(skel.shape + (V,), op.noise_p / V)
    idx = np.indices(skel.shape)
    table[(*idx, skel)] += 1.0 - op.noise_p
    return table


def mechanism_table(scm: Scm, i: int, conf_config: tuple[int, ...] = ()) -> np.ndarray:
    """Conditional table of position ``i`` given its parents, at a confounder config."""
    mech = scm.mechanisms[i]
    if isinstance(mech, NoisyOperator):
        return operator_table(mech, scm.vocab)
    sel = mech.table
    arity = mech.arity
    for k, c in enumerate(mech.confounder_ids):
        sel = np.take(sel, conf_config[c], axis=arity)  # consumed axes shift left
    return sel


def sample_dataset(scm: Scm, n: int, seed: int, domain_id=TARGET_DOMAIN) -> Dataset:
    """Draw ``n`` i.i.d. full sequences by ancestral sampling."""
    if n < 0:
        raise ContractViolation("n must be >= 0")
    rng = np.random.default_rng(seed)
    V = scm.vocab.size
    T = scm.n_vars
    rows = np.zeros((n, T), dtype=np.int64)
    conf_draws = [rng.choice(c.cardinality, size=n, p=np.asarray(c.probs)) for c in scm.confounders]
    for i in range(T):
        mech = scm.mechanisms[i]
        pa = scm.diagram.parents[i]
        if isinstance(mech, NoisyOperator):
            tok = rng.integers(0, V, size=n)
            if mech.kind == "unif":
                rows[:, i] = tok
                continue
            flip = rng.random(n) < mech.noise_p
            skel = mech.skeleton(*(rows[:, p] for p in pa)) % V
            rows[:, i] = np.where(flip, tok, skel)
        else:
            full = mech.table.reshape(-1, V)
            digits = [rows[:, p] for p in pa] + [conf_draws[c] for c in mech.confounder_ids]
            shape = mech.table.shape[:-1]
            flat = np.ravel_multi_index(tuple(digits), shape) if digits else np.zeros(n, dtype=np.int64)
            cdf = np.cumsum(full, axis=1)
            u = rng.random(n)
            rows[:, i] = (u[:, None] >= cdf[flat]).sum(axis=1)
    return Dataset(domain_id=domain_id, rows=rows, seed=seed)


def exact_joint(scm: Scm, budget: int | None = None) -> JointTable:
    """Entailed joint over all V^T assignments.

    Operator models accumulate per-position transitions; confounded models sum
    the truncated product over all confounder configurations.
    """
    V = scm.vocab.size
    T = scm.n_vars
    budget = entry_budget() if budget is None else budget
    if V**T > budget:
        raise SizeBudgetError(f"joint needs {V**T} entries, budget is {budget}")

    def accumulate(conf_config):
        joint = np.ones(())
        for i in range(T):
            table = mechanism_table(scm, i, conf_config)
            pa = scm.diagram.parents[i]
            order = np.argsort(pa)
            t = np.transpose(table, tuple(order) + (len(pa),))
            shape = [V if k in pa else 1 for k in range(i)] + [V]
            joint = joint[..., None] * t.reshape(shape)
        return joint

    if not scm.confounders:
        return JointTable(scm.vocab, accumulate(()))
    total = np.zeros((V,) * T)
    configs = np.indices([c.cardinality for c in scm.confounders]).reshape(len(scm.confounders), -1).T
    for cfg in configs:
        w = 1.0
        for c, v in zip(scm.confounders, cfg):
            w *= c.probs[v]
        total += w * accumulate(tuple(cfg))
    return JointTable(scm.vocab, total)


def exact_conditional(joint: JointTable, target_index: int, given_indices: tuple[int, ...]):
    """Exact P(v_target | v_given) as a Cpt over the given order.

    Conditioning rows with zero mass are flagged and set to uniform.
    """
    from .inference import Cpt

    idx = (target_index,) + tuple(given_indices)
    if len(set(idx)) != len(idx):
        raise ContractViolation("target and given indices must be distinct")
    V = joint.vocab.size
    marg = joint.marginal(tuple(given_indices) + (target_index,))
    c = len(given_indices)
    rows = marg.reshape(-1, V)
    mass = rows.sum(axis=1)
    flagged = np.nonzero(mass <= 0.0)[0]
    table = np.where(mass[:, None] > 0.0, rows / np.where(mass[:, None] > 0, mass[:, None], 1.0), 1.0 / V)
    return Cpt(
        vocab_size=V,
        arity=c,
        table=table.reshape((V,) * c + (V,)),
        alpha=0.0,
        flagged_rows=frozenset(int(r) for r in flagged),
    )


def validate_positivity(joint: JointTable, epsilon: float) -> PositivityReport:
    m = float(joint.probs.min())
    return PositivityReport(ok=m >= epsilon, min_mass=m)


def _mechanism_signature(scm: Scm, i: int):
    mech = scm.mechanisms[i]
    if isinstance(mech, NoisyOperator):
        return ("op", mech.kind, mech.noise_p)
    confs = tuple((scm.confounders[c].cardinality, scm.confounders[c].probs) for c in mech.confounder_ids)
    return ("table", mech.table.shape, mech.table.tobytes(), confs)


def induced_discrepancy_oracle(domains: DomainCollection) -> DiscrepancyOracle:
    """Ground-truth oracle: Delta = 0 iff mechanisms are identically specified."""
    class_ids = {}
    seen = {}
    for label, scm in domains.domains.items():
        for i in range(scm.n_vars):
            sig = _mechanism_signature(scm, i)
            if sig not in seen:
                seen[sig] = len(seen)
            class_ids[(i, label)] = seen[sig]
    return DiscrepancyOracle(class_ids=class_ids)


def induced_delta_sets(domains: DomainCollection) -> dict:
    """Coarse per-source discrepancy sets: positions whose mechanism differs from the target's."""
    out = {}
    target = domains.target
    for j, scm in enumerate(domains.sources, start=1):
        if scm.n_vars != target.n_vars:
            raise ContractViolation("coarse discrepancy sets need matched variable counts")
        out[j] = {
            i
            for i in range(target.n_vars)
            if _mechanism_signature(scm, i) != _mechanism_signature(target, i)
        }
    return out
