"""Named model fixtures and random model generators.

Positions are 0-based throughout; external files label columns v1..vT.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .scm import (
    CausalDiagram,
    Confounder,
    DomainCollection,
    NoisyOperator,
    Scm,
    TableMechanism,
    Vocabulary,
)


def _operator_scm(vocab_size: int, spec: list[tuple[str, tuple[int, ...]]], noise_p: float) -> Scm:
    """Build an SCM from (kind, parents) pairs; unif roots carry no noise parameter."""
    vocab = Vocabulary(vocab_size)
    parents = tuple(pa for _, pa in spec)
    mechanisms = tuple(
        NoisyOperator(kind, 0.0 if kind == "unif" else noise_p) for kind, _ in spec
    )
    return Scm(vocab=vocab, diagram=CausalDiagram(len(spec), parents), mechanisms=mechanisms)


def build_example_2_1(noise_p: float = 0.1) -> DomainCollection:
    """Two domains over (x1, x2, x3, y), vocabulary 10.

    The label is a noisy subtraction of its second parent from its first; the
    mechanism is shared across domains while the parent list changes from
    (x1, x2) to (x3, x2).  The default corruption rate 0.1 reproduces the
    0.91 / 0.01x9 label-noise multinomial.
    """
    source = _operator_scm(
        10,
        [("unif", ()), ("unif", ()), ("unif", ()), ("subtract", (0, 1))],
        noise_p,
    )
    target = _operator_scm(
        10,
        [("unif", ()), ("unif", ()), ("unif", ()), ("subtract", (2, 1))],
        noise_p,
    )
    return DomainCollection(sources=(source,), target=target)


def build_gcd_chain(vocab_size: int, noise_p: float) -> Scm:
    """Layered subtraction-Euclid chain over 3V+2 variables.

    Two uniform roots, then V rounds of (max, min, difference) over the pair
    produced by the previous round.  With zero noise the final difference node
    equals gcd of the roots, with gcd(a, 0) = a and gcd(0, 0) = 0.
    """
    if vocab_size < 3:
        raise ContractViolation("gcd chain needs vocabulary size >= 3")
    spec: list[tuple[str, tuple[int, ...]]] = [("unif", ()), ("unif", ())]
    pair = (1, 0)
    for _ in range(vocab_size):
        max_idx = len(spec)
        spec.append(("max", pair))
        spec.append(("min", pair))
        spec.append(("subtract", (max_idx, max_idx + 1)))
        pair = (max_idx + 2, max_idx + 1)  # next round consumes (difference, min)
    return _operator_scm(vocab_size, spec, noise_p)


FIG_E_SOURCE = [
    ("unif", ()),
    ("times2", (0,)),
    ("min", (0, 1)),
    ("sum", (0, 1)),
    ("min", (0, 3)),
    ("subtract", (0, 4)),
    ("min", (0, 4)),
    ("sum", (3, 4)),
    ("min", (3, 5)),
    ("sum", (2, 3)),
]

FIG_E_TARGET = [
    ("unif", ()),
    ("times2", (0,)),
    ("subtract", (0, 1)),
    ("sum", (1, 2)),
    ("subtract", (0, 3)),
    ("sum", (0, 4)),
    ("subtract", (3, 4)),
    ("sum", (1, 5)),
    ("sum", (3, 6)),
    ("min", (6, 8)),
]


def build_fig_e_pair(noise_p: float = 0.1) -> DomainCollection:
    """The ten-variable source/target pair; every target operator kind also
    appears in the source, so the length-10 query is fully transportable."""
    return DomainCollection(
        sources=(_operator_scm(10, FIG_E_SOURCE, noise_p),),
        target=_operator_scm(10, FIG_E_TARGET, noise_p),
    )


def _bow_scm(p_ux: float, y_flavor: str, p_uy: float = 0.05, p_uxy: float = 0.95) -> Scm:
    """Two binary variables x -> y confounded by a shared exogenous bit w.

    x = u_x XOR w; y = (x XOR w) XOR u_y for flavor 'xor', (x XOR w) OR u_y
    for flavor 'or'.  Per-variable exogenous bits are folded into the tables.
    """
    px1 = {0: p_ux, 1: 1.0 - p_ux}  # P(x=1 | w)
    x_table = np.array([[1.0 - px1[w], px1[w]] for w in (0, 1)])  # axes (w, x)
    y_table = np.zeros((2, 2, 2))  # axes (x, w, y)
    for x in (0, 1):
        for w in (0, 1):
            base = x ^ w
            if y_flavor == "xor":
                p1 = (1.0 - p_uy) if base == 1 else p_uy
            elif y_flavor == "or":
                p1 = 1.0 if base == 1 else p_uy
            else:
                raise ContractViolation(f"unknown bow label flavor {y_flavor!r}")
            y_table[x, w] = (1.0 - p1, p1)
    return Scm(
        vocab=Vocabulary(2),
        diagram=CausalDiagram(2, ((), (0,))),
        mechanisms=(
            TableMechanism(x_table, confounder_ids=(0,)),
            TableMechanism(y_table, confounder_ids=(0,)),
        ),
        confounders=(Confounder(2, (1.0 - p_uxy, p_uxy)),),
    )


def build_bow_examples() -> DomainCollection:
    """Confounded two-variable triple: the first source shares the label side
    with the target, the second shares the covariate side."""
    m1 = _bow_scm(p_ux=0.2, y_flavor="xor")
    m2 = _bow_scm(p_ux=0.9, y_flavor="or")
    mt = _bow_scm(p_ux=0.9, y_flavor="xor")
    return DomainCollection(sources=(m1, m2), target=mt)


def bow_delta_sets() -> dict:
    return {1: frozenset({"X"}), 2: frozenset({"Y"})}


def build_t4_pair(noise_p: float = 0.1) -> DomainCollection:
    """Small four-variable pair on vocabulary 3, transportable by design."""
    source = _operator_scm(
        3,
        [("unif", ()), ("plus1", (0,)), ("sum", (0, 1)), ("minus1", (2,))],
        noise_p,
    )
    target = _operator_scm(
        3,
        [("unif", ()), ("minus1", (0,)), ("plus1", (1,)), ("sum", (1, 2))],
        noise_p,
    )
    return DomainCollection(sources=(source,), target=target)


def build_mixed_pair(noise_p: float = 0.05) -> DomainCollection:
    """Target mixing one mechanism shared with the source and one novel one.

    Position 2 of the target doubles a fresh root (no source mechanism
    matches); position 3 increments the distant first root, which the
    recency-capped target-only fallback cannot see.
    """
    source = _operator_scm(
        6,
        [("unif", ()), ("unif", ()), ("copy", (0,)), ("plus1", (1,))],
        noise_p,
    )
    target = _operator_scm(
        6,
        [("unif", ()), ("unif", ()), ("times2", (1,)), ("plus1", (0,))],
        noise_p,
    )
    return DomainCollection(sources=(source,), target=target)


_KINDS_BY_ARITY = {
    1: ("copy", "plus1", "minus1", "times2"),
    2: ("sum", "min", "max", "subtract", "mult", "mod"),
}


def random_scm(vocab_size: int, n_vars: int, seed: int, max_parents: int = 2,
               noise_range: tuple[float, float] = (0.02, 0.2)) -> Scm:
    """Random diagram and operators; roots are uniform, all nodes noisy."""
    rng = np.random.default_rng(seed)
    spec: list[tuple[str, tuple[int, ...]]] = []
    for i in range(n_vars):
        arity = int(rng.integers(0, min(i, max_parents) + 1)) if i else 0
        if arity == 0:
            spec.append(("unif", ()))
            continue
        pa = tuple(int(p) for p in rng.choice(i, size=arity, replace=False))
        kind = str(rng.choice(_KINDS_BY_ARITY[arity]))
        spec.append((kind, pa))
    p = float(rng.uniform(*noise_range))
    return _operator_scm(vocab_size, spec, p)


def build_random_bow(seed: int):
    """Random confounded triple with the canonical sharing pattern.

    The label-side table and the shared-bit law are common to source 1 and the
    target; the covariate-side table is common to source 2 and the target.
    Returns (domains, delta_sets).
    """
    rng = np.random.default_rng(seed)

    def rand_x_table():
        p = rng.uniform(0.05, 0.95, size=2)
        return np.array([[1 - p[0], p[0]], [1 - p[1], p[1]]])

    def rand_y_table():
        p = rng.uniform(0.05, 0.95, size=(2, 2))
        t = np.zeros((2, 2, 2))
        for x in (0, 1):
            for w in (0, 1):
                t[x, w] = (1 - p[x, w], p[x, w])
        return t

    q = float(rng.uniform(0.1, 0.9))
    conf = Confounder(2, (1.0 - q, q))
    shared_y = rand_y_table()
    shared_x = rand_x_table()

    def make(x_table, y_table):
        return Scm(
            vocab=Vocabulary(2),
            diagram=CausalDiagram(2, ((), (0,))),
            mechanisms=(
                TableMechanism(x_table, confounder_ids=(0,)),
                TableMechanism(y_table, confounder_ids=(0,)),
            ),
            confounders=(conf,),
        )

    m1 = make(rand_x_table(), shared_y)
    m2 = make(shared_x, rand_y_table())
    mt = make(shared_x, shared_y)
    return DomainCollection(sources=(m1, m2), target=mt), bow_delta_sets()


FIXTURES = {
    "ex2_1": lambda **kw: build_example_2_1(**kw),
    "fig_e": lambda **kw: build_fig_e_pair(**kw),
    "bow": lambda **kw: build_bow_examples(),
    "t4": lambda **kw: build_t4_pair(**kw),
    "mixed": lambda **kw: build_mixed_pair(**kw),
}
