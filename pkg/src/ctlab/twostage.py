"""Exact tabular two-stage adaptation: penalized-likelihood pretraining on the
sources, then target fine-tuning with per-position transport indicators.

Pretraining minimizes, over parent assignments A and a clustering of
position-domain pairs into mechanism classes,

    sum_j sum_i CE_j(v_i | pa_i; class table)  +  lambda_d * d  +  lambda_a * ||A||_1

where CE is the in-sample cross-entropy of the pooled class fit in per-domain
mean units.  The likelihood decomposes per node once classes are fixed, so the
search runs in two phases: per-node parent selection, then agglomerative
class merging accepted whenever the pooled fit costs less than the class
penalty it saves.  An exhaustive subset-DP optimizer over the same objective
serves as the test oracle at small sizes.

Fine-tuning freezes the class tables, picks (parent tuple, class) per target
position by fine-tuning NLL, learns recency-capped target-only fallbacks, and
mixes the two per position with a transport indicator chosen on held-out
rows.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import ContractViolation
from .inference import (
    DEFAULT_ALPHA,
    CircuitPredictor,
    Cpt,
    PositionCpd,
    WeightedRows,
)
from .scm import TARGET_DOMAIN, Dataset

MERGE_TOL = 1e-9


def _as_weighted(data) -> tuple[np.ndarray, np.ndarray, float | None]:
    """Rows, mean-unit weights, and the raw count scale (None for populations)."""
    if isinstance(data, Dataset):
        n = data.n
        if n == 0:
            raise ContractViolation("cannot pretrain on an empty dataset")
        return data.rows, np.full(n, 1.0 / n), float(n)
    if isinstance(data, WeightedRows):
        return data.rows, data.weights, None
    raise ContractViolation(f"unsupported pretraining input {type(data)!r}")


def _count_table(rows, weights, cols: tuple[int, ...], y: int, V: int) -> np.ndarray:
    """Weighted joint mass over (cols..., y), flattened to (V^arity, V)."""
    arity = len(cols)
    out = np.zeros((V**arity, V))
    flat = (
        np.ravel_multi_index(tuple(rows[:, c] for c in cols), (V,) * arity)
        if arity
        else np.zeros(rows.shape[0], dtype=np.int64)
    )
    np.add.at(out, (flat, rows[:, y]), weights)
    return out


def _cross_entropy(table: np.ndarray) -> float:
    """In-sample CE of the table's own conditional fit, in mass units."""
    mass = table.sum(axis=1)
    return float(xlogy(mass, mass).sum() - xlogy(table, table).sum())


def _swap_axes(table: np.ndarray, arity: int, V: int) -> np.ndarray:
    if arity != 2:
        return table
    return table.reshape(V, V, V).transpose(1, 0, 2).reshape(V * V, V)


def _parent_set_options(i: int, max_parents: int) -> list:
    opts: list[tuple[int, ...]] = [()]
    for c in range(1, min(max_parents, i) + 1):
        opts += [tuple(s) for s in itertools.combinations(range(i), c)]
    return opts


@dataclass(frozen=True)
class PretrainResult:
    vocab_size: int
    n_classes: int
    class_of: dict  # (position, domain) -> class id
    parent_tuple: dict  # (position, domain) -> ordered parents, class-aligned
    class_cpts: tuple  # one smoothed Cpt per class
    parent_matrices: dict  # domain -> bool (T, T) with row i marking parents
    objective: float
    lambda_d: float
    lambda_a: float

    def class_arity(self, cls: int) -> int:
        return self.class_cpts[cls].arity


def pretrain_tabular(domain_data: list, vocab_size: int, lambda_: float = 1e-3,
                     max_parents: int = 2, alpha: float = DEFAULT_ALPHA,
                     lambda_d: float | None = None,
                     lambda_a: float | None = None) -> PretrainResult:
    """Two-phase minimizer of the penalized pretraining objective.

    ``domain_data`` holds one Dataset or WeightedRows per source domain,
    labeled 1..K.  Population inputs are fitted unsmoothed; empirical inputs
    get ``alpha`` smoothing on the returned class tables (the search itself
    always scores plug-in fits).
    """
    lambda_d = lambda_ if lambda_d is None else lambda_d
    lambda_a = lambda_ if lambda_a is None else lambda_a
    V = vocab_size
    prepared = [_as_weighted(d) for d in domain_data]
    scales = {s for _, _, s in prepared}
    if None in scales and len(scales) > 1:
        raise ContractViolation("cannot mix population and empirical pretraining inputs")

    # phase 1: per-node parent sets, scored on the node's own fit
    nodes = [(i, j) for j, (rows, _, _) in enumerate(prepared, start=1) for i in range(rows.shape[1])]
    chosen: dict = {}
    for i, j in nodes:
        rows, w, scale = prepared[j - 1]
        best = None
        for pa in _parent_set_options(i, max_parents):
            table = _count_table(rows, w, pa, i, V)
            val = _cross_entropy(table) + lambda_a * len(pa)
            key = (val, len(pa), pa)
            if best is None or key < best[0]:
                best = (key, pa, table)
        chosen[(i, j)] = (best[1], best[2])

    # phase 2: greedy agglomerative merging of equal-arity classes
    population = None in scales

    def make_class(i, j):
        pa, table = chosen[(i, j)]
        scale = prepared[j - 1][2]
        return {
            "members": [(i, j)],
            "orients": {(i, j): False},
            "arity": len(pa),
            "table": table,
            "counts": table if population else table * scale,
            "ce": _cross_entropy(table),
        }

    classes = [make_class(i, j) for (i, j) in nodes]
    while True:
        best_merge = None
        for a in range(len(classes)):
            for b in range(a + 1, len(classes)):
                ca, cb = classes[a], classes[b]
                if ca["arity"] != cb["arity"]:
                    continue
                for flip in (False, True) if ca["arity"] == 2 else (False,):
                    tb = _swap_axes(cb["table"], cb["arity"], V) if flip else cb["table"]
                    gain = _cross_entropy(ca["table"] + tb) - ca["ce"] - cb["ce"] - lambda_d
                    key = (gain, a, b, flip)
                    if best_merge is None or key < best_merge:
                        best_merge = key
        if best_merge is None or best_merge[0] > MERGE_TOL:
            break
        gain, a, b, flip = best_merge
        ca, cb = classes[a], classes[b]
        ca["table"] = ca["table"] + (_swap_axes(cb["table"], cb["arity"], V) if flip else cb["table"])
        ca["counts"] = ca["counts"] + (_swap_axes(cb["counts"], cb["arity"], V) if flip else cb["counts"])
        ca["ce"] = _cross_entropy(ca["table"])
        ca["members"] += cb["members"]
        for m, o in cb["orients"].items():
            ca["orients"][m] = o != flip
        classes.pop(b)

    classes.sort(key=lambda c: min(nodes.index(m) for m in c["members"]))
    class_of, parent_tuple = {}, {}
    for cls_id, c in enumerate(classes):
        for m in c["members"]:
            class_of[m] = cls_id
            pa = chosen[m][0]
            parent_tuple[m] = tuple(reversed(pa)) if c["orients"][m] and len(pa) == 2 else pa

    cpts = [
        _table_to_cpt(c["counts"], c["arity"], V, 0.0 if population else alpha)
        for c in classes
    ]

    matrices = {}
    for j, (rows, _, _) in enumerate(prepared, start=1):
        T = rows.shape[1]
        A = np.zeros((T, T), dtype=bool)
        for i in range(T):
            A[i, list(chosen[(i, j)][0])] = True
        matrices[j] = A
    objective = (
        sum(c["ce"] for c in classes)
        + lambda_d * len(classes)
        + lambda_a * sum(len(chosen[m][0]) for m in nodes)
    )
    return PretrainResult(
        vocab_size=V,
        n_classes=len(classes),
        class_of=class_of,
        parent_tuple=parent_tuple,
        class_cpts=tuple(cpts),
        parent_matrices=matrices,
        objective=objective,
        lambda_d=lambda_d,
        lambda_a=lambda_a,
    )


def _table_to_cpt(table: np.ndarray, arity: int, V: int, alpha: float) -> Cpt:
    mass = table.sum(axis=1)
    flagged = frozenset(int(r) for r in np.nonzero(mass <= 0.0)[0])
    if alpha > 0:
        probs = (table + alpha) / (mass + alpha * V)[:, None]
    else:
        safe = np.where(mass > 0, mass, 1.0)
        probs = table / safe[:, None]
        if flagged:
            probs[list(flagged)] = 1.0 / V
    return Cpt(V, arity, probs.reshape((V,) * arity + (V,)), alpha, flagged)


@dataclass(frozen=True)
class ExhaustiveResult:
    objective: float
    parent_sets: dict
    partition: tuple


def exhaustive_pretrain(domain_data: list, vocab_size: int, lambda_: float = 1e-3,
                        max_parents: int = 2, lambda_d: float | None = None,
                        lambda_a: float | None = None) -> ExhaustiveResult:
    """Global minimizer of the pretraining objective by subset dynamic
    programming; the independent oracle for the two-phase search.

    Enumerates, per subset of position-domain pairs, the cheapest pooled fit
    over all equal-arity parent assignments and orientations, then optimizes
    the partition with a standard over-subsets DP.  Practical to about a dozen
    pairs.
    """
    lambda_d = lambda_ if lambda_d is None else lambda_d
    lambda_a = lambda_ if lambda_a is None else lambda_a
    V = vocab_size
    prepared = [_as_weighted(d) for d in domain_data]
    nodes = [(i, j) for j, (rows, _, _) in enumerate(prepared, start=1) for i in range(rows.shape[1])]
    n = len(nodes)
    if n > 14:
        raise ContractViolation(f"exhaustive search supports at most 14 pairs, got {n}")

    # per node, per arity: (ordered tuple, mass table); orientations are explicit
    options: list[dict] = []
    for i, j in nodes:
        rows, w, _ = prepared[j - 1]
        by_arity: dict = {}
        for pa_set in _parent_set_options(i, max_parents):
            for pa in set(itertools.permutations(pa_set)):
                by_arity.setdefault(len(pa), []).append(
                    (pa, _count_table(rows, w, pa, i, V))
                )
        options.append(by_arity)

    best_pool: dict = {}
    member_lists: dict = {}
    for mask in range(1, 1 << n):
        members = [k for k in range(n) if mask >> k & 1]
        member_lists[mask] = members
        arities = set(options[members[0]])
        for k in members[1:]:
            arities &= set(options[k])
        best = (math.inf, None)
        for c in sorted(arities):
            for combo in itertools.product(*(options[k][c] for k in members)):
                table = combo[0][1].copy()
                for _, t in combo[1:]:
                    table += t
                val = _cross_entropy(table) + lambda_a * c * len(members)
                if val < best[0]:
                    best = (val, tuple(cb[0] for cb in combo))
        best_pool[mask] = best

    INF = math.inf
    f = [0.0] + [INF] * ((1 << n) - 1)
    back: dict = {}
    for mask in range(1, 1 << n):
        low = mask & -mask
        sub = mask
        while sub:
            if sub & low and best_pool[sub][1] is not None:
                cand = best_pool[sub][0] + lambda_d + f[mask ^ sub]
                if cand < f[mask]:
                    f[mask] = cand
                    back[mask] = sub
            sub = (sub - 1) & mask
    full = (1 << n) - 1
    parent_sets: dict = {}
    partition = [0] * n
    mask, cls = full, 0
    while mask:
        sub = back[mask]
        for k, pa in zip(member_lists[sub], best_pool[sub][1]):
            parent_sets[nodes[k]] = pa
            partition[k] = cls
        cls += 1
        mask ^= sub
    # renumber by first occurrence for a canonical restricted-growth string
    seen: dict = {}
    rgs = []
    for c in partition:
        seen.setdefault(c, len(seen))
        rgs.append(seen[c])
    return ExhaustiveResult(objective=f[full], parent_sets=parent_sets, partition=tuple(rgs))


@dataclass(frozen=True)
class DataSplit:
    tr: Dataset
    ft: Dataset
    te: Dataset


def split_target_three(target: Dataset, seed: int,
                       fractions: tuple[float, float] = (1 / 3, 1 / 3)) -> DataSplit:
    """Disjoint shuffle split into training, fine-tuning and held-out parts."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(target.n)
    a = int(target.n * fractions[0])
    b = a + int(target.n * fractions[1])
    mk = lambda idx: Dataset(domain_id=TARGET_DOMAIN, rows=target.rows[idx], seed=seed)
    return DataSplit(tr=mk(perm[:a]), ft=mk(perm[a:b]), te=mk(perm[b:]))


@dataclass(frozen=True)
class FinetuneResult:
    parent_matrix: np.ndarray  # bool (T, T)
    class_of: tuple  # class id per position, -1 when no class fits
    parent_tuples: tuple  # ordered parents per position


def finetune_target_structure(pretrained: PretrainResult, ft: Dataset,
                              max_parents: int = 2) -> FinetuneResult:
    """Per position, the (ordered parent tuple, mechanism class) pair whose
    frozen class table best explains the fine-tuning rows."""
    V = pretrained.vocab_size
    rows = ft.rows
    T = ft.n_vars
    class_of, tuples = [], []
    A = np.zeros((T, T), dtype=bool)
    for i in range(T):
        best = None
        for cls, cpt in enumerate(pretrained.class_cpts):
            c = cpt.arity
            if c > min(max_parents, i):
                continue
            for pa in itertools.permutations(range(i), c):
                if rows.shape[0]:
                    p = cpt.prob_of(rows[:, list(pa)], rows[:, i])
                    with np.errstate(divide="ignore"):
                        nll = float(np.mean(-np.log(p)))
                else:
                    nll = math.inf
                key = (nll, c, pa, cls)
                if best is None or key < best:
                    best = key
        if best is None:
            class_of.append(-1)
            tuples.append(())
            continue
        _, _, pa, cls = best
        class_of.append(cls)
        tuples.append(pa)
        A[i, list(pa)] = True
    return FinetuneResult(parent_matrix=A, class_of=tuple(class_of), parent_tuples=tuple(tuples))


@dataclass(frozen=True)
class TargetFallbacks:
    scopes: tuple  # ordered scope per position
    cpts: tuple


def fit_target_only_fallbacks(tr: Dataset, vocab_size: int, cap: int = 2,
                              alpha: float = DEFAULT_ALPHA) -> TargetFallbacks:
    """Smoothed per-position conditionals on the most recent ``cap`` tokens.

    Full-prefix conditioning is tabularly infeasible for long sequences, so
    the scope is truncated by recency.
    """
    from .inference import fit_cpt

    scopes, cpts = [], []
    for i in range(tr.n_vars):
        scope = tuple(range(max(0, i - cap), i))
        scopes.append(scope)
        cpts.append(
            fit_cpt(tr.rows[:, list(scope)], tr.rows[:, i], vocab_size, len(scope), alpha=alpha)
        )
    return TargetFallbacks(scopes=tuple(scopes), cpts=tuple(cpts))


def _mixture_nll(s: float, psi: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(s * psi + (1.0 - s) * mu)))


def learn_transport_indicators(pretrained: PretrainResult, finetuned: FinetuneResult,
                               fallbacks: TargetFallbacks, te: Dataset) -> np.ndarray:
    """Per-position mixing weight between the transported class table and the
    target-only fallback, minimizing held-out NLL by ternary search.

    The objective is convex in the weight; identical predictors tie-break to
    full transport.
    """
    rows = te.rows
    T = te.n_vars
    s = np.zeros(T)
    for i in range(T):
        cls = finetuned.class_of[i]
        if cls < 0 or rows.shape[0] == 0:
            continue
        psi = pretrained.class_cpts[cls].prob_of(rows[:, list(finetuned.parent_tuples[i])], rows[:, i])
        mu = fallbacks.cpts[i].prob_of(rows[:, list(fallbacks.scopes[i])], rows[:, i])
        lo, hi = 0.0, 1.0
        while hi - lo > 1e-4:
            m1 = lo + (hi - lo) / 3
            m2 = hi - (hi - lo) / 3
            if _mixture_nll(m1, psi, mu) <= _mixture_nll(m2, psi, mu):
                hi = m2
            else:
                lo = m1
        opt = (lo + hi) / 2
        if _mixture_nll(1.0, psi, mu) <= _mixture_nll(opt, psi, mu) + 1e-10:
            opt = 1.0
        elif _mixture_nll(0.0, psi, mu) <= _mixture_nll(opt, psi, mu) + 1e-10:
            opt = 0.0
        s[i] = opt
    return s


def assemble_final_predictor(pretrained: PretrainResult, finetuned: FinetuneResult,
                             fallbacks: TargetFallbacks, s: np.ndarray,
                             prefix_len: int, n_vars: int) -> CircuitPredictor:
    """Compose the per-position mixtures over the union of both scopes and
    return the marginalizing circuit."""
    V = pretrained.vocab_size
    cpds = []
    for i in range(prefix_len, n_vars):
        cls = finetuned.class_of[i]
        fb_scope = fallbacks.scopes[i]
        psi_scope = finetuned.parent_tuples[i] if cls >= 0 else ()
        union = tuple(sorted(set(psi_scope) | set(fb_scope)))
        pos = {p: k for k, p in enumerate(union)}
        grid = np.indices((V,) * len(union))
        mu_t = fallbacks.cpts[i].table[tuple(grid[pos[p]] for p in fb_scope)]
        if cls >= 0 and s[i] > 0.0:
            psi_t = pretrained.class_cpts[cls].table[tuple(grid[pos[p]] for p in psi_scope)]
            mixed = s[i] * psi_t + (1.0 - s[i]) * mu_t
        else:
            mixed = mu_t
        if len(union) == 0:
            mixed = mixed.reshape((V,))
        cpds.append(
            PositionCpd(
                index=i,
                parents=union,
                cpt=Cpt(V, len(union), mixed, 0.0, frozenset()),
            )
        )
    return CircuitPredictor(vocab_size=V, prefix_len=prefix_len, n_vars=n_vars, cpds=tuple(cpds))


@dataclass(frozen=True)
class TwoStageResult:
    pretrained: PretrainResult
    finetuned: FinetuneResult
    fallbacks: TargetFallbacks
    indicators: np.ndarray
    predictor: CircuitPredictor
    split: DataSplit


def two_stage_adapt(source_data: list, target: Dataset, prefix_len: int,
                    vocab_size: int, lambda_: float = 1e-3, max_parents: int = 2,
                    alpha: float = DEFAULT_ALPHA, split_seed: int = 0,
                    cap: int = 2) -> TwoStageResult:
    """Full pipeline: pretrain, three-way split, fine-tune, learn indicators,
    assemble the final marginalizing predictor."""
    pretrained = pretrain_tabular(
        source_data, vocab_size, lambda_=lambda_, max_parents=max_parents, alpha=alpha
    )
    split = split_target_three(target, split_seed)
    finetuned = finetune_target_structure(pretrained, split.ft, max_parents=max_parents)
    fallbacks = fit_target_only_fallbacks(split.tr, vocab_size, cap=cap, alpha=alpha)
    s = learn_transport_indicators(pretrained, finetuned, fallbacks, split.te)
    predictor = assemble_final_predictor(
        pretrained, finetuned, fallbacks, s, prefix_len, target.n_vars
    )
    return TwoStageResult(
        pretrained=pretrained,
        finetuned=finetuned,
        fallbacks=fallbacks,
        indicators=s,
        predictor=predictor,
        split=split,
    )
