"""Tabular estimation, circuit composition and risk evaluation.

Under log loss over the full simplex class, the empirical risk minimizer is
the empirical conditional; additive smoothing keeps it finite at unseen
conditioning rows.  Circuits compose per-position conditionals over a causal
diagram and answer P(v_last | v_prefix) by eliminating intermediate variables
in causal order, retaining only the frontier of variables still referenced
downstream.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import ContractViolation, SizeBudgetError
from .scm import Dataset, JointTable, Scm, mechanism_table

DEFAULT_ALPHA = 0.1
DEFAULT_WIDTH_BUDGET = 6

_CHUNK_ENTRIES = 20_000_000


@dataclass(frozen=True)
class Cpt:
    """Conditional probability table over an ordered scope of ``arity`` tokens."""

    vocab_size: int
    arity: int
    table: np.ndarray  # shape (V,)*arity + (V,)
    alpha: float
    flagged_rows: frozenset

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))
        expected = (self.vocab_size,) * self.arity + (self.vocab_size,)
        if self.table.shape != expected:
            raise ContractViolation(f"table shape {self.table.shape} != {expected}")

    def row_table(self) -> np.ndarray:
        return self.table.reshape(-1, self.vocab_size)

    def probs(self, xs: np.ndarray) -> np.ndarray:
        """Distribution rows for conditioning assignments ``xs`` of shape (n, arity)."""
        xs = np.asarray(xs, dtype=np.int64).reshape(-1, self.arity)
        if self.arity == 0:
            return np.broadcast_to(self.table, (xs.shape[0], self.vocab_size))
        flat = np.ravel_multi_index(tuple(xs.T), (self.vocab_size,) * self.arity)
        return self.row_table()[flat]

    def prob_of(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return np.take_along_axis(self.probs(xs), np.asarray(ys, dtype=np.int64)[:, None], axis=1)[:, 0]


@dataclass(frozen=True)
class WeightedRows:
    """Token matrix with row weights; the population-limit stand-in for a Dataset."""

    rows: np.ndarray
    weights: np.ndarray
    domain_id: object = None

    def __post_init__(self):
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.rows.shape[0] != self.weights.shape[0]:
            raise ContractViolation("one weight per row required")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def n_vars(self) -> int:
        return self.rows.shape[1]


def full_support_rows(joint: JointTable, domain_id=None) -> WeightedRows:
    """All assignments weighted by their exact probability."""
    T = joint.n_vars
    V = joint.vocab.size
    rows = np.indices((V,) * T).reshape(T, -1).T
    return WeightedRows(rows=rows, weights=joint.probs.reshape(-1), domain_id=domain_id)


@dataclass(frozen=True)
class PositionCpd:
    index: int
    parents: tuple[int, ...]
    cpt: Cpt


@dataclass(frozen=True)
class CircuitPredictor:
    """Ordered composition of Cpts answering P(v_{T-1} | v_{0:M})."""

    vocab_size: int
    prefix_len: int
    n_vars: int
    cpds: tuple[PositionCpd, ...]

    def __post_init__(self):
        indices = [c.index for c in self.cpds]
        if indices != list(range(self.prefix_len, self.n_vars)):
            raise ContractViolation("need one cpd per position prefix_len..n_vars-1, in order")
        for c in self.cpds:
            if any(p >= c.index for p in c.parents):
                raise ContractViolation(f"parents of position {c.index} must be earlier")
            if len(c.parents) != c.cpt.arity:
                raise ContractViolation(f"cpd arity mismatch at position {c.index}")


def fit_cpt(xs, ys, vocab_size: int, arity: int, alpha: float = DEFAULT_ALPHA, weights=None) -> Cpt:
    """Smoothed empirical conditional (count(x,y)+alpha) / (count(x)+alpha*V).

    Rows with zero count are flagged; with alpha=0 they are set to uniform.
    ``weights`` turns counts into weighted mass (used for population-limit fits).
    """
    xs = np.asarray(xs, dtype=np.int64).reshape(-1, arity)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.shape[0] != ys.shape[0]:
        raise ContractViolation("xs and ys length mismatch")
    if xs.size and (xs.min() < 0 or xs.max() >= vocab_size):
        raise ContractViolation("conditioning token out of range")
    if ys.size and (ys.min() < 0 or ys.max() >= vocab_size):
        raise ContractViolation("label token out of range")
    n_rows = vocab_size**arity
    counts = np.zeros((n_rows, vocab_size))
    if ys.size:
        flat = (
            np.ravel_multi_index(tuple(xs.T), (vocab_size,) * arity)
            if arity
            else np.zeros(len(ys), dtype=np.int64)
        )
        np.add.at(counts, (flat, ys), 1.0 if weights is None else np.asarray(weights, dtype=float))
    row_mass = counts.sum(axis=1)
    flagged = frozenset(int(r) for r in np.nonzero(row_mass <= 0.0)[0])
    denom = row_mass + alpha * vocab_size
    if alpha > 0:
        table = (counts + alpha) / denom[:, None]
    else:
        safe = np.where(row_mass > 0, row_mass, 1.0)
        table = counts / safe[:, None]
        if flagged:
            table[list(flagged)] = 1.0 / vocab_size
    return Cpt(
        vocab_size=vocab_size,
        arity=arity,
        table=table.reshape((vocab_size,) * arity + (vocab_size,)),
        alpha=alpha,
        flagged_rows=flagged,
    )


def pool_rows(mappings) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Concatenate projected-and-reordered rows.

    Each mapping is (data, y_index, ordered x_indices) where data is a Dataset,
    WeightedRows or plain token matrix.  All mappings must share one arity; a
    mismatch signals an inconsistent mechanism-equality structure upstream.
    Returns (xs, ys, weights); weights is None when every input is unweighted.
    """
    if not mappings:
        raise ContractViolation("no mappings to pool")
    arities = {len(m[2]) for m in mappings}
    if len(arities) != 1:
        raise ContractViolation(f"pooled mappings mix arities {sorted(arities)}")
    xs_parts, ys_parts, w_parts = [], [], []
    weighted = False
    for ds, y_idx, x_idx in mappings:
        if isinstance(ds, (Dataset, WeightedRows)):
            rows = ds.rows
        else:
            rows = np.asarray(ds, dtype=np.int64)
        cols = tuple(x_idx) + (y_idx,)
        if rows.shape[0] and max(cols) >= rows.shape[1]:
            raise ContractViolation("projection index out of range for dataset")
        xs_parts.append(rows[:, list(x_idx)])
        ys_parts.append(rows[:, y_idx])
        if isinstance(ds, WeightedRows):
            weighted = True
            w_parts.append(ds.weights)
        else:
            w_parts.append(np.ones(rows.shape[0]))
    arity = arities.pop()
    xs = np.concatenate(xs_parts).reshape(-1, arity)
    ys = np.concatenate(ys_parts)
    return xs, ys, (np.concatenate(w_parts) if weighted else None)


def _relevant_positions(circuit: CircuitPredictor) -> tuple[set, dict]:
    """Latent positions that influence the label, and who still needs each one."""
    M, target = circuit.prefix_len, circuit.n_vars - 1
    cpds = {c.index: c for c in circuit.cpds}
    relevant = {target}
    for i in range(target, M - 1, -1):
        if i in relevant:
            relevant.update(p for p in cpds[i].parents if p >= M)
    last_use = {target: target}
    for i in sorted(relevant):
        for p in cpds[i].parents:
            if p >= M:
                last_use[p] = max(last_use.get(p, i), i)
    return relevant, last_use


def _frontier_width(circuit: CircuitPredictor, relevant, last_use) -> int:
    target = circuit.n_vars - 1
    frontier: list[int] = []
    width = 1
    for cpd in circuit.cpds:
        if cpd.index not in relevant:
            continue
        frontier.append(cpd.index)
        width = max(width, len(frontier))
        frontier = [v for v in frontier if v == target or last_use.get(v, -1) > cpd.index]
    return width


def posterior(circuit: CircuitPredictor, prefix_rows, width_budget: int = DEFAULT_WIDTH_BUDGET) -> np.ndarray:
    """P(v_{T-1} | prefix) for a batch of prefixes, shape (B, V).

    Eliminates variables in causal order; positions that cannot reach the
    label contribute a factor summing to one and are skipped.
    """
    V, M = circuit.vocab_size, circuit.prefix_len
    prefix_rows = np.asarray(prefix_rows, dtype=np.int64)
    if prefix_rows.ndim == 1:
        prefix_rows = prefix_rows.reshape(1, -1)
    if prefix_rows.shape[1] != M:
        raise ContractViolation(f"prefix length {prefix_rows.shape[1]} != {M}")
    B = prefix_rows.shape[0]
    relevant, last_use = _relevant_positions(circuit)
    width = _frontier_width(circuit, relevant, last_use)
    if width > width_budget:
        raise SizeBudgetError(f"elimination frontier width {width} exceeds budget {width_budget}")
    chunk = max(1, _CHUNK_ENTRIES // (V**width))
    out = np.empty((B, V))
    for start in range(0, B, chunk):
        out[start : start + chunk] = _posterior_chunk(
            circuit, prefix_rows[start : start + chunk], relevant, last_use
        )
    return out


def _posterior_chunk(circuit, prefix, relevant, last_use):
    V, M, target = circuit.vocab_size, circuit.prefix_len, circuit.n_vars - 1
    b = prefix.shape[0]
    letters = string.ascii_lowercase
    F = np.ones((b,))
    frontier: list[int] = []
    for cpd in circuit.cpds:
        i = cpd.index
        if i not in relevant:
            continue
        pre = [p for p in cpd.parents if p < M]
        table = cpd.cpt.table
        axis_of = {v: k for k, v in enumerate(frontier)}
        in_f = "z" + "".join(letters[axis_of[v]] for v in frontier)
        in_t = "".join(letters[axis_of[p]] for p in cpd.parents if p >= M) + letters[len(frontier)]
        out_sub = in_f + letters[len(frontier)]
        spec = f"{in_f},{in_t}->{out_sub}"
        if pre:
            codes = np.zeros(b, dtype=np.int64)
            for p in pre:
                codes = codes * V + prefix[:, p]
            F_new = np.empty(F.shape + (V,))
            for code in np.unique(codes):
                digits, rem = [], int(code)
                for _ in pre:
                    digits.append(rem % V)
                    rem //= V
                digits.reverse()
                it = iter(digits)
                sel = tuple(next(it) if p < M else slice(None) for p in cpd.parents)
                mask = codes == code
                F_new[mask] = np.einsum(spec, F[mask], table[sel])
        else:
            F_new = np.einsum(spec, F, table)
        F = F_new
        frontier.append(i)
        for v in list(frontier):
            if v != target and last_use.get(v, -1) <= i:
                F = F.sum(axis=1 + frontier.index(v))
                frontier.remove(v)
    if frontier != [target]:
        raise ContractViolation("elimination did not reduce to the label variable")
    return F


def variable_eliminate(circuit: CircuitPredictor, prefix, width_budget: int = DEFAULT_WIDTH_BUDGET) -> np.ndarray:
    """Distribution over the label for one prefix."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    if prefix.shape[1] != circuit.prefix_len:
        raise ContractViolation(f"prefix length {prefix.shape[1]} != {circuit.prefix_len}")
    return posterior(circuit, prefix, width_budget)[0]


def circuit_from_scm(scm: Scm, prefix_len: int) -> CircuitPredictor:
    """Exact circuit of an operator SCM: the truth oracle for composed queries."""
    if scm.confounders:
        raise ContractViolation("exact circuits are defined for unconfounded models only")
    cpds = []
    for i in range(prefix_len, scm.n_vars):
        table = mechanism_table(scm, i)
        cpds.append(
            PositionCpd(
                index=i,
                parents=scm.diagram.parents[i],
                cpt=Cpt(scm.vocab.size, len(scm.diagram.parents[i]), table, 0.0, frozenset()),
            )
        )
    return CircuitPredictor(scm.vocab.size, prefix_len, scm.n_vars, tuple(cpds))


@dataclass(frozen=True)
class RiskReport:
    nll: float
    bayes_nll: float
    excess: float
    kl: float
    stderr: float | None = None


def nll_risk(predictor, eval_rows) -> float:
    """Mean negative log-likelihood over rows.

    For a Cpt, ``eval_rows`` is an (xs, ys) pair; for a circuit, a full token
    matrix whose first prefix_len columns condition and whose last column is
    the label.
    """
    if isinstance(predictor, Cpt):
        xs, ys = eval_rows
        p = predictor.prob_of(np.asarray(xs), np.asarray(ys))
    elif isinstance(predictor, CircuitPredictor):
        rows = eval_rows.rows if isinstance(eval_rows, Dataset) else np.asarray(eval_rows)
        p = _circuit_row_probs(predictor, rows)
    else:
        raise ContractViolation(f"unsupported predictor type {type(predictor)!r}")
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(p)))


def _circuit_row_probs(circuit: CircuitPredictor, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    prefixes = rows[:, : circuit.prefix_len]
    uniq, inv = np.unique(prefixes, axis=0, return_inverse=True)
    dists = posterior(circuit, uniq)
    return dists[inv, rows[:, circuit.n_vars - 1]]


def true_risk(predictor, joint: JointTable, target_index: int, given_indices) -> RiskReport:
    """Exact expected NLL under the joint, with the excess = KL decomposition."""
    from .scm import exact_conditional

    given_indices = tuple(given_indices)
    truth = exact_conditional(joint, target_index, given_indices)
    weights = joint.marginal(given_indices).reshape(-1)
    truth_rows = truth.row_table()
    if isinstance(predictor, Cpt):
        if predictor.arity != len(given_indices):
            raise ContractViolation("predictor scope incompatible with query")
        pred_rows = predictor.row_table()
    elif isinstance(predictor, CircuitPredictor):
        V = predictor.vocab_size
        grid = np.indices((V,) * predictor.prefix_len).reshape(predictor.prefix_len, -1).T
        pred_rows = posterior(predictor, grid)
    else:
        raise ContractViolation(f"unsupported predictor type {type(predictor)!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        nll = float(weights @ (-xlogy(truth_rows, pred_rows)).sum(axis=1))
        bayes = float(weights @ (-xlogy(truth_rows, truth_rows)).sum(axis=1))
        ratio = np.divide(truth_rows, pred_rows, out=np.ones_like(truth_rows), where=truth_rows > 0)
        kl = float(weights @ xlogy(truth_rows, ratio).sum(axis=1))
    return RiskReport(nll=nll, bayes_nll=bayes, excess=nll - bayes, kl=kl)


def mc_true_risk(predictor: CircuitPredictor, scm: Scm, n_eval: int = 100_000, seed: int = 987654321) -> RiskReport:
    """Monte Carlo risk against the exact mechanism circuit, with standard error.

    Used when V**T exceeds the dense-joint budget.  The Bayes term is computed
    row-wise from the exact circuit, so excess and kl coincide by construction.
    """
    from .scm import sample_dataset

    rows = sample_dataset(scm, n_eval, seed).rows
    truth = circuit_from_scm(scm, predictor.prefix_len)
    p_pred = _circuit_row_probs(predictor, rows)
    p_true = _circuit_row_probs(truth, rows)
    with np.errstate(divide="ignore"):
        diff = np.log(p_true) - np.log(p_pred)
    nll = float(np.mean(-np.log(p_pred)))
    bayes = float(np.mean(-np.log(p_true)))
    se = float(np.std(diff, ddof=1) / np.sqrt(len(diff)))
    return RiskReport(nll=nll, bayes_nll=bayes, excess=nll - bayes, kl=float(np.mean(diff)), stderr=se)
