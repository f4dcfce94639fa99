"""Inference-time de-biasing: prior shift, decision rules, corpus-level RBA.

Score layouts (per example):

* ``plain_N``        -- ``(N,)`` class activations
* ``joint_ND``       -- ``(N, D)`` activations over (class, domain) cells
* ``per_domain_DxN`` -- ``(D, N)`` activations, one class head per domain

Probabilities, when not supplied, are the softmax over the layout's event
space: all N*D cells for ``joint_ND``, each domain's N classes separately for
``per_domain_DxN``.  Ties are broken towards the lowest index everywhere.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .nncore import softmax

log = logging.getLogger(__name__)

PLAIN, JOINT, PER_DOMAIN = "plain_N", "joint_ND", "per_domain_DxN"
LAYOUTS = (PLAIN, JOINT, PER_DOMAIN)

PRIOR_FLOOR = 1e-6

RULES = (
    "argmax",
    "sum_joint_train",
    "max_joint_shifted",
    "sum_joint_shifted",
    "known_domain",
    "max_conditional",
    "domain_weighted_conditional",
    "sum_activations",
)
RBA_RULES = ("rba_train", "rba_shifted")


class IncompatibleRule(ValueError):
    """The decision rule cannot be applied to this score layout."""


@dataclass
class ScoreTable:
    ids: np.ndarray
    layout: str
    scores: np.ndarray
    probs: np.ndarray = None
    y_true: np.ndarray = None
    d_true: np.ndarray = None
    domain_probs: np.ndarray = None

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        self.scores = np.asarray(self.scores, dtype=float)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        want = 2 if self.layout == PLAIN else 3
        if self.scores.ndim != want or len(self.scores) != len(self.ids):
            raise ValueError(f"{self.layout} scores need shape (n, ...) with {want} axes, got {self.scores.shape}")
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=float)
            if self.probs.shape != self.scores.shape:
                raise ValueError("probs must match the score shape")
            mass = self.probs.sum(axis=self._event_axes())
            if np.any(self.probs < 0) or np.any(np.abs(mass - 1) > 1e-9):
                raise ValueError("probability rows must be nonnegative and sum to 1")
        for name in ("y_true", "d_true"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.int64))

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self):
        return self.scores.shape[-1] if self.layout in (PLAIN, PER_DOMAIN) else self.scores.shape[1]

    @property
    def n_domains(self):
        if self.layout == PLAIN:
            return None
        return self.scores.shape[2] if self.layout == JOINT else self.scores.shape[1]

    def _event_axes(self):
        return {PLAIN: (1,), JOINT: (1, 2), PER_DOMAIN: (2,)}[self.layout]

    def probabilities(self):
        if self.probs is not None:
            return self.probs
        if self.layout == JOINT:
            n = len(self)
            return softmax(self.scores.reshape(n, -1)).reshape(self.scores.shape)
        return softmax(self.scores, axis=-1)


# ---------------------------------------------------------------- prior shift

def smooth_prior(p_tr, floor=PRIOR_FLOOR):
    p = np.asarray(p_tr, dtype=float)
    if np.any(p < 0):
        raise ValueError("prior has negative entries")
    p = np.maximum(p, floor)
    return p / p.sum()


def _normalize_rows(p, axes):
    return p / p.sum(axis=axes, keepdims=True)


def prior_shift(posteriors, p_tr, p_te=None):
    """Re-weight joint posteriors ``P_tr(y,d|x)`` to a new cell prior.

    ``posteriors`` has shape ``(n, N, D)``.  With ``p_te`` omitted the target
    prior is uniform, so each row becomes ``P_tr(y,d|x) / P_tr(y,d)``
    renormalized.  ``p_tr`` must already be free of zero cells (see
    ``smooth_prior``).
    """
    post = np.asarray(posteriors, dtype=float)
    p_tr = np.asarray(p_tr, dtype=float)
    if np.any(p_tr <= 0):
        raise ValueError("training prior has zero cells; smooth it first (smooth_prior / prior floor)")
    ratio = 1.0 / p_tr if p_te is None else np.asarray(p_te, dtype=float) / p_tr
    return _normalize_rows(post * ratio, (1, 2))


def shift_conditional(cond, p_tr):
    """Per-domain analog: ``P(y|d,x) / P_tr(y|d)`` renormalized over y.  cond: (n, D, N)."""
    p_tr = np.asarray(p_tr, dtype=float)
    if np.any(p_tr <= 0):
        raise ValueError("training prior has zero cells; smooth it first (smooth_prior / prior floor)")
    p_y_given_d = (p_tr / p_tr.sum(axis=0, keepdims=True)).T  # (D, N)
    return _normalize_rows(np.asarray(cond, dtype=float) / p_y_given_d, (2,))


# ---------------------------------------------------------------- decision rules

def _argmax(v):
    # numpy argmax already returns the first maximal index
    return np.argmax(v, axis=-1)


def compatible(layout, rule, has_prior=True, has_domains=True, has_domain_probs=False):
    try:
        check_rule(layout, rule, has_prior, has_domains, has_domain_probs)
    except IncompatibleRule:
        return False
    return True


def check_rule(layout, rule, has_prior, has_domains, has_domain_probs):
    if rule not in RULES and rule not in RBA_RULES:
        raise IncompatibleRule(f"unknown rule {rule!r}")
    if rule == "argmax":
        if layout != PLAIN:
            raise IncompatibleRule("argmax applies to plain N-way scores")
        return
    if rule in RBA_RULES:
        if layout != JOINT:
            raise IncompatibleRule("RBA runs on joint (class, domain) scores")
        if rule == "rba_shifted" and not has_prior:
            raise IncompatibleRule("rba_shifted needs a training prior")
        return
    if rule in ("sum_joint_train", "max_joint_shifted", "sum_joint_shifted"):
        if layout != JOINT:
            raise IncompatibleRule(f"{rule} needs joint (class, domain) scores")
        if rule != "sum_joint_train" and not has_prior:
            raise IncompatibleRule(f"{rule} needs a training prior")
        return
    if rule == "known_domain":
        if layout == PLAIN:
            raise IncompatibleRule("known_domain needs domain-resolved scores")
        if not has_domains:
            raise IncompatibleRule("known_domain needs the test-time domain of every example")
        return
    if rule in ("max_conditional", "domain_weighted_conditional", "sum_activations"):
        if layout != PER_DOMAIN:
            raise IncompatibleRule(f"{rule} needs per-domain heads")
        if rule == "domain_weighted_conditional" and not has_domain_probs:
            raise IncompatibleRule("domain_weighted_conditional needs a P(d|x) estimate")


def decide(table: ScoreTable, rule, prior=None):
    """Class predictions for every row of ``table`` under ``rule``.

    ``prior`` is the (N, D) training cell prior; it is smoothed here.  For
    per-domain layouts a prior turns the conditional rules into their
    prior-shifted versions (``P(y|d,x) / P_tr(y|d)``).
    """
    check_rule(table.layout, rule, prior is not None, table.d_true is not None, table.domain_probs is not None)
    if rule in RBA_RULES:
        raise IncompatibleRule("RBA is corpus-level; call rba_solve")
    p = None if prior is None else smooth_prior(prior)
    probs = table.probabilities()

    if rule == "argmax":
        return _argmax(_normalize_rows(probs, (1,)))
    if rule == "sum_activations":
        return _argmax(table.scores.sum(axis=1))

    if table.layout == JOINT:
        joint = _normalize_rows(probs, (1, 2))
        if rule == "sum_joint_train":
            return _argmax(joint.sum(axis=2))
        if rule == "known_domain":
            src = joint if p is None else prior_shift(joint, p)
            return _argmax(src[np.arange(len(table)), :, table.d_true])
        shifted = prior_shift(joint, p)
        if rule == "max_joint_shifted":
            return _argmax(shifted.max(axis=2))
        return _argmax(shifted.sum(axis=2))

    cond = _normalize_rows(probs, (2,))
    if p is not None:
        cond = shift_conditional(cond, p)
    if rule == "known_domain":
        return _argmax(cond[np.arange(len(table)), table.d_true])
    if rule == "max_conditional":
        return _argmax(cond.max(axis=1))
    # domain_weighted_conditional
    w = np.asarray(table.domain_probs, dtype=float)
    w = w / w.sum(axis=1, keepdims=True)
    return _argmax((cond * w[:, :, None]).sum(axis=1))


# ---------------------------------------------------------------- RBA

@dataclass
class RbaConfig:
    target_bias: float = 0.0
    epsilon: float = 0.05
    step_size: float = 1.0
    max_iters: int = 500
    tolerance: float = 1e-9
    node_budget: int = 200_000
    # exact polish only for corpora up to this size
    polish_max_examples: int = 200

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.target_bias <= 0.5:
            raise ValueError("target_bias must lie in [0, 0.5]")


@dataclass
class RbaResult:
    predictions: np.ndarray
    domains: np.ndarray
    objective: float
    feasible: bool
    violation: float
    certified: bool
    iterations: int
    duals: np.ndarray


class RbaProblem:
    """Per-class domain-ratio constraints over one corpus.

    Each example picks one option (a class, or a (class, domain) cell when
    domains are free).  For every class ``c`` with ``n_c`` predictions of
    which ``m_c`` fall in domain 0, the ratio ``m_c / n_c`` must lie within
    ``epsilon`` of ``0.5 + target_bias``, written linearly as

        m_c - (r + eps) n_c <= 0     and     (r - eps) n_c - m_c <= 0

    (classes that are never predicted satisfy both).
    """

    def __init__(self, log_scores, n_classes, known_domains=None, target_ratio=0.5, epsilon=0.05):
        ls = np.asarray(log_scores, dtype=float)
        self.n_classes = n_classes
        self.r, self.eps = target_ratio, epsilon
        if known_domains is not None:
            # options are classes; the domain is fixed per example
            self.scores = ls
            self.opt_class = np.arange(n_classes)
            dom = np.asarray(known_domains, dtype=np.int64)
            self.opt_dom0 = np.broadcast_to((dom == 0)[:, None], ls.shape).astype(float)
        else:
            # options are (class, domain) cells in row-major order
            n, n_c, n_d = ls.shape
            self.scores = ls.reshape(n, n_c * n_d)
            self.opt_class = np.repeat(np.arange(n_c), n_d)
            self.opt_dom0 = np.broadcast_to(np.tile(np.arange(n_d) == 0, n_c)[None, :], self.scores.shape).astype(float)
        self.known = known_domains
        n, k = self.scores.shape
        self.n = n
        # constraint coefficients per (example, option): shape (n, k, C, 2)
        hi = self.opt_dom0 - (self.r + self.eps)
        lo = (self.r - self.eps) - self.opt_dom0
        onehot = np.eye(n_classes)[self.opt_class]  # (k, C)
        self.coef = np.stack([hi[:, :, None] * onehot[None], lo[:, :, None] * onehot[None]], axis=-1)

    def constraints(self, choice):
        """Constraint values (C, 2); feasible iff all <= 0."""
        return self.coef[np.arange(self.n), choice].sum(axis=0)

    def violation(self, choice):
        return float(np.maximum(self.constraints(choice), 0.0).sum())

    def objective(self, choice):
        return float(self.scores[np.arange(self.n), choice].sum())

    def adjusted(self, duals):
        return self.scores - np.einsum("nkcs,cs->nk", self.coef, duals)

    def decode(self, choice):
        cls = self.opt_class[choice]
        if self.known is not None:
            dom = np.asarray(self.known, dtype=np.int64)
        else:
            n_d = len(self.opt_class) // self.n_classes
            dom = choice % n_d
        return cls, dom


def rba_scores(table: ScoreTable, prior=None):
    """Log joint scores for RBA: training posteriors, or prior-shifted ones if ``prior``."""
    if table.layout != JOINT:
        raise IncompatibleRule("RBA runs on joint (class, domain) scores")
    joint = _normalize_rows(table.probabilities(), (1, 2))
    if prior is not None:
        joint = prior_shift(joint, smooth_prior(prior))
    return joint


def _log(x):
    return np.log(np.maximum(x, 1e-300))


def rba_solve(table: ScoreTable, config: RbaConfig = None, known_domains=None, prior=None) -> RbaResult:
    """Corpus-level constrained inference by Lagrangian relaxation.

    Dual ascent: every iteration re-scores each example with its
    multiplier-adjusted log score, takes the per-example argmax, and moves the
    multipliers along the normalized constraint subgradient (projected onto
    >= 0, step length ``step_size / sqrt(t)`` in log-score units).  The best
    feasible assignment seen is kept; if the best dual bound does not certify
    it optimal, a depth-first branch and bound over examples (bounded by the
    same Lagrangian) closes the gap within ``node_budget`` nodes.

    With ``known_domains`` only class assignments change and the score of a
    class is ``log sum_d P(y,d|x)``; otherwise each example picks a (class,
    domain) cell by ``log P(y,d|x)``.
    """
    config = config or RbaConfig()
    joint = rba_scores(table, prior)
    if known_domains is not None:
        ls = _log(joint.sum(axis=2))
    else:
        ls = _log(joint)
    problem = RbaProblem(ls, table.n_classes, known_domains, 0.5 + config.target_bias, config.epsilon)
    return _solve(problem, config)


def _solve(problem: RbaProblem, config: RbaConfig) -> RbaResult:
    n_c = problem.n_classes
    duals = np.zeros((n_c, 2))
    best_dual = (np.inf, duals.copy())
    best_feasible = None  # (objective, choice)
    least_violating = None  # (violation, -objective, choice)
    tol = config.tolerance
    it = 0
    for it in range(1, config.max_iters + 1):
        adj = problem.adjusted(duals)
        choice = _argmax(adj)
        bound = float(adj.max(axis=1).sum())
        if bound < best_dual[0]:
            best_dual = (bound, duals.copy())
        cons = problem.constraints(choice)
        viol = float(np.maximum(cons, 0).sum())
        obj = problem.objective(choice)
        if viol <= tol:
            if best_feasible is None or obj > best_feasible[0]:
                best_feasible = (obj, choice.copy())
        elif least_violating is None or (viol, -obj) < least_violating[:2]:
            least_violating = (viol, -obj, choice.copy())
        if best_feasible is not None and best_feasible[0] >= best_dual[0] - 1e-9:
            break
        if viol <= tol and np.all(duals * cons >= -1e-12):
            # complementary slackness holds: this assignment is optimal
            best_dual = (min(best_dual[0], obj), duals.copy())
            break
        # normalized subgradient: step length is in log-score units whatever the corpus size
        g = np.where((cons > 0) | (duals > 0), cons, 0.0)
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        duals = np.maximum(duals + config.step_size / np.sqrt(it) * g / norm, 0.0)

    if best_feasible is None and least_violating is not None:
        repaired = _repair(problem, least_violating[2], config)
        if repaired is not None:
            best_feasible = (problem.objective(repaired), repaired)
    certified = best_feasible is not None and best_feasible[0] >= best_dual[0] - 1e-9
    if not certified and problem.n <= config.polish_max_examples:
        found, exhausted = _branch_and_bound(problem, best_dual[1], best_feasible, config)
        if found is not None:
            best_feasible = found
        certified = exhausted and best_feasible is not None
        if exhausted and best_feasible is None:
            log.warning("RBA: constraints are infeasible at epsilon=%g", config.epsilon)

    if best_feasible is not None:
        obj, choice = best_feasible
        feasible = True
    else:
        if least_violating is None:
            choice = _argmax(problem.scores)
        else:
            choice = least_violating[2]
        obj = problem.objective(choice)
        feasible = False
        log.warning("RBA: no feasible assignment found; returning the least-violating one")
    cls, dom = problem.decode(choice)
    return RbaResult(cls, dom, obj, feasible, problem.violation(choice), certified, it, best_dual[1])


def _repair(problem: RbaProblem, choice, config, max_moves=None):
    """Greedy single-example moves toward feasibility.

    Each move takes the reassignment with the least score loss per unit of
    violation removed.  Returns a feasible choice or None.
    """
    choice = choice.copy()
    rows = np.arange(problem.n)
    for _ in range(max_moves or min(2 * problem.n, 2000)):
        cons = problem.constraints(choice)
        viol = np.maximum(cons, 0).sum()
        if viol <= config.tolerance:
            return choice
        delta = problem.coef - problem.coef[rows, choice][:, None]
        gain = viol - np.maximum(cons + delta, 0).sum(axis=(2, 3))
        loss = problem.scores[rows, choice][:, None] - problem.scores
        rate = np.where(gain > 1e-12, loss / np.maximum(gain, 1e-12), np.inf)
        i, k = np.unravel_index(np.argmin(rate), rate.shape)
        if not np.isfinite(rate[i, k]):
            return None
        choice[i] = k
    return None


def _branch_and_bound(problem: RbaProblem, duals, incumbent, config):
    """Exact search over assignments with Lagrangian upper bounds.

    Returns ``(best, exhausted)``; ``best`` is ``(objective, choice)`` or None.
    """
    adj = problem.adjusted(duals)
    coef_flat = problem.coef.reshape(problem.n, problem.coef.shape[1], -1)
    tol = config.tolerance
    # examples whose best two options are closest are decided first
    if adj.shape[1] > 1:
        top2 = -np.sort(-adj, axis=1)[:, :2]
        order = np.argsort(top2[:, 0] - top2[:, 1], kind="stable")
    else:
        order = np.arange(problem.n)
    best_adj_tail = np.concatenate([np.cumsum(adj.max(axis=1)[order][::-1])[::-1], [0.0]])
    # per-constraint lower bound on what the remaining examples can add
    lo_tail = np.zeros((problem.n + 1, coef_flat.shape[2]))
    for pos in range(problem.n - 1, -1, -1):
        lo_tail[pos] = lo_tail[pos + 1] + coef_flat[order[pos]].min(axis=0)
    option_order = np.argsort(-adj, axis=1, kind="stable")

    best = incumbent
    best_obj = -np.inf if incumbent is None else incumbent[0]
    choice = np.zeros(problem.n, dtype=np.int64)
    n_opts = adj.shape[1]
    nodes = 0
    exhausted = True
    stack = []  # frames: [pos, obj, adj_sum, cons, next option rank]

    def enter(pos, obj, adj_sum, cons):
        nonlocal best, best_obj, nodes, exhausted
        nodes += 1
        if nodes > config.node_budget:
            exhausted = False
            return
        if pos == problem.n:
            if np.all(cons <= tol) and obj > best_obj + 1e-12:
                best_obj = obj
                best = (obj, choice.copy())
            return
        # any feasible completion scores at most its Lagrangian value
        if adj_sum + best_adj_tail[pos] <= best_obj + 1e-12:
            return
        if np.any(cons + lo_tail[pos] > tol):
            return
        stack.append([pos, obj, adj_sum, cons, 0])

    enter(0, 0.0, 0.0, np.zeros(coef_flat.shape[2]))
    while stack and exhausted:
        frame = stack[-1]
        pos, obj, adj_sum, cons, rank = frame
        if rank == n_opts:
            stack.pop()
            continue
        frame[4] += 1
        i = order[pos]
        k = option_order[i, rank]
        choice[i] = k
        enter(pos + 1, obj + problem.scores[i, k], adj_sum + adj[i, k], cons + coef_flat[i, k])
    return best, exhausted


def rba_bruteforce(table: ScoreTable, config: RbaConfig = None, known_domains=None, prior=None,
                   max_examples=16, chunk=1 << 18):
    """Exhaustive oracle: best-objective feasible assignment, or None if infeasible.

    Assignments are enumerated in lexicographic order (first example most
    significant) and ties go to the first one.  Returns ``(predictions,
    domains, objective)``.
    """
    config = config or RbaConfig()
    n = len(table)
    if n > max_examples:
        raise ValueError(f"instance too large for enumeration ({n} > {max_examples} examples)")
    joint = rba_scores(table, prior)
    n_c = table.n_classes
    r, eps = 0.5 + config.target_bias, config.epsilon
    if known_domains is not None:
        opt_scores = _log(joint.sum(axis=2))  # (n, C)
        opt_cls = np.broadcast_to(np.arange(n_c), opt_scores.shape)
        opt_dom = np.broadcast_to(np.asarray(known_domains, dtype=np.int64)[:, None], opt_scores.shape)
    else:
        n_d = joint.shape[2]
        opt_scores = _log(joint).reshape(n, -1)  # (n, C*D), cell = c*D + d
        opt_cls = np.broadcast_to(np.repeat(np.arange(n_c), n_d), opt_scores.shape)
        opt_dom = np.broadcast_to(np.tile(np.arange(n_d), n_c), opt_scores.shape)
    k = opt_scores.shape[1]
    total = float(k) ** n
    if total > 5e7:
        raise ValueError(f"instance too large for enumeration ({total:.0f} assignments)")
    total = int(total)
    radix = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    rows = np.arange(n)
    best_obj, best_code = -np.inf, None
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (codes[:, None] // radix[None, :]) % k  # (m, n)
        obj = opt_scores[rows, digits].sum(axis=1)
        cls = opt_cls[rows, digits]
        dom0 = opt_dom[rows, digits] == 0
        n_pred = np.zeros((len(codes), n_c))
        n_dom0 = np.zeros((len(codes), n_c))
        for c in range(n_c):
            hit = cls == c
            n_pred[:, c] = hit.sum(axis=1)
            n_dom0[:, c] = (hit & dom0).sum(axis=1)
        ok = np.all(n_dom0 - (r + eps) * n_pred <= config.tolerance, axis=1) & \
            np.all((r - eps) * n_pred - n_dom0 <= config.tolerance, axis=1)
        if ok.any():
            masked = np.where(ok, obj, -np.inf)
            j = int(np.argmax(masked))
            if masked[j] > best_obj:
                best_obj, best_code = float(masked[j]), int(codes[j])
    if best_code is None:
        return None
    digits = (best_code // radix) % k
    return opt_cls[rows, digits].copy(), opt_dom[rows, digits].copy(), float(opt_scores[rows, digits].sum())


# ---------------------------------------------------------------- score files

def write_scores(table: ScoreTable, path):
    """One JSON record per line: id, y_true, d_true, layout, scores."""
    with open(path, "w") as f:
        for i in range(len(table)):
            rec = {
                "id": int(table.ids[i]),
                "y_true": None if table.y_true is None else int(table.y_true[i]),
                "d_true": None if table.d_true is None else int(table.d_true[i]),
                "layout": table.layout,
                "scores": table.scores[i].tolist(),
            }
            if table.domain_probs is not None:
                rec["domain_probs"] = table.domain_probs[i].tolist()
            f.write(json.dumps(rec) + "\n")


def read_scores(path) -> ScoreTable:
    recs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: {e}") from None
    if not recs:
        raise ValueError(f"{path}: no score records")
    layouts = {r["layout"] for r in recs}
    if len(layouts) != 1:
        raise ValueError(f"{path}: mixed layouts {sorted(layouts)}")

    def col(key):
        vals = [r.get(key) for r in recs]
        return None if any(v is None for v in vals) else np.array(vals)

    return ScoreTable(ids=col("id"), layout=layouts.pop(), scores=np.array([r["scores"] for r in recs], dtype=float),
                      y_true=col("y_true"), d_true=col("d_true"), domain_probs=col("domain_probs"))
