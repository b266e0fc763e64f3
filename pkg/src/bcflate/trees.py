"""Regression trees: structure, evaluation, prior draws and grow/prune moves.

A tree is stored as parallel node arrays of fixed capacity.  ``var[k] >= 0``
marks an internal node splitting on covariate ``var[k]``; ``LEAF`` marks a
leaf and ``FREE`` an unused slot.  Slot 0 is always the root.

Continuous rules send ``x`` left iff ``x[j] < cut``.  Categorical rules carry a
non-empty bit mask of the levels that go left (``mask == 0`` therefore means a
continuous rule).  The set of values still available to covariate ``j`` at a
node is recovered by walking its ancestors, so every rule drawn is
non-vacuous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF = -1
FREE = -2
DEFAULT_CAPACITY = 128
MIN_WIDTH = 1e-9

MOVE_REJECTED = 0
MOVE_GROW = 1
MOVE_PRUNE = 2


@dataclass(frozen=True)
class TreePrior:
    """Branching-process prior: a depth-d node splits w.p. alpha * (1 + d) ** -beta."""

    alpha: float = 0.95
    beta: float = 2.0
    max_depth: int = 12

    def split_prob(self, depth: int) -> float:
        return self.alpha * (1.0 + depth) ** (-self.beta) if depth < self.max_depth else 0.0


@dataclass(frozen=True)
class Covariates:
    """Covariate layout seen by the tree kernels."""

    is_cat: np.ndarray
    n_levels: np.ndarray

    @classmethod
    def continuous(cls, p: int) -> "Covariates":
        return cls(np.zeros(p, dtype=np.bool_), np.zeros(p, dtype=np.int64))

    @classmethod
    def of(cls, ds) -> "Covariates":
        return cls(ds.is_cat, ds.n_levels)

    @property
    def p(self) -> int:
        return len(self.is_cat)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _goes_left(xj, cut, mask):
    if mask == 0:
        return xj < cut
    return ((mask >> np.int64(xj)) & 1) == 1


@njit(cache=True)
def _popcount(m):
    c = 0
    while m:
        m &= m - 1
        c += 1
    return c


@njit(cache=True)
def eval_tree(var, cut, mask, left, right, value, x):
    k = 0
    while var[k] >= 0:
        if _goes_left(x[var[k]], cut[k], mask[k]):
            k = left[k]
        else:
            k = right[k]
    return value[k]


@njit(cache=True)
def find_leaf(var, cut, mask, left, right, x):
    k = 0
    while var[k] >= 0:
        if _goes_left(x[var[k]], cut[k], mask[k]):
            k = left[k]
        else:
            k = right[k]
    return k


@njit(cache=True)
def predict_ensemble(var, cut, mask, left, right, value, n_trees, X, out):
    n = X.shape[0]
    for i in range(n):
        out[i] = 0.0
    for m in range(n_trees):
        for i in range(n):
            out[i] += eval_tree(var[m], cut[m], mask[m], left[m], right[m], value[m], X[i])


@njit(cache=True)
def assign_leaves(var, cut, mask, left, right, X, leaf_of):
    for i in range(X.shape[0]):
        leaf_of[i] = find_leaf(var, cut, mask, left, right, X[i])


@njit(cache=True)
def node_available(var, cut, mask, left, parent, node, j, is_cat_j, n_lev_j):
    """Available interval [lo, hi) and level mask for covariate j at a node."""
    lo = 0.0
    hi = 1.0
    amask = np.int64(0)
    if is_cat_j:
        amask = (np.int64(1) << np.int64(n_lev_j)) - np.int64(1)
    child = node
    par = parent[node]
    while par >= 0:
        if var[par] == j:
            if left[par] == child:
                if is_cat_j:
                    amask &= mask[par]
                elif cut[par] < hi:
                    hi = cut[par]
            else:
                if is_cat_j:
                    amask &= ~mask[par]
                elif cut[par] > lo:
                    lo = cut[par]
        child = par
        par = parent[par]
    return lo, hi, amask


@njit(cache=True)
def _valid(lo, hi, amask, is_cat_j):
    if is_cat_j:
        return _popcount(amask) >= 2
    return hi - lo > MIN_WIDTH


@njit(cache=True)
def has_valid_rule(var, cut, mask, left, parent, node, is_cat, n_levels):
    for j in range(is_cat.shape[0]):
        lo, hi, am = node_available(var, cut, mask, left, parent, node, j, is_cat[j], n_levels[j])
        if _valid(lo, hi, am, is_cat[j]):
            return True
    return False


@njit(cache=True)
def split_prob(var, cut, mask, left, parent, depth, node, is_cat, n_levels, alpha, beta, max_depth):
    """Prior probability that ``node`` is internal (zero when no rule is possible)."""
    d = depth[node]
    if d >= max_depth:
        return 0.0
    if not has_valid_rule(var, cut, mask, left, parent, node, is_cat, n_levels):
        return 0.0
    return alpha * (1.0 + d) ** (-beta)


@njit(cache=True)
def draw_rule(var, cut, mask, left, parent, node, logtheta, is_cat, n_levels, rng):
    """Draw (j, cut, mask) from the rule prior at ``node``; j = -1 if none is valid."""
    p = is_cat.shape[0]
    ok = np.zeros(p, dtype=np.bool_)
    top = -np.inf
    for j in range(p):
        lo, hi, am = node_available(var, cut, mask, left, parent, node, j, is_cat[j], n_levels[j])
        if _valid(lo, hi, am, is_cat[j]):
            ok[j] = True
            if logtheta[j] > top:
                top = logtheta[j]
    if top == -np.inf:
        # every valid covariate has zero weight or none is valid
        anyok = False
        for j in range(p):
            anyok = anyok or ok[j]
        if not anyok:
            return -1, 0.0, np.int64(0)
    total = 0.0
    wts = np.zeros(p)
    for j in range(p):
        if ok[j]:
            wts[j] = math.exp(logtheta[j] - top) if top > -np.inf else 1.0
            total += wts[j]
    u = rng.random() * total
    jj = -1
    acc = 0.0
    for j in range(p):
        if ok[j]:
            jj = j
            acc += wts[j]
            if u < acc:
                break
    lo, hi, am = node_available(var, cut, mask, left, parent, node, jj, is_cat[jj], n_levels[jj])
    if is_cat[jj]:
        while True:
            m = np.int64(0)
            bits = am
            b = 0
            while bits:
                if bits & 1:
                    if rng.random() < 0.5:
                        m |= np.int64(1) << np.int64(b)
                bits >>= 1
                b += 1
            if m != 0 and m != am:
                return jj, 0.0, m
    while True:
        c = lo + (hi - lo) * rng.random()
        if c > lo and c < hi:
            return jj, c, np.int64(0)


@njit(cache=True)
def rule_log_prob(var, cut, mask, left, parent, node, j, logtheta, is_cat, n_levels):
    """Log prior density of the rule currently stored at ``node`` (variable ``j``)."""
    p = is_cat.shape[0]
    top = -np.inf
    for k in range(p):
        lo, hi, am = node_available(var, cut, mask, left, parent, node, k, is_cat[k], n_levels[k])
        if _valid(lo, hi, am, is_cat[k]) and logtheta[k] > top:
            top = logtheta[k]
    total = 0.0
    for k in range(p):
        lo, hi, am = node_available(var, cut, mask, left, parent, node, k, is_cat[k], n_levels[k])
        if _valid(lo, hi, am, is_cat[k]):
            total += math.exp(logtheta[k] - top)
    lo, hi, am = node_available(var, cut, mask, left, parent, node, j, is_cat[j], n_levels[j])
    lp = logtheta[j] - top - math.log(total)
    if is_cat[j]:
        return lp - math.log(2.0 ** _popcount(am) - 2.0)
    return lp - math.log(hi - lo)


@njit(cache=True)
def leaf_log_marginal(sww, swr, m0, s2):
    """Log marginal likelihood of one leaf, jump integrated against N(m0, s2).

    Relative to the jump-free term exp(-sum(r^2)/2), which cancels in ratios.
    """
    prec = 1.0 / s2 + sww
    mhat = (m0 / s2 + swr) / prec
    return 0.5 * math.log(1.0 / (s2 * prec)) + 0.5 * (mhat * mhat * prec - m0 * m0 / s2)


@njit(cache=True)
def count_growable(var, cut, mask, left, parent, depth, is_cat, n_levels, max_depth):
    cnt = 0
    for k in range(var.shape[0]):
        if var[k] == LEAF and depth[k] < max_depth:
            if has_valid_rule(var, cut, mask, left, parent, k, is_cat, n_levels):
                cnt += 1
    return cnt


@njit(cache=True)
def count_prunable(var, left, right):
    cnt = 0
    for k in range(var.shape[0]):
        if var[k] >= 0 and var[left[k]] == LEAF and var[right[k]] == LEAF:
            cnt += 1
    return cnt


@njit(cache=True)
def _kth_growable(var, cut, mask, left, parent, depth, is_cat, n_levels, max_depth, target):
    cnt = 0
    for k in range(var.shape[0]):
        if var[k] == LEAF and depth[k] < max_depth:
            if has_valid_rule(var, cut, mask, left, parent, k, is_cat, n_levels):
                if cnt == target:
                    return k
                cnt += 1
    return -1


@njit(cache=True)
def _kth_prunable(var, left, right, target):
    cnt = 0
    for k in range(var.shape[0]):
        if var[k] >= 0 and var[left[k]] == LEAF and var[right[k]] == LEAF:
            if cnt == target:
                return k
            cnt += 1
    return -1


@njit(cache=True)
def _free_pair(var):
    a = -1
    for k in range(1, var.shape[0]):
        if var[k] == FREE:
            if a < 0:
                a = k
            else:
                return a, k
    return -1, -1


@njit(cache=True)
def apply_split(var, cut, mask, left, right, parent, depth, value, node, j, c, m, kl, kr):
    var[node] = j
    cut[node] = c
    mask[node] = m
    left[node] = kl
    right[node] = kr
    for k in (kl, kr):
        var[k] = LEAF
        cut[k] = 0.0
        mask[k] = 0
        left[k] = -1
        right[k] = -1
        parent[k] = node
        depth[k] = depth[node] + 1
        value[k] = value[node]


@njit(cache=True)
def collapse_node(var, cut, mask, left, right, node):
    var[left[node]] = FREE
    var[right[node]] = FREE
    var[node] = LEAF
    cut[node] = 0.0
    mask[node] = 0
    left[node] = -1
    right[node] = -1


@njit(cache=True)
def reset_tree(var, cut, mask, left, right, parent, depth, value, v0):
    for k in range(var.shape[0]):
        var[k] = FREE
        cut[k] = 0.0
        mask[k] = 0
        left[k] = -1
        right[k] = -1
        parent[k] = -1
        depth[k] = 0
        value[k] = 0.0
    var[0] = LEAF
    value[0] = v0


@njit(cache=True)
def mh_step(var, cut, mask, left, right, parent, depth, value, leaf_of, X, r, w,
            logtheta, is_cat, n_levels, alpha, beta, max_depth, m0, s2, rng):
    """One grow-or-prune Metropolis-Hastings move on the tree structure.

    ``r`` is the partial residual for this tree and ``w`` the per-subject
    weight multiplying the tree's output.  Returns MOVE_GROW / MOVE_PRUNE when
    the proposal is accepted and MOVE_REJECTED otherwise.
    """
    n = X.shape[0]
    if rng.random() < 0.5:
        ng = count_growable(var, cut, mask, left, parent, depth, is_cat, n_levels, max_depth)
        if ng == 0:
            return MOVE_REJECTED
        pick = int(rng.random() * ng)
        if pick >= ng:
            pick = ng - 1
        node = _kth_growable(var, cut, mask, left, parent, depth, is_cat, n_levels, max_depth, pick)
        kl, kr = _free_pair(var)
        if kl < 0:
            return MOVE_REJECTED
        j, c, m = draw_rule(var, cut, mask, left, parent, node, logtheta, is_cat, n_levels, rng)
        if j < 0:
            return MOVE_REJECTED
        d = depth[node]
        p_node = alpha * (1.0 + d) ** (-beta)
        apply_split(var, cut, mask, left, right, parent, depth, value, node, j, c, m, kl, kr)
        pl = split_prob(var, cut, mask, left, parent, depth, kl, is_cat, n_levels, alpha, beta, max_depth)
        pr = split_prob(var, cut, mask, left, parent, depth, kr, is_cat, n_levels, alpha, beta, max_depth)
        npr = count_prunable(var, left, right)
        swwl = 0.0
        swrl = 0.0
        swwr = 0.0
        swrr = 0.0
        for i in range(n):
            if leaf_of[i] == node:
                wi = w[i]
                if wi != 0.0:
                    if _goes_left(X[i, j], c, m):
                        swwl += wi * wi
                        swrl += wi * r[i]
                    else:
                        swwr += wi * wi
                        swrr += wi * r[i]
        log_a = (math.log(p_node) + math.log1p(-pl) + math.log1p(-pr) - math.log1p(-p_node)
                 + leaf_log_marginal(swwl, swrl, m0, s2) + leaf_log_marginal(swwr, swrr, m0, s2)
                 - leaf_log_marginal(swwl + swwr, swrl + swrr, m0, s2)
                 + math.log(ng) - math.log(npr))
        if math.log(1.0 - rng.random()) < log_a:
            for i in range(n):
                if leaf_of[i] == node:
                    leaf_of[i] = kl if _goes_left(X[i, j], c, m) else kr
            return MOVE_GROW
        collapse_node(var, cut, mask, left, right, node)
        return MOVE_REJECTED

    npr = count_prunable(var, left, right)
    if npr == 0:
        return MOVE_REJECTED
    pick = int(rng.random() * npr)
    if pick >= npr:
        pick = npr - 1
    node = _kth_prunable(var, left, right, pick)
    kl = left[node]
    kr = right[node]
    d = depth[node]
    p_node = alpha * (1.0 + d) ** (-beta)
    pl = split_prob(var, cut, mask, left, parent, depth, kl, is_cat, n_levels, alpha, beta, max_depth)
    pr = split_prob(var, cut, mask, left, parent, depth, kr, is_cat, n_levels, alpha, beta, max_depth)
    ng_after = count_growable(var, cut, mask, left, parent, depth, is_cat, n_levels, max_depth) + 1
    if pl > 0.0:
        ng_after -= 1
    if pr > 0.0:
        ng_after -= 1
    swwl = 0.0
    swrl = 0.0
    swwr = 0.0
    swrr = 0.0
    for i in range(n):
        li = leaf_of[i]
        if li == kl:
            wi = w[i]
            swwl += wi * wi
            swrl += wi * r[i]
        elif li == kr:
            wi = w[i]
            swwr += wi * wi
            swrr += wi * r[i]
    log_a = (-(math.log(p_node) + math.log1p(-pl) + math.log1p(-pr) - math.log1p(-p_node))
             + leaf_log_marginal(swwl + swwr, swrl + swrr, m0, s2)
             - leaf_log_marginal(swwl, swrl, m0, s2) - leaf_log_marginal(swwr, swrr, m0, s2)
             + math.log(npr) - math.log(ng_after))
    if math.log(1.0 - rng.random()) < log_a:
        for i in range(n):
            li = leaf_of[i]
            if li == kl or li == kr:
                leaf_of[i] = node
        collapse_node(var, cut, mask, left, right, node)
        return MOVE_PRUNE
    return MOVE_REJECTED


@njit(cache=True)
def draw_leaves(var, value, leaf_of, r, w, m0, s2, rng, sww, swr):
    """Draw every leaf jump from its conjugate normal full conditional."""
    cap = var.shape[0]
    for k in range(cap):
        sww[k] = 0.0
        swr[k] = 0.0
    for i in range(leaf_of.shape[0]):
        k = leaf_of[i]
        wi = w[i]
        sww[k] += wi * wi
        swr[k] += wi * r[i]
    for k in range(cap):
        if var[k] == LEAF:
            prec = 1.0 / s2 + sww[k]
            mhat = (m0 / s2 + swr[k]) / prec
            value[k] = mhat + rng.standard_normal() / math.sqrt(prec)


@njit(cache=True)
def sample_prior_tree(var, cut, mask, left, right, parent, depth, value, logtheta,
                      is_cat, n_levels, alpha, beta, max_depth, m0, s2, rng):
    reset_tree(var, cut, mask, left, right, parent, depth, value, 0.0)
    stack = np.empty(var.shape[0], dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    sd = math.sqrt(s2)
    while top > 0:
        top -= 1
        k = stack[top]
        ps = split_prob(var, cut, mask, left, parent, depth, k, is_cat, n_levels, alpha, beta, max_depth)
        if ps > 0.0 and rng.random() < ps:
            kl, kr = _free_pair(var)
            if kl >= 0:
                j, c, m = draw_rule(var, cut, mask, left, parent, k, logtheta, is_cat, n_levels, rng)
                if j >= 0:
                    apply_split(var, cut, mask, left, right, parent, depth, value, k, j, c, m, kl, kr)
                    stack[top] = kr
                    stack[top + 1] = kl
                    top += 2
                    continue
        value[k] = m0 + sd * rng.standard_normal()


# ---------------------------------------------------------------------------
# Python-facing objects


def _empty_nodes(shape):
    var = np.full(shape, FREE, dtype=np.int32)
    return dict(
        var=var,
        cut=np.zeros(shape),
        mask=np.zeros(shape, dtype=np.int64),
        left=np.full(shape, -1, dtype=np.int32),
        right=np.full(shape, -1, dtype=np.int32),
        parent=np.full(shape, -1, dtype=np.int32),
        depth=np.zeros(shape, dtype=np.int32),
        value=np.zeros(shape),
    )


NODE_FIELDS = ("var", "cut", "mask", "left", "right", "parent", "depth", "value")


class DecisionTree:
    """A single regression tree (structure plus leaf jumps)."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, value: float = 0.0, _arrays=None):
        if _arrays is None:
            _arrays = _empty_nodes(capacity)
            _arrays["var"][0] = LEAF
            _arrays["value"][0] = value
        for f in NODE_FIELDS:
            setattr(self, f, _arrays[f])

    @property
    def capacity(self) -> int:
        return self.var.shape[0]

    def arrays(self):
        return tuple(getattr(self, f) for f in NODE_FIELDS)

    def copy(self) -> "DecisionTree":
        return DecisionTree(_arrays={f: getattr(self, f).copy() for f in NODE_FIELDS})

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(eval_tree(self.var, self.cut, self.mask, self.left, self.right, self.value, x))

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        return np.array([self.evaluate(x) for x in X])

    def leaf_index(self, x) -> int:
        return int(find_leaf(self.var, self.cut, self.mask, self.left, self.right, np.asarray(x, dtype=float)))

    @property
    def leaves(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.var == LEAF)]

    @property
    def internal(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.var >= 0)]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.var == LEAF))

    @property
    def max_depth(self) -> int:
        return int(self.depth[self.var == LEAF].max())

    def structure_key(self):
        """Hashable pre-order description of the rules (jumps ignored)."""
        out = []

        def walk(k):
            if self.var[k] == LEAF:
                out.append(("L",))
                return
            out.append((int(self.var[k]), round(float(self.cut[k]), 12), int(self.mask[k])))
            walk(self.left[k])
            walk(self.right[k])

        walk(0)
        return tuple(out)

    def to_json(self) -> list[dict]:
        """Pre-order node list: splits carry their rule, leaves their jump."""
        out = []

        def walk(k):
            if self.var[k] == LEAF:
                out.append({"kind": "leaf", "value": float(self.value[k])})
                return
            node = {"kind": "split", "var": int(self.var[k])}
            if self.mask[k]:
                node["levels_left"] = [b for b in range(63) if (int(self.mask[k]) >> b) & 1]
            else:
                node["cut"] = float(self.cut[k])
            out.append(node)
            walk(self.left[k])
            walk(self.right[k])

        walk(0)
        return out

    @classmethod
    def from_json(cls, nodes: list[dict], capacity: int = DEFAULT_CAPACITY) -> "DecisionTree":
        tree = cls(capacity)
        it = iter(nodes)
        nxt = [1]

        def build(k, par, d):
            node = next(it)
            tree.parent[k] = par
            tree.depth[k] = d
            if node["kind"] == "leaf":
                tree.var[k] = LEAF
                tree.value[k] = node["value"]
                return
            kl, kr = nxt[0], nxt[0] + 1
            nxt[0] += 2
            if kr >= capacity:
                raise ValueError("tree exceeds node capacity")
            tree.var[k] = node["var"]
            if "levels_left" in node:
                tree.mask[k] = sum(1 << b for b in node["levels_left"])
            else:
                tree.cut[k] = node["cut"]
            tree.left[k], tree.right[k] = kl, kr
            build(kl, k, d + 1)
            build(kr, k, d + 1)

        build(0, -1, 0)
        return tree

    def __repr__(self):
        return f"DecisionTree(leaves={self.n_leaves}, depth={self.max_depth})"


def evaluate(tree: DecisionTree, x) -> float:
    return tree.evaluate(x)


def _theta_to_log(theta):
    theta = np.asarray(theta, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(theta)


def tree_log_prior(tree: DecisionTree, theta, cov: Covariates, prior: TreePrior = TreePrior()) -> float:
    """Log prior probability (density for continuous cuts) of a tree structure."""
    lt = _theta_to_log(theta)
    a = tree.arrays()
    var, cut, mask, left, right, parent, depth, value = a
    total = 0.0
    for k in np.flatnonzero(var != FREE):
        ps = split_prob(var, cut, mask, left, parent, depth, k, cov.is_cat, cov.n_levels,
                        prior.alpha, prior.beta, prior.max_depth)
        if var[k] == LEAF:
            total += math.log1p(-ps)
        else:
            total += math.log(ps) + rule_log_prob(var, cut, mask, left, parent, k, var[k], lt,
                                                  cov.is_cat, cov.n_levels)
    return total


def sample_tree_from_prior(theta, cov: Covariates, rng: np.random.Generator,
                           prior: TreePrior = TreePrior(), m0: float = 0.0, s2: float = 1.0,
                           capacity: int = DEFAULT_CAPACITY) -> DecisionTree:
    tree = DecisionTree(capacity)
    sample_prior_tree(*tree.arrays(), _theta_to_log(theta), cov.is_cat, cov.n_levels,
                      prior.alpha, prior.beta, prior.max_depth, m0, s2, rng)
    return tree


def grow_proposal(tree: DecisionTree, theta, cov: Covariates, rng: np.random.Generator,
                  prior: TreePrior = TreePrior()):
    """Propose growing a uniformly chosen growable leaf.

    Returns ``(new_tree, log_q_ratio)`` with ``log q(T | T') - log q(T' | T)``
    (move counts and rule density), or ``(None, -inf)`` if no leaf can grow.
    """
    lt = _theta_to_log(theta)
    new = tree.copy()
    var, cut, mask, left, right, parent, depth, value = new.arrays()
    ng = count_growable(var, cut, mask, left, parent, depth, cov.is_cat, cov.n_levels, prior.max_depth)
    kl, kr = _free_pair(var)
    if ng == 0 or kl < 0:
        return None, -math.inf
    node = _kth_growable(var, cut, mask, left, parent, depth, cov.is_cat, cov.n_levels,
                         prior.max_depth, int(rng.integers(ng)))
    j, c, m = draw_rule(var, cut, mask, left, parent, node, lt, cov.is_cat, cov.n_levels, rng)
    apply_split(var, cut, mask, left, right, parent, depth, value, node, j, c, m, kl, kr)
    log_rule = rule_log_prob(var, cut, mask, left, parent, node, j, lt, cov.is_cat, cov.n_levels)
    npr = count_prunable(var, left, right)
    return new, math.log(ng) - log_rule - math.log(npr)


def prune_proposal(tree: DecisionTree, theta, cov: Covariates, rng: np.random.Generator,
                   prior: TreePrior = TreePrior(), node: int | None = None):
    """Propose collapsing a uniformly chosen node whose children are both leaves."""
    lt = _theta_to_log(theta)
    new = tree.copy()
    var, cut, mask, left, right, parent, depth, value = new.arrays()
    npr = count_prunable(var, left, right)
    if npr == 0:
        return None, -math.inf
    if node is None:
        node = _kth_prunable(var, left, right, int(rng.integers(npr)))
    log_rule = rule_log_prob(var, cut, mask, left, parent, node, var[node], lt, cov.is_cat, cov.n_levels)
    collapse_node(var, cut, mask, left, right, node)
    ng = count_growable(var, cut, mask, left, parent, depth, cov.is_cat, cov.n_levels, prior.max_depth)
    return new, math.log(npr) + log_rule - math.log(ng)


class TreeEnsemble:
    """M trees sharing a leaf prior N(beta0/M, sigma^2/M) and DART splitting weights."""

    def __init__(self, n_trees: int, p: int, beta0: float = 0.0, sigma: float = 1.0,
                 capacity: int = DEFAULT_CAPACITY, label: str = ""):
        self.label = label
        self.n_trees = int(n_trees)
        self.beta0 = float(beta0)
        self.sigma = float(sigma)
        nodes = _empty_nodes((self.n_trees, capacity))
        for f in NODE_FIELDS:
            setattr(self, f, nodes[f])
        self.var[:, 0] = LEAF
        self.value[:, 0] = self.leaf_mean
        self.logtheta = np.full(p, -math.log(p)) if p else np.zeros(0)
        # prior median of xi / (xi + p) ~ Beta(0.5, 1) is 1/4
        self.xi = np.array([p / 3.0 if p else 1.0])

    @property
    def p(self) -> int:
        return self.logtheta.shape[0]

    @property
    def capacity(self) -> int:
        return self.var.shape[1]

    @property
    def leaf_mean(self) -> float:
        return self.beta0 / self.n_trees

    @property
    def leaf_var(self) -> float:
        return self.sigma ** 2 / self.n_trees

    @property
    def theta(self) -> np.ndarray:
        return np.exp(self.logtheta)

    def arrays(self):
        return tuple(getattr(self, f) for f in NODE_FIELDS)

    def tree(self, m: int) -> DecisionTree:
        return DecisionTree(_arrays={f: getattr(self, f)[m].copy() for f in NODE_FIELDS})

    def set_tree(self, m: int, tree: DecisionTree) -> None:
        for f in NODE_FIELDS:
            getattr(self, f)[m] = getattr(tree, f)

    def copy(self) -> "TreeEnsemble":
        new = TreeEnsemble.__new__(TreeEnsemble)
        new.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return new

    def evaluate(self, x) -> float:
        return float(self.predict(np.atleast_2d(x))[0])

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        out = np.empty(X.shape[0])
        predict_ensemble(self.var, self.cut, self.mask, self.left, self.right, self.value,
                         self.n_trees, X, out)
        return out

    def split_counts(self) -> np.ndarray:
        v = self.var[self.var >= 0]
        return np.bincount(v, minlength=self.p)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "beta0": self.beta0,
            "sigma": self.sigma,
            "theta": self.theta.tolist(),
            "xi": float(self.xi[0]),
            "trees": [self.tree(m).to_json() for m in range(self.n_trees)],
        }


def evaluate_ensemble(ens: TreeEnsemble, x) -> float:
    return ens.evaluate(x)
