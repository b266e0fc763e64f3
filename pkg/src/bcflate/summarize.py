"""Summaries of effect heterogeneity: a single CART tree fit to posterior-mean
LATEs, and posterior intervals for the subgroups it defines."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import CATEGORICAL, Dataset
from .estimands import equal_tailed

TOL = 1e-12


@dataclass
class SummaryNode:
    id: int
    depth: int
    members: np.ndarray = field(repr=False)
    mean: float
    frac: float
    var: int | None = None
    var_name: str | None = None
    threshold: float | None = None       # ordered/continuous: left iff x < threshold
    left_levels: tuple[int, ...] | None = None  # unordered categorical
    left: "SummaryNode | None" = None
    right: "SummaryNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def n(self) -> int:
        return len(self.members)

    def goes_left(self, xj):
        if self.left_levels is not None:
            return np.isin(xj, self.left_levels)
        return xj < self.threshold

    def rule(self, levels=None) -> str:
        if self.left_levels is not None:
            names = [levels[k] if levels else str(k) for k in self.left_levels]
            return f"{self.var_name} in {{{', '.join(names)}}}"
        return f"{self.var_name} < {self.threshold:.6g}"


@dataclass
class SummaryTree:
    root: SummaryNode
    names: list[str]
    level_names: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def nodes(self) -> list[SummaryNode]:
        out, stack = [], [self.root]
        while stack:
            nd = stack.pop()
            out.append(nd)
            if not nd.is_leaf:
                stack.extend([nd.right, nd.left])
        return sorted(out, key=lambda nd: nd.id)

    def leaves(self) -> list[SummaryNode]:
        return [nd for nd in self.nodes() if nd.is_leaf]

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.leaves())

    def leaf_of(self, raw_X) -> np.ndarray:
        """Leaf id for each row of raw covariates."""
        raw_X = np.atleast_2d(raw_X)
        out = np.empty(raw_X.shape[0], dtype=int)
        for i, x in enumerate(raw_X):
            nd = self.root
            while not nd.is_leaf:
                nd = nd.left if nd.goes_left(x[nd.var]) else nd.right
            out[i] = nd.id
        return out

    def within_sse(self, target) -> float:
        target = np.asarray(target, dtype=float)
        return float(sum(((target[nd.members] - nd.mean) ** 2).sum() for nd in self.leaves()))

    def to_dict(self) -> dict:
        def walk(nd):
            d = {"id": nd.id, "depth": nd.depth, "n": nd.n, "mean": nd.mean, "frac": nd.frac}
            if not nd.is_leaf:
                d["split"] = {"var": nd.var_name, "var_index": nd.var}
                if nd.left_levels is not None:
                    lv = self.level_names.get(nd.var)
                    d["split"]["left_levels"] = [lv[k] if lv else k for k in nd.left_levels]
                else:
                    d["split"]["threshold"] = nd.threshold
                d["left"], d["right"] = walk(nd.left), walk(nd.right)
            return d

        return walk(self.root)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_graphviz(self, path=None) -> str:
        lines = ["digraph summary_tree {", '  node [shape=box, fontname="Helvetica"];']
        for nd in self.nodes():
            lines.append(f'  n{nd.id} [label="{nd.mean:.3f}\\n{100 * nd.frac:.0f}%"];')
        for nd in self.nodes():
            if not nd.is_leaf:
                rule = nd.rule(self.level_names.get(nd.var))
                lines.append(f'  n{nd.id} -> n{nd.left.id} [label="{rule}"];')
                lines.append(f'  n{nd.id} -> n{nd.right.id} [label="not"];')
        lines.append("}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _best_ordered_split(x, t, min_n):
    """Best threshold on an ordered column; returns (sse, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ts = x[order], t[order]
    n = len(xs)
    cs, cs2 = np.cumsum(ts), np.cumsum(ts * ts)
    tot, tot2 = cs[-1], cs2[-1]
    k = np.arange(1, n)  # left gets the first k sorted values
    ok = (xs[1:] > xs[:-1]) & (k >= min_n) & (n - k >= min_n)
    if not ok.any():
        return None
    k = k[ok]
    sl, sl2 = cs[k - 1], cs2[k - 1]
    sse = (sl2 - sl * sl / k) + ((tot2 - sl2) - (tot - sl) ** 2 / (n - k))
    best = int(np.argmin(sse))  # first minimum = lowest cut
    kk = k[best]
    return float(sse[best]), float(0.5 * (xs[kk - 1] + xs[kk]))


def _best_level_split(x, t, min_n):
    """CART split for an unordered categorical: levels sorted by mean target."""
    levels = np.unique(x)
    if len(levels) < 2:
        return None
    means = np.array([t[x == lv].mean() for lv in levels])
    ranked = levels[np.lexsort((levels, means))]
    pos = np.empty(len(x))
    for r, lv in enumerate(ranked):
        pos[x == lv] = r
    res = _best_ordered_split(pos, t, min_n)
    if res is None:
        return None
    sse, thr = res
    return sse, tuple(sorted(int(lv) for lv in ranked[: int(np.ceil(thr))]))


def fit_the_fit(posterior_means, ds: Dataset, max_depth: int = 3,
                min_leaf_frac: float = 0.05) -> SummaryTree:
    """Greedy squared-error regression tree on the original covariates.

    Ties go to the lowest covariate index, then the lowest cut.  Children must
    each hold at least ``min_leaf_frac`` of all subjects.
    """
    target = np.asarray(posterior_means, dtype=float)
    if target.shape != (ds.n,):
        raise ValueError(f"need one posterior mean per subject ({ds.n}), got {target.shape}")
    if max_depth < 0 or not 0.0 <= min_leaf_frac < 0.5:
        raise ValueError("need max_depth >= 0 and 0 <= min_leaf_frac < 0.5")
    raw = ds.raw
    n = ds.n
    min_n = max(1, int(np.ceil(min_leaf_frac * n)))
    cat = [c.kind == CATEGORICAL and len(c.levels) > 2 for c in ds.covariates]
    counter = [0]

    def make(members, depth):
        nd = SummaryNode(counter[0], depth, members, float(target[members].mean()), len(members) / n)
        counter[0] += 1
        return nd

    def grow(nd):
        if nd.depth >= max_depth or nd.n < 2 * min_n:
            return
        t = target[nd.members]
        parent_sse = float(((t - t.mean()) ** 2).sum())
        if parent_sse <= TOL * max(1.0, float(np.abs(t).sum())):
            return
        best = None
        for j in range(ds.p):
            x = raw[nd.members, j]
            res = _best_level_split(x, t, min_n) if cat[j] else _best_ordered_split(x, t, min_n)
            if res is not None and res[0] < parent_sse - TOL and (best is None or res[0] < best[0] - TOL):
                best = (res[0], j, res[1])
        if best is None:
            return
        _, j, rule = best
        nd.var, nd.var_name = j, ds.names[j]
        if cat[j]:
            nd.left_levels = rule
        else:
            nd.threshold = rule
        go_left = nd.goes_left(raw[nd.members, j])
        nd.left = make(nd.members[go_left], nd.depth + 1)
        nd.right = make(nd.members[~go_left], nd.depth + 1)
        grow(nd.left)
        grow(nd.right)

    root = make(np.arange(n), 0)
    grow(root)
    level_names = {j: c.levels for j, c in enumerate(ds.covariates) if c.levels}
    return SummaryTree(root, ds.names, level_names)


@dataclass
class SubgroupPosterior:
    leaf_ids: list[int]
    averages: np.ndarray  # (n_draws, n_leaves)
    fracs: list[float]
    level: float = 0.90

    @property
    def intervals(self) -> np.ndarray:
        lo, hi = equal_tailed(self.averages, self.level)
        return np.column_stack([lo, hi])

    @property
    def means(self) -> np.ndarray:
        return self.averages.mean(axis=0)

    @property
    def exceedance(self) -> np.ndarray:
        """P(average in leaf j > average in leaf k) across draws."""
        a = self.averages
        return (a[:, :, None] > a[:, None, :]).mean(axis=0)

    def write_csv(self, path) -> None:
        iv, ex = self.intervals, self.exceedance
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["leaf", "frac", "mean", "lo", "hi"] + [f"p_gt_leaf{k}" for k in self.leaf_ids])
            for j, lid in enumerate(self.leaf_ids):
                w.writerow([lid, f"{self.fracs[j]:.9g}", f"{self.means[j]:.9g}", f"{iv[j, 0]:.9g}",
                            f"{iv[j, 1]:.9g}"] + [f"{v:.9g}" for v in ex[j]])


def subgroup_posterior(tree: SummaryTree, late_samples: np.ndarray, level: float = 0.90) -> SubgroupPosterior:
    """Per-draw average LATE within each leaf; ``late_samples`` is (n_draws, n_subjects)."""
    late_samples = np.asarray(late_samples, dtype=float)
    n = tree.root.n
    if late_samples.ndim != 2 or late_samples.shape[1] != n:
        raise ValueError(f"draws cover {late_samples.shape[-1]} subjects, tree has {n}")
    leaves = tree.leaves()
    cols = []
    for nd in leaves:
        if nd.n == 0:
            raise AssertionError(f"summary leaf {nd.id} is empty")
        cols.append(late_samples[:, nd.members].mean(axis=1))
    return SubgroupPosterior([nd.id for nd in leaves], np.column_stack(cols), [nd.frac for nd in leaves], level)
