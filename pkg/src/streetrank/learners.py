"""From-scratch ranking classifiers: CART, random forest, extra trees, AdaBoost,
stratified dummy, plus impurity-based feature importances.

Split search runs over histogram bins: a feature with at most 255 distinct
values keeps them all (thresholds are exact midpoints of adjacent uniques, so
shallow trees match exhaustive search bit for bit), denser features get
rank-quantile bins. Bin codes are computed once per training matrix and reused
by every tree. Each tree draws its randomness from a splitmix64 substream of
(seed, tree index), so results never depend on fitting order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba as nb
import numpy as np

from .features import FeatureMatrix
from .rng import next_u64, substream, to_unit

MIN_SAMPLES_LEAF = 5

KIND_DECISION_TREE = "decision_tree"
KIND_RANDOM_FOREST = "random_forest"
KIND_EXTRA_TREES = "extra_trees"
KIND_ADABOOST = "adaboost"
KIND_DUMMY = "stratified_dummy"

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class HyperGrid:
    """Published grid-search spaces per model kind."""

    forest_estimators: tuple[int, ...] = (100, 250, 500, 1000, 2500, 5000, 7500, 10000)
    forest_depths: tuple[int | None, ...] = (1, 2, 3, 4, 5, 10, None)
    adaboost_estimators: tuple[int, ...] = (100, 250, 500, 1000, 2500, 5000, 7500, 10000)
    adaboost_learning_rates: tuple[float, ...] = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0)
    tree_depths: tuple[int | None, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, None)

    def __post_init__(self) -> None:
        for name in ("forest_estimators", "forest_depths", "adaboost_estimators",
                     "adaboost_learning_rates", "tree_depths"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; feature < 0 marks a leaf.

    ``positives``/``samples`` are the (weighted) label counts of training rows
    reaching each node; scores use the Laplace-smoothed fraction.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    positives: np.ndarray
    samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_fraction(self, node: int) -> float:
        """Raw positive fraction at a node (no smoothing)."""
        return float(self.positives[node] / self.samples[node])

    def smoothed_values(self) -> np.ndarray:
        return (self.positives + 1.0) / (self.samples + 2.0)


@dataclass(frozen=True)
class TrainedEnsemble:
    kind: str
    trees: tuple[Tree, ...]
    tree_weights: np.ndarray | None
    params: Mapping[str, object]
    fingerprint: str
    fold_id: str
    seed: int
    importances: np.ndarray | None
    prior: float = 0.0  # dummy only

    @property
    def n_trees(self) -> int:
        return len(self.trees)


# ---------------------------------------------------------------------------
# Binning


@dataclass(frozen=True)
class BinnedMatrix:
    codes: np.ndarray      # uint8 (n, f)
    n_bins: np.ndarray     # int32 per feature
    thresholds: np.ndarray  # float64 (f, 255): raw-value cut after each bin


def bin_matrix(values: np.ndarray, max_bins: int = 255) -> BinnedMatrix:
    n, f = values.shape
    codes = np.empty((n, f), np.uint8)
    n_bins = np.empty(f, np.int32)
    thresholds = np.zeros((f, max_bins), np.float64)
    for j in range(f):
        column = values[:, j]
        uniques = np.unique(column)
        if uniques.shape[0] <= max_bins:
            codes[:, j] = np.searchsorted(uniques, column)
            n_bins[j] = uniques.shape[0]
            if uniques.shape[0] > 1:
                thresholds[j, :uniques.shape[0] - 1] = (uniques[:-1] + uniques[1:]) / 2.0
        else:
            ordered = np.sort(column)
            ranks = (np.arange(1, max_bins) * n) // max_bins
            edges = np.unique(ordered[ranks])
            code = np.searchsorted(edges, column, side="right")
            codes[:, j] = code
            nb_j = edges.shape[0] + 1
            n_bins[j] = nb_j
            lo = np.full(nb_j, np.inf)
            hi = np.full(nb_j, -np.inf)
            np.minimum.at(lo, code, column)
            np.maximum.at(hi, code, column)
            thresholds[j, :nb_j - 1] = (hi[:-1] + lo[1:]) / 2.0
    return BinnedMatrix(codes, n_bins, thresholds)


# ---------------------------------------------------------------------------
# Tree-building kernel


@nb.njit(cache=True)
def _build_tree(codes, n_bins, thresh_table, y, w, max_depth, min_leaf, fsub,
                random_cuts, seed, importances):
    n, f = codes.shape
    wsum_all = np.int64(0)
    active = 0
    for i in range(n):
        wsum_all += w[i]
        if w[i] > 0:
            active += 1
    idx = np.empty(active, np.int32)
    p = 0
    for i in range(n):
        if w[i] > 0:
            idx[p] = i
            p += 1

    max_nodes = int(2 * (wsum_all // min_leaf) + 3)
    feat_out = np.full(max_nodes, -1, np.int32)
    thr_out = np.zeros(max_nodes, np.float64)
    left_out = np.full(max_nodes, -1, np.int32)
    right_out = np.full(max_nodes, -1, np.int32)
    pos_out = np.zeros(max_nodes, np.float64)
    cnt_out = np.zeros(max_nodes, np.float64)

    stack_lo = np.empty(max_nodes, np.int32)
    stack_hi = np.empty(max_nodes, np.int32)
    stack_depth = np.empty(max_nodes, np.int32)
    stack_slot = np.empty(max_nodes, np.int32)
    top = 0
    stack_lo[0] = 0
    stack_hi[0] = active
    stack_depth[0] = 0
    stack_slot[0] = 0
    top = 1
    n_nodes = 1

    hist_c = np.zeros(256, np.int64)
    hist_p = np.zeros(256, np.int64)
    pool = np.empty(f, np.int32)
    buf = np.empty(active, np.int32)
    state = seed

    while top > 0:
        top -= 1
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        slot = stack_slot[top]

        wn = np.int64(0)
        wpos = np.int64(0)
        for a in range(lo, hi):
            i = idx[a]
            wn += w[i]
            wpos += w[i] * y[i]
        pos_out[slot] = wpos
        cnt_out[slot] = wn

        if wpos == 0 or wpos == wn or wn < 2 * min_leaf or \
                (max_depth >= 0 and depth >= max_depth):
            continue

        parent_sq = (wpos * np.float64(wpos) + (wn - wpos) * np.float64(wn - wpos)) / wn
        best_gain = 0.0
        best_feat = -1
        best_cut = -1

        n_candidates = f if (fsub <= 0 or fsub >= f) else fsub
        if n_candidates < f:
            for j in range(f):
                pool[j] = j
            for tpos in range(n_candidates):
                state, word = next_u64(state)
                swap = tpos + int(word % np.uint64(f - tpos))
                tmp = pool[tpos]
                pool[tpos] = pool[swap]
                pool[swap] = tmp

        for cand in range(n_candidates):
            j = pool[cand] if n_candidates < f else cand
            nb_j = n_bins[j]
            if nb_j < 2:
                continue
            for b in range(nb_j):
                hist_c[b] = 0
                hist_p[b] = 0
            for a in range(lo, hi):
                i = idx[a]
                b = codes[i, j]
                hist_c[b] += w[i]
                hist_p[b] += w[i] * y[i]

            if random_cuts:
                bmin = -1
                bmax = -1
                for b in range(nb_j):
                    if hist_c[b] > 0:
                        if bmin < 0:
                            bmin = b
                        bmax = b
                if bmin == bmax:
                    continue
                state, word = next_u64(state)
                cut = bmin + int(to_unit(word) * (bmax - bmin))
                cl = np.int64(0)
                pl = np.int64(0)
                for b in range(cut + 1):
                    cl += hist_c[b]
                    pl += hist_p[b]
                cr = wn - cl
                pr = wpos - pl
                if cl < min_leaf or cr < min_leaf:
                    continue
                child_sq = (pl * np.float64(pl) + (cl - pl) * np.float64(cl - pl)) / cl \
                    + (pr * np.float64(pr) + (cr - pr) * np.float64(cr - pr)) / cr
                gain = child_sq - parent_sq
                if gain > best_gain:
                    best_gain = gain
                    best_feat = j
                    best_cut = cut
            else:
                cl = np.int64(0)
                pl = np.int64(0)
                for b in range(nb_j - 1):
                    cl += hist_c[b]
                    pl += hist_p[b]
                    if cl < min_leaf:
                        continue
                    cr = wn - cl
                    if cr < min_leaf:
                        break
                    pr = wpos - pl
                    child_sq = (pl * np.float64(pl) + (cl - pl) * np.float64(cl - pl)) / cl \
                        + (pr * np.float64(pr) + (cr - pr) * np.float64(cr - pr)) / cr
                    gain = child_sq - parent_sq
                    if gain > best_gain:
                        best_gain = gain
                        best_feat = j
                        best_cut = b

        if best_feat < 0:
            continue

        mid = lo
        bpos = 0
        for a in range(lo, hi):
            i = idx[a]
            if codes[i, best_feat] <= best_cut:
                idx[mid] = i
                mid += 1
            else:
                buf[bpos] = i
                bpos += 1
        for a in range(bpos):
            idx[mid + a] = buf[a]

        importances[best_feat] += best_gain
        feat_out[slot] = best_feat
        thr_out[slot] = thresh_table[best_feat, best_cut]
        left_out[slot] = n_nodes
        right_out[slot] = n_nodes + 1
        stack_lo[top] = lo
        stack_hi[top] = mid
        stack_depth[top] = depth + 1
        stack_slot[top] = n_nodes
        top += 1
        stack_lo[top] = mid
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        stack_slot[top] = n_nodes + 1
        top += 1
        n_nodes += 2

    return feat_out[:n_nodes], thr_out[:n_nodes], left_out[:n_nodes], \
        right_out[:n_nodes], pos_out[:n_nodes], cnt_out[:n_nodes]


@nb.njit(cache=True)
def _bootstrap_weights(n, seed):
    w = np.zeros(n, np.int64)
    state = seed
    for _ in range(n):
        state, word = next_u64(state)
        w[int(word % np.uint64(n))] += 1
    return w


@nb.njit(cache=True)
def _predict_tree(values, feature, threshold, left, right, score, out):
    n = values.shape[0]
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if values[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += score[node]


@nb.njit(cache=True)
def _fit_stump(codes, n_bins, y, w, min_leaf):
    """Weighted-error-minimising depth-1 split; returns packed best state."""
    n, f = codes.shape
    best_err = 1.7e308
    best_feat = -1
    best_cut = -1
    best_lab_l = 0
    best_lab_r = 0
    wc = np.zeros(256, np.float64)
    wp = np.zeros(256, np.float64)
    cc = np.zeros(256, np.int64)
    for j in range(f):
        nb_j = n_bins[j]
        if nb_j < 2:
            continue
        for b in range(nb_j):
            wc[b] = 0.0
            wp[b] = 0.0
            cc[b] = 0
        total_w = 0.0
        total_p = 0.0
        for i in range(n):
            b = codes[i, j]
            wc[b] += w[i]
            cc[b] += 1
            if y[i] == 1:
                wp[b] += w[i]
            total_w += w[i]
            total_p += w[i] * y[i]
        cl_w = 0.0
        cl_p = 0.0
        cl_n = np.int64(0)
        for b in range(nb_j - 1):
            cl_w += wc[b]
            cl_p += wp[b]
            cl_n += cc[b]
            if cl_n < min_leaf:
                continue
            if n - cl_n < min_leaf:
                break
            cr_w = total_w - cl_w
            cr_p = total_p - cl_p
            lab_l = 1 if cl_p > cl_w - cl_p else 0
            lab_r = 1 if cr_p > cr_w - cr_p else 0
            err = (cl_w - cl_p if lab_l == 1 else cl_p) \
                + (cr_w - cr_p if lab_r == 1 else cr_p)
            if err < best_err:
                best_err = err
                best_feat = j
                best_cut = b
                best_lab_l = lab_l
                best_lab_r = lab_r
    return best_feat, best_cut, best_err, best_lab_l, best_lab_r


# ---------------------------------------------------------------------------
# Fitting


def _as_values(matrix) -> tuple[np.ndarray, str]:
    if isinstance(matrix, FeatureMatrix):
        return np.ascontiguousarray(matrix.values), matrix.fingerprint
    values = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    return values, ""


def _check_xy(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape[0] != values.shape[0]:
        raise ValueError("matrix and labels differ in length")
    if values.shape[0] == 0:
        raise ValueError("empty training set")
    uniq = set(np.unique(labels).tolist())
    if not uniq <= {0, 1}:
        raise ValueError("labels must be binary 0/1")
    return labels.astype(np.uint8)


def _run_build(binned: BinnedMatrix, y: np.ndarray, w: np.ndarray,
               max_depth: int | None, min_leaf: int, fsub: int,
               random_cuts: bool, seed: int,
               importances: np.ndarray) -> Tree:
    depth = -1 if max_depth is None else int(max_depth)
    parts = _build_tree(binned.codes, binned.n_bins, binned.thresholds,
                        y, w.astype(np.int64), depth, min_leaf, fsub,
                        random_cuts, np.uint64(seed), importances)
    return Tree(*[np.asarray(part) for part in parts])


def fit_tree(matrix, labels, max_depth: int | None = None,
             feature_subsample: int = 0, seed: int = 0,
             split_mode: str = "exhaustive",
             min_samples_leaf: int = MIN_SAMPLES_LEAF) -> Tree:
    """Greedy Gini CART on the full sample.

    ``split_mode`` is "exhaustive" (best midpoint threshold) or "random"
    (one uniform threshold per candidate feature, extra-trees style).
    """
    values, _ = _as_values(matrix)
    y = _check_xy(values, labels)
    if split_mode not in ("exhaustive", "random"):
        raise ValueError(f"unknown split_mode: {split_mode!r}")
    binned = bin_matrix(values)
    importances = np.zeros(values.shape[1], np.float64)
    return _run_build(binned, y, np.ones(values.shape[0], np.int64),
                      max_depth, min_samples_leaf, feature_subsample,
                      split_mode == "random", seed, importances)


def _finish_ensemble(kind, trees, weights, params, fingerprint, fold_id, seed,
                     raw_importances) -> TrainedEnsemble:
    total = raw_importances.sum()
    importances = raw_importances / total if total > 0 else raw_importances.copy()
    return TrainedEnsemble(kind=kind, trees=tuple(trees), tree_weights=weights,
                           params=dict(params), fingerprint=fingerprint,
                           fold_id=fold_id, seed=seed, importances=importances)


def fit_forest(matrix, labels, n_estimators: int = 500,
               max_depth: int | None = 5, kind: str = KIND_RANDOM_FOREST,
               seed: int = 0, feature_subsample: int | None = None,
               bootstrap: bool | None = None,
               min_samples_leaf: int = MIN_SAMPLES_LEAF,
               fold_id: str = "") -> TrainedEnsemble:
    """Random forest (bootstrap, exhaustive splits) or extra trees (full
    sample, random thresholds). Tree t is fully determined by (seed, t)."""
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    if kind not in (KIND_RANDOM_FOREST, KIND_EXTRA_TREES, KIND_DECISION_TREE):
        raise ValueError(f"unknown forest kind: {kind!r}")
    values, fingerprint = _as_values(matrix)
    y = _check_xy(values, labels)
    n, f = values.shape
    if feature_subsample is None:
        feature_subsample = 0 if kind == KIND_DECISION_TREE else max(1, int(math.isqrt(f)))
    if bootstrap is None:
        bootstrap = kind == KIND_RANDOM_FOREST
    random_cuts = kind == KIND_EXTRA_TREES

    binned = bin_matrix(values)
    raw_importances = np.zeros(f, np.float64)
    trees = []
    for t in range(n_estimators):
        tree_seed = np.uint64(substream(np.uint64(seed), np.uint64(t)))
        if bootstrap:
            bag_seed = np.uint64(substream(tree_seed, np.uint64(0x0B00)))
            w = _bootstrap_weights(n, bag_seed)
        else:
            w = np.ones(n, np.int64)
        trees.append(_run_build(binned, y, w, max_depth, min_samples_leaf,
                                feature_subsample, random_cuts, int(tree_seed),
                                raw_importances))
    params = {"n_estimators": n_estimators, "max_depth": max_depth,
              "feature_subsample": feature_subsample, "bootstrap": bootstrap,
              "min_samples_leaf": min_samples_leaf}
    return _finish_ensemble(kind, trees, None, params, fingerprint, fold_id,
                            seed, raw_importances)


def fit_adaboost(matrix, labels, n_estimators: int = 500,
                 learning_rate: float = 1.0, seed: int = 0,
                 min_samples_leaf: int = MIN_SAMPLES_LEAF,
                 fold_id: str = "") -> TrainedEnsemble:
    """Discrete AdaBoost over depth-1 stumps.

    Round weight is 0.5*ln((1-err)/err); the learning rate scales only the
    sample reweighting. Stops early on a perfect round or once the best stump
    is no better than chance.
    """
    values, fingerprint = _as_values(matrix)
    y = _check_xy(values, labels)
    if len(np.unique(y)) < 2:
        raise ValueError("AdaBoost needs both classes present")
    n, f = values.shape
    binned = bin_matrix(values)
    w = np.full(n, 1.0 / n)
    sign = np.where(y == 1, 1.0, -1.0)

    trees = []
    alphas = []
    round_errors = []
    raw_importances = np.zeros(f, np.float64)
    for _ in range(n_estimators):
        feat, cut, err, lab_l, lab_r = _fit_stump(binned.codes, binned.n_bins,
                                                  y, w, min_samples_leaf)
        if feat < 0 or lab_l == lab_r or err >= 0.5:
            break
        round_errors.append(err)
        err = max(err, 1e-12)
        alpha = 0.5 * math.log((1.0 - err) / err)
        threshold = binned.thresholds[feat, cut]
        trees.append(_stump_tree(feat, threshold, lab_l, lab_r))
        alphas.append(alpha)
        raw_importances[feat] += alpha
        if err <= 1e-12:
            break
        if learning_rate != 0.0:
            h_sign = np.where(binned.codes[:, feat] <= cut,
                              2.0 * lab_l - 1.0, 2.0 * lab_r - 1.0)
            w = w * np.exp(-learning_rate * alpha * sign * h_sign)
            w /= w.sum()

    if not trees:
        raise ValueError("no stump beat chance on round 1")
    params = {"n_estimators": n_estimators, "learning_rate": learning_rate,
              "min_samples_leaf": min_samples_leaf, "rounds_run": len(trees),
              "round_errors": tuple(round_errors)}
    return _finish_ensemble(KIND_ADABOOST, trees, np.array(alphas), params,
                            fingerprint, fold_id, seed, raw_importances)


def _stump_tree(feat: int, threshold: float, lab_l: int, lab_r: int) -> Tree:
    return Tree(feature=np.array([feat, -1, -1], np.int32),
                threshold=np.array([threshold, 0.0, 0.0]),
                left=np.array([1, -1, -1], np.int32),
                right=np.array([2, -1, -1], np.int32),
                positives=np.array([0.0, float(lab_l), float(lab_r)]),
                samples=np.array([0.0, 1.0, 1.0]))


def fit_dummy(labels, seed: int = 0, fold_id: str = "",
              fingerprint: str = "") -> TrainedEnsemble:
    """Stratified random scorer: matches the training positive rate while
    ranking uniformly at random."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("empty training labels")
    prior = float(np.mean(labels == 1))
    return TrainedEnsemble(kind=KIND_DUMMY, trees=(), tree_weights=None,
                           params={}, fingerprint=fingerprint, fold_id=fold_id,
                           seed=seed, importances=None, prior=prior)


# ---------------------------------------------------------------------------
# Prediction and importances


def predict_scores(ensemble: TrainedEnsemble, matrix) -> np.ndarray:
    """Score each row in [0, 1]; higher means ranked earlier."""
    values, fingerprint = _as_values(matrix)
    if ensemble.fingerprint and fingerprint and ensemble.fingerprint != fingerprint:
        raise ValueError("feature schema mismatch between model and matrix")
    n = values.shape[0]
    if n == 0:
        return np.zeros(0, np.float64)

    if ensemble.kind == KIND_DUMMY:
        rng = np.random.default_rng(ensemble.seed)
        hit = rng.random(n) < ensemble.prior
        magnitude = rng.random(n) * 0.5
        return np.where(hit, 0.5 + magnitude, magnitude)

    if ensemble.kind == KIND_ADABOOST:
        margin = np.zeros(n)
        total = 0.0
        for tree, alpha in zip(ensemble.trees, ensemble.tree_weights):
            vote = np.where(values[:, tree.feature[0]] <= tree.threshold[0],
                            2.0 * tree.positives[1] - 1.0,
                            2.0 * tree.positives[2] - 1.0)
            margin += alpha * vote
            total += alpha
        margin /= total
        return 1.0 / (1.0 + np.exp(-margin))

    out = np.zeros(n, np.float64)
    for tree in ensemble.trees:
        _predict_tree(values, tree.feature, tree.threshold, tree.left,
                      tree.right, tree.smoothed_values(), out)
    return out / len(ensemble.trees)


def feature_importances(ensemble: TrainedEnsemble) -> np.ndarray:
    """Normalised mean impurity decrease; undefined for the dummy model."""
    if ensemble.importances is None:
        raise ValueError("feature importances are undefined for the dummy model")
    return ensemble.importances


def group_importances(importances: np.ndarray,
                      groups: Sequence[str]) -> dict[str, float]:
    """Sum per-feature importances over their schema groups."""
    if len(groups) != importances.shape[0]:
        raise ValueError("groups and importances differ in length")
    out: dict[str, float] = {}
    for value, group in zip(importances, groups):
        out[group] = out.get(group, 0.0) + float(value)
    return out
