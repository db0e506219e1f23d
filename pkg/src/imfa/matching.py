"""Bipartite matching and the set-based detection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError
from .tensor import Tensor

COST_CLASS_WEIGHT = 2.0
COST_L1_WEIGHT = 5.0
COST_GIOU_WEIGHT = 2.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

_TIE_TOL = 1e-9


@dataclass
class MatchResult:
    """Injective prediction-to-ground-truth assignment."""

    pairs: list                 # (prediction index, gt index), sorted by prediction
    unmatched: list             # prediction indices with no gt
    total_cost: float


def _hungarian_rect(a: np.ndarray):
    """Assignment of all rows of an n x m (n <= m) matrix; O(n^2 m).

    Returns (cols, u, v): cols[i] is the column assigned to row i, u and v
    are optimal potentials (v[0] is a virtual column).
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)       # p[j]: row matched to column j (1-based)
    way = np.zeros(m + 1, dtype=np.intp)
    cols_idx = np.arange(m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            jf = cols_idx[free]
            cur = a[i0 - 1, jf - 1] - u[i0] - v[jf]
            better = cur < minv[jf]
            minv[jf] = np.where(better, cur, minv[jf])
            way[jf[better]] = j0
            j1 = jf[np.argmin(minv[jf])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            p[j0] = p[way[j0]]
            j0 = way[j0]
    cols = np.zeros(n, dtype=np.intp)
    cols[p[1:][p[1:] > 0] - 1] = np.nonzero(p[1:])[0]
    return cols, u[1:], v[1:]


def _optimal_total(cost: np.ndarray) -> float:
    """Minimum cost of matching all of the smaller side."""
    if min(cost.shape) == 0:
        return 0.0
    a = cost if cost.shape[0] <= cost.shape[1] else cost.T
    cols, _, _ = _hungarian_rect(a)
    return float(a[np.arange(a.shape[0]), cols].sum())


def _completion_cost(cost, fixed_rows, fixed_cols):
    rows = [i for i in range(cost.shape[0]) if i not in fixed_rows]
    gcols = [j for j in range(cost.shape[1]) if j not in fixed_cols]
    if not rows or not gcols:
        return 0.0
    return _optimal_total(cost[np.ix_(rows, gcols)])


def _unique_optimum(tight: np.ndarray, acols: np.ndarray, v: np.ndarray) -> bool:
    """True when the assignment acols is the only optimum.

    tight[i, j] marks zero-slack edges of the (rows <= cols) problem with
    optimal duals, v the column potentials.  An alternative optimum differs
    by an alternating cycle inside the tight graph, or by an alternating
    path that frees a column whose potential is zero.
    """
    n, m = tight.shape
    # adj[i, k]: row i can steal the column matched to row k
    adj = tight[:, acols].copy()
    np.fill_diagonal(adj, False)
    free = np.ones(m, dtype=bool)
    free[acols] = False
    can_exit = tight[:, free].any(axis=1)
    neutral = np.abs(v[acols]) < _TIE_TOL

    reach = adj.astype(np.int64)
    for _ in range(max(1, int(np.ceil(np.log2(max(n, 2)))))):
        reach = np.minimum(reach + reach @ reach, 1)
    if reach.diagonal().any():
        return False
    # row whose own column is free to give up reaching a row that can leave
    exits = can_exit | ((reach @ can_exit.astype(np.int64)) > 0)
    return not bool(np.any(neutral & exits))


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost assignment, lexicographically smallest among optima."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise NumericError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite values")
    n, g = cost.shape
    if n == 0 or g == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)), total_cost=0.0)

    # solve with the smaller side as rows
    transposed = n < g
    a = cost.T if transposed else cost
    if a.shape[0] > a.shape[1]:
        a = a.T
        transposed = not transposed
    # now a is (min side) x (max side); rows of `a` are all matched
    acols, u, v = _hungarian_rect(a)
    total = float(a[np.arange(a.shape[0]), acols].sum())

    # fast path: by complementary slackness any alternative optimum lives in
    # the tight-edge graph, so the solution is unique when that graph has no
    # alternating cycle and no cost-neutral alternating path to a free column
    slack = a - u[:, None] - v[None, :]
    tight = np.abs(slack) < _TIE_TOL * (1.0 + np.abs(a))
    if _unique_optimum(tight, acols, v):
        if transposed:
            pairs = sorted((int(pcol), int(grow)) for grow, pcol in enumerate(acols))
        else:
            pairs = sorted((int(prow), int(gcol)) for prow, gcol in enumerate(acols))
        matched = {p for p, _ in pairs}
        return MatchResult(pairs=pairs,
                           unmatched=[i for i in range(n) if i not in matched],
                           total_cost=total)

    # lexicographic refinement over ties: fix pairs in prediction order,
    # keeping each prefix extendable to an optimal assignment
    tol = _TIE_TOL * (1.0 + abs(total))
    fixed_rows: list[int] = []
    fixed_cols: list[int] = []
    fixed_cost = 0.0
    pairs = []
    budget = min(n, g)
    for p in range(n):
        if len(pairs) == budget:
            break
        for gt in range(g):
            if gt in fixed_cols:
                continue
            trial = fixed_cost + cost[p, gt] + _completion_cost(
                cost, set(fixed_rows + [p]), set(fixed_cols + [gt]))
            if trial <= total + tol:
                pairs.append((p, gt))
                fixed_rows.append(p)
                fixed_cols.append(gt)
                fixed_cost += cost[p, gt]
                break
        else:
            # leaving p unmatched must itself be optimal
            fixed_rows.append(p)
    matched = {p for p, _ in pairs}
    return MatchResult(pairs=pairs,
                       unmatched=[i for i in range(n) if i not in matched],
                       total_cost=total)


def brute_force_match(cost) -> MatchResult:
    """Exhaustive minimum assignment; oracle for small instances.

    Ties between optimal assignments break toward the lexicographically
    smallest sorted pair list, matching hungarian_match.
    """
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    if min(n, g) == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)), total_cost=0.0)
    best = np.inf
    best_pairs: list[tuple[int, int]] = []
    if g <= n:
        for rows in permutations(range(n), g):
            c = cost[list(rows), range(g)].sum()
            pairs = sorted(zip(rows, range(g)))
            if c < best - _TIE_TOL or (c <= best + _TIE_TOL and pairs < best_pairs):
                best, best_pairs = min(best, c), pairs
    else:
        for colsel in permutations(range(g), n):
            c = cost[range(n), list(colsel)].sum()
            pairs = sorted(zip(range(n), colsel))
            if c < best - _TIE_TOL or (c <= best + _TIE_TOL and pairs < best_pairs):
                best, best_pairs = min(best, c), pairs
    matched = {p for p, _ in best_pairs}
    return MatchResult(pairs=best_pairs,
                       unmatched=[i for i in range(n) if i not in matched],
                       total_cost=float(best))


# ---------------------------------------------------------------------------
# geometry


def _boxes_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def giou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU for (cx, cy, w, h) boxes -> (N, G)."""
    a = _boxes_to_xyxy(np.asarray(pred, dtype=np.float64))
    b = _boxes_to_xyxy(np.asarray(gt, dtype=np.float64))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    hx0 = np.minimum(a[:, None, 0], b[None, :, 0])
    hy0 = np.minimum(a[:, None, 1], b[None, :, 1])
    hx1 = np.maximum(a[:, None, 2], b[None, :, 2])
    hy1 = np.maximum(a[:, None, 3], b[None, :, 3])
    hull = (hx1 - hx0) * (hy1 - hy0)
    iou = inter / union
    return iou - (hull - union) / hull


def giou_pairwise_t(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Elementwise GIoU for aligned box pairs, differentiable in pred."""
    gt = np.asarray(gt, dtype=pred.dtype)
    pcx, pcy = T.narrow(pred, 1, 0, 1), T.narrow(pred, 1, 1, 1)
    pw, ph = T.narrow(pred, 1, 2, 1), T.narrow(pred, 1, 3, 1)
    ax0, ay0 = pcx - pw * 0.5, pcy - ph * 0.5
    ax1, ay1 = pcx + pw * 0.5, pcy + ph * 0.5
    g = _boxes_to_xyxy(gt).astype(pred.dtype)
    bx0, by0, bx1, by1 = g[:, 0:1], g[:, 1:2], g[:, 2:3], g[:, 3:4]
    area_a = pw * ph
    area_b = (bx1 - bx0) * (by1 - by0)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    hw = T.maximum(ax1, bx1) - T.minimum(ax0, bx0)
    hh = T.maximum(ay1, by1) - T.minimum(ay0, by0)
    hull = hw * hh
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# costs and losses


def match_cost(class_logits: np.ndarray, boxes: np.ndarray,
               gt_boxes: np.ndarray, gt_classes: np.ndarray) -> np.ndarray:
    """Matching cost matrix: focal class term + L1 + GIoU terms."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if gt_boxes.size and (np.any(gt_boxes[:, 2] <= 0) or np.any(gt_boxes[:, 3] <= 0)):
        raise DataError("ground-truth box with non-positive width or height")
    p = 1.0 / (1.0 + np.exp(-np.asarray(class_logits, dtype=np.float64)))
    eps = 1e-12
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * (-np.log(p + eps))
    neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-np.log(1 - p + eps))
    cls_cost = pos[:, gt_classes] - neg[:, gt_classes]
    l1 = np.abs(np.asarray(boxes, dtype=np.float64)[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    giou = giou_matrix(boxes, gt_boxes)
    return (COST_CLASS_WEIGHT * cls_cost + COST_L1_WEIGHT * l1
            + COST_GIOU_WEIGHT * (1.0 - giou))


def focal_loss_t(logits: Tensor, target_onehot: np.ndarray) -> Tensor:
    """Sigmoid focal loss summed over all logits (alpha=0.25, gamma=2)."""
    t = np.asarray(target_onehot, dtype=logits.dtype)
    p = T.sigmoid(logits)
    one_m_p = 1.0 - p
    pos = (FOCAL_ALPHA * t) * one_m_p * one_m_p * T.softplus(-logits)
    neg = ((1.0 - FOCAL_ALPHA) * (1.0 - t)) * p * p * T.softplus(logits)
    return T.tsum(pos + neg)


def stage_loss(preds: dict, gt_boxes: np.ndarray, gt_classes: np.ndarray,
               match: MatchResult, num_classes: int):
    """Focal + L1 + GIoU loss for one stage; returns (scalar, parts)."""
    logits = preds["class_logits"]
    boxes = preds["boxes"]
    n = logits.shape[0]
    num_gt = max(1, len(gt_boxes))
    target = np.zeros((n, num_classes), dtype=np.float64)
    for p, g in match.pairs:
        target[p, gt_classes[g]] = 1.0
    cls = focal_loss_t(logits, target) * (1.0 / num_gt)
    if match.pairs:
        pred_idx = np.array([p for p, _ in match.pairs])
        gt_idx = np.array([g for _, g in match.pairs])
        mb = T.take_rows(boxes, pred_idx)
        gb = np.asarray(gt_boxes, dtype=np.float64)[gt_idx]
        l1 = T.tsum(T.absolute(mb - gb.astype(boxes.dtype))) * (1.0 / num_gt)
        giou = T.tsum(1.0 - giou_pairwise_t(mb, gb)) * (1.0 / num_gt)
    else:
        l1 = Tensor(np.zeros((), dtype=boxes.dtype))
        giou = Tensor(np.zeros((), dtype=boxes.dtype))
    total = COST_CLASS_WEIGHT * cls + COST_L1_WEIGHT * l1 + COST_GIOU_WEIGHT * giou
    parts = {"cls": cls.item(), "l1": l1.item(), "giou": giou.item()}
    return total, parts


def deep_supervision(stage_preds: list, gt_boxes: np.ndarray,
                     gt_classes: np.ndarray, num_classes: int):
    """Independent matching and loss per stage, summed unweighted."""
    total = None
    parts = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    for preds in stage_preds:
        if len(gt_boxes):
            cost = match_cost(preds["class_logits"].data, preds["boxes"].data,
                              gt_boxes, gt_classes)
            match = hungarian_match(cost)
        else:
            match = MatchResult(pairs=[], unmatched=list(range(preds["boxes"].shape[0])),
                                total_cost=0.0)
        loss, p = stage_loss(preds, gt_boxes, gt_classes, match, num_classes)
        total = loss if total is None else total + loss
        for k in parts:
            parts[k] += p[k]
    return total, parts
