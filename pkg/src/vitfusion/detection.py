"""Detection heads, prediction-to-ground-truth matching, and the loss stack.

The model emits a fixed-size set of N candidate boxes with class
probabilities over C real classes plus a trailing "no object" class.
Ground truth is matched to predictions by a minimum-cost bipartite
assignment; matched pairs drive the regression terms (Laplace-KL on
center/size/heading plus a corner distance penalty) and every prediction
row contributes to the focal classification term, with unmatched rows
targeted at "no object".

All loss functions return analytic gradients alongside their values; the
gradient path runs from the loss through the output transforms (sigmoid
center map, exponential size map, softmax) back into the head MLPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box2D, Box3D, corners_of_params, wrap_angle
from .nn import EVAL, ConfigError, MLP, Mode, Module, softmax, softmax_backward

MAX_PROPOSALS = 256
PROB_CLAMP = 1e-7


class ContractError(ValueError):
    """A caller violated an interface precondition."""


@dataclass
class DetectionSet:
    """N predicted boxes with per-class probabilities (last column is
    "no object")."""

    boxes: list
    class_probs: np.ndarray

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        n = len(self.boxes)
        if self.class_probs.shape[0] != n:
            raise ContractError("boxes and class_probs disagree on N")
        if n > MAX_PROPOSALS:
            raise ContractError(f"N={n} exceeds the {MAX_PROPOSALS}-proposal cap")
        if n and (np.any(self.class_probs < 0)
                  or np.any(np.abs(self.class_probs.sum(axis=1) - 1.0) > 1e-6)):
            raise ContractError("class_probs rows must be a distribution")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[1] - 1

    def confidences(self) -> np.ndarray:
        """Max class probability excluding "no object"."""
        if len(self.boxes) == 0:
            return np.zeros(0)
        return self.class_probs[:, :-1].max(axis=1)

    def argmax_classes(self) -> np.ndarray:
        """Most likely real class per row (ignoring "no object")."""
        if len(self.boxes) == 0:
            return np.zeros(0, dtype=np.intp)
        return self.class_probs[:, :-1].argmax(axis=1)

    def take(self, idx) -> "DetectionSet":
        idx = np.asarray(idx, dtype=np.intp)
        return DetectionSet([self.boxes[i] for i in idx], self.class_probs[idx])

    def box_params(self) -> np.ndarray:
        if not self.boxes:
            d = 7 if not self.boxes else len(self.boxes[0].params)
            return np.zeros((0, d))
        return np.stack([b.params for b in self.boxes])


@dataclass
class GroundTruth:
    """M ground-truth boxes with integer class labels in [0, C)."""

    boxes: list
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if len(self.boxes) != self.labels.shape[0]:
            raise ContractError("boxes and labels disagree on M")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ContractError("labels out of range")

    def __len__(self) -> int:
        return len(self.boxes)

    def onehot(self) -> np.ndarray:
        out = np.zeros((len(self.boxes), self.num_classes))
        out[np.arange(len(self.boxes)), self.labels] = 1.0
        return out

    def box_params(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 7))
        return np.stack([b.params for b in self.boxes])


def match_cost_matrix(box_params, probs, gt_params, gt_labels,
                      class_weight: float, box_weight: float,
                      heading_col: int | None) -> np.ndarray:
    """cost[g, p] = class_weight * (-p_matched_class) + box_weight * L1."""
    diff = box_params[None, :, :] - gt_params[:, None, :]
    if heading_col is not None:
        diff[..., heading_col] = wrap_angle(diff[..., heading_col])
    l1 = np.abs(diff).sum(axis=2)
    cls = -probs[:, gt_labels].T      # (M, N)
    return class_weight * cls + box_weight * l1


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost injective map from gt rows to prediction columns.

    Exact ties are broken toward index-aligned pairs (a vanishing bias on
    |g - p| makes the solver deterministic without moving genuine optima).
    """
    M, N = cost.shape
    if M > N:
        raise ContractError(f"more ground truth rows ({M}) than predictions ({N})")
    if M == 0:
        return np.zeros(0, dtype=np.intp)
    eps = 1e-12 * (1.0 + np.abs(cost).max())
    bias = eps * np.abs(np.arange(M)[:, None] - np.arange(N)[None, :])
    rows, cols = linear_sum_assignment(cost + bias)
    out = np.empty(M, dtype=np.intp)
    out[rows] = cols
    return out


def match(preds: DetectionSet, gt: GroundTruth,
          class_weight: float = 1.0, box_weight: float = 1.0) -> np.ndarray:
    """Assignment array: element g is the prediction index matched to gt g."""
    if len(gt) == 0:
        return np.zeros(0, dtype=np.intp)
    heading_col = 6 if isinstance(gt.boxes[0], Box3D) else None
    cost = match_cost_matrix(preds.box_params(), preds.class_probs,
                             gt.box_params(), gt.labels,
                             class_weight, box_weight, heading_col)
    return solve_assignment(cost)


# ---------------------------------------------------------------------------
# loss terms (value + analytic gradient)
# ---------------------------------------------------------------------------

def focal_terms(probs, targets, gamma: float):
    """Elementwise focal loss matrix and its gradient w.r.t. the probabilities.

    L_ij = -[t (1-p)^g log p + (1-t) p^g log(1-p)], probabilities clamped
    to [1e-7, 1 - 1e-7] (zero gradient where the clamp is active).
    """
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = targets
    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    loss = -(t * (1.0 - p) ** gamma * log_p + (1.0 - t) * p ** gamma * log_q)
    if gamma == 0.0:
        d = -(t / p - (1.0 - t) / (1.0 - p))
    else:
        d1 = t * ((1.0 - p) ** gamma / p - gamma * (1.0 - p) ** (gamma - 1.0) * log_p)
        d2 = (1.0 - t) * (gamma * p ** (gamma - 1.0) * log_q - p ** gamma / (1.0 - p))
        d = -(d1 + d2)
    clamped = (probs < PROB_CLAMP) | (probs > 1.0 - PROB_CLAMP)
    d = np.where(clamped, 0.0, d)
    return loss, d


def focal_loss(probs, targets, gamma: float, row_weights=None, normalizer: float = 1.0):
    """Focal loss summed over predictions and classes, divided by
    ``normalizer`` (the matched count). Returns (value, d/dprobs)."""
    loss, d = focal_terms(probs, targets, gamma)
    if row_weights is not None:
        w = np.asarray(row_weights, dtype=np.float64)[:, None]
        loss = loss * w
        d = d * w
    return float(loss.sum() / normalizer), d / normalizer


def laplace_kl(pred, gt, b: float, wrap: bool = False):
    """KL divergence between unit-scale-b Laplace distributions centered at
    gt and pred: exp(-|d|/b) + |d|/b - 1. Returns (values, d/dpred)."""
    if b <= 0:
        raise ConfigError(f"Laplace scale must be positive, got {b}")
    delta = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    if wrap:
        delta = wrap_angle(delta)
    a = np.abs(delta) / b
    e = np.exp(-a)
    vals = e + a - 1.0
    grad = np.sign(delta) * (1.0 - e) / b
    return vals, grad


def corner_loss_terms(pred_params, gt_params):
    """Per-pair sum of corner distances and its gradient w.r.t. the
    predicted (cx, cy, cz, l, w, h, theta) rows. Shapes (M, 7) -> (M,), (M, 7)."""
    pred_params = np.atleast_2d(pred_params)
    gt_params = np.atleast_2d(gt_params)
    pc = corners_of_params(pred_params)          # (M, 8, 3)
    gc = corners_of_params(gt_params)
    diff = pc - gc
    dist = np.sqrt((diff * diff).sum(axis=2))    # (M, 8)
    vals = dist.sum(axis=1)
    safe = np.where(dist > 0.0, dist, 1.0)
    unit = diff / safe[..., None]
    unit = np.where(dist[..., None] > 0.0, unit, 0.0)

    from .geometry import CORNER_SIGNS

    theta = pred_params[:, 6]
    c, s = np.cos(theta), np.sin(theta)
    dpred = np.zeros_like(pred_params)
    dpred[:, 0:3] = unit.sum(axis=1)
    # columns of R(theta): d corner / d extent_j = R[:, j] * sign_kj / ... signs
    r0 = np.stack([c, s, np.zeros_like(c)], axis=1)       # (M, 3)
    r1 = np.stack([-s, c, np.zeros_like(c)], axis=1)
    r2 = np.stack([np.zeros_like(c), np.zeros_like(c), np.ones_like(c)], axis=1)
    for j, rcol in enumerate((r0, r1, r2)):
        proj = (unit * rcol[:, None, :]).sum(axis=2)      # (M, 8)
        dpred[:, 3 + j] = (proj * CORNER_SIGNS[None, :, j]).sum(axis=1)
    # d corner / d theta = R'(theta) @ (sign_k * extents)
    off = CORNER_SIGNS[None, :, :] * pred_params[:, None, 3:6]   # (M, 8, 3)
    dx = -s[:, None] * off[..., 0] - c[:, None] * off[..., 1]
    dy = c[:, None] * off[..., 0] - s[:, None] * off[..., 1]
    dpred[:, 6] = (unit[..., 0] * dx + unit[..., 1] * dy).sum(axis=1)
    return vals, dpred


def corner_loss(pred: Box3D, gt: Box3D) -> float:
    """Sum of Euclidean distances between canonically paired corners."""
    vals, _ = corner_loss_terms(pred.params[None, :], gt.params[None, :])
    return float(vals[0])


@dataclass
class LossWeights:
    cls: float = 1.0               # lambda_1
    reg: float = 1.0               # lambda_2
    corner: float = 0.1            # lambda_3
    gamma: float = 2.0
    laplace_b: float = 1.0
    no_object_weight: float = 0.1


@dataclass
class LossBreakdown:
    total: float
    cls: float
    center: float
    size: float
    heading: float
    corner: float
    weights: LossWeights

    def check_identity(self, tol: float = 1e-9) -> bool:
        w = self.weights
        combined = w.cls * self.cls + w.reg * (
            self.center + self.size + self.heading + w.corner * self.corner)
        return abs(self.total - combined) <= tol


def total_loss(box_params, probs, gt_params, gt_labels, assignment,
               weights: LossWeights, box_dim: int = 7):
    """Composite detection loss.

    box_params: transformed head outputs (N, box_dim); probs: (N, C+1);
    gt_params: (M, box_dim); assignment: gt row -> prediction row.
    Classification covers all N rows (unmatched rows target "no object",
    down-weighted); regression and corner terms cover matched pairs and are
    normalized by the matched count.

    Returns (LossBreakdown, d/d box_params, d/d probs).
    """
    N, O = box_params.shape
    C = probs.shape[1] - 1
    M = len(assignment)
    norm = float(max(M, 1))
    w = weights

    targets = np.zeros_like(probs)
    targets[:, -1] = 1.0
    row_w = np.full(N, w.no_object_weight)
    if M:
        targets[assignment, -1] = 0.0
        targets[assignment, np.asarray(gt_labels, dtype=np.intp)] = 1.0
        row_w[assignment] = 1.0
    cls_val, dprobs = focal_loss(probs, targets, w.gamma, row_w, norm)

    dbox = np.zeros_like(box_params)
    center_val = size_val = heading_val = corner_val = 0.0
    if M:
        P = box_params[assignment]
        G = np.asarray(gt_params, dtype=np.float64)
        n_center = 3 if box_dim == 7 else 2
        cv, dc = laplace_kl(P[:, :n_center], G[:, :n_center], w.laplace_b)
        sv, ds = laplace_kl(P[:, n_center:n_center + (3 if box_dim == 7 else 2)],
                            G[:, n_center:n_center + (3 if box_dim == 7 else 2)],
                            w.laplace_b)
        center_val = float(cv.sum() / norm)
        size_val = float(sv.sum() / norm)
        dP = np.zeros_like(P)
        dP[:, :n_center] = dc / norm
        dP[:, n_center:n_center + ds.shape[1]] = ds / norm
        if box_dim == 7:
            hv, dh = laplace_kl(P[:, 6], G[:, 6], w.laplace_b, wrap=True)
            heading_val = float(hv.sum() / norm)
            dP[:, 6] = dh / norm
            cvals, dcorner = corner_loss_terms(P, G)
            corner_val = float(cvals.sum() / norm)
            dP += w.corner * dcorner / norm
        np.add.at(dbox, assignment, w.reg * dP)

    total = w.cls * cls_val + w.reg * (center_val + size_val + heading_val
                                       + w.corner * corner_val)
    breakdown = LossBreakdown(total=float(total), cls=cls_val, center=center_val,
                              size=size_val, heading=heading_val,
                              corner=corner_val, weights=w)
    return breakdown, dbox, w.cls * dprobs


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class DetectionHead(Module):
    """MLP box/classification heads on a pooled readout vector.

    Box outputs are mapped to valid geometry: centers by a sigmoid scaled to
    the configured scene (or image) range, extents by ``exp(raw) *
    size_scale``, heading (3D only) wrapped to [-pi, pi).
    """

    def __init__(self, rng, *, d_in: int, hidden, n_boxes: int, n_classes: int,
                 center_low, center_high, size_scale: float = 1.0, box_dim: int = 7):
        if n_boxes > MAX_PROPOSALS:
            raise ConfigError(f"n_boxes={n_boxes} exceeds cap {MAX_PROPOSALS}")
        if box_dim not in (4, 7):
            raise ConfigError(f"box_dim must be 4 (2D) or 7 (3D), got {box_dim}")
        self.n_boxes = n_boxes
        self.n_classes = n_classes
        self.box_dim = box_dim
        self.n_center = 3 if box_dim == 7 else 2
        self.center_low = np.asarray(center_low, dtype=np.float64)
        self.center_high = np.asarray(center_high, dtype=np.float64)
        if self.center_low.shape != (self.n_center,):
            raise ConfigError(f"center bounds must have {self.n_center} components")
        self.size_scale = float(size_scale)
        self.box_mlp = MLP(rng, d_in, hidden, n_boxes * box_dim)
        self.cls_mlp = MLP(rng, d_in, hidden, n_boxes * (n_classes + 1))
        self._cache = None

    def forward(self, readout: np.ndarray, mode: Mode = EVAL):
        """Returns (box_params (N, O), probs (N, C+1))."""
        raw_box = self.box_mlp.forward(readout, mode).reshape(self.n_boxes, self.box_dim)
        logits = self.cls_mlp.forward(readout, mode).reshape(self.n_boxes,
                                                             self.n_classes + 1)
        nc = self.n_center
        n_size = self.box_dim - nc - (1 if self.box_dim == 7 else 0)
        sig = 1.0 / (1.0 + np.exp(-raw_box[:, :nc]))
        params = np.empty_like(raw_box)
        params[:, :nc] = self.center_low + sig * (self.center_high - self.center_low)
        sizes = np.exp(raw_box[:, nc:nc + n_size]) * self.size_scale
        params[:, nc:nc + n_size] = sizes
        if self.box_dim == 7:
            params[:, 6] = wrap_angle(raw_box[:, 6])
        probs = softmax(logits, axis=-1)
        self._cache = (sig, sizes, probs)
        return params, probs

    def backward(self, d_params: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
        sig, sizes, probs = self._cache
        nc = self.n_center
        n_size = sizes.shape[1]
        draw = np.empty_like(d_params)
        draw[:, :nc] = d_params[:, :nc] * sig * (1.0 - sig) * (self.center_high
                                                               - self.center_low)
        draw[:, nc:nc + n_size] = d_params[:, nc:nc + n_size] * sizes
        if self.box_dim == 7:
            draw[:, 6] = d_params[:, 6]
        dlogits = softmax_backward(d_probs, probs, axis=-1)
        d_read = self.box_mlp.backward(draw.reshape(-1))
        d_read = d_read + self.cls_mlp.backward(dlogits.reshape(-1))
        return d_read

    def predictions(self, box_params: np.ndarray, probs: np.ndarray) -> DetectionSet:
        if self.box_dim == 7:
            boxes = [Box3D.from_params(p) for p in box_params]
        else:
            boxes = [Box2D.from_params(p) for p in box_params]
        return DetectionSet(boxes, probs)
