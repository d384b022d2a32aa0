"""
Box Geometry Service
Center/size boxes, center + edge-distance boxes, and overlap metrics (L1, IoU, GIoU)

Scalar dataclasses validate strictly. The array helpers work on (K, 4) float64
arrays and tolerate degenerate boxes (clipped to zero area) so that losses stay
defined while training pushes edges around.
"""
import math
from dataclasses import dataclass

import numpy as np

from apps.localization.exceptions import DegenerateBoxError, InvalidInputError


@dataclass(frozen=True)
class BoxCxCyWH:
    """Axis-aligned box in center/size form, scene units"""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"Box has non-finite coordinates: {values}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidInputError(f"Box needs positive width and height, got w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> 'BoxCxCyWH':
        return cls(cx=(x0 + x1) / 2, cy=(y0 + y1) / 2, w=x1 - x0, h=y1 - y0)

    def to_xyxy(self) -> tuple:
        return (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class EdgeDistances:
    """Distances from an anchor center (cx, cy) to the top/bottom/left/right edges"""
    t: float
    b: float
    l: float  # noqa: E741
    r: float
    cx: float = 0.0
    cy: float = 0.0

    def corners(self) -> tuple:
        return (self.cx - self.l, self.cy - self.t, self.cx + self.r, self.cy + self.b)

    def as_array(self) -> np.ndarray:
        """Distances in (t, b, l, r) order"""
        return np.array([self.t, self.b, self.l, self.r], dtype=np.float64)


def to_edge_distances(box: BoxCxCyWH) -> EdgeDistances:
    """Anchor the distances at the box center: t = b = h/2, l = r = w/2"""
    if not isinstance(box, BoxCxCyWH):
        raise InvalidInputError(f"Expected BoxCxCyWH, got {type(box).__name__}")
    return EdgeDistances(
        t=box.h / 2, b=box.h / 2, l=box.w / 2, r=box.w / 2, cx=box.cx, cy=box.cy,
    )


def from_edge_distances(d: EdgeDistances) -> BoxCxCyWH:
    """
    Rebuild the box whose corners are (cx - l, cy - t, cx + r, cy + b).

    The returned center is the corner midpoint, which differs from the anchor
    when the distances are asymmetric.
    """
    values = (d.t, d.b, d.l, d.r, d.cx, d.cy)
    if not all(math.isfinite(v) for v in values):
        raise InvalidInputError(f"Edge distances are not finite: {values}")
    if d.t + d.b <= 0 or d.l + d.r <= 0:
        raise DegenerateBoxError(
            f"Edge distances span no area: t+b={d.t + d.b}, l+r={d.l + d.r}"
        )
    return BoxCxCyWH.from_xyxy(*d.corners())


def iou(x: BoxCxCyWH, y: BoxCxCyWH) -> float:
    """Intersection over union; 0.0 for disjoint boxes"""
    return float(box_iou_matrix(x.as_array()[None, :], y.as_array()[None, :])[0, 0])


def giou(x: BoxCxCyWH, y: BoxCxCyWH) -> float:
    """Generalized IoU: IoU - (C - U) / C with C the smallest enclosing box area"""
    return float(generalized_box_iou_matrix(x.as_array()[None, :], y.as_array()[None, :])[0, 0])


def l1_distance(x: BoxCxCyWH, y: BoxCxCyWH, scale: float = 1.0) -> float:
    """Mean absolute difference of the four (cx, cy, w, h) coordinates divided by scale"""
    return float(np.mean(np.abs(x.as_array() - y.as_array())) / scale)


# ---------------------------------------------------------------------------
# Array forms
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(boxes, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_edge_distances(boxes: np.ndarray) -> np.ndarray:
    """(K, 4) cxcywh -> (K, 4) center-anchored (t, b, l, r)"""
    boxes = np.asarray(boxes, dtype=np.float64)
    half_w = boxes[..., 2] / 2
    half_h = boxes[..., 3] / 2
    return np.stack([half_h, half_h, half_w, half_w], axis=-1)


def distances_to_target(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Edge distances of target boxes measured from the given anchor centers.

    Args:
        anchors: (K, 2) anchor centers (cx, cy)
        targets: (K, 4) target boxes in cxcywh

    Returns:
        (K, 4) distances in (t, b, l, r) order; negative when the anchor lies outside
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(cxcywh_to_xyxy(targets), -1, 0)
    cx, cy = anchors[..., 0], anchors[..., 1]
    return np.stack([cy - y0, y1 - cy, cx - x0, x1 - cx], axis=-1)


def distances_to_boxes(anchors: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """(K, 2) anchors + (K, 4) (t, b, l, r) -> (K, 4) cxcywh via the corner formula"""
    anchors = np.asarray(anchors, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    cx, cy = anchors[..., 0], anchors[..., 1]
    t, b, l, r = np.moveaxis(distances, -1, 0)  # noqa: E741
    corners = np.stack([cx - l, cy - t, cx + r, cy + b], axis=-1)
    return xyxy_to_cxcywh(corners)


def box_area(boxes_xyxy: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = np.moveaxis(boxes_xyxy, -1, 0)
    return np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)


def _intersection_and_union(a_xyxy: np.ndarray, b_xyxy: np.ndarray):
    lt = np.maximum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = np.minimum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a_xyxy)[:, None] + box_area(b_xyxy)[None, :] - inter
    return inter, union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (K, 4) and (G, 4) cxcywh arrays -> (K, G)"""
    a_xyxy = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b_xyxy = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    inter, union = _intersection_and_union(a_xyxy, b_xyxy)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def generalized_box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between (K, 4) and (G, 4) cxcywh arrays -> (K, G)"""
    a_xyxy = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b_xyxy = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    inter, union = _intersection_and_union(a_xyxy, b_xyxy)
    safe_union = np.where(union > 0, union, 1.0)
    overlap = np.where(union > 0, inter / safe_union, 0.0)

    lt = np.minimum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = np.maximum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    enclose = wh[..., 0] * wh[..., 1]
    safe_enclose = np.where(enclose > 0, enclose, 1.0)
    return np.where(enclose > 0, overlap - (enclose - union) / safe_enclose, -1.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (K, 4) cxcywh arrays -> (K,)"""
    a_xyxy = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b_xyxy = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(a_xyxy[:, :2], b_xyxy[:, :2])
    rb = np.minimum(a_xyxy[:, 2:], b_xyxy[:, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = box_area(a_xyxy) + box_area(b_xyxy) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
