"""Local semantic extraction: keypoint prompts -> per-area masks and crops.

A pluggable keypoint predictor estimates keypoint positions with confidence
scores; per area, member keypoints above the area's confidence threshold
become positive prompts for a pluggable segmenter, whose mask is cropped and
resized into a fixed-extent view.  The reference predictor and segmenter are
oracles backed by the synthetic scenes' analytic ground truth.
"""

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DataError, EmptyPromptError, ExtractionError, ParameterError, ShapeError
from .synthetic import N_KEYPOINTS, N_PARTS, PART_NAMES, keypoint_part


@dataclass
class KeypointSet:
    points: np.ndarray  # [n, 2] (x, y) in pixels
    scores: np.ndarray  # [n] confidences in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ShapeError(f"keypoints must be [n, 2], got {self.points.shape}")
        if self.scores.shape != (self.points.shape[0],):
            raise ShapeError(
                f"scores extent {self.scores.shape} does not match {self.points.shape[0]} keypoints"
            )
        if not np.isfinite(self.points).all():
            raise DataError("keypoint coordinates must be finite")

    @property
    def n(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class AreaSpec:
    area_id: str
    member_indices: frozenset
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"area {self.area_id!r}: tau must lie in [0, 1], got {self.tau}")
        if any(i < 0 for i in self.member_indices):
            raise ParameterError(f"area {self.area_id!r}: negative keypoint index")


@dataclass
class IndicatorVector:
    bits: np.ndarray  # [n] uint8 in {0, 1}

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)

    def any(self):
        return bool(self.bits.any())


@dataclass
class AreaFeature:
    area_id: str
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    crop: np.ndarray  # [h, w, 3] float32


@dataclass
class LseResult:
    features: list
    skipped: list = field(default_factory=list)  # area ids with empty prompts


def default_areas(num_areas=3, taus=(0.5, 0.5, 0.5)):
    """The standard area set: head, torso, legs (three keypoints each)."""
    if not 0 <= num_areas <= N_PARTS:
        raise ParameterError(f"num_areas must lie in 0..{N_PARTS}, got {num_areas}")
    areas = []
    for p in range(num_areas):
        members = frozenset(range(3 * p, 3 * p + 3))
        areas.append(AreaSpec(PART_NAMES[p], members, float(taus[p])))
    return areas


class KeypointPredictor(Protocol):
    def predict(self, image) -> KeypointSet: ...


class AreaSegmenter(Protocol):
    def segment(self, image, keypoints, indicator) -> np.ndarray: ...


class OracleKeypointPredictor:
    """Returns the scene's ground-truth keypoints, optionally noised.

    With zero noise the positions are exact and every score is 1.0.
    """

    def __init__(self, keypoints, position_noise=0.0, score_noise=0.0, rng=None):
        self.keypoints = np.asarray(keypoints, dtype=np.float64)
        self.position_noise = float(position_noise)
        self.score_noise = float(score_noise)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def predict(self, image):
        points = self.keypoints.copy()
        n = points.shape[0]
        if self.position_noise > 0:
            points += self.rng.normal(0.0, self.position_noise, size=points.shape)
        if self.score_noise > 0:
            scores = np.clip(1.0 - np.abs(self.rng.normal(0.0, self.score_noise, size=n)), 0.0, 1.0)
        else:
            scores = np.ones(n)
        return KeypointSet(points, scores)


class FileKeypointPredictor:
    """Predictor backed by a keypoint exchange file (see synthetic.read_keypoint_file)."""

    def __init__(self, table, frame_idx=0):
        if frame_idx not in table:
            raise DataError(f"keypoint file has no frame {frame_idx}")
        self.points, self.scores = table[frame_idx]

    def predict(self, image):
        return KeypointSet(self.points.copy(), self.scores.copy())


class OraclePartSegmenter:
    """Union of ground-truth part rectangles prompted by positive keypoints.

    Parts carrying only negative keypoints are excluded from the mask (the
    parts are disjoint, so on clean scenes this removes nothing).
    """

    def __init__(self, part_masks):
        self.part_masks = np.asarray(part_masks, dtype=np.uint8)

    def segment(self, image, keypoints, indicator):
        bits = indicator.bits
        positive = {keypoint_part(j) for j in range(len(bits)) if bits[j]}
        negative = {keypoint_part(j) for j in range(len(bits)) if not bits[j]} - positive
        mask = np.zeros(self.part_masks.shape[1:], dtype=np.uint8)
        for p in positive:
            mask |= self.part_masks[p]
        for p in negative:
            mask &= 1 - self.part_masks[p]
        return mask


def detect_keypoints(image, predictor, image_id=None, expected_count=N_KEYPOINTS):
    """Run the pluggable predictor; failures become ExtractionError."""
    try:
        kps = predictor.predict(image)
    except Exception as exc:
        raise ExtractionError(f"keypoint predictor failed on image {image_id!r}: {exc}", image_id) from exc
    if expected_count is not None and kps.n != expected_count:
        raise ExtractionError(
            f"predictor returned {kps.n} keypoints, expected {expected_count} (image {image_id!r})",
            image_id,
        )
    return kps


def build_indicator(keypoints, area):
    """Membership bits: 1 exactly for the area's keypoints (unfiltered)."""
    bits = np.zeros(keypoints.n, dtype=np.uint8)
    for j in area.member_indices:
        if j < keypoints.n:
            bits[j] = 1
    return IndicatorVector(bits)


def filter_indicator(indicator, keypoints, area):
    """Keep only members whose confidence exceeds the area threshold."""
    if len(indicator.bits) != keypoints.n:
        raise ShapeError(
            f"indicator length {len(indicator.bits)} does not match {keypoints.n} keypoints"
        )
    bits = indicator.bits & (keypoints.scores > area.tau)
    return IndicatorVector(bits.astype(np.uint8))


def resize_nearest(image, out_h, out_w):
    in_h, in_w = image.shape[:2]
    rows = np.floor((np.arange(out_h) + 0.5) * in_h / out_h).astype(int)
    cols = np.floor((np.arange(out_w) + 0.5) * in_w / out_w).astype(int)
    return image[rows][:, cols]


def segment_area(image, keypoints, indicator, segmenter, area_id="", crop_extent=(16, 8), image_id=None):
    """Mask the prompted region and cut a fixed-extent crop from its bounding box."""
    if not indicator.any():
        raise EmptyPromptError(f"area {area_id!r}: no positive keypoints after filtering")
    try:
        mask = np.asarray(segmenter.segment(image, keypoints, indicator))
    except Exception as exc:
        raise ExtractionError(f"segmenter failed on image {image_id!r}: {exc}", image_id) from exc
    if mask.shape != image.shape[:2]:
        raise ExtractionError(
            f"segmenter mask extent {mask.shape} does not match image {image.shape[:2]}", image_id
        )
    if not np.isin(mask, (0, 1)).all():
        raise ExtractionError("segmenter mask must be binary", image_id)
    mask = mask.astype(np.uint8)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyPromptError(f"area {area_id!r}: segmenter produced an empty mask")
    masked = image * mask[:, :, None]
    box = masked[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    crop = resize_nearest(box, crop_extent[0], crop_extent[1]).astype(np.float32)
    return AreaFeature(area_id, mask, crop)


def lse_extract(image, predictor, segmenter, areas, crop_extent=(16, 8), image_id=None):
    """One AreaFeature per area with a non-empty filtered indicator, in area order."""
    keypoints = detect_keypoints(image, predictor, image_id=image_id, expected_count=None)
    features, skipped = [], []
    for area in areas:
        indicator = filter_indicator(build_indicator(keypoints, area), keypoints, area)
        try:
            features.append(
                segment_area(image, keypoints, indicator, segmenter, area.area_id, crop_extent, image_id)
            )
        except EmptyPromptError:
            skipped.append(area.area_id)
    return LseResult(features, skipped)
