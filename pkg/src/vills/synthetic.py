"""Procedural person scenes with analytic keypoint and mask ground truth.

A scene is a stick person made of three stacked colored rectangles (head,
torso, legs) over a black background.  Part colors, proportions and walking
speed are a deterministic function of (identity_id, seed); clips of the same
identity differ only by starting phase.  Videos translate the person
horizontally, bouncing off the frame edges.  Every frame comes with the nine
ground-truth keypoints (three per part) and the three part masks.
"""

from dataclasses import dataclass

import numpy as np

from .container import load_container, save_container
from .errors import DataError, ParameterError

N_KEYPOINTS = 9
N_PARTS = 3
PART_NAMES = ("head", "torso", "legs")


def keypoint_part(index):
    """Part owning a keypoint: 0,1,2 -> head, 3,4,5 -> torso, 6,7,8 -> legs."""
    return index // 3


@dataclass
class SceneRecord:
    """One dataset item: an image or a clip with its ground truth."""

    identity: int
    clip_index: int
    modality: str  # "image" | "video"
    pixels: np.ndarray  # video [T,H,W,3] f32, image [H,W,3] f32, values in [0,1]
    keypoints: np.ndarray  # video [T,9,2] f64, image [9,2] f64, (x, y) pixels
    part_masks: np.ndarray  # video [T,3,H,W] u8, image [3,H,W] u8

    @property
    def frames(self):
        return self.pixels.shape[0] if self.modality == "video" else 1

    def frame_pixels(self, t):
        return self.pixels[t] if self.modality == "video" else self.pixels

    def frame_keypoints(self, t):
        return self.keypoints[t] if self.modality == "video" else self.keypoints

    def frame_masks(self, t):
        return self.part_masks[t] if self.modality == "video" else self.part_masks

    def middle_frame(self):
        return self.frame_pixels(self.frames // 2)


@dataclass
class IdentityTraits:
    colors: np.ndarray  # [3 parts, 3 rgb]
    person_h_frac: float
    person_w_frac: float
    head_frac: float
    torso_frac: float
    part_w_fracs: np.ndarray  # [3]
    speed: float


def identity_traits(identity_id, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(identity_id), 0x1D]))
    return IdentityTraits(
        colors=rng.uniform(0.1, 1.0, size=(N_PARTS, 3)),
        person_h_frac=rng.uniform(0.82, 0.95),
        person_w_frac=rng.uniform(0.65, 0.85),
        head_frac=rng.uniform(0.18, 0.32),
        torso_frac=rng.uniform(0.33, 0.47),
        part_w_fracs=np.array(
            [rng.uniform(0.40, 0.65), rng.uniform(0.85, 1.0), rng.uniform(0.50, 0.75)]
        ),
        speed=rng.uniform(0.5, 2.0),
    )


def _part_rects(traits, height, width, x_offset):
    """Integer rectangles (y0, y1, x0, x1) for head/torso/legs."""
    person_h = min(height, max(N_PARTS * 2, round(height * traits.person_h_frac)))
    person_w = min(width - 2, max(2, round(width * traits.person_w_frac)))
    top = (height - person_h) // 2
    head_h = max(2, round(person_h * traits.head_frac))
    torso_h = max(2, round(person_h * traits.torso_frac))
    legs_h = max(2, person_h - head_h - torso_h)
    rects = []
    y = top
    for part_h, w_frac in zip((head_h, torso_h, legs_h), traits.part_w_fracs):
        part_w = min(person_w, max(2, round(person_w * w_frac)))
        x0 = x_offset + (person_w - part_w) // 2
        rects.append((y, y + part_h, x0, x0 + part_w))
        y += part_h
    return rects, person_w


def _bounce(pos, limit):
    """Reflect a 1-d walk into [0, limit]."""
    if limit <= 0:
        return 0.0
    period = 2.0 * limit
    pos = pos % period
    return pos if pos <= limit else period - pos


def _render_frame(traits, height, width, x_offset):
    pixels = np.zeros((height, width, 3), dtype=np.float32)
    masks = np.zeros((N_PARTS, height, width), dtype=np.uint8)
    keypoints = np.empty((N_KEYPOINTS, 2), dtype=np.float64)
    rects, _ = _part_rects(traits, height, width, x_offset)
    for p, (y0, y1, x0, x1) in enumerate(rects):
        pixels[y0:y1, x0:x1] = traits.colors[p]
        masks[p, y0:y1, x0:x1] = 1
        yc = (y0 + y1 - 1) / 2.0
        part_w = x1 - x0
        for k, frac in enumerate((0.25, 0.5, 0.75)):
            keypoints[3 * p + k] = (x0 + part_w * frac, yc)
    return pixels, keypoints, masks


def generate_scene(identity_id, seed, modality, frames=1, extent=(16, 8), clip_index=0):
    """Deterministic scene for (identity, seed); clips vary by starting phase.

    An image is exactly frame 0 of the video with the same arguments, so a
    one-frame video and the matching image share a bitwise-identical payload.
    """
    if modality not in ("image", "video"):
        raise ParameterError(f"modality must be image|video, got {modality!r}")
    if modality == "video" and frames < 1:
        raise ParameterError(f"a video needs at least one frame, got {frames}")
    height, width = extent
    traits = identity_traits(identity_id, seed)
    clip_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), int(identity_id), int(clip_index), 0xC11F])
    )
    base_frac = clip_rng.uniform(0.0, 1.0)
    _, person_w = _part_rects(traits, height, width, 0)
    x_limit = width - person_w
    count = frames if modality == "video" else 1

    pixels = np.empty((count, height, width, 3), dtype=np.float32)
    keypoints = np.empty((count, N_KEYPOINTS, 2), dtype=np.float64)
    masks = np.empty((count, N_PARTS, height, width), dtype=np.uint8)
    for t in range(count):
        x = int(round(_bounce(base_frac * 2.0 * x_limit + traits.speed * t, x_limit)))
        pixels[t], keypoints[t], masks[t] = _render_frame(traits, height, width, x)

    if modality == "image":
        return SceneRecord(identity_id, clip_index, "image", pixels[0], keypoints[0], masks[0])
    return SceneRecord(identity_id, clip_index, "video", pixels, keypoints, masks)


@dataclass
class SceneDataset:
    identities: int
    clips_per_id: int
    frames: int
    seed: int
    frame_extent: tuple
    image_extent: tuple
    videos: list
    images: list


def build_dataset(identities, clips_per_id, frames, seed, frame_extent=(16, 8), image_extent=(32, 16)):
    """Per (identity, clip): one video at frame extent and one still at image extent."""
    if identities < 1 or clips_per_id < 1:
        raise ParameterError("identities and clips_per_id must be >= 1")
    videos, images = [], []
    for identity in range(identities):
        for clip in range(clips_per_id):
            videos.append(generate_scene(identity, seed, "video", frames, frame_extent, clip))
            images.append(generate_scene(identity, seed, "image", 1, image_extent, clip))
    return SceneDataset(identities, clips_per_id, frames, seed, tuple(frame_extent), tuple(image_extent), videos, images)


def save_dataset(dataset, path):
    entries = {
        "meta.identities": np.array([dataset.identities], dtype=np.int64),
        "meta.clips_per_id": np.array([dataset.clips_per_id], dtype=np.int64),
        "meta.frames": np.array([dataset.frames], dtype=np.int64),
        "meta.seed": np.array([dataset.seed], dtype=np.int64),
        "meta.frame_extent": np.array(dataset.frame_extent, dtype=np.int64),
        "meta.image_extent": np.array(dataset.image_extent, dtype=np.int64),
        "meta.video_count": np.array([len(dataset.videos)], dtype=np.int64),
        "meta.image_count": np.array([len(dataset.images)], dtype=np.int64),
    }
    for kind, records in (("video", dataset.videos), ("image", dataset.images)):
        for i, rec in enumerate(records):
            entries[f"{kind}{i}.pixels"] = rec.pixels
            entries[f"{kind}{i}.keypoints"] = rec.keypoints
            entries[f"{kind}{i}.masks"] = rec.part_masks
            entries[f"{kind}{i}.ids"] = np.array([rec.identity, rec.clip_index], dtype=np.int64)
    save_container(path, entries)


def load_dataset(path):
    entries = load_container(path)
    try:
        video_count = int(entries["meta.video_count"][0])
        image_count = int(entries["meta.image_count"][0])
        videos, images = [], []
        for kind, count, out, modality in (
            ("video", video_count, videos, "video"),
            ("image", image_count, images, "image"),
        ):
            for i in range(count):
                identity, clip = entries[f"{kind}{i}.ids"]
                out.append(
                    SceneRecord(
                        int(identity),
                        int(clip),
                        modality,
                        entries[f"{kind}{i}.pixels"],
                        entries[f"{kind}{i}.keypoints"],
                        entries[f"{kind}{i}.masks"],
                    )
                )
        return SceneDataset(
            identities=int(entries["meta.identities"][0]),
            clips_per_id=int(entries["meta.clips_per_id"][0]),
            frames=int(entries["meta.frames"][0]),
            seed=int(entries["meta.seed"][0]),
            frame_extent=tuple(int(v) for v in entries["meta.frame_extent"]),
            image_extent=tuple(int(v) for v in entries["meta.image_extent"]),
            videos=videos,
            images=images,
        )
    except KeyError as exc:
        raise DataError(f"{path}: dataset container is missing entry {exc}") from exc


# ---------------------------------------------------------------------------
# keypoint exchange files (for external predictors)
# ---------------------------------------------------------------------------


def write_keypoint_file(path, keypoints_by_frame, scores_by_frame):
    """UTF-8 lines `frame_idx kp_idx x y score`, one keypoint per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame, (points, scores) in enumerate(zip(keypoints_by_frame, scores_by_frame)):
            for k, ((x, y), s) in enumerate(zip(points, scores)):
                fh.write(f"{frame} {k} {float(x)!r} {float(y)!r} {float(s)!r}\n")


def read_keypoint_file(path):
    """Returns {frame_idx: (points [n,2], scores [n])}."""
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected `frame kp x y score`, got {line!r}")
            frame, kp = int(parts[0]), int(parts[1])
            rows.setdefault(frame, {})[kp] = (float(parts[2]), float(parts[3]), float(parts[4]))
    result = {}
    for frame, kps in rows.items():
        n = max(kps) + 1
        if sorted(kps) != list(range(n)):
            raise DataError(f"{path}: frame {frame} has gaps in keypoint indices")
        points = np.array([[kps[k][0], kps[k][1]] for k in range(n)], dtype=np.float64)
        scores = np.array([kps[k][2] for k in range(n)], dtype=np.float64)
        result[frame] = (points, scores)
    return result


# ---------------------------------------------------------------------------
# pixel-space retrieval oracle (dataset separability gate, run before training)
# ---------------------------------------------------------------------------


def pixel_nearest_neighbor_rank1(query_records, gallery_records):
    """Rank-1 accuracy of cosine nearest neighbour on flattened raw pixels.

    Clips are averaged over frames first, which marginalizes the walking
    phase; images are used as-is.
    """

    def embed(records):
        rows = [
            (r.pixels.mean(axis=0) if r.modality == "video" else r.pixels).reshape(-1)
            for r in records
        ]
        flat = np.stack(rows).astype(np.float64)
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        return flat / np.maximum(norms, 1e-12)

    q, g = embed(query_records), embed(gallery_records)
    sims = q @ g.T
    best = sims.argmax(axis=1)
    hits = [gallery_records[j].identity == rec.identity for rec, j in zip(query_records, best)]
    return float(np.mean(hits))
