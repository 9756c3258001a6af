"""Unified feature learning: resampler, projection heads, the four
self-supervised losses, the EMA teacher update and the pre-training step.

The teacher and student are identically shaped parameter dicts.  Only the
student is touched by gradients; after every optimizer step the teacher is
pulled toward the student by an exponential moving average, and the teacher
head centers absorb the batch statistics queued during the step.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config, config_to_entries
from .container import load_container, save_container
from .encoder import (
    EncoderConfig,
    TokenBatch,
    embed_tokens,
    encode,
    init_encoder_params,
    run_blocks,
    sample_frame,
)
from .errors import ConfigError, CorruptionError, ParameterError, SamplingError, ShapeError, TrainingAbort
from .lse import OracleKeypointPredictor, OraclePartSegmenter, default_areas, lse_extract
from .tensor import Tensor

_INIT_SCALE = 0.02


# ---------------------------------------------------------------------------
# resampler
# ---------------------------------------------------------------------------


def init_resampler_params(dim, queries, rng, dtype=np.float32):
    params = {"resampler.queries": T.randn_param(rng, (queries, dim), 1.0, dtype)}
    for proj in ("wq", "wk", "wv", "wo"):
        params[f"resampler.{proj}"] = T.randn_param(rng, (dim, dim), _INIT_SCALE, dtype)
    return params


def resample(tokens, params):
    """Cross-attend learned queries over the input tokens: [B, N, d] -> [B, L, d].

    The inputs are treated as an unordered set; any input length maps to
    exactly L output tokens.
    """
    x = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
    dim = params["resampler.wq"].shape[0]
    if x.ndim != 3 or x.shape[-1] != dim:
        raise ConfigError(f"resampler expects [B, N, {dim}] tokens, got {tuple(x.shape)}")
    q = T.matmul(params["resampler.queries"], params["resampler.wq"])  # [L, d]
    k = T.matmul(x, params["resampler.wk"])  # [B, N, d]
    v = T.matmul(x, params["resampler.wv"])
    scores = T.transpose(T.matmul(k, T.transpose(q)), (0, 2, 1))  # [B, L, N]
    attn = T.softmax(T.mul(scores, 1.0 / np.sqrt(dim)))
    return T.matmul(T.matmul(attn, v), params["resampler.wo"])


# ---------------------------------------------------------------------------
# projection heads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    dim: int
    hidden: int
    bottleneck: int
    prototypes: int
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ParameterError("head temperatures must be positive")
        if not self.teacher_temp < self.student_temp:
            raise ParameterError("teacher temperature must be below the student's (sharpening)")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ParameterError("center momentum must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg: Config):
        return cls(
            dim=cfg["encoder.dim"],
            hidden=cfg["ufla.head_hidden"],
            bottleneck=cfg["ufla.head_bottleneck"],
            prototypes=cfg["ufla.prototypes"],
            student_temp=cfg["ufla.student_temp"],
            teacher_temp=cfg["ufla.teacher_temp"],
            center_momentum=cfg["ufla.center_momentum"],
        )


class HeadState:
    """Temperatures plus the teacher's running center and its queued updates."""

    def __init__(self, name, cfg: HeadConfig, dtype=np.float32):
        self.name = name
        self.cfg = cfg
        self.center = np.zeros(cfg.prototypes, dtype=dtype)
        self._queue_sum = np.zeros(cfg.prototypes, dtype=np.float64)
        self._queue_count = 0

    def queue_center_update(self, teacher_logits):
        self._queue_sum += teacher_logits.sum(axis=0, dtype=np.float64)
        self._queue_count += teacher_logits.shape[0]

    def apply_center_update(self):
        if not self._queue_count:
            return
        batch_mean = (self._queue_sum / self._queue_count).astype(self.center.dtype)
        m = self.cfg.center_momentum
        self.center = (m * self.center + (1.0 - m) * batch_mean).astype(self.center.dtype)
        self._queue_sum[:] = 0.0
        self._queue_count = 0


def init_head_params(name, cfg: HeadConfig, rng, dtype=np.float32):
    p = f"head.{name}"
    return {
        f"{p}.w1": T.randn_param(rng, (cfg.dim, cfg.hidden), _INIT_SCALE, dtype),
        f"{p}.b1": T.zeros_param((cfg.hidden,), dtype),
        f"{p}.w2": T.randn_param(rng, (cfg.hidden, cfg.hidden), _INIT_SCALE, dtype),
        f"{p}.b2": T.zeros_param((cfg.hidden,), dtype),
        f"{p}.w3": T.randn_param(rng, (cfg.hidden, cfg.bottleneck), _INIT_SCALE, dtype),
        f"{p}.b3": T.zeros_param((cfg.bottleneck,), dtype),
        f"{p}.prototypes": T.randn_param(rng, (cfg.prototypes, cfg.bottleneck), 1.0, dtype),
    }


def head_logits(tokens, params, head_name):
    """Mean-pool resampled tokens, project, normalize, score against prototypes."""
    x = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
    pooled = T.mean_(x, axis=1) if x.ndim == 3 else x
    p = f"head.{head_name}"
    h = T.gelu(T.add(T.matmul(pooled, params[f"{p}.w1"]), params[f"{p}.b1"]))
    h = T.gelu(T.add(T.matmul(h, params[f"{p}.w2"]), params[f"{p}.b2"]))
    emb = T.l2_normalize(T.add(T.matmul(h, params[f"{p}.w3"]), params[f"{p}.b3"]))
    protos = T.l2_normalize(params[f"{p}.prototypes"])
    return T.matmul(emb, T.transpose(protos))  # [B, K]


def head_distribution(tokens, params, head: HeadState, role):
    """Prototype distribution of resampled tokens.

    Students apply a plain tempered softmax.  Teachers subtract the running
    center, sharpen with the lower temperature, never record gradients, and
    queue a center update from the batch mean of their logits.
    """
    if role == "teacher":
        with T.no_grad():
            logits = head_logits(tokens, params, head.name)
            head.queue_center_update(logits.data)
            centered = T.sub(logits, Tensor(head.center))
            return T.softmax(centered, temperature=head.cfg.teacher_temp)
    if role != "student":
        raise ParameterError(f"role must be student|teacher, got {role!r}")
    return T.softmax(head_logits(tokens, params, head.name), temperature=head.cfg.student_temp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _batch_cross_entropy(target_dist, predicted_dist):
    if target_dist.shape != predicted_dist.shape:
        raise ShapeError(
            f"distribution extents differ: {target_dist.shape} vs {predicted_dist.shape}"
        )
    if __debug__:
        for name, d in (("target", target_dist), ("predicted", predicted_dist)):
            sums = d.data.sum(axis=-1)
            assert d.data.min() >= 0 and np.abs(sums - 1.0).max() < 1e-4, (
                f"{name} rows are not distributions"
            )
    ce = T.mul(T.sum_(T.mul(target_dist.detach(), T.log(predicted_dist)), axis=-1), -1.0)
    return T.mean_(ce)


def feature_loss(teacher_dist, student_dist):
    """Cross-entropy pushing the student's distribution onto the teacher's."""
    return _batch_cross_entropy(teacher_dist, student_dist)


def masking_loss(teacher_dist_unmasked, student_dist_masked):
    """Same cross-entropy form, between unmasked teacher and masked student."""
    return _batch_cross_entropy(teacher_dist_unmasked, student_dist_masked)


def mask_tokens(tokens, ratio, mask_embedding, seed):
    """Replace floor(ratio*N) token rows per item with the learned mask embedding.

    Positions are drawn by seeded uniform sampling without replacement.
    Returns (masked tokens, positions [B, k]).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {ratio}")
    x = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
    b, n, d = x.shape
    k = int(np.floor(ratio * n))
    rng = np.random.default_rng(seed)
    positions = np.stack([np.sort(rng.choice(n, size=k, replace=False)) for _ in range(b)]) if k else np.zeros(
        (b, 0), dtype=np.int64
    )
    if k == 0:
        return x, positions
    hot = np.zeros((b, n, 1), dtype=x.dtype)
    hot[np.arange(b)[:, None], positions] = 1.0
    fill = T.matmul(Tensor(np.ones((b, n, 1), dtype=x.dtype)), T.reshape(mask_embedding, (1, d)))
    masked = T.add(T.mul(x, Tensor(1.0 - hot)), T.mul(fill, Tensor(hot)))
    return masked, positions


def koleo_loss(student_embeddings, eps=1e-8):
    """Spread pooled student embeddings: -mean log(nearest-neighbour distance).

    Embeddings are length-normalized first; the distance is clamped below at
    eps so duplicated embeddings stay finite.
    """
    x = student_embeddings.tokens if isinstance(student_embeddings, TokenBatch) else student_embeddings
    if x.shape[0] < 2:
        warnings.warn("koleo_loss needs at least two embeddings; returning 0", stacklevel=2)
        return Tensor(np.zeros((), dtype=x.dtype))
    e = T.l2_normalize(x)
    d = T.min_neighbor_distances(e)
    clamped = T.add(T.relu(T.sub(d, eps)), eps)  # max(d, eps)
    return T.mul(T.mean_(T.log(clamped)), -1.0)


def alignment_loss(video_emb, frame_emb, video_ids, temperature):
    """Symmetric contrastive alignment of paired video/frame embeddings.

    Row i of both inputs must derive from video `video_ids[i]`; embeddings are
    expected length-normalized.  Cosine logits are tempered and cross-entropy
    is averaged over the row (video->frame) and column (frame->video)
    directions.
    """
    if video_emb.shape != frame_emb.shape:
        raise ShapeError(f"embedding extents differ: {video_emb.shape} vs {frame_emb.shape}")
    video_ids = np.asarray(video_ids)
    b = video_emb.shape[0]
    if video_ids.shape != (b,):
        raise ShapeError(f"expected {b} video ids, got {video_ids.shape}")
    if len(np.unique(video_ids)) != b:
        raise SamplingError("duplicate video ids in batch: contrastive targets must be unique")
    sims = T.matmul(video_emb, T.transpose(frame_emb))  # [B, B]
    eye = Tensor(np.eye(b, dtype=video_emb.dtype))
    row_lp = T.log_softmax(sims, temperature=temperature)
    col_lp = T.log_softmax(T.transpose(sims), temperature=temperature)
    picked = T.add(T.sum_(T.mul(row_lp, eye)), T.sum_(T.mul(col_lp, eye)))
    return T.mul(picked, -0.5 / b)


_LOSS_NAMES = ("feature", "masking", "koleo", "alignment")


def total_loss(loss_f, loss_m, loss_r, loss_a, weights):
    """Weighted sum of the four objectives; aborts on any non-finite term."""
    terms = (loss_f, loss_m, loss_r, loss_a)
    values = {}
    for name, term in zip(_LOSS_NAMES, terms):
        value = float(term.data)
        values[name] = value
        if not np.isfinite(value):
            raise TrainingAbort(f"non-finite {name} loss: {value}", report=values)
    total = T.mul(loss_f, float(weights[0]))
    total = T.add(total, T.mul(loss_m, float(weights[1])))
    total = T.add(total, T.mul(loss_r, float(weights[2])))
    return T.add(total, T.mul(loss_a, float(weights[3])))


# ---------------------------------------------------------------------------
# model state, EMA, optimizer
# ---------------------------------------------------------------------------


@dataclass
class ModelState:
    config: Config
    encoder_config: EncoderConfig
    student: dict
    teacher: dict
    mask_embedding: Tensor
    heads: dict
    step: int = 0

    @property
    def momentum(self):
        return self.config["ufla.ema_momentum"]


def init_model(config: Config, seed=None) -> ModelState:
    seed = config["train.seed"] if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0DE1]))
    dtype = config.dtype
    enc_cfg = EncoderConfig.from_config(config)
    head_cfg = HeadConfig.from_config(config)

    student = init_encoder_params(enc_cfg, rng, dtype)
    student.update(init_resampler_params(enc_cfg.dim, config["ufla.queries"], rng, dtype))
    student.update(init_head_params("feature", head_cfg, rng, dtype))
    student.update(init_head_params("masking", head_cfg, rng, dtype))
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    heads = {name: HeadState(name, head_cfg, dtype) for name in ("feature", "masking")}
    mask_embedding = T.randn_param(rng, (enc_cfg.dim,), _INIT_SCALE, dtype)
    return ModelState(config, enc_cfg, student, teacher, mask_embedding, heads)


def trained_params(model: ModelState):
    return [model.student[k] for k in sorted(model.student)] + [model.mask_embedding]


def ema_update(model: ModelState):
    """teacher <- m * teacher + (1 - m) * student, for every teacher parameter."""
    m = float(model.momentum)
    for key in sorted(model.teacher):
        if key not in model.student:
            raise CorruptionError(f"teacher parameter {key!r} has no student counterpart")
        t, s = model.teacher[key], model.student[key]
        if t.shape != s.shape:
            raise CorruptionError(f"parameter {key!r}: teacher {t.shape} vs student {s.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.data[...] = s.data
            continue
        t.data *= m
        t.data += (1.0 - m) * s.data


def clip_and_step(params, learning_rate, clip_norm):
    """Plain SGD with a global gradient-norm clip; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    norm = float(np.sqrt(total))
    scale = 1.0 if norm <= clip_norm else clip_norm / norm
    if learning_rate != 0.0:
        step = learning_rate * scale
        for p in params:
            if p.grad is not None:
                p.data -= step * p.grad
    return norm


# ---------------------------------------------------------------------------
# batches and the training step
# ---------------------------------------------------------------------------


@dataclass
class PretrainBatch:
    videos: np.ndarray  # [Bv, T, h, w, 3]
    images: np.ndarray  # [Bi, H, W, 3]
    crops: np.ndarray  # [Nc, h, w, 3] local views
    crop_source: np.ndarray  # [Nc] slot into (videos ++ images)


def build_pretrain_batch(dataset, config: Config, rng) -> PretrainBatch:
    """Sample records and pre-extract their local views (pure batch assembly)."""
    n_videos = config["train.batch_videos"]
    n_images = config["train.batch_images"]
    if len(dataset.videos) < n_videos or len(dataset.images) < n_images:
        raise SamplingError(
            f"dataset has {len(dataset.videos)} videos / {len(dataset.images)} images, "
            f"batch needs {n_videos} / {n_images}"
        )
    vid_idx = rng.choice(len(dataset.videos), size=n_videos, replace=False)
    img_idx = rng.choice(len(dataset.images), size=n_images, replace=False)
    video_recs = [dataset.videos[i] for i in vid_idx]
    image_recs = [dataset.images[i] for i in img_idx]

    areas = default_areas(config["lse.areas"], config.area_taus)
    crops, sources = [], []
    if areas:
        pos_noise = config["lse.keypoint_noise"]
        score_noise = config["lse.score_noise"]
        crop_extent = config.crop_extent
        for slot, (rec, frame_t) in enumerate(
            [(r, r.frames // 2) for r in video_recs] + [(r, 0) for r in image_recs]
        ):
            predictor = OracleKeypointPredictor(
                rec.frame_keypoints(frame_t), pos_noise, score_noise, rng
            )
            segmenter = OraclePartSegmenter(rec.frame_masks(frame_t))
            result = lse_extract(
                rec.frame_pixels(frame_t), predictor, segmenter, areas, crop_extent,
                image_id=(rec.identity, rec.clip_index),
            )
            for feature in result.features:
                crops.append(feature.crop)
                sources.append(slot)

    frame_extent = dataset.frame_extent
    crops_arr = (
        np.stack(crops)
        if crops
        else np.zeros((0, frame_extent[0], frame_extent[1], 3), dtype=np.float32)
    )
    return PretrainBatch(
        videos=np.stack([r.pixels for r in video_recs]),
        images=np.stack([r.pixels for r in image_recs]),
        crops=crops_arr,
        crop_source=np.asarray(sources, dtype=np.int64),
    )


@dataclass
class StepReport:
    step: int
    total: float
    feature: float
    masking: float
    koleo: float
    alignment: float
    grad_norm: float

    def csv_row(self):
        vals = (self.total, self.feature, self.masking, self.koleo, self.alignment, self.grad_norm)
        return f"{self.step}," + ",".join(f"{v:.10g}" for v in vals)


def _pooled(resampled):
    return T.mean_(resampled, axis=1)


def pretrain_step(batch: PretrainBatch, model: ModelState, seed) -> StepReport:
    """One full self-supervised update.

    Teacher encodes the original videos and images; the student additionally
    sees masked originals, one sampled frame per video, and the local crop
    views.  The four losses combine into the weighted total, the student takes
    an SGD step, the teacher follows by EMA, and the queued center updates are
    applied last.
    """
    cfg = model.config
    enc = model.encoder_config
    dtype = cfg.dtype
    n_videos, n_images = batch.videos.shape[0], batch.images.shape[0]
    if n_videos < 2 or n_images < 1:
        raise SamplingError(f"need >= 2 videos and >= 1 image, got {n_videos}/{n_images}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), model.step, 0x57E9]))
    mask_seed_v, mask_seed_i, frame_seed = (int(v) for v in rng.integers(2**31, size=3))
    mask_ratio = cfg["ufla.mask_ratio"]

    # teacher forwards: originals only, gradient-free
    with T.no_grad():
        t_video = resample(encode(batch.videos, model.teacher, enc, "video", role="teacher"), model.teacher)
        t_image = resample(encode(batch.images, model.teacher, enc, "image", role="teacher"), model.teacher)
        t_f = {
            "video": head_distribution(t_video, model.teacher, model.heads["feature"], "teacher"),
            "image": head_distribution(t_image, model.teacher, model.heads["feature"], "teacher"),
        }
        t_m = {
            "video": head_distribution(t_video, model.teacher, model.heads["masking"], "teacher"),
            "image": head_distribution(t_image, model.teacher, model.heads["masking"], "teacher"),
        }

    params = trained_params(model)
    T.zero_grads(params)
    with T.record() as tape:
        # student originals
        s_video = resample(encode(batch.videos, model.student, enc, "video"), model.student)
        s_image = resample(encode(batch.images, model.student, enc, "image"), model.student)

        # masked originals through the masking head
        masked_dists = []
        for pixels, modality, mask_seed in (
            (batch.videos, "video", mask_seed_v),
            (batch.images, "image", mask_seed_i),
        ):
            emb = embed_tokens(pixels, model.student, enc, modality)
            masked, _ = mask_tokens(emb, mask_ratio, model.mask_embedding, mask_seed)
            frames = pixels.shape[1] if modality == "video" else 1
            tokens = run_blocks(masked, model.student, enc, frames=frames)
            masked_dists.append(
                head_distribution(resample(tokens, model.student), model.student, model.heads["masking"], "student")
            )
        teacher_m = Tensor(np.concatenate([t_m["video"].data, t_m["image"].data]))
        loss_m = masking_loss(teacher_m, T.concat(masked_dists, axis=0))

        # local crop views against their source sample's teacher distribution
        if batch.crops.shape[0]:
            s_crops = resample(encode(batch.crops, model.student, enc, "image"), model.student)
            s_crop_dist = head_distribution(s_crops, model.student, model.heads["feature"], "student")
            teacher_f = np.concatenate([t_f["video"].data, t_f["image"].data])[batch.crop_source]
            loss_f = feature_loss(Tensor(teacher_f), s_crop_dist)
        else:
            loss_f = Tensor(np.zeros((), dtype=dtype))

        # embedding regularizer over the student's original global views
        pooled_video, pooled_image = _pooled(s_video), _pooled(s_image)
        loss_r = koleo_loss(T.concat([pooled_video, pooled_image], axis=0))

        # one sampled frame per video, aligned against its clip
        frames_arr = np.stack(
            [sample_frame(batch.videos[b], "random", frame_seed + b) for b in range(n_videos)]
        )
        s_frames = resample(encode(frames_arr, model.student, enc, "image"), model.student)
        loss_a = alignment_loss(
            T.l2_normalize(pooled_video),
            T.l2_normalize(_pooled(s_frames)),
            np.arange(n_videos),
            cfg["ufla.align_temp"],
        )

        loss = total_loss(loss_f, loss_m, loss_r, loss_a, cfg.loss_weights)

    T.backward(loss, tape)
    grad_norm = clip_and_step(params, cfg["train.learning_rate"], cfg["train.clip_norm"])
    T.zero_grads(params)
    ema_update(model)
    for head in model.heads.values():
        head.apply_center_update()
    model.step += 1
    return StepReport(
        step=model.step,
        total=float(loss.data),
        feature=float(loss_f.data),
        masking=float(loss_m.data),
        koleo=float(loss_r.data),
        alignment=float(loss_a.data),
        grad_norm=grad_norm,
    )


def pretrain(model: ModelState, dataset, steps, seed=None, csv_path=None):
    """Run pre-training steps, optionally appending one CSV row per step.

    CSV columns: step,loss_total,loss_f,loss_m,loss_r,loss_a,grad_norm
    (no header line, so the row count equals the step count).
    """
    seed = model.config["train.seed"] if seed is None else seed
    reports = []
    csv = open(csv_path, "w", encoding="utf-8") if csv_path else None
    try:
        for _ in range(steps):
            batch_rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), model.step, 0xBA7C])
            )
            batch = build_pretrain_batch(dataset, model.config, batch_rng)
            report = pretrain_step(batch, model, seed)
            reports.append(report)
            if csv:
                csv.write(report.csv_row() + "\n")
    finally:
        if csv:
            csv.close()
    return reports


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_entries(model: ModelState):
    entries = {}
    for role, params in (("student", model.student), ("teacher", model.teacher)):
        for key, t in params.items():
            entries[f"{role}.{key}"] = t.data
    entries["student.mask_embedding"] = model.mask_embedding.data
    for name, head in model.heads.items():
        entries[f"head.{name}.center"] = head.center
    entries["state.step"] = np.array([model.step], dtype=np.int64)
    entries.update(config_to_entries(model.config))
    return entries


def save_model(model: ModelState, path):
    save_container(path, model_entries(model))


def load_model(path) -> ModelState:
    from .config import config_from_entries

    entries = load_container(path)
    config = config_from_entries(entries)
    model = init_model(config)
    missing = []
    for role, params in (("student", model.student), ("teacher", model.teacher)):
        for key, t in params.items():
            name = f"{role}.{key}"
            if name not in entries:
                missing.append(name)
            elif entries[name].shape != t.shape:
                raise CorruptionError(f"checkpoint entry {name!r} has extent {entries[name].shape}, expected {t.shape}")
            else:
                t.data = entries[name].astype(t.dtype)
    if "student.mask_embedding" in entries:
        model.mask_embedding.data = entries["student.mask_embedding"].astype(config.dtype)
    else:
        missing.append("student.mask_embedding")
    for name, head in model.heads.items():
        entry = f"head.{name}.center"
        if entry in entries:
            head.center = entries[entry].astype(config.dtype)
        else:
            missing.append(entry)
    if missing:
        raise CorruptionError("checkpoint is missing entries: " + ", ".join(sorted(missing)))
    model.step = int(entries.get("state.step", [0])[0])
    return model
