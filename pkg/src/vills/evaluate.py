"""Downstream path: inference embeddings, fine-tuning, retrieval metrics.

Inference uses only the teacher's shared encoder and the resampler: encode,
resample, mean-pool, length-normalize.  Every protocol (image, video, mixed)
routes through that single embedding function.  Fine-tuning trains the
teacher encoder + resampler together with a fresh identity classifier under
cross-entropy plus batch-hard triplet loss.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Config, config_from_entries, config_to_entries
from .container import load_container, save_container
from .encoder import EncoderConfig, encode
from .errors import ConfigError, CorruptionError, DataError, ProtocolError, SamplingError
from .tensor import Tensor
from .ufla import ModelState, clip_and_step, resample


# ---------------------------------------------------------------------------
# inference model and embeddings
# ---------------------------------------------------------------------------


@dataclass
class InferenceModel:
    """Teacher encoder + resampler (+ optional identity classifier)."""

    config: Config
    encoder_config: EncoderConfig
    params: dict  # encoder.* and resampler.* tensors
    classifier_weight: Optional[Tensor] = None
    classifier_bias: Optional[Tensor] = None

    @property
    def dim(self):
        return self.encoder_config.dim


_TEACHER_KEYS = ("encoder.", "resampler.")


def inference_model_from_state(model: ModelState) -> InferenceModel:
    params = {
        k: Tensor(v.data.copy())
        for k, v in model.teacher.items()
        if k.startswith(_TEACHER_KEYS)
    }
    return InferenceModel(model.config, model.encoder_config, params)


def load_inference_model(path) -> InferenceModel:
    """Build an InferenceModel from any checkpoint carrying teacher entries."""
    entries = load_container(path)
    config = config_from_entries(entries)
    enc_cfg = EncoderConfig.from_config(config)
    params = {}
    missing = []
    from .encoder import init_encoder_params
    from .ufla import init_resampler_params

    reference = init_encoder_params(enc_cfg, np.random.default_rng(0), config.dtype)
    reference.update(
        init_resampler_params(enc_cfg.dim, config["ufla.queries"], np.random.default_rng(0), config.dtype)
    )
    for key, ref in reference.items():
        name = f"teacher.{key}"
        if name not in entries:
            missing.append(name)
            continue
        if entries[name].shape != ref.shape:
            raise CorruptionError(
                f"checkpoint entry {name!r} has extent {entries[name].shape}, expected {ref.shape}"
            )
        params[key] = Tensor(entries[name].astype(config.dtype))
    if missing:
        raise CorruptionError("checkpoint is missing entries: " + ", ".join(missing))
    model = InferenceModel(config, enc_cfg, params)
    if "classifier.weight" in entries:
        model.classifier_weight = Tensor(entries["classifier.weight"].astype(config.dtype))
        if "classifier.bias" in entries:
            model.classifier_bias = Tensor(entries["classifier.bias"].astype(config.dtype))
    return model


def embed(x, model: InferenceModel, modality):
    """Length-normalized pooled embedding of one image or clip."""
    batch = embed_batch(np.asarray(x)[None], model, modality)
    return batch[0]


def embed_batch(xs, model: InferenceModel, modality):
    """[B, ...] images or clips -> [B, d] unit-norm embeddings (gradient-free)."""
    with T.no_grad():
        tokens = encode(xs, model.params, model.encoder_config, modality, role="teacher")
        pooled = T.mean_(resample(tokens, model.params), axis=1)
        return T.l2_normalize(pooled).data.astype(np.float64)


def _embed_with_grad(xs, model: InferenceModel, modality):
    """Same path as embed_batch but trainable (fine-tuning)."""
    tokens = encode(xs, model.params, model.encoder_config, modality, role="student")
    pooled = T.mean_(resample(tokens, model.params), axis=1)
    return T.l2_normalize(pooled)


# ---------------------------------------------------------------------------
# fine-tuning losses
# ---------------------------------------------------------------------------


def id_cross_entropy(embeddings, labels, weight, bias):
    """Softmax cross-entropy over identity logits."""
    labels = np.asarray(labels)
    n_classes = weight.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    logits = T.add(T.matmul(embeddings, T.transpose(weight)), bias)
    log_probs = T.log_softmax(logits)
    hot = np.zeros((labels.size, n_classes), dtype=embeddings.dtype)
    hot[np.arange(labels.size), labels] = 1.0
    return T.mul(T.sum_(T.mul(log_probs, Tensor(hot))), -1.0 / labels.size)


def triplet_loss(embeddings, labels, margin=0.3):
    """Batch-hard triplet loss on normalized embeddings (Euclidean distance).

    Every sample whose identity has another sample in the batch anchors one
    term: max(0, d(anchor, hardest positive) - d(anchor, hardest negative)
    + margin), averaged over anchors.
    """
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    if labels.shape != (b,):
        raise SamplingError(f"expected {b} labels, got {labels.shape}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    anchors = np.where(pos_mask.any(axis=1) & neg_mask.any(axis=1))[0]
    if anchors.size == 0:
        raise SamplingError(
            "batch is not minable: need >= 2 identities with >= 2 samples each"
        )

    gram = T.matmul(embeddings, T.transpose(embeddings))
    sq = T.relu(T.add(T.mul(gram, -2.0), 2.0))  # ||a-b||^2 for unit vectors
    dist = T.sqrt(T.add(sq, 1e-12))
    dmat = dist.data

    # mining is done on values and does not carry gradients
    pos_pick = np.where(pos_mask, dmat, -np.inf).argmax(axis=1)
    neg_pick = np.where(neg_mask, dmat, np.inf).argmin(axis=1)
    row_hot = np.zeros((anchors.size, b), dtype=embeddings.dtype)
    pos_hot = np.zeros_like(row_hot)
    neg_hot = np.zeros_like(row_hot)
    for r, a in enumerate(anchors):
        row_hot[r, a] = 1.0
        pos_hot[r, pos_pick[a]] = 1.0
        neg_hot[r, neg_pick[a]] = 1.0
    anchor_rows = T.matmul(Tensor(row_hot), dist)  # [A, B]
    d_ap = T.sum_(T.mul(anchor_rows, Tensor(pos_hot)), axis=1)
    d_an = T.sum_(T.mul(anchor_rows, Tensor(neg_hot)), axis=1)
    return T.mean_(T.relu(T.add(T.sub(d_ap, d_an), float(margin))))


# ---------------------------------------------------------------------------
# retrieval metrics
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingIndex:
    gallery_embeddings: np.ndarray  # [G, d] unit rows
    gallery_labels: np.ndarray  # [G]
    query_embeddings: np.ndarray  # [Q, d]
    query_labels: np.ndarray  # [Q]
    gallery_modalities: Optional[list] = None
    query_modalities: Optional[list] = None

    def __post_init__(self):
        missing = sorted(set(self.query_labels) - set(self.gallery_labels))
        if missing:
            raise ProtocolError(f"query identities missing from gallery: {missing}")

    def similarities(self):
        return self.query_embeddings @ self.gallery_embeddings.T


def _ranked_gallery_labels(index: EmbeddingIndex):
    sims = index.similarities()
    # stable sort on -sim keeps gallery order on ties
    order = np.argsort(-sims, axis=1, kind="stable")
    return index.gallery_labels[order]


def rank_k(index: EmbeddingIndex, k):
    """Fraction of queries whose top-k gallery entries contain their identity."""
    if k < 1:
        raise ProtocolError(f"rank k must be >= 1, got {k}")
    ranked = _ranked_gallery_labels(index)
    hits = (ranked[:, :k] == index.query_labels[:, None]).any(axis=1)
    return float(hits.mean())


def mean_average_precision(index: EmbeddingIndex):
    ranked = _ranked_gallery_labels(index)
    rel = ranked == index.query_labels[:, None]
    positions = np.arange(1, ranked.shape[1] + 1, dtype=np.float64)
    aps = []
    for row in rel:
        hits = row.cumsum()
        precision_at_rel = hits[row] / positions[row]
        aps.append(precision_at_rel.mean())
    return float(np.mean(aps))


@dataclass
class MatchScores:
    genuine: np.ndarray
    impostor: np.ndarray


def build_match_scores(index: EmbeddingIndex) -> MatchScores:
    sims = index.similarities()
    same = index.query_labels[:, None] == index.gallery_labels[None, :]
    return MatchScores(genuine=sims[same], impostor=sims[~same])


def tar_at_far(scores: MatchScores, far_target):
    """TAR at the lowest threshold whose impostor acceptance rate is <= target."""
    genuine = np.asarray(scores.genuine, dtype=np.float64)
    impostor = np.asarray(scores.impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ProtocolError("tar_at_far needs non-empty genuine and impostor score lists")
    if not 0.0 < far_target <= 1.0:
        raise ProtocolError(f"far target must lie in (0, 1], got {far_target}")
    n = impostor.size
    allowed = int(np.floor(far_target * n))
    # guard float rounding so that allowed/n <= far < (allowed+1)/n exactly
    while allowed + 1 <= n and (allowed + 1) / n <= far_target:
        allowed += 1
    while allowed > 0 and allowed / n > far_target:
        allowed -= 1
    if allowed >= n:
        return 1.0
    bound = np.sort(impostor)[::-1][allowed]  # accept only scores strictly above
    return float((genuine > bound).mean())


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def split_records(records, clips_per_id):
    """Deterministic probe/gallery split by clip index.

    With >= 4 clips per identity every fourth clip (index % 4 == 3) becomes a
    probe; otherwise the last clip per identity does.  Everything else is the
    gallery/training pool.
    """
    if clips_per_id < 2:
        raise ProtocolError("need at least 2 clips per identity to split probe/gallery")
    if clips_per_id >= 4:
        is_probe = lambda c: c % 4 == 3
    else:
        is_probe = lambda c: c == clips_per_id - 1
    probe = [r for r in records if is_probe(r.clip_index)]
    gallery = [r for r in records if not is_probe(r.clip_index)]
    if not probe or not gallery:
        raise ProtocolError("probe/gallery split is empty")
    return probe, gallery


def _embed_records(records, model: InferenceModel, as_modality, take_middle_frame=False):
    """Shared embedding path for every protocol."""
    if take_middle_frame:
        xs = np.stack([r.middle_frame() for r in records])
    else:
        xs = np.stack([r.pixels for r in records])
    emb = embed_batch(xs, model, as_modality)
    labels = np.array([r.identity for r in records], dtype=np.int64)
    return emb, labels


def build_index(dataset, model: InferenceModel, protocol) -> EmbeddingIndex:
    """image: stills vs stills; video: clips vs clips; mix: middle-frame
    images as queries against the full-clip gallery."""
    if protocol == "image":
        probe, gallery = split_records(dataset.images, dataset.clips_per_id)
        qe, ql = _embed_records(probe, model, "image")
        ge, gl = _embed_records(gallery, model, "image")
        q_mod, g_mod = "image", "image"
    elif protocol == "video":
        probe, gallery = split_records(dataset.videos, dataset.clips_per_id)
        qe, ql = _embed_records(probe, model, "video")
        ge, gl = _embed_records(gallery, model, "video")
        q_mod, g_mod = "video", "video"
    elif protocol == "mix":
        probe, gallery = split_records(dataset.videos, dataset.clips_per_id)
        qe, ql = _embed_records(probe, model, "image", take_middle_frame=True)
        ge, gl = _embed_records(gallery, model, "video")
        q_mod, g_mod = "image", "video"
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    return EmbeddingIndex(
        gallery_embeddings=ge,
        gallery_labels=gl,
        query_embeddings=qe,
        query_labels=ql,
        gallery_modalities=[g_mod] * len(gl),
        query_modalities=[q_mod] * len(ql),
    )


def evaluate_protocol(dataset, model: InferenceModel, protocol, far_target=0.01):
    index = build_index(dataset, model, protocol)
    scores = build_match_scores(index)
    return {
        "rank1": rank_k(index, 1),
        "rank20": rank_k(index, min(20, len(index.gallery_labels))),
        "map": mean_average_precision(index),
        f"tar@{far_target:g}": tar_at_far(scores, far_target),
    }


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneReport:
    step: int
    total: float
    cross_entropy: float
    triplet: float


def _sample_pk_batch(records_by_id, rng, n_ids, n_samples):
    ids = sorted(records_by_id)
    chosen = rng.choice(len(ids), size=min(n_ids, len(ids)), replace=False)
    batch = []
    for i in chosen:
        recs = records_by_id[ids[i]]
        take = rng.choice(len(recs), size=min(n_samples, len(recs)), replace=False)
        batch.extend(recs[j] for j in take)
    return batch


def finetune(model: InferenceModel, records, n_classes, steps, seed=0):
    """Train teacher encoder + resampler + fresh classifier on labeled records.

    Uses equally weighted identity cross-entropy and batch-hard triplet loss
    on P x K batches of video records.  Returns per-step reports.
    """
    cfg = model.config
    dtype = cfg.dtype
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF17E]))
    if model.classifier_weight is None:
        model.classifier_weight = T.randn_param(rng, (n_classes, model.dim), 0.02, dtype)
        model.classifier_bias = T.zeros_param((n_classes,), dtype)
    for t in model.params.values():
        t.requires_grad = True
    params = [model.params[k] for k in sorted(model.params)]
    params += [model.classifier_weight, model.classifier_bias]

    by_id = {}
    for r in records:
        by_id.setdefault(r.identity, []).append(r)
    if len(by_id) < 2 or min(len(v) for v in by_id.values()) < 2:
        raise SamplingError("fine-tuning needs >= 2 identities with >= 2 records each")

    margin = cfg["finetune.triplet_margin"]
    lr = cfg["finetune.learning_rate"]
    reports = []
    for step in range(steps):
        batch = _sample_pk_batch(
            by_id, rng, cfg["finetune.batch_identities"], cfg["finetune.batch_samples"]
        )
        labels = np.array([r.identity for r in batch], dtype=np.int64)
        xs = np.stack([r.pixels for r in batch])
        T.zero_grads(params)
        with T.record() as tape:
            emb = _embed_with_grad(xs, model, batch[0].modality)
            ce = id_cross_entropy(emb, labels, model.classifier_weight, model.classifier_bias)
            tri = triplet_loss(emb, labels, margin)
            loss = T.add(ce, tri)
        T.backward(loss, tape)
        clip_and_step(params, lr, cfg["train.clip_norm"])
        T.zero_grads(params)
        reports.append(FinetuneReport(step + 1, float(loss.data), float(ce.data), float(tri.data)))
    for t in model.params.values():
        t.requires_grad = False
    return reports


def finetuned_entries(model: InferenceModel):
    """Checkpoint entries for a fine-tuned model: teacher + classifier only."""
    entries = {f"teacher.{k}": t.data for k, t in model.params.items()}
    entries["classifier.weight"] = model.classifier_weight.data
    entries["classifier.bias"] = model.classifier_bias.data
    entries["state.step"] = np.array([0], dtype=np.int64)
    entries.update(config_to_entries(model.config))
    return entries


def save_finetuned(model: InferenceModel, path):
    save_container(path, finetuned_entries(model))
