import numpy as np
import pytest

from vills import evaluate as EV
from vills import synthetic as S
from vills import tensor as T
from vills import ufla as U
from vills.config import Config
from vills.errors import DataError, ProtocolError, SamplingError
from vills.tensor import Tensor


# ---------------------------------------------------------------------------
# brute-force oracles (independent of the library implementations)
# ---------------------------------------------------------------------------


def oracle_rank_k(sims, q_labels, g_labels, k):
    hits = 0
    for i in range(sims.shape[0]):
        scored = sorted(
            range(sims.shape[1]), key=lambda j: (-sims[i, j], j)
        )  # stable: gallery order on ties
        top = [g_labels[j] for j in scored[:k]]
        hits += int(q_labels[i] in top)
    return hits / sims.shape[0]


def oracle_map(sims, q_labels, g_labels):
    aps = []
    for i in range(sims.shape[0]):
        scored = sorted(range(sims.shape[1]), key=lambda j: (-sims[i, j], j))
        rel_positions = [
            r + 1 for r, j in enumerate(scored) if g_labels[j] == q_labels[i]
        ]
        precisions = [
            sum(1 for p in rel_positions if p <= r) / r for r in rel_positions
        ]
        aps.append(sum(precisions) / len(precisions))
    return sum(aps) / len(aps)


def oracle_tar_at_far(genuine, impostor, far):
    candidates = sorted(set(list(genuine) + list(impostor))) + [max(impostor) + 1.0]
    for t in candidates:
        if sum(1 for s in impostor if s >= t) / len(impostor) <= far:
            return sum(1 for s in genuine if s >= t) / len(genuine)
    return 0.0


def random_index(rng, n_query=None, n_gallery=None, dim=6):
    nq = n_query or int(rng.integers(1, 25))
    ng = n_gallery or int(rng.integers(2, 50))
    labels = rng.integers(0, 5, size=ng)
    q_labels = labels[rng.integers(0, ng, size=nq)]  # guarantee presence
    q = rng.standard_normal((nq, dim))
    g = rng.standard_normal((ng, dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return EV.EmbeddingIndex(g, labels, q, q_labels)


class TestRankK:
    def test_correct_entry_on_top(self):
        gallery = np.eye(3)
        index = EV.EmbeddingIndex(gallery, np.array([0, 1, 2]), gallery[[1]], np.array([1]))
        assert EV.rank_k(index, 1) == 1.0

    def test_k_equal_gallery_size_is_one(self, rng):
        index = random_index(rng)
        assert EV.rank_k(index, len(index.gallery_labels)) == 1.0

    def test_matches_bruteforce_on_200_instances(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            index = random_index(rng)
            k = int(rng.integers(1, len(index.gallery_labels) + 1))
            sims = index.similarities()
            got = EV.rank_k(index, k)
            want = oracle_rank_k(sims, index.query_labels, index.gallery_labels, k)
            assert abs(got - want) <= 1e-12

    def test_monotone_in_k(self, rng):
        index = random_index(rng, n_query=10, n_gallery=30)
        values = [EV.rank_k(index, k) for k in range(1, 31)]
        assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0

    def test_missing_identity_rejected_with_name(self, rng):
        g = np.eye(3)
        with pytest.raises(ProtocolError, match="7"):
            EV.EmbeddingIndex(g, np.array([0, 1, 2]), g[[0]], np.array([7]))


class TestMeanAveragePrecision:
    def test_single_relevant_at_rank_one(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0]])
        index = EV.EmbeddingIndex(g, np.array([0, 1]), np.array([[1.0, 0.0]]), np.array([0]))
        assert EV.mean_average_precision(index) == 1.0

    def test_relevants_at_ranks_one_and_three(self):
        # similarities 1.0, 0.5, 0.3 with labels 0, 1, 0 -> AP = (1 + 2/3) / 2
        g = np.array([[1.0, 0.0], [0.5, np.sqrt(1 - 0.25)], [0.3, np.sqrt(1 - 0.09)]])
        index = EV.EmbeddingIndex(g, np.array([0, 1, 0]), np.array([[1.0, 0.0]]), np.array([0]))
        expected = (1.0 + 2.0 / 3.0) / 2.0
        assert abs(EV.mean_average_precision(index) - expected) < 1e-12

    def test_matches_bruteforce_on_200_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            index = random_index(rng)
            got = EV.mean_average_precision(index)
            want = oracle_map(index.similarities(), index.query_labels, index.gallery_labels)
            assert abs(got - want) <= 1e-12

    def test_argsort_invariance(self, rng):
        """Metrics depend only on the ranking, not similarity magnitudes."""
        index = random_index(rng, n_query=8, n_gallery=20)
        sims = index.similarities()
        transformed = np.tanh(3.0 * sims) * 0.5 + 0.25  # positive monotone

        class FakeIndex(EV.EmbeddingIndex):
            def similarities(self):
                return transformed

        fake = FakeIndex(
            index.gallery_embeddings, index.gallery_labels,
            index.query_embeddings, index.query_labels,
        )
        for k in (1, 5, 20):
            assert EV.rank_k(index, k) == EV.rank_k(fake, k)
        assert abs(EV.mean_average_precision(index) - EV.mean_average_precision(fake)) < 1e-12


class TestTarAtFar:
    def test_hand_enumeration(self):
        scores = EV.MatchScores(np.array([0.9]), np.array([0.1, 0.2]))
        assert EV.tar_at_far(scores, 0.01) == 1.0

    def test_far_one_accepts_everything(self, rng):
        scores = EV.MatchScores(rng.uniform(-1, 1, 9), rng.uniform(-1, 1, 7))
        assert EV.tar_at_far(scores, 1.0) == 1.0

    def test_reversed_separation_gives_zero(self):
        scores = EV.MatchScores(np.array([0.0, 0.1]), np.array([0.5, 0.6, 0.7]))
        assert EV.tar_at_far(scores, 0.01) == 0.0

    def test_matches_bruteforce_on_200_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            genuine = rng.uniform(-1, 1, int(rng.integers(1, 40)))
            impostor = rng.uniform(-1, 1, int(rng.integers(1, 40)))
            far = float(rng.choice([0.01, 0.1, 0.3, 0.5, 1.0, rng.uniform(0.001, 1.0)]))
            got = EV.tar_at_far(EV.MatchScores(genuine, impostor), far)
            want = oracle_tar_at_far(list(genuine), list(impostor), far)
            assert abs(got - want) <= 1e-12

    def test_monotone_in_far_target(self, rng):
        scores = EV.MatchScores(rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 40))
        fars = np.linspace(0.01, 1.0, 25)
        values = [EV.tar_at_far(scores, f) for f in fars]
        assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))

    def test_empty_lists_rejected(self):
        with pytest.raises(ProtocolError):
            EV.tar_at_far(EV.MatchScores(np.array([]), np.array([0.5])), 0.1)


class TestIdCrossEntropy:
    def test_uniform_logits_give_log_c(self, rng):
        w = Tensor(np.zeros((6, 4)))
        b = Tensor(np.zeros(6))
        emb = Tensor(rng.standard_normal((3, 4)))
        got = EV.id_cross_entropy(emb, [0, 2, 5], w, b).item()
        assert abs(got - np.log(6)) < 1e-12

    def test_large_correct_logit_drives_loss_to_zero(self):
        w = Tensor(np.array([[50.0, 0.0], [-50.0, 0.0]]))
        b = Tensor(np.zeros(2))
        emb = Tensor(np.array([[1.0, 0.0]]))
        assert EV.id_cross_entropy(emb, [0], w, b).item() < 1e-12

    def test_matches_direct_summation_oracle(self, rng):
        for _ in range(20):
            w = rng.standard_normal((5, 3))
            b = rng.standard_normal(5)
            emb = rng.standard_normal((4, 3))
            labels = rng.integers(0, 5, size=4)
            logits = emb @ w.T + b
            expected = 0.0
            for i in range(4):
                z = logits[i] - logits[i].max()
                expected += -(z[labels[i]] - np.log(np.exp(z).sum()))
            expected /= 4
            got = EV.id_cross_entropy(Tensor(emb), labels, Tensor(w), Tensor(b)).item()
            assert abs(got - expected) < 1e-12

    def test_out_of_range_label_rejected(self, rng):
        w = Tensor(np.zeros((3, 2)))
        b = Tensor(np.zeros(3))
        with pytest.raises(DataError):
            EV.id_cross_entropy(Tensor(rng.standard_normal((1, 2))), [3], w, b)


def oracle_triplet(emb, labels, margin):
    terms = []
    n = len(labels)
    for a in range(n):
        pos = [j for j in range(n) if labels[j] == labels[a] and j != a]
        neg = [j for j in range(n) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        d_ap = max(np.linalg.norm(emb[a] - emb[j]) for j in pos)
        d_an = min(np.linalg.norm(emb[a] - emb[j]) for j in neg)
        terms.append(max(0.0, d_ap - d_an + margin))
    return np.mean(terms)


class TestTripletLoss:
    def test_anchor_equals_positive_with_distant_negative(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        got = EV.triplet_loss(Tensor(e), [0, 0, 1], margin=0.3).item()
        assert got == 0.0  # d_ap = 0, d_an = sqrt(2) > margin

    def test_hand_computed_hinges(self):
        e = np.array([[1.0, 0.0, 0.0], [0.8, 0.6, 0.0], [0.95, np.sqrt(1 - 0.95**2), 0.0]])
        labels = [0, 0, 1]
        got = EV.triplet_loss(Tensor(e), labels, margin=0.3).item()
        want = oracle_triplet(e, labels, 0.3)
        assert abs(got - want) < 1e-9

    def test_matches_exhaustive_oracle_on_batches_of_16(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            e = rng.standard_normal((16, 8))
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            labels = rng.integers(0, 4, size=16)
            if len(set(labels.tolist())) < 2 or min(np.bincount(labels).max(), 2) < 2:
                continue
            try:
                got = EV.triplet_loss(Tensor(e), labels, margin=0.3).item()
            except SamplingError:
                continue
            assert abs(got - oracle_triplet(e, labels, 0.3)) < 1e-9

    def test_unminable_batch_rejected(self, rng):
        e = Tensor(rng.standard_normal((3, 4)))
        with pytest.raises(SamplingError):
            EV.triplet_loss(e, [0, 1, 2], margin=0.3)  # no identity has 2 samples

    def test_gradients_flow(self, rng):
        e = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        with T.record() as tape:
            loss = EV.triplet_loss(T.l2_normalize(e), [0, 0, 1, 1, 2, 2], 0.3)
        T.backward(loss, tape)
        assert e.grad is not None


@pytest.fixture(scope="module")
def small_setup():
    cfg = Config(
        {
            "train.dtype": "f64", "encoder.dim": 16, "encoder.depth": 1,
            "encoder.heads": 2, "ufla.prototypes": 8, "ufla.head_hidden": 8,
            "ufla.head_bottleneck": 4,
        }
    )
    model = U.init_model(cfg, seed=0)
    dataset = S.build_dataset(4, 4, 4, seed=1)
    return EV.inference_model_from_state(model), dataset


class TestEmbed:
    def test_unit_norm(self, small_setup):
        inf, ds = small_setup
        emb = EV.embed(ds.images[0].pixels, inf, "image")
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-6

    def test_deterministic(self, small_setup):
        inf, ds = small_setup
        a = EV.embed(ds.videos[0].pixels, inf, "video")
        b = EV.embed(ds.videos[0].pixels, inf, "video")
        assert a.tobytes() == b.tobytes()

    def test_one_frame_video_matches_image_embedding(self, small_setup):
        inf, ds = small_setup
        frame = ds.videos[0].pixels[0]
        a = EV.embed(frame, inf, "image")
        b = EV.embed(frame[None], inf, "video")
        assert np.abs(a - b).max() < 1e-6


class TestProtocols:
    def test_all_protocols_share_one_embedding_path(self, small_setup, monkeypatch):
        inf, ds = small_setup
        calls = []
        original = EV._embed_records

        def spy(records, model, as_modality, take_middle_frame=False):
            calls.append((as_modality, take_middle_frame))
            return original(records, model, as_modality, take_middle_frame)

        monkeypatch.setattr(EV, "_embed_records", spy)
        for protocol in ("image", "video", "mix"):
            EV.build_index(ds, inf, protocol)
        assert calls == [
            ("image", False), ("image", False),
            ("video", False), ("video", False),
            ("image", True), ("video", False),
        ]

    def test_mix_protocol_queries_are_middle_frames(self, small_setup):
        inf, ds = small_setup
        index = EV.build_index(ds, inf, "mix")
        probe, _ = EV.split_records(ds.videos, ds.clips_per_id)
        direct = EV.embed_batch(
            np.stack([r.middle_frame() for r in probe]), inf, "image"
        )
        np.testing.assert_array_equal(index.query_embeddings, direct)
        assert set(index.query_modalities) == {"image"}
        assert set(index.gallery_modalities) == {"video"}

    def test_metrics_in_unit_interval(self, small_setup):
        inf, ds = small_setup
        metrics = EV.evaluate_protocol(ds, inf, "video", far_target=0.1)
        assert set(metrics) == {"rank1", "rank20", "map", "tar@0.1"}
        assert all(0.0 <= v <= 1.0 for v in metrics.values())

    def test_unknown_protocol_rejected(self, small_setup):
        inf, ds = small_setup
        with pytest.raises(ProtocolError):
            EV.build_index(ds, inf, "audio")

    def test_split_needs_two_clips(self, small_setup):
        inf, _ = small_setup
        tiny = S.build_dataset(2, 1, 2, seed=0)
        with pytest.raises(ProtocolError):
            EV.build_index(tiny, inf, "video")


class TestFinetune:
    def test_zero_steps_keeps_embeddings(self, small_setup):
        inf, ds = small_setup
        rec = ds.videos[0]
        before = EV.embed(rec.pixels, inf, "video")
        EV.finetune(inf, ds.videos, n_classes=4, steps=0, seed=0)
        after = EV.embed(rec.pixels, inf, "video")
        assert before.tobytes() == after.tobytes()

    def test_loss_descends_smoothed(self, small_setup):
        inf, ds = small_setup
        import copy

        model = copy.deepcopy(inf)
        reports = EV.finetune(model, ds.videos, n_classes=4, steps=60, seed=0)
        first = np.mean([r.total for r in reports[5:15]])
        last = np.mean([r.total for r in reports[-10:]])
        assert last < first

    def test_needs_minable_identities(self, small_setup):
        import copy

        inf, ds = small_setup
        model = copy.deepcopy(inf)
        with pytest.raises(SamplingError):
            EV.finetune(model, ds.videos[:1], n_classes=4, steps=1, seed=0)
