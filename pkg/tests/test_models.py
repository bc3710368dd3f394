from collections import Counter

import numpy as np
import pytest

from canguard.errors import DivergenceError, SchemaMismatchError, TrainingError
from canguard.features import FeatureVector, apply_standardizer, fit_standardizer
from canguard.models import (
    AuthDecision,
    Verdict,
    evaluate,
    knn_train,
    knn_predict,
    rolling_majority,
)
from canguard.models.autoencoder import (
    autoencoder_decide,
    autoencoder_train,
    init_params,
    loss_and_grads,
    reconstruction_errors,
)
from canguard.models.kmeans import kmeans_decide, kmeans_fit

LABELS = ("female-all-ages-5", "male-under30-1", "male-30-55-2")


def fv(values, label=None, t=0.0, schema=None):
    values = np.asarray(values, dtype=float)
    schema = schema or tuple(f"f{i}" for i in range(len(values)))
    return FeatureVector(values, tuple(schema), t, label)


def random_training_set(n=200, dim=5, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    y = [LABELS[i] for i in rng.integers(0, len(LABELS), n)]
    return [fv(x, label=lab, t=float(i)) for i, (x, lab) in enumerate(zip(X, y))], X, y


def knn_oracle(X, y, q, k):
    """Exhaustive-scan reference with the same tie rules."""
    order = sorted(range(len(X)), key=lambda i: (float(np.linalg.norm(X[i] - q)), y[i]))
    nearest = order[:k]
    counts = Counter(y[i] for i in nearest)
    top = max(counts.values())
    contenders = [lab for lab in counts if counts[lab] == top]
    return min(contenders, key=lambda lab: (
        sum(float(np.linalg.norm(X[i] - q)) for i in nearest if y[i] == lab), lab))


class TestKnn:
    def test_single_training_point(self):
        model = knn_train([fv([0.0, 0.0], label=LABELS[0])], k=1)
        assert knn_predict(model, fv([100.0, -5.0])) == LABELS[0]

    def test_query_on_training_point(self):
        vs, X, y = random_training_set(50)
        model = knn_train(vs, k=1)
        for i in (0, 13, 49):
            assert knn_predict(model, fv(X[i])) == y[i]

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_bruteforce_oracle(self, k):
        vs, X, y = random_training_set(200, 5, seed=11)
        model = knn_train(vs, k)
        rng = np.random.default_rng(99)
        for q in rng.normal(size=(50, 5)):
            assert knn_predict(model, fv(q)) == knn_oracle(X, y, q, k)

    def test_permutation_invariance(self):
        vs, X, y = random_training_set(60, 3, seed=2)
        rng = np.random.default_rng(3)
        queries = rng.normal(size=(20, 3))
        preds = []
        for perm_seed in (0, 1):
            order = np.random.default_rng(perm_seed).permutation(len(vs))
            model = knn_train([vs[i] for i in order], k=5)
            preds.append([knn_predict(model, fv(q)) for q in queries])
        assert preds[0] == preds[1]

    def test_tie_breaking_on_equal_distance(self):
        # two neighbors at identical distance with different labels: the
        # k=2 vote ties, then summed distance ties, label order decides
        vs = [fv([1.0, 0.0], label=LABELS[1]), fv([-1.0, 0.0], label=LABELS[0])]
        model = knn_train(vs, k=2)
        assert knn_predict(model, fv([0.0, 0.0])) == min(LABELS[0], LABELS[1])

    def test_scale_invariance_through_standardization(self):
        vs, X, y = random_training_set(80, 4, seed=5)
        rng = np.random.default_rng(6)
        queries = rng.normal(size=(10, 4))

        def pipeline(scale):
            scaled = [fv(v.values * scale, label=v.label, t=v.window_start) for v in vs]
            std = fit_standardizer(scaled)
            model = knn_train(apply_standardizer(std, scaled), k=3)
            qs = [fv(np.asarray(q) * scale) for q in queries]
            return [knn_predict(model, s) for s in apply_standardizer(std, qs)]

        assert pipeline(1.0) == pipeline(37.5)

    def test_k_bounds_and_labels_required(self):
        vs, _, _ = random_training_set(10)
        with pytest.raises(TrainingError):
            knn_train(vs, k=11)
        with pytest.raises(TrainingError):
            knn_train([fv([1.0])], k=1)  # unlabeled

    def test_schema_mismatch(self):
        model = knn_train([fv([1.0], label=LABELS[0])], k=1)
        with pytest.raises(SchemaMismatchError):
            knn_predict(model, fv([1.0, 2.0]))


class TestKmeans:
    FOUR_POINTS = [[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]]

    def enumeration_oracle(self, pts, k):
        """Best inertia over all assignments of 4 points to k clusters."""
        import itertools

        pts = np.asarray(pts)
        best = None
        for assign in itertools.product(range(k), repeat=len(pts)):
            if len(set(assign)) < k:
                continue
            cents = [pts[[i for i, a in enumerate(assign) if a == c]].mean(axis=0)
                     for c in range(k)]
            inertia = sum(np.sum((pts[i] - cents[a]) ** 2) for i, a in enumerate(assign))
            if best is None or inertia < best[0]:
                best = (inertia, sorted(map(tuple, cents)))
        return best

    @pytest.mark.parametrize("seed", range(5))
    def test_four_point_fixture_recovers_optimum(self, seed):
        vs = [fv(p, t=float(i)) for i, p in enumerate(self.FOUR_POINTS)]
        model = kmeans_fit(vs, k=2, seed=seed)
        _, want = self.enumeration_oracle(self.FOUR_POINTS, 2)
        got = sorted(map(tuple, np.round(model.centroids, 9)))
        assert got == [tuple(np.round(c, 9)) for c in want]
        assert got == [(0.0, 0.5), (10.0, 10.5)]

    def test_k_equals_n_zero_inertia(self):
        vs = [fv(p) for p in self.FOUR_POINTS]
        model = kmeans_fit(vs, k=4, seed=0)
        assert model.inertia_history[-1] == pytest.approx(0.0, abs=1e-18)

    def test_duplicated_dataset_same_centroids(self):
        vs = [fv(p) for p in self.FOUR_POINTS]
        m1 = kmeans_fit(vs, k=2, seed=7)
        m2 = kmeans_fit(vs + vs, k=2, seed=7)
        assert sorted(map(tuple, np.round(m1.centroids, 9))) == \
               sorted(map(tuple, np.round(m2.centroids, 9)))

    @pytest.mark.parametrize("seed", range(20))
    def test_inertia_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        vs = [fv(row) for row in rng.normal(size=(40, 3))]
        model = kmeans_fit(vs, k=4, seed=seed)
        hist = model.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_training_vector_authorized_at_full_quantile(self):
        rng = np.random.default_rng(8)
        vs = [fv(row, t=float(i)) for i, row in enumerate(rng.normal(size=(30, 4)))]
        model = kmeans_fit(vs, k=3, seed=0, quantile=1.0)
        for v in vs:
            assert kmeans_decide(model, v).verdict is Verdict.AUTHORIZED

    def test_far_outlier_unauthorized(self):
        rng = np.random.default_rng(9)
        vs = [fv(row) for row in rng.normal(size=(30, 4))]
        model = kmeans_fit(vs, k=3, seed=0)
        max_train = max(model.train_distances)
        direction = np.ones(4) / 2.0
        outlier = fv(model.centroids[0] + direction * (10 * max_train))
        decision = kmeans_decide(model, outlier)
        assert decision.verdict is Verdict.UNAUTHORIZED
        assert decision.score > model.threshold

    def test_boundary_score_authorized(self):
        vs = [fv(p) for p in self.FOUR_POINTS]
        model = kmeans_fit(vs, k=2, seed=0, quantile=1.0)
        boundary = fv([0.0, 0.5 + model.threshold])
        d = kmeans_decide(model, boundary)
        assert d.score == pytest.approx(model.threshold)
        assert d.verdict is Verdict.AUTHORIZED

    def test_raising_quantile_never_raises_training_frr(self):
        rng = np.random.default_rng(10)
        vs = [fv(row) for row in rng.normal(size=(60, 3))]
        frrs = []
        for q in (0.8, 0.9, 0.95, 0.99, 1.0):
            model = kmeans_fit(vs, k=4, seed=1, quantile=q)
            rejected = sum(kmeans_decide(model, v).verdict is Verdict.UNAUTHORIZED
                           for v in vs)
            frrs.append(rejected / len(vs))
        assert all(b <= a + 1e-12 for a, b in zip(frrs, frrs[1:]))

    def test_needs_k_vectors(self):
        with pytest.raises(TrainingError):
            kmeans_fit([fv([1.0])], k=2, seed=0)


class TestAutoencoder:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(10, 6))
        weights, biases = init_params((6, 4, 2, 4, 6), seed=5)
        _, gw, gb = loss_and_grads(weights, biases, X)
        eps = 1e-5
        worst = 0.0
        for arrs, grads in ((weights, gw), (biases, gb)):
            for A, G in zip(arrs, grads):
                it = np.nditer(A, flags=["multi_index"])
                while not it.finished:
                    ix = it.multi_index
                    old = A[ix]
                    A[ix] = old + eps
                    lp, _, _ = loss_and_grads(weights, biases, X)
                    A[ix] = old - eps
                    lm, _, _ = loss_and_grads(weights, biases, X)
                    A[ix] = old
                    fd = (lp - lm) / (2 * eps)
                    rel = abs(G[ix] - fd) / max(abs(G[ix]), abs(fd), 1e-8)
                    worst = max(worst, rel)
                    it.iternext()
        assert worst < 1e-4

    def test_identity_capable_layout_fits(self):
        # bottleneck = input dim; tanh is near-linear at this amplitude, so
        # the network has the capacity to pass inputs through
        rng = np.random.default_rng(2)
        X = rng.normal(size=(100, 6)) * 0.2
        vs = [fv(row, t=float(i)) for i, row in enumerate(X)]
        model = autoencoder_train(vs, hidden=(6,), epochs=1000,
                                  learning_rate=0.2, seed=0)
        assert model.loss_history[-1] < 1e-3

    def test_constant_dataset_converges(self):
        vs = [fv([0.4, -0.7, 0.1], t=float(i)) for i in range(30)]
        model = autoencoder_train(vs, hidden=(4, 2, 4), epochs=300,
                                  learning_rate=0.05, seed=1)
        assert model.loss_history[-1] < 1e-6

    def test_loss_decreases_early(self):
        rng = np.random.default_rng(4)
        X = np.concatenate([rng.normal(-2, 0.3, size=(40, 4)),
                            rng.normal(2, 0.3, size=(40, 4))])
        vs = [fv(row, t=float(i)) for i, row in enumerate(X)]
        model = autoencoder_train(vs, hidden=(3, 2, 3), epochs=10,
                                  learning_rate=0.01, seed=0)
        assert model.loss_history[9] < model.loss_history[0]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        vs = [fv(row, t=float(i)) for i, row in enumerate(rng.normal(size=(20, 5)))]
        m1 = autoencoder_train(vs, hidden=(3,), epochs=20, seed=9)
        m2 = autoencoder_train(vs, hidden=(3,), epochs=20, seed=9)
        for a, b in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(a, b)
        assert m1.threshold == m2.threshold

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        rng = np.random.default_rng(6)
        vs = [fv(row * 100) for row in rng.normal(size=(20, 4))]
        with pytest.raises(DivergenceError) as e:
            autoencoder_train(vs, hidden=(3,), epochs=300, learning_rate=50.0, seed=0)
        assert e.value.learning_rate == 50.0
        assert e.value.epoch < 300

    def test_mirrored_layout_enforced(self):
        vs = [fv([1.0, 2.0]), fv([2.0, 1.0])]
        with pytest.raises(TrainingError):
            autoencoder_train(vs, hidden=(4, 2), epochs=1)

    def test_decision_threshold(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(60, 4)) * 0.1
        vs = [fv(row, t=float(i)) for i, row in enumerate(X)]
        model = autoencoder_train(vs, hidden=(2,), epochs=100,
                                  learning_rate=0.05, seed=0, quantile=1.0)
        for v in vs:
            assert autoencoder_decide(model, v).verdict is Verdict.AUTHORIZED
        off = fv(np.full(4, 40.0))
        assert autoencoder_decide(model, off).verdict is Verdict.UNAUTHORIZED

    def test_reconstruction_errors_per_sample(self):
        weights, biases = init_params((3, 2, 3), seed=0)
        X = np.zeros((4, 3))
        errs = reconstruction_errors((weights, biases), X)
        assert errs.shape == (4,)


def decision(verdict, t=0.0, score=0.0, threshold=1.0):
    return AuthDecision(Verdict(verdict), score, threshold, t)


class TestMetrics:
    def test_all_correct(self):
        ds = [decision("authorized", t=i) for i in range(5)] + \
             [decision("unauthorized", t=5 + i) for i in range(5)]
        ts = [Verdict.AUTHORIZED] * 5 + [Verdict.UNAUTHORIZED] * 5
        m = evaluate(ds, ts)
        assert m.accuracy == 1.0 and m.far == 0.0 and m.frr == 0.0 and m.f1 == 1.0

    def test_inverted_verdicts(self):
        ds = [decision("unauthorized", t=i) for i in range(5)] + \
             [decision("authorized", t=5 + i) for i in range(5)]
        ts = [Verdict.AUTHORIZED] * 5 + [Verdict.UNAUTHORIZED] * 5
        m = evaluate(ds, ts)
        assert m.accuracy == 0.0 and m.far == 1.0 and m.frr == 1.0

    def test_hand_built_ten_decision_fixture(self):
        # truths:    A A A A A A U U U U
        # verdicts:  A A A A A U U U A A
        # TP=2 FN=2 FP=1 TN=5 -> acc 0.7, precision 2/3, recall 0.5,
        # F1 = 2*(2/3*1/2)/(2/3+1/2) = 4/7, FAR = 2/4, FRR = 1/6
        verdicts = ["authorized"] * 5 + ["unauthorized"] * 3 + ["authorized"] * 2
        truths = [Verdict.AUTHORIZED] * 6 + [Verdict.UNAUTHORIZED] * 4
        ds = [decision(v, t=float(i)) for i, v in enumerate(verdicts)]
        m = evaluate(ds, truths)
        assert m.accuracy == pytest.approx(0.7)
        assert m.precision == pytest.approx(2 / 3)
        assert m.recall == pytest.approx(0.5)
        assert m.f1 == pytest.approx(4 / 7)
        assert m.far == pytest.approx(0.5)
        assert m.frr == pytest.approx(1 / 6)
        # first correct unauthorized verdict is at t=6; session starts at 0
        assert m.mean_time_to_detection == pytest.approx(6.0)

    def test_absent_class_flagged_undefined(self):
        ds = [decision("authorized", t=i) for i in range(4)]
        ts = [Verdict.AUTHORIZED] * 4
        m = evaluate(ds, ts)
        assert m.far is None and "far" in m.undefined
        assert m.recall is None and m.precision is None
        assert m.mean_time_to_detection is None

    def test_sessions_split_ttd(self):
        ds = [decision("authorized", t=0), decision("unauthorized", t=30),
              decision("authorized", t=0), decision("unauthorized", t=10)]
        ts = [Verdict.AUTHORIZED, Verdict.UNAUTHORIZED] * 2
        m = evaluate(ds, ts, session_ids=["a", "a", "b", "b"])
        assert m.mean_time_to_detection == pytest.approx(20.0)
        assert m.counts["theft_sessions"] == 2

    def test_length_mismatch(self):
        with pytest.raises(TrainingError):
            evaluate([decision("authorized")], [])


class TestRollingMajority:
    def test_majority_window(self):
        A, U = Verdict.AUTHORIZED, Verdict.UNAUTHORIZED
        out = rolling_majority([A, A, U, U, U], n=3)
        assert out == [A, A, A, U, U]

    def test_tie_is_none(self):
        A, U = Verdict.AUTHORIZED, Verdict.UNAUTHORIZED
        assert rolling_majority([A, U], n=2)[1] is None
