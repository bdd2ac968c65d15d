import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hashexit import hamming
from hashexit.errors import PolicyError
from hashexit.numerics import check_gradients
from hashexit.autodiff import Tensor
from hashexit.policy import (
    EtsClassifier,
    FlipHistory,
    FlipRecorder,
    LABELS,
    LABEL_TO_INT,
    PolicyState,
    QueryContext,
    build_sequences,
    calibrate_gs_threshold,
    calibrate_qs_threshold,
    decide_exit,
    gs_exit,
    gs_margin,
    label_from_flips,
    leave_one_out_correct,
    qs_exit,
    read_flip_histories,
    train_ets,
    write_flip_histories,
)

rng = np.random.default_rng(55)

T, F = True, False


class TestLabelFromFlips:
    def test_reference_easy_sequence(self):
        # x x v v v v v v v v : one flip
        h = FlipHistory(0, [F, F, T, T, T, T, T, T, T, T])
        assert h.flips == 1
        assert label_from_flips(h) == "easy"

    def test_reference_hard_sequence(self):
        # x x v v x x x v v v : three flips
        h = FlipHistory(0, [F, F, T, T, F, F, F, T, T, T])
        assert h.flips == 3
        assert label_from_flips(h) == "hard"

    def test_alternating_is_skip(self):
        h = FlipHistory(0, [F, T] * 5)
        assert h.flips == 9
        assert label_from_flips(h) == "skip"

    def test_boundaries_are_strict(self):
        two = FlipHistory(0, [T, F, T, T, T, T, T, T, T, T])
        assert two.flips == 2 and label_from_flips(two) == "easy"
        six = FlipHistory(0, [T, F, T, F, T, F, T, T, T, T])
        assert six.flips == 6 and label_from_flips(six) == "hard"
        seven = FlipHistory(0, [F, T, F, T, F, T, F, T, T, T])
        assert seven.flips == 7 and label_from_flips(seven) == "skip"

    def test_never_correct_is_skip_even_with_no_flips(self):
        assert label_from_flips(FlipHistory(0, [F] * 10)) == "skip"

    def test_needs_two_checkpoints(self):
        with pytest.raises(PolicyError):
            label_from_flips(FlipHistory(0, [T]))

    @given(st.lists(st.booleans(), min_size=2, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_pure_and_total(self, checks):
        h = FlipHistory(0, checks)
        assert label_from_flips(h) == label_from_flips(h)
        assert label_from_flips(h) in LABELS
        assert 0 <= h.flips <= len(checks) - 1


class TestLeaveOneOut:
    def test_perfect_codes_all_correct(self):
        # two identities with identical codes per identity
        signs = np.vstack([np.tile(rng.integers(0, 2, 64) * 2 - 1, (3, 1)),
                           np.tile(rng.integers(0, 2, 64) * 2 - 1, (3, 1))])
        ids = np.array([0, 0, 0, 1, 1, 1])
        correct, evaluable = leave_one_out_correct(hamming.pack_matrix(signs), ids)
        assert correct.all() and evaluable.all()

    def test_constant_codes_tie_break_is_deterministic(self):
        signs = np.tile(rng.integers(0, 2, 64) * 2 - 1, (4, 1))
        ids = np.array([0, 0, 1, 1])
        correct, _ = leave_one_out_correct(hamming.pack_matrix(signs), ids)
        # all distances zero: top-1 is the lowest other index, so samples of
        # identity 0 hit each other while identity 1 hits sample 0
        assert correct.tolist() == [True, True, False, False]

    def test_single_sample_identity_excluded_with_warning(self):
        signs = rng.integers(0, 2, size=(3, 64)) * 2 - 1
        ids = np.array([0, 0, 7])
        with pytest.warns(UserWarning):
            correct, evaluable = leave_one_out_correct(hamming.pack_matrix(signs), ids)
        assert not evaluable[2]
        assert not correct[2]

    def test_recorder_accumulates_and_persists(self, tmp_path):
        signs = rng.integers(0, 2, size=(4, 64)) * 2 - 1
        ids = np.array([0, 0, 1, 1])
        rec = FlipRecorder(range(4))
        codes = hamming.pack_matrix(signs)
        rec.record(codes, ids)
        rec.record(codes, ids)
        labeled = rec.labeled()
        assert len(labeled) == 4
        assert all(len(h.checks) == 2 for h, _ in labeled)
        path = tmp_path / "flips.txt"
        write_flip_histories(path, [h for h, _ in labeled])
        loaded = read_flip_histories(path)
        assert [(h.sample_id, h.checks) for h in loaded] == [
            (h.sample_id, h.checks) for h, _ in labeled
        ]


class TestEtsClassifier:
    def test_forward_shape_and_determinism(self):
        ets = EtsClassifier(input_dim=6, hidden=8, rng=np.random.default_rng(0))
        seqs = rng.standard_normal((3, 5, 6)).astype(np.float32)
        a = ets.forward(seqs).data
        b = ets.forward(seqs).data
        assert a.shape == (3, 3)
        assert np.array_equal(a, b)

    def test_rejects_wrong_sequence_length(self):
        ets = EtsClassifier(input_dim=6, hidden=8)
        with pytest.raises(PolicyError):
            ets.forward(rng.standard_normal((2, 4, 6)))

    def test_cell_gradient(self):
        ets = EtsClassifier(input_dim=5, hidden=6, rng=np.random.default_rng(1))
        layer = ets.layers[0]
        h0 = Tensor(rng.standard_normal((2, 6)) * 0.3)

        def f(x):
            return ets.cell(x, h0, layer).square().sum()

        assert check_gradients(f, rng.standard_normal((2, 5)), h=1e-5) < 1e-4

    def test_full_network_parameter_gradient(self):
        ets = EtsClassifier(input_dim=4, hidden=5, rng=np.random.default_rng(2))
        seqs = rng.standard_normal((3, 5, 4))
        from hashexit.losses import classifier_nll

        labels = np.array([0, 1, 2])
        w = ets.layers[0]["w_cand"]

        def f(t):
            w.data = t.data
            saved = w.data
            out = None
            try:
                w_backup = ets.layers[0]["w_cand"]
                ets.layers[0]["w_cand"] = t
                out = classifier_nll(ets.forward(seqs), labels)
            finally:
                ets.layers[0]["w_cand"] = w_backup
                w_backup.data = saved
            return out

        assert check_gradients(f, w.data.copy(), h=1e-5) < 1e-4

    def test_training_fits_separable_sequences(self):
        g = np.random.default_rng(11)
        n_per = 30
        dim = 8
        anchors = g.standard_normal((3, dim)) * 4.0
        seqs, labels = [], []
        for cls in range(3):
            for _ in range(n_per):
                seqs.append(anchors[cls] + g.standard_normal((5, dim)) * 0.2)
                labels.append(cls)
        seqs = np.array(seqs, dtype=np.float32)
        labels = np.array(labels)
        ets = EtsClassifier(input_dim=dim, hidden=16, rng=g)
        train_ets(ets, seqs, labels, epochs=60, lr=0.1, batch_size=16, rng=g)
        acc = (ets.predict(seqs) == labels).mean()
        assert acc >= 0.99

    def test_zero_epochs_leaves_params_untouched(self):
        g = np.random.default_rng(3)
        ets = EtsClassifier(input_dim=4, hidden=5, rng=g)
        before = {k: v.data.copy() for k, v in ets.named_params().items()}
        train_ets(ets, rng.standard_normal((6, 5, 4)), np.zeros(6, int), epochs=0, lr=0.1, rng=g)
        for k, v in ets.named_params().items():
            assert np.array_equal(v.data, before[k])

    def test_absent_class_warns(self):
        g = np.random.default_rng(4)
        ets = EtsClassifier(input_dim=4, hidden=5, rng=g)
        with pytest.warns(UserWarning):
            train_ets(ets, rng.standard_normal((6, 5, 4)), np.zeros(6, int), epochs=1, lr=0.01, rng=g)


def build_index(signs, ids, s1=None, stage_lens=(64, 64, 128, 256)):
    n = signs.shape[0]
    codes = {}
    g = np.random.default_rng(0)
    for k, length in enumerate(stage_lens, start=1):
        stage_signs = signs if length == signs.shape[1] else (
            g.integers(0, 2, size=(n, length)) * 2 - 1
        )
        codes[k] = hamming.pack_matrix(stage_signs, stage=k)
    return hamming.GalleryIndex(
        codes=codes,
        ids=np.asarray(ids, np.uint32),
        cams=np.zeros(n, np.uint32),
        s1_features=s1,
    )


class TestHeuristics:
    def test_qs_duplicate_exits(self):
        signs = rng.integers(0, 2, size=(10, 64)) * 2 - 1
        index = build_index(signs, np.arange(10))
        q = hamming.pack(signs[4], stage=1)
        assert qs_exit(q, index, tau_qs=1.0, stage=1)

    def test_qs_zero_threshold_never_exits(self):
        signs = rng.integers(0, 2, size=(10, 64)) * 2 - 1
        index = build_index(signs, np.arange(10))
        q = hamming.pack(signs[4], stage=1)
        assert not qs_exit(q, index, tau_qs=0.0, stage=1)

    def test_gs_maximal_margin_exits(self):
        base = np.ones(64, dtype=int)
        signs = np.vstack([base, -base])
        index = build_index(signs, [0, 1])
        q = hamming.pack(base, stage=1)
        assert gs_exit(q, index, tau_gs=63, stage=1)
        assert not gs_exit(q, index, tau_gs=64, stage=1)  # max possible margin

    def test_gs_single_identity_never_exits(self):
        signs = rng.integers(0, 2, size=(4, 64)) * 2 - 1
        index = build_index(signs, [3, 3, 3, 3])
        with pytest.warns(UserWarning):
            assert not gs_exit(hamming.pack(signs[0], stage=1), index, tau_gs=0, stage=1)

    def test_gs_margin_matches_brute_force(self):
        for trial in range(20):
            g = np.random.default_rng(trial)
            signs = g.integers(0, 2, size=(30, 64)) * 2 - 1
            ids = g.integers(0, 6, size=30)
            index = build_index(signs, ids)
            q = hamming.pack(g.integers(0, 2, 64) * 2 - 1, stage=1)
            dists = np.array([
                hamming.hamming_distance(q, index.stage_codes(1)[i]) for i in range(30)
            ])
            order = sorted(range(30), key=lambda i: (dists[i], i))
            top_id = ids[order[0]]
            other = [i for i in order if ids[i] != top_id]
            expected = dists[other[0]] - dists[order[0]] if other else None
            assert gs_margin(q, index, stage=1) == expected

    def test_gs_raw_top2_variant(self):
        base = rng.integers(0, 2, size=64) * 2 - 1
        signs = np.vstack([base, base, -base])  # top-2 share an identity
        index = build_index(signs, [0, 0, 1])
        q = hamming.pack(base, stage=1)
        assert gs_margin(q, index, stage=1, distinct_identity=False) == 0
        assert gs_margin(q, index, stage=1, distinct_identity=True) == 64


class TestCalibration:
    def test_qs_sweep_matches_exhaustive(self):
        for trial in range(20):
            g = np.random.default_rng(trial)
            dists = g.integers(0, 30, size=40)
            correct = g.random(40) < 0.7
            tau = calibrate_qs_threshold(dists, correct)
            signed = np.where(correct, 1, -1)

            def score(t):
                return signed[dists < t].sum()

            best = max(score(t) for t in range(0, 32))
            assert score(tau) == best

    def test_gs_sweep_matches_exhaustive(self):
        for trial in range(20):
            g = np.random.default_rng(100 + trial)
            margins = g.integers(0, 30, size=40)
            correct = g.random(40) < 0.7
            tau = calibrate_gs_threshold(margins, correct)
            signed = np.where(correct, 1, -1)

            def score(t):
                return signed[margins > t].sum()

            best = max(score(t) for t in range(0, 32))
            assert score(tau) == best

    def test_ties_prefer_conservative(self):
        # no correct exits possible: never-exit thresholds win
        dists = np.array([3, 5])
        correct = np.array([False, False])
        assert calibrate_qs_threshold(dists, correct) == 0
        margins = np.array([3, 5])
        assert calibrate_gs_threshold(margins, correct) == 6


def separable_contexts_and_index(n_ids=4, per_id=3, dim=16):
    """Gallery clusters + one context per identity with clean stage codes."""
    g = np.random.default_rng(99)
    protos = g.integers(0, 2, size=(n_ids, 256)) * 2 - 1
    gallery_signs = np.repeat(protos, per_id, axis=0)
    ids = np.repeat(np.arange(n_ids), per_id)
    s1 = g.standard_normal((n_ids * per_id, dim)).astype(np.float32)
    codes = {k: hamming.pack_matrix(gallery_signs[:, :length], stage=k)
             for k, length in ((1, 64), (2, 64), (3, 128), (4, 256))}
    index = hamming.GalleryIndex(
        codes=codes, ids=ids.astype(np.uint32), cams=np.zeros(n_ids * per_id, np.uint32),
        s1_features=s1,
    )
    contexts = []
    for i in range(n_ids):
        stage_codes = [hamming.pack(protos[i][:64], stage=1),
                       hamming.pack(protos[i][:64], stage=2),
                       hamming.pack(protos[i][:128], stage=3),
                       hamming.pack(protos[i][:256], stage=4)]
        contexts.append(QueryContext(query_id=i, stage_codes=stage_codes,
                                     s1_feature=s1[i * per_id]))
    return contexts, index


class TestDecideExit:
    def setup_method(self):
        self.contexts, self.index = separable_contexts_and_index()

    def make_ets(self, always: str):
        ets = EtsClassifier(input_dim=16, hidden=4, rng=np.random.default_rng(0))
        bias = np.full(3, -10.0)
        bias[LABEL_TO_INT[always]] = 10.0
        ets.head.weights.data = np.zeros_like(ets.head.weights.data)
        ets.head.bias.data = bias
        return ets

    def test_ets_easy_exits_at_stage_one(self):
        policy = PolicyState(kind="ets", ets=self.make_ets("easy"))
        decision = decide_exit(policy, self.contexts[0], self.index)
        assert decision.stage == 1 and decision.label == "easy"

    def test_ets_hard_runs_full_depth(self):
        policy = PolicyState(kind="ets", ets=self.make_ets("hard"))
        assert decide_exit(policy, self.contexts[0], self.index).stage == 4

    def test_ets_gs_composition_fires_at_intermediate_stage(self):
        # hard prediction + separable gallery: GS triggers at stage 2
        policy = PolicyState(kind="ets+gs", ets=self.make_ets("hard"), tau_gs=0.1)
        decision = decide_exit(policy, self.contexts[0], self.index)
        assert decision.stage == 2
        policy_never = PolicyState(kind="ets+gs", ets=self.make_ets("hard"), tau_gs=1.0)
        assert decide_exit(policy_never, self.contexts[0], self.index).stage == 4

    def test_ets_gs_stage_one_set_equals_ets(self):
        for always in ("easy", "skip"):
            ets = self.make_ets(always)
            p1 = PolicyState(kind="ets", ets=ets)
            p2 = PolicyState(kind="ets+gs", ets=ets, tau_gs=0.2)
            s1 = [decide_exit(p1, c, self.index).stage == 1 for c in self.contexts]
            s2 = [decide_exit(p2, c, self.index).stage == 1 for c in self.contexts]
            assert s1 == s2

    def test_random_policy_fraction(self):
        policy = PolicyState(kind="random")
        g = np.random.default_rng(123)
        stages = [
            decide_exit(policy, self.contexts[0], self.index, rng=g).stage
            for _ in range(1000)
        ]
        frac = np.mean([s == 1 for s in stages])
        assert abs(frac - 0.5) <= 0.05
        assert set(stages) <= {1, 4}

    def test_random_policy_reproducible(self):
        policy = PolicyState(kind="random")
        a = [decide_exit(policy, self.contexts[0], self.index,
                         rng=np.random.default_rng(9)).stage for _ in range(20)]
        b = [decide_exit(policy, self.contexts[0], self.index,
                         rng=np.random.default_rng(9)).stage for _ in range(20)]
        assert a == b

    def test_qs_policy_first_trigger(self):
        policy = PolicyState(kind="qs", tau_qs=0.5)
        decision = decide_exit(policy, self.contexts[0], self.index)
        assert decision.stage == 1  # exact duplicate in gallery

    def test_budget_cap_clamps(self):
        policy = PolicyState(kind="ets", ets=self.make_ets("hard"))
        for cap in (1, 2, 3):
            assert decide_exit(policy, self.contexts[0], self.index, budget_cap=cap).stage <= cap

    def test_missing_calibration_is_policy_error(self):
        with pytest.raises(PolicyError):
            decide_exit(PolicyState(kind="qs"), self.contexts[0], self.index)
        with pytest.raises(PolicyError):
            decide_exit(PolicyState(kind="ets"), self.contexts[0], self.index)

    def test_unknown_kind_rejected(self):
        with pytest.raises(PolicyError):
            PolicyState(kind="oracle")


class TestBuildSequences:
    def test_sequence_layout(self):
        g = np.random.default_rng(12)
        signs = g.integers(0, 2, size=(8, 64)) * 2 - 1
        s1 = g.standard_normal((8, 10)).astype(np.float32)
        index = build_index(signs, np.arange(8), s1=s1)
        codes = hamming.pack_matrix(signs, stage=1)
        seqs = build_sequences(s1, codes, index, leave_one_out=True)
        assert seqs.shape == (8, 5, 10)
        assert seqs.dtype == np.float32
        # first element is the query's own feature
        assert np.array_equal(seqs[3, 0], s1[3])
        # leave-one-out: the query itself cannot be its own retrieval
        top = seqs[3, 1]
        assert not np.array_equal(top, s1[3])

    def test_requires_features(self):
        g = np.random.default_rng(12)
        signs = g.integers(0, 2, size=(6, 64)) * 2 - 1
        index = build_index(signs, np.arange(6))
        with pytest.raises(PolicyError):
            build_sequences(np.zeros((6, 4), np.float32),
                            hamming.pack_matrix(signs, stage=1), index)
