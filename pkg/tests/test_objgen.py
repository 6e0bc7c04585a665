"""Proposal heads, objectness assignment, aggregation losses, masks,
clustering, and object formation."""
import numpy as np
import pytest

from oracle_utils import dbscan_oracle, partition_of

from voteseg import autodiff as ad
from voteseg import objgen as og
from voteseg.autodiff import MlpParams, Tensor, grad_check


class TestHeadForward:
    def test_output_split_geometric(self):
        rng = np.random.default_rng(0)
        params = og.HeadParams.create(rng, in_dim=16, num_classes=5, agg_dim=4)
        feats = Tensor(rng.normal(size=(7, 16)))
        heads = og.head_forward(feats, params)
        assert heads.semantic_logits.data.shape == (7, 5)
        assert heads.aggregation.data.shape == (7, 4)
        assert heads.objectness_logits.data.shape == (7, 2)

    def test_output_split_embedding(self):
        rng = np.random.default_rng(0)
        params = og.HeadParams.create(rng, in_dim=16, num_classes=5, agg_dim=5)
        heads = og.head_forward(Tensor(rng.normal(size=(3, 16))), params)
        assert heads.aggregation.data.shape == (3, 5)

    def test_zero_weights_give_even_objectness(self):
        rng = np.random.default_rng(0)
        params = og.HeadParams.create(rng, in_dim=8, num_classes=5, agg_dim=4)
        for t in params.mlp.parameters():
            t.data[...] = 0.0
        heads = og.head_forward(Tensor(np.ones((4, 8))), params)
        np.testing.assert_allclose(heads.objectness_prob(), 0.5, atol=1e-12)
        assert not heads.predicted_positive().any()  # tie goes to negative


class TestAssignObjectness:
    def test_rule_table(self):
        centers = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        positions = np.array([
            [0.2, 0.0, 0.0],    # d1=0.2 -> positive
            [0.7, 0.0, 0.0],    # d1=0.7 -> negative (far)
            [0.4, 0.0, 0.0],    # d1=0.4, d2=9.6 -> excluded
        ])
        labels = og.assign_objectness(positions, centers)
        assert labels.tolist() == [1, 0, -1]

    def test_ambiguous_between_two_centers(self):
        centers = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        # d1=0.5, d2=0.5: d1 > 0.6*d2 -> negative despite being close
        labels = og.assign_objectness(np.array([[0.5, 0.0, 0.0]]), centers)
        assert labels.tolist() == [0]

    def test_positive_rule_wins_over_ambiguity(self):
        centers = np.array([[0.0, 0.0, 0.0], [0.55, 0.0, 0.0]])
        # d1=0.25 < 0.3 -> positive even though d1 > 0.6*d2 = 0.18
        labels = og.assign_objectness(np.array([[0.25, 0.0, 0.0]]), centers)
        assert labels.tolist() == [1]

    def test_single_center_no_ambiguity(self):
        centers = np.array([[0.0, 0.0, 0.0]])
        positions = np.array([[0.65, 0.0, 0.0], [0.45, 0.0, 0.0], [0.1, 0.0, 0.0]])
        labels = og.assign_objectness(positions, centers)
        assert labels.tolist() == [0, -1, 1]

    def test_no_ground_truth_all_negative(self):
        labels = og.assign_objectness(np.zeros((4, 3)), np.zeros((0, 3)))
        assert labels.tolist() == [0, 0, 0, 0]

    def test_boundaries_are_strict(self):
        centers = np.array([[0.0, 0.0, 0.0]])
        labels = og.assign_objectness(
            np.array([[0.3, 0.0, 0.0], [0.6, 0.0, 0.0]]), centers)
        # exactly 0.3 is not positive; exactly 0.6 is not negative
        assert labels.tolist() == [-1, -1]


class TestObjectnessLoss:
    def test_excluded_rows_ignored(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        heads = og.ProposalHeads(semantic_logits=Tensor(np.zeros((4, 5))),
                                 aggregation=Tensor(np.zeros((4, 4))),
                                 objectness_logits=z)
        labels = np.array([1, -1, 0, -1])
        loss = og.objectness_loss(heads, labels)
        keep = ad.cross_entropy(Tensor(z.data[[0, 2]]), np.array([1, 0]))
        assert loss.data == pytest.approx(keep.data, abs=1e-12)

    def test_all_excluded_zero(self):
        heads = og.ProposalHeads(semantic_logits=Tensor(np.zeros((2, 5))),
                                 aggregation=Tensor(np.zeros((2, 4))),
                                 objectness_logits=Tensor(np.zeros((2, 2))))
        assert og.objectness_loss(heads, np.array([-1, -1])).data == 0.0


class TestGeometricAggLoss:
    def _heads(self, agg):
        agg = np.asarray(agg, dtype=float)
        return og.ProposalHeads(
            semantic_logits=Tensor(np.zeros((agg.shape[0], 5))),
            aggregation=Tensor(agg, requires_grad=True),
            objectness_logits=Tensor(np.zeros((agg.shape[0], 2))),
        )

    def test_hand_value(self):
        """Residual 0.5 center + 0.3 radius: huber gives 0.125 + 0.045."""
        heads = self._heads(np.zeros((1, 4)))
        positions = Tensor(np.zeros((1, 3)))
        labels = np.array([1])
        centers = np.array([[0.5, 0.0, 0.0]])
        radii = np.array([0.3])
        loss = og.geometric_agg_loss(heads, positions, labels, centers, radii,
                                     nearest=np.array([0]))
        assert loss.data == pytest.approx(0.125 + 0.5 * 0.09, abs=1e-12)

    def test_perfect_predictions_zero(self):
        agg = np.array([[0.5, 0.0, 0.0, 0.3]])
        heads = self._heads(agg)
        loss = og.geometric_agg_loss(heads, Tensor(np.zeros((1, 3))), np.array([1]),
                                     np.array([[0.5, 0.0, 0.0]]), np.array([0.3]),
                                     nearest=np.array([0]))
        assert loss.data == pytest.approx(0.0, abs=1e-12)

    def test_no_positives_zero(self):
        heads = self._heads(np.zeros((2, 4)))
        loss = og.geometric_agg_loss(heads, Tensor(np.zeros((2, 3))), np.array([0, -1]),
                                     np.array([[1.0, 0.0, 0.0]]), np.array([0.2]),
                                     nearest=np.array([0, 0]))
        assert loss.data == 0.0

    def test_gradients(self):
        rng = np.random.default_rng(2)
        agg = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        positions = Tensor(rng.uniform(-1, 1, size=(3, 3)))
        labels = np.array([1, 1, 0])
        centers = rng.uniform(-1, 1, size=(2, 3))
        radii = np.array([0.3, 0.4])
        nearest = np.array([0, 1, 0])

        def fn():
            heads = og.ProposalHeads(semantic_logits=Tensor(np.zeros((3, 5))),
                                     aggregation=agg,
                                     objectness_logits=Tensor(np.zeros((3, 2))))
            return og.geometric_agg_loss(heads, positions, labels, centers, radii, nearest)

        report = grad_check(fn, [agg])
        assert report.passed, report.message


class TestDiscriminativeLoss:
    def test_two_tight_clusters_hand_value(self):
        """Means at 0 and 0.1: pushes cost 0.01, pulls cost 0, reg 0.05."""
        feats = Tensor(np.array([[0.0], [0.0], [0.1], [0.1]]))
        loss = og.discriminative_loss(feats, np.array([0, 0, 1, 1]))
        assert loss.data == pytest.approx(0.01 + 0.001 * 0.05, abs=1e-9)

    def test_well_separated_only_regularizer(self):
        feats = Tensor(np.array([[5.0], [5.0], [-5.0], [-5.0]]))
        loss = og.discriminative_loss(feats, np.array([0, 0, 1, 1]))
        assert loss.data == pytest.approx(0.001 * 5.0, abs=1e-9)

    def test_single_cluster_no_push(self):
        feats = Tensor(np.array([[1.0], [1.0]]))
        loss = og.discriminative_loss(feats, np.array([3, 3]))
        assert loss.data == pytest.approx(0.001 * 1.0, abs=1e-12)

    def test_empty_zero(self):
        loss = og.discriminative_loss(Tensor(np.zeros((0, 5))), np.zeros(0, dtype=int))
        assert loss.data == 0.0

    def test_pull_hinge_active_beyond_delta_v(self):
        # one cluster, points at -0.3/0.3: mean 0, pulls (0.3-0.1)^2 each
        feats = Tensor(np.array([[-0.3], [0.3]]))
        loss = og.discriminative_loss(feats, np.array([0, 0]))
        assert loss.data == pytest.approx(0.04 + 0.0, abs=1e-12)  # reg is ||mu||=0

    def test_gradients(self):
        rng = np.random.default_rng(3)
        feats = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        assignment = np.array([0, 0, 1, 1, 1, 2, 2])

        def fn():
            return og.discriminative_loss(feats, assignment)

        report = grad_check(fn, [feats])
        assert report.passed, report.message


class TestMaskHead:
    def _params(self, rng, f=6):
        return og.MaskParams(
            embed=MlpParams.create((f, 8), rng),
            classify=MlpParams.create((16, 8, 2), rng),
        )

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        params = self._params(rng)
        feats = Tensor(rng.normal(size=(12, 6)))
        groups = [np.array([0, 3, 5]), np.array([2, 7, 8, 9])]
        logits, starts = og.mask_forward_batch(feats, groups, params)
        assert starts.tolist() == [0, 3]
        for k, g in enumerate(groups):
            single, _ = og.mask_head(feats, g, params)
            lo = starts[k]
            hi = starts[k] + g.size if k + 1 == len(groups) else starts[k + 1]
            np.testing.assert_allclose(logits.data[lo:hi], single.data, atol=1e-12)

    def test_supervised_loss_targets(self):
        rng = np.random.default_rng(5)
        params = self._params(rng)
        feats = Tensor(rng.normal(size=(6, 6)))
        instance_of_point = np.array([0, 0, 1, 1, -1, -1])
        logits, loss = og.mask_head(feats, np.array([0, 2, 4]), params,
                                    instance_of_point=instance_of_point,
                                    target_instance=0)
        assert logits.data.shape == (3, 2)
        assert loss is not None and np.isfinite(loss.data)

    def test_empty_members_rejected(self):
        rng = np.random.default_rng(5)
        params = self._params(rng)
        with pytest.raises(og.ObjGenError):
            og.mask_forward_batch(Tensor(np.zeros((3, 6))), [np.empty(0, dtype=int)], params)

    def test_equal_proposal_weighting(self):
        """A huge group and a tiny group contribute equally to the batch loss."""
        rng = np.random.default_rng(6)
        params = self._params(rng)
        feats = Tensor(rng.normal(size=(30, 6)))
        big, small = np.arange(25), np.array([27, 29])
        t_big, t_small = np.ones(25, dtype=np.int64), np.zeros(2, dtype=np.int64)
        both = og.mask_loss_batch(feats, [big, small], [t_big, t_small], params)
        l_big = og.mask_loss_batch(feats, [big], [t_big], params)
        l_small = og.mask_loss_batch(feats, [small], [t_small], params)
        assert both.data == pytest.approx(0.5 * (l_big.data + l_small.data), abs=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        params = self._params(rng, f=4)
        feats = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
        groups = [np.array([0, 1, 2]), np.array([4, 6])]
        targets = [np.array([1, 0, 1]), np.array([0, 1])]

        def fn():
            return og.mask_loss_batch(feats, groups, targets, params)

        report = grad_check(fn, params.embed.parameters()
                            + params.classify.parameters() + [feats])
        assert report.passed, report.message


class TestDbscan:
    def test_line_example(self):
        pts = np.array([[0.0], [0.05], [0.1], [5.0]])
        labels = og.dbscan(pts, eps=0.2, min_pts=2)
        assert labels.tolist() == [0, 0, 0, -1]

    def test_border_point_lowest_cluster(self):
        xs = [0.0, 0.1, 0.2, 0.15, 0.8, 0.9, 1.0, 0.85, 0.5]
        labels = og.dbscan(np.array(xs)[:, None], eps=0.3, min_pts=4)
        assert labels[8] == 0  # adjacent to cores of clusters 0 and 1
        assert labels[:4].tolist() == [0, 0, 0, 0]
        assert labels[4:8].tolist() == [1, 1, 1, 1]

    def test_eps_inclusive_counting_self(self):
        pts = np.array([[0.0], [0.2]])
        labels = og.dbscan(pts, eps=0.2, min_pts=2)
        assert labels.tolist() == [0, 0]

    def test_empty_input(self):
        assert og.dbscan(np.zeros((0, 3)), 0.3).size == 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(30):
            m = int(rng.integers(1, 60))
            dim = int(rng.integers(1, 5))
            pts = rng.uniform(-1, 1, size=(m, dim))
            eps = float(rng.uniform(0.1, 0.6))
            min_pts = int(rng.integers(1, 5))
            got = og.dbscan(pts, eps, min_pts)
            want = dbscan_oracle([tuple(p) for p in pts], eps, min_pts)
            assert partition_of(got.tolist()) == partition_of(want)

    def test_cluster_ids_in_discovery_order(self):
        pts = np.array([[5.0], [5.1], [0.0], [0.1]])
        labels = og.dbscan(pts, eps=0.2, min_pts=2)
        assert labels.tolist() == [0, 0, 1, 1]


def make_ip(positions, prob, positive, classes, agg, fg_masks):
    return og.InferenceProposals(
        positions=np.asarray(positions, dtype=float),
        objectness_prob=np.asarray(prob, dtype=float),
        positive=np.asarray(positive, dtype=bool),
        semantic_class=np.asarray(classes, dtype=np.int64),
        aggregation=np.asarray(agg, dtype=float),
        fg_masks=[np.asarray(m, dtype=np.int64) for m in fg_masks],
    )


class TestAggregate:
    def test_two_clusters_union_masks(self):
        ip = make_ip(
            positions=[[0, 0, 0], [0.05, 0, 0], [3, 0, 0], [3.05, 0, 0]],
            prob=[0.9, 0.8, 0.7, 0.6],
            positive=[True] * 4,
            classes=[2, 2, 3, 3],
            agg=np.zeros((4, 4)),
            fg_masks=[[0, 1], [1, 2], [10, 11], [11, 12]],
        )
        objs = og.aggregate(ip, "positions")
        assert len(objs) == 2
        masks = sorted(o.mask.tolist() for o in objs)
        assert masks == [[0, 1, 2], [10, 11, 12]]
        confs = sorted(round(o.confidence, 6) for o in objs)
        assert confs == [0.65, pytest.approx(0.85)]

    def test_noise_becomes_singleton(self):
        ip = make_ip(
            positions=[[0, 0, 0], [0.05, 0, 0], [9, 9, 9]],
            prob=[0.9, 0.8, 0.5],
            positive=[True] * 3,
            classes=[2, 2, 4],
            agg=np.zeros((3, 4)),
            fg_masks=[[0], [1], [5, 6]],
        )
        objs = og.aggregate(ip, "positions")
        assert len(objs) == 2
        singleton = [o for o in objs if o.semantic_class == 4]
        assert len(singleton) == 1
        assert singleton[0].mask.tolist() == [5, 6]

    def test_no_positive_proposals(self):
        ip = make_ip(positions=np.zeros((2, 3)), prob=[0.4, 0.3],
                     positive=[False, False], classes=[2, 2],
                     agg=np.zeros((2, 4)), fg_masks=[[0], [1]])
        assert og.aggregate(ip, "positions") == []

    def test_each_proposal_in_one_object(self):
        rng = np.random.default_rng(9)
        k = 30
        ip = make_ip(
            positions=rng.uniform(-2, 2, size=(k, 3)),
            prob=rng.uniform(0.5, 1.0, size=k),
            positive=np.ones(k, dtype=bool),
            classes=rng.integers(2, 5, size=k),
            agg=rng.normal(size=(k, 4)),
            fg_masks=[[i] for i in range(k)],
        )
        objs = og.aggregate(ip, "positions", eps=0.5)
        seen = np.concatenate([o.mask for o in objs])
        assert sorted(seen.tolist()) == list(range(k))  # partition, no double use

    def test_weighted_majority_class_tie_to_lowest(self):
        ip = make_ip(
            positions=[[0, 0, 0], [0.01, 0, 0], [0.02, 0, 0], [0.03, 0, 0]],
            prob=[0.5, 0.5, 0.5, 0.5],
            positive=[True] * 4,
            classes=[4, 4, 2, 2],
            agg=np.zeros((4, 4)),
            fg_masks=[[0], [1], [2], [3]],
        )
        objs = og.aggregate(ip, "positions")
        assert len(objs) == 1
        assert objs[0].semantic_class == 2

    def test_geometric_mode_uses_refined_centers(self):
        # raw positions coincide; refined centers split into two groups
        agg = np.array([[0, 0, 0, 0.1], [0, 0, 0, 0.1],
                        [2, 0, 0, 0.1], [2, 0, 0, 0.1]], dtype=float)
        ip = make_ip(positions=np.zeros((4, 3)), prob=[0.9] * 4,
                     positive=[True] * 4, classes=[2] * 4,
                     agg=agg, fg_masks=[[0], [1], [2], [3]])
        objs = og.aggregate(ip, "geometric")
        assert len(objs) == 2

    def test_embedding_mode_eps(self):
        agg = np.array([[0.0, 0, 0, 0, 0], [0.02, 0, 0, 0, 0],
                        [0.5, 0, 0, 0, 0], [0.52, 0, 0, 0, 0]])
        ip = make_ip(positions=np.zeros((4, 3)), prob=[0.9] * 4,
                     positive=[True] * 4, classes=[3] * 4,
                     agg=agg, fg_masks=[[0], [1], [2], [3]])
        objs = og.aggregate(ip, "embedding")
        assert len(objs) == 2

    def test_empty_union_dropped(self):
        ip = make_ip(positions=[[0, 0, 0]], prob=[0.9], positive=[True],
                     classes=[2], agg=np.zeros((1, 4)), fg_masks=[[]])
        assert og.aggregate(ip, "positions") == []

    def test_unknown_mode_rejected(self):
        ip = make_ip(positions=[[0, 0, 0]], prob=[0.9], positive=[True],
                     classes=[2], agg=np.zeros((1, 4)), fg_masks=[[0]])
        with pytest.raises(og.ObjGenError):
            og.aggregate(ip, "centers")


class TestNmsBaseline:
    def test_hand_trace(self):
        """IoU(A,B)=0.5 suppresses B; C survives at IoU 0.1."""
        a = list(range(10))
        b = list(range(5, 15))       # IoU with a: 5/15 = 1/3 > 0.25
        c = list(range(100, 120)) + [0, 1]  # IoU with a: 2/30 < 0.25
        ip = make_ip(positions=np.zeros((3, 3)), prob=[0.9, 0.8, 0.7],
                     positive=[True] * 3, classes=[2, 2, 3],
                     agg=np.zeros((3, 4)), fg_masks=[a, b, c])
        objs = og.nms_baseline(ip)
        assert len(objs) == 2
        assert objs[0].confidence == pytest.approx(0.9)
        assert objs[1].semantic_class == 3

    def test_only_positives_participate(self):
        ip = make_ip(positions=np.zeros((2, 3)), prob=[0.9, 0.8],
                     positive=[False, True], classes=[2, 3],
                     agg=np.zeros((2, 4)), fg_masks=[[0], [1]])
        objs = og.nms_baseline(ip)
        assert len(objs) == 1
        assert objs[0].semantic_class == 3

    def test_empty_masks_skipped(self):
        ip = make_ip(positions=np.zeros((2, 3)), prob=[0.9, 0.8],
                     positive=[True, True], classes=[2, 3],
                     agg=np.zeros((2, 4)), fg_masks=[[], [1]])
        objs = og.nms_baseline(ip)
        assert len(objs) == 1
        assert objs[0].mask.tolist() == [1]
