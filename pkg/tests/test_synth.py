import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.stats import norm

from backend.core.errors import ConfigError
from backend.core.models import ProposalFeatures
from backend.core.validation import validate_dataset
from backend.data_collection.synth_generator import (
    FOREGROUND_CLASS, SynthSpec, bayes_accuracy, generate, interaction_templates, simplex_centers,
)
from backend.evaluation.regions import Region, union_all


class TestGenerate:
    def test_same_seed_same_dataset(self):
        a = generate(SynthSpec(seed=5))
        b = generate(SynthSpec(seed=5))
        assert [im.to_dict() for im in a.dataset] == [im.to_dict() for im in b.dataset]
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = ProposalFeatures.from_dataset(generate(SynthSpec(seed=1)).dataset)
        b = ProposalFeatures.from_dataset(generate(SynthSpec(seed=2)).dataset)
        assert not np.array_equal(a.F, b.F)

    def test_shapes_and_partition(self, benchmark_spec):
        planted = generate(benchmark_spec)
        features = ProposalFeatures.from_dataset(planted.dataset)

        assert features.N == 201
        assert (features.d_f, features.d_h) == (8, 45)
        assert len(planted.dataset) == 20
        assert np.bincount(planted.labels).tolist() == [67, 67, 67]
        assert len(set(features.keys)) == 201

    def test_validates_clean(self, benchmark_spec):
        assert validate_dataset(generate(benchmark_spec).dataset) == []

    def test_cluster_means_near_centers(self, benchmark_spec):
        planted = generate(benchmark_spec)
        F = ProposalFeatures.from_dataset(planted.dataset).F
        n, d = benchmark_spec.proposals_per_cluster, benchmark_spec.d_f
        bound = 3 * benchmark_spec.sigma * np.sqrt(d / n)
        for k in range(benchmark_spec.K_true):
            deviation = F[planted.labels == k].mean(axis=0) - planted.centers[k]
            assert np.linalg.norm(deviation) < bound

    def test_noiseless_limit(self):
        spec = SynthSpec(sigma=1e-9, interaction_noise=0.0, seed=3)
        planted = generate(spec)
        features = ProposalFeatures.from_dataset(planted.dataset)
        np.testing.assert_allclose(features.F, planted.centers[planted.labels], atol=1e-6)
        np.testing.assert_array_equal(features.H, interaction_templates(spec)[planted.labels])

    def test_no_interaction_signal(self):
        spec = SynthSpec(signal_strength=0.0, seed=4)
        H = ProposalFeatures.from_dataset(generate(spec).dataset).H
        np.testing.assert_array_equal(interaction_templates(spec), 0.0)
        assert H.max() <= spec.interaction_noise

    def test_ground_truth_is_foreground_union(self, benchmark_spec):
        planted = generate(benchmark_spec)
        labels = iter(planted.labels)
        for image in planted.dataset:
            mine = [p for p in image.proposals if next(labels) == benchmark_spec.foreground_cluster]
            expected = union_all([Region.from_proposal(p, image.width, image.height) for p in mine],
                                 image.width, image.height)
            if not mine:
                assert FOREGROUND_CLASS not in image.ground_truth
                continue
            gt = Region.from_ground_truth(image.ground_truth[FOREGROUND_CLASS], image.width, image.height)
            np.testing.assert_array_equal(gt.mask, expected.mask)
            np.testing.assert_array_equal(planted.foreground[image.image_id].mask, expected.mask)

    def test_truth_document(self, small_planted):
        truth = small_planted.to_truth_dict()
        assert truth['class_name'] == FOREGROUND_CLASS
        assert len(truth['labels']) == 40
        assert [row['label'] for row in truth['labels']] == small_planted.labels.tolist()

    @pytest.mark.parametrize('overrides', [
        {'K_true': 0},
        {'sigma': 0.0},
        {'signal_strength': 1.5},
        {'K_true': 4, 'd_f': 2},
        {'n_images': 2, 'proposals_per_image': 3},
    ])
    def test_invalid_spec_raises(self, overrides):
        with pytest.raises(ConfigError):
            generate(SynthSpec(**overrides))


class TestSimplexCenters:
    @pytest.mark.parametrize('K,d_f', [(2, 1), (3, 8), (5, 4)])
    def test_equidistant(self, K, d_f):
        centers = simplex_centers(K, d_f, 6.0)
        assert centers.shape == (K, d_f)
        np.testing.assert_allclose(pdist(centers), 6.0, rtol=1e-10)

    def test_single_cluster_at_origin(self):
        np.testing.assert_array_equal(simplex_centers(1, 3, 6.0), np.zeros((1, 3)))


class TestBayesAccuracy:
    def test_no_separation_is_chance(self):
        spec = SynthSpec(K_true=4, proposals_per_cluster=50, separation=0.0)
        assert bayes_accuracy(spec, draws=50_000) == pytest.approx(0.25, abs=0.01)

    def test_large_separation_is_perfect(self):
        assert bayes_accuracy(SynthSpec(separation=50.0), draws=20_000) > 0.999

    def test_two_clusters_in_one_dimension(self):
        spec = SynthSpec(K_true=2, d_f=1, separation=2.0, sigma=1.0)
        assert bayes_accuracy(spec) == pytest.approx(norm.cdf(1.0), abs=0.005)
