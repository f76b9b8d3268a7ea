import numpy as np
import pytest

from dropseg.config import CrfParams
from dropseg.crf import densecrf_meanfield, softmax_neg_energy


def brute_force_meanfield(unaries, image, params, iterations=None):
    """Literal scalar-loop mean field: Potts compatibility, both Gaussian
    kernels, message from self excluded, parallel updates, per-pixel
    normalization. Kept deliberately naive; this is the oracle."""
    n_labels, h, w = unaries.shape
    n = h * w
    u = unaries.reshape(n_labels, n)
    img = image.reshape(n, 3).astype(float)
    coords = [(y, x) for y in range(h) for x in range(w)]
    iters = params.iterations if iterations is None else iterations

    def kernel(i, j):
        (yi, xi), (yj, xj) = coords[i], coords[j]
        d_xy = (yi - yj) ** 2 + (xi - xj) ** 2
        d_rgb = float(((img[i] - img[j]) ** 2).sum())
        val = 0.0
        if params.smooth_weight > 0:
            val += params.smooth_weight * np.exp(-d_xy / (2 * params.smooth_sigma**2))
        if params.appearance_weight > 0:
            val += params.appearance_weight * np.exp(
                -d_xy / (2 * params.appearance_sigma_xy**2)
                - d_rgb / (2 * params.appearance_sigma_rgb**2)
            )
        return val

    q = softmax_neg_energy(-u)
    for _ in range(iters):
        new_q = np.zeros_like(q)
        for i in range(n):
            energies = np.zeros(n_labels)
            for lab in range(n_labels):
                e = u[lab, i]
                for other in range(n_labels):
                    if other == lab:
                        continue  # Potts mu(l, l') = [l != l']
                    s = 0.0
                    for j in range(n):
                        if j == i:
                            continue
                        s += kernel(i, j) * q[other, j]
                    e += s
                energies[lab] = -e
            z = energies - energies.max()
            p = np.exp(z)
            new_q[:, i] = p / p.sum()
        q = new_q
    return q.reshape(n_labels, h, w)


def random_case(rng, size, n_labels):
    unaries = rng.uniform(0, 3, (n_labels, size, size))
    image = rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
    params = CrfParams(
        iterations=1,
        smooth_weight=float(rng.uniform(0, 4)),
        smooth_sigma=float(rng.uniform(0.8, 3)),
        appearance_weight=float(rng.uniform(0, 4)),
        appearance_sigma_xy=float(rng.uniform(1, 50)),
        appearance_sigma_rgb=float(rng.uniform(3, 60)),
        engine="exact",
    )
    return unaries, image, params


class TestMeanFieldCorrectness:
    def test_single_update_matches_brute_force(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            size = int(rng.integers(2, 4))
            n_labels = int(rng.integers(2, 4))
            unaries, image, params = random_case(rng, size, n_labels)
            ours = densecrf_meanfield(unaries, image, params)
            oracle = brute_force_meanfield(unaries, image, params)
            np.testing.assert_allclose(ours, oracle, atol=1e-8)

    def test_fast_engine_matches_brute_force(self):
        rng = np.random.default_rng(21)
        unaries, image, params = random_case(rng, 3, 3)
        params = CrfParams(**{**params.__dict__, "engine": "fast", "iterations": 2})
        ours = densecrf_meanfield(unaries, image, params)
        oracle = brute_force_meanfield(unaries, image, params)
        np.testing.assert_allclose(ours, oracle, atol=1e-6)

    def test_multi_iteration_matches_brute_force(self):
        rng = np.random.default_rng(5)
        unaries, image, params = random_case(rng, 3, 2)
        params = CrfParams(**{**params.__dict__, "iterations": 3})
        ours = densecrf_meanfield(unaries, image, params)
        oracle = brute_force_meanfield(unaries, image, params)
        np.testing.assert_allclose(ours, oracle, atol=1e-8)

    def test_two_pixel_worked_case(self):
        # 2x1 image, 2 labels, 1 iteration, matched against the scalar oracle
        unaries = np.array([[[1.0], [0.5]], [[0.2], [2.0]]]).reshape(2, 2, 1)
        image = np.array([[[10, 10, 10]], [[40, 10, 10]]], dtype=np.uint8)
        params = CrfParams(
            iterations=1,
            smooth_weight=1.0,
            smooth_sigma=1.0,
            appearance_weight=2.0,
            appearance_sigma_xy=2.0,
            appearance_sigma_rgb=30.0,
            engine="exact",
        )
        ours = densecrf_meanfield(unaries, image, params)
        oracle = brute_force_meanfield(unaries, image, params)
        np.testing.assert_allclose(ours, oracle, atol=1e-8)


class TestMeanFieldProperties:
    def test_rows_sum_to_one_after_every_iteration(self):
        rng = np.random.default_rng(3)
        unaries, image, params = random_case(rng, 3, 3)
        for iters in range(5):
            p = CrfParams(**{**params.__dict__, "iterations": iters})
            q = densecrf_meanfield(unaries, image, p)
            np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-6)
            assert q.min() >= 0

    def test_zero_pairwise_weights_fixed_point(self):
        rng = np.random.default_rng(4)
        unaries = rng.uniform(0, 3, (3, 4, 4))
        image = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
        params = CrfParams(iterations=7, smooth_weight=0.0, appearance_weight=0.0)
        q = densecrf_meanfield(unaries, image, params)
        expected = softmax_neg_energy(-unaries.reshape(3, -1)).reshape(3, 4, 4)
        np.testing.assert_allclose(q, expected, atol=1e-8)

    def test_uniform_unaries_zero_weights_give_uniform(self):
        unaries = np.full((3, 3, 3), 1.7)
        image = np.zeros((3, 3, 3), dtype=np.uint8)
        params = CrfParams(iterations=4, smooth_weight=0.0, appearance_weight=0.0)
        q = densecrf_meanfield(unaries, image, params)
        np.testing.assert_allclose(q, 1.0 / 3.0, atol=1e-12)

    def test_zero_iterations_returns_initialization(self):
        rng = np.random.default_rng(6)
        unaries = rng.uniform(0, 2, (2, 3, 3))
        image = rng.integers(0, 256, (3, 3, 3)).astype(np.uint8)
        q = densecrf_meanfield(unaries, image, CrfParams(iterations=0))
        expected = softmax_neg_energy(-unaries.reshape(2, -1)).reshape(2, 3, 3)
        np.testing.assert_allclose(q, expected, atol=1e-12)

    def test_non_finite_unaries_rejected(self):
        unaries = np.full((2, 2, 2), np.inf)
        image = np.zeros((2, 2, 3), dtype=np.uint8)
        with pytest.raises(ValueError, match="finite"):
            densecrf_meanfield(unaries, image, CrfParams())

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="match"):
            densecrf_meanfield(
                np.zeros((2, 3, 3)), np.zeros((4, 4, 3), dtype=np.uint8), CrfParams()
            )


class TestExactVsFast:
    def _palette_image(self, rng, size):
        palette = np.array([[200, 40, 40], [40, 180, 60], [60, 90, 220], [120, 120, 120]])
        labels = rng.integers(0, 4, (size, size))
        img = palette[labels] + rng.normal(0, 3, (size, size, 3))
        return np.clip(img, 0, 255).astype(np.uint8)

    @pytest.mark.parametrize("size", [16, 32])
    def test_agreement_within_two_percent(self, size):
        rng = np.random.default_rng(size)
        image = self._palette_image(rng, size)
        unaries = rng.uniform(0, 2, (4, size, size))
        base = CrfParams(iterations=5)
        qe = densecrf_meanfield(unaries, image, CrfParams(**{**base.__dict__, "engine": "exact"}))
        qf = densecrf_meanfield(unaries, image, CrfParams(**{**base.__dict__, "engine": "fast"}))
        per_pixel_l1 = np.abs(qe - qf).sum(axis=0)
        assert per_pixel_l1.max() <= 0.02

    def test_agreement_on_smooth_gradient_image(self):
        # worst case for the color bucketing: one connected color component
        size = 16
        rng = np.random.default_rng(99)
        ramp = np.linspace(0, 255, size)
        image = np.stack(
            [np.tile(ramp, (size, 1)), np.tile(ramp[::-1], (size, 1)), np.full((size, size), 128.0)],
            axis=-1,
        ).astype(np.uint8)
        unaries = rng.uniform(0, 2, (3, size, size))
        base = CrfParams(iterations=5, appearance_sigma_rgb=20.0)
        qe = densecrf_meanfield(unaries, image, CrfParams(**{**base.__dict__, "engine": "exact"}))
        qf = densecrf_meanfield(unaries, image, CrfParams(**{**base.__dict__, "engine": "fast"}))
        assert np.abs(qe - qf).sum(axis=0).max() <= 0.02

    def test_auto_picks_exact_for_small_images(self):
        rng = np.random.default_rng(1)
        image = self._palette_image(rng, 8)
        unaries = rng.uniform(0, 2, (2, 8, 8))
        q_auto = densecrf_meanfield(unaries, image, CrfParams(iterations=3, engine="auto"))
        q_exact = densecrf_meanfield(unaries, image, CrfParams(iterations=3, engine="exact"))
        np.testing.assert_array_equal(q_auto, q_exact)
