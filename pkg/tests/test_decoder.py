import itertools

import numpy as np
import pytest
from scipy.special import expit

from medalseg import decoder
from medalseg.decoder import (
    QueryEmbeddings,
    ToyRefiner,
    VoxelFeatures,
    aligned_features,
    decoder_forward,
    iterative_infer,
    load_toy_refiner,
    masked_forward,
    predict,
    random_block_mask,
    save_toy_refiner,
    toy_contracts,
)
from medalseg.errors import DimensionMismatchError


def loop_aligned(t, s_p):
    n, c = t.shape
    out = np.zeros((c,) + s_p.shape[1:])
    for ci in range(c):
        for ni in range(n):
            out[ci] += t[ni, ci] * s_p[ni]
    return out


def loop_predict(t, f_r):
    n, c = t.shape
    out = np.zeros((n,) + f_r.shape[1:])
    for ni in range(n):
        for ci in range(c):
            out[ni] += t[ni, ci] * f_r[ci]
    return expit(out)


class TestAlignedFeatures:
    def test_zero_prompt(self):
        t = QueryEmbeddings(t=np.ones((2, 3)))
        assert not aligned_features(t, np.zeros((2, 2, 2, 2))).any()

    def test_one_hot_projection(self):
        t = QueryEmbeddings(t=np.array([[0.0, 1.0, 0.0]]))
        s_p = (np.random.default_rng(0).random((1, 3, 3, 3)) < 0.5).astype(float)
        f_a = aligned_features(t, s_p)
        assert np.array_equal(f_a[1], s_p[0])
        assert not f_a[0].any() and not f_a[2].any()

    def test_loop_oracle_100(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            t = rng.normal(size=(n, c))
            s_p = rng.random((n, 2, 2, 2))
            got = aligned_features(QueryEmbeddings(t=t), s_p)
            assert np.max(np.abs(got - loop_aligned(t, s_p))) < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            aligned_features(QueryEmbeddings(t=np.ones((2, 3))), np.zeros((3, 2, 2, 2)))


class TestPredict:
    def test_zero_features_give_half(self):
        t = QueryEmbeddings(t=np.random.default_rng(2).normal(size=(3, 4)))
        p = predict(t, np.zeros((4, 2, 2, 2)))
        assert np.all(p.data == 0.5)

    def test_zero_query_row(self):
        t = QueryEmbeddings(t=np.array([[0.0, 0.0], [1.0, 1.0]]))
        p = predict(t, np.random.default_rng(3).normal(size=(2, 2, 2, 2)))
        assert np.all(p.data[0] == 0.5)

    def test_loop_oracle_100(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            t = rng.normal(size=(n, c))
            f_r = rng.normal(size=(c, 2, 2, 2))
            got = predict(QueryEmbeddings(t=t), f_r).data
            assert np.max(np.abs(got - loop_predict(t, f_r))) < 1e-6

    def test_open_interval(self):
        t = QueryEmbeddings(t=np.full((1, 1), 50.0))
        p = predict(t, np.full((1, 2, 2, 2), 10.0))
        assert np.all(p.data > 0) and np.all(p.data < 1)


class TestRandomBlockMask:
    def test_exact_half_selection(self, rng):
        m, m_c = random_block_mask((8, 8, 8), 4, rng)
        cells = m[::4, ::4, ::4]
        assert cells.sum() == 4  # max(1, 8//2)
        assert np.array_equal(m + m_c, np.ones_like(m))

    def test_single_cell_edge_case(self, rng):
        m, m_c = random_block_mask((4, 4, 4), 8, rng)
        assert m.all() and not m_c.any()

    def test_complement_any_dims(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            dims = tuple(int(x) for x in rng.integers(3, 14, 3))
            block = int(rng.choice((2, 4, 8)))
            m, m_c = random_block_mask(dims, block, rng)
            assert m.shape == dims
            assert np.array_equal(m + m_c, np.ones(dims, dtype=m.dtype))

    def test_uniform_cell_frequency(self):
        rng = np.random.default_rng(6)
        counts = np.zeros((2, 2, 2))
        n_draws = 10_000
        for _ in range(n_draws):
            m, _ = random_block_mask((8, 8, 8), 4, rng)
            counts += m[::4, ::4, ::4]
        freq = counts / n_draws
        sigma = np.sqrt(0.5 * 0.5 / n_draws)
        assert np.all(np.abs(freq - 0.5) < 3 * sigma + 1e-12)


class TestMaskedForward:
    def setup_method(self):
        self.backbone, self.refiner = toy_contracts()
        rng = np.random.default_rng(7)
        self.patch = rng.uniform(0, 255, (8, 8, 8))
        self.prompt = (rng.random((2, 8, 8, 8)) < 0.3).astype(float)
        s_f = (self.prompt.sum(0) > 0).astype(float)
        self.f, v = self.backbone.features(self.patch, s_f)
        z = np.zeros((2, 768))
        z[0, 0] = 1.0
        z[1, 1] = 1.0
        self.t = self.backbone.adapt_queries(v, z)

    def test_all_ones_mask_is_unmasked(self):
        full = decoder_forward(self.f, self.t, self.prompt, self.refiner)
        masked = masked_forward(self.f, self.t, self.prompt, np.ones((8, 8, 8)), self.refiner)
        assert np.array_equal(full, masked)

    def test_all_zero_mask_is_zero_prompt(self):
        zero = decoder_forward(self.f, self.t, np.zeros_like(self.prompt), self.refiner)
        masked = masked_forward(self.f, self.t, self.prompt, np.zeros((8, 8, 8)), self.refiner)
        assert np.array_equal(zero, masked)

    def test_prompt_changes_output_inside_mask(self):
        zero = decoder_forward(self.f, self.t, np.zeros_like(self.prompt), self.refiner)
        m = np.ones((8, 8, 8))
        got = masked_forward(self.f, self.t, self.prompt, m, self.refiner)
        assert np.any(got != zero)


class PromptBlindRefiner(ToyRefiner):
    """Refiner with the aligned-prompt half zeroed: model ignores prompts."""

    def __init__(self, **kw):
        super().__init__(**kw)
        self.a[:, self.channels:] = 0.0
        self.a[:, self.slots + 5] = 0.0  # smoothed-S_f feature column


class TestIterativeInfer:
    def _setup(self, refiner):
        backbone, _ = toy_contracts()
        rng = np.random.default_rng(8)
        patch = rng.uniform(0, 255, (8, 8, 8))
        f, v = backbone.features(patch, np.zeros((8, 8, 8)))
        z = np.zeros((2, 768))
        z[0, 0] = 1.0
        z[1, 1] = 1.0
        t = backbone.adapt_queries(v, z)
        s_p = (rng.random((2, 8, 8, 8)) < 0.3).astype(float)
        return f, t, s_p

    def test_prompt_invariant_idempotent(self):
        refiner = PromptBlindRefiner()
        f, t, s_p = self._setup(refiner)
        single = decoder_forward(f, t, np.zeros_like(s_p), refiner)
        for t_iter, rounds in ((1, 1), (2, 1), (3, 2)):
            out = iterative_infer(f, t, s_p, refiner, np.random.default_rng(0),
                                  t_iter=t_iter, rounds=rounds)
            assert np.array_equal(out, single)

    def test_partition_property_by_tagging(self, monkeypatch):
        refiner = ToyRefiner()
        f, t, s_p = self._setup(refiner)
        tags = itertools.cycle([10.0, 20.0])

        def fake_masked(f_, t_, prompt, mask, refiner_):
            return np.full((2,) + f_.f.shape[1:], next(tags))

        monkeypatch.setattr(decoder, "masked_forward", fake_masked)
        out = iterative_infer(f, t, s_p, refiner, np.random.default_rng(1),
                              t_iter=1, rounds=1, blocks=(4,))
        assert np.all(np.isin(out, (10.0, 20.0)))
        assert (out == 10.0).any() and (out == 20.0).any()

    def test_gt_prompt_beats_zero_prompt(self):
        # 16^3 two-sphere phantom: prompting with GT must not hurt
        from medalseg.metrics import dsc
        from medalseg.phantom import slot_gray

        backbone, refiner = toy_contracts()
        dims = (16, 16, 16)
        gt = np.zeros((2,) + dims, dtype=np.uint8)
        patch = np.zeros(dims)
        for i, (cid, center) in enumerate([(1, (5, 5, 5)), (2, (11, 11, 11))]):
            g = np.ogrid[:16, :16, :16]
            r2 = sum((gi - ci) ** 2 for gi, ci in zip(g, center))
            gt[i] = (r2 <= 4 ** 2).astype(np.uint8)
            patch[gt[i] > 0] = slot_gray(cid)
        z = np.zeros((2, 768))
        z[0, 0] = 1.0
        z[1, 1] = 1.0

        scores = {}
        for name, init in (("zero", np.zeros((2,) + dims)), ("gt", gt.astype(float))):
            s_f = (init.sum(0) > 0).astype(float)
            f, v = backbone.features(patch, s_f)
            t = backbone.adapt_queries(v, z)
            out = iterative_infer(f, t, init, refiner, np.random.default_rng(2))
            pred = (out >= 0.5).astype(np.uint8)
            scores[name] = np.mean([dsc(gt[i], pred[i]) for i in range(2)])
        assert scores["gt"] >= scores["zero"]
        assert scores["zero"] > 0.5


class TestToyContracts:
    def test_deterministic_features(self):
        b1, _ = toy_contracts(seed=3)
        b2, _ = toy_contracts(seed=3)
        rng = np.random.default_rng(9)
        patch = rng.uniform(0, 255, (6, 6, 6))
        s_f = (rng.random((6, 6, 6)) < 0.2).astype(float)
        f1, v1 = b1.features(patch, s_f)
        f2, v2 = b2.features(patch, s_f)
        assert np.array_equal(f1.f, f2.f) and np.array_equal(v1, v2)

    def test_zero_patch_constant_channels(self):
        backbone, _ = toy_contracts()
        f, _ = backbone.features(np.zeros((5, 5, 5)), np.zeros((5, 5, 5)))
        for k in range(backbone.slots):
            assert np.ptp(f.f[k]) == 0.0
        assert np.ptp(f.f[backbone.slots]) == 0.0       # smoothed intensity
        assert np.ptp(f.f[backbone.slots + 7]) == 0.0   # bias
        # coordinate channels do vary
        assert np.ptp(f.f[backbone.slots + 2]) > 0.0

    def test_refiner_channel_count_check(self):
        _, refiner = toy_contracts()
        with pytest.raises(DimensionMismatchError):
            refiner.refine(np.zeros((10, 4, 4, 4)))

    def test_refiner_round_trip(self, tmp_path):
        _, refiner = toy_contracts(seed=11)
        save_toy_refiner(tmp_path / "r.bin", refiner)
        back = load_toy_refiner(tmp_path / "r.bin")
        assert np.array_equal(back.a, refiner.a)
        assert back.channels == refiner.channels and back.seed == refiner.seed

    def test_call_counters(self):
        backbone, refiner = toy_contracts()
        patch = np.zeros((4, 4, 4))
        f, v = backbone.features(patch, np.zeros((4, 4, 4)))
        t = backbone.adapt_queries(v, np.zeros((1, 768)))
        decoder_forward(f, t, np.zeros((1, 4, 4, 4)), refiner)
        assert backbone.feature_calls == 1
        assert backbone.adapt_calls == 1
        assert refiner.calls == 1
