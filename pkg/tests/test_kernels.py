import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unsupface import _pykernels, kernels

BACKENDS = kernels.backends()


def test_uniform_table_has_58_codes():
    table = _pykernels.UNIFORM_BINS
    assert (table >= 0).sum() == 58
    assert table[0] == 0 and table[255] == 57


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
class TestBackendsAgree:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 4), elements=st.floats(0, 50)),
           arrays(np.float64, (5, 4), elements=st.floats(0, 50)))
    def test_iou_matrix(self, a, b):
        a[:, 2:] += 1.0
        b[:, 2:] += 1.0
        np.testing.assert_allclose(BACKENDS["cython"].iou_matrix(a, b),
                                   BACKENDS["python"].iou_matrix(a, b), rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([16, 32, 48]))
    def test_lbp(self, seed, side):
        img = np.random.default_rng(seed).integers(0, 6, (side, side)).astype(np.float64)
        c, p = BACKENDS["cython"], BACKENDS["python"]
        np.testing.assert_array_equal(c.lbp_codes(img), p.lbp_codes(img))
        np.testing.assert_array_equal(c.lbp_histograms(img, 16), p.lbp_histograms(img, 16))


def test_lbp_codes_by_hand():
    img = np.array([[5, 1, 5], [1, 3, 9], [3, 3, 0]], dtype=float)
    # centre 3: neighbours clockwise from top-left = 5,1,5,9,0,3,3,1
    expected = sum(1 << i for i, v in enumerate([5, 1, 5, 9, 0, 3, 3, 1]) if v >= 3)
    for mod in BACKENDS.values():
        assert mod.lbp_codes(img)[1, 1] == expected


def test_flat_image_is_all_ones_code():
    for mod in BACKENDS.values():
        assert np.all(mod.lbp_codes(np.zeros((16, 16))) == 255)
        h = mod.lbp_histograms(np.zeros((32, 32)), 16)
        assert h.shape == (4 * 58,) and h[57] == 256 and h.sum() == 4 * 256
