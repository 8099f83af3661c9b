import numpy as np
import pytest

from hdpissa.rng import Rng, splitmix64_scalar

# published SplitMix64 outputs (state incremented before mixing)
VECTORS = {
    0: [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F],
    1234567: [0x599ED017FB08FC85, 0x2C73F08458540FA5, 0x883EBCE5A3F27C77],
}
# frozen from this implementation; ports should reproduce them bit for bit
UNIFORM_42 = [0.7415648787718233, 0.1599103928769201, 0.27860113025513866]
NORMAL_42_X_3 = [-1.428231536751654, 0.5988553181928518, 1.1359876465310976, 0.45768322743012424]


@pytest.mark.parametrize("seed", sorted(VECTORS))
def test_scalar_reference_matches_published_vectors(seed):
    assert splitmix64_scalar(seed, 3) == VECTORS[seed]


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_vectorized_stream_matches_scalar(seed):
    ref = splitmix64_scalar(seed, 50)
    assert [int(x) for x in Rng(seed).bits(50)] == ref
    assert [int(x) for x in Rng(seed).bits(10, offset=40)] == ref[40:]


def test_uniform_from_top_53_bits():
    expected = [(x >> 11) * 2.0**-53 for x in splitmix64_scalar(42, 3)]
    assert Rng(42).uniform((3,)).tolist() == expected == UNIFORM_42


def test_normal_frozen():
    assert Rng(42).derive("x", 3).normal((4,)).tolist() == NORMAL_42_X_3


def test_uniform_bounds_and_shape():
    u = Rng(7).uniform((20, 30), -2.0, 3.0)
    assert u.shape == (20, 30)
    assert u.min() >= -2.0 and u.max() < 3.0


def test_normal_moments():
    z = Rng(9).normal((200_000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_derive_is_deterministic_and_key_sensitive():
    a = Rng(5).derive("batch", 3).uniform((4,))
    b = Rng(5).derive("batch", 3).uniform((4,))
    c = Rng(5).derive("batch", 4).uniform((4,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
