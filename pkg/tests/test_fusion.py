import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dmrl.errors import ShapeError
from dmrl.fusion import fuse, fuse_masked, fuse_np, fuse_subset

# stacks of 1..5 modalities of (A, H, W) maps; A, H, W small
reps = st.integers(1, 5).flatmap(
    lambda k: st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)).flatmap(
        lambda shp: hnp.arrays(np.float32, (k, *shp), elements=st.floats(-10, 10, width=32))
    )
)


def check_fusion_algebra(stack: np.ndarray, perm: np.ndarray) -> None:
    out = fuse_np(list(stack))
    A = stack.shape[1]
    assert out.shape == (3 * A, *stack.shape[2:])
    # permutation invariance, bit for bit
    assert fuse_np(list(stack[perm])).tobytes() == out.tobytes()
    # duplication idempotence: max/min exact, mean up to float32 rounding of the sum
    dup = fuse_np(list(stack) + list(stack))
    mx, mean, mn = out[:A], out[A : 2 * A], out[2 * A :]
    assert dup[:A].tobytes() == mx.tobytes() and dup[2 * A :].tobytes() == mn.tobytes()
    tol = 4 * np.finfo(np.float32).eps * np.abs(stack).max(0) * len(stack)
    assert np.all(np.abs(dup[A : 2 * A] - mean) <= tol)
    assert fuse_np([stack[0], stack[0]]).tobytes() == fuse_np([stack[0]]).tobytes()
    assert np.all(mn <= mean) and np.all(mean <= mx)
    np.testing.assert_array_equal(mx, stack.max(0))
    np.testing.assert_array_equal(mn, stack.min(0))


@settings(max_examples=1000, deadline=None)
@given(reps, st.randoms(use_true_random=False))
def test_fusion_properties(stack, rnd):
    perm = np.arange(len(stack))
    rnd.shuffle(perm)
    check_fusion_algebra(stack, perm)


def test_single_modality():
    s = torch.rand(4, 8, 8)
    out = fuse([s])
    assert torch.equal(out, torch.cat([s, s, s]))


def test_two_values():
    a = torch.full((4, 2, 2), 0.2)
    b = torch.full((4, 2, 2), 0.6)
    out = fuse([a, b])
    assert torch.allclose(out[:4], torch.tensor(0.6))
    assert torch.allclose(out[4:8], torch.tensor(0.4))
    assert torch.allclose(out[8:], torch.tensor(0.2))


def test_fixed_channel_count():
    for k in range(1, 5):
        assert fuse([torch.rand(2, 4, 8, 8) for _ in range(k)]).shape == (2, 12, 8, 8)


def test_monotone_in_added_modality():
    g = torch.Generator().manual_seed(0)
    base = [torch.rand(4, 6, 6, generator=g) for _ in range(2)]
    more = fuse(base + [torch.rand(4, 6, 6, generator=g)])
    less = fuse(base)
    assert torch.all(more[:4] >= less[:4]) and torch.all(more[8:] <= less[8:])


def test_errors():
    with pytest.raises(ValueError):
        fuse([])
    with pytest.raises(ShapeError):
        fuse([torch.rand(4, 8, 8), torch.rand(4, 8, 6)])
    with pytest.raises(ValueError):
        fuse_subset(torch.rand(1, 2, 4, 8, 8), [])


def test_masked_matches_subset():
    g = torch.Generator().manual_seed(1)
    s = torch.rand(3, 4, 4, 6, 6, generator=g)
    mask = torch.tensor([[1, 0, 1, 1], [0, 1, 0, 0], [1, 1, 1, 1]], dtype=torch.bool)
    out = fuse_masked(s, mask)
    for b in range(3):
        avail = [i for i in range(4) if mask[b, i]]
        ref = fuse_subset(s[b : b + 1], avail)
        assert torch.allclose(out[b : b + 1], ref, atol=1e-6)
    with pytest.raises(ValueError):
        fuse_masked(s, torch.zeros(3, 4, dtype=torch.bool))
