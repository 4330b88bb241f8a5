"""Tests for diff_core.py"""

import math

import pytest
import torch

from diff_core import (
    DTYPE, ParamStore, as_array, finite_diff_check, forward_backward, hinge, kink_distance,
    l2_normalize, pairwise_euclidean, softmax,
)
from errors import ConfigError, NormalizationError, NumericalError, ShapeError


class TestParamStore:
    """Tests for the named parameter store."""

    def test_order_and_numel(self):
        """Parameters keep insertion order and count all coordinates."""
        params = ParamStore([("a", torch.zeros(2, 3, dtype=DTYPE)), ("b", torch.zeros(4, dtype=DTYPE))])

        assert list(params) == ["a", "b"]
        assert params.numel() == 10
        assert params["a"].requires_grad

    def test_duplicate_name(self):
        """Adding a name twice is a config error."""
        params = ParamStore([("a", torch.zeros(1, dtype=DTYPE))])

        with pytest.raises(ConfigError):
            params.add("a", torch.zeros(1, dtype=DTYPE))

    def test_locate(self):
        """Flat coordinates map to (name, offset)."""
        params = ParamStore([("a", torch.zeros(2, 3, dtype=DTYPE)), ("b", torch.zeros(4, dtype=DTYPE))])

        assert params.locate(0) == ("a", 0)
        assert params.locate(5) == ("a", 5)
        assert params.locate(6) == ("b", 0)
        with pytest.raises(IndexError):
            params.locate(10)

    def test_grad_defaults_to_zeros(self):
        """An untouched parameter reports a zero gradient."""
        params = ParamStore([("a", torch.ones(3, dtype=DTYPE))])

        assert torch.equal(params.grad("a"), torch.zeros(3, dtype=DTYPE))


class TestForwardBackward:
    """Tests for forward_backward."""

    def test_gradient_of_quadratic(self):
        """d/dx sum(x^2) = 2x."""
        x = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
        params = ParamStore([("x", x)])

        value = forward_backward(lambda: (params["x"] ** 2).sum(), params)

        assert value == pytest.approx(14.0)
        assert torch.allclose(params.grad("x"), torch.tensor([2.0, -4.0, 6.0], dtype=DTYPE))

    def test_gradients_accumulate(self):
        """Two passes add up until zero_grad."""
        params = ParamStore([("x", torch.tensor([1.0], dtype=DTYPE))])

        forward_backward(lambda: 3.0 * params["x"].sum(), params)
        forward_backward(lambda: 3.0 * params["x"].sum(), params)
        assert params.grad("x").item() == pytest.approx(6.0)

        params.zero_grad()
        assert params.grad("x").item() == 0.0

    def test_non_scalar_loss(self):
        """A vector loss is a shape error."""
        params = ParamStore([("x", torch.ones(2, dtype=DTYPE))])

        with pytest.raises(ShapeError):
            forward_backward(lambda: params["x"] * 2, params)

    def test_non_finite_loss(self):
        """A NaN loss names the failing primitive."""
        params = ParamStore([("x", torch.ones(1, dtype=DTYPE))])

        with pytest.raises(NumericalError) as info:
            forward_backward(lambda: (params["x"] * float("nan")).sum(), params)
        assert info.value.primitive == "loss"


class TestFiniteDiffCheck:
    """Tests for the central-difference gradient checker."""

    def test_smooth_function_passes(self):
        """A smooth loss agrees with autograd to high accuracy."""
        generator = torch.Generator().manual_seed(0)
        params = ParamStore([("w", torch.randn(5, 4, generator=generator, dtype=DTYPE))])

        error = finite_diff_check(lambda: torch.sin(params["w"]).sum() + (params["w"] ** 3).sum(), params,
                                  sample_count=20)

        assert error < 1e-5

    def test_wrong_gradient_is_detected(self):
        """A loss whose backward is deliberately wrong fails the check."""
        class Doubled(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, grad):
                (x,) = ctx.saved_tensors
                return grad * 4 * x

        params = ParamStore([("x", torch.tensor([1.0, 2.0], dtype=DTYPE))])

        assert finite_diff_check(lambda: Doubled.apply(params["x"]), params, sample_count=2) >= 0.4

    def test_parameters_restored(self):
        """Perturbations are undone and gradients reset."""
        x = torch.tensor([0.5, -1.5, 2.0], dtype=DTYPE)
        params = ParamStore([("x", x.clone())])

        finite_diff_check(lambda: (params["x"] ** 2).sum(), params, sample_count=3)

        assert torch.equal(params["x"].detach(), x)
        assert torch.equal(params.grad("x"), torch.zeros(3, dtype=DTYPE))

    def test_bad_arguments(self):
        """Nonpositive step or too many samples are rejected."""
        params = ParamStore([("x", torch.ones(2, dtype=DTYPE))])

        with pytest.raises(ConfigError):
            finite_diff_check(lambda: params["x"].sum(), params, step=0.0, sample_count=1)
        with pytest.raises(ConfigError):
            finite_diff_check(lambda: params["x"].sum(), params, sample_count=3)


class TestPrimitives:
    """Tests for hinge, softmax, normalization and distances."""

    def test_hinge_subgradient_at_zero(self):
        """[x]_+ has derivative 0 exactly at the kink."""
        x = torch.tensor([-1.0, 0.0, 2.0], dtype=DTYPE, requires_grad=True)
        hinge(x).sum().backward()

        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_softmax_shift_invariance(self):
        """Adding a constant to every logit leaves the weights unchanged."""
        logits = torch.tensor([0.3, -1.2, 2.5, 0.0], dtype=DTYPE)

        assert torch.allclose(softmax(logits), softmax(logits + 7.5), atol=1e-12)
        assert softmax(logits).sum().item() == pytest.approx(1.0, abs=1e-12)

    def test_l2_normalize(self):
        """Rows become unit vectors."""
        x = torch.tensor([[3.0, 4.0], [0.0, -2.0]], dtype=DTYPE)

        assert torch.allclose(l2_normalize(x), torch.tensor([[0.6, 0.8], [0.0, -1.0]], dtype=DTYPE))

    def test_l2_normalize_zero_vector(self):
        """A (near-)zero row names the sample."""
        x = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=DTYPE)

        with pytest.raises(NormalizationError) as info:
            l2_normalize(x)
        assert info.value.sample == 1

    def test_pairwise_euclidean_values(self):
        """Distances match the definition and the diagonal is exactly zero."""
        a = torch.tensor([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]], dtype=DTYPE)
        d = pairwise_euclidean(a)

        assert d[0, 1].item() == pytest.approx(5.0)
        assert d[2, 0].item() == pytest.approx(math.sqrt(2.0))
        assert torch.equal(d, d.T)
        assert torch.equal(torch.diagonal(d), torch.zeros(3, dtype=DTYPE))

    def test_pairwise_euclidean_coincident_gradient(self):
        """Coincident points contribute zero gradient instead of NaN."""
        a = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=DTYPE, requires_grad=True)
        pairwise_euclidean(a).sum().backward()

        assert torch.isfinite(a.grad).all()
        assert torch.equal(a.grad, torch.zeros_like(a))

    def test_pairwise_dimension_mismatch(self):
        """Feature dims must agree."""
        with pytest.raises(ShapeError):
            pairwise_euclidean(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE))

    def test_kink_distance(self):
        """Closest finite entry to the kink; inf entries are ignored."""
        x = torch.tensor([0.3, -0.05, float("inf"), 0.62], dtype=DTYPE)

        assert kink_distance(x) == pytest.approx(0.05)
        assert kink_distance(x, kink=0.6) == pytest.approx(0.02)
        assert kink_distance(torch.tensor([float("inf")], dtype=DTYPE)) == float("inf")

    def test_as_array_rejects_nan(self):
        """NaN input is refused on entry."""
        with pytest.raises(NumericalError):
            as_array([1.0, float("nan")])
