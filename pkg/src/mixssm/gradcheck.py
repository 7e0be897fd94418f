"""Central finite-difference verification of recorded gradients.

This is the oracle used by the test suite and the ``gradcheck`` CLI command:
every differentiable operation and every assembled component is compared
against (f(x + h e_i) - f(x - h e_i)) / 2h, component by component, in
double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, no_grad

__all__ = [
    "GradCheckReport",
    "finite_diff_check",
    "check_parameter_gradients",
    "gradient_suite",
]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.size != 1:
        raise ShapeError("gradient check requires a scalar-valued function")
    return value.item()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare the taped gradient of ``f`` at ``x`` against central differences.

    ``f`` must be deterministic; two baseline evaluations that disagree raise
    ``ValueError``.  Relative error per component uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = x.data.copy()

    with no_grad():
        y0 = _scalar(f(Tensor(base.copy(), dtype=x.dtype)))
        y1 = _scalar(f(Tensor(base.copy(), dtype=x.dtype)))
    if y0 != y1:
        raise ValueError(f"f is not deterministic: baseline evaluations {y0} != {y1}")

    probe = Tensor(base.copy(), requires_grad=True, dtype=x.dtype)
    out = f(probe)
    _scalar(out)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            bumped = base.reshape(-1).copy()
            bumped[i] += step
            hi = _scalar(f(Tensor(bumped.reshape(base.shape), dtype=x.dtype)))
            bumped[i] -= 2.0 * step
            lo = _scalar(f(Tensor(bumped.reshape(base.shape), dtype=x.dtype)))
            flat[i] = (hi - lo) / (2.0 * step)

    err = _rel_error(analytic, numeric)
    return GradCheckReport(max_rel_error=err, tolerance=tolerance, passed=err <= tolerance)


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-4,
    tolerance: float = 1e-3,
) -> tuple[GradCheckReport, dict[str, float]]:
    """Finite-difference check of ``loss_fn`` w.r.t. a set of live parameters.

    Parameters are perturbed in place and restored; the analytic side comes
    from one backward pass.  Returns the overall report plus the max relative
    error per parameter name.
    """
    params = list(params)
    with no_grad():
        y0 = _scalar(loss_fn())
        y1 = _scalar(loss_fn())
    if y0 != y1:
        raise ValueError(f"loss_fn is not deterministic: {y0} != {y1}")

    for _, p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    loss.backward()

    per_param: dict[str, float] = {}
    worst = 0.0
    with no_grad():
        for name, p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat_p = p.data.reshape(-1)
            flat_n = numeric.reshape(-1)
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + step
                hi = _scalar(loss_fn())
                flat_p[i] = orig - step
                lo = _scalar(loss_fn())
                flat_p[i] = orig
                flat_n[i] = (hi - lo) / (2.0 * step)
            err = _rel_error(analytic, numeric)
            per_param[name] = err
            worst = max(worst, err)

    report = GradCheckReport(max_rel_error=worst, tolerance=tolerance, passed=worst <= tolerance)
    return report, per_param


def gradient_suite(seed: int = 0, seeds: int = 5, step: float = 1e-3) -> dict[str, float]:
    """Max relative gradient error per component, double precision.

    Each of the four branches, the selective fusion module and one full
    mixing block is checked on a 4x4x8 input over ``seeds`` random seeds,
    w.r.t. all of its parameters.  The step is larger than the primitive
    checks use because deep components have near-zero gradient entries
    where central differences are cancellation-limited.
    """
    # imported here so the substrate module stays free of model dependencies
    from .encoders import AttentionBranch, ChannelMlpBranch, ConvBranch, SsmBranch
    from .fusion import SelectiveFusion, selective_module
    from .network import MixSsmBlock
    from .tensor import mul, reduce_sum

    channels, heads, state_dim = 8, 2, 8
    results: dict[str, float] = {}

    def probe(name: str, build):
        worst = 0.0
        for offset in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed + offset, 0xC0DE]))
            component, forward = build(rng)
            x = Tensor(rng.standard_normal((4, 4, channels)), dtype=np.float64)
            proj = Tensor(rng.standard_normal(forward(x).shape), dtype=np.float64)
            loss_fn = lambda: reduce_sum(mul(forward(x), proj))  # noqa: B023
            report, _ = check_parameter_gradients(
                loss_fn, list(component.named_parameters()), step=step
            )
            worst = max(worst, report.max_rel_error)
        results[name] = worst

    def build_conv(rng):
        branch = ConvBranch(channels, rng=rng, dtype=np.float64)
        return branch, branch

    def build_msa(rng):
        branch = AttentionBranch(channels, heads, rng=rng, dtype=np.float64)
        return branch, branch

    def build_mlp(rng):
        branch = ChannelMlpBranch(channels, rng=rng, dtype=np.float64)
        return branch, branch

    def build_ssm(rng):
        branch = SsmBranch(channels, state_dim, rng=rng, dtype=np.float64)
        return branch, branch

    def build_fusion(rng):
        fusion = SelectiveFusion(channels, n=4, rng=rng, dtype=np.float64)
        maps = [
            Tensor(rng.standard_normal((4, 4, channels)), dtype=np.float64) for _ in range(4)
        ]
        return fusion, lambda _x: selective_module(maps, fusion)

    def build_block(rng):
        block = MixSsmBlock(
            channels, heads, ("ssm", "conv", "mlp", "msa"), state_dim,
            kernel_size=3, pooling="average", aggregation="selective",
            reduction=4, ssm_shared_directions=True, rng=rng, dtype=np.float64,
        )
        return block, block

    probe("conv_branch", build_conv)
    probe("msa_branch", build_msa)
    probe("mlp_branch", build_mlp)
    probe("ssm_branch", build_ssm)
    probe("selective_module", build_fusion)
    probe("mix_ssm_block", build_block)
    return results
