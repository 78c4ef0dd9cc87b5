"""
Finite-difference gradient checks

grad_check compares the tape's gradient of a scalar function with central differences.
run_gradient_suite checks every differentiable operation the pipeline uses, each module
with parameters, and the end-to-end photometric loss of a tiny field, all at 64-bit.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np
from tqdm import tqdm

from .config import FieldConfig
from .dataset import generate_captures
from .encoder import FeatureMap, sample_pixel_aligned_batch
from .errors import DimensionError
from .field import (GridSpec, MultiViewTransformer, SkeletalBank, SkeletalRadianceField, TemporalTransformer,
                    VoxelGrid, multiview_fuse, sample_skeletal, temporal_fuse)
from .geometry import generate_rays, pixel_grid, ray_box_bounds_batch
from .log import progress_disabled
from .nn import Conv2d, Linear, SparseConv3d, dilate_cells
from .render import composite, render_rays
from .tensor import (Tensor, add, backward, concat, cumsum, default_dtype, exp, index_add, make_rng, matmul,
                     mul, no_grad, relu, reshape, sigmoid, softmax_rows, softplus, sub, take_rows, transpose,
                     weighted_sum)

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
# one-sided slopes further apart than this mark a kink
KINK_RELATIVE = 1e-2
KINK_ABSOLUTE = 1e-4
SUITE_STREAM = 0x6C

TINY_FIELD = FieldConfig(
    d_img=4, encoder_channels=(4, 4), d_temporal=4, d_vox=4, d_mv=8, density_hidden=8, color_hidden=8,
    direction_frequencies=2, voxel_divisions=6, memory_offset=1,
)


@dataclass
class GradCheckReport:
    name: str
    max_error: float
    tolerance: float
    checked: int
    skipped: int = 0
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return (f"{self.name}: max rel error {self.max_error:.2e} (tol {self.tolerance:.0e}, "
                f"{self.checked} checked, {self.skipped} skipped) {status}")


def _scalar(out) -> float:
    if not isinstance(out, Tensor):
        out = Tensor(np.asarray(out, dtype=np.float64))
    if out.size != 1:
        raise DimensionError(f"gradient checks need a scalar function, got shape {out.shape}")
    return float(out.data.reshape(()))


def relative_error(analytic: float, numeric: float, eps: float = DEFAULT_EPS) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), eps)


def _compare(f0: float, fp: float, fm: float, analytic: float, eps: float):
    """Relative error of one entry, or None at a kink"""
    forward, backward_slope = (fp - f0) / eps, (f0 - fm) / eps
    if abs(forward - backward_slope) > max(KINK_RELATIVE * max(abs(forward), abs(backward_slope)), KINK_ABSOLUTE):
        return None
    return relative_error(analytic, (fp - fm) / (2.0 * eps), eps)


def check_gradient(f: Callable[[Tensor], Tensor], x, eps: float = DEFAULT_EPS, tol: float = OP_TOLERANCE,
                   name: str = "f", max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Check df/dx for every entry of x (or a random subset of max_entries)"""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with default_dtype(np.float64):
        leaf = Tensor(x.copy(), requires_grad=True)
        out = f(leaf)
        f0 = _scalar(out)
        if isinstance(out, Tensor) and out.requires_grad:
            backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        entries = np.arange(x.size)
        if max_entries is not None and max_entries < x.size:
            entries = np.sort((rng or np.random.default_rng(0)).choice(x.size, max_entries, replace=False))
        worst, skipped = 0.0, 0
        for i in entries:
            probe = x.copy()
            with no_grad():
                probe.flat[i] = x.flat[i] + eps
                fp = _scalar(f(Tensor(probe)))
                probe.flat[i] = x.flat[i] - eps
                fm = _scalar(f(Tensor(probe)))
            error = _compare(f0, fp, fm, float(analytic.flat[i]), eps)
            if error is None:
                skipped += 1
                logger.debug("%s: entry %d is a non-differentiable point, skipped", name, i)
                continue
            worst = max(worst, error)
    if skipped:
        logger.warning("%s: skipped %d non-differentiable point(s)", name, skipped)
    return GradCheckReport(name, worst, tol, len(entries) - skipped, skipped)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = DEFAULT_EPS, tol: float = OP_TOLERANCE) -> float:
    """Max over entries of |analytic - numeric| / max(|analytic|, |numeric|, eps)"""
    return check_gradient(f, x, eps, tol).max_error


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = DEFAULT_EPS,
                     tol: float = OP_TOLERANCE, samples: int = 4, rng: Optional[np.random.Generator] = None,
                     name: str = "parameters") -> GradCheckReport:
    """Check a few randomly chosen entries of every parameter against loss_fn()"""
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    f0 = _scalar(out)
    backward(out)
    details: Dict[str, float] = {}
    checked = skipped = 0
    for pname, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        count = min(samples, p.size)
        worst = 0.0
        for i in rng.choice(p.size, count, replace=False):
            original = p.data.flat[i]
            with no_grad():
                p.data.flat[i] = original + eps
                fp = _scalar(loss_fn())
                p.data.flat[i] = original - eps
                fm = _scalar(loss_fn())
            p.data.flat[i] = original
            error = _compare(f0, fp, fm, float(analytic.flat[i]), eps)
            if error is None:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, error)
        details[pname] = worst
    if skipped:
        logger.warning("%s: skipped %d non-differentiable point(s)", name, skipped)
    worst = max(details.values()) if details else 0.0
    return GradCheckReport(name, worst, tol, checked, skipped, details)


def _projection(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Fixed random linear functional turning an output of `shape` into a scalar"""
    weights = rng.standard_normal(shape)
    return lambda out: mul(out, Tensor(weights)).sum()


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _op_cases(rng: np.random.Generator) -> List[GradCheckReport]:
    reports = []

    def check(name, f, x):
        reports.append(check_gradient(f, x, name=name))

    x34 = rng.standard_normal((3, 4))
    row = Tensor(rng.standard_normal(4))
    p34 = _projection(rng, (3, 4))
    check("add", lambda x: p34(add(x, row)), x34)
    check("sub", lambda x: p34(sub(Tensor(np.ones((3, 4))), x)), x34)
    check("mul", lambda x: p34(mul(x, x)), x34)
    check("affine", lambda x: p34(x * 2.5 + 1.0), x34)

    b = rng.standard_normal((4, 5))
    p235 = _projection(rng, (2, 3, 5))
    check("matmul", lambda x: p235(matmul(x, Tensor(b))), rng.standard_normal((2, 3, 4)))
    a = rng.standard_normal((2, 3, 4))
    check("matmul batched rhs", lambda x: p235(matmul(Tensor(a), x)), rng.standard_normal((2, 4, 5)))

    check("relu", lambda x: p34(relu(x)), _away_from_zero(rng, (3, 4)))
    check("sigmoid", lambda x: p34(sigmoid(x)), x34)
    check("softplus", lambda x: p34(softplus(x)), x34)
    check("exp", lambda x: p34(exp(x)), x34)

    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    p45 = _projection(rng, (4, 5))
    check("softmax_rows", lambda x: p45(softmax_rows(x, mask=mask)), rng.standard_normal((4, 5)))

    p3 = _projection(rng, (3,))
    p14 = _projection(rng, (1, 4))
    check("sum", lambda x: p3(x.sum(axis=1)), x34)
    check("mean", lambda x: p14(x.mean(axis=0, keepdims=True)), x34)
    p43 = _projection(rng, (4, 3))
    check("transpose", lambda x: p43(transpose(x)), x34)
    p26 = _projection(rng, (2, 6))
    check("reshape", lambda x: p26(reshape(x, (2, 6))), x34)
    const = Tensor(rng.standard_normal((3, 2)))
    p36 = _projection(rng, (3, 6))
    check("concat", lambda x: p36(concat([x, const], axis=1)), x34)

    index = rng.integers(0, 3, size=(5, 2))
    p524 = _projection(rng, (5, 2, 4))
    check("take_rows", lambda x: p524(take_rows(x, index)), x34)
    target = rng.integers(0, 2, size=3)
    p24 = _projection(rng, (2, 4))
    check("index_add", lambda x: p24(index_add(x, target, 2)), x34)
    check("cumsum", lambda x: p34(cumsum(x, exclusive=True)), x34)
    w = rng.random((3, 4))
    p32 = _projection(rng, (3, 2))
    check("weighted_sum", lambda x: p32(weighted_sum(w, x)), rng.standard_normal((3, 4, 2)))

    sigma = rng.uniform(0.1, 2.0, size=(3, 6))
    colors = rng.random((3, 6, 3))
    deltas = rng.uniform(0.05, 0.3, size=(3, 6))
    p33 = _projection(rng, (3, 3))
    check("composite density", lambda x: p33(composite(x, Tensor(colors), deltas).rgb), sigma)
    check("composite color", lambda x: p33(composite(Tensor(sigma), x, deltas).rgb), colors)
    check("composite opacity", lambda x: p3(composite(x, Tensor(colors), deltas).opacity), sigma)
    return reports


def _module_cases(rng: np.random.Generator) -> List[GradCheckReport]:
    reports = []

    linear = Linear(4, 3, rng)
    x = rng.standard_normal((5, 4))
    p53 = _projection(rng, (5, 3))
    reports.append(check_gradient(lambda t: p53(linear(t)), x, name="linear input"))
    reports.append(check_parameters(lambda: p53(linear(Tensor(x))), linear.parameters(), name="linear params"))

    conv = Conv2d(2, 3, stride=2, rng=rng)
    image = rng.standard_normal((6, 4, 2))
    p_conv = _projection(rng, (3, 2, 3))
    reports.append(check_gradient(lambda t: p_conv(conv(t)), image, name="conv2d input"))
    reports.append(check_parameters(lambda: p_conv(conv(Tensor(image))), conv.parameters(), name="conv2d params"))

    dims = (4, 4, 4)
    coords = np.array([[1, 1, 1], [1, 2, 1], [2, 2, 2], [0, 3, 3]])
    sparse = SparseConv3d(2, 3, rng)
    n_out = dilate_cells(coords, dims).shape[0]
    p_sparse = _projection(rng, (2, n_out, 3))
    features = rng.standard_normal((2, 4, 2))
    reports.append(check_gradient(lambda t: p_sparse(sparse(t, coords, dims)[0]), features,
                                  name="sparse conv3d input"))
    reports.append(check_parameters(lambda: p_sparse(sparse(Tensor(features), coords, dims)[0]),
                                    sparse.parameters(), name="sparse conv3d params"))

    fmap = rng.standard_normal((4, 5, 3))
    pixels = rng.uniform(-0.5, 9.5, size=(7, 2))
    pixels[0] = (20.0, 3.0)
    p73 = _projection(rng, (7, 3))
    reports.append(check_gradient(
        lambda t: p73(sample_pixel_aligned_batch([FeatureMap(t, 0, 0, 10, 8)], np.zeros(7, dtype=np.int64),
                                                 pixels)[0]),
        fmap, name="bilinear sampling"))

    local = rng.uniform(-0.5, 0.5, size=(30, 3))
    spec = GridSpec.from_vertices(local, divisions=4)
    cells = dilate_cells(np.unique(spec.cell_of(local), axis=0), spec.dims)
    lookup = np.full(spec.dims, -1, dtype=np.int64)
    lookup[cells[:, 0], cells[:, 1], cells[:, 2]] = np.arange(cells.shape[0])
    queries = rng.uniform(-0.55, 0.55, size=(9, 3))
    p_tri = _projection(rng, (9, 2, 3))
    grid_features = rng.standard_normal((2, cells.shape[0], 3))
    reports.append(check_gradient(
        lambda t: p_tri(sample_skeletal(VoxelGrid(spec, cells, t, lookup), queries)),
        grid_features, name="trilinear sampling"))

    temporal = TemporalTransformer(3, 4, rng)
    valid = rng.random((5, 2, 3)) < 0.7
    valid[:, :, 0] = True
    valid[0, 0, 1:] = False
    p_bank = _projection(rng, (5, 2, 3))
    bank_features = rng.standard_normal((5, 2, 3, 3))

    def fuse(t):
        return p_bank(temporal_fuse(SkeletalBank(t, valid, (1, 0, 2), (0, 1)), temporal))

    reports.append(check_gradient(fuse, bank_features, name="temporal transformer input"))
    reports.append(check_parameters(lambda: fuse(Tensor(bank_features)), temporal.parameters(),
                                    name="temporal transformer params"))

    multiview = MultiViewTransformer(3, 4, rng)
    skeletal = rng.standard_normal((6, 3, 3))
    pixel = rng.standard_normal((6, 3, 3))
    view_valid = rng.random((6, 3)) < 0.7
    view_valid[:, 0] = True
    p_mv = _projection(rng, (6, 3, 4))
    p_mean = _projection(rng, (6, 4))

    def mv(s, p):
        z, z_mean = multiview_fuse(s, p, view_valid, multiview)
        return p_mv(z) + p_mean(z_mean)

    reports.append(check_gradient(lambda t: mv(t, Tensor(pixel)), skeletal, name="multi-view transformer skeletal"))
    reports.append(check_gradient(lambda t: mv(Tensor(skeletal), t), pixel, name="multi-view transformer pixel"))
    reports.append(check_parameters(lambda: mv(Tensor(skeletal), Tensor(pixel)), multiview.parameters(),
                                    name="multi-view transformer params"))
    return reports


def end_to_end_report(seed: int = 0, samples: int = 3, rays: int = 4) -> GradCheckReport:
    """Photometric loss of a tiny field rendered along a few rays, checked on sampled parameters"""
    rng = make_rng(seed, SUITE_STREAM + 1)
    captures = generate_captures(seed=seed, subjects=1, frames=3, views=3, resolution=16)
    model = SkeletalRadianceField(TINY_FIELD, seed=seed)
    cam = captures.cameras[-1]
    origin, directions = generate_rays(cam, pixel_grid(cam))
    with no_grad():
        bbox = model.prepare_frame(captures, 0, 1).bbox
    near, far, hit = ray_box_bounds_batch(origin, directions, bbox)
    chosen = np.flatnonzero(hit & (far > near))[:rays]
    target = captures.subjects[0].images[-1, 1].reshape(-1, 3)[chosen]

    def loss():
        state = model.prepare_frame(captures, 0, 1)
        result = render_rays(model, state, origin, directions[chosen], near[chosen], far[chosen], samples=4)
        residual = sub(result.rgb, Tensor(target))
        return mul(residual, residual).mean()

    return check_parameters(loss, model.parameters(), tol=END_TO_END_TOLERANCE, samples=samples, rng=rng,
                            name="end-to-end photometric loss")


def run_gradient_suite(seed: int = 0, end_to_end: bool = True) -> List[GradCheckReport]:
    """Every check at 64-bit; the caller decides what a failure means"""
    reports: List[GradCheckReport] = []
    with default_dtype(np.float64):
        rng = make_rng(seed, SUITE_STREAM)
        groups = [("[1/3] Checking tensor operations...", lambda: _op_cases(rng)),
                  ("[2/3] Checking layers and attention...", lambda: _module_cases(rng))]
        if end_to_end:
            groups.append(("[3/3] Checking end-to-end rendering loss...", lambda: [end_to_end_report(seed)]))
        for message, run in tqdm(groups, desc="Gradient suite", disable=progress_disabled(logger)):
            logger.info(message)
            for report in run():
                (logger.info if report.passed else logger.error)("  %s", report)
                reports.append(report)
    failed = [r for r in reports if not r.passed]
    logger.info("Gradient suite: %d checks, %d failed", len(reports), len(failed))
    return reports
