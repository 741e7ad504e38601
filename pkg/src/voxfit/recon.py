"""Model-based reconstruction of undersampled multi-coil multi-echo 2-D k-space.

Forward operator, per echo e and coil c::

    k[:, :, c, e] = M_e * DFT2(C_c * I_e)

with a unitary DFT. The image is recovered either by conjugate gradients on
the normal equations (L2 + Tikhonov) or by the gradient solver on real and
imaginary parts, optionally with 2-D TV per echo.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .models import ModelSpec
from .regularizers import RegularizerSpec
from .solver import FitResult, SolverOptions, optimize
from .volume import Mask, MeasuredData, ParamSet, Protocol, grid_graph


RECON_LEARN_RATE = 1e-2


@dataclass(frozen=True)
class ReconProblem:
    kspace: np.ndarray      # [ky, kz, coil, echo] complex
    coilmaps: np.ndarray    # [ky, kz, coil] complex
    sampling: np.ndarray    # [ky, kz, echo] bool
    lambda_tv: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.kspace, dtype=np.complex128)
        c = np.asarray(self.coilmaps, dtype=np.complex128)
        m = np.asarray(self.sampling, dtype=bool)
        if k.ndim != 4 or c.ndim != 3 or m.ndim != 3:
            raise ShapeError("expected kspace [ky,kz,coil,echo], coilmaps [ky,kz,coil], "
                             "sampling [ky,kz,echo]")
        if c.shape != k.shape[:3] or m.shape != k.shape[:2] + k.shape[3:]:
            raise ShapeError(f"inconsistent shapes: kspace {k.shape}, coilmaps {c.shape}, "
                             f"sampling {m.shape}")
        if not np.all(np.isfinite(c)):
            raise ShapeError("coil maps must be finite")
        if not np.all(m.reshape(-1, m.shape[-1]).any(axis=0)):
            raise ConfigError("every echo needs at least one sampled location")
        if self.lambda_tv < 0:
            raise ConfigError("lambda_tv must be >= 0")
        object.__setattr__(self, "kspace", k * m[:, :, None, :])
        object.__setattr__(self, "coilmaps", c)
        object.__setattr__(self, "sampling", m)

    @property
    def image_shape(self):
        ky, kz, _, ne = self.kspace.shape
        return ky, kz, ne


def encode(image, problem: ReconProblem):
    """Predicted k-space ``[ky, kz, coil, echo]`` of ``image`` ``[ky, kz, echo]``."""
    image = np.asarray(image)
    if image.shape != problem.image_shape:
        raise ShapeError(f"image shape {image.shape} != {problem.image_shape}")
    coil_imgs = problem.coilmaps[:, :, :, None] * image[:, :, None, :]
    k = np.fft.fft2(coil_imgs, axes=(0, 1), norm="ortho")
    return k * problem.sampling[:, :, None, :]


def encode_adjoint(kspace, problem: ReconProblem):
    """Exact adjoint of :func:`encode`: coil-combined masked inverse DFT."""
    kspace = np.asarray(kspace)
    if kspace.shape != problem.kspace.shape:
        raise ShapeError(f"k-space shape {kspace.shape} != {problem.kspace.shape}")
    masked = kspace * problem.sampling[:, :, None, :]
    imgs = np.fft.ifft2(masked, axes=(0, 1), norm="ortho")
    return np.sum(np.conj(problem.coilmaps)[:, :, :, None] * imgs, axis=2)


def caipi_mask(ky, kz, rz, z_shift=0, te_shift=0, n_echo=1):
    """Sampled iff ``(kz + z_shift * ky + te_shift * echo) mod Rz == 0``."""
    if int(rz) < 1:
        raise ConfigError("Rz must be >= 1")
    y = np.arange(ky)[:, None, None]
    z = np.arange(kz)[None, :, None]
    e = np.arange(n_echo)[None, None, :]
    return (z + z_shift * y + te_shift * e) % int(rz) == 0


@dataclass
class LsqrResult:
    image: np.ndarray
    iterations: int
    converged: bool
    residual: float


def recon_lsqr(problem: ReconProblem, lambda_tikhonov=0.0, max_iter=500, tol=1e-10):
    """Minimise ``||k - E I||^2 + lambda ||I||^2`` by CG on the normal equations.

    On non-convergence the iterate with the smallest normal-equation residual
    is returned with ``converged=False``.
    """
    lam = float(lambda_tikhonov)

    def normal_op(x):
        return encode_adjoint(encode(x, problem), problem) + lam * x

    rhs = encode_adjoint(problem.kspace, problem)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    norm_rhs = np.sqrt(rs)
    if norm_rhs == 0:
        return LsqrResult(x, 0, True, 0.0)
    best_x, best_res = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        ap = normal_op(p)
        alpha = rs / np.vdot(p, ap).real
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.vdot(r, r).real
        rel = np.sqrt(rs_new) / norm_rhs
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        if rel < tol:
            return LsqrResult(x, it, True, rel)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return LsqrResult(best_x, max_iter, False, best_res)


def zero_filled(problem: ReconProblem):
    return encode_adjoint(problem.kspace, problem)


class _SplitEncoder:
    """Real-linear k-space operator on real/imag image columns, sampled entries only."""

    def __init__(self, problem: ReconProblem):
        self.problem = problem
        self.shape = problem.image_shape
        full = np.broadcast_to(problem.sampling[:, :, None, :], problem.kspace.shape)
        self.where = np.nonzero(full)

    def forward(self, vals):
        re, im = vals
        img = (np.asarray(re) + 1j * np.asarray(im)).reshape(self.shape)
        k = encode(img, self.problem)[self.where]
        return np.stack([k.real, k.imag], axis=1)

    def adjoint(self, g):
        k = np.zeros(self.problem.kspace.shape, dtype=np.complex128)
        k[self.where] = g[:, 0] + 1j * g[:, 1]
        img = encode_adjoint(k, self.problem).reshape(-1, 1)
        return [img.real.copy(), img.imag.copy()]

    def measured(self):
        k = self.problem.kspace[self.where]
        return np.stack([k.real, k.imag], axis=1)


def recon_model(problem: ReconProblem):
    enc = _SplitEncoder(problem)

    def forward(params, protocol):
        return ad.linop([params["re"], params["im"]], enc.forward, enc.adjoint)

    spec = ModelSpec(name="sense_encode", param_names=("re", "im"),
                     lb={"re": -np.inf, "im": -np.inf}, ub={"re": np.inf, "im": np.inf},
                     protocol_axes=(), forward=forward, separable=False)
    return spec, enc


def recon_gd(problem: ReconProblem, loss="l2", lambda_tv=None, options=None, x0=None):
    """Reconstruct with the gradient solver on split real/imaginary images.

    TV (when ``lambda_tv > 0``) acts on real and imaginary parts separately over
    the in-plane 4-neighbour graph of each echo. Starts from the zero-filled
    image unless ``x0`` is given. The learning rate is multiplied by the peak
    zero-filled magnitude. Returns ``(image, FitResult)``.
    """
    lam = problem.lambda_tv if lambda_tv is None else float(lambda_tv)
    model, enc = recon_model(problem)
    start = zero_filled(problem) if x0 is None else np.asarray(x0, dtype=np.complex128)
    theta0 = ParamSet(("re", "im"), {"re": start.real.ravel(), "im": start.imag.ravel()},
                      model.lb, model.ub)
    regs = ()
    if lam > 0:
        graph = grid_graph(Mask.full(problem.image_shape), "2d")
        regs = (RegularizerSpec("tv_graph", ("re", "im"), lam, graph=graph),)
    base = options or SolverOptions(loss_function=loss, initial_learn_rate=RECON_LEARN_RATE,
                                    iteration=500, tol=0.0,
                                    convergence_value=1e-9 if loss == "l2" else 1e-8)
    # image variables are unbounded, so the step is taken relative to image scale
    scale = float(np.max(np.abs(zero_filled(problem)))) or 1.0
    opts = SolverOptions(**{**base.__dict__, "loss_function": loss, "regularizers": regs,
                            "initial_learn_rate": base.initial_learn_rate * scale})
    data = MeasuredData(enc.measured())
    res: FitResult = optimize(theta0, data, Protocol(), model, opts)
    img = (res.final["re"] + 1j * res.final["im"]).reshape(problem.image_shape)
    return img, res
