"""Analysis instruments: channel-wise absolute mean (CAM), its spread (SDAM),
dead-channel counts, per-layer Hessian top eigenvalues and 2-D loss slices."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tervit import autodiff as ad
from tervit.autodiff import GradTape
from tervit.exceptions import DimensionError
from tervit.model import VisionTransformer, owning_layer
from tervit.quantization import QuantizationPolicy, channel_abs_mean


def _matrix(W) -> np.ndarray:
    W = W.data if isinstance(W, ad.Tensor) else np.asarray(W)
    if W.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {W.shape}")
    return W


def cam(W) -> np.ndarray:
    """Mean absolute weight of each output channel (column)."""
    return channel_abs_mean(_matrix(W))


def sdam(W) -> float:
    """Population standard deviation of the CAM vector."""
    return float(np.std(cam(W)))


@dataclass
class DeadChannels:
    threshold: float
    channels: list[int]
    total: int

    @property
    def count(self) -> int:
        return len(self.channels)

    @property
    def fraction(self) -> float:
        return self.count / self.total


def dead_channels(W, reference_min_cam: float) -> DeadChannels:
    """Channels whose CAM lies strictly below ``reference_min_cam``.

    Passing the minimum CAM of a second model's matching layer gives the
    fraction of this model's channels that fall under the other's floor.
    """
    if reference_min_cam < 0:
        raise ValueError("reference_min_cam must be >= 0")
    c = cam(W)
    return DeadChannels(float(reference_min_cam), np.flatnonzero(c < reference_min_cam).tolist(),
                        len(c))


# -- Hessian --------------------------------------------------------------------


@dataclass
class EigenResult:
    value: float
    iterations: int
    converged: bool
    degenerate: bool = False
    history: list[float] = field(default_factory=list)


def power_iteration(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                    iters: int = 50, tol: float = 1e-4, seed: int = 0) -> EigenResult:
    """Top Hessian eigenvalue of a loss around ``theta`` from gradients only.

    Hessian-vector products use central differences of ``grad_fn`` with step
    ``1e-3 * ||theta|| / ||v||`` (``1e-3 / ||v||`` when ``theta`` is zero).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    g0 = np.asarray(grad_fn(theta), dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(theta.shape)
    v /= np.linalg.norm(v)
    tnorm = np.linalg.norm(theta)

    def hvp(vec):
        eps = 1e-3 * (tnorm if tnorm > 0 else 1.0) / np.linalg.norm(vec)
        return (np.asarray(grad_fn(theta + eps * vec), np.float64)
                - np.asarray(grad_fn(theta - eps * vec), np.float64)) / (2 * eps)

    history: list[float] = []
    value = 0.0
    for it in range(1, iters + 1):
        hv = hvp(v)
        value = float(v @ hv)
        history.append(value)
        norm = np.linalg.norm(hv)
        if norm == 0:
            return EigenResult(0.0, it, True, degenerate=not np.any(g0), history=history)
        v = hv / norm
        if it > 1 and abs(history[-1] - history[-2]) <= tol * max(abs(history[-1]), 1e-12):
            return EigenResult(value, it, True, history=history)
    return EigenResult(value, iters, False, history=history)


def _flat_grad_fn(model: VisionTransformer, names: list[str], images, labels,
                  policy: QuantizationPolicy):
    params = [model.params[n] for n in names]
    shapes = [p.shape for p in params]
    sizes = [p.size for p in params]

    def unflatten(vec):
        out, i = [], 0
        for shape, size in zip(shapes, sizes):
            out.append(vec[i:i + size].reshape(shape))
            i += size
        return out

    def grad_fn(vec: np.ndarray) -> np.ndarray:
        saved = [p.data for p in params]
        try:
            for p, val in zip(params, unflatten(vec)):
                p.data = val.astype(p.dtype)
            model.zero_grad()
            with GradTape() as tape:
                loss = ad.cross_entropy(model.forward(images, policy), labels)
            tape.backward(loss)
            return np.concatenate([(p.grad if p.grad is not None else np.zeros(p.shape))
                                   .reshape(-1).astype(np.float64) for p in params])
        finally:
            for p, val in zip(params, saved):
                p.data = val
            model.zero_grad()

    theta = np.concatenate([p.data.reshape(-1).astype(np.float64) for p in params])
    return grad_fn, theta


def layer_parameter_names(model: VisionTransformer, layer_id: str) -> list[str]:
    names = [n for n in model.params if owning_layer(n) == layer_id]
    if not names:
        raise KeyError(f"layer {layer_id!r} has no parameters")
    return names


def hessian_top_eigenvalue(model: VisionTransformer, layer_id: str, images, labels,
                           policy: QuantizationPolicy | None = None, iters: int = 30,
                           tol: float = 1e-3, seed: int = 0,
                           weights_only: bool = True) -> EigenResult:
    """Top eigenvalue of the loss Hessian restricted to one layer's parameters."""
    policy = policy or QuantizationPolicy.real32()
    names = layer_parameter_names(model, layer_id)
    if weights_only and any(n.endswith(".weight") for n in names):
        names = [n for n in names if n.endswith(".weight")]
    grad_fn, theta = _flat_grad_fn(model, names, images, labels, policy)
    return power_iteration(grad_fn, theta, iters, tol, seed)


def hessian_by_layer(model: VisionTransformer, images, labels,
                     policy: QuantizationPolicy | None = None, iters: int = 30,
                     tol: float = 1e-3, seed: int = 0) -> dict[str, float]:
    return {lid: hessian_top_eigenvalue(model, lid, images, labels, policy, iters, tol,
                                        seed).value
            for lid in model.linears}


# -- loss landscape --------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    alphas: np.ndarray  # first direction coordinates (rows)
    betas: np.ndarray  # second direction coordinates (columns)
    loss: np.ndarray  # (resolution, resolution)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a\\b"] + [repr(float(b)) for b in self.betas])
        for a, row in zip(self.alphas, self.loss):
            w.writerow([repr(float(a))] + [repr(float(v)) for v in row])
        return buf.getvalue()


def filter_normalized_direction(params: dict[str, np.ndarray],
                                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random direction scaled channel by channel to the weights' norms.

    Matrices are normalised per output column, other tensors as a whole.
    """
    out = {}
    for name, w in params.items():
        d = rng.standard_normal(w.shape)
        w64 = w.astype(np.float64)
        if w.ndim == 2:
            dn = np.linalg.norm(d, axis=0, keepdims=True)
            out[name] = d * np.linalg.norm(w64, axis=0, keepdims=True) / np.where(dn > 0, dn, 1)
        else:
            dn = np.linalg.norm(d)
            out[name] = d * np.linalg.norm(w64) / (dn if dn > 0 else 1)
    return out


def landscape_grid(params: dict[str, np.ndarray], loss_fn: Callable[[dict], float],
                   resolution: int = 11, span: float = 1.0, seed: int = 0,
                   directions=None) -> LandscapeGrid:
    """Evaluate ``loss_fn(theta + a d1 + b d2)`` over ``[-span, span]^2``.

    ``loss_fn`` receives a full parameter dict; ``params`` is not modified.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be an odd integer >= 3 so (0, 0) is on the grid")
    if span <= 0:
        raise ValueError("span must be positive")
    if directions is None:
        rng = np.random.default_rng(seed)
        directions = (filter_normalized_direction(params, rng),
                      filter_normalized_direction(params, rng))
    d1, d2 = directions
    coords = np.linspace(-span, span, resolution)
    coords[resolution // 2] = 0.0
    grid = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            if a == 0 and b == 0:
                point = params
            else:
                point = {k: (v + a * d1[k] + b * d2[k]).astype(v.dtype) for k, v in params.items()}
            grid[i, j] = loss_fn(point)
    return LandscapeGrid(coords, coords.copy(), grid)


def loss_landscape_2d(model: VisionTransformer, images, labels,
                      policy: QuantizationPolicy | None = None, resolution: int = 11,
                      span: float = 1.0, seed: int = 0) -> LandscapeGrid:
    """2-D loss slice around the model's latent weights in its active mode.

    Quantizers are re-applied to the perturbed latents at every grid point.
    The model's parameters are restored bit-exactly afterwards.
    """
    policy = policy or QuantizationPolicy.real32()
    saved = model.state_dict()

    def loss_fn(point):
        for k, v in point.items():
            model.params[k].data = v
        logits = model.forward(images, policy)
        return float(ad.cross_entropy(logits, labels).data)

    try:
        return landscape_grid(saved, loss_fn, resolution, span, seed)
    finally:
        model.load_state_dict(saved)


def parameter_digest(model: VisionTransformer) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- report ---------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    cam: dict[str, np.ndarray]
    sdam: dict[str, float]
    dead: dict[str, DeadChannels] = field(default_factory=dict)
    hessian: dict[str, float] = field(default_factory=dict)
    landscapes: dict[str, LandscapeGrid] = field(default_factory=dict)

    def cam_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "channel", "cam"])
        for lid, vec in self.cam.items():
            for j, v in enumerate(vec):
                w.writerow([lid, j, repr(float(v))])
        return buf.getvalue()

    def sdam_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "sdam", "min_cam", "hessian_top_eigenvalue"])
        for lid, s in self.sdam.items():
            eig = self.hessian.get(lid)
            w.writerow([lid, repr(s), repr(float(self.cam[lid].min())),
                        "" if eig is None else repr(float(eig))])
        return buf.getvalue()


def diagnose(model: VisionTransformer, reference: VisionTransformer | None = None) -> DiagnosticsReport:
    """CAM/SDAM of every linear layer; dead channels against ``reference``'s minimum CAM."""
    cams = {lid: cam(lin.weight) for lid, lin in model.linears.items()}
    report = DiagnosticsReport(cams, {lid: float(np.std(c)) for lid, c in cams.items()})
    if reference is not None:
        for lid, lin in model.linears.items():
            report.dead[lid] = dead_channels(lin.weight, float(cam(reference.linears[lid].weight)
                                                               .min()))
    return report
