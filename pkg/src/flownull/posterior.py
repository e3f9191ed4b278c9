"""Posterior sampling with data consistency, P-sample averaging and MAP estimation.

All network evaluations happen on normalised data; results are handed back
at the scale of the input measurements.
"""

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np

from flownull import mri
from flownull.core.fft import fft2, ifft2
from flownull.core.optim import AdamState, adam_step
from flownull.core.tensor import Tape, Tensor

log = logging.getLogger(__name__)

LN2 = float(np.log(2.0))


class MaskMismatchError(ValueError):
    pass


@dataclass
class PosteriorBatch:
    samples: np.ndarray  # (P, C, H, W) complex, measurement scale
    combined: np.ndarray  # (P, H, W) complex SENSE images, or None without maps
    rss: np.ndarray  # (P, H, W) magnitude
    log_density: np.ndarray  # (P,) nats, evaluated on the flow's target space
    scale: float
    data_consistency: bool
    nullspace_learning: bool
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def bits_per_dim(self):
        q = self.samples[0].size * 2
        return -self.log_density / (q * LN2)

    def residuals(self, y):
        """Per-sample ``max |A x_p - y|``."""
        mask = self.provenance["mask"]
        return np.array([np.max(np.abs(mri.apply_A(s, mask) - y)) for s in self.samples])


@contextlib.contextmanager
def frozen(model):
    """Temporarily stop parameters from requiring gradients."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _check_shapes(model, y, mask):
    cfg = model.cfg
    if y.shape[-3:] != (cfg.channels // 2, cfg.height, cfg.width):
        raise MaskMismatchError(f"measurements {y.shape[-3:]} do not fit a model for "
                                f"{(cfg.channels // 2, cfg.height, cfg.width)}")
    if mask.width != cfg.width:
        raise MaskMismatchError(f"mask width {mask.width} != image width {cfg.width}")
    expected = getattr(model, "mask", None)
    if expected is not None and expected != mask:
        raise MaskMismatchError("sampling mask differs from the one the checkpoint was trained with")


def _normalise(y, scale, normalize):
    if scale is None:
        scale = mri.normalize_stack(y)[1] if normalize else 1.0
    return (y / scale).astype(np.complex64), float(scale)


def target_space(x_n, y_n, mask, nullspace_learning):
    """Map a normalised reconstruction to the space the flow models."""
    return mri.nullspace_project(x_n, mask) if nullspace_learning else x_n


def log_density(model, x_n, y_n, mask, nullspace_learning=True, batch=32):
    """``log p(target(x) | y)`` in nats for normalised reconstructions ``x_n`` (P, C, H, W)."""
    t = mri.to_channels(target_space(x_n, y_n, mask, nullspace_learning)).astype(model.dtype)
    yc = mri.to_channels(y_n)[None].astype(model.dtype)
    feats = model.features(yc)
    out = []
    for i in range(0, len(t), batch):
        chunk = t[i:i + batch]
        f = [Tensor(np.repeat(fm.data, len(chunk), axis=0)) for fm in feats]
        out.append(model.log_prob(chunk, feats=f)[1].data)
    return np.concatenate(out).astype(np.float64)


def sample_posterior(model, y, mask, P, seed=0, maps=None, scale=None, normalize=True,
                     nullspace_learning=True, data_consistency=True, batch=32):
    """Draw ``P`` reconstructions for measurements ``y`` (complex C x H x W).

    With data consistency each draw is ``(I - A) h(z, g(y)) + y``. Without it
    the raw generator output is returned (plus ``y`` when the flow models
    only the nullspace part, since it cannot produce the measured part).
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    y = np.asarray(y)
    _check_shapes(model, y, mask)
    y_n, scale = _normalise(y, scale, normalize)
    yc = mri.to_channels(y_n)[None].astype(model.dtype)
    feats = model.features(yc)
    z = np.random.default_rng(seed).standard_normal((P, model.latent_dim)).astype(model.dtype)
    gens = []
    for i in range(0, P, batch):
        zb = z[i:i + batch]
        f = [Tensor(np.repeat(fm.data, len(zb), axis=0)) for fm in feats]
        gens.append(mri.from_channels(model.sample(zb, feats=f).data))
    gen = np.concatenate(gens)
    if data_consistency:
        x_n = mri.data_consistency(gen, y_n[None], mask, check=False)
    elif nullspace_learning:
        x_n = gen + y_n[None]
    else:
        x_n = gen
    x_n = x_n.astype(np.complex64)
    logp = log_density(model, x_n, y_n, mask, nullspace_learning, batch)
    samples = (x_n * scale).astype(np.complex64)
    combined = mri.coil_combine_sense(samples, maps) if maps is not None else None
    return PosteriorBatch(
        samples=samples, combined=combined, rss=mri.coil_combine_rss(samples),
        log_density=logp, scale=scale, data_consistency=data_consistency,
        nullspace_learning=nullspace_learning,
        provenance={"mask": mask, "seed": seed, "P": P,
                    "checkpoint": getattr(model, "checkpoint_id", None)},
    )


def posterior_mean(batch, mode="sense"):
    """Average of the P combined images: complex SENSE or magnitude RSS."""
    if isinstance(batch, PosteriorBatch):
        if len(batch) == 0:
            raise ValueError("empty posterior batch")
        if mode == "sense":
            if batch.combined is None:
                raise ValueError("SENSE mean needs coil maps; sample with maps= or use mode='rss'")
            return batch.combined.mean(axis=0)
        if mode == "rss":
            return batch.rss.mean(axis=0)
        raise ValueError(f"unknown mode {mode!r}")
    arr = np.asarray(batch)
    if arr.shape[0] == 0:
        raise ValueError("empty posterior batch")
    return arr.mean(axis=0)


# -- MAP ----------------------------------------------------------------------

@dataclass
class MAPResult:
    x: np.ndarray  # (N, C, H, W) complex, measurement scale
    k_tilde: np.ndarray  # (N, C, H, n_unmeasured) complex, normalised
    trace: np.ndarray  # (iters + 1, N) best-so-far log density, nats
    log_density: np.ndarray  # (N,) nats at x
    scales: np.ndarray
    aborted: bool = False
    init: str = "sample"


def unmeasured_columns(mask):
    return ~mask.kspace_columns()


def gather_unmeasured(x, mask):
    """``k~``: k-space of ``x`` on the unselected columns."""
    return fft2(x)[..., unmeasured_columns(mask)]


def scatter_unmeasured(k_tilde, mask, width):
    """``W k~``: image whose spectrum is ``k~`` on the unselected columns, zero elsewhere."""
    k = np.zeros((*k_tilde.shape[:-1], width), dtype=np.complex128)
    k[..., unmeasured_columns(mask)] = k_tilde
    return ifft2(k)


def _value_and_grad(model, target, feats):
    t = Tensor(mri.to_channels(target).astype(model.dtype), requires_grad=True)
    with frozen(model), Tape() as tape:
        _, logp = model.log_prob(t, feats=feats)
        total = logp.sum()
    (g,) = tape.backward(total, [t])
    return logp.data.astype(np.float64), mri.from_channels(g.astype(np.float64))


def map_objective(model, k_tilde, y_n, mask, feats, nullspace_learning=True):
    """``log p(W k~ (+ y) | y)`` per condition and its gradient w.r.t. ``k~``.

    The gradient is returned as a complex array ``dRe + i dIm`` so that a
    real step ``k~ + lr * grad`` ascends. With ``W = ifft2 . scatter`` unitary
    on its range, the adjoint is ``gather . fft2``.
    """
    t = scatter_unmeasured(k_tilde, mask, y_n.shape[-1])
    if not nullspace_learning:
        t = t + y_n
    val, g_img = _value_and_grad(model, t, feats)
    return val, fft2(g_img)[..., unmeasured_columns(mask)]


def map_estimate(model, y, mask, init=None, iters=500, lr=1e-4, scale=None, normalize=True,
                 nullspace_learning=True, n_init=8, seed=0):
    """Gradient ascent on ``log p(W k~ | y)`` over the unmeasured k-space ``k~``.

    ``y`` is one (C, H, W) stack or a batch (N, C, H, W); conditions are
    optimised together but independently. ``init`` is ``None`` (best of
    ``n_init`` posterior samples by density), ``"zeros"``, or reconstructions
    whose unmeasured k-space is used as the starting point. The returned
    trace keeps the best value seen so far, so it never decreases, and
    ``x`` is the corresponding best iterate.
    """
    y = np.asarray(y)
    single = y.ndim == 3
    ys = y[None] if single else y
    _check_shapes(model, ys[0], mask)
    n = ys.shape[0]
    if scale is None:
        scales = np.array([_normalise(yi, None, normalize)[1] for yi in ys])
    else:
        scales = np.broadcast_to(np.asarray(scale, np.float64), (n,)).copy()
    y_n = (ys / scales[:, None, None, None]).astype(np.complex64)

    label = "sample"
    if init is None:
        starts = []
        for i in range(n):
            b = sample_posterior(model, ys[i], mask, n_init, seed=seed + i, scale=scales[i],
                                 nullspace_learning=nullspace_learning)
            starts.append(b.samples[int(np.argmax(b.log_density))] / scales[i])
        k_t = gather_unmeasured(np.stack(starts), mask)
    elif isinstance(init, str) and init == "zeros":
        label = "zeros"
        k_t = np.zeros((*ys.shape[:-1], int(unmeasured_columns(mask).sum())), np.complex128)
    else:
        label = "given"
        init = np.asarray(init)
        init = init[None] if init.ndim == 3 else init
        k_t = gather_unmeasured(init / scales[:, None, None, None], mask)
    k_t = np.asarray(k_t, np.complex128)

    yc = mri.to_channels(y_n).astype(model.dtype)
    feats = model.features(yc)
    width = ys.shape[-1]

    theta = np.stack([k_t.real, k_t.imag])
    state = AdamState(lr=lr)
    best = np.full(n, -np.inf)
    best_k = k_t.copy()
    trace = np.empty((iters + 1, n))
    aborted = False
    for it in range(iters + 1):
        k_cur = theta[0] + 1j * theta[1]
        val, g_k = map_objective(model, k_cur, y_n, mask, feats, nullspace_learning)
        if not np.all(np.isfinite(val)) or not np.all(np.isfinite(g_k)):
            log.warning("MAP objective became non-finite at iteration %d; keeping last good iterate", it)
            trace[it:] = best
            aborted = True
            break
        better = val > best
        best = np.where(better, val, best)
        best_k[better] = k_cur[better]
        trace[it] = best
        if it == iters:
            break
        adam_step(state, [theta], [-np.stack([g_k.real, g_k.imag])])

    x_n = scatter_unmeasured(best_k, mask, width) + y_n
    x = (x_n * scales[:, None, None, None]).astype(np.complex64)
    res = MAPResult(x=x, k_tilde=best_k, trace=trace, log_density=best, scales=scales,
                    aborted=aborted, init=label)
    if single:
        res.x, res.k_tilde, res.trace, res.log_density = res.x[0], res.k_tilde[0], res.trace[:, 0], res.log_density[0]
    return res
