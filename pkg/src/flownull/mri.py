"""Synthetic multi-coil acquisition and the linear operators around it.

Coil stacks are complex arrays whose last three axes are ``(C, H, W)``; any
leading axes are treated as a batch. K-space is kept in the unshifted FFT
layout. Masks select phase-encode columns (the last axis) and are stored in
centred coordinates, where column ``W // 2`` is the DC column.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flownull.core.fft import fft2, ifft2

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

# role tag -> file stem used when a stack is written to disk
ROLE_FILES = {"truth": "truth", "y": "y", "u": "u", "kspace": "k"}


class InconsistentMeasurementError(ValueError):
    """Measurements are not in the range of the forward operator."""


@dataclass
class CoilStack:
    """Complex (C, H, W) coil images tagged with what they represent."""

    data: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ROLE_FILES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {sorted(ROLE_FILES)}")

    def save(self, directory):
        """Write ``<stem>.fnt`` into ``directory``; the stem encodes the role."""
        from flownull.core import io as fnt

        path = Path(directory) / f"{ROLE_FILES[self.role]}.fnt"
        fnt.save(path, self.data.astype(np.complex64))
        return path

    @classmethod
    def load(cls, path):
        from flownull.core import io as fnt

        path = Path(path)
        roles = {stem: role for role, stem in ROLE_FILES.items()}
        if path.stem not in roles:
            raise ValueError(f"cannot infer coil-stack role from file name {path.name!r}")
        return cls(fnt.load(path), roles[path.stem])


@dataclass(frozen=True, eq=False)
class SamplingMask:
    width: int
    selected: np.ndarray  # bool per column, centred coordinates
    acs: tuple  # (start, stop) in centred coordinates
    R: float

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (self.width == other.width and tuple(self.acs) == tuple(other.acs)
                and float(self.R) == float(other.R)
                and np.array_equal(self.selected, other.selected))

    def __hash__(self):
        return hash((self.width, tuple(self.columns), tuple(self.acs), float(self.R)))

    @property
    def n_selected(self):
        return int(self.selected.sum())

    @property
    def acceleration(self):
        return self.width / self.n_selected

    @property
    def columns(self):
        return np.flatnonzero(self.selected)

    def kspace_columns(self):
        """Boolean column mask in FFT layout (DC at index 0)."""
        return np.fft.ifftshift(self.selected)

    def to_json(self):
        return {
            "D": self.width,
            "R": self.R,
            "acs": [int(self.acs[0]), int(self.acs[1])],
            "selected": [int(c) for c in self.columns],
        }

    @classmethod
    def from_json(cls, doc):
        sel = np.zeros(doc["D"], dtype=bool)
        sel[doc["selected"]] = True
        return cls(width=doc["D"], selected=sel, acs=tuple(doc["acs"]), R=doc["R"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _mask_counts(D, R, acs_width):
    if R < 1:
        raise ValueError(f"acceleration R must be >= 1, got {R}")
    n = int(round(D / R))
    if not (0 <= acs_width <= n <= D) or n < 1:
        raise ValueError(f"infeasible mask: D={D}, R={R}, acs={acs_width} (needs acs <= round(D/R) <= D)")
    start = D // 2 - acs_width // 2
    return n, start, start + acs_width


def make_gro_mask(D, R, acs_width, seed_offset=0.0):
    """Golden-ratio-offset Cartesian column mask with a centred ACS block.

    Non-ACS columns follow ``floor(frac(j * g + seed_offset) * D)`` for
    j = 1, 2, ..., skipping columns already taken.
    """
    n, a0, a1 = _mask_counts(D, R, acs_width)
    sel = np.zeros(D, dtype=bool)
    sel[a0:a1] = True
    j = 0
    while sel.sum() < n:
        j += 1
        if j > 100 * D:  # sequence is equidistributed, so this is unreachable in practice
            free = np.flatnonzero(~sel)
            order = np.argsort(np.abs(free - D // 2), kind="stable")
            sel[free[order[: n - sel.sum()]]] = True
            break
        c = int(np.floor(((j * GOLDEN + seed_offset) % 1.0) * D))
        sel[c] = True
    return SamplingMask(width=D, selected=sel, acs=(a0, a1), R=float(R))


def make_equispaced_mask(D, R, acs_width, offset=0):
    n, a0, a1 = _mask_counts(D, R, acs_width)
    sel = np.zeros(D, dtype=bool)
    sel[a0:a1] = True
    step = max(int(round(R)), 1)
    for c in list(range(offset % step, D, step)) + list(range(D)):
        if sel.sum() >= n:
            break
        sel[c] = True
    return SamplingMask(width=D, selected=sel, acs=(a0, a1), R=float(R))


def make_random_mask(D, R, acs_width, seed=0):
    n, a0, a1 = _mask_counts(D, R, acs_width)
    sel = np.zeros(D, dtype=bool)
    sel[a0:a1] = True
    free = np.flatnonzero(~sel)
    pick = np.random.default_rng(seed).choice(free, size=n - sel.sum(), replace=False)
    sel[pick] = True
    return SamplingMask(width=D, selected=sel, acs=(a0, a1), R=float(R))


def make_mask(kind, D, R, acs_width, seed=0):
    if kind == "gro":
        return make_gro_mask(D, R, acs_width, seed_offset=(seed * GOLDEN) % 1.0 if seed else 0.0)
    if kind == "equispaced":
        return make_equispaced_mask(D, R, acs_width, offset=seed)
    if kind == "random":
        return make_random_mask(D, R, acs_width, seed=seed)
    raise ValueError(f"unknown mask kind {kind!r}")


# -- synthetic objects ------------------------------------------------------

def _grid(H, W):
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    return yy, xx


def make_phantom(seed, H, W):
    """Random ellipse phantom with smooth phase; magnitude in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(H, W)
    mag = np.zeros((H, W))
    n = int(rng.integers(3, 9))
    for k in range(n):
        if k == 0:  # body outline
            cy, cx = rng.uniform(-0.1, 0.1, 2)
            ay, ax = rng.uniform(0.6, 0.85, 2)
            level = rng.uniform(0.3, 0.6)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, 2)
            ay, ax = rng.uniform(0.08, 0.35, 2)
            level = rng.uniform(0.2, 0.7) * rng.choice([-1.0, 1.0], p=[0.25, 0.75])
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / ax
        v = (-dx * np.sin(th) + dy * np.cos(th)) / ay
        mag += level * (u * u + v * v <= 1.0)
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    c = rng.normal(0, 0.6, 4)
    phase = c[0] + c[1] * xx + c[2] * yy + 0.5 * c[3] * xx * yy
    return (mag * np.exp(1j * phase)).astype(np.complex64)


def make_coil_maps(C, H, W, seed):
    """Smooth complex coil sensitivities normalised so sum_c |S_c|^2 = 1."""
    if C < 1:
        raise ValueError(f"need at least one coil, got {C}")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(H, W)
    maps = np.empty((C, H, W), dtype=np.complex128)
    base = rng.uniform(0, 2 * np.pi)
    for c in range(C):
        ang = base + 2 * np.pi * c / C
        r = rng.uniform(0.6, 1.2)
        cy, cx = r * np.sin(ang), r * np.cos(ang)
        width = rng.uniform(0.6, 1.2)
        prof = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        g = rng.normal(0, 0.8, 3)
        maps[c] = prof * np.exp(1j * (g[0] + g[1] * xx + g[2] * yy))
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps.astype(np.complex64)


# -- operators --------------------------------------------------------------

def _kmask(mask, dtype=bool):
    return mask.kspace_columns().astype(dtype)


def acquire(i_true, maps, mask, noise_sd=0.0, seed=0):
    """Masked multi-coil k-space ``P F S_c i + eps`` (zeros off the mask).

    Noise is circular complex Gaussian with ``E|eps|^2 = noise_sd**2``.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    k = fft2(maps * i_true)
    sel = _kmask(mask)
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape)
        k = k + (noise_sd / np.sqrt(2.0) * eps).astype(k.dtype)
    return np.where(sel, k, 0).astype(k.dtype)


def zero_filled(k, mask):
    """``F^H P^T P k`` per coil."""
    return ifft2(np.where(_kmask(mask), k, 0))


def apply_A(x, mask):
    """Orthogonal projection onto the measured space, ``F^H P^T P F`` per coil."""
    return ifft2(fft2(x) * _kmask(mask, np.float32))


def nullspace_project(x, mask):
    """Projection onto the complement of the measured space, ``F^H P~^T P~ F``."""
    return ifft2(fft2(x) * (~_kmask(mask)).astype(np.float32))


def check_consistent(y, mask, tol=1e-4):
    resid = np.max(np.abs(apply_A(y, mask) - y)) if np.size(y) else 0.0
    if resid > tol:
        raise InconsistentMeasurementError(
            f"measurements leave the range of A: max |A y - y| = {resid:.3g} > {tol}")
    return resid


def data_consistency(gen, y, mask, check=True):
    """Replace the measured-space part of ``gen`` with ``y``.

    Returns ``(I - A) gen + y``; for MRI ``A^+ y = y`` because ``y`` lies in
    the range of the projector ``A``.
    """
    if check:
        check_consistent(y, mask)
    sel = _kmask(mask)
    kg = fft2(gen)
    ky = fft2(y)
    return ifft2(np.where(sel, ky, kg))


def coil_combine_sense(x, maps):
    """``sum_c conj(S_c) x_c`` over the coil axis (third from last)."""
    return np.sum(np.conj(maps) * x, axis=-3)


def coil_combine_rss(x):
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=-3))


def normalize_stack(y, percentile=95.0):
    """Scale ``y`` by the given percentile of its RSS magnitude image.

    Returns ``(y / scale, scale)``. Falls back to the RSS maximum when the
    percentile is zero but the input is not.
    """
    mag = coil_combine_rss(y)
    peak = float(np.max(mag)) if mag.size else 0.0
    if not peak > 0:
        raise ValueError("cannot normalize an all-zero stack")
    scale = float(np.percentile(mag, percentile))
    if not scale > 0:
        scale = peak
    return (y / scale).astype(y.dtype), scale


def denormalize_stack(y, scale):
    return (y * scale).astype(y.dtype)


# -- real <-> complex channel packing ---------------------------------------

def to_channels(x):
    """Complex (..., C, H, W) -> real (..., 2C, H, W) with channels (Re x_c, Im x_c)."""
    x = np.asarray(x)
    re = x.real.astype(np.float32 if x.dtype == np.complex64 else np.float64)
    im = x.imag.astype(re.dtype)
    out = np.stack([re, im], axis=-3)  # (..., C, 2, H, W)
    return out.reshape(*x.shape[:-3], 2 * x.shape[-3], *x.shape[-2:])


def from_channels(r):
    r = np.asarray(r)
    C = r.shape[-3] // 2
    pairs = r.reshape(*r.shape[:-3], C, 2, *r.shape[-2:])
    dtype = np.complex64 if r.dtype == np.float32 else np.complex128
    return (pairs[..., 0, :, :] + 1j * pairs[..., 1, :, :]).astype(dtype)


# -- sample simulation ------------------------------------------------------

def simulate_sample(seed, H, W, C, mask, noise_sd=0.0):
    """One synthetic example: truth image, maps, coil images, k-space, y, u."""
    i_true = make_phantom(seed, H, W)
    maps = make_coil_maps(C, H, W, seed + 1_000_003)
    x = (maps * i_true).astype(np.complex64)
    k = acquire(i_true, maps, mask, noise_sd, seed=seed + 2_000_003)
    y = zero_filled(k, mask)
    u = nullspace_project(x, mask)
    return {"i_true": i_true, "maps": maps, "x": x, "k": k, "y": y, "u": u}


def write_pgm(path, image):
    """8-bit binary PGM of ``|image|`` scaled so its maximum maps to 255."""
    mag = np.abs(np.asarray(image))
    peak = mag.max()
    data = np.zeros(mag.shape, np.uint8) if peak == 0 else np.round(mag / peak * 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        buf = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = int(tokens[1]), int(tokens[2])
    return np.frombuffer(buf, dtype=np.uint8, count=W * H, offset=pos + 1).reshape(H, W)
