"""In-memory datasets of (x, y, u, maps) and their on-disk directory format.

Layout::

    <dir>/manifest.json
    <dir>/sample_00000/{truth,y,u,maps}.fnt, mask.json
    ...

Arrays are stored un-normalised; the per-sample scale is recomputed on load
from ``y`` so the files stay a plain record of the simulation.
"""

import json
from pathlib import Path

import numpy as np

from flownull import mri
from flownull.core import io as fnt

FORMAT = "flownull-dataset-1"


class DatasetError(ValueError):
    pass


class Dataset:
    """Complex coil stacks ``x`` (truth), ``y`` (zero-filled), ``u`` (nullspace) for N samples.

    ``scales`` holds the per-sample normalisation constants; ``channels(role)``
    returns the normalised 2C-channel real view used by the networks.
    """

    def __init__(self, x, y, maps, mask, u=None, scales=None, normalize=True, meta=None):
        self.x = np.asarray(x, np.complex64)
        self.y = np.asarray(y, np.complex64)
        self.maps = np.asarray(maps, np.complex64)
        self.mask = mask
        self.u = mri.nullspace_project(self.x, mask) if u is None else np.asarray(u, np.complex64)
        if not (self.x.shape == self.y.shape == self.u.shape):
            raise DatasetError("x, y and u must share a shape")
        if self.x.ndim != 4:
            raise DatasetError("expected arrays of shape (N, C, H, W)")
        self.normalize = bool(normalize)
        if scales is None:
            scales = [mri.normalize_stack(yi)[1] if normalize else 1.0 for yi in self.y]
        self.scales = np.asarray(scales, np.float64)
        self.meta = dict(meta or {})

    def __len__(self):
        return self.x.shape[0]

    @property
    def shape(self):
        return self.x.shape[1:]

    @property
    def i_true(self):
        return mri.coil_combine_sense(self.x, self.maps)

    @classmethod
    def simulate(cls, n, H, W, C, mask, noise_sd=0.0, seed=0, normalize=True):
        xs, ys, maps = [], [], []
        for i in range(n):
            s = simulate_seed(seed, i)
            rec = mri.simulate_sample(s, H, W, C, mask, noise_sd)
            xs.append(rec["x"])
            ys.append(rec["y"])
            maps.append(rec["maps"])
        meta = {"seed": seed, "noise_sd": noise_sd, "kind": "phantom"}
        return cls(np.stack(xs), np.stack(ys), np.stack(maps), mask, normalize=normalize, meta=meta)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.x[idx], self.y[idx], self.maps[idx], self.mask, u=self.u[idx],
                       scales=self.scales[idx], normalize=self.normalize, meta=self.meta)

    def split(self, val_fraction=0.1, seed=0):
        """Seeded ``(train, val)`` split; at least one validation sample when the fraction is positive."""
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        n_val = int(round(val_fraction * n))
        if val_fraction > 0:
            n_val = min(max(n_val, 1), n - 1)
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def _scaled(self, arr):
        return arr / self.scales[:, None, None, None].astype(np.float32)

    def channels(self, role):
        """Normalised real view of ``x``, ``y`` or ``u`` with 2C channels."""
        arr = {"x": self.x, "y": self.y, "u": self.u}[role]
        return mri.to_channels(self._scaled(arr)).astype(np.float32)

    def targets(self, nullspace_learning=True):
        return self.channels("u" if nullspace_learning else "x")

    def check_nullspace(self, tol=1e-4):
        """Targets must be invisible to the measurement: ``A u = 0``."""
        au = mri.apply_A(self.u, self.mask)
        ref = max(float(np.max(np.abs(self.x))), 1e-12)
        err = float(np.max(np.abs(au))) / ref if au.size else 0.0
        if err > tol:
            raise DatasetError(f"nullspace targets leak into the measured space (rel {err:.2e})")
        return err

    # -- files -----------------------------------------------------------------

    def save(self, directory, config_hash=None, force=False):
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()) and not force:
            raise FileExistsError(f"{directory} is not empty; pass --force to overwrite")
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(len(self)):
            name = f"sample_{i:05d}"
            d = directory / name
            d.mkdir(exist_ok=True)
            mri.CoilStack(self.x[i], "truth").save(d)
            mri.CoilStack(self.y[i], "y").save(d)
            mri.CoilStack(self.u[i], "u").save(d)
            fnt.save(d / "maps.fnt", self.maps[i])
            self.mask.save(d / "mask.json")
            names.append(name)
        manifest = {
            "format": FORMAT,
            "n_samples": len(self),
            "shape": list(self.shape),
            "normalize": self.normalize,
            "config_hash": config_hash,
            "meta": self.meta,
            "samples": names,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory, check=True):
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("format") != FORMAT:
            raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")
        xs, ys, us, maps = [], [], [], []
        mask = None
        for name in manifest["samples"]:
            d = directory / name
            xs.append(mri.CoilStack.load(d / "truth.fnt").data)
            ys.append(mri.CoilStack.load(d / "y.fnt").data)
            us.append(mri.CoilStack.load(d / "u.fnt").data)
            maps.append(fnt.load(d / "maps.fnt"))
            m = mri.SamplingMask.load(d / "mask.json")
            if mask is None:
                mask = m
            elif m != mask:
                raise DatasetError(f"{name} uses a different sampling mask")
        if not xs:
            raise DatasetError("dataset has no samples")
        meta = dict(manifest.get("meta", {}), config_hash=manifest.get("config_hash"))
        ds = cls(np.stack(xs), np.stack(ys), np.stack(maps), mask, u=np.stack(us),
                 normalize=manifest.get("normalize", True), meta=meta)
        if check:
            ds.check_nullspace()
        return ds


def simulate_seed(seed, index):
    return int(seed) * 1_000_000 + int(index)
