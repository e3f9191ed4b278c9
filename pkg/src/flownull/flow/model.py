"""Multi-scale conditional flow and its conditioning network, plus checkpoints.

Direction convention: ``encode`` is the normalizing map u -> z (used for
densities and training), ``decode`` is the generative map z -> u.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flownull.core import io as fnt
from flownull.core import tensor as T
from flownull.core.tensor import PoisonedGradientError, Tensor
from flownull.flow.condnet import CondNet
from flownull.flow.layers import ActNorm, AffineCoupling, Module, Orth1x1, merge, split, squeeze, unsqueeze

LOG2PI = float(np.log(2 * np.pi))


@dataclass
class ModelConfig:
    channels: int = 4  # 2C
    height: int = 32
    width: int = 32
    levels: int = 3
    steps: int = 4
    hidden: int = 64
    s_max: float = 2.0
    cond_widths: list = field(default_factory=lambda: [32, 32, 32])
    unet_base: int = 32
    unet_depth: int = 2
    seed: int = 0

    @property
    def latent_dim(self):
        return self.channels * self.height * self.width

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class Level(Module):
    def __init__(self, index, channels, cond_channels, steps, hidden, s_max, rng, split_out):
        self.index = index
        self.channels = channels
        self.split_out = split_out
        seeds = rng.integers(0, 2**31 - 1, size=steps + 1)
        self.layers = [ActNorm(channels), Orth1x1(channels, seeds[0])]  # transition step
        for b in range(steps):
            self.layers.append(ActNorm(channels))
            self.layers.append(Orth1x1(channels, seeds[b + 1]))
            self.layers.append(AffineCoupling(channels, cond_channels, rng, hidden, s_max))


class FlowModel(Module):
    """L levels of squeeze, transition, B flow steps, then split."""

    def __init__(self, cfg, rng):
        self.levels = []
        self.latent_shapes = []
        self.level_shapes = []
        c, h, w = cfg.channels, cfg.height, cfg.width
        if len(cfg.cond_widths) != cfg.levels:
            raise ValueError("need one conditioning width per flow level")
        for lvl in range(cfg.levels):
            if h % 2 or w % 2:
                raise ValueError(f"level {lvl}: spatial size {h}x{w} cannot be squeezed")
            c, h, w = 4 * c, h // 2, w // 2
            last = lvl == cfg.levels - 1
            self.levels.append(Level(lvl, c, cfg.cond_widths[lvl], cfg.steps, cfg.hidden,
                                     cfg.s_max, rng, split_out=not last))
            self.level_shapes.append((h, w))
            if last:
                self.latent_shapes.append((c, h, w))
            else:
                self.latent_shapes.append((c // 2, h, w))
                c //= 2
        self.latent_dim = sum(int(np.prod(s)) for s in self.latent_shapes)

    def encode(self, u, feats):
        x = u
        n = u.shape[0]
        logdet = None
        zs = []
        for level, f in zip(self.levels, feats):
            x = squeeze(x)
            for layer in level.layers:
                x, d = layer.forward(x, f)
                if isinstance(d, Tensor):
                    logdet = d if logdet is None else logdet + d
            if level.split_out:
                x, out = split(x)
                zs.append(out.reshape(n, -1))
        zs.append(x.reshape(n, -1))
        z = T.concat(zs, axis=1)
        return z, logdet * Tensor(np.ones(n, dtype=u.dtype))

    def decode(self, z, feats):
        n = z.shape[0]
        sizes = [int(np.prod(s)) for s in self.latent_shapes]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        pieces = [T.narrow(z, 1, int(offs[i]), sizes[i]).reshape(n, *self.latent_shapes[i])
                  for i in range(len(sizes))]
        x = pieces[-1]
        for i in range(len(self.levels) - 1, -1, -1):
            level = self.levels[i]
            if level.split_out:
                x = merge(x, pieces[i])
            for layer in reversed(level.layers):
                x = layer.inverse(x, feats[i])
            x = unsqueeze(x)
        return x

    def layer_records(self):
        out = []
        for level in self.levels:
            out.append({"kind": "squeeze", "level": level.index})
            for j, layer in enumerate(level.layers):
                rec = {"kind": layer.kind, "level": level.index, "index": j, "channels": level.channels}
                if isinstance(layer, Orth1x1):
                    rec["seed"] = layer.seed
                if isinstance(layer, ActNorm):
                    rec["initialized"] = layer.initialized
                out.append(rec)
            if level.split_out:
                out.append({"kind": "split", "level": level.index})
        return out


class ConditionalFlow(Module):
    """Conditioning network g plus conditional flow h over (2C, H, W) real images."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.flow = FlowModel(cfg, rng)
        self.condnet = CondNet(cfg.channels, cfg.cond_widths, rng, base=cfg.unet_base,
                               depth=cfg.unet_depth)
        if self.flow.latent_dim != cfg.latent_dim:
            raise AssertionError("latent size does not match 2*C*H*W")

    @property
    def latent_dim(self):
        return self.flow.latent_dim

    @property
    def dtype(self):
        return self.flow.levels[0].layers[0].scale.dtype

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, p in self.condnet.head_parameters():
            p.data = p.data.astype(dtype)
        return self

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def features(self, y):
        y = _as_tensor(y, self.dtype)
        return self.condnet.features(y, expected_shapes=self.flow.level_shapes)

    def initialize(self, u, y):
        """Data-dependent actnorm initialisation from a batch of (u, y)."""
        self.flow.encode(_as_tensor(u, self.dtype), self.features(y))

    @property
    def initialized(self):
        return all(layer.initialized for level in self.flow.levels for layer in level.layers
                   if isinstance(layer, ActNorm))

    def log_prob(self, u, y=None, feats=None):
        """Return ``(z, log p(u | y))`` in nats, per sample."""
        u = _as_tensor(u, self.dtype)
        if feats is None:
            feats = self.features(y)
        z, logdet = self.flow.encode(u, feats)
        logpz = T.tsum(T.square(z), axis=1) * -0.5 - 0.5 * self.latent_dim * LOG2PI
        return z, logpz + logdet

    def sample(self, z, y=None, feats=None):
        if feats is None:
            feats = self.features(y)
        if z.shape[0] != feats[0].shape[0]:
            feats = [_repeat_batch(f, z.shape[0]) for f in feats]
        return self.flow.decode(_as_tensor(z, self.dtype), feats)

    # -- checkpoints ----------------------------------------------------------

    def state_dict(self, include_head=False):
        items = self.named_parameters()
        if include_head:
            items = items + [("condnet." + n, p) for n, p in self.condnet.head_parameters()]
        return {n: p.data for n, p in items}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        params.update({"condnet." + n: p for n, p in self.condnet.head_parameters()})
        for name, arr in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            if params[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].data = np.array(arr, dtype=params[name].dtype)
        if strict:
            missing = set(dict(self.named_parameters())) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")

    def save(self, directory, extra=None):
        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        state = self.state_dict()
        for name, arr in state.items():
            fnt.save(directory / "params" / f"{name}.fnt", arr)
        manifest = {
            "format": "flownull-checkpoint-1",
            "config": asdict(self.cfg),
            "latent_dim": self.latent_dim,
            "n_parameters": self.n_parameters(),
            "layers": self.flow.layer_records(),
            "actnorm_initialized": self.initialized,
            "params": sorted(state),
        }
        if extra:
            manifest.update(extra)
        with open(directory / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
        with open(manifest_path) as f:
            manifest = json.load(f)
        model = cls(ModelConfig.from_dict(manifest["config"]))
        state = {n: fnt.load(directory / "params" / f"{n}.fnt") for n in manifest["params"]}
        model.load_state_dict(state)
        recs = [r for r in manifest["layers"] if r["kind"] in ("actnorm", "orth1x1", "coupling")]
        layers = [layer for level in model.flow.levels for layer in level.layers]
        for rec, layer in zip(recs, layers):
            if rec["kind"] != layer.kind:
                raise ValueError(f"checkpoint layer {rec} does not match model layer {layer.kind}")
            if rec["kind"] == "orth1x1" and rec["seed"] != layer.seed:
                raise ValueError("orthogonal-mixing seed mismatch")
            if rec["kind"] == "actnorm":
                layer.initialized = rec["initialized"]
        return model, manifest


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _repeat_batch(f, n):
    if f.shape[0] == 1:
        return Tensor(np.repeat(f.data, n, axis=0))
    raise ValueError(f"cannot broadcast features of batch {f.shape[0]} to {n}")


# -- functional surface -------------------------------------------------------

def condnet_features(model, y):
    """Per-level conditioning maps for normalized zero-filled channels ``y``."""
    return [f.data for f in model.features(y)]


def flow_inverse_density(model, u, y):
    """``z = h^-1(u, g(y))`` and ``log p(u | y)``; also bits per dimension.

    Returns ``(z, logp, bpd)`` as numpy arrays with per-sample ``logp``.
    """
    z, logp = model.log_prob(u, y)
    if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(logp.data))):
        raise PoisonedGradientError("flow_inverse_density", "non-finite value in flow density")
    bpd = -logp.data / (model.latent_dim * np.log(2.0))
    return z.data, logp.data, bpd


def flow_forward_sample(model, z, y):
    """Generated nullspace candidate ``h(z, g(y))`` as a numpy array."""
    return model.sample(z, y).data
