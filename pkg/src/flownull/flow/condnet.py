"""Conditioning network: a small UNet trunk plus one feature tap per flow level."""

from flownull.core import tensor as T
from flownull.flow.layers import Conv, Module


class UNet(Module):
    def __init__(self, cin, base, depth, rng):
        self.depth = depth
        chans = [base * 2**d for d in range(depth + 1)]
        self.enc = []
        prev = cin
        for c in chans:
            self.enc.append(Conv(prev, c, 3, rng))
            self.enc.append(Conv(c, c, 3, rng))
            prev = c
        self.dec = []
        for d in range(depth, 0, -1):
            self.dec.append(Conv(chans[d] + chans[d - 1], chans[d - 1], 3, rng))
            self.dec.append(Conv(chans[d - 1], chans[d - 1], 3, rng))
        self.out_channels = base

    def __call__(self, x):
        skips = []
        h = x
        for d in range(self.depth + 1):
            if d:
                h = T.avg_pool2(h)
            h = T.leaky_relu(self.enc[2 * d](h))
            h = T.leaky_relu(self.enc[2 * d + 1](h))
            skips.append(h)
        for i, d in enumerate(range(self.depth, 0, -1)):
            h = T.upsample2(h)
            h = T.concat([h, skips[d - 1]], axis=1)
            h = T.leaky_relu(self.dec[2 * i](h))
            h = T.leaky_relu(self.dec[2 * i + 1](h))
        return h


class CondNet(Module):
    """Maps zero-filled coil images (2C real channels) to per-level features.

    Tap ``l`` squeezes the previous feature map once and applies a 3x3 conv,
    so its spatial size matches flow level ``l`` exactly. ``head`` is the
    temporary 1x1 output layer used only for MSE pretraining.
    """

    def __init__(self, in_channels, widths, rng, base=32, depth=2):
        self.in_channels = in_channels
        self.widths = list(widths)
        self.trunk = UNet(in_channels, base, depth, rng)
        self.taps = []
        prev = self.trunk.out_channels
        for w in self.widths:
            self.taps.append(Conv(4 * prev, w, 3, rng))
            prev = w
        self.head = Conv(self.trunk.out_channels, in_channels, 1, rng)

    def named_parameters(self, prefix=""):
        return [(n, p) for n, p in super().named_parameters(prefix) if not n.startswith(prefix + "head.")]

    def head_parameters(self):
        return [] if self.head is None else self.head.named_parameters("head.")

    def attach_head(self, rng):
        self.head = Conv(self.trunk.out_channels, self.in_channels, 1, rng)
        return self.head

    def drop_head(self):
        """Discard the pretraining head; only the trunk and taps remain."""
        self.head = None

    def trunk_features(self, y):
        if y.shape[1] != self.in_channels:
            raise ValueError(f"condnet expects {self.in_channels} channels, got {y.shape[1]}")
        return self.trunk(y)

    def features(self, y, expected_shapes=None):
        h = self.trunk_features(y)
        feats = []
        for tap in self.taps:
            h = T.leaky_relu(tap(T.space_to_depth(h)))
            feats.append(h)
        if expected_shapes is not None:
            for f, shp in zip(feats, expected_shapes):
                if f.shape[2:] != tuple(shp):
                    raise ValueError(f"feature map {f.shape[2:]} does not match flow level {tuple(shp)}")
        return feats

    def pretrain_output(self, y):
        if self.head is None:
            raise RuntimeError("pretraining head has been removed")
        return self.head(self.trunk_features(y))
