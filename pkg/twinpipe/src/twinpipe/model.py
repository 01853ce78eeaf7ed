"""Non-local CNN-GCN pipe.

Each patch goes through two conv blocks, a non-local attention block (kept
shape-preserving), and global pooling; the resulting node+neighbor feature
vectors run through two graph-convolution layers over the star graph of the
node and its padded neighbors, and the center readout feeds a softmax head.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block; output shape equals input shape."""

    def __init__(self, channels: int):
        super().__init__()
        inter = max(channels // 2, 1)
        self.theta = nn.Conv2d(channels, inter, 1)
        self.phi = nn.Conv2d(channels, inter, 1)
        self.g = nn.Conv2d(channels, inter, 1)
        self.out = nn.Conv2d(inter, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        th = self.theta(x).reshape(b, -1, h * w)
        ph = self.phi(x).reshape(b, -1, h * w)
        gv = self.g(x).reshape(b, -1, h * w)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", th, ph), dim=-1)
        y = torch.einsum("bij,bcj->bci", attn, gv).reshape(b, -1, h, w)
        return x + self.out(y)


class PatchEncoder(nn.Module):
    """Two conv blocks (conv-BN-relu-pool) + non-local + global average pool."""

    def __init__(self, in_channels: int, feat_dim: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(16)
        self.conv2 = nn.Conv2d(16, feat_dim, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(feat_dim)
        self.nonlocal_block = NonLocalBlock(feat_dim)
        self.feat_dim = feat_dim

    def forward(self, x):
        # x: (B, 32, 32, C) with the patch depth as channels
        x = x.permute(0, 3, 1, 2)
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        x = self.nonlocal_block(x)
        return x.mean(dim=(2, 3))


class GraphConv(nn.Module):
    """H' = relu(A_hat H W) with the normalized star adjacency."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim)

    def forward(self, h, a_hat):
        return F.relu(torch.einsum("ij,bjd->bid", a_hat, self.lin(h)))


def star_adjacency(n_neighbors: int) -> torch.Tensor:
    """Symmetric-normalized adjacency (with self loops) of the star graph:
    slot 0 is the center node, slots 1..n its neighbors."""
    n = n_neighbors + 1
    a = torch.eye(n)
    a[0, 1:] = 1.0
    a[1:, 0] = 1.0
    d = a.sum(dim=1)
    dn = torch.diag(d.pow(-0.5))
    return dn @ a @ dn


class PipeNet(nn.Module):
    """One pipe of the twin classifier."""

    def __init__(self, in_channels: int, n_neighbors: int = 2, feat_dim: int = 32):
        super().__init__()
        self.encoder = PatchEncoder(in_channels, feat_dim)
        self.gc1 = GraphConv(feat_dim, feat_dim)
        self.gc2 = GraphConv(feat_dim, feat_dim)
        self.head = nn.Linear(feat_dim, 2)
        self.n_neighbors = n_neighbors
        self.register_buffer("a_hat", star_adjacency(n_neighbors))
        # input standardization, set from the training data and saved with
        # the model so inference normalizes identically
        self.register_buffer("input_mean", torch.zeros(1))
        self.register_buffer("input_std", torch.ones(1))

    def set_input_stats(self, mean: float, std: float) -> None:
        self.input_mean.fill_(float(mean))
        self.input_std.fill_(max(float(std), 1e-6))

    def forward(self, patches):
        # patches: (b, n+1, 32, 32, C); slot 0 is the node itself
        b, n1, h, w, c = patches.shape
        assert n1 == self.n_neighbors + 1, (
            f"expected {self.n_neighbors + 1} patch slots, got {n1}")
        patches = (patches - self.input_mean) / self.input_std
        feats = self.encoder(patches.reshape(b * n1, h, w, c)).reshape(b, n1, -1)
        feats = self.gc1(feats, self.a_hat)
        feats = self.gc2(feats, self.a_hat)
        return self.head(feats[:, 0])

    def probabilities(self, patches):
        """P(artery) per node."""
        return torch.softmax(self.forward(patches), dim=1)[:, 0]


ARCHITECTURE = ("2 conv blocks -> non-local block (after the second conv, "
                "before pooling) -> global average pool -> 2 graph-conv "
                "layers over the node+neighbor star -> softmax head")
