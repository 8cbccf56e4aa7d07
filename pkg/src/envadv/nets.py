"""Trunks, temporal pooling and the speaker / environment / verification heads.

Trunk inputs are ``[B, 1, F, T]`` feature maps. Each trunk ends in a
"fully connected along frequency" layer: a convolution whose kernel covers
the whole remaining frequency extent, which leaves a ``[B, 512, T']`` map
for the temporal pooling layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

EMBED_DIM = 512
ARCH_FEATURES = {"vggm40": "fbank40", "thin_resnet34": "spectrogram257"}


@dataclass
class TrunkConfig:
    arch: str = "thin_resnet34"
    pool: str = "sap"
    embed_dim: int = EMBED_DIM
    n_speakers: int = 1211
    width: float = 1.0  # channel multiplier for the conv stack
    env_order: str = "bn_relu"  # order of the pre-activation in front of each env-net FC
    env_normalize: bool = False  # L2-normalise environment embeddings

    def __post_init__(self):
        self.arch = self.arch.replace("-", "_")
        if self.arch not in ARCH_FEATURES:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.pool not in ("tap", "sap"):
            raise ValueError(f"unknown pooling {self.pool!r}")
        if self.env_order not in ("bn_relu", "relu_bn"):
            raise ValueError(f"unknown env_order {self.env_order!r}")

    @property
    def feature_kind(self) -> str:
        return ARCH_FEATURES[self.arch]

    def to_dict(self):
        return asdict(self)


def _ch(n, width):
    return max(1, int(round(n * width)))


class FreqFC(nn.Module):
    """Convolution spanning the full frequency axis: ``[B, C, H, T] -> [B, D, T]``."""

    def __init__(self, in_ch, out_dim, height):
        super().__init__()
        self.height = height
        self.conv = nn.Conv2d(in_ch, out_dim, kernel_size=(height, 1))
        self.bn = nn.BatchNorm2d(out_dim)
        self.freq_extent = None

    def forward(self, x):
        self.freq_extent = x.shape[2]
        if x.shape[2] != self.height:
            raise ValueError(
                f"fc layer expects frequency extent {self.height}, got {x.shape[2]} "
                f"(input shape {tuple(x.shape)})"
            )
        return F.relu(self.bn(self.conv(x))).squeeze(2)


def _conv_bn(cin, cout, kernel, stride, padding):
    return [nn.Conv2d(cin, cout, kernel, stride, padding, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class VGGM40(nn.Module):
    """VGG-M adapted to 40-d filterbanks.

    Kernels are (frequency, time). The first conv strides only along time;
    with that, 40 bins reduce to exactly 4 at the fc layer.
    """

    input_dim = 40
    fc_height = 4

    def __init__(self, embed_dim=EMBED_DIM, width=1.0):
        super().__init__()
        c1, c2, c3 = _ch(96, width), _ch(96, width), _ch(256, width)
        self.features = nn.Sequential(
            *_conv_bn(1, c1, (5, 7), (1, 2), (2, 3)),
            nn.MaxPool2d(3, stride=(1, 2), padding=1),
            *_conv_bn(c1, c2, (5, 5), 2, 2),
            nn.MaxPool2d(3, stride=2, padding=1),
            *_conv_bn(c2, c3, 3, 1, 1),
            *_conv_bn(c3, c3, 3, 1, 1),
            *_conv_bn(c3, c3, 3, 1, 1),
            nn.MaxPool2d(3, stride=2),
        )
        self.fc = FreqFC(c3, embed_dim, self.fc_height)

    def forward(self, x):
        return self.fc(self.features(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ThinResNet34(nn.Module):
    """ResNet-34 with a quarter of the channels, on 257-bin spectrograms."""

    input_dim = 257
    fc_height = 9

    def __init__(self, embed_dim=EMBED_DIM, width=1.0, layers=(3, 4, 6, 3)):
        super().__init__()
        chans = [_ch(c, width) for c in (16, 32, 64, 128)]
        self.stem = nn.Sequential(*_conv_bn(1, chans[0], 7, 2, 3), nn.MaxPool2d(3, stride=2, padding=1))
        blocks, cin = [], chans[0]
        for i, (cout, n) in enumerate(zip(chans, layers)):
            for j in range(n):
                blocks.append(BasicBlock(cin, cout, stride=2 if (i > 0 and j == 0) else 1))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.fc = FreqFC(cin, embed_dim, self.fc_height)

    def forward(self, x):
        return self.fc(self.blocks(self.stem(x)))


class TAP(nn.Module):
    def forward(self, x):  # [B, D, T] -> [B, D]
        if x.shape[-1] < 1:
            raise ValueError("temporal average pooling over an empty time axis")
        return x.mean(dim=-1)


class SAP(nn.Module):
    """Self-attentive pooling: softmax over ``tanh(W x_t + b) . mu``."""

    def __init__(self, dim=EMBED_DIM, hidden=None):
        super().__init__()
        hidden = hidden or dim
        self.W = nn.Linear(dim, hidden)
        self.mu = nn.Parameter(torch.empty(hidden))
        nn.init.normal_(self.mu, std=hidden**-0.5)

    def weights(self, x):
        h = torch.tanh(self.W(x.transpose(1, 2)))  # [B, T, H]
        return torch.softmax(h @ self.mu, dim=1)  # [B, T]

    def forward(self, x):
        if x.shape[-1] < 1:
            raise ValueError("self-attentive pooling over an empty time axis")
        w = self.weights(x)
        return torch.einsum("bdt,bt->bd", x, w)


class EnvNet(nn.Module):
    """Two 512-wide FC layers, each preceded by batch norm and ReLU."""

    def __init__(self, dim=EMBED_DIM, order="bn_relu", normalize=False):
        super().__init__()
        layers = []
        for _ in range(2):
            pre = [nn.BatchNorm1d(dim), nn.ReLU()]
            layers += (pre if order == "bn_relu" else pre[::-1]) + [nn.Linear(dim, dim)]
        self.layers = nn.Sequential(*layers)
        self.normalize = normalize

    def forward(self, s):
        e = self.layers(s)
        return F.normalize(e, dim=-1) if self.normalize else e


def build_trunk(cfg: TrunkConfig) -> nn.Module:
    if cfg.arch == "vggm40":
        return VGGM40(cfg.embed_dim, cfg.width)
    return ThinResNet34(cfg.embed_dim, cfg.width)


def he_init(layer):
    """He-uniform weights, zero bias."""
    nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class SpeakerModel(nn.Module):
    """Trunk + pooling with a speaker classifier, an environment network and an
    optional verification head.

    Parameter groups, as the trainer sees them: ``trunk`` (conv stack,
    fc and pooling), ``speaker_head``, ``env_net`` and ``verif_head``.
    """

    def __init__(self, cfg: TrunkConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = build_trunk(cfg)
        self.pool = TAP() if cfg.pool == "tap" else SAP(cfg.embed_dim)
        self.speaker_head = nn.Linear(cfg.embed_dim, cfg.n_speakers)
        self.env_net = EnvNet(cfg.embed_dim, cfg.env_order, cfg.env_normalize)
        self.verif_head = None
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                he_init(m)

    def frame_features(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.shape[2] != self.trunk.input_dim:
            raise ValueError(
                f"{self.cfg.arch} expects {self.cfg.feature_kind} with {self.trunk.input_dim} bins, got {x.shape[2]}"
            )
        return self.trunk(x)

    def embed(self, x):
        """Pooled speaker embedding ``s`` (input to the speaker head)."""
        return self.pool(self.frame_features(x))

    def forward(self, x):
        s = self.embed(x)
        return self.speaker_head(s), s

    def verification_embedding(self, x):
        s = self.embed(x)
        return self.verif_head(s) if self.verif_head is not None else s

    def add_verif_head(self, identity_init=True):
        head = nn.Linear(self.cfg.embed_dim, self.cfg.embed_dim)
        if identity_init:
            with torch.no_grad():
                head.weight.copy_(torch.eye(self.cfg.embed_dim))
                head.bias.zero_()
        else:
            he_init(head)
        self.verif_head = head
        return head

    def trunk_parameters(self):
        return list(self.trunk.parameters()) + list(self.pool.parameters())

    def trunk_modules(self):
        return [self.trunk, self.pool]

    def freq_extent_before_fc(self):
        return self.trunk.fc.freq_extent


def check_n_speakers(model: SpeakerModel, n_speakers: int) -> None:
    if model.speaker_head.out_features != n_speakers:
        raise ValueError(
            f"speaker head has {model.speaker_head.out_features} outputs but manifest has {n_speakers} speakers"
        )


def parameter_checksum(modules) -> str:
    import hashlib

    h = hashlib.sha256()
    if isinstance(modules, nn.Module):
        modules = [modules]
    for m in modules:
        for name, p in m.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
