import numpy as np
import pytest
import torch

from envadv.nets import (
    SAP,
    TAP,
    EnvNet,
    SpeakerModel,
    TrunkConfig,
    check_n_speakers,
    parameter_checksum,
)


@pytest.fixture(scope="module")
def resnet():
    torch.manual_seed(0)
    return SpeakerModel(TrunkConfig(arch="thin_resnet34", pool="sap", n_speakers=10)).eval()


@pytest.fixture(scope="module")
def vgg():
    torch.manual_seed(0)
    return SpeakerModel(TrunkConfig(arch="vggm40", pool="tap", n_speakers=10)).eval()


def test_resnet_freq_extent(resnet):
    with torch.no_grad():
        frames = resnet.frame_features(torch.randn(2, 1, 257, 198))
    assert resnet.freq_extent_before_fc() == 9
    assert frames.shape[:2] == (2, 512)


def test_vgg_freq_extent(vgg):
    with torch.no_grad():
        frames = vgg.frame_features(torch.randn(2, 1, 40, 198))
    assert vgg.freq_extent_before_fc() == 4
    assert frames.shape[:2] == (2, 512)


def test_half_width_vgg_contract():
    m = SpeakerModel(TrunkConfig(arch="vggm40", pool="sap", n_speakers=5, width=0.5)).eval()
    with torch.no_grad():
        logits, s = m(torch.randn(3, 1, 40, 198))
    assert m.freq_extent_before_fc() == 4
    assert s.shape == (3, 512) and logits.shape == (3, 5)


def test_wrong_feature_dim(vgg, resnet):
    with pytest.raises(ValueError, match="fbank40"):
        vgg.embed(torch.randn(1, 1, 257, 198))
    with pytest.raises(ValueError, match="spectrogram257"):
        resnet.embed(torch.randn(1, 1, 40, 198))


def test_fc_guard_reports_extent(vgg):
    with pytest.raises(ValueError, match="got 5"):
        vgg.trunk(torch.randn(1, 1, 48, 198))


def test_forward_non_degenerate(resnet):
    with torch.no_grad():
        a = resnet.embed(torch.randn(1, 1, 257, 198))
        b = resnet.embed(torch.randn(1, 1, 257, 198))
    assert torch.isfinite(a).all()
    assert not torch.allclose(a, b)


def test_arch_feature_pairing():
    assert TrunkConfig(arch="vggm40").feature_kind == "fbank40"
    assert TrunkConfig(arch="thin-resnet34").feature_kind == "spectrogram257"
    with pytest.raises(ValueError):
        TrunkConfig(arch="resnet50")
    with pytest.raises(ValueError):
        TrunkConfig(pool="netvlad")


def test_tap():
    c = torch.randn(2, 512, 1)
    x = c.expand(2, 512, 7)
    torch.testing.assert_close(TAP()(x), c[..., 0])
    torch.testing.assert_close(TAP()(c), c[..., 0])
    x = torch.randn(1, 512, 5, dtype=torch.float64)
    np.testing.assert_allclose(TAP()(x)[0].numpy(), x[0].numpy().sum(axis=1) / 5, atol=1e-6)
    with pytest.raises(ValueError):
        TAP()(torch.randn(1, 4, 0))


def _sap_reference(x, W, b, mu):
    """Step-by-step attention pooling for one utterance, x: [D, T]."""
    T = x.shape[1]
    scores = np.array([np.tanh(W @ x[:, t] + b) @ mu for t in range(T)])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return sum(w[t] * x[:, t] for t in range(T)), w


def test_sap_matches_reference():
    torch.manual_seed(3)
    sap = SAP(16).double()
    x = torch.randn(2, 16, 9, dtype=torch.float64)
    out = sap(x).detach().numpy()
    W, b, mu = (p.detach().numpy() for p in (sap.W.weight, sap.W.bias, sap.mu))
    for i in range(2):
        ref, w = _sap_reference(x[i].numpy(), W, b, mu)
        np.testing.assert_allclose(out[i], ref, atol=1e-6)
        np.testing.assert_allclose(sap.weights(x)[i].detach().numpy(), w, atol=1e-12)


def test_sap_weights_are_distribution():
    sap = SAP(512)
    w = sap.weights(torch.randn(4, 512, 11))
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(1), torch.ones(4))


def test_sap_mu_zero_is_tap():
    sap = SAP(512)
    with torch.no_grad():
        sap.mu.zero_()
    x = torch.randn(3, 512, 8)
    assert (sap(x) - TAP()(x)).abs().max() < 1e-6


def test_sap_single_frame():
    x = torch.randn(2, 512, 1)
    torch.testing.assert_close(SAP(512)(x), x[..., 0])


def test_speaker_head(vgg):
    head = torch.nn.Linear(512, 4)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    s = torch.randn(2, 512)
    assert not head(s).any()
    with torch.no_grad():
        head.weight.copy_(torch.eye(512)[[3, 10, 100, 511]])
    torch.testing.assert_close(head(s), s[:, [3, 10, 100, 511]])
    torch.nn.init.normal_(head.weight)
    torch.nn.init.normal_(head.bias)
    ref = s.numpy() @ head.weight.detach().numpy().T + head.bias.detach().numpy()
    np.testing.assert_allclose(head(s).detach().numpy(), ref, atol=1e-4)
    with pytest.raises(ValueError):
        check_n_speakers(vgg, 11)
    check_n_speakers(vgg, 10)


def test_env_net_eval_mode_recomputation():
    torch.manual_seed(1)
    net = EnvNet(8).double().eval()
    x = torch.rand(5, 8, dtype=torch.float64)
    bn1, _, fc1, bn2, _, fc2 = net.layers
    # unit running stats, identity affine: BN is x / sqrt(1 + eps)
    scale = 1.0 / np.sqrt(1.0 + bn1.eps)
    h = np.maximum(x.numpy() * scale, 0) @ fc1.weight.detach().numpy().T + fc1.bias.detach().numpy()
    ref = np.maximum(h * scale, 0) @ fc2.weight.detach().numpy().T + fc2.bias.detach().numpy()
    np.testing.assert_allclose(net(x).detach().numpy(), ref, atol=1e-10)


def test_env_net_zero_input():
    net = EnvNet(512).eval()
    for m in net.layers:
        if isinstance(m, torch.nn.Linear):
            torch.nn.init.zeros_(m.bias)
    assert not net(torch.zeros(2, 512)).any()


def test_env_net_train_identical_batch():
    net = EnvNet(512).train()
    bn = net.layers[0]
    out = bn(torch.ones(6, 512) * 3.0)
    assert out.abs().max() < 1e-4  # float32 rounding of the batch mean


def test_env_net_order_flag_and_normalize():
    net = EnvNet(8, order="relu_bn", normalize=True).eval()
    assert isinstance(net.layers[0], torch.nn.ReLU)
    e = net(torch.randn(3, 8))
    torch.testing.assert_close(e.norm(dim=1), torch.ones(3))


def test_verif_head(vgg):
    m = SpeakerModel(TrunkConfig(arch="vggm40", pool="tap", n_speakers=3, width=0.25))
    head = m.add_verif_head()
    s = torch.randn(4, 512)
    torch.testing.assert_close(head(s), s)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    assert not head(s).any()
    torch.nn.init.normal_(head.weight)
    torch.nn.init.normal_(head.bias)
    ref = s.numpy() @ head.weight.detach().numpy().T + head.bias.detach().numpy()
    np.testing.assert_allclose(head(s).detach().numpy(), ref, atol=1e-3, rtol=1e-5)


def test_checksum_sensitivity(vgg):
    a = parameter_checksum(vgg.trunk)
    assert a == parameter_checksum(vgg.trunk)
    with torch.no_grad():
        next(vgg.trunk.parameters()).view(-1)[0] += 1.0
    assert parameter_checksum(vgg.trunk) != a
