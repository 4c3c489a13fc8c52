import numpy as np
import pytest

from dualdecode.autograd import Tensor, binary_cross_entropy_with_logits, cross_entropy, no_grad
from dualdecode.autograd.nn import Linear
from dualdecode.decoder import (
    CrossAttention,
    CrossAttentionConfig,
    DecoderConfig,
    DualDecoder,
    DualDecoderNet,
    biometric_head,
    cross_attend,
    global_average_pool,
    semantic_head,
    semantic_head_fmri_only,
    total_loss,
)
from dualdecode.disentangle import Basis, orthonormal_loss, split
from dualdecode.exceptions import ConfigError, DimensionError
from dualdecode.mae import Encoder, EncoderConfig, MaskedAutoencoder


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def linear(in_dim, out_dim, W=None, b=None, seed=0):
    lin = Linear(in_dim, out_dim, np.random.default_rng(seed))
    if W is not None:
        lin.weight.data = np.asarray(W, dtype=float)
    if b is not None:
        lin.bias.data = np.asarray(b, dtype=float)
    return lin


# ---------------------------------------------------------------- pooling heads

def test_gap_examples():
    same = Tensor(np.tile([1.0, -2.0, 3.0], (4, 1)))
    assert global_average_pool(same).data.tolist() == [1.0, -2.0, 3.0]
    Z = np.random.default_rng(0).normal(size=(5, 3))
    loop = [sum(Z[i, k] for i in range(5)) / 5 for k in range(3)]
    assert np.allclose(global_average_pool(Tensor(Z)).data, loop, rtol=0, atol=1e-15)


def test_biometric_head_zero_weights_return_bias():
    head = linear(3, 2, np.zeros((3, 2)), [0.5, -1.0])
    Z = np.random.default_rng(1).normal(size=(4, 3))
    assert biometric_head(Tensor(Z), head).data.tolist() == [0.5, -1.0]
    with pytest.raises(DimensionError):
        biometric_head(Tensor(np.zeros((4, 2))), head)


def test_semantic_head_single_query_and_composition():
    head = linear(3, 4, seed=2)
    z = np.random.default_rng(3).normal(size=(1, 3))
    assert np.allclose(semantic_head(Tensor(z), head).data, z[0] @ head.weight.data + head.bias.data,
                       rtol=0, atol=1e-15)
    zero = linear(3, 4, np.zeros((3, 4)), [1.0, 2.0, 3.0, 4.0])
    assert semantic_head(Tensor(z), zero).data.tolist() == [1.0, 2.0, 3.0, 4.0]


# ---------------------------------------------------------------- cross-attention

def test_single_key_returns_projected_value_for_every_query():
    module = CrossAttention(CrossAttentionConfig(heads=2, query_dim=3, kv_dim=4), np.random.default_rng(4))
    F_x = np.random.default_rng(5).normal(size=(6, 3))
    z = np.random.default_rng(6).normal(size=(1, 4))
    out = cross_attend(F_x, z, module).data
    expected = (z @ module.v.weight.data + module.v.bias.data) @ module.out.weight.data + module.out.bias.data
    assert np.abs(out - expected).max() <= 1e-12


def test_single_head_matches_three_matmul_oracle():
    cfg = CrossAttentionConfig(heads=1, query_dim=4, kv_dim=4, head_dim=4)
    module = CrossAttention(cfg, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    F_x, Z = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    q = F_x @ module.q.weight.data + module.q.bias.data
    k = Z @ module.k.weight.data + module.k.bias.data
    v = Z @ module.v.weight.data + module.v.bias.data
    A = softmax_rows(q @ k.T / 2.0)
    expected = A @ v @ module.out.weight.data + module.out.bias.data
    attn = []
    out = module(Tensor(F_x[None]), Tensor(Z[None]), attn)
    assert np.abs(out.data[0] - expected).max() <= 1e-10
    assert np.abs(attn[0].sum(axis=-1) - 1).max() <= 1e-10


def test_cross_attention_rejects_wrong_dims():
    module = CrossAttention(CrossAttentionConfig(heads=1, query_dim=3, kv_dim=4), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        cross_attend(np.zeros((2, 5)), np.zeros((3, 4)), module)


def test_fmri_only_head_equals_uniform_attention_with_identity_projections():
    # zero query weights make attention uniform; identity value/output maps then reduce the
    # fused map to the mean token, so both heads see the same pooled vector
    cfg = CrossAttentionConfig(heads=1, query_dim=4, kv_dim=4, head_dim=4)
    module = CrossAttention(cfg, np.random.default_rng(9))
    module.q.weight.data[:] = 0.0
    for lin in (module.v, module.out):
        lin.weight.data = np.eye(4)
        lin.bias.data[:] = 0.0
    head = linear(4, 3, seed=10)
    Z = np.random.default_rng(11).normal(size=(6, 4))
    fused = semantic_head(cross_attend(Z, Z, module), head).data
    direct = semantic_head_fmri_only(Tensor(Z), head).data
    assert np.abs(fused - direct).max() <= 1e-12


# ---------------------------------------------------------------- loss

def loss_inputs(seed=12):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 4))),
            rng.integers(0, 3, 5), (rng.random((5, 4)) < 0.5).astype(float))


def test_total_loss_examples():
    s, o, sid, y = loss_inputs()
    basis = Basis(np.random.default_rng(13).normal(size=(4, 4)), 2)
    parts = total_loss(s, o, sid, y, basis, orth_weight=0.0)
    assert parts.total.item() == parts.subject.item() + parts.object.item()
    ortho = Basis.random(4, 2, np.random.default_rng(14))
    assert total_loss(s, o, sid, y, ortho, orth_weight=1.0).orth.item() <= 1e-20
    with pytest.raises(ConfigError):
        total_loss(s, o, sid, y, basis, orth_weight=-1.0)


def test_total_loss_equals_independent_component_sum():
    s, o, sid, y = loss_inputs(15)
    basis = Basis(np.random.default_rng(16).normal(size=(4, 4)), 2)
    parts = total_loss(s, o, sid, y, basis, orth_weight=0.3)
    expected = (cross_entropy(s, sid).item() + binary_cross_entropy_with_logits(o, y).item()
                + 0.3 * orthonormal_loss(basis).item())
    assert parts.total.item() == pytest.approx(expected, abs=1e-14)
    assert min(parts.values().values()) >= 0
    only_obj = total_loss(s, o, sid, y, basis, 0.3, use_subject_loss=False, use_orth_loss=False)
    assert only_obj.total.item() == parts.object.item()


# ---------------------------------------------------------------- full network

def small_net(use_cross=True, seed=0):
    enc = Encoder(EncoderConfig(patch_size=4, dim=8, layers=1, heads=2), 4, np.random.default_rng(seed))
    cfg = DecoderConfig(num_subjects=3, num_classes=4, d_obj=6, heads=2, vision_dim=5,
                        use_cross_attention=use_cross)
    return DualDecoderNet(enc, cfg, np.random.default_rng(seed + 1))


def test_biometric_logits_ignore_vision_and_fmri_only_ignores_vision():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(3, 16))
    V1, V2 = rng.normal(size=(3, 2, 5)), 100 * rng.normal(size=(3, 2, 5))
    with no_grad():
        net = small_net()
        s1, o1, _ = net.forward(X, V1)
        s2, o2, _ = net.forward(X, V2)
        assert np.array_equal(s1.data, s2.data) and not np.allclose(o1.data, o2.data)
        solo = small_net(use_cross=False)
        a, b = solo.forward(X, V1)[1], solo.forward(X, V2)[1]
        assert np.array_equal(a.data, b.data) and a.shape == (3, 4)


def test_perturbations_inside_one_subspace_leave_the_other_untouched():
    net = small_net()
    net.basis_obj.retract()
    B = net.basis.data
    rng = np.random.default_rng(18)
    F = rng.normal(size=(4, 8))
    base = split(F, net.basis_obj)
    delta_obj = rng.normal(size=(4, 6)) @ B[:, 2:].T
    delta_subj = rng.normal(size=(4, 2)) @ B[:, :2].T
    moved_obj = split(F + delta_obj, net.basis_obj)
    moved_subj = split(F + delta_subj, net.basis_obj)
    head = net.subject_classifier
    assert np.abs(biometric_head(moved_obj.Z_subj, head).data
                  - biometric_head(base.Z_subj, head).data).max() <= 1e-8
    assert np.abs(moved_subj.Z_obj.data - base.Z_obj.data).max() <= 1e-8


def tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    n = 24
    s = np.arange(n) % 3
    y = (rng.random((n, 4)) < 0.4).astype(float)
    X = rng.normal(size=(n, 16)) + s[:, None]
    V = y[:, None, :] @ rng.normal(size=(4, 5)) + np.zeros((n, 2, 5))
    return X, s, y, V


@pytest.fixture(scope="module")
def stage1():
    X = tiny_problem()[0]
    return MaskedAutoencoder(patch_size=4, dim=8, layers=1, heads=2, decoder_dim=8, decoder_layers=1,
                             decoder_heads=2, epochs=1, batch_size=8).fit(X)


def test_training_is_deterministic_and_round_trips(stage1, tmp_path):
    X, s, y, V = tiny_problem()
    kw = dict(encoder=stage1, d_obj=6, heads=2, epochs=2, batch_size=8)
    a = DualDecoder(**kw).fit(X, s, y, V)
    b = DualDecoder(**kw).fit(X, s, y, V)
    for r, q in zip(a.history_, b.history_):
        assert np.array_equal(list(r.values()), list(q.values()), equal_nan=True)
    assert a.net_.basis.data.tobytes() == b.net_.basis.data.tobytes()
    a.save(tmp_path)
    loaded = DualDecoder.load(tmp_path)
    for x, z in zip(a.decision_function(X, V), loaded.decision_function(X, V)):
        assert np.array_equal(x, z)
    assert a.predict(X, V).shape == (24,) and a.predict_labels(X, V).shape == (24, 4)
    assert set(a.get_params()) >= {"d_obj", "orth_weight", "use_cross_attention"}


def test_fit_requires_vision_when_fusing(stage1):
    X, s, y, _ = tiny_problem()
    with pytest.raises(ConfigError):
        DualDecoder(encoder=stage1, d_obj=6, heads=2, epochs=1).fit(X, s, y)


def test_retraction_reaches_machine_precision(stage1):
    X, s, y, V = tiny_problem()
    model = DualDecoder(encoder=stage1, d_obj=6, heads=2, epochs=1, batch_size=8).fit(X, s, y, V)
    model.retract_basis()
    assert model.basis_.orthonormality_error() <= 1e-10
