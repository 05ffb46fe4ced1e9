import numpy as np
import pytest

from docrefine.base_module import BaseConfig, BaseModule, pair_cells
from docrefine.inference import (
    NUM_HEADS,
    CrossPairAttention,
    InferenceConfig,
    InferenceLayer,
    InferenceModule,
    fuse,
    region_indices,
)
from docrefine.params import ParameterSet
from docrefine.tensor import Tape, Tensor

from gradcheck import check_model_gradients, check_param_gradients


# ---------------------------------------------------------------------------
# independent brute-force oracles (plain numpy, dense masks, per-cell loops)


def region_masks_dense(n, full_attention=False):
    """Boolean allow-masks (4, P, P) over dense cell-by-cell attention."""
    cells = pair_cells(n)
    index = {c: i for i, c in enumerate(cells)}
    p = len(cells)
    masks = np.zeros((NUM_HEADS, p, p), dtype=bool)
    for i, (s, o) in enumerate(cells):
        if full_attention:
            masks[:, i, :] = True
            continue
        for j in range(n):
            if j != s:
                masks[0, i, index[(s, j)]] = True
                masks[1, i, index[(j, s)]] = True
            if j != o:
                masks[2, i, index[(o, j)]] = True
                masks[3, i, index[(j, o)]] = True
    return masks


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dense_unit_forward(unit, query, memory, masks):
    """Dense masked multi-head attention; returns output and (4, P, P) weights."""
    p, dq = query.shape
    outs, weights = [], []
    for h in range(NUM_HEADS):
        q = query @ unit.w_q[h].data
        k = memory @ unit.w_k[h].data
        v = memory @ unit.w_v[h].data
        scores = q @ k.T / np.sqrt(dq)
        scores = np.where(masks[h], scores, -np.inf)
        w = np_softmax(scores, axis=-1)
        weights.append(w)
        outs.append(w @ v)
    return np.concatenate(outs, axis=1) @ unit.w_out.data, np.stack(weights)


def dense_layer_forward(layer, f, r, masks, no_fusion=False):
    m = np.concatenate([f, r], axis=1)
    f_hat, _ = dense_unit_forward(layer.feature_attn, f, m, masks)
    r_hat, _ = dense_unit_forward(layer.relation_attn, r, m, masks)
    if no_fusion:
        to_f, to_r = f_hat, r_hat
    else:
        gate = 1.0 / (1.0 + np.exp(-(np.concatenate([f_hat, r_hat], axis=1) @ layer.w_gate.data + layer.b_gate.data)))
        blended = gate * f_hat + (1.0 - gate) * r_hat
        to_f = to_r = blended

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    f_mid = np.tanh(to_f @ layer.f_fnn_w1.data + layer.f_fnn_b1.data) @ layer.f_fnn_w2.data + layer.f_fnn_b2.data
    r_mid = np.tanh(to_r @ layer.r_fnn_w1.data + layer.r_fnn_b1.data) @ layer.r_fnn_w2.data + layer.r_fnn_b2.data
    return (
        ln(f + f_mid, layer.ln_f_g.data, layer.ln_f_b.data),
        ln(r + r_mid, layer.ln_r_g.data, layer.ln_r_b.data),
    )


def dense_refine_once(module, f0, r0, n):
    masks = region_masks_dense(n, module.cfg.full_attention)
    f, r = f0.copy(), r0.copy()
    for layer in module.layers:
        f, r = dense_layer_forward(layer, f, r, masks, module.cfg.no_fusion)
    top = np.concatenate([f, r], axis=1)
    return top @ module.w_cls.data + module.b_cls.data, top


# ---------------------------------------------------------------------------
# fixtures


def make_module(dim=6, num_relations=3, num_layers=2, seed=0, **flags):
    params = ParameterSet(np.random.default_rng(seed))
    cfg = InferenceConfig(dim=dim, rel_dim=dim, num_relations=num_relations,
                          num_layers=num_layers, **flags)
    return InferenceModule(cfg, params), params


def random_state(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    p = n * n - n
    return rng.normal(size=(p, dim)), rng.normal(size=(p, dim))


# ---------------------------------------------------------------------------
# region structure


def test_regions_share_an_entity_with_target():
    for n in (3, 4, 5):
        cells = pair_cells(n)
        regions = region_indices(n)
        for i, (s, o) in enumerate(cells):
            for h in range(NUM_HEADS):
                for j in regions[h, i]:
                    cs, co = cells[j]
                    assert {cs, co} & {s, o}, f"cell {cells[j]} unrelated to {(s, o)}"


def test_regions_have_expected_sizes_and_no_diagonal():
    regions = region_indices(5)
    assert regions.shape == (4, 20, 4)
    # diagonal cells never exist in the compact layout by construction
    assert region_indices(5, full_attention=True).shape == (4, 20, 20)


def test_region_head_order_is_rows_then_cols():
    n = 4
    cells = pair_cells(n)
    index = {c: i for i, c in enumerate(cells)}
    regions = region_indices(n)
    i = index[(1, 3)]
    assert [cells[j] for j in regions[0, i]] == [(1, 0), (1, 2), (1, 3)]
    assert [cells[j] for j in regions[1, i]] == [(0, 1), (2, 1), (3, 1)]
    assert [cells[j] for j in regions[2, i]] == [(3, 0), (3, 1), (3, 2)]
    assert [cells[j] for j in regions[3, i]] == [(0, 3), (1, 3), (2, 3)]


# ---------------------------------------------------------------------------
# attention unit


def test_attention_matches_dense_masked_oracle():
    for n in (3, 4):
        module, _ = make_module(seed=n)
        unit = module.layers[0].feature_attn
        f, r = random_state(n, 6, seed=n)
        memory = np.concatenate([f, r], axis=1)
        out = unit.forward(Tensor(f), Tensor(memory), region_indices(n))
        expected, _ = dense_unit_forward(unit, f, memory, region_masks_dense(n))
        np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_attention_weights_zero_outside_regions():
    n = 4
    module, _ = make_module(seed=1)
    unit = module.layers[0].feature_attn
    f, r = random_state(n, 6, seed=2)
    memory = np.concatenate([f, r], axis=1)
    _, sparse_weights = unit.forward(Tensor(f), Tensor(memory), region_indices(n), return_weights=True)
    masks = region_masks_dense(n)
    _, dense_weights = dense_unit_forward(unit, f, memory, masks)
    for h in range(NUM_HEADS):
        assert np.all(dense_weights[h][~masks[h]] == 0.0)
        # scatter the sparse weights into dense layout and compare exactly
        scattered = np.zeros_like(dense_weights[h])
        regions = region_indices(n)
        for i in range(f.shape[0]):
            scattered[i, regions[h, i]] = sparse_weights[h][i]
        np.testing.assert_allclose(scattered, dense_weights[h], atol=1e-12)


def test_singleton_region_gets_full_weight():
    n = 2  # every region holds exactly one cell
    module, _ = make_module(seed=3)
    unit = module.layers[0].feature_attn
    f, r = random_state(n, 6, seed=4)
    memory = np.concatenate([f, r], axis=1)
    _, weights = unit.forward(Tensor(f), Tensor(memory), region_indices(n), return_weights=True)
    for w in weights:
        np.testing.assert_allclose(w, 1.0)


def test_attention_rows_sum_to_one():
    n = 5
    module, _ = make_module(seed=5)
    unit = module.layers[0].relation_attn
    f, r = random_state(n, 6, seed=6)
    memory = np.concatenate([f, r], axis=1)
    _, weights = unit.forward(Tensor(r), Tensor(memory), region_indices(n), return_weights=True)
    for w in weights:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# fusion


def test_fuse_zero_gate_preactivation_is_mean():
    rng = np.random.default_rng(7)
    f, r = rng.normal(size=(2, 4, 6))
    w = Tensor(np.zeros((12, 6)))
    b = Tensor(np.zeros(6))
    out = fuse(Tensor(f), Tensor(r), w, b)
    np.testing.assert_allclose(out.data, (f + r) / 2.0, atol=1e-12)


def test_fuse_equal_inputs_pass_through():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(4, 6))
    w = Tensor(rng.normal(size=(12, 6)))
    b = Tensor(rng.normal(size=6))
    out = fuse(Tensor(f), Tensor(f), w, b)
    np.testing.assert_allclose(out.data, f, atol=1e-12)


def test_fuse_gradient_wrt_gate_weights():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))
    check_param_gradients(
        lambda t: fuse(Tensor(f), Tensor(r), t["w"], t["b"]).sum(),
        {"w": rng.normal(size=(8, 4)), "b": rng.normal(size=4)},
    )


# ---------------------------------------------------------------------------
# layers and passes


def test_layer_forward_preserves_shapes_and_is_deterministic():
    n = 4
    module, _ = make_module(seed=10)
    f, r = random_state(n, 6, seed=11)
    layer = module.layers[0]
    out1 = layer.forward(Tensor(f), Tensor(r), region_indices(n))
    out2 = layer.forward(Tensor(f), Tensor(r), region_indices(n))
    assert out1[0].shape == f.shape and out1[1].shape == r.shape
    np.testing.assert_array_equal(out1[0].data, out2[0].data)
    np.testing.assert_array_equal(out1[1].data, out2[1].data)


def test_ablation_flags_change_outputs():
    n = 3
    f, r = random_state(n, 6, seed=12)
    module, _ = make_module(seed=13)
    full, _ = make_module(seed=13, full_attention=True)
    nofuse, _ = make_module(seed=13, no_fusion=True)
    base_logits, _ = module.refine_once(Tensor(f), Tensor(r), n)
    assert not np.allclose(full.refine_once(Tensor(f), Tensor(r), n)[0].data, base_logits.data)
    assert not np.allclose(nofuse.refine_once(Tensor(f), Tensor(r), n)[0].data, base_logits.data)


def test_full_attention_matches_dense_full_oracle():
    n = 4
    module, _ = make_module(seed=14, full_attention=True)
    f, r = random_state(n, 6, seed=15)
    logits, _ = module.refine_once(Tensor(f), Tensor(r), n)
    expected, _ = dense_refine_once(module, f, r, n)
    np.testing.assert_allclose(logits.data, expected, atol=1e-10)


def test_refine_once_matches_straightline_reimplementation():
    n = 3
    module, _ = make_module(seed=16)
    f, r = random_state(n, 6, seed=17)
    logits, top = module.refine_once(Tensor(f), Tensor(r), n)
    assert logits.shape == (n * n - n, 4)
    expected_logits, expected_top = dense_refine_once(module, f, r, n)
    np.testing.assert_allclose(logits.data, expected_logits, atol=1e-10)
    np.testing.assert_allclose(top.data, expected_top, atol=1e-10)


def test_run_stack_equivariant_under_cell_permutation():
    n = 4
    module, _ = make_module(seed=18)
    f, r = random_state(n, 6, seed=19)
    perm = [3, 1, 0, 2]  # entity relabeling
    cells = pair_cells(n)
    index = {c: i for i, c in enumerate(cells)}
    new_of_old = {old: new for new, old in enumerate(perm)}
    mapping = np.array([index[(new_of_old[s], new_of_old[o])] for s, o in cells])

    f_perm = np.empty_like(f)
    r_perm = np.empty_like(r)
    f_perm[mapping] = f
    r_perm[mapping] = r
    logits, _, _ = module.run_stack(Tensor(f), Tensor(r), n)
    logits_perm, _, _ = module.run_stack(Tensor(f_perm), Tensor(r_perm), n)
    np.testing.assert_allclose(logits_perm.data[mapping], logits.data, atol=1e-10)


def test_refined_gradients_for_every_inference_parameter():
    n = 3
    module, params = make_module(dim=5, num_relations=3, num_layers=2, seed=20)
    f, r = random_state(n, 5, seed=21)
    rng = np.random.default_rng(22)
    weights = rng.normal(size=(n * n - n, 4))

    def loss():
        logits, _ = module.refine_once(Tensor(f), Tensor(r), n)
        return (logits * Tensor(weights)).sum()

    check_model_gradients(loss, params, rng, max_coords=3)


# ---------------------------------------------------------------------------
# iteration


def _fake_pair_matrices(base, n, dim, seed):
    from docrefine.base_module import PairMatrices

    rng = np.random.default_rng(seed)
    p = n * n - n
    features = rng.normal(size=(p, dim))
    logits = rng.normal(size=(p, base.num_classes))
    ids = np.argmax(logits, axis=1)
    return PairMatrices(
        n=n,
        cells=pair_cells(n),
        features=Tensor(features),
        relations=Tensor(base.rel_emb.data[ids]),
        logits=Tensor(logits),
        relation_ids=ids,
    )


def test_iterate_zero_rounds_returns_base():
    params = ParameterSet(np.random.default_rng(23))
    base = BaseModule(BaseConfig(dim=6, rel_dim=6, num_relations=3), params)
    module = InferenceModule(InferenceConfig(dim=6, rel_dim=6, num_relations=3), params)
    pm = _fake_pair_matrices(base, 3, 6, seed=24)
    traj = module.iterate(base, pm, 0)
    assert len(traj) == 1
    np.testing.assert_array_equal(traj[0], pm.logits.data)


def test_iterate_one_round_equals_refine_once():
    params = ParameterSet(np.random.default_rng(25))
    base = BaseModule(BaseConfig(dim=6, rel_dim=6, num_relations=3), params)
    module = InferenceModule(InferenceConfig(dim=6, rel_dim=6, num_relations=3), params)
    pm = _fake_pair_matrices(base, 3, 6, seed=26)
    traj = module.iterate(base, pm, 1)
    refined, _ = module.refine_once(pm.features, pm.relations, pm.n)
    assert len(traj) == 2
    np.testing.assert_allclose(traj[1], refined.data, atol=1e-12)


def test_iterate_feature_matrix_resets_each_round():
    params = ParameterSet(np.random.default_rng(27))
    base = BaseModule(BaseConfig(dim=6, rel_dim=6, num_relations=3), params)
    module = InferenceModule(InferenceConfig(dim=6, rel_dim=6, num_relations=3), params)
    pm = _fake_pair_matrices(base, 3, 6, seed=28)
    traj = module.iterate(base, pm, 2)
    # replay round 2 by hand from (F0, emb(argmax P1))
    ids = np.argmax(traj[1], axis=1)
    relations = Tensor(base.rel_emb.data[ids])
    expected, _ = module.refine_once(pm.features, relations, pm.n)
    np.testing.assert_allclose(traj[2], expected.data, atol=1e-12)


def test_iterate_carry_features_flag_changes_round_two():
    params = ParameterSet(np.random.default_rng(29))
    base = BaseModule(BaseConfig(dim=6, rel_dim=6, num_relations=3), params)
    cfg = InferenceConfig(dim=6, rel_dim=6, num_relations=3, carry_features=True)
    module = InferenceModule(cfg, params)
    pm = _fake_pair_matrices(base, 3, 6, seed=30)
    traj_carry = module.iterate(base, pm, 2)
    module.cfg.carry_features = False
    traj_reset = module.iterate(base, pm, 2)
    np.testing.assert_allclose(traj_carry[1], traj_reset[1], atol=1e-12)
    assert not np.allclose(traj_carry[2], traj_reset[2])


def test_default_iteration_and_depth_settings():
    cfg = InferenceConfig()
    assert cfg.iterations == 3
    assert cfg.num_layers == 2


def test_negative_iterations_rejected():
    params = ParameterSet(np.random.default_rng(31))
    base = BaseModule(BaseConfig(dim=6, rel_dim=6, num_relations=3), params)
    module = InferenceModule(InferenceConfig(dim=6, rel_dim=6, num_relations=3), params)
    pm = _fake_pair_matrices(base, 3, 6, seed=32)
    with pytest.raises(ValueError):
        module.iterate(base, pm, -1)
