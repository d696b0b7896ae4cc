import math

import numpy as np
import pytest

import oracles
from mergegrid import merge as M
from mergegrid.merge import MergeError, TaskVector, TrimConfig
from mergegrid.tensor_store import TensorEntry, from_arrays


def tv_of(arrays, target="t"):
    return TaskVector("base", target, arrays)


def as_list(arr):
    return [float(x) for x in arr.reshape(-1)]


# ---- task vectors, apply, norms


def test_task_vector_is_difference(trio):
    base, a, _ = trio
    tv = M.task_vector(base, a)
    for name in base.names():
        assert np.array_equal(tv.tensors[name], a[name].data - base[name].data)
    assert tv.excluded == frozenset()


def test_apply_round_trip(trio):
    base, a, _ = trio
    out = M.apply(base, M.task_vector(base, a))
    for name in base.names():
        bound = 1e-5 * max(1.0, float(np.abs(a[name].data).max()))
        assert np.abs(out[name].data - a[name].data).max() <= bound
    assert out.lineage == "base"


def test_apply_zero_scale_is_base(trio):
    base, a, _ = trio
    assert M.apply(base, M.task_vector(base, a), scale=0.0).same_bits(base.evolve(id=M.apply(base, M.task_vector(base, a), 0.0).id, lineage="base"))


def test_apply_shape_mismatch(trio):
    base, _, _ = trio
    with pytest.raises(MergeError, match="layer.b"):
        M.apply(base, tv_of({"layer.b": np.zeros(4, np.float32)}))


def test_task_vector_missing_tensor(trio):
    base, a, _ = trio
    short = from_arrays("short", {"layer.w": a["layer.w"].data})
    with pytest.raises(MergeError, match="only one"):
        M.task_vector(base, short)


def test_l1_norm_values():
    per, total = M.l1_norm(tv_of({"a": np.array([1, -2, 0.5], np.float32), "b": np.array([-3], np.float32)}))
    assert per == {"a": 3.5, "b": 3.0}
    assert total == 6.5


def test_l1_norm_zero_for_identical(trio):
    base, _, _ = trio
    assert M.l1_norm(M.task_vector(base, base))[1] == 0.0


# ---- linear merge


def test_linear_zero_weights_bit_exact(trio):
    base, a, b = trio
    out = M.linear_merge(base, [M.task_vector(base, a), M.task_vector(base, b)], [0.0, 0.0])
    for name in base.names():
        assert out[name].data.tobytes() == base[name].data.tobytes()


def test_linear_single_unit_weight_recovers_target(trio):
    base, a, _ = trio
    out = M.linear_merge(base, [M.task_vector(base, a)], [1.0])
    for name in base.names():
        assert np.allclose(out[name].data, a[name].data, atol=1e-6)


def test_linear_weight_count_mismatch(trio):
    base, a, b = trio
    with pytest.raises(MergeError, match="weights"):
        M.linear_merge(base, [M.task_vector(base, a), M.task_vector(base, b)], [1.0])


def test_linear_without_base_term(trio):
    base, a, _ = trio
    tv = M.task_vector(base, a)
    out = M.linear_merge(base, [tv], [2.0], base_term=False)
    assert np.array_equal(out["head"].data, (2.0 * tv.tensors["head"].astype(np.float64)).astype(np.float32))


def test_linear_lineage(trio):
    base, a, b = trio
    out = M.linear_merge(base, [M.task_vector(base, a), M.task_vector(base, b)], [0.5, 0.5])
    assert out.lineage == "a,b"


# ---- TIES


@pytest.mark.parametrize("numel,x,k", [(10, 20, 2), (7, 10, 1), (3, 50, 2), (1000, 0.1, 1), (5, 100, 5), (200, 33, 66)])
def test_ties_keep_count(numel, x, k):
    assert M.ties_keep_count(numel, x) == k


def test_ties_tie_break_lower_index():
    tv = tv_of({"w": np.array([1.0, -2.0, 2.0, 0.5], np.float32)})
    out = M.ties_trim(tv, 25).tensors["w"]
    assert out.tolist() == [0.0, -2.0, 0.0, 0.0]


def test_ties_full_keep_is_identity():
    arr = np.arange(-5, 5, dtype=np.float32)
    assert np.array_equal(M.ties_trim(tv_of({"w": arr}), 100).tensors["w"], arr)


def test_ties_rejects_bad_percent():
    with pytest.raises(MergeError):
        M.ties_trim(tv_of({"w": np.ones(3, np.float32)}), 0)


def test_ties_is_per_tensor():
    tv = tv_of({"big": np.full(10, 100.0, np.float32), "small": np.arange(1, 11, dtype=np.float32) * 1e-3})
    out = M.ties_trim(tv, 20)
    assert np.count_nonzero(out.tensors["small"]) == 2


def test_ties_matches_oracle(gen):
    for _ in range(20):
        arr = gen.normal(size=int(gen.integers(1, 300))).astype(np.float32)
        arr[gen.random(arr.size) < 0.2] = 1.0  # plenty of magnitude ties
        for x in (10, 20, 50):
            got = M.ties_trim(tv_of({"w": arr}), x).tensors["w"]
            assert as_list(got) == oracles.ties(as_list(arr), x)


# ---- sign election


def test_sign_elect_tie_is_zero():
    a = tv_of({"w": np.array([1.0, -1.0, 2.0], np.float32)})
    b = tv_of({"w": np.array([-1.0, 1.0, -1.0], np.float32)})
    assert M.sign_elect([a, b])["w"].tolist() == [0, 0, 1]


def test_sign_elect_shape_mismatch():
    with pytest.raises(MergeError):
        M.sign_elect([tv_of({"w": np.ones(2, np.float32)}), tv_of({"w": np.ones(3, np.float32)})])


# ---- DARE


def test_dare_zero_p_identity():
    tv = tv_of({"w": np.arange(5, dtype=np.float32)})
    assert M.dare_trim(tv, 0.0, seed=1) is tv


def test_dare_rejects_p_one():
    with pytest.raises(MergeError):
        M.dare_trim(tv_of({"w": np.ones(3, np.float32)}), 1.0, seed=1)


def test_dare_matches_oracle(gen):
    arr = gen.normal(size=5000).astype(np.float32)
    for p in (0.1, 0.5):
        got = M.dare_trim(tv_of({"layer.w": arr}), p, seed=99).tensors["layer.w"]
        key = 99 ^ oracles.fnv1a("layer.w")
        assert as_list(got) == oracles.dare(as_list(arr), p, key)


def test_dare_mask_depends_on_name():
    arr = np.ones(2000, np.float32)
    out = M.dare_trim(tv_of({"a": arr, "b": arr}), 0.5, seed=3)
    assert not np.array_equal(out.tensors["a"], out.tensors["b"])


def test_dare_chunking_invariant():
    arr = np.ones(M.DARE_CHUNK * 2 + 17, np.float32)
    tv = tv_of({"w": arr})
    one = M.dare_trim(tv, 0.3, seed=5, threads=1).tensors["w"]
    many = M.dare_trim(tv, 0.3, seed=5, threads=3).tensors["w"]
    assert one.tobytes() == many.tobytes()


def test_trim_config_requires_seed_for_dare():
    with pytest.raises(MergeError, match="seed"):
        TrimConfig(dare_drop_prob=0.1)


def test_trim_config_unknown_field():
    with pytest.raises(MergeError, match="unknown"):
        TrimConfig.from_dict({"bogus": 1})


def test_subspace_identity_trim(trio):
    base, a, _ = trio
    cfg = TrimConfig(ties_keep_percent=100, dare_drop_prob=0.0, seed=0)
    out = M.subspace_merge(base, [M.task_vector(base, a)], cfg)
    for name in base.names():
        assert np.allclose(out[name].data, a[name].data, atol=1e-6)


def test_alpha_half_equals_pair_subspace(trio):
    base, a, b = trio
    tvs = [M.task_vector(base, a), M.task_vector(base, b)]
    cfg = CONFIGS[0]
    x = M.alpha_merge(base, *tvs, 0.5, cfg)
    y = M.subspace_merge(base, tvs, cfg)
    for name in base.names():
        assert oracles.ulp_distance(x[name].data, y[name].data) <= 1


def test_alpha_trajectory_is_linear(trio):
    base, a, b = trio
    tvs = [M.task_vector(base, a), M.task_vector(base, b)]
    cfg = TrimConfig(ties_keep_percent=100)
    u, v = (t.tensors["layer.w"].astype(np.float64) for t in tvs)
    for alpha in (0, 0.25, 0.5, 0.75, 1):
        got = M.alpha_merge(base, *tvs, alpha, cfg)["layer.w"].data
        want = base["layer.w"].data + alpha * u + (1 - alpha) * v
        assert np.allclose(got, want, atol=1e-6)


# ---- subspace / alpha against oracles


CONFIGS = [
    TrimConfig(ties_keep_percent=20, ties_sign_election=True, dare_drop_prob=0.1, seed=11),
    TrimConfig(ties_keep_percent=50, ties_sign_election=False),
    TrimConfig(dare_drop_prob=0.5, seed=3, ties_sign_election=True),
    TrimConfig(ties_keep_percent=10, dare_drop_prob=0.1, seed=8, order="ties_then_dare", ties_sign_election=True),
]


@pytest.mark.parametrize("cfg", CONFIGS)
@pytest.mark.parametrize("disjoint", [False, True])
def test_subspace_matches_oracle(gen, cfg, disjoint):
    base = gen.normal(size=257).astype(np.float32)
    cols = [gen.normal(0, 0.1, 257).astype(np.float32) for _ in range(3)]
    base_ck = from_arrays("base", {"w": base})
    tvs = [tv_of({"w": c}, f"t{n}") for n, c in enumerate(cols)]
    got = M.subspace_merge(base_ck, tvs, cfg, disjoint_mean=disjoint)["w"].data
    want = np.array(oracles.subspace(as_list(base), [as_list(c) for c in cols], "w", cfg, disjoint), np.float32)
    assert oracles.ulp_distance(got, want) <= 1


@pytest.mark.parametrize("cfg", CONFIGS)
@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_alpha_matches_oracle(gen, cfg, alpha):
    base = gen.normal(size=300).astype(np.float32)
    ci, cj = (gen.normal(0, 0.1, 300).astype(np.float32) for _ in range(2))
    got = M.alpha_merge(from_arrays("base", {"w": base}), tv_of({"w": ci}, "i"), tv_of({"w": cj}, "j"), alpha, cfg)["w"].data
    want = np.array(oracles.alpha(as_list(base), as_list(ci), as_list(cj), alpha, "w", cfg), np.float32)
    assert oracles.ulp_distance(got, want) <= 1


def test_alpha_rejects_out_of_range(trio):
    base, a, b = trio
    with pytest.raises(MergeError, match="alpha"):
        M.alpha_merge(base, M.task_vector(base, a), M.task_vector(base, b), 1.5, CONFIGS[1])


def test_inputs_get_distinct_dare_masks(trio):
    base, a, _ = trio
    tv = M.task_vector(base, a)
    cfg = TrimConfig(dare_drop_prob=0.5, seed=1)
    m0 = M.trim(tv, cfg, 0).tensors["layer.w"] != 0
    m1 = M.trim(tv, cfg, 1).tensors["layer.w"] != 0
    assert not np.array_equal(m0, m1)


# ---- averaging and vocab union


def test_average_is_order_free(gen):
    cks = [from_arrays(f"c{k}", {"w": gen.normal(size=(50, 3))}) for k in range(5)]
    a = M.average_merge(cks)
    b = M.average_merge(cks[::-1])
    assert a.same_bits(b)
    assert a.lineage == "c0,c1,c2,c3,c4"


def test_average_single_is_identity(trio):
    base, _, _ = trio
    out = M.average_merge([base])
    for name in base.names():
        assert out[name].data.tobytes() == base[name].data.tobytes()


def test_average_unions_vocab():
    a = from_arrays("a", {"emb": np.array([[1, 1], [2, 2], [9, 9]])}, row_labels={"emb": ["x", "y", "a1"]})
    b = from_arrays("b", {"emb": np.array([[3, 3], [4, 4], [8, 8]])}, row_labels={"emb": ["x", "y", "b1"]})
    out = M.average_merge([a, b])["emb"]
    assert out.row_labels == ("x", "y", "a1", "b1")
    assert out.data.tolist() == [[2, 2], [3, 3], [9, 9], [8, 8]]


def test_vocab_union_default_mean():
    ei = TensorEntry("emb", np.array([[1.0], [3.0], [7.0]], np.float32), ["s", "t", "i"])
    ej = TensorEntry("emb", np.array([[3.0], [5.0], [8.0]], np.float32), ["s", "t", "j"])
    out = M.vocab_union_merge(ei, ej, 2)
    assert out.data.ravel().tolist() == [2.0, 4.0, 7.0, 8.0]


def test_vocab_union_overlapping_expansions():
    ei = TensorEntry("emb", np.zeros((2, 1), np.float32), ["s", "x"])
    ej = TensorEntry("emb", np.zeros((2, 1), np.float32), ["s", "x"])
    with pytest.raises(MergeError, match="overlap"):
        M.vocab_union_merge(ei, ej, 1)


def test_vocab_union_prefix_mismatch():
    ei = TensorEntry("emb", np.zeros((2, 1), np.float32), ["s", "x"])
    ej = TensorEntry("emb", np.zeros((2, 1), np.float32), ["q", "y"])
    with pytest.raises(MergeError, match="prefix"):
        M.vocab_union_merge(ei, ej, 1)


def test_vocab_union_width_mismatch():
    ei = TensorEntry("emb", np.zeros((2, 1), np.float32), ["s", "x"])
    ej = TensorEntry("emb", np.zeros((2, 2), np.float32), ["s", "y"])
    with pytest.raises(MergeError, match="width"):
        M.vocab_union_merge(ei, ej, 1)


def test_task_vector_excludes_expanded_table():
    base = from_arrays("base", {"emb": np.zeros((2, 2)), "w": np.zeros(3)}, row_labels={"emb": ["a", "b"]})
    tgt = from_arrays("t", {"emb": np.ones((3, 2)), "w": np.ones(3)}, row_labels={"emb": ["a", "b", "c"]})
    tv = M.task_vector(base, tgt)
    assert tv.excluded == {"emb"} and tv.names() == ["w"]
    assert math.isclose(M.l1_norm(tv)[1], 3.0)
