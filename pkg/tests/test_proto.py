import numpy as np
import pytest

from protodet import autograd as ag
from protodet import proto as pr


def make_level(stride=8, tau=4.0, gh=4, gw=4, index=1):
    return pr.LevelSpec(index=index, stride=stride, tau=tau, grid_h=gh, grid_w=gw)


def make_grid(level, values):
    return pr.FeatureGrid(level=level,
                          values=ag.Tensor(np.asarray(values, dtype=np.float64)))


def make_protos(level, rows, biases):
    return pr.PrototypeSet(level=level,
                           prototypes=ag.Tensor(np.asarray(rows, dtype=np.float64)),
                           biases=ag.Tensor(np.asarray(biases, dtype=np.float64)))


def score_one(p, b, f):
    level = make_level(gh=1, gw=1)
    protos = make_protos(level, [p, [0.0] * len(p)], [b, 0.0])
    grid = make_grid(level, np.asarray(f, dtype=np.float64).reshape(1, 1, -1))
    return pr.response_map(protos, grid).scores.data[0, 0, 0]


def test_response_zero_dot():
    assert score_one([1.0, 0.0], 0.0, [0.0, 5.0]) == pytest.approx(0.5)


def test_response_sigmoid_two():
    assert score_one([1.0, 0.0], 0.0, [2.0, 0.0]) == pytest.approx(0.8808, abs=1e-4)


def test_response_sigmoid_one():
    assert score_one([1.0, 1.0], 1.0, [1.0, -1.0]) == pytest.approx(0.7311, abs=1e-4)


def test_response_dimension_mismatch():
    level = make_level(gh=1, gw=1)
    protos = make_protos(level, [[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    grid = make_grid(level, np.zeros((1, 1, 3)))
    with pytest.raises(pr.ProtoError):
        pr.response_map(protos, grid)


def test_response_scores_open_interval():
    rng = np.random.default_rng(0)
    level = make_level(gh=3, gw=5)
    protos = make_protos(level, rng.normal(size=(4, 6)), rng.normal(size=4))
    stack = pr.response_map(protos, make_grid(level, rng.normal(size=(3, 5, 6))))
    s = stack.scores.data
    assert s.shape == (4, 3, 5)
    assert (s > 0).all() and (s < 1).all()


@pytest.mark.parametrize("seed", range(10))
def test_response_translation_equivariance(seed):
    rng = np.random.default_rng(seed)
    level = make_level(gh=4, gw=5)
    protos = make_protos(level, rng.normal(size=(3, 6)), rng.normal(size=3))
    vals = rng.normal(size=(4, 5, 6))
    flat = vals.reshape(20, 6)
    perm = rng.permutation(20)
    s0 = pr.response_map(protos, make_grid(level, vals)).scores.data
    s1 = pr.response_map(
        protos, make_grid(level, flat[perm].reshape(4, 5, 6))).scores.data
    assert np.allclose(s1.reshape(3, 20), s0.reshape(3, 20)[:, perm])


@pytest.mark.parametrize("seed", range(10))
def test_positive_row_scaling_preserves_argmax(seed):
    rng = np.random.default_rng(seed)
    level = make_level(gh=4, gw=4)
    row = rng.normal(size=6)
    c = float(rng.uniform(0.1, 10.0))
    grid = make_grid(level, rng.normal(size=(4, 4, 6)))
    a = pr.response_map(make_protos(level, [row, row * 0], [0.0, 0.0]),
                        grid).scores.data[0]
    b = pr.response_map(make_protos(level, [row * c, row * 0], [0.0, 0.0]),
                        grid).scores.data[0]
    assert np.argmax(a) == np.argmax(b)


def test_response_differentiable_through_tape():
    rng = np.random.default_rng(1)
    level = make_level(gh=2, gw=2)
    vals = rng.normal(size=(2, 2, 3))
    rows = rng.normal(size=(2, 3))

    def fn(t):
        grid = pr.FeatureGrid(level=level, values=ag.reshape(t, (2, 2, 3)))
        protos = pr.PrototypeSet(
            level=level,
            prototypes=ag.Tensor(rows, tape=t.tape),
            biases=ag.Tensor(np.zeros(2), tape=t.tape))
        return ag.reduce_mean(pr.response_map(protos, grid).scores)

    assert ag.finite_diff_check(fn, vals.ravel()) < 1e-4


def _const_stack(level, values):
    # values: C×H×W array
    return pr.ScoreStack(level=level, scores=ag.Tensor(np.asarray(values)))


def test_aggregate_mean_of_constants():
    l1 = make_level(stride=8, gh=2, gw=2, index=1)
    l2 = make_level(stride=16, tau=8.0, gh=1, gw=1, index=2)
    stacks = [_const_stack(l1, np.full((2, 2, 2), 0.2)),
              _const_stack(l2, np.full((2, 1, 1), 0.6))]
    sal = pr.aggregate_saliency(stacks, class_index=0, input_size=(16, 16))
    assert np.allclose(sal.values, 0.4)


def test_aggregate_single_level_constant():
    l1 = make_level(gh=1, gw=1)
    sal = pr.aggregate_saliency([_const_stack(l1, np.full((2, 1, 1), 0.7))],
                                class_index=1, input_size=(4, 4))
    assert sal.values.shape == (4, 4)
    assert np.allclose(sal.values, 0.7)


def test_aggregate_identical_planes_is_resize():
    rng = np.random.default_rng(2)
    q = rng.uniform(0.05, 0.95, size=(3, 4))
    levels = [make_level(stride=s, tau=t, gh=3, gw=4, index=i + 1)
              for i, (s, t) in enumerate([(8, 4.0), (16, 8.0), (32, 8.0)])]
    stacks = [_const_stack(lv, np.stack([q, q])) for lv in levels]
    sal = pr.aggregate_saliency(stacks, class_index=0, input_size=(12, 16))
    single = pr.aggregate_saliency(stacks[:1], class_index=0, input_size=(12, 16))
    assert np.allclose(sal.values, single.values)


def test_aggregate_bounded_by_level_extremes():
    rng = np.random.default_rng(3)
    levels = [make_level(stride=s, tau=t, gh=g, gw=g, index=i + 1)
              for i, (s, t, g) in enumerate([(8, 4.0, 4), (16, 8.0, 2), (32, 8.0, 1)])]
    stacks = [_const_stack(lv, rng.uniform(0.1, 0.9, size=(2, lv.grid_h, lv.grid_w)))
              for lv in levels]
    sal = pr.aggregate_saliency(stacks, class_index=1, input_size=(32, 32))
    lo = min(s.scores.data[1].min() for s in stacks)
    hi = max(s.scores.data[1].max() for s in stacks)
    assert sal.values.min() >= lo - 1e-12 and sal.values.max() <= hi + 1e-12


def test_aggregate_missing_level_rejected():
    l1 = make_level(gh=1, gw=1)
    with pytest.raises(pr.ProtoError):
        pr.aggregate_saliency([], class_index=0, input_size=(4, 4))


def test_resize_constant_and_identity():
    const = np.full((3, 5), 0.3)
    assert np.allclose(pr.resize_map(const, (7, 9)), 0.3)
    assert np.allclose(pr.resize_map(const, (3, 5)), const)


def test_resize_hand_sample_positions():
    # sample positions (j+0.5)/4·2−0.5 land at 0, 0.25, 0.75, 1
    out = pr.resize_map(np.array([[0.0, 1.0]]), (1, 4))
    assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])


def test_resize_zero_target_rejected():
    with pytest.raises(pr.ProtoError):
        pr.resize_map(np.ones((2, 2)), (0, 4))


def test_make_levels_default_taus():
    levels = pr.make_levels(256, 256)
    assert [lv.stride for lv in levels] == [8, 16, 32]
    assert [lv.tau for lv in levels] == [4.0, 8.0, 8.0]
    assert [(lv.grid_h, lv.grid_w) for lv in levels] == [(32, 32), (16, 16), (8, 8)]


def test_make_levels_range_bound_monotone():
    # tau·s must be non-decreasing across levels; 96px breaks that with defaults
    with pytest.raises(pr.ProtoError):
        pr.make_levels(96, 96)


def test_export_saliency_pgm(tmp_path):
    sal = pr.SaliencyMap(class_index=0,
                         values=np.array([[0.0, 0.5], [1.0, 0.25]]))
    path = tmp_path / "s.pgm"
    pr.export_saliency_pgm(path, sal)
    raw = path.read_bytes()
    assert raw.startswith(b"P5")
    assert raw[-4:] == bytes([0, 128, 255, 64])
