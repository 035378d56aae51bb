import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifsfit.errors import DegenerateSystem, NonFiniteTrajectory
from ifsfit.ifs import (
    FractalSystem,
    IndexSequence,
    ReparamTransform,
    compose_matrix,
    concat_systems,
    fit_to_canvas,
    iterate_batched,
    iterate_ifs,
    normalize_points,
    random_system,
    run_chaos_game,
    sample_index_sequence,
    sample_start_points,
    transform_from_matrix,
    transform_probabilities,
)

angles = st.floats(0.0, 2 * math.pi, allow_nan=False)
unit = st.floats(0.0, 1.0, allow_nan=False)
signs = st.sampled_from([-1, 1])


@st.composite
def transforms(draw):
    return ReparamTransform(
        theta=draw(angles), phi=draw(angles), sigma1=draw(unit), sigma2=draw(unit),
        d1=draw(signs), d2=draw(signs),
        b=(draw(st.floats(-2, 2)), draw(st.floats(-2, 2))),
    )


def system_of(*specs):
    return FractalSystem(tuple(ReparamTransform(*s) for s in specs))


# -- compose_matrix -----------------------------------------------------------

def test_pure_rotation():
    a = compose_matrix(ReparamTransform(math.pi / 2, 0.0, 1.0, 1.0))
    np.testing.assert_allclose(a, [[0, -1], [1, 0]], atol=1e-15)


def test_diagonal_with_flip():
    a = compose_matrix(ReparamTransform(0.0, 0.0, 0.5, 0.25, d1=-1, d2=1))
    np.testing.assert_allclose(a, [[-0.5, 0], [0, 0.25]], atol=1e-15)


@settings(max_examples=1000, deadline=None)
@given(transforms())
def test_singular_values_are_sigmas(t):
    sv = np.linalg.svd(compose_matrix(t), compute_uv=False)
    np.testing.assert_allclose(sorted(sv), sorted([t.sigma1, t.sigma2]), atol=1e-10)
    assert abs(sv.max() - max(t.sigma1, t.sigma2)) < 1e-10
    assert abs(np.prod(sv) - t.sigma1 * t.sigma2) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_factorisation_roundtrip(entries):
    a = np.reshape(entries, (2, 2))
    np.testing.assert_allclose(compose_matrix(transform_from_matrix(a)), a, atol=1e-10)


def test_flip_must_be_sign():
    with pytest.raises(ValueError):
        ReparamTransform(0, 0, 1, 1, d1=0)


# -- probabilities and sampling -------------------------------------------------

def test_probabilities_from_sigma_products():
    s = system_of((0, 0, 0.5, 0.5), (0, 0, 1.0, 1.0))
    np.testing.assert_allclose(transform_probabilities(s), [0.2, 0.8], atol=1e-15)


def test_single_transform_probability():
    np.testing.assert_array_equal(transform_probabilities(system_of((1.0, 2.0, 0.3, 0.2))), [1.0])


def test_probabilities_match_determinants(rng):
    for _ in range(50):
        s = random_system(rng, 10)
        dets = np.abs(np.linalg.det(s.matrices()))
        np.testing.assert_allclose(transform_probabilities(s), dets / dets.sum(), atol=1e-10)


def test_degenerate_probabilities():
    s = system_of((0, 0, 0.0, 0.5), (0, 0, 0.7, 0.0))
    with pytest.raises(DegenerateSystem):
        transform_probabilities(s)
    with pytest.raises(DegenerateSystem):
        sample_index_sequence(s, 10, np.random.default_rng(0))


def test_single_transform_sequence():
    z = sample_index_sequence(system_of((0, 0, 0.5, 0.5)), 300, np.random.default_rng(0))
    assert len(z) == 300 and not z.indices.any()


def test_sequence_determinism(rng):
    s = random_system(rng, 5)
    a = sample_index_sequence(s, 100, np.random.default_rng(7))
    b = sample_index_sequence(s, 100, np.random.default_rng(7))
    np.testing.assert_array_equal(a.indices, b.indices)


def test_empirical_frequencies():
    # weights 0.2, 0.3, 0.5 as sigma products
    s = system_of((0, 0, 0.2, 1.0), (0, 0, 0.3, 1.0), (0, 0, 0.5, 1.0))
    z = sample_index_sequence(s, 100_000, np.random.default_rng(1))
    freq = np.bincount(z.indices, minlength=3) / len(z)
    np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.01)


def test_index_sequence_is_read_only():
    z = IndexSequence([0, 1, 2])
    with pytest.raises(ValueError):
        z.indices[0] = 5


def test_random_system_invariants(rng):
    for _ in range(200):
        s = random_system(rng, 10)
        p = s.params
        assert np.all((p[:, 2] >= 0) & (p[:, 2] <= 1))
        assert np.all(p[:, 3] <= p[:, 2])
        assert np.sum(p[:, 2] * p[:, 3]) >= 0.1
        assert np.all(np.abs(p[:, 4:]) <= 1)
        assert set(np.unique(s.flips)) <= {-1.0, 1.0}


def test_start_points_in_square(rng):
    v0 = sample_start_points(rng, 1000)
    assert v0.shape == (1000, 2) and np.all(np.abs(v0) <= 1)


# -- chaos game -----------------------------------------------------------------

def test_geometric_series():
    s = system_of((0, 0, 0.5, 0.5, 1, 1, (1.0, 0.0)))
    traj = iterate_ifs(s, IndexSequence([0, 0, 0]), (0.0, 0.0))
    np.testing.assert_allclose(traj.points, [[0, 0], [1, 0], [1.5, 0], [1.75, 0]], atol=1e-15)


def test_identity_map_stays_put():
    s = system_of((0, 0, 1.0, 1.0))
    traj = iterate_ifs(s, IndexSequence([0] * 5), (0.3, -0.2))
    np.testing.assert_array_equal(traj.points, np.tile([0.3, -0.2], (6, 1)))


def test_recurrence_oracle(rng):
    s = random_system(rng, 4)
    z = sample_index_sequence(s, 20, rng)
    v0 = rng.uniform(-1, 1, 2)
    traj = iterate_ifs(s, z, v0)
    v = v0.copy()
    expected = [v.copy()]
    for k in z.indices:
        t = s[int(k)]
        v = t.matrix() @ v + np.array(t.b)
        expected.append(v.copy())
    np.testing.assert_allclose(traj.points, expected, atol=1e-14)
    assert np.array_equal(traj.points[0], v0)
    np.testing.assert_array_equal(traj.step_matrices, s.matrices()[z.indices])


def test_trajectory_determinism(rng):
    s = random_system(rng, 6)
    runs = []
    for _ in range(2):
        r = np.random.default_rng(3)
        runs.append(iterate_ifs(s, sample_index_sequence(s, 300, r), sample_start_points(r, 1)[0]).points)
    assert np.array_equal(runs[0], runs[1])


def test_contraction_bound(rng):
    # Euclidean form: |v_t| <= max(|v0|, max|b| / (1 - s)) whenever every sigma <= s < 1
    checked = 0
    while checked < 1000:
        s = random_system(rng, int(rng.integers(1, 11)))
        p = s.params
        smax = p[:, 2:4].max()
        if smax >= 1:
            continue
        z = sample_index_sequence(s, 300, rng)
        v0 = sample_start_points(rng, 1)[0]
        pts = iterate_ifs(s, z, v0).points
        c = np.linalg.norm(p[:, 4:], axis=1).max()
        bound = max(np.linalg.norm(v0), c / (1 - smax)) + 1e-9
        assert np.abs(pts).max() <= bound
        checked += 1


def test_divergence_raises():
    gain = np.array([[[1e10, 0.0], [0.0, 1e10]]])
    with pytest.raises(NonFiniteTrajectory):
        run_chaos_game(gain, np.zeros((1, 2)), np.zeros((1, 300), dtype=int), [[1.0, 1.0]])


def test_bad_index_rejected():
    with pytest.raises(IndexError):
        iterate_ifs(system_of((0, 0, 0.5, 0.5)), IndexSequence([0, 1]), (0, 0))


# -- batched systems --------------------------------------------------------------

def test_concat_layout(rng):
    a, b = random_system(rng, 10), random_system(rng, 10)
    batched = concat_systems([a, b])
    assert batched.n_columns == 20 and batched.batch_offsets == (0, 10)
    for j, s in enumerate((a, b)):
        for z in range(10):
            m, t = batched.gather(j, z)
            np.testing.assert_array_equal(m, s.matrices()[z])
            np.testing.assert_array_equal(t, s.translations()[z])


def test_concat_single_system(rng):
    s = random_system(rng, 4)
    batched = concat_systems([s])
    assert batched.batch_offsets == (0,)
    np.testing.assert_array_equal(batched.matrices(), s.matrices())


def test_gather_equivalence(rng):
    systems = [random_system(rng, n) for n in (3, 7, 10)]
    batched = concat_systems(systems)
    ids = [0, 1, 2, 1]
    seqs = [sample_index_sequence(systems[i], 50, rng) for i in ids]
    v0s = sample_start_points(rng, len(ids))
    out = iterate_batched(batched, ids, seqs, v0s)
    for k, i in enumerate(ids):
        assert np.array_equal(out[k], iterate_ifs(systems[i], seqs[k], v0s[k]).points)


# -- normalisation ------------------------------------------------------------------

def test_unit_square_fills_canvas():
    pix = normalize_points(np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float), 32, 32)
    np.testing.assert_allclose(pix, [[1, 1], [30, 1], [1, 30], [30, 30]], atol=1e-12)


def test_identical_points_go_to_centre():
    pix = normalize_points(np.full((5, 2), 3.7), 32, 32)
    np.testing.assert_allclose(pix, np.full((5, 2), 15.5))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(2, 40))
def test_normalised_points_inside_canvas(seed, h, w):
    r = np.random.default_rng(seed)
    s = random_system(r, 5)
    traj = iterate_ifs(s, sample_index_sequence(s, 100, r), sample_start_points(r, 1)[0])
    pix = normalize_points(traj, h, w)
    assert pix.shape == traj.points.shape
    assert np.all(pix >= -1e-9) and np.all(pix[:, 0] <= h - 1 + 1e-9) and np.all(pix[:, 1] <= w - 1 + 1e-9)


def test_normalisation_is_isotropic_and_order_preserving(rng):
    pts = rng.normal(size=(40, 2)) * [3.0, 1.0]
    pix, frame = fit_to_canvas(pts, 32, 32)
    np.testing.assert_allclose(pix, (pts - frame.center) * frame.scale + 15.5)
    span = pix.max(axis=0) - pix.min(axis=0)
    assert math.isclose(span.max(), 29.0)


# -- serialisation ------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(transforms(), min_size=1, max_size=6))
def test_json_roundtrip_exact(ts):
    s = FractalSystem(tuple(ts))
    back = FractalSystem.from_json(s.to_json())
    assert back == s
    doc = json.loads(s.to_json())
    assert doc["n"] == len(ts) and set(doc["transforms"][0]) == {"theta", "phi", "sigma1", "sigma2", "d1", "d2", "b"}


def test_json_count_mismatch():
    doc = json.loads(system_of((0, 0, 1, 1)).to_json())
    doc["n"] = 2
    with pytest.raises(ValueError):
        FractalSystem.from_dict(doc)
