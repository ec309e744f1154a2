import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tspc.debris import build_debris_problem, load_synthetic_catalog, MissionConfig
from tspc.engine import (
    CandidateExhaustedError,
    DesignLayout,
    DesignVector,
    EvaluationError,
    NodeDesign,
    NodePrediction,
    ObjectiveSettings,
    SequenceObjective,
    SequenceProblem,
    TransferOutcome,
    condition_cost,
    evaluate_sequence,
    node_penalty,
    predict_observation,
    select_candidate,
)
from tspc.gaussian import GaussianBelief, chi_square_quantile
from tspc.static_tsp import SOLUTION_A, SOLUTION_B, build_static_problem, tour_length

STATIC = build_static_problem()


def static_design(route=SOLUTION_A, **kw):
    return STATIC.design_for_route(route, **kw)


# --- design vectors ---------------------------------------------------------------


def test_static_layout_has_91_variables():
    assert STATIC.layout.size == 13 * 7
    x = np.arange(91, dtype=float)
    np.testing.assert_array_equal(STATIC.layout.flatten(STATIC.layout.unflatten(x)), x)


def test_debris_layouts_have_126_or_140_variables():
    catalog = load_synthetic_catalog()
    config = MissionConfig(start_debris=int(catalog.ids[0]))
    assert build_debris_problem(catalog, config, fixed_tof=20.0).layout.size == 126
    full = build_debris_problem(catalog, config).layout
    assert full.size == 140
    x = np.linspace(0, 1, 140)
    back = DesignVector.unflatten(x, full)
    assert back.nodes[0].tof == x[0]
    np.testing.assert_array_equal(back.flatten(), x)


def test_unflatten_wrong_length_raises():
    with pytest.raises(ValueError):
        STATIC.layout.unflatten(np.zeros(90))


def test_layout_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        DesignLayout(1, ("x",), [1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.5, 0.5, 0.5])


def test_field_slice_addresses_one_field_per_node():
    idx = STATIC.layout.field_slice("kappa")
    assert idx.tolist() == [6 + 7 * k for k in range(13)]


def test_design_vector_bounds_check():
    dv = DesignVector.unflatten(static_design(), STATIC.layout)
    assert dv.within_bounds()
    x = static_design()
    x[6] = 1e6
    assert not DesignVector.unflatten(x, STATIC.layout).within_bounds()


# --- selection ----------------------------------------------------------------------


def test_exact_match_is_selected():
    belief = GaussianBelief([1.0, 1.0], np.eye(2))
    cand, z, d2 = select_candidate(np.array([4, 9, 2]), np.array([[0, 0], [1, 1], [3, 3]]), belief)
    assert cand == 9 and d2 == pytest.approx(0.0, abs=1e-12)


def test_tie_goes_to_smallest_id():
    belief = GaussianBelief([0.0, 0.0], np.eye(2))
    cand, _, _ = select_candidate(np.array([8, 3, 5]), np.array([[1, 0], [0, 1], [5, 5]]), belief)
    assert cand == 3


def test_empty_candidate_set_raises():
    with pytest.raises(CandidateExhaustedError):
        select_candidate(np.array([], dtype=int), np.zeros((0, 2)), GaussianBelief([0, 0], np.eye(2)))


def test_stochastic_selection_needs_rng_and_is_reproducible():
    belief = GaussianBelief([0.0], [[1.0]])
    ids, obs = np.arange(5), np.linspace(-1, 1, 5)[:, None]
    with pytest.raises(ValueError):
        select_candidate(ids, obs, belief, mode="stochastic")
    draws = [select_candidate(ids, obs, belief, mode="stochastic", rng=np.random.default_rng(4))[0] for _ in range(3)]
    assert len(set(draws)) == 1


def test_benchmark_first_step_selects_point_seven():
    node = NodeDesign(mu=[1.06, -0.11], sigma=[4.0, 4.0], kappa=50.0, rho=[0.2, 0.2])
    ctx = STATIC.start()
    pred = STATIC.predict(ctx, node, 0)
    ids = np.array([i for i in STATIC.candidate_ids if i != STATIC.depot])
    cand, _, _ = select_candidate(ids, STATIC.observe(ctx, node, pred, ids), pred.obs)
    assert cand == 7


# --- prediction and conditioning -------------------------------------------------------


def test_identity_maps_return_input_belief():
    belief = GaussianBelief([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
    state, obs, jac = predict_observation(belief, lambda x: x, lambda x: x, 1e-6)
    np.testing.assert_allclose(state.cov, belief.cov, atol=1e-9)
    np.testing.assert_allclose(obs.mean, belief.mean)
    np.testing.assert_allclose(jac["H"], np.eye(2), atol=1e-9)


@pytest.mark.parametrize("method", ["fd", "sut"])
def test_linear_maps_give_sandwiched_covariance(method):
    rng = np.random.default_rng(1)
    F, H = rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    cov = np.diag([1.0, 2.0, 0.5])
    belief = GaussianBelief(rng.normal(size=3), cov)
    _, obs, _ = predict_observation(belief, lambda x: F @ x, lambda x: H @ x, 1e-6, method=method)
    np.testing.assert_allclose(obs.cov, H @ F @ cov @ F.T @ H.T, atol=1e-9, rtol=1e-6)


def test_unknown_propagation_method():
    with pytest.raises(ValueError):
        predict_observation(GaussianBelief([0.0], [[1.0]]), lambda x: x, lambda x: x, 1e-6, method="ekf")


def test_condition_cost_scalar_schur():
    state = GaussianBelief([0.0, 0.0], [[4.0, 1.0], [1.0, 1.0]])
    belief, fell_back = condition_cost(state, lambda x: [x[0]], [[0.0, 1.0]], [2.0], [0.0], 1e-7)
    assert not fell_back
    assert belief.mean[0] == pytest.approx(2.0, abs=1e-6)
    assert belief.cov[0, 0] == pytest.approx(3.0, abs=1e-6)


def test_condition_cost_at_predicted_observation_keeps_mean():
    state = GaussianBelief([1.0, 3.0], [[4.0, 1.0], [1.0, 1.0]])
    belief, _ = condition_cost(state, lambda x: [x[0] ** 2], [[0.0, 1.0]], [3.0], [3.0], 1e-7)
    assert belief.mean[0] == pytest.approx(1.0)


def test_condition_cost_insensitive_cost_has_zero_variance():
    state = GaussianBelief([0.0, 0.0], np.eye(2))
    belief, _ = condition_cost(state, lambda x: [5.0], [[0.0, 1.0]], [1.0], [0.0], 1e-6)
    assert belief.cov[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_condition_cost_degenerate_observation_falls_back():
    state = GaussianBelief([0.0, 0.0], np.eye(2))
    belief, fell_back = condition_cost(state, lambda x: [x[0]], [[0.0, 0.0]], [1.0], [0.0], 1e-6)
    assert fell_back
    assert belief.cov[0, 0] == pytest.approx(1.0, abs=1e-6)


# --- penalties ---------------------------------------------------------------------------


def test_penalty_at_means_is_minus_threshold():
    assert node_penalty(0.0, 0.0, 2, 0.98) == pytest.approx(-chi_square_quantile(2, 0.98))


def test_debris_threshold_and_static_dof():
    assert chi_square_quantile(2, 0.98) == pytest.approx(7.824046010856292, abs=1e-9)
    assert STATIC.default_dof() == 3
    assert chi_square_quantile(3, 0.98) == pytest.approx(9.837409311192593, abs=1e-9)


def test_debris_observation_is_one_dimensional():
    catalog = load_synthetic_catalog()
    problem = build_debris_problem(catalog, MissionConfig(start_debris=int(catalog.ids[0])), fixed_tof=20.0)
    node = problem.layout.unflatten(problem.layout.default_vector())[0]
    pred = problem.predict(problem.start(), node, 0)
    assert pred.obs.cov.shape == (1, 1)
    assert problem.default_dof() == 2


# --- full evaluation -----------------------------------------------------------------------


@pytest.mark.parametrize("route", [SOLUTION_A, SOLUTION_B])
@pytest.mark.parametrize("mode", ["chi_square", "map"])
def test_reference_routes_are_reproduced(route, mode):
    ev = evaluate_sequence(static_design(route), STATIC, ObjectiveSettings(mode=mode))
    assert tuple([13, *ev.route, 13]) == route
    assert ev.total_cost == pytest.approx(tour_length(route), abs=1e-12)


def test_feasible_design_objective_equals_cost():
    ev = evaluate_sequence(static_design(), STATIC)
    assert ev.feasible
    assert ev.objective == ev.total_cost


def test_map_objective_matches_hand_sum():
    ev = evaluate_sequence(static_design(), STATIC, ObjectiveSettings(mode="map"))
    hand = ev.total_cost
    for n in ev.nodes:
        cov = n.sigma_z + np.diag(np.maximum(1e-9 * np.diag(n.sigma_z), 1e-12))
        hand += math.log(np.linalg.det(cov)) + math.log(n.sigma_y) + n.quad_z + n.quad_y
    assert ev.objective == pytest.approx(hand, rel=1e-12)
    assert ev.objective > ev.total_cost


def test_settings_validation():
    with pytest.raises(ValueError):
        ObjectiveSettings(mode="bogus")
    with pytest.raises(ValueError):
        ObjectiveSettings(selection="greedy")


def test_design_vector_accepted():
    dv = DesignVector.unflatten(static_design(), STATIC.layout)
    assert evaluate_sequence(dv, STATIC).route == evaluate_sequence(static_design(), STATIC).route


def test_stochastic_selection_reproducible_by_seed():
    s = ObjectiveSettings(selection="stochastic", seed=11)
    x = STATIC.layout.default_vector()
    assert evaluate_sequence(x, STATIC, s).route == evaluate_sequence(x, STATIC, s).route


class _Line(SequenceProblem):
    """Targets on a line; the cost map returns NaN at a chosen node."""

    n_obs = 1

    def __init__(self, bad_node=None):
        self.candidate_ids = np.arange(1, 5)
        self.layout = DesignLayout(3, ("x",), [-5, 0.1, 0.0], [5, 5, 10], [1, 1, 1])
        self.bad_node = bad_node

    def start(self):
        return 0.0

    def predict(self, ctx, node, k):
        return NodePrediction(GaussianBelief([ctx + node.mu[0]], [[node.sigma[0] ** 2]]), extra=k)

    def observe(self, ctx, node, pred, ids):
        return ids.astype(float)[:, None]

    def transfer(self, ctx, node, pred, cand, z):
        y = math.nan if pred.extra == self.bad_node else abs(cand - ctx)
        return TransferOutcome(y, GaussianBelief([abs(node.mu[0])], [[1.0]]), float(cand))


def test_non_finite_cost_reports_node_index():
    with pytest.raises(EvaluationError) as err:
        evaluate_sequence(np.array([1, 1, 1, 1, 1, 1, 1, 1, 1.0]), _Line(bad_node=1), ObjectiveSettings())
    assert err.value.node == 1


def test_exhausted_candidates():
    problem = _Line()
    problem.candidate_ids = np.arange(1, 3)
    with pytest.raises(CandidateExhaustedError):
        evaluate_sequence(np.ones(9), problem)


def test_toy_line_route():
    ev = evaluate_sequence(np.array([1, 1, 1, 1, 1, 1, 1, 1, 1.0]), _Line())
    assert ev.route == [1, 2, 3] and ev.total_cost == 3.0


# --- incremental objective ----------------------------------------------------------------


def _same(a, b):
    return a.objective == b.objective and a.route == b.route and np.array_equal(a.penalties, b.penalties)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["chi_square", "map"]))
def test_incremental_evaluation_is_bit_identical(seed, mode):
    rng = np.random.default_rng(seed)
    lo, hi = STATIC.layout.bounds()
    settings_ = ObjectiveSettings(mode=mode)
    fast = SequenceObjective(STATIC, settings_)
    base = STATIC.uniform_mu_sampler()(rng)
    fast.evaluate(base)
    for _ in range(5):
        probe = base.copy()
        j = rng.integers(probe.size)
        probe[j] = rng.uniform(lo[j], hi[j])
        assert _same(fast.evaluate(probe), evaluate_sequence(probe, STATIC, settings_))
        fast.evaluate(base)
    assert _same(fast.evaluate(base), evaluate_sequence(base, STATIC, settings_))


def test_objective_pickles_without_cache():
    import pickle

    obj = SequenceObjective(STATIC)
    obj(static_design())
    clone = pickle.loads(pickle.dumps(obj))
    assert clone._base is None and clone(static_design()) == obj(static_design())
