import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmtune.controller import (DT_AMB_AXIS, E_AXIS, PHI_MAX_I, PHI_MAX_P, ControllerState,
                               ParameterSet, ParameterTable, conservative_parameter_set,
                               constant_parameter_set, control_step)
from tmtune.evalkit import stability_sweep
from tmtune.plant import (ActuatorCommand, ExogenousInput, PlantParams, initial_state,
                          step as plant_step)
from tmtune.scenario import Scenario, bundled_usage, fit_layer_statistics, sample_scenario, synthesize_drive
from tmtune.tsenv import (ActionMask, EmptyTrajectory, EnvConfig, EvalConfig, NonFiniteSignal,
                          ParameterDataset, SignalWindow, TuningEnv, action_footprint, apply_action,
                          build_mask, compute_reward, context_vector, downsample_action,
                          eval_scenario, load_trajectory, save_trajectory, simulate,
                          upsample_tables)

PHI = (PHI_MAX_P, PHI_MAX_I)
DMAX = EvalConfig().delta_max
seeds = st.integers(0, 2**32 - 1)


def random_set(rng):
    mk = lambda hi: ParameterTable(rng.uniform(0, hi, (5, 5)))
    return ParameterSet(((mk(PHI_MAX_P), mk(PHI_MAX_I)), (mk(PHI_MAX_P), mk(PHI_MAX_I))))


def set_from(P, I, bank_other=None):
    other = bank_other or (ParameterTable(np.full((5, 5), 0.5)), ParameterTable(np.full((5, 5), 0.05)))
    return ParameterSet(((ParameterTable(P), ParameterTable(I)), other))


def interp_oracle(table, n_out):
    # corner-aligned linear resampling with numpy's interp, one axis at a time
    n_in = table.shape[0]
    x_in, x_out = np.arange(n_in), np.linspace(0, n_in - 1, n_out)
    rows = np.array([np.interp(x_out, x_in, table[:, j]) for j in range(n_in)]).T
    return np.array([np.interp(x_out, x_in, rows[i]) for i in range(n_out)])


@pytest.fixture(scope="module")
def stats():
    return fit_layer_statistics(bundled_usage("all"))


# ---------------------------------------------------------------- resampling

def test_upsample_constant():
    img = upsample_tables(constant_parameter_set(0.6, 0.03), 0)
    assert img.shape == (2, 8, 8)
    assert np.allclose(img[0], 0.3, atol=1e-15) and np.allclose(img[1], 0.15, atol=1e-15)


@given(seeds)
def test_upsample_corners_and_oracle(seed):
    ps = random_set(np.random.default_rng(seed))
    for bank in (0, 1):
        img = upsample_tables(ps, bank)
        for c in range(2):
            v = ps.banks[bank][c].values
            for (a, b), (x, y) in zip([(0, 0), (0, 7), (7, 0), (7, 7)], [(0, 0), (0, 4), (4, 0), (4, 4)]):
                assert img[c, a, b] == pytest.approx(v[x, y] / PHI[c], abs=1e-15)
            assert np.allclose(img[c], interp_oracle(v, 8) / PHI[c], atol=1e-13)
            assert np.all((img[c] >= 0) & (img[c] <= 1 + 1e-12))


def test_upsample_linear_rows():
    v = np.repeat(np.arange(5.0)[:, None], 5, axis=1)
    img = upsample_tables(set_from(v * 0.4, v * 0.04), 0, phi_max=(2.0, 0.2))
    expect = np.linspace(0, 4 * 0.4 / 2.0, 8)
    assert np.allclose(img[0], expect[:, None], atol=1e-14)
    assert img[0][-1, 0] == pytest.approx(0.8)


def test_downsample_zero_and_constant():
    assert np.array_equal(downsample_action(np.zeros((2, 8, 8))), np.zeros((2, 5, 5)))
    out = downsample_action(np.full((2, 8, 8), 0.7))
    assert np.allclose(out[0], 0.7 * DMAX[0]) and np.allclose(out[1], 0.7 * DMAX[1])


def test_downsample_rejects_bad_shape():
    with pytest.raises(ValueError):
        downsample_action(np.zeros((2, 5, 5)))


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_round_trip_on_bilinear_tables(a, b, c, d):
    i, j = np.meshgrid(np.arange(5.0), np.arange(5.0), indexing="ij")
    T = a + b * i + c * j + d * i * j
    img = upsample_tables(set_from(T, T), 0, phi_max=(1.0, 1.0))
    back = downsample_action(img, delta_max=(1.0, 1.0))
    assert np.allclose(back[0], T, atol=1e-12) and np.allclose(back[1], T, atol=1e-12)


def test_footprint_covers_exactly_the_contributing_entries():
    for i in range(5):
        for j in range(5):
            m = np.zeros((5, 5))
            m[i, j] = 1
            fp = action_footprint(m)
            # an 8x8 entry is in the footprint iff perturbing it moves cell (i, j)
            for a in range(8):
                for b in range(8):
                    delta = np.zeros((2, 8, 8))
                    delta[0, a, b] = 1.0
                    moved = downsample_action(delta)[0, i, j] != 0
                    assert fp[a, b] == moved


# ---------------------------------------------------------------- masks

def test_mask_single_interior_breakpoint():
    m = build_mask([E_AXIS[2]], [DT_AMB_AXIS[2]])
    assert m.sum() == 4 and np.all(m[1:3, 1:3] == 1)


def test_mask_dense_sweep_is_full():
    e, d = np.meshgrid(np.linspace(-12, 12, 60), np.linspace(-5, 80, 60))
    assert np.all(build_mask(e.ravel(), d.ravel()) == 1)


def test_mask_two_adjacent_cells():
    m = build_mask([0.5, 1.5, 5.0], [5.0, 6.0, 5.0])
    assert m.sum() == 6


def test_mask_clamps_out_of_range():
    m = build_mask([-99.0], [500.0])
    assert m.sum() == 4 and m[0, 4] == 1 and m[1, 3] == 1


def test_mask_empty_trajectory():
    with pytest.raises(EmptyTrajectory):
        build_mask([], [])


@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-20, 100)), min_size=1, max_size=20),
       st.lists(st.tuples(st.floats(-30, 30), st.floats(-20, 100)), max_size=20))
def test_mask_monotone_under_extension(head, tail):
    a = build_mask(*zip(*head))
    b = build_mask(*zip(*(head + tail)))
    assert np.all(b >= a) and set(np.unique(b)) <= {0.0, 1.0} and b.sum() >= 4


# ---------------------------------------------------------------- masked update

def test_apply_action_identities(rng):
    ps = random_set(rng)
    assert apply_action(ps, 0, np.zeros((2, 8, 8)), np.ones((2, 5, 5))) == ps
    assert apply_action(ps, 1, rng.uniform(-1, 1, (2, 8, 8)), np.zeros((2, 5, 5))) == ps


def test_apply_action_single_entry():
    base = np.full((5, 5), 0.5)
    base[2, 3] = 0.10
    ps = set_from(base, np.full((5, 5), 0.05))
    # a constant action c gives a downsampled step c * delta_max everywhere
    delta = np.full((2, 8, 8), 0.05 / DMAX[0])
    mask = np.zeros((2, 5, 5))
    mask[0, 2, 3] = 1
    new = apply_action(ps, 0, delta, mask)
    assert new.banks[0][0].values[2, 3] == pytest.approx(0.15, abs=1e-15)
    flat_old, flat_new = ps.flat(), new.flat()
    changed = np.flatnonzero(flat_old != flat_new)
    assert changed.tolist() == [2 * 5 + 3]


@given(seeds, st.integers(0, 1))
def test_masking_soundness_and_bounds(seed, bank):
    rng = np.random.default_rng(seed)
    ps = random_set(rng)
    delta = rng.uniform(-1, 1, (2, 8, 8))
    mask = (rng.random((2, 5, 5)) < 0.4).astype(float)
    new = apply_action(ps, bank, delta, ActionMask(bank, mask))
    step = downsample_action(delta)
    for c in range(2):
        old_v, new_v = ps.banks[bank][c].values, new.banks[bank][c].values
        for i in range(5):
            for j in range(5):
                if mask[c, i, j] == 0:
                    assert new_v[i, j] == old_v[i, j]
                else:
                    assert new_v[i, j] == min(max(old_v[i, j] + step[c, i, j], 0.0), PHI[c])
        assert np.all((new_v >= 0) & (new_v <= PHI[c]))
    assert new.banks[1 - bank] == ps.banks[1 - bank]


# ---------------------------------------------------------------- reward

def test_reward_examples():
    z = np.zeros(50)
    assert compute_reward(z, z) == 0.0
    assert compute_reward(np.ones(7), np.zeros(7)) == -50.0
    assert compute_reward(np.ones(7), np.zeros(7), r_min=-40.0) == -40.0
    assert compute_reward(z, np.ones(50)) == pytest.approx(-0.1, abs=1e-15)


# valve commands below ~1e-154 square to zero in double precision, so they are kept out
valve = st.one_of(st.just(0.0), st.floats(1e-100, 1.0))


@given(st.lists(st.tuples(st.floats(-50, 50), valve), min_size=1, max_size=40))
def test_reward_oracle_sign_and_zero(pairs):
    e, u = map(np.array, zip(*pairs))
    r = compute_reward(e, u)
    oracle = -sum(25 * (math.sqrt(abs(a)) + a * a) + 0.1 * b * b for a, b in pairs) / len(pairs)
    assert r == pytest.approx(max(oracle, -100.0), rel=1e-12, abs=1e-12)
    assert r <= 0
    assert (r == 0) == (np.all(e == 0) and np.all(u == 0))


def test_reward_rejects_non_finite():
    with pytest.raises(NonFiniteSignal):
        compute_reward([0.0, math.nan], [0.0, 0.0])
    with pytest.raises(ValueError):
        compute_reward([], [])


# ---------------------------------------------------------------- windows and context

def test_signal_window_bin_means():
    traj = simulate(_rest_scenario(60.0), PlantParams(), conservative_parameter_set())
    w = SignalWindow.from_trajectory(traj, 16)
    assert w.raw.shape == (16, 4)
    n = len(traj)
    for k in (0, 7, 15):
        lo, hi = k * n // 16, (k + 1) * n // 16
        assert w.raw[k, 1] == pytest.approx(traj.e_T[lo:hi].mean(), abs=1e-12)


def test_signal_window_normalized_range():
    raw = np.array([[-40.0, -20.0, -40.0, 0.0], [120.0, 20.0, 100.0, 1.0]])
    assert np.allclose(np.abs(SignalWindow(raw).normalized), 1.0)


def test_context_vector():
    c = context_vector(1, 60.0)
    assert c[:2].tolist() == [0.0, 1.0] and c[:2].sum() == 1


# ---------------------------------------------------------------- closed loop

def _rest_scenario(T_amb, duration=120.0):
    layers = {"grade_mean": 0.0, "v_mean": 0.0, "v_var": 0.0, "duration": duration,
              "T_amb": T_amb, "humidity": 50.0}
    n = round(duration / 0.1)
    return synthesize_drive(Scenario(layers, seed=0), target=np.zeros(n), grade=np.zeros(n), v0=0.0)


def python_closed_loop(sc, theta, ps, cfg):
    """Reference loop composed from the public plant and controller steps."""
    s = initial_state(theta, cfg.T_ref_nominal)
    cs, prev, e_log, u_log = ControllerState(), -1, [], []
    for k in range(sc.v.size):
        bank = 1 if s.T_U1 < cfg.warmup_threshold else 0
        T_ref = cfg.T_ref_warmup if bank else cfg.T_ref_nominal
        if bank != prev:
            cs, prev = ControllerState(), bank
        e, dT = s.T_D - T_ref, s.T_U1 - sc.T_amb
        u, cs = control_step(cs, ps, bank, e, dT, theta.dt, cfg.windup_bound)
        u_vlv = u if bank == 0 else 1.0 - u
        xi_el = 1 if sc.P_ED[k] < 0 else 0
        u_fan = min(max((s.T_U1 - cfg.fan_on) / cfg.fan_band, 0.0), 1.0)
        cmd = ActuatorCommand(u_vlv, cfg.u_pmp, u_fan, 1.0 if bank == 0 else 0.0)
        e_log.append(e)
        u_log.append(u_vlv)
        s = plant_step(s, cmd, ExogenousInput(float(sc.v[k]), float(sc.P_ED[k]), sc.T_amb, bank, xi_el),
                       theta)
    return np.array(e_log), np.array(u_log)


@pytest.mark.parametrize("seed,T_amb", [(3, None), (11, -15.0)])
def test_compiled_loop_matches_python_composition(stats, seed, T_amb):
    sc = sample_scenario(stats, p_edge=0.0, rng_seed=seed)
    sc.layers["duration"] = 90.0
    if T_amb is not None:
        sc.layers["T_amb"] = T_amb
    sc = synthesize_drive(sc)
    theta, ps, cfg = PlantParams(), random_set(np.random.default_rng(seed)), EvalConfig(T_init=None)
    traj = simulate(sc, theta, ps, cfg)
    e, u = python_closed_loop(sc, theta, ps, cfg)
    assert np.allclose(traj.e_T, e, rtol=0, atol=1e-9)
    assert np.allclose(traj.u_vlv, u, rtol=0, atol=1e-9)


def test_rest_scenario_reward_near_zero():
    res = eval_scenario(_rest_scenario(55.0), PlantParams(), conservative_parameter_set())
    assert np.all(np.abs(res.trajectory.e_T) < 0.05)
    assert -0.5 <= res.reward <= 0.0
    assert res.mask.values.sum() >= 4


def test_forced_divergence_clips_to_r_min(stats):
    # shrinking the mixing capacity eventually makes the explicit integration blow up
    sc = sample_scenario(stats, p_edge=0.0, rng_seed=1)
    ps = constant_parameter_set(PHI_MAX_P, PHI_MAX_I)
    sweep = stability_sweep(ps, sc)
    assert not sweep[0]["failed"]            # the nominal plant is stable at the gain limits
    first = next(r for r in sweep if r["failed"])
    res = eval_scenario(sc, PlantParams().scaled(C_mix=first["factor"]), ps)
    assert res.failed and res.reward == EvalConfig().r_min
    assert res.mask.values.sum() >= 4 and np.all(np.isfinite(res.observation.signals))


def test_eval_is_deterministic(stats):
    sc = sample_scenario(stats, rng_seed=21)
    ps = random_set(np.random.default_rng(2))
    a, b = eval_scenario(sc, PlantParams(), ps), eval_scenario(sc, PlantParams(), ps)
    assert np.array_equal(a.observation.signals, b.observation.signals)
    assert np.array_equal(a.observation.image, b.observation.image)
    assert a.reward == b.reward and np.array_equal(a.mask.values, b.mask.values)


def test_observation_shapes(stats):
    res = eval_scenario(sample_scenario(stats, rng_seed=5), PlantParams(), conservative_parameter_set())
    obs = res.observation
    assert obs.context.shape == (3,) and obs.image.shape == (2, 8, 8)
    assert obs.signals.shape == (EvalConfig().n_window, 4)
    assert res.mask.values.shape == (2, 5, 5) and res.bank in (0, 1)


def test_trajectory_round_trip(tmp_path, stats):
    traj = simulate(sample_scenario(stats, rng_seed=8), PlantParams(), conservative_parameter_set())
    save_trajectory(traj, tmp_path / "t.tsv")
    back = load_trajectory(tmp_path / "t.tsv")
    assert np.array_equal(back["e_T"], traj.e_T) and np.array_equal(back["v"], traj.v)
    assert back["time"].size == len(traj)


# ---------------------------------------------------------------- environment

def small_env(stats, seed=0, **kw):
    cfg = EnvConfig(episode_length=3, scenario_batch=2, eval=EvalConfig(n_window=16), **kw)
    return TuningEnv(stats, ParameterDataset(), cfg, seed=seed)


def test_env_episode_and_masking(stats):
    env = small_env(stats, shadow_baseline=True)
    obs, mask = env.reset(episode=0)
    rng = np.random.default_rng(0)
    for k in range(3):
        before = env.phi
        bank = env.last.bank
        a = rng.uniform(-1, 1, (2, 8, 8))
        obs, mask2, r, done, info = env.step(a)
        for c in range(2):
            keep = mask.values[c] == 0
            assert np.array_equal(env.phi.banks[bank][c].values[keep],
                                  before.banks[bank][c].values[keep])
        assert env.phi.banks[1 - bank] == before.banks[1 - bank]
        assert np.all(env.phi.flat() >= 0) and r <= 0 and "baseline_reward" in info
        assert done == (k == 2)
        mask = mask2


def test_env_reset_is_reproducible(stats):
    a, b = small_env(stats, seed=4), small_env(stats, seed=4)
    oa, _ = a.reset(episode=7)
    ob, _ = b.reset(episode=7)
    assert a.phi0 == b.phi0 and a.theta == b.theta
    assert np.array_equal(oa.signals, ob.signals)


def test_env_requires_reset(stats):
    with pytest.raises(RuntimeError):
        small_env(stats).step(np.zeros((2, 8, 8)))


@pytest.mark.parametrize("kw", [dict(episode_length=0), dict(p_edge=2.0)])
def test_env_config_validation(kw):
    with pytest.raises(ValueError):
        EnvConfig(**kw)


@pytest.mark.parametrize("kw", [dict(phi_max=(1.0,)), dict(n_window=0), dict(u_pmp=2.0),
                                dict(r_min=1.0), dict(step_fraction=0.0)])
def test_eval_config_validation(kw):
    with pytest.raises(ValueError):
        EvalConfig(**kw)
