import math

import numpy as np
import pytest

from byzsgd import AttackSpec, DefenseSpec, ExperimentConfig, run, run_coupled_escape, theorem_params
from byzsgd.report import render_trace
from byzsgd.simulator import ground_truth_diagnostics, safeguard_windows, step_size

BYZ = (0, 1, 2, 3)


def cfg(**kw):
    base = dict(objective="quadratic_saddle", objective_params=(("delta", 0.1),), d=10, m=10, T=120, x0=1.0)
    base.update(kw)
    return ExperimentConfig(**base)


def iterates(result):
    return result.x_final.tolist(), [(r.f, r.grad_norm) for r in result.records]


# -- parameter derivation ----------------------------------------------------

def test_theorem_params_regression():
    tp = theorem_params(0.1, 0.2, 10, 10, 0.01)
    assert tp.C3 == pytest.approx(0.14, rel=1e-15)
    assert (tp.T, tp.T0, tp.T1) == (14000, 1982, 6266)
    assert tp.C1 == pytest.approx(14.151982794585487, rel=1e-12)
    assert tp.C2 == pytest.approx(2.07338099496173, rel=1e-12)
    assert tp.eta == pytest.approx(0.0005047248323104224, rel=1e-12)
    assert tp.nu == pytest.approx(math.sqrt(0.14), rel=1e-15)
    assert tp.threshold0 == pytest.approx(1528.7088757972754, rel=1e-12)
    assert tp.threshold1 == pytest.approx(2718.1170659604973, rel=1e-12)


def test_step_size_decreases_with_c3():
    etas = [theorem_params(0.1, a, 10, 10, 0.01).eta for a in (0.0, 0.1, 0.2, 0.3, 0.4)]
    assert all(a > b for a, b in zip(etas, etas[1:]))
    assert theorem_params(0.1, 0.0, 1000, 10, 0.01).C3 == pytest.approx(0.001)


def test_theorem_params_errors():
    with pytest.raises(ValueError):
        theorem_params(0.1, 0.5, 10, 10, 0.01)
    with pytest.raises(ValueError):
        theorem_params(0.1, 0.2, 10, 10, 1.0)
    with pytest.raises(ValueError):
        theorem_params(0.0, 0.2, 10, 10, 0.01)
    with pytest.raises(ValueError):
        theorem_params(0.1, 0.2, 10, 10, 0.01, delta=0.0)


def test_step_schedule_and_windows():
    c = cfg(eta=0.1, schedule=((2, 0.5), (4, 0.1)), iterations_per_epoch=10)
    assert [step_size(c, t) for t in (0, 19, 20, 39, 40, 99)] == pytest.approx([0.1, 0.1, 0.05, 0.05, 0.005, 0.005])
    assert safeguard_windows(cfg(defense=DefenseSpec("safeguard_double", T0=7, T1=21))) == (7, 21)
    emp = cfg(defense=DefenseSpec("safeguard_double", threshold_mode="empirical"), iterations_per_epoch=50)
    assert safeguard_windows(emp) == (50, 300)


# -- ground truth diagnostics -----------------------------------------------

def test_diagnostics_zero_for_honest_noiseless():
    g = np.array([1.0, 2.0])
    sigma, delta = ground_truth_diagnostics({i: g.copy() for i in range(4)}, {0, 1, 2, 3}, g)
    assert not sigma.any() and not delta.any()
    r = run(cfg(V=0.0, T=30))
    assert all(rec.sigma_norm == 0 and rec.delta_norm == 0 for rec in r.records)


def test_diagnostics_split_honest_and_byzantine():
    g = np.zeros(2)
    reps = {0: np.array([4.0, 0.0]), 1: np.array([0.0, 2.0]), 2: np.array([0.0, -2.0]), 3: np.array([2.0, 0.0])}
    sigma, delta = ground_truth_diagnostics(reps, {1, 2, 3}, g)
    assert np.allclose(sigma, [0.5, 0.0]) and np.allclose(delta, [1.0, 0.0])


# -- determinism and equivalences --------------------------------------------

def test_threads_do_not_change_the_trace():
    c = cfg(attack=AttackSpec("variance", BYZ), defense=DefenseSpec("safeguard_double", threshold_mode="empirical",
                                                                    T0=30, T1=90, floor=0.5))
    a, b, e = run(c), run(c, threads=4), run(c, threads=3)
    assert render_trace(a.records, 10) == render_trace(b.records, 10) == render_trace(e.records, 10)
    assert np.array_equal(a.x_final, b.x_final)


def test_seed_changes_the_trace():
    assert not np.array_equal(run(cfg(seed=1)).x_final, run(cfg(seed=2)).x_final)


def test_infinite_thresholds_equal_mean():
    mean = run(cfg(nu=0.1, attack=AttackSpec("sign_flip", BYZ)))
    for kind in ("safeguard_single", "safeguard_double"):
        sg = run(cfg(nu=0.1, attack=AttackSpec("sign_flip", BYZ),
                     defense=DefenseSpec(kind, threshold_scale=math.inf)))
        assert not sg.summary["ejections"]
        assert np.array_equal(mean.x_final, sg.x_final)
        assert iterates(mean) == iterates(sg)


def test_noiseless_honest_run_is_gradient_descent():
    c = cfg(V=0.0, nu=0.0, eta=0.07, T=60, x0=tuple(np.linspace(-1, 1, 10)))
    h = np.array([-0.1] + [1.0] * 9)
    x = np.linspace(-1, 1, 10)
    for _ in range(60):
        x = x - 0.07 * (h * x)
    # Averaging m identical vectors rounds, so agreement is to floating-point accuracy.
    for kind in ("mean", "safeguard_double", "coord_median", "geomed"):
        assert np.allclose(run(c.replace(defense=DefenseSpec(kind))).x_final, x, rtol=1e-12, atol=1e-15)


def test_honest_attack_is_identity_on_iterates():
    plain = run(cfg(nu=0.05))
    for defense in (DefenseSpec("mean"), DefenseSpec("safeguard_double"), DefenseSpec("krum", b=2)):
        a = run(cfg(nu=0.05, defense=defense))
        b = run(cfg(nu=0.05, defense=defense, attack=AttackSpec("honest", BYZ)))
        assert iterates(a) == iterates(b)
    assert iterates(plain) == iterates(run(cfg(nu=0.05, attack=AttackSpec("honest", BYZ))))


def test_transient_matches_honest_before_window():
    inner = AttackSpec("sign_flip", BYZ)
    honest = run(cfg(defense=DefenseSpec("safeguard_double")))
    trans = run(cfg(defense=DefenseSpec("safeguard_double"),
                    attack=AttackSpec("transient", BYZ, start_iter=40, stop_iter=80, inner=inner)))
    assert [(r.f, r.grad_norm) for r in honest.records[:41]] == [(r.f, r.grad_norm) for r in trans.records[:41]]
    assert honest.records[45].f != trans.records[45].f


def test_convex_quadratic_converges_to_noise_floor():
    c = ExperimentConfig(objective="quadratic_saddle", objective_params=(("delta", -1.0),), d=10, m=10, T=200,
                         eta=0.1, x0=1.0)
    r = run(c)
    g0 = r.records[0].grad_norm
    floor = 2 * c.V / math.sqrt(c.m * c.T)
    assert r.summary["final_grad_norm"] == pytest.approx(0.057166953653163856, rel=1e-9)
    assert r.summary["final_grad_norm"] <= 1e-3 * g0 + 2 * floor


def test_mean_family_neutral_on_honest_convex_runs():
    meds = {}
    for kind in ("mean", "safeguard_single", "safeguard_double"):
        meds[kind] = np.median([run(cfg(objective_params=(("delta", -1.0),), T=200, seed=s,
                                        defense=DefenseSpec(kind))).summary["final_grad_norm"] for s in range(20)])
    assert max(meds.values()) <= 2 * min(meds.values())


@pytest.mark.xfail(strict=True, reason="medoid and lower-middle coordinate median sit ~2.8x above the "
                                       "averaging noise floor; see the decisions ledger")
def test_honest_run_neutrality_all_defenses():
    meds = [np.median([run(cfg(objective_params=(("delta", -1.0),), T=200, seed=s,
                               defense=DefenseSpec(kind))).summary["final_grad_norm"] for s in range(20)])
            for kind in ("mean", "geomed", "coord_median", "safeguard_single", "safeguard_double")]
    assert max(meds) <= 2 * min(meds)


def test_safeguard_sosp_fraction_not_worse_than_mean_under_variance_attack():
    def frac(defense):
        return np.median([run(cfg(T=800, seed=s, x0=(0.0,) + (2.0,) * 9, iterations_per_epoch=400,
                                  attack=AttackSpec("variance", BYZ), defense=defense)).summary["sosp_fraction"]
                          for s in range(20)])

    sg = DefenseSpec("safeguard_double", threshold_mode="empirical", T0=400, T1=2400, floor=4.36, floor_long=4.93)
    assert frac(sg) >= frac(DefenseSpec("mean"))


# -- summary, divergence, reset ---------------------------------------------

def test_summary_fields():
    s = run(cfg(attack=AttackSpec("sign_flip", BYZ), x0=(0.0,) + (4.0,) * 9, T=60,
                defense=DefenseSpec("safeguard_double"))).summary
    assert s["status"] == "completed" and s["iterations"] == 60
    assert s["caught_count"] == 4 and s["honest_ejected"] == []
    assert s["final_good"] == [4, 5, 6, 7, 8, 9]
    assert all(t < s["safeguard"]["T0"] for t, _ in s["ejections"])
    assert s["alpha"] == 0.4 and 0 <= s["sosp_fraction"] <= 1
    assert s["config"]["seed"] == 0


def test_divergence_is_reported_not_raised():
    r = run(cfg(attack=AttackSpec("rescale", BYZ, factor=10.0), eta=0.5, T=500))
    assert r.summary["diverged"] and r.summary["status"] == "diverged"
    assert r.summary["final_grad_norm"] is None
    assert r.summary["iterations"] < 500


def test_reset_every_readmits_workers():
    inner = AttackSpec("sign_flip", BYZ)
    c = cfg(x0=(0.0,) + (4.0,) * 9, T=120, attack=AttackSpec("transient", BYZ, start_iter=0, stop_iter=40,
                                                             inner=inner),
            defense=DefenseSpec("safeguard_double", T0=20, T1=60, reset_every=60))
    r = run(c)
    assert r.summary["caught_count"] == 4
    assert r.summary["final_good"] == list(range(10))
    assert r.records[59].good_count == 6 and r.records[60].good_count == 10


def test_invalid_defense_rejected_by_run():
    with pytest.raises(ValueError):
        run(cfg(defense=DefenseSpec("krum", b=4)))


def test_metrics_cadence():
    r = run(cfg(metrics_cadence=7, T=30))
    assert [rec.t for rec in r.records if rec.hess_min_eig is not None] == [0, 7, 14, 21, 28]


# -- coupled escape ---------------------------------------------------------

def test_coupled_runs_are_mirror_images_without_worker_noise():
    c = cfg(V=0.0, nu=0.3, eta=0.05, T=200, x0=0.0)
    res = run_coupled_escape(c, 0.1, 1e9)
    assert not res.escaped
    assert np.array_equal(res.dist_a, res.dist_b)


def test_bowl_never_escapes_large_radius():
    c = cfg(nu=0.01, eta=0.05, T=300, x0=0.0)
    assert not run_coupled_escape(c, -1.0, 10.0).escaped
    assert not run_coupled_escape(c, 0.0, 10.0).escaped


def test_saddle_escapes_eventually():
    c = cfg(nu=0.3, eta=0.1, T=3000, x0=0.0)
    res = run_coupled_escape(c, 0.5, 3.0)
    assert res.escaped and res.t_escape == len(res.dist_a)
    assert max(res.dist_a[-1], res.dist_b[-1]) > 3.0


def test_coupled_escape_argument_errors():
    with pytest.raises(ValueError):
        run_coupled_escape(cfg(nu=0.0), 0.1, 1.0)
    with pytest.raises(ValueError):
        run_coupled_escape(cfg(nu=0.1), 0.1, 0.0)


def test_post_burn_in_sosp_fraction_on_double_well():
    from byzsgd.acceptance import calibrate_floors

    def make(seed, floor, floor_long, attack=AttackSpec()):
        return ExperimentConfig(objective="double_well", d=10, m=10, T=1200, seed=seed, x0=2.0, eta=0.05,
                                attack=attack,
                                defense=DefenseSpec("safeguard_double", threshold_mode="empirical", T0=100, T1=300,
                                                    floor=floor, floor_long=floor_long))

    def frac(c):
        rows = [r for r in run(c).records if r.hess_min_eig is not None and r.t >= c.T // 2]
        return np.mean([r.grad_norm <= c.epsilon and r.hess_min_eig >= -math.sqrt(c.epsilon) for r in rows])

    fb, fa = calibrate_floors(make)
    attack = AttackSpec("variance", BYZ)
    sg = np.median([frac(make(s, fb, fa, attack)) for s in range(20)])
    mean = np.median([frac(make(s, fb, fa, attack).replace(defense=DefenseSpec())) for s in range(20)])
    assert sg >= 0.5
    assert sg >= mean
