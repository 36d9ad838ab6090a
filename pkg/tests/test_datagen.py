import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aptnet.dataio import read_dataset
from aptnet.datagen import (
    DatagenConfig,
    DiffusionScenario,
    OracleSolution,
    Well,
    build_dataset,
    generate_field,
    generate_samples,
    gradient_weights,
    sample_observations,
    solve_diffusion,
    subsample,
)
from aptnet.errors import SolverError

from conftest import kernel_error


# -- fields ---------------------------------------------------------------

def test_zero_std_is_constant():
    f = generate_field("gaussian-continuous", {"mean": 0.7, "std": 0.0}, seed=1, n=16)
    assert np.allclose(f.values, np.exp(0.7))


@pytest.mark.parametrize("kind", ["gaussian-binary", "von-karman-binary"])
def test_binary_classes_have_two_values(kind):
    f = generate_field(kind, {"mean": -1.0, "std": 2.0}, seed=2, n=32)
    assert np.unique(f.values).size == 2
    assert f.kind == kind and np.all(f.values > 0)


@pytest.mark.parametrize("kind", ["gaussian-continuous", "von-karman-continuous"])
def test_fields_are_seeded_and_positive(kind):
    a = generate_field(kind, seed=5, n=24)
    assert np.array_equal(a.values, generate_field(kind, seed=5, n=24).values)
    assert not np.array_equal(a.values, generate_field(kind, seed=6, n=24).values)
    assert np.all(a.values > 0)


def test_field_errors():
    with pytest.raises(ValueError):
        generate_field("uniform")
    with pytest.raises(ValueError):
        generate_field("gaussian-continuous", {"corr_len": 0.0})


def test_correlation_length_recovered():
    n, ell = 64, 0.15
    lags = np.arange(1, 16)
    acc = np.zeros(lags.size)
    for seed in range(64):
        z = np.log(generate_field("gaussian-continuous", {"corr_len": ell}, seed=seed, n=n).values)
        for i, lag in enumerate(lags):
            acc[i] += 0.5 * (np.mean(z[lag:] * z[:-lag]) + np.mean(z[:, lag:] * z[:, :-lag]))
    rho = acc / 64
    keep = (rho > 0.05) & (rho < 0.95)
    r = lags[keep] / n
    # rho = exp(-(r / ell)^2)  =>  -log rho = r^2 / ell^2
    est = np.sqrt(np.sum(r**4) / np.sum(r**2 * -np.log(rho[keep])))
    assert abs(est - ell) / ell < 0.2


# -- solver ---------------------------------------------------------------

def test_uniform_field_without_sources_is_unchanged():
    scen = DiffusionScenario(generate_field("gaussian-continuous", seed=0, n=16).values, np.full((16, 16), 3.0),
                             0.01, [1, 5, 9])
    sol = solve_diffusion(scen, debug=True)
    assert np.allclose(sol.fields, 3.0, rtol=0, atol=1e-12)


def test_closed_system_conserves_mass_and_obeys_max_principle():
    rng = np.random.default_rng(0)
    kappa = generate_field("gaussian-binary", {"mean": np.log(0.05), "std": 2.0}, seed=3, n=32).values
    u0 = rng.uniform(size=(32, 32))
    sol = solve_diffusion(DiffusionScenario(kappa, u0, 0.01, [1, 10, 50]), debug=True)
    m0 = u0.sum() / 32**2
    assert np.max(np.abs(sol.mass - m0)) / m0 < 1e-8
    assert sol.fields.min() >= u0.min() - 1e-12 and sol.fields.max() <= u0.max() + 1e-12


def test_mass_grows_linearly_with_injection():
    kappa = generate_field("gaussian-continuous", {"mean": np.log(0.02)}, seed=4, n=32).values
    steps = np.arange(1, 21)
    sol = solve_diffusion(DiffusionScenario(kappa, np.zeros((32, 32)), 0.05, steps, [Well(0.3, 0.6, 1.7, width=0.05)]))
    assert np.allclose(sol.mass, 1.7 * sol.times, rtol=1e-10)
    assert np.allclose(sol.injected, sol.mass, rtol=1e-10)


def test_well_schedule():
    w = Well(0.5, 0.5, 2.0, t_on=0.25, t_off=0.75)
    assert w.active(0.0, 0.25) == 0.0 and w.active(0.2, 0.3) == pytest.approx(0.5) and w.active(0.3, 0.4) == 1.0
    sol = solve_diffusion(DiffusionScenario(np.ones((8, 8)) * 0.1, np.zeros((8, 8)), 0.1, [2, 5, 10], [w]))
    assert np.allclose(sol.injected, [0.0, 2.0 * 0.25, 2.0 * 0.5])
    assert np.allclose(sol.mass, sol.injected)


def test_heat_kernel_agreement_and_refinement():
    errors = [kernel_error(n) for n in (32, 64, 128)]
    assert errors[1] < 2e-2 and errors[2] < 2e-2
    assert errors[0] / errors[1] >= 3 and errors[1] / errors[2] >= 3


def test_blow_up_names_the_step():
    with pytest.raises(SolverError, match="step 1"):
        solve_diffusion(DiffusionScenario(np.ones((4, 4)), np.zeros((4, 4)), 0.1, [3], [Well(0.5, 0.5, np.nan)]))


def test_scenario_validation():
    with pytest.raises(ValueError):
        DiffusionScenario(np.zeros((4, 4)), np.zeros((4, 4)), 0.1, [1])
    with pytest.raises(ValueError):
        DiffusionScenario(np.ones((4, 4)), np.zeros((4, 4)), 0.1, [3, 2])
    with pytest.raises(ValueError):
        DiffusionScenario(np.ones((4, 4)), np.zeros((3, 4)), 0.1, [1])


# -- observations ---------------------------------------------------------

def fake_solution(field2d, wells=()):
    n = field2d.shape[0]
    scen = DiffusionScenario(np.ones((n, n)), field2d, 0.1, [1], list(wells))
    return OracleSolution(scen, np.array([0.1]), field2d[None], np.zeros(1), np.zeros(1))


def test_node_values_at_cell_centers_are_exact():
    rng = np.random.default_rng(0)
    field2d = rng.normal(size=(16, 16))
    sol = fake_solution(field2d)
    s = sample_observations(sol, 64, "static", seed=1)
    from aptnet.datagen import interpolate_field

    c = (np.arange(16) + 0.5) / 16
    pts = np.array([[c[3], c[7]], [c[0], c[15]], [c[10], c[10]]])
    assert np.array_equal(interpolate_field(sol, 0, pts), field2d[[3, 0, 10], [7, 15, 10]])
    assert s.coords.shape == (64, 2) and s.fields.shape == (1, 64, 1)


def test_static_sampling_includes_wells_and_features():
    sol = solve_diffusion(DiffusionScenario(np.full((16, 16), 0.1), np.zeros((16, 16)), 0.01, [2, 4],
                                            [Well(0.3, 0.7, 1.0, width=0.05)]))
    s = sample_observations(sol, 32, "static", seed=2)
    assert np.allclose(s.coords[0], [0.3, 0.7]) and np.allclose(s.anchors, [[0.3, 0.7]])
    assert s.features[0, 1] == 0.0 and np.allclose(s.features[:, 0], np.log(0.1))
    assert s.scalars == {"rate": 1.0}
    with pytest.raises(ValueError):
        sample_observations(sol, 8)


def test_adaptive_on_uniform_field_is_uniform():
    sol = fake_solution(np.ones((16, 16)))
    assert np.allclose(gradient_weights(np.ones((16, 16))), 0.1)
    counts = np.zeros((4, 4))
    for seed in range(20):
        s = sample_observations(sol, 200, "adaptive", seed=seed, count_jitter=0.0)
        counts += np.histogram2d(*s.coords[0].T, bins=4, range=[[0, 1], [0, 1]])[0]
    expect = counts.sum() / 16
    assert np.all(np.abs(counts - expect) < 5 * np.sqrt(expect))


def test_adaptive_density_follows_gradient_weights():
    n = 32
    c = (np.arange(n) + 0.5) / n
    field2d = np.tanh((c[:, None] - 0.5) / 0.05) * np.ones((1, n))
    sol = fake_solution(field2d)
    w = gradient_weights(field2d)
    band = w > 0.5
    expect = w[band].mean() / w[~band].mean()
    inside = outside = 0
    for seed in range(32):
        s = sample_observations(sol, 400, "adaptive", seed=seed, count_jitter=0.0)
        ij = np.minimum((s.coords[0] * n).astype(int), n - 1)
        hit = band[ij[:, 0], ij[:, 1]]
        inside += hit.sum()
        outside += (~hit).sum()
    ratio = (inside / band.sum()) / (outside / (~band).sum())
    assert abs(ratio - expect) / expect < 0.1


def test_adaptive_counts_vary_per_snapshot():
    sol = solve_diffusion(DiffusionScenario(np.full((16, 16), 0.05), np.zeros((16, 16)), 0.01, [1, 3, 6, 9],
                                            [Well(0.5, 0.5, 1.0, width=0.05)]))
    s = sample_observations(sol, 64, "adaptive", seed=3)
    assert s.mesh_mode == "adaptive" and len(set(s.node_counts())) > 1
    assert all(64 <= n <= 80 for n in s.node_counts())
    assert all(np.allclose(c[0], [0.5, 0.5]) for c in s.coords)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_subsample_is_a_subset_keeping_anchors(seed):
    sol = solve_diffusion(DiffusionScenario(np.full((16, 16), 0.05), np.zeros((16, 16)), 0.01, [1, 3],
                                            [Well(0.4, 0.4, 1.0)]))
    full = sample_observations(sol, 100, "static", seed=seed)
    sub = subsample(full, 30, seed)
    assert np.allclose(sub.coords[0], [0.4, 0.4])
    rows = {tuple(r) for r in full.coords}
    assert all(tuple(r) in rows for r in sub.coords)


# -- datasets -------------------------------------------------------------

def small_cfg(**kw):
    base = dict(n_samples=20, grid=16, n_snapshots=3, n_steps=10, n_nodes=32, split=(8, 1, 1))
    base.update(kw)
    return DatagenConfig(**base)


def test_split_counts_exact():
    assert small_cfg().split_counts() == {"train": 16, "val": 2, "test": 2}
    data = generate_samples(small_cfg())
    assert [len(data[k]) for k in ("train", "val", "test")] == [16, 2, 2]
    ids = [s.metadata["scenario_id"] for k in ("train", "val", "test") for s in data[k]]
    assert len(set(ids)) == 20


def test_ood_split_is_class_disjoint(tmp_path):
    cfg = small_cfg(train_classes=("gaussian-continuous", "gaussian-binary"), test_classes=("von-karman-binary",))
    manifest = build_dataset(cfg, tmp_path)
    train = read_dataset(tmp_path / "train.aptds").samples
    test = read_dataset(tmp_path / "test.aptds").samples
    assert {s.metadata["field_class"] for s in train} == {"gaussian-continuous", "gaussian-binary"}
    assert {s.metadata["field_class"] for s in test} == {"von-karman-binary"}
    assert set(manifest["classes"]["train"]).isdisjoint(manifest["classes"]["test"])
    with pytest.raises(ValueError):
        small_cfg(train_classes=("gaussian-binary",), test_classes=("gaussian-binary",))


def test_dual_resolution_subsets(tmp_path):
    manifest = build_dataset(small_cfg(n_nodes=32, n_nodes_full=96), tmp_path)
    assert manifest["dual_resolution"]
    for split in ("train", "test"):
        low = read_dataset(tmp_path / f"{split}.aptds").samples
        high = read_dataset(tmp_path / f"{split}_full.aptds").samples
        for a, b in zip(low, high):
            assert a.metadata["scenario_id"] == b.metadata["scenario_id"]
            assert a.coords.shape[0] == 32 and b.coords.shape[0] == 96
            rows = {tuple(r) for r in b.coords}
            assert all(tuple(r) in rows for r in a.coords)


def test_build_is_deterministic(tmp_path):
    build_dataset(small_cfg(), tmp_path / "a")
    build_dataset(small_cfg(), tmp_path / "b")
    for name in ("train.aptds", "val.aptds", "test.aptds", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["n_samples"] == 20


def test_adaptive_dataset(tmp_path):
    build_dataset(small_cfg(mode="adaptive"), tmp_path)
    s = read_dataset(tmp_path / "train.aptds").samples[0]
    assert s.mesh_mode == "adaptive" and s.n_times == 3
