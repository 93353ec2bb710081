import numpy as np
import pytest

import ensopt


def test_search_space_size():
    assert ensopt.search_space_size() == 34560
    specs = ensopt.stage_specs()
    assert [s["id"] for s in specs] == ["E1", "E2", "E3", "B", "D3", "D2", "D1", "R"]
    assert sum(len(s["surrogate_blocks"]) for s in specs) == 22
    codes = ensopt.enumerate_search_space()
    assert len(codes) == 34560
    assert len({tuple(c) for c in codes}) == 34560


def test_penalty_extremes_and_decode():
    all_teacher = [0] * 8
    smallest = [len(s["surrogate_blocks"]) for s in ensopt.stage_specs()]
    assert ensopt.penalty(all_teacher) == 132.0
    assert ensopt.penalty(smallest) == 16.0
    assert ensopt.decode([0.0] * 8) == all_teacher
    assert ensopt.decode([0.999] * 8) == smallest


def test_psnr_ssim():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.1, 0.9, size=(1, 3, 16, 16))
    assert ensopt.psnr(a, a) == 99.0
    assert ensopt.ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    noisy = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0.0, 1.0)
    assert 15.0 < ensopt.psnr(a, noisy) < 25.0


def test_generate_pairs_deterministic():
    p1 = ensopt.generate_pairs("denoise", 16, 2, split="val", seed=9)
    p2 = ensopt.generate_pairs("denoise", 16, 2, split="val", seed=9)
    assert len(p1) == 2
    for (d1, c1), (d2, c2) in zip(p1, p2):
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_array_equal(c1, c2)
        assert d1.shape == (1, 3, 16, 16)
        assert not np.array_equal(d1, c1)


def test_selective_scan_matches_recurrence():
    rng = np.random.default_rng(7)
    n, d, s, L = 1, 2, 3, 9
    x = rng.standard_normal((n, d, 1, L))
    delta = rng.uniform(0.05, 0.6, (n, d, 1, L))
    a_diag = -rng.uniform(0.1, 1.2, (d, s, 1, 1))
    b = rng.standard_normal((n, s, 1, L))
    c = rng.standard_normal((n, s, 1, L))
    y = ensopt.selective_scan(x, delta, a_diag, b, c)
    for di in range(d):
        h = np.zeros(s)
        for t in range(L):
            dt = delta[0, di, 0, t]
            h = np.exp(dt * a_diag[di, :, 0, 0]) * h + dt * b[0, :, 0, t] * x[0, di, 0, t]
            assert y[0, di, 0, t] == pytest.approx(np.dot(c[0, :, 0, t], h), abs=1e-12)


def test_pareto_hypervolume_knee_ehvi():
    pts = np.array([[1.0, 3.0], [1.5, 1.5], [3.0, 1.0], [2.5, 2.5], [1.0, 3.0]])
    assert ensopt.pareto_front(pts) == [0, 1, 2]
    assert ensopt.hypervolume(pts, 4.0, 4.0) == pytest.approx(7.25)
    assert ensopt.knee_point(pts) == 1

    # deterministic prediction: ehvi equals the direct hypervolume gain
    gain = ensopt.hypervolume(np.vstack([pts, [1.5, 1.5]]), 4.0, 4.0) - ensopt.hypervolume(
        pts, 4.0, 4.0
    )
    assert ensopt.ehvi(1.5, 0.0, 1.5, 0.0, pts, 4.0, 4.0) == pytest.approx(gain, abs=1e-12)


def test_halton_deterministic_unit_cube():
    a = ensopt.scrambled_halton(17, 8, 5)
    assert a == ensopt.scrambled_halton(17, 8, 5)
    assert a != ensopt.scrambled_halton(17, 8, 6)
    assert all(0.0 <= v < 1.0 for row in a for v in row)


def test_run_search_budget_and_determinism():
    def objective(code):
        f1 = sum((1.0 + 0.3 * i) * z * z for i, z in enumerate(code))
        return f1, ensopt.penalty(code)

    kwargs = dict(
        initial=7,
        budget=20,
        knee_candidates=3,
        candidates=128,
        perturbations=4,
        refit_interval=8,
        gp_restarts=1,
        nm_iters=30,
        seed=11,
    )
    r1 = ensopt.run_search(objective, **kwargs)
    r2 = ensopt.run_search(objective, **kwargs)
    assert len(r1["history"]) == 20
    assert [row["x"] for row in r1["history"]] == [row["x"] for row in r2["history"]]
    assert r1["knee_code"] == r2["knee_code"]
    front = r1["front_indices"]
    assert front and all(0 <= i < 20 for i in front)

    def boom(code):
        raise ValueError("objective exploded")

    with pytest.raises(RuntimeError, match="exploded"):
        ensopt.run_search(boom, **kwargs)


def test_objective_error_propagates_message():
    # degenerate inputs are rejected with clear errors
    with pytest.raises(Exception):
        ensopt.decode([0.5] * 7)
    with pytest.raises(Exception):
        ensopt.penalty([9] * 8)
