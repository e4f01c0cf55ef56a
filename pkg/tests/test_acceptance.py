"""The ten acceptance criteria at their stated tolerances; each prints a verdict line."""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from _acceptance import record
from dualpark.autodiff import Tensor
from dualpark.autodiff.gradcheck import check_gradients, gradient_cases
from dualpark.camera import Camera, CameraRig, look_rotation
from dualpark.control import ControllerConfig, EgoPose, VehicleState, bicycle_step, simulate_parking
from dualpark.dataset import generate_dataset, reorganize
from dualpark.encoder import EncoderConfig, lift_splat, splat_indices, splat_matrix
from dualpark.experiments import BenchmarkConfig, OverfitConfig, ordering_checks, run_benchmark, run_overfit
from dualpark.maps import GridSpec, gaussian_map_tensor
from dualpark.metrics import fourier_descriptor, hausdorff, l2_distance, resample
from dualpark.model import DecoderConfig, ModelConfig, ParkingModel, variant_config
from dualpark.synth import bay_scenario, plan_expert
from dualpark.tokenizer import deserialize, roundtrip_bound, serialize
from dualpark.training import TrainConfig, train
from oracles import brute_hausdorff, brute_l2, direct_dft_magnitudes, oracle_cell

RESULTS_DIR = Path(__file__).resolve().parents[1] / "results"


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    cases = gradient_cases()
    for name, build in cases.items():
        for seed in range(20):
            fn, inputs = build(np.random.default_rng(seed))
            err = check_gradients(fn, inputs, h=1e-5)
            if err > worst:
                worst, worst_name = err, name
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and secs < 60
    record(1, "gradient suite", ok, f"{len(cases)} ops x 20 draws, max rel err {worst:.2e} ({worst_name}), {secs:.1f} s")
    assert ok


def test_c2_tokenizer():
    rng = np.random.default_rng(0)
    r, n = 10.0, 1200
    pts = rng.uniform(-r, r, size=10_000)
    err = max(abs(deserialize(serialize(p, r, n), r, n) - p) for p in pts)
    pairs = np.sort(rng.uniform(-r, r, size=(10_000, 2)), axis=1)
    mono = all(serialize(a, r, n) <= serialize(b, r, n) for a, b in pairs)
    bound = 2 * r / n
    ok = err <= bound and mono and roundtrip_bound(r, n) == pytest.approx(0.0167, abs=5e-5)
    record(2, "tokenizer", ok, f"max round-trip err {err:.5f} m <= {bound:.5f} m, monotone over 10^4 pairs: {mono}")
    assert ok


def test_c3_map_normalization():
    grid = GridSpec()
    rng = np.random.default_rng(0)
    centers = rng.uniform(-5, 104, size=(1000, 2))
    sigmas = rng.uniform(0.5, 10.0, size=1000)
    worst = 0.0
    for s in np.unique(np.round(sigmas, 1)):
        sel = np.round(sigmas, 1) == s
        sums = gaussian_map_tensor(Tensor(centers[sel]), float(s), grid)[0].data.sum(axis=(-1, -2))
        worst = max(worst, float(np.abs(sums - 1).max()))
    ok = worst <= 1e-6
    record(3, "map normalization", ok, f"1000 maps, max |sum - 1| = {worst:.1e}")
    assert ok


CAUSAL_CFG = ModelConfig(grid_cells=20, half_range=10.0, n_tokens=200, horizon=10,
                         encoder=EncoderConfig(bev_channels=8, downsample=2),
                         decoder=DecoderConfig(d_model=32, heads=4, layers=2, ffn_hidden=64))


def test_c4_causality():
    model = ParkingModel(CAUSAL_CFG)
    tok = CAUSAL_CFG.tokenizer
    rng = np.random.default_rng(0)
    enc = model.encode(rng.uniform(size=(2, 2, 20, 20)), rng.uniform(-5, 5, size=(2, 2)))
    steps = tok.horizon + 1
    tx = rng.integers(0, tok.n_tokens, size=(2, steps))
    ty = rng.integers(0, tok.n_tokens, size=(2, steps))
    tx[:, 0] = ty[:, 0] = tok.bos
    base = model.forward(enc, tx, ty)
    worst, seen = 0.0, set()
    for i in range(50):
        cut = 1 + i % 9  # pairs >= cut change, steps t = 0..cut-1 <= 8 are checked
        px, py = tx.copy(), ty.copy()
        px[:, cut:] = (px[:, cut:] + rng.integers(1, tok.n_tokens, size=px[:, cut:].shape)) % tok.n_tokens
        py[:, cut:] = (py[:, cut:] + rng.integers(1, tok.n_tokens, size=py[:, cut:].shape)) % tok.n_tokens
        out = model.forward(enc, px, py)
        for new, ref in ((out.x_logits, base.x_logits), (out.y_logits, base.y_logits)):
            worst = max(worst, float(np.abs(new.data[:, :cut] - ref.data[:, :cut]).max()))
        seen.update(range(cut))
    ok = worst <= 1e-9 and seen == set(range(9))
    record(4, "causality", ok, f"50 perturbations, steps 0..8 covered, max earlier-logit change {worst:.1e}")
    assert ok


TOY_CFG = ModelConfig(grid_cells=16, half_range=8.0, n_tokens=64, horizon=5,
                      encoder=EncoderConfig(bev_channels=4, downsample=2),
                      decoder=DecoderConfig(d_model=16, heads=2, layers=1, ffn_hidden=32))


def _y_history_sensitivity(model, rng) -> float:
    tok = model.cfg.tokenizer
    enc = model.encode(rng.uniform(size=(1, 2, 16, 16)), rng.uniform(-4, 4, size=(1, 2)))
    worst = 0.0
    for _ in range(20):
        tx = rng.integers(0, tok.n_tokens, size=(1, tok.horizon + 1))
        ty = rng.integers(0, tok.n_tokens, size=(1, tok.horizon + 1))
        tx[:, 0] = ty[:, 0] = tok.bos
        base = model.forward(enc, tx, ty).x_logits.data
        for t in range(2, tok.horizon + 1):
            py = ty.copy()
            py[:, 1:t] = (py[:, 1:t] + rng.integers(1, tok.n_tokens, size=t - 1)) % tok.n_tokens
            new = model.forward(enc, tx, py).x_logits.data
            worst = max(worst, float(np.abs(new[:, t] - base[:, t]).max()))
    return worst


def test_c5_coupling():
    grid = TOY_CFG.grid
    samples = reorganize(generate_dataset(4, 9, grid=grid), TOY_CFG.horizon, grid, 2.0)
    tc = TrainConfig(steps=500, batch_size=8, lr=2e-3, log_every=100)
    # both variants keep the refinement head off: it reads hx and hy jointly by design
    on = train(samples, variant_config(TOY_CFG, "Decoder-Gaussian-Dual"), tc).model
    off = train(samples, variant_config(TOY_CFG, "Decoder-Gaussian"), tc).model
    d_on = _y_history_sensitivity(on, np.random.default_rng(1))
    d_off = _y_history_sensitivity(off, np.random.default_rng(1))
    ok = d_on > 1e-6 and d_off == 0.0
    record(5, "coupling", ok, f"max x-logit change under y-history perturbation: ON {d_on:.2e}, OFF {d_off:.1e}")
    assert ok


def test_c6_overfit():
    with threadpool_limits(1):
        res = run_overfit(OverfitConfig())
    ok = (res.final_loss < 0.05 and res.steps <= 2000 and res.seconds < 300 and res.lengths_match
          and res.max_point_error <= res.bin_width)
    record(6, "overfit", ok, f"loss {res.final_loss:.4f} at step {res.steps} in {res.seconds:.0f} s; "
                             f"max decode err {res.max_point_error:.4f} m (bin {res.bin_width:.4f} m)")
    assert ok


def test_c7_metrics_oracle():
    rng = np.random.default_rng(7)
    exact, worst_dft = True, 0.0
    for _ in range(100):
        a = rng.uniform(-10, 10, size=(rng.integers(2, 40), 2))
        b = rng.uniform(-10, 10, size=(rng.integers(2, 40), 2))
        exact &= hausdorff(a, b) == brute_hausdorff(a, b)
        exact &= l2_distance(a, b) == brute_l2(a, b)
        worst_dft = max(worst_dft, float(np.abs(fourier_descriptor(a) - direct_dft_magnitudes(resample(a))).max()))
    ok = exact and worst_dft <= 1e-9
    record(7, "metrics oracle", ok, f"100 pairs exact: {exact}; max DFT deviation {worst_dft:.1e}")
    assert ok


def test_c8_lift_splat_geometry():
    grid = GridSpec()
    depths = EncoderConfig().depth_centers()
    rng = np.random.default_rng(8)
    exact, on_grid = True, 0
    for _ in range(100):
        f = rng.uniform(15, 40)
        rot = look_rotation(rng.uniform(-math.pi, math.pi), rng.uniform(0.2, 1.2))
        cam = Camera("c", f, f, rng.uniform(10, 20), rng.uniform(10, 20), 32, 32, rot,
                     [rng.uniform(-2, 3), rng.uniform(-1, 1), rng.uniform(0.5, 2.5)])
        idx = splat_indices(CameraRig([cam]), 8, 8, depths, grid)
        u, v, b = rng.integers(0, 8), rng.integers(0, 8), rng.integers(0, len(depths))
        cell = oracle_cell(cam, 8, 8, u, v, depths[b], grid)
        expect = -1 if cell is None else cell[0] * grid.width + cell[1]
        on_grid += cell is not None
        exact &= idx[0, v * 8 + u, b] == expect
    rig = CameraRig.surround()
    idx = splat_indices(rig, 8, 8, depths, grid)
    logits = rng.normal(size=(1, 4, len(depths), 8, 8))
    bev = lift_splat(np.ones((1, 4, 1, 8, 8)), logits, splat_matrix(idx, grid), grid).data
    prob = np.exp(logits - logits.max(axis=2, keepdims=True))
    prob /= prob.sum(axis=2, keepdims=True)
    mask = (idx >= 0).reshape(4, 8, 8, len(depths)).transpose(0, 3, 1, 2)
    mass_err = abs(bev.sum() - prob[0][mask].sum())
    ok = bool(exact) and mass_err <= 1e-9
    record(8, "lift-splat geometry", ok, f"100 draws exact: {bool(exact)} ({on_grid} on grid); "
                                         f"mass error {mass_err:.1e}")
    assert ok


@pytest.mark.benchmark
def test_c9_directional_ablation():
    RESULTS_DIR.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(1):
        rows = run_benchmark(BenchmarkConfig(), out_csv=RESULTS_DIR / "ablation.csv",
                             log=lambda s: print(s, flush=True))
    secs = time.perf_counter() - t0
    checks = ordering_checks(rows)
    held = sum(ok for _, ok, _, _ in checks)
    claims = "; ".join(f"{c} {'holds' if ok else 'violated'} ({a:.4f} vs {b:.4f})" for c, ok, a, b in checks)
    ok = held == len(checks)
    record(9, "directional ablation (soft)", ok, f"{held}/{len(checks)} orderings in {secs / 60:.0f} min: {claims}")
    # ordering is a finding, not a gate; the run itself must finish in budget with finite metrics
    assert secs < 7200
    assert all(np.isfinite([r["l2_m"], r["hausdorff_m"], r["fourier_diff"]]).all() for r in rows)


def test_c10_closed_loop():
    traj = plan_expert(bay_scenario())
    res = simulate_parking(traj.xy)
    cfg = ControllerConfig(dt=0.001)
    steer = 0.3
    state = VehicleState(EgoPose(), 1.0, steer)
    pts = []
    expect = cfg.wheelbase / math.tan(steer)
    for _ in range(int(2 * math.pi * expect / cfg.dt)):
        state = bicycle_step(state, 0.0, 0.0, cfg)
        pts.append((state.pose.x, state.pose.y))
    xy = np.array(pts)
    a = np.column_stack([xy, np.ones(len(xy))])
    sol, *_ = np.linalg.lstsq(a, (xy**2).sum(axis=1), rcond=None)
    radius = math.sqrt(sol[2] + (sol[0] / 2) ** 2 + (sol[1] / 2) ** 2)
    rel = abs(radius - expect) / expect
    ok = res.converged and res.position_error <= 0.15 and math.degrees(res.heading_error) <= 5 and rel < 0.01
    record(10, "closed loop", ok, f"bay park {res.position_error:.3f} m / {math.degrees(res.heading_error):.2f} deg; "
                                  f"circle radius {radius:.3f} m vs {expect:.3f} m ({rel:.2%})")
    assert ok
