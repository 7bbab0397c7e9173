"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (also listed in the
terminal summary). Criteria 6-10 run the full preset pipelines through the CLI."""
import json
import time

import numpy as np
import pytest
from scipy import stats

from sfolab.adapters import attach
from sfolab.cli import main
from sfolab.config import TrainConfig
from sfolab.evalkit import AblationTable
from sfolab.flow import SamplerConfig, euler_sample
from sfolab.model import FieldLayout, VelocityField
from sfolab.numcore import RngStream
from sfolab.objectives import LN2, QuadBatch, delta, sfo_loss, sfo_value, sft_loss, softplus
from sfolab.schedule import TimestepDist, logit_moments, sample_t
from sfolab.trainer import TargetSet, pretrain_base

from _util import central_difference, grads_match, randomize_adapter, record, small_stack

LAYOUT = FieldLayout(2, 2, n_freq=1)


# -- shared experiment runs ------------------------------------------------

def _report(out, preset, seed, threads):
    t0 = time.perf_counter()
    rc = main(["report", "--preset", preset, "--seed", str(seed), "--threads", str(threads), "--out", str(out)])
    assert rc == 0, f"report {preset} exited {rc}"
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def cars_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cars-report")
    secs = _report(out, "toy-cars", 1, 1)
    return out, secs


@pytest.fixture(scope="module")
def world_runs(tmp_path_factory):
    runs = {}
    for threads in (1, 4):
        out = tmp_path_factory.mktemp(f"world-t{threads}")
        runs[threads] = (out, _report(out, "subject-world", 1, threads))
    return runs


def _fidelity(out):
    table = AblationTable.from_csv((out / "report.csv").read_text())
    assert all(r.status == "ok" for r in table.rows), [r.error for r in table.rows if r.status != "ok"]
    return {r.label: r.fidelity_mean for r in table.rows}


# -- 1 ---------------------------------------------------------------------

def test_c01_loss_at_init_is_ln2():
    t0 = time.perf_counter()
    base = randomize_adapter(attach(small_stack(LAYOUT, (16,)), "ref", 4, RngStream(1)), "ref", 2)
    worst = 0.0
    for b in range(100):
        stack = attach(base, "sfo", 4, RngStream(100 + b))
        r = RngStream(b, 7)
        n = 1 + int(r.integers(16))
        q = QuadBatch(r.normal((n, 2)), r.normal((n, 2)), r.normal((n, 2)), r.normal((n, 2)), r.uniform(n))
        out, _ = sfo_loss(stack, LAYOUT, q, beta=float(10 ** r.uniform() * 3))
        worst = max(worst, abs(out.value - LN2))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 1.0
    record(1, ok, f"max |loss - ln2| = {worst:.2e} over 100 batches (tol 1e-9), {secs:.2f}s (< 1s)")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_c02_gradients_match_finite_differences():
    t0 = time.perf_counter()
    stack = attach(small_stack(LAYOUT, (8,), seed=3), "ref", 2, RngStream(4))
    stack = randomize_adapter(attach(randomize_adapter(stack, "ref", 5), "sfo", 2, RngStream(6)), "sfo", 7)
    n_params = sum(v.size for v in stack.named_params().values())
    assert n_params <= 500
    r = RngStream(8)
    x, cond, eps, t = r.normal((6, 2)), r.normal((6, 2)), r.normal((6, 2)), r.uniform(6)
    quad = QuadBatch(x, r.normal((6, 2)), cond, eps, t)
    failures, checked = [], 0

    def sft(s):
        return sft_loss(s, LAYOUT, x, cond, t, eps, {"ref", "sfo"}, with_grads=False)[0]

    _, g = sft_loss(stack, LAYOUT, x, cond, t, eps, {"ref", "sfo"}, trainable={"base", "ref", "sfo"})
    for name, ga in g.items():
        checked += ga.size
        if not grads_match(ga, central_difference(sft, stack, name)):
            failures.append(f"sft:{name}")

    # The reference branch is a frozen constant of the pairwise loss, so the
    # finite difference perturbs only the policy branch.
    ref_out, _ = sfo_loss(stack, LAYOUT, quad, 2.0, with_grads=False)
    delta_ref = ref_out.delta_ref

    def sfo(s):
        d = delta(s, LAYOUT, {"ref", "sfo"}, quad.x_pos, quad.x_neg, quad.cond, quad.t, quad.eps)
        return float(np.mean(softplus(2.0 * (d - delta_ref))))

    _, g = sfo_loss(stack, LAYOUT, quad, 2.0, trainable=("base", "ref", "sfo"))
    for name, ga in g.items():
        checked += ga.size
        if not grads_match(ga, central_difference(sfo, stack, name)):
            failures.append(f"sfo:{name}")
    secs = time.perf_counter() - t0
    ok = not failures and secs < 30
    record(2, ok, f"{checked} gradient entries on a {n_params}-parameter net, mismatches: {failures or 'none'} "
                  f"(rel 1e-4, floor 1e-8), {secs:.1f}s (< 30s)")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_c03_scalar_oracle():
    v = sfo_value(0.1, 0.4, 0.2, 0.3, 1.0)
    want = float(np.log1p(np.exp(-0.2)))
    ok = abs(v - want) <= 1e-9 and abs(v - 0.598139) < 5e-7
    record(3, ok, f"loss = {v:.9f}, log(1+e^-0.2) = {want:.9f}")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_c04_sampler_statistics():
    t0 = time.perf_counter()
    ln = sample_t(TimestepDist.logit_normal(0.0, 1.0), RngStream(2024, 1), 100_000)
    m, s = logit_moments(ln)
    un = sample_t(TimestepDist.uniform(), RngStream(2024, 2), 100_000)
    p = stats.kstest(un, "uniform").pvalue
    secs = time.perf_counter() - t0
    ok = abs(m) <= 0.02 and abs(s - 1.0) <= 0.02 and p > 0.01 and secs < 5
    record(4, ok, f"logit mean err {abs(m):.4f}, std err {abs(s - 1):.4f} (<= 0.02); uniform KS p = {p:.3f} "
                  f"(> 0.01), {secs:.2f}s (< 5s)")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_c05_flow_sanity_on_gaussian():
    t0 = time.perf_counter()
    mean, sigma = np.array([1.5, -0.5]), 0.5
    data = mean + sigma * RngStream(7).normal((4000, 2))
    layout = FieldLayout(2, 1)
    cfg = TrainConfig.for_stage("pretrain", iterations=3000, batch_size=128, hidden_widths=[64, 64], seed=0,
                                cond_dropout_p=0.0, text_dropout_p=0.0)
    ck = pretrain_base(TargetSet(data, np.zeros((len(data), 1))), layout, cfg)
    x = euler_sample(VelocityField(ck.stack, layout), np.zeros((5000, 1)), SamplerConfig(50, 1.0), RngStream(11))
    secs = time.perf_counter() - t0
    dm, ds = np.abs(x.mean(0) - mean), np.abs(x.std(0) - sigma)
    ok = np.all(dm <= 0.1) and np.all(ds <= 0.1) and secs < 180
    record(5, ok, f"mean err {np.round(dm, 3).tolist()}, std err {np.round(ds, 3).tolist()} (<= 0.1), "
                  f"{secs:.1f}s (< 180s)")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_c06_toy_cars_comparative_beats_sft(cars_run):
    out, secs = cars_run
    table = AblationTable.from_csv((out / "report.csv").read_text())
    traj = json.loads((out / "trajectories.json").read_text())
    sft, comp = table["sft"].target_mode_ratio, table["comparative"].target_mode_ratio
    reach = traj["comparative_reaches_sft_final_at"]
    ok = comp >= sft + 0.10 and comp >= 0.90 and reach is not None and reach <= 400 and secs < 600
    record(6, ok, f"base {table['base'].target_mode_ratio:.3f}, SFT {sft:.3f}, comparative {comp:.3f} "
                  f"(need >= SFT + 0.10 and >= 0.90); comparative reaches SFT final at iteration {reach} "
                  f"(<= 400); {secs:.0f}s (< 600s)")
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_c07_cdns_gap_shift(world_runs):
    out, _ = world_runs[1]
    gaps = json.loads((out / "gap_stats.json").read_text())
    c, s = gaps["cdns"], gaps["selfplay"]
    ok = s["mean"] - c["mean"] >= 0.05 and c["mass_below_08"] > s["mass_below_08"]
    record(7, ok, f"mean pos-neg similarity CDNS {c['mean']:.4f} vs Self-Play {s['mean']:.4f} "
                  f"(need gap >= 0.05); pairs below 0.8: {c['mass_below_08']} vs {s['mass_below_08']}")
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_c08_ablation_ordering(world_runs):
    out, secs = world_runs[1]
    f = _fidelity(out)
    base = f["sft-base"]
    checks = {
        "CDNS > Self-Play + 0.02": f["cdns"] - f["selfplay"] >= 0.02,
        "Self-Play > SFT-base + 0.02": f["selfplay"] - base >= 0.02,
        "|DPO-sim - SFT-base| <= 0.02": abs(f["dpo-sim"] - base) <= 0.02,
        "|SFT-additional - SFT-base| <= 0.02": abs(f["sft-additional"] - base) <= 0.02,
        "grid < 30 min": secs < 1800,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(8, ok, "fidelity " + ", ".join(f"{k} {f[k]:.4f}" for k in ("cdns", "selfplay", "dpo-sim",
                                                                      "sft-additional", "sft-base"))
           + f"; grid {secs:.0f}s; failing: {failed or 'none'}")
    assert ok


# -- 9 ---------------------------------------------------------------------

def test_c09_timestep_ordering(world_runs):
    out, _ = world_runs[1]
    f = _fidelity(out)
    ln0, uni, m2, p2 = f["cdns"], f["ts-uniform"], f["ts-logit-normal-m2"], f["ts-logit-normal-p2"]
    checks = {"LN(0,1) >= uniform": ln0 >= uni, "LN(2,1) worst logit-normal": p2 < min(ln0, m2)}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(9, ok, f"fidelity LN(0,1) {ln0:.5f}, uniform {uni:.5f}, LN(-2,1) {m2:.5f}, LN(2,1) {p2:.5f}; "
                  f"failing: {failed or 'none'}")
    assert ok


# -- 10 --------------------------------------------------------------------

def test_c10_determinism_across_thread_counts(world_runs):
    (a, sa), (b, sb) = world_runs[1], world_runs[4]
    files = ["report.csv", "gap_stats.json"] + sorted(
        str(p.relative_to(a)) for p in (a / "metrics").glob("*.jsonl"))
    differ = [name for name in files if (a / name).read_bytes() != (b / name).read_bytes()]
    ok = not differ and len(files) > 10 and sa + sb < 3600
    record(10, ok, f"{len(files)} files compared between --threads 1 and --threads 4 runs, differing: "
                   f"{differ or 'none'}; {sa + sb:.0f}s total (< 3600s)")
    assert ok
