"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from oracles import brute_average_precision, brute_precision_at_k, monte_carlo_kl
from sketret import losses as L
from sketret.config import ExperimentConfig
from sketret.data import GeneratorSpec, generate_synthetic_dataset
from sketret.experiments import COMPONENT_ROWS, LOSS_ROWS, bundle_for_seed, run_seed
from sketret.model import GaussianLatent
from sketret.retrieval import average_precision, evaluate, precision_at_k
from sketret.tensorio import ChecksumError, encode_tensors, read_tensors
from sketret.theory import bound_report
from sketret.training import TrainConfig, finite_difference_audit, load_checkpoint, save_checkpoint, train

from test_retrieval import NULL_MAP_MEAN, NULL_MAP_STD

SEEDS = (0, 1, 2, 3, 4)
NULL_THRESHOLD = NULL_MAP_MEAN + 3 * NULL_MAP_STD
NO_GCN = next(r for r in COMPONENT_ROWS if r.label == "full w/o gcn")
NO_L2_L3 = "sem+tri+tskl+class"


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def experiment():
    return ExperimentConfig(seeds=SEEDS, modes=("zs", "gzs"))


@pytest.fixture(scope="module")
def runs(experiment):
    """Every ablation row plus the no-GCN model over the five default seeds."""
    out, timings = {}, {}
    for row in LOSS_ROWS + (NO_GCN,):
        for seed in SEEDS:
            start = time.perf_counter()
            out[row.label, seed] = run_seed(experiment, seed, row)
            timings[row.label, seed] = time.perf_counter() - start
    out["_timings"] = timings
    return out


def test_criterion_1_divergence_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, symmetric = 0.0, True
    for i in range(20):
        dim = int(rng.integers(1, 4))
        mu_p, mu_q = rng.normal(0, 1, dim), rng.normal(0, 1, dim)
        var_p, var_q = rng.uniform(0.5, 2.0, dim), rng.uniform(0.5, 2.0, dim)
        p = GaussianLatent.from_params(torch.tensor(mu_p), torch.log(torch.tensor(var_p)))
        q = GaussianLatent.from_params(torch.tensor(mu_q), torch.log(torch.tensor(var_q)))
        kl_pq = L.gaussian_kl(p, q).item()
        kl_qp = L.gaussian_kl(q, p).item()
        mc_pq = monte_carlo_kl(mu_p, var_p, mu_q, var_q, seed=i)
        mc_qp = monte_carlo_kl(mu_q, var_q, mu_p, var_p, seed=100 + i)
        skl = L.symmetric_kl(p, q).item()
        worst = max(worst, abs(kl_pq - mc_pq), abs(kl_qp - mc_qp), abs(skl - 0.5 * (mc_pq + mc_qp)))
        symmetric &= skl == L.symmetric_kl(q, p).item()
    elapsed = time.perf_counter() - start
    ok = worst < 1e-2 and symmetric and elapsed < 30
    record(1, "divergence oracle", ok,
           f"max |closed form - MC| = {worst:.2e} (< 1e-2), SKL exactly symmetric = {symmetric}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradient_audit():
    start = time.perf_counter()
    bundle = generate_synthetic_dataset(GeneratorSpec(seed=0))
    config = TrainConfig(terms=frozenset(L.TERMS), loss=L.LossConfig(enable_global_adversarial=True))
    errors = [finite_difference_audit(bundle, config, probes=24, seed=s).max_relative_error for s in range(3)]
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    record(2, "gradient audit", ok,
           f"max relative error per seed {[f'{e:.1e}' for e in errors]} (< 1e-4), {elapsed:.1f}s")
    assert ok


def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 300))
        rel = list(rng.integers(0, 2, size=n))
        if not any(rel):
            rel[int(rng.integers(n))] = 1
        k = int(rng.integers(1, 350))
        worst = max(worst,
                    abs(precision_at_k(rel, k) - brute_precision_at_k(rel, k)),
                    abs(average_precision(rel) - brute_average_precision(rel)),
                    abs(average_precision(rel, 200) - brute_average_precision(rel, 200)),
                    abs(average_precision(rel, k) - brute_average_precision(rel, k)))
    ok = worst <= 1e-12
    record(3, "metric oracle", ok, f"max deviation over 1000 lists = {worst:.1e} (<= 1e-12)")
    assert ok


@pytest.mark.slow
def test_criterion_4_end_to_end(runs):
    values = [runs["full", s].reports["zs"].map_all for s in SEEDS]
    wins = sum(v > NULL_THRESHOLD for v in values)
    slowest = max(runs["_timings"]["full", s] for s in SEEDS)
    ok = wins >= 4 and slowest < 300
    record(4, "end-to-end toy ZS retrieval", ok,
           f"map_all {[round(v, 3) for v in values]} vs null {NULL_THRESHOLD:.3f}: "
           f"{wins}/5 above (need >= 4), slowest run {slowest:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_ablation(runs):
    table = {}
    for row in LOSS_ROWS:
        values = [runs[row.label, s].reports["zs"].map_all for s in SEEDS]
        table[row.label] = (float(np.mean(values)), float(np.std(values)))
    print("\nloss ablation, ZS map_all over 5 seeds:")
    for label, (mean, std) in table.items():
        print(f"  {label:<32} {mean:.4f} ± {std:.4f}")
    full, base = table["full"][0], table["sem+tri"][0]
    ok = len(table) == 9 and full >= base
    record(5, "ablation ordering", ok, f"full {full:.4f} >= baseline {base:.4f} (9-row table printed)")
    assert ok


@pytest.mark.slow
def test_criterion_6_topology(runs):
    pairs = [(runs["full", s].topology, runs[NO_GCN.label, s].topology) for s in SEEDS]
    wins = sum(full > ablated for full, ablated in pairs)
    ok = wins >= 4
    record(6, "topology preservation", ok,
           f"(with GCN, zeroed GCN) {[(round(a, 3), round(b, 3)) for a, b in pairs]}: "
           f"GCN higher in {wins}/5 (need >= 4)")
    assert ok


@pytest.mark.slow
def test_criterion_7_theory(runs, experiment):
    reports = [bound_report(runs["full", s].checkpoint.params, bundle_for_seed(experiment, s), s) for s in SEEDS]
    passed = sum(r.ordering_holds for r in reports)
    ok = passed >= 4
    record(7, "divergence ordering", ok,
           f"d(a,p) <= d(a,n) in {passed}/5 (need >= 4); "
           f"(d_ap, d_an) {[(round(r.d_alpha_p, 3), round(r.d_alpha_n, 3)) for r in reports]}")
    assert ok


@pytest.mark.slow
def test_criterion_8_hubness(runs):
    conserved = True
    for key, result in runs.items():
        if key == "_timings":
            continue
        for report in result.reports.values():
            n_queries = 40 - len(report.skipped_queries)
            conserved &= sum(report.hubness.n_k.values()) == report.hubness.k * n_queries
    full = np.mean([runs["full", s].reports["zs"].hubness.skewness for s in SEEDS])
    ablated = np.mean([runs[NO_L2_L3, s].reports["zs"].hubness.skewness for s in SEEDS])
    record(8, "hubness conservation", conserved,
           f"sum N_k = k*|queries| on every run = {conserved}; mean ZS skewness full {full:.3f}, "
           f"without local_adv/recon {ablated:.3f} ({'lower' if full < ablated else 'not lower'} for full)")
    assert conserved


@pytest.mark.slow
def test_criterion_9_determinism(runs, experiment, tmp_path):
    bundle = bundle_for_seed(experiment, 0)
    _, config = experiment.run_seeds(0)
    again = train(bundle, config)
    first = runs["full", 0].checkpoint
    paths = [tmp_path / "a.bdas", tmp_path / "b.bdas"]
    save_checkpoint(first, paths[0])
    save_checkpoint(again, paths[1])
    same_ckpt = paths[0].read_bytes() == paths[1].read_bytes()
    same_json = (runs["full", 0].reports["zs"].to_json()
                 == evaluate(again.params, bundle, "ZS", experiment.hubness_k).to_json())

    loaded = load_checkpoint(paths[0])
    round_trip = (all(torch.equal(loaded.params[n], first.params[n]) for n in first.params)
                  and loaded.loss_history == first.loss_history
                  and loaded.train_config == first.train_config)
    blob = bytearray(paths[0].read_bytes())
    blob[100] ^= 0x10
    paths[0].write_bytes(bytes(blob))
    try:
        load_checkpoint(paths[0])
        crc_caught = False
    except ChecksumError:
        crc_caught = True
    ok = same_ckpt and same_json and round_trip and crc_caught
    record(9, "determinism and persistence", ok,
           f"bitwise checkpoint {same_ckpt}, identical metrics JSON {same_json}, "
           f"round trip {round_trip}, corruption detected {crc_caught}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
