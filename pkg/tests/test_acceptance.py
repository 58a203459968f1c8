"""Acceptance criteria, one test per criterion at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line
per criterion. Paper-scale quality metrics are out of desk scope; these
are property-based and structural-ratio checks.
"""

import hashlib
import json
import time

import numpy as np
import pytest

from slimkit.bundle import TensorBundle, load_bundle, save_bundle
from slimkit.cli import main
from slimkit.slimset import (
    CoresetConfig,
    EmbeddingPool,
    allocate_bins,
    build_coreset,
    dedup,
    fps_sample,
    subspace_overlap,
)
from slimkit.pipeline import generate_toy_embeddings
from slimkit.verify import (
    check_allocation,
    check_cpqr_quality,
    check_ffn_closed_form,
    check_qk_bound,
    check_trq,
    check_vo_equality,
)


def report_line(name, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {status} [{name}] {detail}")
    assert passed, f"{name}: {detail}"


class TestTheoremSuites:
    def test_theorem3_vo_equality(self):
        start = time.monotonic()
        res = check_vo_equality(seeds=50)
        elapsed = time.monotonic() - start
        report_line(
            "theorem3-vo-equality",
            res.passed and elapsed < 10.0,
            f"{res.detail}; runtime {elapsed:.2f}s < 10s",
        )

    def test_theorem2_qk_bound(self):
        start = time.monotonic()
        res = check_qk_bound(seeds=50)
        elapsed = time.monotonic() - start
        report_line(
            "theorem2-qk-bound",
            res.passed and elapsed < 10.0,
            f"{res.detail}; runtime {elapsed:.2f}s < 10s",
        )

    def test_theorem1_ffn_closed_form(self):
        res = check_ffn_closed_form(seeds=50)
        report_line("theorem1-ffn-closed-form", res.passed, res.detail)

    def test_cpqr_quality(self):
        res = check_cpqr_quality(instances=100)
        report_line("cpqr-quality", res.passed, res.detail)

    def test_allocation(self):
        res = check_allocation(instances=25)
        report_line("allocation", res.passed, res.detail)

    def test_trq_invariances(self):
        res = check_trq(draws=1000)
        report_line("trq-invariances", res.passed, res.detail)


class TestEndToEndPipeline:
    def test_toy_pipeline(self, tmp_path):
        start = time.monotonic()
        work = tmp_path / "work"
        assert main(
            [
                "toy",
                "--seed", "7",
                "--blocks", "2",
                "--d", "16",
                "--heads", "2",
                "--d-int", "64",
                "--timesteps", "5",
                "--sequences", "6",
                "--tokens", "16",
                "--text-tokens", "8",
                "--embeddings", "50",
                "--out-dir", str(work),
            ]
        ) == 0
        assert main(
            [
                "calibrate",
                "--activations", str(work / "activations.bundle"),
                "--model", str(work / "model.bundle"),
                "--out", str(tmp_path / "stats.bundle"),
            ]
        ) == 0

        def compress(budget, tag):
            report = tmp_path / f"report_{tag}.json"
            rc = main(
                [
                    "compress",
                    "--model", str(work / "model.bundle"),
                    "--stats", str(tmp_path / "stats.bundle"),
                    "--budget", budget,
                    "--r-min", "2",
                    "--multiple", "2",
                    "--probes", str(work / "probes.bundle"),
                    "--out", str(tmp_path / f"ckpt_{tag}.bundle"),
                    "--report", str(report),
                ]
            )
            assert rc == 0, f"compress at {budget} failed"
            return json.loads(report.read_text())

        full = compress("1.0x", "full")
        identity_ok = full["output_deviation"] < 1e-6

        r73 = compress("0.73x", "73")
        budget_ok = r73["params_after"] <= 0.73 * r73["params_before"]

        dev75 = compress("0.75x", "75")["output_deviation"]
        dev25 = compress("0.25x", "25")["output_deviation"]
        monotone_ok = dev75 <= dev25

        elapsed = time.monotonic() - start
        report_line(
            "end-to-end-pipeline",
            identity_ok and budget_ok and monotone_ok and elapsed < 60.0,
            f"full-rank deviation {full['output_deviation']:.3e} < 1e-6; "
            f"0.73x params {r73['params_after']}/{r73['params_before']}; "
            f"deviation(75%)={dev75:.3e} <= deviation(25%)={dev25:.3e}; "
            f"runtime {elapsed:.1f}s < 60s",
        )


class TestSlimSetStability:
    def test_disjoint_coresets_share_subspace(self):
        emb = generate_toy_embeddings(seed=13, count=10000, dim=32)
        vecs = emb.get("embeddings").array.astype(np.float64)
        ids = emb.metadata["ids"]
        cfg = CoresetConfig(target_size=500, bins=8)
        index = {pid: i for i, pid in enumerate(ids)}
        covs = []
        for lo, hi in ((0, 5000), (5000, 10000)):
            pool = EmbeddingPool(ids[lo:hi], vecs[lo:hi])
            coreset = build_coreset(pool, cfg)
            rows = vecs[[index[p] for p in coreset.selected_ids]]
            covs.append(rows.T @ rows / len(rows))
        overlap = subspace_overlap(covs[0], covs[1], 8)
        report_line(
            "slimset-stability",
            overlap >= 0.95,
            f"top-8 subspace overlap {overlap:.4f} >= 0.95 "
            "(disjoint 500-point coresets from a 10k pool)",
        )

    def test_selection_invariants_on_seeded_pools(self):
        failures = []
        for trial in range(100):
            rng = np.random.default_rng([42, trial])
            n = int(rng.integers(40, 120))
            dim = int(rng.integers(6, 16))
            vecs = rng.normal(size=(n, dim))
            scores = rng.uniform(size=n)
            bins = int(rng.integers(1, 5))
            target = int(rng.integers(bins, max(bins + 1, n // 2)))
            score_map = {f"i{k}": float(scores[k]) for k in range(n)}
            members, quotas = allocate_bins(score_map, bins, target)
            if sum(quotas) != target:
                failures.append(f"trial {trial}: quota sum")
            quota = int(rng.integers(2, 6))
            sel = fps_sample(vecs[: max(quota, 10)], quota, scores[: max(quota, 10)])
            unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
            sub = unit[: max(quota, 10)]
            for step in range(1, len(sel)):
                prev = sel[:step]
                dist = lambda i: min(1.0 - float(sub[i] @ sub[j]) for j in prev)
                best = max(dist(i) for i in range(len(sub)) if i not in prev)
                if dist(sel[step]) < best - 1e-12:
                    failures.append(f"trial {trial}: fps step {step}")
                    break
            threshold = float(rng.uniform(0.5, 0.99))
            kept = dedup(vecs, list(range(n)), threshold)
            for a in range(len(kept)):
                for b in range(a + 1, len(kept)):
                    if float(unit[kept[a]] @ unit[kept[b]]) > threshold + 1e-12:
                        failures.append(f"trial {trial}: dedup pair")
        report_line(
            "slimset-invariants",
            not failures,
            "quota conservation, FPS greedy step, dedup soundness on 100 pools"
            + ("" if not failures else f"; failures: {failures[:3]}"),
        )


class TestBundleFormat:
    def test_thousand_round_trips_and_fixture(self, tmp_path):
        rng = np.random.default_rng(0)

        def dir_hash(path):
            h = hashlib.sha256()
            for p in sorted(path.rglob("*")):
                if p.is_file():
                    h.update(p.name.encode())
                    h.update(p.read_bytes())
            return h.hexdigest()

        mismatches = 0
        for i in range(1000):
            b = TensorBundle(metadata={"i": i})
            for j in range(int(rng.integers(0, 4))):
                shape = tuple(
                    int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 3)))
                )
                b.add(f"t{j}", rng.normal(size=shape))
            p1 = tmp_path / f"a{i}"
            p2 = tmp_path / f"b{i}"
            save_bundle(b, p1)
            save_bundle(load_bundle(p1), p2)
            if dir_hash(p1) != dir_hash(p2):
                mismatches += 1
        fixture = TensorBundle()
        fixture.add("one", np.array([1.0]))
        save_bundle(fixture, tmp_path / "fixture")
        raw = (tmp_path / "fixture" / "tensors" / "00000.bin").read_bytes()
        fixture_ok = raw == bytes([0x00, 0x00, 0x80, 0x3F])
        report_line(
            "bundle-format",
            mismatches == 0 and fixture_ok,
            f"1000 bundles byte-exact ({mismatches} mismatches); "
            f"1.0f32 encodes to 00 00 80 3F: {fixture_ok}",
        )
