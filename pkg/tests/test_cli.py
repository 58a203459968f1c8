"""CLI contract tests: subcommands, exit codes, determinism."""

import json
import os

import numpy as np
import pytest

from slimkit.bundle import load_bundle
from slimkit.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(
        [
            "toy",
            "--seed", "7",
            "--blocks", "2",
            "--d", "16",
            "--heads", "2",
            "--d-int", "64",
            "--timesteps", "4",
            "--sequences", "5",
            "--tokens", "16",
            "--text-tokens", "8",
            "--embeddings", "1200",
            "--out-dir", str(root / "work"),
        ]
    )
    assert rc == 0
    rc = main(
        [
            "calibrate",
            "--activations", str(root / "work" / "activations.bundle"),
            "--model", str(root / "work" / "model.bundle"),
            "--out", str(root / "stats.bundle"),
        ]
    )
    assert rc == 0
    return root


def alloc_flags():
    return ["--r-min", "2", "--multiple", "2"]


class TestToy:
    def test_bundles_exist(self, workspace):
        for name in ("model", "activations", "probes", "embeddings"):
            assert (workspace / "work" / f"{name}.bundle" / "manifest.json").is_file()


class TestSlimset:
    def test_default_size_five_hundred(self, workspace, tmp_path):
        out = tmp_path / "core.json"
        rc = main(
            [
                "slimset",
                "--embeddings", str(workspace / "work" / "embeddings.bundle"),
                "--size", "500",
                "--bins", "8",
                "--out", str(out),
            ]
        )
        assert rc == 0
        payload = json.loads(out.read_text())
        assert len(payload["selected_ids"]) == 500

    def test_size_exceeding_pool_exits_2(self, workspace, tmp_path):
        rc = main(
            [
                "slimset",
                "--embeddings", str(workspace / "work" / "embeddings.bundle"),
                "--size", "5000",
                "--out", str(tmp_path / "core.json"),
            ]
        )
        assert rc == 2

    def test_deterministic_output_bytes(self, workspace, tmp_path):
        outs = []
        for i in range(2):
            out = tmp_path / f"core{i}.json"
            main(
                [
                    "slimset",
                    "--embeddings", str(workspace / "work" / "embeddings.bundle"),
                    "--size", "200",
                    "--bins", "4",
                    "--out", str(out),
                ]
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestCalibrate:
    def test_stats_bundle_contents(self, workspace):
        stats = load_bundle(workspace / "stats.bundle")
        table = stats.metadata["trq_table"]
        # one row per (block, family, timestep): self 3x4, cross 4+1+4
        assert len(table) == 12 + 9
        assert any(name.startswith("cbar/") for name in stats.names())
        assert any(name.startswith("rbar/") for name in stats.names())

    def test_single_timestep_unit_weight(self, workspace, tmp_path):
        rc = main(
            [
                "toy",
                "--seed", "3",
                "--blocks", "1",
                "--d", "8",
                "--timesteps", "1",
                "--embeddings", "50",
                "--out-dir", str(tmp_path / "w"),
            ]
        )
        assert rc == 0
        rc = main(
            [
                "calibrate",
                "--activations", str(tmp_path / "w" / "activations.bundle"),
                "--model", str(tmp_path / "w" / "model.bundle"),
                "--out", str(tmp_path / "stats.bundle"),
            ]
        )
        assert rc == 0
        stats = load_bundle(tmp_path / "stats.bundle")
        rec = stats.get("cbar/block0/sa_input")
        assert rec.metadata["weights"] == {"0": 1.0}

    def test_weighting_flag_changes_mixture(self, workspace, tmp_path):
        for mode in ("uniform", "trq"):
            rc = main(
                [
                    "calibrate",
                    "--activations", str(workspace / "work" / "activations.bundle"),
                    "--model", str(workspace / "work" / "model.bundle"),
                    "--weighting", mode,
                    "--out", str(tmp_path / f"stats_{mode}.bundle"),
                ]
            )
            assert rc == 0
        uni = load_bundle(tmp_path / "stats_uniform.bundle")
        trq = load_bundle(tmp_path / "stats_trq.bundle")
        name = "cbar/block0/sa_input"
        assert not np.array_equal(uni.get(name).array, trq.get(name).array)


class TestAllocate:
    def test_full_budget_full_ranks(self, workspace, tmp_path):
        out = tmp_path / "plan.json"
        rc = main(
            [
                "allocate",
                "--model", str(workspace / "work" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "1.0x",
                *alloc_flags(),
                "--out", str(out),
            ]
        )
        assert rc == 0
        plan = json.loads(out.read_text())
        for blk in plan["blocks"]:
            assert blk["rank"] == blk["d_eff"]

    def test_plan_deterministic(self, workspace, tmp_path):
        blobs = []
        for i in range(2):
            out = tmp_path / f"plan{i}.json"
            main(
                [
                    "allocate",
                    "--model", str(workspace / "work" / "model.bundle"),
                    "--stats", str(workspace / "stats.bundle"),
                    "--budget", "0.73x",
                    *alloc_flags(),
                    "--out", str(out),
                ]
            )
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]


class TestCompress:
    def test_full_budget_identity(self, workspace, tmp_path):
        report = tmp_path / "report.json"
        rc = main(
            [
                "compress",
                "--model", str(workspace / "work" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "1.0x",
                *alloc_flags(),
                "--probes", str(workspace / "work" / "probes.bundle"),
                "--out", str(tmp_path / "ckpt.bundle"),
                "--report", str(report),
            ]
        )
        assert rc == 0
        payload = json.loads(report.read_text())
        assert payload["output_deviation"] < 1e-6

    def test_budget_ratio_respected(self, workspace, tmp_path):
        report = tmp_path / "report.json"
        rc = main(
            [
                "compress",
                "--model", str(workspace / "work" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "0.73x",
                *alloc_flags(),
                "--probes", str(workspace / "work" / "probes.bundle"),
                "--out", str(tmp_path / "ckpt.bundle"),
                "--report", str(report),
            ]
        )
        assert rc == 0
        payload = json.loads(report.read_text())
        full = payload["params_before"]
        assert payload["params_after"] <= 0.73 * full
        ckpt = load_bundle(tmp_path / "ckpt.bundle")
        assert ckpt.metadata["plan_hash"] == payload["plan_hash"]
        serialized = sum(ckpt.get(n).array.size for n in ckpt.names())
        assert serialized == payload["params_after"]
        rec = ckpt.get("block0.w_q")
        assert "achieved_rank" in rec.metadata and "family" in rec.metadata

    def test_missing_stats_kind_exits_3(self, workspace, tmp_path):
        # a larger model needs streams the stats bundle never saw
        rc = main(
            [
                "toy",
                "--seed", "7",
                "--blocks", "3",
                "--d", "16",
                "--d-int", "64",
                "--embeddings", "50",
                "--out-dir", str(tmp_path / "big"),
            ]
        )
        assert rc == 0
        rc = main(
            [
                "compress",
                "--model", str(tmp_path / "big" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "1.0x",
                *alloc_flags(),
                "--out", str(tmp_path / "ckpt.bundle"),
                "--report", str(tmp_path / "report.json"),
            ]
        )
        assert rc == 3

    def test_infeasible_budget_exits_4(self, workspace, tmp_path):
        rc = main(
            [
                "compress",
                "--model", str(workspace / "work" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "0.01x",
                *alloc_flags(),
                "--out", str(tmp_path / "ckpt.bundle"),
                "--report", str(tmp_path / "report.json"),
            ]
        )
        assert rc == 4

    def test_threads_env_same_output(self, workspace, tmp_path):
        blobs = []
        for i, threads in enumerate(("1", "4")):
            report = tmp_path / f"report{i}.json"
            os.environ["SLIMKIT_THREADS"] = threads
            try:
                rc = main(
                    [
                        "compress",
                        "--model", str(workspace / "work" / "model.bundle"),
                        "--stats", str(workspace / "stats.bundle"),
                        "--budget", "0.73x",
                        *alloc_flags(),
                        "--probes", str(workspace / "work" / "probes.bundle"),
                        "--out", str(tmp_path / f"ckpt{i}.bundle"),
                        "--report", str(report),
                    ]
                )
            finally:
                del os.environ["SLIMKIT_THREADS"]
            assert rc == 0
            blobs.append(report.read_bytes())
        assert blobs[0] == blobs[1]


class TestReport:
    def test_renders_metrics_and_figures(self, workspace, tmp_path):
        report = tmp_path / "report.json"
        main(
            [
                "compress",
                "--model", str(workspace / "work" / "model.bundle"),
                "--stats", str(workspace / "stats.bundle"),
                "--budget", "0.73x",
                *alloc_flags(),
                "--probes", str(workspace / "work" / "probes.bundle"),
                "--out", str(tmp_path / "ckpt.bundle"),
                "--report", str(report),
            ]
        )
        rc = main(
            [
                "report",
                "--report", str(report),
                "--stats", str(workspace / "stats.bundle"),
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "out" / "metrics.csv").is_file()
        assert (tmp_path / "out" / "trq.csv").is_file()
        for fig in ("errors.png", "retention.png", "trq_heatmap.png"):
            assert (tmp_path / "out" / "figures" / fig).stat().st_size > 0
        header = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("block_id,family")


class TestVerify:
    def test_passes(self):
        assert main(["verify", "--seeds", "3"]) == 0

    def test_break_whitening_fails(self):
        assert main(["verify", "--seeds", "3", "--break-whitening"]) == 1
