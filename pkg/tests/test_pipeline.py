"""Orchestration tests: calibration, allocation wiring, compression, report."""

import numpy as np
import pytest

from slimkit.bundle import TensorBundle, load_bundle, save_bundle
from slimkit.calib import InputKind, MixedCorrelation
from slimkit.errors import MissingStatistics, PlanMismatch
from slimkit.linalg import nystrom_residual
from slimkit.model import TEXT_LAYER_ID, forward, make_toy_model
from slimkit.pipeline import (
    allocate,
    block_scores_from_table,
    calibrate,
    compress_model,
    generate_probes,
    generate_toy_activations,
    generate_toy_embeddings,
    mixed_from_stats_bundle,
    resolve_budget,
    stats_to_bundle,
    trq_table_from_bundle,
)


@pytest.fixture(scope="module")
def setup():
    model = make_toy_model(seed=11, blocks=2, d=16, heads=2, d_int=48)
    acts = generate_toy_activations(
        model, seed=11, timesteps=3, sequences=5, tokens=18, text_tokens=9
    )
    cal = calibrate(acts, model)
    probes = generate_probes(model, seed=11, count=3, tokens=18, text_tokens=9)
    return model, acts, cal, probes


class TestCalibrate:
    def test_trq_row_count(self, setup):
        model, acts, cal, _ = setup
        # self block: 3 families x 3 timesteps; cross block: qk x3 + vo x1
        # (time-invariant text) + ffn x3
        assert len(cal.trq_rows) == 9 + 7

    def test_stream_weights_convex(self, setup):
        _, _, cal, _ = setup
        for (layer, kind), mixed in cal.mixed.items():
            total = sum(mixed.weights.values())
            assert total == pytest.approx(1.0, abs=1e-12)
            assert all(w >= 0.0 for w in mixed.weights.values())

    def test_text_single_invariant_stat(self, setup):
        _, _, cal, _ = setup
        mixed = cal.mixed[(TEXT_LAYER_ID, InputKind.TEXT_TOKENS)]
        assert mixed.weights == {-1: 1.0}

    def test_chunk_order_and_granularity_invariance(self, setup):
        model, acts, cal, _ = setup
        # re-chunk: concatenate all records of each stream into one record
        merged = TensorBundle(metadata=acts.metadata)
        groups = {}
        for name in acts.names():
            rec = acts.get(name)
            key = (
                rec.metadata["layer_id"],
                rec.metadata["input_kind"],
                rec.metadata["timestep"],
            )
            groups.setdefault(key, []).append(rec.array.astype(np.float64))
        for (layer, kind, t), parts in sorted(groups.items()):
            whole = np.vstack(parts)
            merged.add(
                f"act/{layer}/{kind}/t{t}",
                whole,
                metadata={
                    "layer_id": layer,
                    "input_kind": kind,
                    "timestep": t,
                    "samples": int(whole.shape[0]),
                },
            )
        cal2 = calibrate(merged, model)
        for key, mixed in cal.mixed.items():
            rel = np.linalg.norm(
                mixed.c_bar - cal2.mixed[key].c_bar, "fro"
            ) / np.linalg.norm(mixed.c_bar, "fro")
            assert rel < 1e-9

    def test_weighting_strategies_differ(self, setup):
        model, acts, _, _ = setup
        uni = calibrate(acts, model, strategy="uniform")
        trq = calibrate(acts, model, strategy="trq_proportional")
        key = ("block0", InputKind.SA_INPUT)
        assert uni.mixed[key].weights != trq.mixed[key].weights

    def test_stats_bundle_round_trip(self, setup, tmp_path):
        model, _, cal, _ = setup
        save_bundle(stats_to_bundle(cal), tmp_path / "stats")
        loaded = load_bundle(tmp_path / "stats")
        mixed = mixed_from_stats_bundle(loaded)
        assert set(mixed) == set(cal.mixed)
        for key in mixed:
            rel = np.linalg.norm(
                mixed[key].c_bar - cal.mixed[key].c_bar, "fro"
            ) / np.linalg.norm(cal.mixed[key].c_bar, "fro")
            assert rel < 1e-6  # f32 storage rounding only
        table = trq_table_from_bundle(loaded)
        assert block_scores_from_table(table) == cal.block_scores()


class TestAllocateAndCompress:
    def test_full_budget_identity(self, setup):
        model, _, cal, probes = setup
        plan = allocate(
            model,
            cal.block_scores(),
            budget=float(model.param_count()),
            r_min=2,
            rounding_multiple=2,
        )
        compressed, report = compress_model(model, cal.mixed, plan, probes=probes)
        assert report.params_after == model.param_count()
        assert report.output_deviation < 1e-6

    def test_budget_respected_and_monotone_deviation(self, setup):
        model, _, cal, probes = setup
        scores = cal.block_scores()
        devs = {}
        for ratio in (0.75, 0.25):
            plan = allocate(
                model,
                scores,
                budget=ratio * model.param_count(),
                r_min=2,
                rounding_multiple=2,
            )
            _, report = compress_model(model, cal.mixed, plan, probes=probes)
            assert report.params_after <= ratio * model.param_count()
            devs[ratio] = report.output_deviation
        assert devs[0.75] <= devs[0.25]

    def test_source_model_not_mutated(self, setup):
        model, _, cal, _ = setup
        before = [b.qk.w_q.copy() for b in model.blocks]
        plan = allocate(
            model,
            cal.block_scores(),
            budget=0.6 * model.param_count(),
            r_min=2,
            rounding_multiple=2,
        )
        compress_model(model, cal.mixed, plan)
        for blk, w in zip(model.blocks, before):
            np.testing.assert_array_equal(blk.qk.w_q, w)

    def test_workers_do_not_change_results(self, setup):
        model, _, cal, probes = setup
        plan = allocate(
            model,
            cal.block_scores(),
            budget=0.6 * model.param_count(),
            r_min=2,
            rounding_multiple=2,
        )
        comp1, rep1 = compress_model(model, cal.mixed, plan, probes=probes, workers=1)
        comp4, rep4 = compress_model(model, cal.mixed, plan, probes=probes, workers=4)
        assert rep1.to_dict() == rep4.to_dict()
        for b1, b4 in zip(comp1.blocks, comp4.blocks):
            np.testing.assert_array_equal(b1.ffn.w_d, b4.ffn.w_d)

    def test_missing_statistics(self, setup):
        model, _, cal, _ = setup
        plan = allocate(
            model,
            cal.block_scores(),
            budget=float(model.param_count()),
            r_min=2,
            rounding_multiple=2,
        )
        broken = dict(cal.mixed)
        del broken[("block1", InputKind.CA_QUERY_INPUT)]
        with pytest.raises(MissingStatistics, match="ca_query_input"):
            compress_model(model, broken, plan)

    def test_plan_mismatch(self, setup):
        model, _, cal, _ = setup
        plan = allocate(
            model,
            cal.block_scores(),
            budget=float(model.param_count()),
            r_min=2,
            rounding_multiple=2,
        )
        plan.blocks = [b for b in plan.blocks if b.block_id != "block1.ffn"]
        with pytest.raises(PlanMismatch, match="block1.ffn"):
            compress_model(model, cal.mixed, plan)

    def test_report_totals_consistent(self, setup):
        model, _, cal, probes = setup
        plan = allocate(
            model,
            cal.block_scores(),
            budget=0.7 * model.param_count(),
            r_min=2,
            rounding_multiple=2,
        )
        compressed, report = compress_model(model, cal.mixed, plan, probes=probes)
        assert sum(r.params_before for r in report.rows) == report.params_before
        assert sum(r.params_after for r in report.rows) == report.params_after
        assert report.params_after == compressed.param_count()
        from slimkit.model import model_to_bundle

        bundle = model_to_bundle(compressed)
        serialized = sum(bundle.get(n).array.size for n in bundle.names())
        assert serialized == report.params_after
        assert all(r.measured_loss is not None for r in report.rows)

    def test_half_rank_losses_within_theorem_bounds(self, setup):
        # with whitening statistics computed exactly from the evaluation
        # batch, measured losses must hit the spectral predictions
        model, _, _, _ = setup
        probes = generate_probes(model, seed=99, count=1, tokens=40, text_tokens=20)
        _, taps = forward(
            model,
            probes.array("probe0/latent"),
            probes.array("probe0/text"),
            int(probes.get("probe0/latent").metadata["timestep"]),
            return_taps=True,
        )
        mixed = {}
        for (layer, kind), batch in taps.items():
            mixed[(layer, kind)] = MixedCorrelation.from_matrix(
                batch.T @ batch, layer_id=layer
            )
        scores = {(b.block_id, fam): 0.5 for b in model.blocks for fam in ("qk", "vo", "ffn")}
        plan = allocate(
            model,
            scores,
            budget=0.55 * model.param_count(),
            r_min=2,
            rounding_multiple=2,
        )
        _, report = compress_model(model, mixed, plan, probes=probes)
        rows = {(r.block_id, r.family): r for r in report.rows}
        for blk in model.blocks:
            qk_row = rows[(blk.block_id, "qk")]
            assert qk_row.measured_loss <= qk_row.predicted_error * (1 + 1e-6) + 1e-12
            vo_row = rows[(blk.block_id, "vo")]
            if vo_row.rank < blk.vo.head_dim:
                assert vo_row.measured_loss == pytest.approx(
                    vo_row.predicted_error, rel=1e-6
                )
            ffn_row = rows[(blk.block_id, "ffn")]
            kind = InputKind.FFN_INTERMEDIATE
            k_mat = mixed[(blk.block_id, kind)].c_bar
            bound = (
                np.linalg.norm(blk.ffn.w_d, 2) ** 2
                * np.linalg.norm(np.linalg.inv(k_mat), 2)
                * ffn_row.predicted_error**2
            )
            assert ffn_row.measured_loss <= bound + 1e-8


class TestHelpers:
    def test_resolve_budget(self):
        assert resolve_budget("0.73x", 1000.0) == pytest.approx(730.0)
        assert resolve_budget("500", 1000.0) == 500.0
        assert resolve_budget(250.0, 1000.0) == 250.0

    def test_embeddings_bundle(self):
        b = generate_toy_embeddings(seed=1, count=100, dim=16)
        assert b.get("embeddings").array.shape == (100, 16)
        assert len(b.metadata["ids"]) == 100
