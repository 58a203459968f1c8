"""Pipeline orchestration: calibrate, score, allocate, compress, report.

Ties the toy network (or any weights bundle) to the calibration,
allocation, and decomposition modules through TensorBundle files, and
produces the compression report consumed by the `report` command.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import calib, madac
from .alloc import AllocationPlan, AllocationProblem, BlockProfile, bisect_budget
from .bundle import TensorBundle
from .calib import InputKind, MixedCorrelation, RegularizedCorrelation
from .errors import ManifestError, MissingStatistics, PlanMismatch
from .model import TEXT_LAYER_ID, Block, ModelGraph, forward, substream

FAMILY_SUFFIXES = ("qk", "vo", "ffn")


# ---------------------------------------------------------------------------
# toy data generation


def _structured_rows(rng, n, dim, basis):
    return rng.normal(size=(n, basis.shape[1])) @ basis.T


def _signal_basis(seed: int, name: str, dim: int):
    rank = max(1, dim // 4)
    rng = substream(seed, name)
    return rng.normal(size=(dim, rank)) / math.sqrt(rank)


def generate_toy_activations(
    model: ModelGraph,
    seed: int,
    timesteps: int = 5,
    sequences: int = 8,
    tokens: int = 16,
    text_tokens: int = 8,
) -> TensorBundle:
    """Run the toy model over a noise-to-signal schedule and tap activations.

    Timestep t mixes sqrt(nu)*noise + sqrt(1-nu)*signal with nu = 1 - t/T,
    so early steps are near-isotropic and late steps anisotropic. Text
    inputs vary per sequence but not per timestep and are tapped once.
    One record is written per (layer, kind, timestep, sequence) chunk.
    """
    basis = _signal_basis(seed, "signal-basis", model.d_model)
    text_basis = _signal_basis(seed, "text-basis", model.d_text)
    rng_noise = substream(seed, "calib-noise")
    rng_signal = substream(seed, "calib-signal")
    rng_text = substream(seed, "calib-text")
    bundle = TensorBundle(
        metadata={
            "kind": "activations",
            "timesteps": timesteps,
            "sequences": sequences,
        }
    )
    # text rows carry a small isotropic component so their second moment
    # stays full-rank (prompts are never perfectly low-rank)
    texts = [
        _structured_rows(rng_text, text_tokens, model.d_text, text_basis)
        + 0.3 * rng_text.normal(size=(text_tokens, model.d_text))
        for _ in range(sequences)
    ]
    for t in range(timesteps):
        nu = 1.0 - t / timesteps
        for s in range(sequences):
            noise = rng_noise.normal(size=(tokens, model.d_model))
            signal = _structured_rows(rng_signal, tokens, model.d_model, basis)
            latent = math.sqrt(nu) * noise + math.sqrt(1.0 - nu) * signal
            _, taps = forward(model, latent, texts[s], timestep=t, return_taps=True)
            for (layer_id, kind), batch in taps.items():
                if kind is InputKind.TEXT_TOKENS:
                    if t != 0:
                        continue  # time-invariant: exported once
                    tstep = calib.TIME_INVARIANT
                else:
                    tstep = t
                bundle.add(
                    f"act/{layer_id}/{kind.value}/t{tstep}/s{s}",
                    batch,
                    metadata={
                        "layer_id": layer_id,
                        "timestep": tstep,
                        "input_kind": kind.value,
                        "samples": int(batch.shape[0]),
                    },
                )
    return bundle


def generate_probes(
    model: ModelGraph,
    seed: int,
    count: int = 4,
    tokens: int = 16,
    text_tokens: int = 8,
    timesteps: int = 5,
) -> TensorBundle:
    """Held-out (latent, text, timestep) batches for report evaluation."""
    basis = _signal_basis(seed, "signal-basis", model.d_model)
    text_basis = _signal_basis(seed, "text-basis", model.d_text)
    rng = substream(seed, "probes")
    bundle = TensorBundle(metadata={"kind": "probes", "count": count})
    for i in range(count):
        t = int(rng.integers(0, timesteps))
        nu = 1.0 - t / timesteps
        latent = math.sqrt(nu) * rng.normal(size=(tokens, model.d_model)) + math.sqrt(
            1.0 - nu
        ) * _structured_rows(rng, tokens, model.d_model, basis)
        text = _structured_rows(rng, text_tokens, model.d_text, text_basis) + 0.3 * rng.normal(
            size=(text_tokens, model.d_text)
        )
        bundle.add(f"probe{i}/latent", latent, metadata={"timestep": t})
        bundle.add(f"probe{i}/text", text, metadata={"timestep": t})
    return bundle


def generate_toy_embeddings(seed: int, count: int = 2000, dim: int = 32) -> TensorBundle:
    """Synthetic anisotropic prompt embeddings with ids.

    The planted covariance has dim/4 strong directions over a weak tail, so
    disjoint subsamples share a stable dominant subspace while pairwise
    cosines stay spread out.
    """
    rng = substream(seed, "embeddings")
    strong = max(1, dim // 4)
    w = np.concatenate(
        [np.geomspace(1.0, 0.3, strong), np.geomspace(0.05, 0.01, dim - strong)]
    )
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    root = (q * np.sqrt(w)) @ q.T
    vectors = rng.normal(size=(count, dim)) @ root
    ids = [f"prompt-{i:05d}" for i in range(count)]
    bundle = TensorBundle(metadata={"kind": "embeddings", "ids": ids})
    bundle.add("embeddings", vectors)
    return bundle


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    """Finalized per-(layer, kind, timestep) statistics plus mixtures."""

    stats: dict[tuple[str, InputKind, int], RegularizedCorrelation]
    samples: dict[tuple[str, InputKind, int], int]
    mixed: dict[tuple[str, InputKind], MixedCorrelation]
    trq_rows: list[dict] = field(default_factory=list)
    lam: float = 1e-4
    strategy: str = "trq_proportional"
    tau: float = 1.0

    def block_scores(self) -> dict[tuple[str, str], float]:
        """Per-(block, family) influence: mean TRQ across timesteps."""
        acc: dict[tuple[str, str], list[float]] = {}
        for row in self.trq_rows:
            acc.setdefault((row["block"], row["family"]), []).append(row["trq"])
        return {key: float(np.mean(v)) for key, v in acc.items()}


def _consumer_weights(block: Block, kind: InputKind) -> np.ndarray:
    """Concatenation of the projections reading a given input stream; used
    to score timesteps when several families share one correlation."""
    if kind is InputKind.SA_INPUT:
        return np.hstack([block.qk.w_q, block.qk.w_k, block.vo.w_v])
    if kind is InputKind.CA_QUERY_INPUT:
        return block.qk.w_q
    if kind is InputKind.FFN_INTERMEDIATE:
        return block.ffn.w_d
    raise ManifestError(f"no per-block consumer for {kind}")


def _family_composite(block: Block, family: str) -> np.ndarray:
    if family == "qk":
        return block.qk.w_q @ block.qk.w_k.T
    if family == "vo":
        return block.vo.w_v @ block.vo.w_o
    if family == "ffn":
        return block.ffn.w_d
    raise ManifestError(f"unknown family {family!r}")


def _family_kind(block: Block, family: str) -> InputKind:
    if family == "ffn":
        return InputKind.FFN_INTERMEDIATE
    if block.attention == "self":
        return InputKind.SA_INPUT
    return InputKind.CA_QUERY_INPUT if family == "qk" else InputKind.TEXT_TOKENS


def _stat_layer(block: Block, kind: InputKind) -> str:
    return TEXT_LAYER_ID if kind is InputKind.TEXT_TOKENS else block.block_id


def calibrate(
    act_bundle: TensorBundle,
    model: ModelGraph,
    lam: float = 1e-4,
    strategy: str = "trq_proportional",
    tau: float = 1.0,
) -> CalibrationResult:
    """Accumulate tapped activations into mixed whitening correlations.

    Mixture weights per (layer, kind) come from the TRQ of the concatenated
    projections consuming that stream; the TRQ table additionally scores
    each block family's composite map for rank allocation.
    """
    known_layers = {b.block_id for b in model.blocks} | {TEXT_LAYER_ID}
    accs: dict[tuple[str, InputKind, int], calib.CorrelationStat] = {}
    for name in act_bundle.names():
        rec = act_bundle.get(name)
        meta = rec.metadata
        if "input_kind" not in meta:
            continue
        try:
            kind = InputKind(meta["input_kind"])
            layer = meta["layer_id"]
            t = calib.TIME_INVARIANT if kind is InputKind.TEXT_TOKENS else int(
                meta["timestep"]
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"activation record {name!r}: {exc}") from exc
        if layer not in known_layers:
            raise ManifestError(
                f"activation record {name!r} references unknown layer {layer!r}"
            )
        key = (layer, kind, t)
        if key not in accs:
            accs[key] = calib.CorrelationStat(
                layer_id=layer,
                timestep=t,
                input_kind=kind,
                dim=rec.array.shape[1],
            )
        calib.accumulate(accs[key], rec.array.astype(np.float64))

    stats = {key: calib.finalize(acc, lam) for key, acc in accs.items()}
    samples = {key: acc.samples for key, acc in accs.items()}

    by_stream: dict[tuple[str, InputKind], dict[int, RegularizedCorrelation]] = {}
    for (layer, kind, t), reg in stats.items():
        by_stream.setdefault((layer, kind), {})[t] = reg

    blocks_by_id = {b.block_id: b for b in model.blocks}
    mixed: dict[tuple[str, InputKind], MixedCorrelation] = {}
    stream_weights: dict[tuple[str, InputKind], dict[int, float]] = {}
    for (layer, kind), per_t in sorted(
        by_stream.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        if kind is InputKind.TEXT_TOKENS or len(per_t) == 1:
            weights = {t: 1.0 for t in per_t}
            if len(weights) > 1:  # more than one t for a time-invariant kind
                weights = {t: 1.0 / len(per_t) for t in per_t}
        else:
            w = _consumer_weights(blocks_by_id[layer], kind)
            scores = [
                calib.InfluenceScore(layer, t, calib.trq_score(w, per_t[t].c_tilde))
                for t in sorted(per_t)
            ]
            weights = calib.mixture_weights(scores, strategy=strategy, tau=tau)
        stream_weights[(layer, kind)] = weights
        mixed[(layer, kind)] = calib.mix(per_t, weights, layer_id=layer)

    trq_rows = []
    for block in model.blocks:
        for family in FAMILY_SUFFIXES:
            kind = _family_kind(block, family)
            layer = _stat_layer(block, kind)
            per_t = by_stream.get((layer, kind), {})
            composite = _family_composite(block, family)
            for t in sorted(per_t):
                reg = per_t[t]
                trq_rows.append(
                    {
                        "block": block.block_id,
                        "family": family,
                        "layer_id": layer,
                        "input_kind": kind.value,
                        "timestep": t,
                        "trq": calib.trq_score(composite, reg.c_tilde),
                        "weight": stream_weights[(layer, kind)][t],
                        "diversity": calib.spectral_diversity(reg.c_tilde),
                        "samples": samples[(layer, kind, t)],
                    }
                )
    return CalibrationResult(
        stats=stats,
        samples=samples,
        mixed=mixed,
        trq_rows=trq_rows,
        lam=lam,
        strategy=strategy,
        tau=tau,
    )


def stats_to_bundle(result: CalibrationResult) -> TensorBundle:
    """Serialize regularized per-timestep stats, mixtures, and the TRQ table."""
    bundle = TensorBundle(
        metadata={
            "kind": "stats",
            "lambda": result.lam,
            "weighting": result.strategy,
            "tau": result.tau,
            "trq_table": result.trq_rows,
        }
    )
    for (layer, kind, t), reg in sorted(
        result.stats.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])
    ):
        bundle.add(
            f"ctilde/{layer}/{kind.value}/t{t}",
            reg.c_tilde,
            metadata={
                "layer_id": layer,
                "input_kind": kind.value,
                "timestep": t,
                "samples": result.samples[(layer, kind, t)],
                "lambda": reg.lambda_used,
            },
        )
    for (layer, kind), mix in sorted(
        result.mixed.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        bundle.add(
            f"cbar/{layer}/{kind.value}",
            mix.c_bar,
            metadata={
                "layer_id": layer,
                "input_kind": kind.value,
                "weights": {str(t): w for t, w in mix.weights.items()},
            },
        )
        bundle.add(
            f"rbar/{layer}/{kind.value}",
            mix.r_bar,
            metadata={"layer_id": layer, "input_kind": kind.value},
        )
    return bundle


def mixed_from_stats_bundle(bundle: TensorBundle) -> dict[tuple[str, InputKind], MixedCorrelation]:
    """Rebuild whitening mixtures from a stats bundle.

    Roots are recomputed in f64 from the stored mixture (f32 storage would
    otherwise leak rounding into the whitening inverse pair).
    """
    mixed = {}
    for name in bundle.names():
        if not name.startswith("cbar/"):
            continue
        rec = bundle.get(name)
        layer = rec.metadata["layer_id"]
        kind = InputKind(rec.metadata["input_kind"])
        weights = {int(t): float(w) for t, w in rec.metadata.get("weights", {}).items()}
        mc = MixedCorrelation.from_matrix(bundle.array(name), layer_id=layer)
        mc.weights = weights or mc.weights
        mixed[(layer, kind)] = mc
    return mixed


def trq_table_from_bundle(bundle: TensorBundle) -> list[dict]:
    table = bundle.metadata.get("trq_table")
    if table is None:
        raise ManifestError("stats bundle has no TRQ table")
    return table


def block_scores_from_table(table: list[dict]) -> dict[tuple[str, str], float]:
    acc: dict[tuple[str, str], list[float]] = {}
    for row in table:
        acc.setdefault((row["block"], row["family"]), []).append(row["trq"])
    return {key: float(np.mean(v)) for key, v in acc.items()}


# ---------------------------------------------------------------------------
# allocation profiles


def build_block_profiles(
    model: ModelGraph,
    scores: dict[tuple[str, str], float],
    family_offsets: dict[str, float] | None = None,
) -> list[BlockProfile]:
    """Exact per-rank parameter slopes for every compressible group."""
    offsets = family_offsets or {}
    profiles = []
    for block in model.blocks:
        entries = [
            (
                "qk",
                block.qk.head_dim,
                float(block.qk.heads * (block.qk.w_q.shape[0] + block.qk.w_k.shape[0])),
            ),
            (
                "vo",
                block.vo.head_dim,
                float(block.vo.heads * (block.vo.w_v.shape[0] + block.vo.w_o.shape[1])),
            ),
            (
                "ffn",
                block.ffn.inner,
                float(2 * block.ffn.w_x.shape[0] + block.ffn.w_d.shape[1]),
            ),
        ]
        for family, d_eff, slope in entries:
            key = (block.block_id, family)
            if key not in scores:
                raise MissingStatistics(f"no influence score for {key}")
            profiles.append(
                BlockProfile(
                    block_id=f"{block.block_id}.{family}",
                    family=family,
                    score=scores[key],
                    d_eff=d_eff,
                    cost_slope=slope,
                    family_offset=float(offsets.get(family, 0.0)),
                )
            )
    return profiles


def allocate(
    model: ModelGraph,
    scores: dict[tuple[str, str], float],
    budget: float,
    epsilon: float | None = None,
    r_min: int = 8,
    rounding_multiple: int = 8,
    family_offsets: dict[str, float] | None = None,
) -> AllocationPlan:
    problem = AllocationProblem(
        blocks=build_block_profiles(model, scores, family_offsets),
        budget=budget,
        epsilon=epsilon,
        r_min=r_min,
        rounding_multiple=rounding_multiple,
    )
    return bisect_budget(problem)


def resolve_budget(spec: str | float, full_cost: float) -> float:
    """Budget flags accept absolute parameter counts or ratios like '0.73x'."""
    if isinstance(spec, str) and spec.endswith("x"):
        return float(spec[:-1]) * full_cost
    return float(spec)


def plan_hash(plan: AllocationPlan) -> str:
    payload = json.dumps(plan.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# compression + report


@dataclass
class BlockReportRow:
    block_id: str
    family: str
    attention: str
    d_eff: int
    rank: int
    predicted_error: float
    measured_loss: float | None
    params_before: int
    params_after: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CompressionReport:
    rows: list[BlockReportRow]
    params_before: int
    params_after: int
    budget: float
    plan_hash: str
    output_deviation: float | None = None
    deviation_probes: int = 0

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "budget": self.budget,
            "plan_hash": self.plan_hash,
            "output_deviation": self.output_deviation,
            "deviation_probes": self.deviation_probes,
            "blocks": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionReport":
        return cls(
            rows=[BlockReportRow(**r) for r in d["blocks"]],
            params_before=d["params_before"],
            params_after=d["params_after"],
            budget=d["budget"],
            plan_hash=d["plan_hash"],
            output_deviation=d.get("output_deviation"),
            deviation_probes=d.get("deviation_probes", 0),
        )


def _required_streams(block: Block) -> list[tuple[str, InputKind]]:
    need = [(block.block_id, InputKind.FFN_INTERMEDIATE)]
    if block.attention == "self":
        need.append((block.block_id, InputKind.SA_INPUT))
    else:
        need.append((block.block_id, InputKind.CA_QUERY_INPUT))
        need.append((TEXT_LAYER_ID, InputKind.TEXT_TOKENS))
    return need


def _check_streams(model: ModelGraph, mixed) -> None:
    missing = []
    for block in model.blocks:
        for layer, kind in _required_streams(block):
            if (layer, kind) not in mixed:
                missing.append(f"({layer}, {kind.value}, all t)")
    if missing:
        raise MissingStatistics(
            "missing calibration statistics: " + ", ".join(sorted(set(missing)))
        )


def _compress_block(block: Block, mixed, ranks: dict[str, int]):
    if block.attention == "self":
        c_q = c_k = mixed[(block.block_id, InputKind.SA_INPUT)]
        c_v = c_q
    else:
        c_q = mixed[(block.block_id, InputKind.CA_QUERY_INPUT)]
        c_k = mixed[(TEXT_LAYER_ID, InputKind.TEXT_TOKENS)]
        c_v = c_k
    k_stats = mixed[(block.block_id, InputKind.FFN_INTERMEDIATE)]
    comp_qk = madac.compress_qk(block.qk, c_q, c_k, ranks[f"{block.block_id}.qk"])
    comp_vo = madac.compress_vo(block.vo, c_v, ranks[f"{block.block_id}.vo"])
    comp_ffn = madac.compress_ffn(
        block.ffn, k_stats.c_bar, ranks[f"{block.block_id}.ffn"]
    )
    return comp_qk, comp_vo, comp_ffn


def compress_model(
    model: ModelGraph,
    mixed: dict[tuple[str, InputKind], MixedCorrelation],
    plan: AllocationPlan,
    probes: TensorBundle | None = None,
    workers: int = 1,
) -> tuple[ModelGraph, CompressionReport]:
    """Apply planned per-group ranks block by block; the source model is
    never mutated. Blocks compress independently (optionally in a thread
    pool) and are reassembled in model order."""
    _check_streams(model, mixed)
    ranks = plan.rank_of()
    for block in model.blocks:
        for family in FAMILY_SUFFIXES:
            key = f"{block.block_id}.{family}"
            if key not in ranks:
                raise PlanMismatch(f"plan has no entry for {key}")

    def job(block: Block):
        return _compress_block(block, mixed, ranks)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, model.blocks))
    else:
        results = [job(b) for b in model.blocks]

    new_blocks = []
    rows = []
    for block, (comp_qk, comp_vo, comp_ffn) in zip(model.blocks, results):
        new_block = Block(
            block_id=block.block_id,
            attention=block.attention,
            qk=comp_qk.group,
            vo=comp_vo.group,
            ffn=comp_ffn.group,
            logit_scale=block.logit_scale,
        )
        new_blocks.append(new_block)
        before = block.family_params()
        after = new_block.family_params()
        for family, comp, d_eff in [
            ("qk", comp_qk, block.qk.head_dim),
            ("vo", comp_vo, block.vo.head_dim),
            ("ffn", comp_ffn, block.ffn.inner),
        ]:
            rows.append(
                BlockReportRow(
                    block_id=block.block_id,
                    family=family,
                    attention=block.attention,
                    d_eff=d_eff,
                    rank=comp.achieved_rank,
                    predicted_error=float(comp.predicted_error),
                    measured_loss=None,
                    params_before=before[family],
                    params_after=after[family],
                )
            )
    compressed = ModelGraph(
        d_model=model.d_model,
        d_text=model.d_text,
        blocks=new_blocks,
        metadata=dict(model.metadata),
    )
    report = CompressionReport(
        rows=rows,
        params_before=model.param_count(),
        params_after=compressed.param_count(),
        budget=plan.budget,
        plan_hash=plan_hash(plan),
    )
    if probes is not None:
        _measure_on_probes(model, compressed, results, probes, report)
    return compressed, report


def _probe_batches(probes: TensorBundle):
    out = []
    i = 0
    while f"probe{i}/latent" in probes:
        latent = probes.array(f"probe{i}/latent")
        text = probes.array(f"probe{i}/text")
        t = int(probes.get(f"probe{i}/latent").metadata.get("timestep", 0))
        out.append((latent, text, t))
        i += 1
    if not out:
        raise ManifestError("probe bundle holds no probe batches")
    return out


def _measure_on_probes(model, compressed, results, probes, report) -> None:
    """Per-block modular losses on held-out taps plus end-to-end deviation."""
    batches = _probe_batches(probes)
    loss: dict[tuple[str, str], float] = {}
    deviation = 0.0
    for latent, text, t in batches:
        out_o, taps = forward(model, latent, text, timestep=t, return_taps=True)
        out_c = forward(compressed, latent, text, timestep=t)
        deviation = max(deviation, float(np.abs(out_o - out_c).max()))
        for block, (comp_qk, comp_vo, comp_ffn) in zip(model.blocks, results):
            if block.attention == "self":
                x = taps[(block.block_id, InputKind.SA_INPUT)]
                key_in = None
                v_in = x
            else:
                x = taps[(block.block_id, InputKind.CA_QUERY_INPUT)]
                key_in = taps[(TEXT_LAYER_ID, InputKind.TEXT_TOKENS)]
                v_in = key_in
            z = taps[(block.block_id, InputKind.FFN_INTERMEDIATE)]
            qk_loss = madac.reconstruction_loss(block.qk, comp_qk, x, key_inputs=key_in)
            vo_loss = madac.reconstruction_loss(block.vo, comp_vo, v_in)
            # column selection commutes with the gate, so the ffn loss can be
            # evaluated directly from the tapped intermediate
            delta = z @ block.ffn.w_d - z[:, comp_ffn.selection.selected] @ comp_ffn.group.w_d
            ffn_loss = float(np.sum(delta * delta))
            for family, value in (("qk", qk_loss), ("vo", vo_loss), ("ffn", ffn_loss)):
                key = (block.block_id, family)
                loss[key] = loss.get(key, 0.0) + value
    for row in report.rows:
        row.measured_loss = loss[(row.block_id, row.family)]
    report.output_deviation = deviation
    report.deviation_probes = len(batches)
