"""Weight-group model graph, toy network, forward evaluation, serialization.

The toy network is a desk-scale stand-in for the real denoiser: a chain of
blocks, each holding one attention unit (self- or cross-) plus a gated
feed-forward, with residual connections. It preserves every structural
feature the compression math touches: multiple heads, gating, a
time-invariant text side for cross-attention, and timestep-dependent
inputs. Weights are stored as f32 bundles, computed on in f64.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bundle import TensorBundle
from .calib import InputKind
from .errors import ConfigError, ManifestError, ShapeError
from .madac import FfnGroup, ModuleShape, QkGroup, VoGroup, apply_gate

TEXT_LAYER_ID = "text"


def substream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic RNG substream derived from the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class Block:
    block_id: str
    attention: str  # self | cross
    qk: QkGroup
    vo: VoGroup
    ffn: FfnGroup
    logit_scale: float  # 1/sqrt(original head width); survives compression

    def param_count(self) -> int:
        return int(
            self.qk.w_q.size
            + self.qk.w_k.size
            + self.vo.w_v.size
            + self.vo.w_o.size
            + self.ffn.w_x.size
            + self.ffn.w_g.size
            + self.ffn.w_d.size
        )

    def family_params(self) -> dict[str, int]:
        return {
            "qk": int(self.qk.w_q.size + self.qk.w_k.size),
            "vo": int(self.vo.w_v.size + self.vo.w_o.size),
            "ffn": int(self.ffn.w_x.size + self.ffn.w_g.size + self.ffn.w_d.size),
        }


@dataclass
class ModelGraph:
    d_model: int
    d_text: int
    blocks: list[Block] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [b.block_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ConfigError("block ids must be unique")

    def param_count(self) -> int:
        return sum(b.param_count() for b in self.blocks)

    def block(self, block_id: str) -> Block:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise ConfigError(f"no block {block_id!r}")


def make_toy_model(
    seed: int,
    blocks: int = 2,
    d: int = 16,
    heads: int = 2,
    d_int: int | None = None,
    d_text: int | None = None,
    gate: str = "gelu",
) -> ModelGraph:
    """Seeded toy network alternating self- and cross-attention blocks."""
    shape = ModuleShape(d_model=d, heads=heads, ffn_inner=d_int or 4 * d)
    d_int = shape.ffn_inner
    d_text = d_text or d
    rng = substream(seed, "weights")
    scale = 1.0 / math.sqrt(d)
    out = []
    for i in range(blocks):
        attention = "self" if i % 2 == 0 else "cross"
        kv_in = d if attention == "self" else d_text
        qk = QkGroup(
            w_q=rng.normal(size=(d, d)) * scale,
            w_k=rng.normal(size=(kv_in, d)) * scale,
            heads=heads,
            head_dim=shape.head_dim,
            attention=attention,
        )
        vo = VoGroup(
            w_v=rng.normal(size=(kv_in, d)) * scale,
            w_o=rng.normal(size=(d, d)) * scale,
            heads=heads,
            head_dim=shape.head_dim,
            attention=attention,
        )
        ffn = FfnGroup(
            w_x=rng.normal(size=(d, d_int)) * scale,
            w_g=rng.normal(size=(d, d_int)) * scale,
            w_d=rng.normal(size=(d_int, d)) / math.sqrt(d_int),
            gate_kind=gate,
        )
        out.append(
            Block(
                block_id=f"block{i}",
                attention=attention,
                qk=qk,
                vo=vo,
                ffn=ffn,
                logit_scale=1.0 / math.sqrt(shape.head_dim),
            )
        )
    return ModelGraph(
        d_model=d,
        d_text=d_text,
        blocks=out,
        metadata={"seed": seed, "heads": heads, "d_int": d_int, "gate": gate},
    )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Fixed (non-learned) pre-norm keeping the residual stream bounded."""
    return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)


def _attention(block: Block, x: np.ndarray, source: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], block.vo.w_o.shape[1]))
    for j in range(block.qk.heads):
        wq_j, wk_j = block.qk.head(j)
        wv_j, wo_j = block.vo.head(j)
        logits = (x @ wq_j) @ (source @ wk_j).T * block.logit_scale
        out += _softmax_rows(logits) @ (source @ wv_j) @ wo_j
    return out


def forward(
    model: ModelGraph,
    latent: np.ndarray,
    text: np.ndarray,
    timestep: int = 0,
    return_taps: bool = False,
):
    """Evaluate the block chain on one token batch.

    ``latent`` is (tokens, d_model); ``text`` is (text_tokens, d_text).
    Module inputs pass through a fixed RMS pre-norm; taps, when requested,
    carry exactly the tensors the projections consume, keyed by
    (layer_id, input_kind).
    """
    x = np.asarray(latent, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_model:
        raise ShapeError(f"latent batch must be (tokens, {model.d_model})")
    if text.ndim != 2 or text.shape[1] != model.d_text:
        raise ShapeError(f"text batch must be (tokens, {model.d_text})")
    # scalar conditioning keeps the map timestep-dependent
    x = x + 0.1 * math.sin(0.7 * float(timestep))
    text_n = _rms_norm(text)
    taps: dict[tuple[str, InputKind], np.ndarray] = {}
    if return_taps:
        taps[(TEXT_LAYER_ID, InputKind.TEXT_TOKENS)] = text_n.copy()
    for block in model.blocks:
        h = _rms_norm(x)
        source = h if block.attention == "self" else text_n
        if return_taps:
            kind = (
                InputKind.SA_INPUT
                if block.attention == "self"
                else InputKind.CA_QUERY_INPUT
            )
            taps[(block.block_id, kind)] = h.copy()
        x = x + _attention(block, h, source)
        h = _rms_norm(x)
        z = block.ffn.intermediate(h)
        if return_taps:
            taps[(block.block_id, InputKind.FFN_INTERMEDIATE)] = z.copy()
        x = x + z @ block.ffn.w_d
    if return_taps:
        return x, taps
    return x


# ---------------------------------------------------------------------------
# model <-> bundle serialization

_ROLES = ("w_q", "w_k", "w_v", "w_o", "w_x", "w_g", "w_d")


def model_to_bundle(model: ModelGraph, extra_metadata: dict | None = None) -> TensorBundle:
    bundle = TensorBundle(
        metadata={
            "kind": "model",
            "d_model": model.d_model,
            "d_text": model.d_text,
            "block_ids": [b.block_id for b in model.blocks],
            **(extra_metadata or {}),
        }
    )
    for b in model.blocks:
        common = {"block": b.block_id, "attention": b.attention}
        bundle.add(f"{b.block_id}.w_q", b.qk.w_q, {
            **common, "role": "w_q", "family": "qk",
            "heads": b.qk.heads, "head_dim": b.qk.head_dim,
        })
        bundle.add(f"{b.block_id}.w_k", b.qk.w_k, {
            **common, "role": "w_k", "family": "qk",
            "heads": b.qk.heads, "head_dim": b.qk.head_dim,
        })
        bundle.add(f"{b.block_id}.w_v", b.vo.w_v, {
            **common, "role": "w_v", "family": "vo",
            "heads": b.vo.heads, "head_dim": b.vo.head_dim,
        })
        bundle.add(f"{b.block_id}.w_o", b.vo.w_o, {
            **common, "role": "w_o", "family": "vo",
            "heads": b.vo.heads, "head_dim": b.vo.head_dim,
        })
        bundle.add(f"{b.block_id}.w_x", b.ffn.w_x, {
            **common, "role": "w_x", "family": "ffn", "gate": b.ffn.gate_kind,
        })
        bundle.add(f"{b.block_id}.w_g", b.ffn.w_g, {
            **common, "role": "w_g", "family": "ffn", "gate": b.ffn.gate_kind,
        })
        bundle.add(f"{b.block_id}.w_d", b.ffn.w_d, {
            **common, "role": "w_d", "family": "ffn",
        })
        bundle.records[f"{b.block_id}.w_q"].metadata["logit_scale"] = b.logit_scale
    return bundle


def model_from_bundle(bundle: TensorBundle) -> tuple[ModelGraph, list[str]]:
    """Rebuild a ModelGraph from a weights bundle; returns (model, warnings)."""
    warnings: list[str] = []
    meta = bundle.metadata
    if meta.get("kind") != "model":
        warnings.append(f"bundle kind is {meta.get('kind')!r}, expected 'model'")
    try:
        d_model = int(meta["d_model"])
        d_text = int(meta["d_text"])
        block_ids = list(meta["block_ids"])
    except KeyError as exc:
        raise ManifestError(f"model bundle metadata missing {exc}") from exc

    by_block: dict[str, dict[str, object]] = {bid: {} for bid in block_ids}
    for name in bundle.names():
        rec = bundle.get(name)
        bid = rec.metadata.get("block")
        role = rec.metadata.get("role")
        if bid not in by_block or role not in _ROLES:
            warnings.append(f"ignoring unrecognized tensor {name!r}")
            continue
        by_block[bid][role] = rec

    blocks = []
    for bid in block_ids:
        recs = by_block[bid]
        missing = [r for r in _ROLES if r not in recs]
        if missing:
            raise ManifestError(f"block {bid!r} missing tensors {missing}")

        def arr(role):
            return recs[role].array.astype(np.float64)

        attention = recs["w_q"].metadata.get("attention", "self")
        qk = QkGroup(
            w_q=arr("w_q"),
            w_k=arr("w_k"),
            heads=int(recs["w_q"].metadata.get("heads", 1)),
            head_dim=int(recs["w_q"].metadata.get("head_dim", arr("w_q").shape[1])),
            attention=attention,
        )
        vo = VoGroup(
            w_v=arr("w_v"),
            w_o=arr("w_o"),
            heads=int(recs["w_v"].metadata.get("heads", 1)),
            head_dim=int(recs["w_v"].metadata.get("head_dim", arr("w_v").shape[1])),
            attention=attention,
        )
        ffn = FfnGroup(
            w_x=arr("w_x"),
            w_g=arr("w_g"),
            w_d=arr("w_d"),
            gate_kind=recs["w_x"].metadata.get("gate", "identity"),
        )
        if "gate" not in recs["w_x"].metadata:
            warnings.append(f"block {bid!r}: no gate recorded, assuming identity")
        logit_scale = float(
            recs["w_q"].metadata.get("logit_scale", 1.0 / math.sqrt(qk.head_dim))
        )
        if qk.w_q.shape[0] != d_model:
            raise ManifestError(
                f"block {bid!r}: w_q rows {qk.w_q.shape[0]} != d_model {d_model}"
            )
        blocks.append(
            Block(
                block_id=bid,
                attention=attention,
                qk=qk,
                vo=vo,
                ffn=ffn,
                logit_scale=logit_scale,
            )
        )
    model = ModelGraph(
        d_model=d_model, d_text=d_text, blocks=blocks, metadata=dict(meta)
    )
    return model, warnings
