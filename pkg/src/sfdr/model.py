"""Full captioning model: fusion, graph refinement, decoder, checkpoints.

The forward pass turns one feature bundle into a refined context matrix the
decoder cross-attends over.  At inference time the text feature is replaced
by a learned constant so that the caption path needs the image features only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_io import CorpusHeader, FeatureBundle, FormatError, Vocabulary
from .decoder import DecoderOutput, DecoderParams, decode
from .dgfr import (AttentionParams, GraphParams, knowledge_matrix,
                   refine_graph, scene_object_attention)
from .ssff import FusedFeatures, SsffParams, embed_semantic, fuse, glorot

CKPT_MAGIC = b"SFDRCKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    header: CorpusHeader
    vocab_size: int
    d: int = 64                 # model dim for fusion/graph context
    alpha: float = 0.5
    dgfr_heads: int = 2
    edge_mode: str = "product"
    self_loops: bool = True
    dec_layers: int = 2
    dec_dim: int = 64
    dec_heads: int = 2
    dec_ffw: int = 128
    max_len: int = 20

    def to_pairs(self) -> list[tuple[str, str]]:
        h = self.header
        return [
            ("header.d_v", str(h.d_v)), ("header.d_t", str(h.d_t)),
            ("header.H", str(h.H)), ("header.d_g", str(h.d_g)),
            ("header.k", str(h.k)), ("header.d_r", str(h.d_r)),
            ("vocab_size", str(self.vocab_size)),
            ("ssff.model_dim", str(self.d)),
            ("ssff.alpha", repr(self.alpha)),
            ("dgfr.heads", str(self.dgfr_heads)),
            ("dgfr.edge_mode", self.edge_mode),
            ("dgfr.self_loops", "on" if self.self_loops else "off"),
            ("decoder.layers", str(self.dec_layers)),
            ("decoder.dim", str(self.dec_dim)),
            ("decoder.heads", str(self.dec_heads)),
            ("decoder.ffw", str(self.dec_ffw)),
            ("decoder.max_len", str(self.max_len)),
        ]

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "ModelConfig":
        header = CorpusHeader(
            d_v=int(pairs["header.d_v"]), d_t=int(pairs["header.d_t"]),
            H=int(pairs["header.H"]), d_g=int(pairs["header.d_g"]),
            k=int(pairs["header.k"]), d_r=int(pairs["header.d_r"]))
        return cls(
            header=header,
            vocab_size=int(pairs["vocab_size"]),
            d=int(pairs["ssff.model_dim"]),
            alpha=float(pairs["ssff.alpha"]),
            dgfr_heads=int(pairs["dgfr.heads"]),
            edge_mode=pairs["dgfr.edge_mode"],
            self_loops=pairs["dgfr.self_loops"] == "on",
            dec_layers=int(pairs["decoder.layers"]),
            dec_dim=int(pairs["decoder.dim"]),
            dec_heads=int(pairs["decoder.heads"]),
            dec_ffw=int(pairs["decoder.ffw"]),
            max_len=int(pairs["decoder.max_len"]),
        )


@dataclass
class ForwardTrace:
    """Intermediate results of one context pass, for diagnostics."""
    fused: FusedFeatures
    roi_graph: object
    fusion_graph: object
    alignment: Tensor
    context: Tensor


class CaptionModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.header
        self.cfg = cfg
        self.ssff = SsffParams.init(rng, h.d_v, h.d_t, h.d_g, cfg.d)
        self.roi_proj = glorot(rng, h.d_r, cfg.d)
        self.graph_roi = GraphParams.init(rng, cfg.d, cfg.edge_mode)
        self.graph_fusion = GraphParams.init(rng, cfg.d, cfg.edge_mode)
        self.attn = AttentionParams.init(rng, cfg.d, cfg.dgfr_heads)
        self.ctx_proj = None if cfg.dec_dim == cfg.d \
            else glorot(rng, cfg.d, cfg.dec_dim)
        self.decoder = DecoderParams.init(
            rng, cfg.vocab_size, cfg.dec_dim, cfg.dec_heads, cfg.dec_layers,
            cfg.dec_ffw, cfg.max_len)

    def named_params(self) -> dict[str, Tensor]:
        named = dict(self.ssff.tensors())
        named["roi_proj"] = self.roi_proj
        named.update(self.graph_roi.tensors("dgfr.roi"))
        named.update(self.graph_fusion.tensors("dgfr.fusion"))
        named.update(self.attn.tensors("dgfr.attn"))
        if self.ctx_proj is not None:
            named["ctx_proj"] = self.ctx_proj
        named.update(self.decoder.tensors())
        return named

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def forward_context(self, bundle: FeatureBundle,
                        use_text: bool) -> ForwardTrace:
        """Fuse, refine and align one bundle into a decoder context."""
        text = Tensor(bundle.clip_text) if use_text and bundle.clip_text is not None \
            else self.ssff.text_const
        embedded = embed_semantic(Tensor(bundle.clip_visual), text)
        fused = fuse(embedded, Tensor(bundle.grid), self.cfg.alpha, self.ssff)
        roi_nodes = ad.matmul(Tensor(bundle.roi), self.roi_proj)
        roi_graph = refine_graph(roi_nodes, self.graph_roi,
                                 self.cfg.edge_mode, self.cfg.self_loops)
        fusion_graph = refine_graph(fused.matrix, self.graph_fusion,
                                    self.cfg.edge_mode, self.cfg.self_loops)
        alignment = knowledge_matrix(roi_graph.refined, fusion_graph.refined)
        context = scene_object_attention(roi_graph.refined, alignment,
                                         fusion_graph.refined, self.attn)
        if self.ctx_proj is not None:
            context = ad.matmul(context, self.ctx_proj)
        return ForwardTrace(fused=fused, roi_graph=roi_graph,
                            fusion_graph=fusion_graph, alignment=alignment,
                            context=context)

    def logits(self, bundle: FeatureBundle, ids: list[int], use_text: bool,
               want_attention: bool = False) -> DecoderOutput:
        trace = self.forward_context(bundle, use_text)
        return decode(trace.context, ids, self.decoder, want_attention)


# ---------------------------------------------------------------------------
# checkpoints: versioned header, config pairs, vocabulary, named f64 tensors
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, model: CaptionModel, vocab: Vocabulary,
                    extra: dict[str, str] | None = None,
                    opt_state: dict[str, np.ndarray] | None = None) -> None:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", CKPT_VERSION)
    pairs = model.cfg.to_pairs() + sorted((extra or {}).items())
    out += struct.pack("<I", len(pairs))
    for key, value in pairs:
        out += _pack_str(key) + _pack_str(value)
    out += struct.pack("<I", len(vocab))
    for token in vocab.id_to_token:
        out += _pack_str(token)
    arrays: dict[str, np.ndarray] = {name: t.data
                                     for name, t in model.named_params().items()}
    for name, arr in (opt_state or {}).items():
        if not name.startswith("opt."):
            raise ValueError(f"optimizer state keys must start with 'opt.': {name}")
        arrays[name] = arr
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = arrays[name]
        out += _pack_str(name)
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[CaptionModel, Vocabulary, dict[str, str],
                                   dict[str, np.ndarray]]:
    from .data_io import _Reader  # same cursor/error conventions as bundles

    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(8, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    n_pairs = r.u32("config count")
    pairs = {}
    for _ in range(n_pairs):
        key = r.text("config key")
        pairs[key] = r.text("config value")
    n_tokens = r.u32("vocab size")
    tokens = [r.text(f"token {i}") for i in range(n_tokens)]
    vocab = Vocabulary(tokens[4:])
    if vocab.id_to_token != tokens:
        raise FormatError(f"{path}: vocabulary specials are corrupted")
    cfg = ModelConfig.from_pairs(pairs)
    model = CaptionModel(cfg, np.random.default_rng(0))
    named = model.named_params()
    n_params = r.u32("param count")
    seen = set()
    opt_state: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name = r.text("param name")
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * count, f"tensor {name}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if name.startswith("opt."):
            opt_state[name] = arr
            continue
        if name not in named:
            raise FormatError(f"{path}: unknown parameter {name!r}")
        target = named[name]
        if tuple(shape) != target.shape:
            raise FormatError(
                f"{path}: parameter {name} shape {shape} != model {target.shape}")
        target.data = arr
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:3]}...")
    return model, vocab, pairs, opt_state
