"""Query (video + voice-over) and BGM embedding branches.

Query branch::

    F = fc([F_fast, F_slow]),  S = fc(voice-over)
    F~, S~ = SA(F), SA(S)
    F^, S^ = CMA(F~, S~), CMA(S~, F~)
    E_J = normalize(fc(flatten(fuse(F^, S^))))

BGM branch::

    E_M = normalize(fc(flatten(SA(fc(M)))))

Every branch function accepts a single ``L x d`` sequence or a stack of
them (``B x L x d``) and returns a ``B x d_E`` tensor.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import AttentionConfig, AttentionParams, cross_attend, self_attend
from .data import VERSION_F64, ModalSequence, load_tensor, read_header_shape, save_tensor
from .fusion import GateParams, fuse
from .numerics import (
    DegenerateEmbeddingError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_depth,
    flatten_rows,
    l2_normalize_row,
    matmul,
    mean_rows,
    reshape,
)

ATTENTION_BLOCKS = ("joint_sa_v", "joint_sa_s", "cma_v_from_s", "cma_s_from_v", "bgm_sa")


@dataclass(frozen=True)
class ModelConfig:
    d_fast: int = 16
    d_slow: int = 64
    d_vo: int = 32
    d_bgm: int = 32
    d_model: int = 128
    n_heads: int = 4
    d_k: int = 32
    d_v: int = 32
    seq_len: int = 32
    d_embed: int = 512
    n_labels: int = 2
    gate_activation: str = "relu"
    pooling: str = "flatten"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.n_labels < 2:
            raise ValueError("n_labels must be >= 2")
        if self.gate_activation not in ("relu", "sigmoid"):
            raise ValueError(f"gate_activation must be relu or sigmoid, got {self.gate_activation!r}")
        if self.pooling not in ("flatten", "mean"):
            raise ValueError(f"pooling must be flatten or mean, got {self.pooling!r}")
        self.attention  # validates d_model == n_heads * d_v

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.d_k, self.d_v)

    @property
    def pooled_dim(self) -> int:
        return self.seq_len * self.d_model if self.pooling == "flatten" else self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, int]]":
    """Name -> shape for every learnable matrix, in a fixed order."""
    shapes: OrderedDict[str, tuple[int, int]] = OrderedDict()

    def fc(name, d_in, d_out, bias=True):
        shapes[f"{name}.w"] = (d_in, d_out)
        if bias:
            shapes[f"{name}.b"] = (1, d_out)

    fc("video_merge", cfg.d_fast + cfg.d_slow, cfg.d_model)
    fc("voiceover_proj", cfg.d_vo, cfg.d_model)
    fc("bgm_proj", cfg.d_bgm, cfg.d_model)
    att = cfg.attention
    for block in ATTENTION_BLOCKS:
        shapes.update(att.shapes(block))
    shapes["gate.wg"] = (2 * cfg.d_model, 2 * cfg.d_model)
    shapes["gate.bg"] = (1, 2 * cfg.d_model)
    fc("joint_out", cfg.pooled_dim, cfg.d_embed)
    fc("bgm_out", cfg.pooled_dim, cfg.d_embed)
    shapes["classifier_wj"] = (cfg.d_embed, cfg.n_labels)
    shapes["classifier_wm"] = (cfg.d_embed, cfg.n_labels)
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith(".b") or name.endswith(".bg")


class ModelParameters:
    """The named set of learnable matrices of both branches and both classifier heads."""

    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray]):
        shapes = parameter_shapes(cfg)
        bad = [
            f"{name}: expected {shape}, got {None if name not in values else values[name].shape}"
            for name, shape in shapes.items()
            if name not in values or values[name].shape != shape
        ]
        extra = sorted(set(values) - set(shapes))
        if bad or extra:
            raise CheckpointMismatchError(bad + [f"{name}: unexpected" for name in extra])
        self.config = cfg
        self._params = OrderedDict((name, Parameter(name, values[name])) for name in shapes)
        self._blocks = {block: AttentionParams.from_store(self._params, block) for block in ATTENTION_BLOCKS}
        self._gate = GateParams.from_store(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def attention(self, block: str) -> AttentionParams:
        return self._blocks[block]

    @property
    def gate(self) -> GateParams:
        return self._gate

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, self.state())


class CheckpointMismatchError(ShapeError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("parameter mismatch: " + "; ".join(self.problems))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _as_batch(x, expected_depth: int, what: str) -> Tensor:
    if isinstance(x, ModalSequence):
        x = x.values
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.value.ndim == 2:
        t = reshape(t, (1,) + t.shape)
    if t.value.ndim != 3:
        raise ShapeError(f"{what}: expected L x d or B x L x d, got {t.shape}")
    if t.shape[-1] != expected_depth:
        raise ShapeError(f"{what}: expected depth {expected_depth}, got {t.shape[-1]}")
    return t


def linear(x: Tensor, params: ModelParameters, name: str) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def merge_video(fast, slow, params: ModelParameters) -> Tensor:
    """F = fc([F_fast, F_slow]), row by row."""
    cfg = params.config
    fast = _as_batch(fast, cfg.d_fast, "video_fast")
    slow = _as_batch(slow, cfg.d_slow, "video_slow")
    if fast.shape[:-1] != slow.shape[:-1]:
        raise ShapeError(f"fast/slow length mismatch: {fast.shape} vs {slow.shape}")
    return linear(concat_depth(fast, slow), params, "video_merge")


def _pool_project(h: Tensor, params: ModelParameters, name: str) -> Tensor:
    cfg = params.config
    if h.shape[-2] != cfg.seq_len and cfg.pooling == "flatten":
        raise ShapeError(f"sequence length {h.shape[-2]} != configured seq_len {cfg.seq_len}")
    pooled = flatten_rows(h) if cfg.pooling == "flatten" else mean_rows(h)
    e = l2_normalize_row(linear(pooled, params, name))
    return reshape(e, (e.shape[0], cfg.d_embed))


def joint_branch(fast, slow, voiceover, params: ModelParameters) -> dict[str, Tensor]:
    """Every intermediate of the query branch, keyed by stage name."""
    cfg = params.config
    f = merge_video(fast, slow, params)
    s = linear(_as_batch(voiceover, cfg.d_vo, "voiceover"), params, "voiceover_proj")
    if f.shape[:-1] != s.shape[:-1]:
        raise ShapeError(f"video/voice-over length mismatch: {f.shape} vs {s.shape}")
    f_sa = self_attend(f, params.attention("joint_sa_v"))
    s_sa = self_attend(s, params.attention("joint_sa_s"))
    # both directions read the SA outputs, not each other's update
    f_cma = cross_attend(f_sa, s_sa, params.attention("cma_v_from_s"))
    s_cma = cross_attend(s_sa, f_sa, params.attention("cma_s_from_v"))
    h = fuse(f_cma, s_cma, params.gate, cfg.gate_activation)
    return {
        "video": f,
        "voiceover": s,
        "video_sa": f_sa,
        "voiceover_sa": s_sa,
        "video_cma": f_cma,
        "voiceover_cma": s_cma,
        "fused": h,
        "embedding": _pool_project(h, params, "joint_out"),
    }


def joint_embed(fast, slow, voiceover, params: ModelParameters) -> Tensor:
    """Unit-norm query embeddings, shape B x d_E."""
    return joint_branch(fast, slow, voiceover, params)["embedding"]


def bgm_embed(bgm, params: ModelParameters) -> Tensor:
    """Unit-norm BGM embeddings, shape B x d_E.  Reads no query input."""
    cfg = params.config
    m = linear(_as_batch(bgm, cfg.d_bgm, "bgm"), params, "bgm_proj")
    return _pool_project(self_attend(m, params.attention("bgm_sa")), params, "bgm_out")


@dataclass
class EmbeddingRecord:
    id: str
    label: int | None
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"embedding {self.id} is not unit-norm (|v| = {norm!r})")


def embed_catalog(
    bgms: Sequence[ModalSequence | np.ndarray],
    params: ModelParameters,
    ids: Sequence[str] | None = None,
    labels: Sequence[int | None] | None = None,
    chunk: int = 64,
) -> list[EmbeddingRecord]:
    """Embed candidate BGMs independently of any query, preserving order."""
    if not bgms:
        return []
    ids = list(ids) if ids is not None else [str(i) for i in range(len(bgms))]
    labels = list(labels) if labels is not None else [None] * len(bgms)
    arrays = [b.values if isinstance(b, ModalSequence) else np.asarray(b, dtype=np.float64) for b in bgms]
    records = []
    for lo in range(0, len(arrays), chunk):
        part = arrays[lo : lo + chunk]
        try:
            vecs = bgm_embed(np.stack(part), params).value
        except (ShapeError, DegenerateEmbeddingError, ValueError) as exc:
            # find the offending item so the error names it
            for j, arr in enumerate(part):
                try:
                    bgm_embed(arr, params)
                except (ShapeError, DegenerateEmbeddingError, ValueError) as item_exc:
                    raise type(item_exc)(f"catalog item {lo + j} ({ids[lo + j]}): {item_exc}") from item_exc
            raise exc
        for j, v in enumerate(vecs):
            records.append(EmbeddingRecord(ids[lo + j], labels[lo + j], v))
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, params: ModelParameters, header: dict | None = None) -> Path:
    """Write ``header.json`` plus one float64 MRCF file per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    for p in params:
        save_tensor(directory / "params" / f"{p.name}.mrcf", p.value, VERSION_F64)
    full = {"model": params.config.to_dict(), "parameters": params.names()}
    full.update(header or {})
    (directory / "header.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return directory


def read_checkpoint_header(directory) -> dict:
    return json.loads((Path(directory) / "header.json").read_text())


def load_checkpoint(directory, cfg: ModelConfig | None = None) -> tuple[ModelParameters, dict]:
    """Load parameters; any missing, extra or mis-shaped tensor is a hard error naming it."""
    directory = Path(directory)
    header = read_checkpoint_header(directory)
    cfg = cfg or ModelConfig.from_dict(header["model"])
    expected = parameter_shapes(cfg)
    files = {p.stem: p for p in (directory / "params").glob("*.mrcf")}
    problems = []
    for name, shape in expected.items():
        if name not in files:
            problems.append(f"{name}: missing")
        else:
            got = tuple(read_header_shape(files[name]))
            if got != shape:
                problems.append(f"{name}: expected {shape}, got {got}")
    problems += [f"{name}: unexpected" for name in sorted(set(files) - set(expected))]
    if problems:
        raise CheckpointMismatchError(problems)
    values = {name: load_tensor(files[name]) for name in expected}
    return ModelParameters(cfg, values), header
