"""Independent reference implementations and the on-demand verification suites.

The ``naive_*`` functions are plain Python loops over floats.  They share
no code with the tensor path, which is what makes them usable as oracles.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionParams, attention_head, chi
from .fusion import GateParams, fuse, gate_weights
from .losses import EmptyTripletWarning, LossConfig, TripletBatch, margin_at, pseudo_label_loss, total_loss, triplet_loss
from .model import ModelConfig, ModelParameters, bgm_embed, joint_branch, parameter_shapes
from .numerics import Parameter, Tensor, gradient_check
from .trainer import init_parameters

ORACLE_TOL = 1e-12
GRADCHECK_TOL = 1e-4
KINK_CLEARANCE = 1e-3


# ---------------------------------------------------------------------------
# scalar-loop oracles
# ---------------------------------------------------------------------------

def naive_matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def naive_softmax_row(row):
    top = max(row)
    e = [math.exp(x - top) for x in row]
    s = sum(e)
    return [x / s for x in e]


def naive_attention_head(i1, i2, wq, wk, wv):
    i1, i2, wq, wk, wv = (np.asarray(x).tolist() for x in (i1, i2, wq, wk, wv))
    d_k = len(wq[0])
    q = naive_matmul(i1, wq)
    k = naive_matmul(i2, wk)
    v = naive_matmul(i2, wv)
    out = []
    for qi in q:
        scores = [sum(qi[t] * kj[t] for t in range(d_k)) / math.sqrt(d_k) for kj in k]
        w = naive_softmax_row(scores)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return np.array(out)


def naive_chi(i1, i2, heads, wo):
    outs = [naive_attention_head(i1, i2, *h) for h in heads]
    merged = [sum((list(o[r]) for o in outs), []) for r in range(len(outs[0]))]
    proj = naive_matmul(merged, np.asarray(wo).tolist())
    i1 = np.asarray(i1).tolist()
    return np.array([[i1[r][c] + proj[r][c] for c in range(len(i1[0]))] for r in range(len(i1))])


def naive_gate_weights(f, s, wg, bg, activation="relu"):
    f, s, wg, bg = (np.asarray(x).tolist() for x in (f, s, wg, bg))
    act = (lambda x: x if x > 0 else 0.0) if activation == "relu" else (lambda x: 1.0 / (1.0 + math.exp(-x)))
    out = []
    for fr, sr in zip(f, s):
        x = fr + sr
        out.append([act(sum(x[t] * wg[t][c] for t in range(len(x))) + bg[0][c]) for c in range(len(wg[0]))])
    return np.array(out)


def naive_fuse(f, s, wg, bg, activation="relu"):
    g = naive_gate_weights(f, s, wg, bg, activation).tolist()
    f, s = np.asarray(f).tolist(), np.asarray(s).tolist()
    d = len(f[0])
    return np.array([[g[r][c] * f[r][c] + g[r][d + c] * s[r][c] for c in range(d)] for r in range(len(f))])


def _sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def naive_triplet_loss(joint, bgm, labels, alpha):
    joint, bgm, labels = np.asarray(joint).tolist(), np.asarray(bgm).tolist(), list(labels)
    total = 0.0
    for i in range(len(joint)):
        pos = _sqdist(joint[i], bgm[i])
        for k in range(len(bgm)):
            if labels[k] != labels[i]:
                total += max(pos - _sqdist(joint[i], bgm[k]) + alpha, 0.0)
    return total


def _nll(x, w, label):
    logits = [sum(x[t] * w[t][c] for t in range(len(x))) for c in range(len(w[0]))]
    top = max(logits)
    lse = top + math.log(sum(math.exp(z - top) for z in logits))
    return lse - logits[label]


def naive_pseudo_label_loss(joint, bgm, labels, wj, wm):
    joint, bgm, wj, wm = (np.asarray(x).tolist() for x in (joint, bgm, wj, wm))
    return sum(_nll(joint[i], wj, z) + _nll(bgm[i], wm, z) for i, z in enumerate(labels))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: max error {self.max_error:.3e} < {self.tolerance:.0e}{extra}"


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


def _param(rng, name, shape, scale=1.0):
    return Parameter(name, scale * rng.standard_normal(shape))


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def oracle_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], np.ndarray], Callable[[], np.ndarray]]]:
    """One random small instance (dims <= 6) per checked operation: name -> (fast, naive)."""
    n1, n2 = rng.integers(1, 7, size=2)
    n_heads = int(rng.integers(1, 4))
    d_v = int(rng.integers(1, 7 // n_heads + 1))
    d_model = n_heads * d_v
    d_k = int(rng.integers(1, 7))
    i1 = rng.standard_normal((n1, d_model))
    i2 = rng.standard_normal((n2, d_model))
    heads = [
        (_param(rng, "wq", (d_model, d_k)), _param(rng, "wk", (d_model, d_k)), _param(rng, "wv", (d_model, d_v)))
        for _ in range(n_heads)
    ]
    att = AttentionParams(heads, _param(rng, "wo", (d_model, d_model)))
    raw_heads = [tuple(w.value for w in h) for h in heads]

    length, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    f = rng.standard_normal((length, d))
    s = rng.standard_normal((length, d))
    gate = GateParams(_param(rng, "wg", (2 * d, 2 * d)), _param(rng, "bg", (1, 2 * d)))

    pairs, d_e, n_labels = int(rng.integers(2, 7)), int(rng.integers(1, 7)), int(rng.integers(2, 7))
    labels = rng.integers(0, n_labels, size=pairs)
    joint, bgm = _unit_rows(rng, pairs, d_e), _unit_rows(rng, pairs, d_e)
    alpha = float(rng.uniform(0.0, 2.0))
    wj, wm = rng.standard_normal((d_e, n_labels)), rng.standard_normal((d_e, n_labels))
    batch = TripletBatch(Tensor(joint), Tensor(bgm), labels)

    return {
        "attention_head": (
            lambda: attention_head(Tensor(i1), Tensor(i2), heads[0]).value,
            lambda: naive_attention_head(i1, i2, *raw_heads[0]),
        ),
        "chi": (
            lambda: chi(Tensor(i1), Tensor(i2), att).value,
            lambda: naive_chi(i1, i2, raw_heads, att.wo.value),
        ),
        "gate_weights": (
            lambda: gate_weights(Tensor(f), Tensor(s), gate).value,
            lambda: naive_gate_weights(f, s, gate.wg.value, gate.bg.value),
        ),
        "fuse": (
            lambda: fuse(Tensor(f), Tensor(s), gate).value,
            lambda: naive_fuse(f, s, gate.wg.value, gate.bg.value),
        ),
        "triplet_loss": (
            lambda: triplet_loss(batch, alpha).value,
            lambda: naive_triplet_loss(joint, bgm, labels, alpha),
        ),
        "pseudo_label_loss": (
            lambda: pseudo_label_loss(batch, Tensor(wj), Tensor(wm)).value,
            lambda: naive_pseudo_label_loss(joint, bgm, labels, wj, wm),
        ),
    }


def run_oracle_suite(n_instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    with warnings.catch_warnings():
        # instances whose labels all coincide are valid and expected
        warnings.simplefilter("ignore", EmptyTripletWarning)
        for _ in range(n_instances):
            for name, (fast, naive) in oracle_cases(rng).items():
                worst[name] = max(worst.get(name, 0.0), rel_error(fast(), naive()))
    return [CheckResult(f"oracle/{name}", err, ORACLE_TOL, f"{n_instances} instances") for name, err in worst.items()]


GRADCHECK_CONFIG = ModelConfig(
    d_fast=2, d_slow=2, d_vo=2, d_bgm=2, d_model=16, n_heads=2, d_k=2, d_v=8, seq_len=4, d_embed=4, n_labels=2
)


@dataclass
class PipelineProblem:
    params: ModelParameters
    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    alpha: float
    loss_cfg: LossConfig

    def loss(self) -> Tensor:
        p = self.params
        joint = joint_branch(self.inputs["video_fast"], self.inputs["video_slow"], self.inputs["voiceover"], p)
        bgm = bgm_embed(self.inputs["bgm"], p)
        batch = TripletBatch(joint["embedding"], bgm, self.labels)
        return total_loss(batch, self.alpha, self.loss_cfg, p["classifier_wj"], p["classifier_wm"]).total

    def kink_clearance(self) -> float:
        """Smallest |input| over every ReLU in the graph (gate and triplet hinge)."""
        p = self.params
        br = joint_branch(self.inputs["video_fast"], self.inputs["video_slow"], self.inputs["voiceover"], p)
        x = np.concatenate([br["video_cma"].value, br["voiceover_cma"].value], axis=-1)
        pre = x @ p["gate.wg"].value + p["gate.bg"].value
        j = br["embedding"].value
        m = bgm_embed(self.inputs["bgm"], p).value
        d2 = ((j[:, None, :] - m[None, :, :]) ** 2).sum(-1)
        hinge = np.diag(d2)[:, None] - d2 + self.alpha
        neg = self.labels[:, None] != self.labels[None, :]
        return float(min(np.abs(pre).min(), np.abs(hinge[neg]).min() if neg.any() else np.inf))


def pipeline_problem(seed: int, cfg: ModelConfig = GRADCHECK_CONFIG, pairs: int = 2) -> PipelineProblem:
    """Random full-pipeline loss on ``pairs`` positive pairs with distinct labels."""
    params = init_parameters(cfg, seed)
    rng = np.random.default_rng(seed)
    for prm in params:
        if prm.name.endswith(".b") or prm.name.endswith(".bg"):
            prm.value[...] = 0.1 * rng.standard_normal(prm.shape)
    inputs = {
        "video_fast": rng.standard_normal((pairs, cfg.seq_len, cfg.d_fast)),
        "video_slow": rng.standard_normal((pairs, cfg.seq_len, cfg.d_slow)),
        "voiceover": rng.standard_normal((pairs, cfg.seq_len, cfg.d_vo)),
        "bgm": rng.standard_normal((pairs, cfg.seq_len, cfg.d_bgm)),
    }
    labels = rng.permutation(cfg.n_labels)[:pairs]
    loss_cfg = LossConfig()
    # the unscaled margin keeps every triplet hinge active, away from its kink
    return PipelineProblem(params, inputs, labels, margin_at(0, loss_cfg), loss_cfg)


def run_gradcheck_suite(n_seeds: int = 20, h: float = 1e-5, max_tries: int | None = None) -> list[CheckResult]:
    """Full-pipeline gradient check on ``n_seeds`` seeds whose ReLU inputs clear the kink."""
    results = []
    seed = 0
    max_tries = max_tries or 5 * n_seeds
    while len(results) < n_seeds and seed < max_tries:
        prob = pipeline_problem(seed)
        clearance = prob.kink_clearance()
        if clearance > KINK_CLEARANCE:
            err = gradient_check(prob.loss, list(prob.params), h)
            n = sum(p.value.size for p in prob.params)
            results.append(CheckResult(f"gradcheck/seed{seed}", err, GRADCHECK_TOL, f"{n} entries"))
        seed += 1
    return results


# ---------------------------------------------------------------------------
# oracle checkpoint
# ---------------------------------------------------------------------------

def oracle_parameters(cfg: ModelConfig, mixing: dict[str, np.ndarray], seed: int = 0) -> ModelParameters:
    """Parameters under which a noise-free synthetic query embeds onto its own BGM.

    Attention outputs are switched off, the gate passes only the voice-over
    stream, and both audio projections invert their mixing matrices so the
    voice-over and BGM of one video land on the same latent trajectory.
    Both output layers share one random matrix.
    """
    if cfg.gate_activation != "relu":
        raise ValueError("the oracle gate relies on relu(1) == 1")
    base = init_parameters(cfg, seed).state()
    latent = mixing["bgm"].shape[1]
    if latent > cfg.d_model:
        raise ValueError(f"latent_dim {latent} exceeds d_model {cfg.d_model}")
    values = {}
    for name, shape in parameter_shapes(cfg).items():
        values[name] = np.zeros(shape) if name.endswith(".wo") or name.endswith(".b") else base[name]
    for stream, fc in (("voiceover", "voiceover_proj"), ("bgm", "bgm_proj")):
        w = np.zeros(parameter_shapes(cfg)[f"{fc}.w"])
        w[:, :latent] = np.linalg.pinv(mixing[stream]).T
        values[f"{fc}.w"] = w
    values["gate.wg"] = np.zeros((2 * cfg.d_model, 2 * cfg.d_model))
    values["gate.bg"] = np.concatenate([np.zeros(cfg.d_model), np.ones(cfg.d_model)])[None, :]
    values["joint_out.w"] = base["bgm_out.w"]
    return ModelParameters(cfg, values)
