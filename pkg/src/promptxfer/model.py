"""Tiny decoder-only transformer with soft-prompt prepending.

Pre-norm blocks, GELU MLPs, learned positional embeddings, causal attention.
A soft prompt is an [l x d] matrix prepended at the embedding level; during
prompt tuning the model parameters stay frozen and gradient reaches the
prompt matrix only.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

PARAM_INIT_STD = 0.02
PROMPT_INIT_STD = 0.5
LN_EPS = 1e-5
MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    tie_lm_head: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "tie_lm_head": self.tie_lm_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _layer_param_names(i: int) -> list[str]:
    base = f"layers.{i}."
    names = [base + "ln1.g", base + "ln1.b"]
    for w in ("wq", "wk", "wv", "wo"):
        names += [base + "attn." + w, base + "attn." + w + "_b"]
    names += [base + "ln2.g", base + "ln2.b"]
    names += [base + "mlp.w1", base + "mlp.w1_b", base + "mlp.w2", base + "mlp.w2_b"]
    return names


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names += _layer_param_names(i)
    names += ["final_ln.g", "final_ln.b"]
    if not config.tie_lm_head:
        names.append("lm_head")
    return names


class TransformerLM:
    """A tiny causal LM; plays either side of a teacher/student pair."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_names(config)
        if list(params.keys()) != expected:
            missing = set(expected) ^ set(params.keys())
            raise ValueError(f"parameter set does not match config: {sorted(missing)}")
        self.config = config
        self.params = params
        self.provenance: dict = {}
        self._mask_cache: dict[tuple[int, str], np.ndarray] = {}

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def set_trainable(self, flag: bool, exclude: Sequence[str] = ()) -> None:
        for name, p in self.params.items():
            p.requires_grad = flag and name not in exclude

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = self.params[name].data
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward ------------------------------------------------------------

    def _mask(self, n: int, dtype) -> np.ndarray:
        key = (n, str(dtype))
        m = self._mask_cache.get(key)
        if m is None:
            m = np.triu(np.full((n, n), MASK_FILL, dtype=dtype), k=1)
            self._mask_cache[key] = m
        return m

    def _resolve_prompt(self, prompt):
        if prompt is None:
            return None
        if isinstance(prompt, Tensor):
            mat = prompt
        elif isinstance(prompt, SoftPrompt):
            mat = ag._new(prompt.matrix)
        else:
            mat = ag._new(np.asarray(prompt))
        if mat.ndim != 2 or mat.shape[1] != self.config.d_model:
            raise ValueError(
                f"prompt/model dimension mismatch: prompt width "
                f"{mat.shape[-1] if mat.ndim else '?'} vs d_model {self.config.d_model}"
            )
        return mat

    def forward(self, token_ids, prompt=None, return_hidden: bool = False):
        """Logits over every position: [(l + n_tokens) x vocab]."""
        ids = np.asarray(token_ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        out = self._forward_batch(ids, self._resolve_prompt(prompt), return_hidden)
        if not squeeze:
            return out
        if return_hidden:
            logits, hidden = out
            return ag.narrow(logits, 0, 0, 1).reshape(logits.shape[1:]), ag.narrow(
                hidden, 0, 0, 1
            ).reshape(hidden.shape[1:])
        return ag.narrow(out, 0, 0, 1).reshape(out.shape[1:])

    def _forward_batch(self, ids: np.ndarray, pmat: Tensor | None, return_hidden: bool):
        cfg = self.config
        bsz, n_tok = ids.shape
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError("token id out of range for vocabulary")
        l = 0 if pmat is None else pmat.shape[0]
        total = l + n_tok
        if total > cfg.max_seq_len:
            raise ValueError(f"sequence length {total} exceeds max_seq_len {cfg.max_seq_len}")

        tok = ag.take(self.params["tok_emb"], ids.reshape(-1), axis=0).reshape((bsz, n_tok, cfg.d_model))
        if pmat is not None:
            rows = ag.broadcast_to(pmat.reshape((1, l, cfg.d_model)), (bsz, l, cfg.d_model))
            x = ag.concat([rows, tok], axis=1)
        else:
            x = tok
        pos = ag.take(self.params["pos_emb"], np.arange(total), axis=0)
        x = x + pos.reshape((1, total, cfg.d_model))

        for i in range(cfg.n_layers):
            x = x + self._attention(self._layer_norm(x, f"layers.{i}.ln1"), i, total)
            x = x + self._mlp(self._layer_norm(x, f"layers.{i}.ln2"), i)
        h = self._layer_norm(x, "final_ln")

        if cfg.tie_lm_head:
            logits = ag.matmul(h, ag.transpose(self.params["tok_emb"], (1, 0)))
        else:
            logits = ag.matmul(h, self.params["lm_head"])
        if return_hidden:
            return logits, h
        return logits

    def _layer_norm(self, x: Tensor, name: str) -> Tensor:
        g, b = self.params[name + ".g"], self.params[name + ".b"]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * ((var + LN_EPS) ** -0.5) * g + b

    def _attention(self, x: Tensor, i: int, total: int) -> Tensor:
        cfg = self.config
        bsz = x.shape[0]
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        base = f"layers.{i}.attn."

        def proj(name):
            out = ag.matmul(x, self.params[base + name]) + self.params[base + name + "_b"]
            return ag.transpose(out.reshape((bsz, total, nh, dh)), (0, 2, 1, 3))

        q, k, v = proj("wq"), proj("wk"), proj("wv")
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        scores = scores + self._mask(total, x.data.dtype)
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)).reshape((bsz, total, cfg.d_model))
        return ag.matmul(ctx, self.params[base + "wo"]) + self.params[base + "wo_b"]

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        base = f"layers.{i}.mlp."
        h = ag.gelu(ag.matmul(x, self.params[base + "w1"]) + self.params[base + "w1_b"])
        return ag.matmul(h, self.params[base + "w2"]) + self.params[base + "w2_b"]


def init_model(config: ModelConfig, seed: int) -> TransformerLM:
    """Scaled-Gaussian init (std 0.02; residual output projections shrunk
    by 1/sqrt(2*n_layers)); deterministic in seed."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    res_std = PARAM_INIT_STD / math.sqrt(2.0 * config.n_layers)

    def gauss(*shape, std=PARAM_INIT_STD):
        return Tensor(rng.normal(0.0, std, size=shape))

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    def ones(*shape):
        return Tensor(np.ones(shape))

    params: dict[str, Tensor] = {}
    params["tok_emb"] = gauss(config.vocab_size, d)
    params["pos_emb"] = gauss(config.max_seq_len, d)
    for i in range(config.n_layers):
        base = f"layers.{i}."
        params[base + "ln1.g"], params[base + "ln1.b"] = ones(d), zeros(d)
        for w in ("wq", "wk", "wv"):
            params[base + "attn." + w] = gauss(d, d)
            params[base + "attn." + w + "_b"] = zeros(d)
        params[base + "attn.wo"] = gauss(d, d, std=res_std)
        params[base + "attn.wo_b"] = zeros(d)
        params[base + "ln2.g"], params[base + "ln2.b"] = ones(d), zeros(d)
        params[base + "mlp.w1"] = gauss(d, 4 * d)
        params[base + "mlp.w1_b"] = zeros(4 * d)
        params[base + "mlp.w2"] = gauss(4 * d, d, std=res_std)
        params[base + "mlp.w2_b"] = zeros(d)
    params["final_ln.g"], params["final_ln.b"] = ones(d), zeros(d)
    if not config.tie_lm_head:
        params["lm_head"] = gauss(d, config.vocab_size)
    return TransformerLM(config, params)


# -- soft prompts -----------------------------------------------------------


@dataclass
class DpMeta:
    epsilon: float
    delta: float
    sigma: float
    clip_norm: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.sigma <= 0 or self.clip_norm <= 0:
            raise ValueError("sigma and clip_norm must be positive")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "sigma": self.sigma, "clip_norm": self.clip_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "DpMeta":
        return cls(**d)


@dataclass
class SoftPrompt:
    """Trainable prompt rows plus the provenance the transfer step needs."""

    matrix: np.ndarray
    init_seed: int
    init_scheme: str
    source_fingerprint: str
    dp_meta: DpMeta | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError("prompt matrix must be [l x d] with l >= 1")
        if self.init_scheme not in ("gaussian", "embedding_sample"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def replace_matrix(self, matrix: np.ndarray, source_fingerprint: str | None = None) -> "SoftPrompt":
        return SoftPrompt(
            matrix=matrix,
            init_seed=self.init_seed,
            init_scheme=self.init_scheme,
            source_fingerprint=source_fingerprint or self.source_fingerprint,
            dp_meta=self.dp_meta,
        )


def initial_prompt_matrix(
    d_model: int,
    length: int,
    seed: int,
    scheme: str = "gaussian",
    token_embedding: np.ndarray | None = None,
) -> np.ndarray:
    """Regenerable initial prompt rows; the transfer step re-derives these."""
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        return rng.normal(0.0, PROMPT_INIT_STD, size=(length, d_model)).astype(np.float32)
    if scheme == "embedding_sample":
        if token_embedding is None:
            raise ValueError("embedding_sample init needs the token embedding table")
        rows = rng.integers(0, token_embedding.shape[0], size=length)
        return np.asarray(token_embedding, dtype=np.float32)[rows].copy()
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_prompt(model: TransformerLM, length: int, seed: int, scheme: str = "gaussian") -> SoftPrompt:
    mat = initial_prompt_matrix(
        model.config.d_model, length, seed, scheme, token_embedding=model.params["tok_emb"].data
    )
    return SoftPrompt(matrix=mat, init_seed=seed, init_scheme=scheme, source_fingerprint=model.fingerprint())


# -- losses and classification ---------------------------------------------


def lm_loss(model: TransformerLM, token_ids, prompt=None) -> Tensor:
    """Mean next-token cross-entropy over real-token targets only."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] < 2:
        raise ValueError("lm_loss needs at least 2 tokens")
    pmat = model._resolve_prompt(prompt)
    l = 0 if pmat is None else pmat.shape[0]
    logits = model._forward_batch(ids, pmat, return_hidden=False)
    pred = ag.narrow(logits, 1, l, ids.shape[1] - 1)
    lp = ag.log_softmax(pred, axis=-1)
    picked = ag.take_along_last(lp, ids[:, 1:])
    return -picked.mean()


def label_set_log_probability(logits, verbalizers: Sequence[Sequence[int]]) -> Tensor:
    """Per-class log probability: average softmax mass over each class's
    verbalizer tokens, renormalized across classes.  Computed in log space."""
    _validate_verbalizers(verbalizers)
    t = logits if isinstance(logits, Tensor) else ag._new(np.asarray(logits))
    ls = ag.log_softmax(t, axis=-1)
    cols = []
    for ids in verbalizers:
        ids = list(ids)
        sel = ag.take(ls, ids, axis=-1)
        avg = ag.logsumexp(sel, axis=-1, keepdims=True) - math.log(len(ids))
        cols.append(avg)
    raw = ag.concat(cols, axis=-1)
    return raw - ag.logsumexp(raw, axis=-1, keepdims=True)


def label_set_probability(logits, verbalizers: Sequence[Sequence[int]]) -> np.ndarray:
    """Renormalized class probability vector (sums to 1)."""
    return np.exp(label_set_log_probability(logits, verbalizers).data)


def _validate_verbalizers(verbalizers: Sequence[Sequence[int]]) -> None:
    if not verbalizers:
        raise ValueError("verbalizers must be non-empty")
    seen: set[int] = set()
    for ids in verbalizers:
        ids = list(ids)
        if not ids:
            raise ValueError("each class needs at least one verbalizer token")
        if seen.intersection(ids):
            raise ValueError("verbalizer sets must be pairwise disjoint")
        seen.update(ids)


def classify(model: TransformerLM, token_ids, verbalizers, prompt=None) -> tuple[int, np.ndarray]:
    """Text-infilling classification at the final input position.

    Ties break toward the lowest class id (np.argmax convention).
    """
    logits = model.forward(np.asarray(token_ids), prompt=prompt)
    dist = label_set_probability(logits.data[-1], verbalizers)
    return int(np.argmax(dist)), dist


def class_log_probs_batch(
    model: TransformerLM,
    sequences: Sequence[np.ndarray],
    verbalizers,
    prompt=None,
) -> np.ndarray:
    """[n x n_classes] answer-position class log-probs; batches by length."""
    _validate_verbalizers(verbalizers)
    pmat = model._resolve_prompt(prompt)
    n = len(sequences)
    out = np.zeros((n, len(verbalizers)), dtype=np.float64)
    buckets: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        buckets.setdefault(len(seq), []).append(i)
    for length, idxs in sorted(buckets.items()):
        ids = np.stack([np.asarray(sequences[i], dtype=np.int64) for i in idxs])
        logits = model._forward_batch(ids, pmat, return_hidden=False)
        last = ag.narrow(logits, 1, logits.shape[1] - 1, 1).reshape((len(idxs), -1))
        lp = label_set_log_probability(last, verbalizers)
        out[idxs] = lp.data.astype(np.float64)
    return out


def classify_batch(model, sequences, verbalizers, prompt=None) -> np.ndarray:
    """Predicted class ids for a list of token sequences."""
    return np.argmax(class_log_probs_batch(model, sequences, verbalizers, prompt=prompt), axis=1)
