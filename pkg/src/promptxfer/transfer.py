"""Cross-model prompt transfer using public data only.

The target prompt starts from the source prompt's regenerated initial rows
and is optimized so the prompted teacher (1) mimics the prompted student's
predictions and (2) reproduces the prediction *shift* the prompt induces,
with a mixing weight alpha.  Distributions are compared over the
verbalizer-aggregated class space by default; shift terms are differences of
log-probabilities renormalized through softmax so the divergence is
well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import LabeledDataset
from .model import SoftPrompt, TransformerLM, initial_prompt_matrix, label_set_log_probability
from .optim import Optimizer


@dataclass(frozen=True)
class HeuristicInputs:
    zero_shot: float
    compressed: float
    random_guess: float

    def __post_init__(self):
        for name in ("zero_shot", "compressed"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be a percentage in [0, 100]")
        if not 0 < self.random_guess < 100:
            raise ValueError("random_guess must lie in (0, 100)")
        if self.compressed == self.random_guess:
            raise ValueError("compressed accuracy equals random guess; mixing quotient undefined")


def alpha_heuristic(h: HeuristicInputs) -> float:
    """clamp((ZS - RG) / (C - RG), 0, 1): more weight on the shift term when
    the target model is already strong relative to the compressed one."""
    raw = (h.zero_shot - h.random_guess) / (h.compressed - h.random_guess)
    return min(max(raw, 0.0), 1.0)


@dataclass
class TransferConfig:
    alpha: float = 0.5
    steps: int = 1000
    learning_rate: float = 0.001
    batch_size: int = 32
    label_space: str = "class_distribution"
    seed: int = 0
    init_from: str = "initial"  # or "tuned": start from the tuned source rows

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.steps < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0; batch_size and learning_rate positive")
        if self.label_space not in ("class_distribution", "full_vocab"):
            raise ValueError("label_space must be class_distribution or full_vocab")
        if self.init_from not in ("initial", "tuned"):
            raise ValueError("init_from must be initial or tuned")


def transfer_loss(
    teacher_prompted_logits: Tensor,
    teacher_plain_logits,
    student_prompted_logits,
    student_plain_logits,
    alpha: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, l1, l2) for one example over a shared label space.

    l1 imitates the prompted student's distribution; l2 aligns the
    prompt-induced shift (softmax-renormalized logit deltas).  Gradient
    flows only into teacher_prompted_logits.
    """
    s_p = _as_const(student_prompted_logits)
    s_0 = _as_const(student_plain_logits)
    t_0 = _as_const(teacher_plain_logits)
    for name, vec in (("teacher_plain", t_0), ("student_prompted", s_p), ("student_plain", s_0)):
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{name} logits contain non-finite values")
    l1 = ag.kl_divergence(s_p, teacher_prompted_logits)
    l2 = ag.kl_divergence(s_p - s_0, teacher_prompted_logits - ag._new(t_0))
    total = l1 * (1.0 - alpha) + l2 * alpha
    return total, l1, l2


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _answer_class_log_probs(
    model: TransformerLM, ids: np.ndarray, pmat, verbalizers, label_space: str
) -> Tensor:
    """[batch x label-space] log distribution at the answer position."""
    logits = model._forward_batch(ids, pmat, return_hidden=False)
    last = ag.narrow(logits, 1, logits.shape[1] - 1, 1).reshape((ids.shape[0], logits.shape[2]))
    if label_space == "full_vocab":
        return ag.log_softmax(last, axis=-1)
    return label_set_log_probability(last, verbalizers)


def _static_log_probs(model, dataset, prompt_matrix, label_space) -> np.ndarray:
    """Constant per-example log distributions, batched by length."""
    model.set_trainable(False)
    n = len(dataset)
    width = dataset.vocab.size if label_space == "full_vocab" else dataset.n_classes
    out = np.zeros((n, width), dtype=np.float64)
    buckets: dict[int, list[int]] = {}
    for i in range(n):
        buckets.setdefault(len(dataset.templated(i)), []).append(i)
    pmat = None if prompt_matrix is None else ag._new(np.asarray(prompt_matrix))
    for _, rows in sorted(buckets.items()):
        ids = np.stack([dataset.templated(i) for i in rows])
        lp = _answer_class_log_probs(model, ids, pmat, dataset.verbalizers, label_space)
        out[rows] = lp.data.astype(np.float64)
    return out


def transfer_prompt(
    teacher: TransformerLM,
    student: TransformerLM,
    p_s: SoftPrompt,
    public_data: LabeledDataset,
    config: TransferConfig,
) -> tuple[SoftPrompt, list[dict]]:
    """Derive the teacher-side prompt from p_s using public data only.

    Private data is deliberately not an argument; dp_meta rides along
    unchanged (post-processing).  Returns (p_t, per-step loss history).
    """
    d = teacher.config.d_model
    if student.config.d_model != d or p_s.width != d:
        raise ValueError("prompt/model dimension mismatch")
    if len(public_data) == 0:
        raise ValueError("public dataset is empty")

    if config.init_from == "tuned":
        start = p_s.matrix.copy()
    else:
        start = initial_prompt_matrix(
            d, p_s.length, p_s.init_seed, p_s.init_scheme,
            token_embedding=student.params["tok_emb"].data,
        )
    teacher.set_trainable(False)
    student.set_trainable(False)

    # static sides: prompted/plain student and plain teacher, all constants
    s_prompted = _static_log_probs(student, public_data, p_s.matrix, config.label_space)
    s_plain = _static_log_probs(student, public_data, None, config.label_space)
    t_plain = _static_log_probs(teacher, public_data, None, config.label_space)
    delta_s = s_prompted - s_plain

    p_t = Tensor(start.copy(), requires_grad=True)
    opt = Optimizer([p_t], kind="adam", learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(public_data)
    alpha = float(config.alpha)
    history: list[dict] = []

    order = rng.permutation(n)
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size

        buckets: dict[int, list[int]] = {}
        for i in idx:
            buckets.setdefault(len(public_data.templated(i)), []).append(int(i))
        total = l1_sum = l2_sum = None
        for _, rows in sorted(buckets.items()):
            ids = np.stack([public_data.templated(i) for i in rows])
            t_lp = _answer_class_log_probs(
                teacher, ids, p_t, public_data.verbalizers, config.label_space
            )
            part1 = _kl_rows(s_prompted[rows], t_lp)
            part2 = _kl_rows(delta_s[rows], t_lp - ag._new(t_plain[rows]))
            total_part = part1 * (1.0 - alpha) + part2 * alpha
            total = total_part if total is None else total + total_part
            l1_sum = part1 if l1_sum is None else l1_sum + part1
            l2_sum = part2 if l2_sum is None else l2_sum + part2
        total = total * (1.0 / len(idx))
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(
            {
                "step": step,
                "total": total.item(),
                "l1": l1_sum.item() / len(idx),
                "l2": l2_sum.item() / len(idx),
            }
        )

    p_t_prompt = SoftPrompt(
        matrix=p_t.data.astype(np.float32),
        init_seed=p_s.init_seed,
        init_scheme=p_s.init_scheme,
        source_fingerprint=teacher.fingerprint(),
        dp_meta=p_s.dp_meta,
    )
    return p_t_prompt, history


def _kl_rows(ref_log_probs: np.ndarray, adj_logits: Tensor) -> Tensor:
    """Sum over rows of KL(softmax(ref) || softmax(adj)); ref rows constant.

    ref rows are log-probabilities (or logit deltas); both sides are
    renormalized through log-softmax, so any common shift cancels.
    """
    ref_ls = ag._np_log_softmax(np.asarray(ref_log_probs), axis=-1)
    p = np.exp(ref_ls)
    adj_ls = ag.log_softmax(adj_logits, axis=-1)
    return ag.tsum(ag.mul(ag._new(p), ag.sub(ag._new(ref_ls), adj_ls)))


def direct_transfer(p_s: SoftPrompt, teacher: TransformerLM) -> SoftPrompt:
    """Rebadge the tuned source rows for the teacher; no optimization."""
    if p_s.width != teacher.config.d_model:
        raise ValueError("prompt/model dimension mismatch")
    return SoftPrompt(
        matrix=p_s.matrix.copy(),
        init_seed=p_s.init_seed,
        init_scheme=p_s.init_scheme,
        source_fingerprint=teacher.fingerprint(),
        dp_meta=p_s.dp_meta,
    )
