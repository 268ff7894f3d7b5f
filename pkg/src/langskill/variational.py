"""Segment-merging training: constrained sampling, the evidence bound,
the code-length auxiliary losses, the joint objective with warm-up, and
skill-library extraction.

Losses use natural-log units throughout. Steps where the initial
segmentation forbids a switch contribute nothing to the divergence or
code-length terms: no choice exists there, so no information flows.
"""
from __future__ import annotations

import copy
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import EnrichedTrajectory, LatentAssignment
from .nets import (
    NetConfig,
    PaddedBatch,
    RelaxationConfig,
    SkillModel,
    pad_batch,
    q_forward,
    relaxed_categorical_sample,
    save_checkpoint,
    shift_right,
)


@dataclass
class TrainConfig:
    mdl_weight: float = 0.1  # lambda: pressure toward fewer, surer skills
    kl_weight: float = 1e-4
    learning_rate: float = 3e-4
    batch_size: int = 16
    n_skills: int = 100
    total_epochs: int = 80
    warmup_epochs: int | None = None  # default: 10% of total_epochs
    temperature_start: float = 1.0
    temperature_end: float = 0.3
    hard_samples: bool = False
    prune_threshold: float = 0.01
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 0  # epochs; 0 = final only

    def __post_init__(self):
        if self.mdl_weight < 0:
            raise ValueError("mdl_weight must be >= 0")
        if not (0 <= self.prune_threshold < 1):
            raise ValueError("prune_threshold must be in [0, 1)")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return max(1, self.total_epochs // 10)


@dataclass
class SkillLibrary:
    kept_skill_ids: list[int]
    usage_counts: dict[int, int]
    n_segments: int

    def to_dict(self) -> dict:
        return {
            "kept_skill_ids": list(self.kept_skill_ids),
            "usage_counts": {str(k): v for k, v in self.usage_counts.items()},
            "n_segments": self.n_segments,
        }

    @staticmethod
    def from_dict(d: dict) -> "SkillLibrary":
        return SkillLibrary(
            kept_skill_ids=[int(k) for k in d["kept_skill_ids"]],
            usage_counts={int(k): int(v) for k, v in d["usage_counts"].items()},
            n_segments=int(d["n_segments"]),
        )


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; the model is restored to the last
    finished epoch before this is raised."""


# -- constrained sampling -----------------------------------------------------


def constrained_sample(
    beta_probs: Sequence[float],
    k_dist: np.ndarray | Callable[[int, int], np.ndarray],
    beta_bar: Sequence[int],
    rng: np.random.Generator,
) -> LatentAssignment:
    """Sample a latent assignment under the merge-only constraints.

    beta_probs[t] is the posterior switch probability; the realized switch
    is its product with the initial-segmentation flag, the first step
    always switches, and a non-switch copies the previous skill. k_dist is
    a (T, K) table or a callable (t, k_prev) -> (K,) used only at switches.
    """
    beta_bar = np.asarray(beta_bar, dtype=np.int64)
    beta_probs = np.asarray(beta_probs, dtype=np.float64)
    t_len = len(beta_bar)
    betas = np.zeros(t_len, dtype=np.int64)
    skills = np.zeros(t_len, dtype=np.int64)
    prev = -1
    for t in range(t_len):
        if t == 0:
            switch = 1
        elif beta_bar[t] == 0:
            switch = 0
        else:
            switch = int(rng.random() < beta_probs[t])
        if switch:
            probs = k_dist(t, prev) if callable(k_dist) else np.asarray(k_dist[t], dtype=np.float64)
            probs = probs / probs.sum()
            choice = int(rng.choice(len(probs), p=probs))
        else:
            choice = prev
        betas[t] = switch
        skills[t] = choice
        prev = choice
    return LatentAssignment(betas, skills)


# -- code-length losses ---------------------------------------------------------


def _entropy_terms(m: torch.Tensor) -> torch.Tensor:
    """Elementwise -m log m with the 0 log 0 = 0 convention."""
    return -m * torch.log(m.clamp_min(1e-38))


def mixture_code_lengths(
    k_probs: torch.Tensor,
    beta1_probs: torch.Tensor,
    prev_dist: torch.Tensor,
    forced: torch.Tensor,
) -> torch.Tensor:
    """Per-step nats to transmit the skill under the switch/copy mixture.

    m(k) = q(k) q(switch) + prev(k) q(stay); the expected code length is
    the entropy of m. Where forced is set (no previous skill exists) the
    switch probability is treated as 1 and the cost is the entropy of
    q(k). Shapes broadcast over leading dims; k is the last axis.
    """
    b1 = beta1_probs.unsqueeze(-1)
    mix = k_probs * b1 + prev_dist * (1.0 - b1)
    mix = torch.where(forced.unsqueeze(-1), k_probs, mix)
    return _entropy_terms(mix).sum(dim=-1)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    t = torch.from_numpy(arr) if arr.dtype != object else torch.tensor(arr.tolist())
    return t if dtype is None else t.to(dtype)


def mdl_loss(
    k_probs,
    beta1_probs,
    beta_bar,
    prev_skills,
) -> torch.Tensor:
    """Total expected code length of a trajectory's skill sequence in nats.

    k_probs: (T, K) posterior skill probabilities along the realized path;
    beta1_probs: (T,) posterior switch probabilities; beta_bar: (T,)
    initial-segmentation flags (0 steps are code-free); prev_skills: (T,)
    previous-skill ids with -1 meaning none (the step must transmit).
    """
    k_probs = _as_tensor(k_probs)
    dtype = k_probs.dtype if k_probs.is_floating_point() else torch.float64
    k_probs = k_probs.to(dtype)
    if k_probs.ndim == 1:
        k_probs = k_probs.unsqueeze(0)
    t_len, n_k = k_probs.shape
    beta1 = _as_tensor(beta1_probs, dtype).reshape(t_len)
    bbar = _as_tensor(beta_bar).reshape(t_len)
    prev = _as_tensor(prev_skills).reshape(t_len).long()
    forced = prev < 0
    prev_dist = F.one_hot(prev.clamp_min(0), n_k).to(dtype)
    per_step = mixture_code_lengths(k_probs, beta1, prev_dist, forced)
    return (per_step * (bbar != 0).to(dtype)).sum()


def love_loss(k_probs, beta) -> torch.Tensor:
    """Comparison code length that ignores the copy branch: each step
    pays the entropy of q(k) weighted by the (sampled or expected) switch."""
    k_probs = _as_tensor(k_probs)
    dtype = k_probs.dtype if k_probs.is_floating_point() else torch.float64
    k_probs = k_probs.to(dtype)
    if k_probs.ndim == 1:
        k_probs = k_probs.unsqueeze(0)
    weights = _as_tensor(beta, dtype).reshape(k_probs.shape[0])
    entropy = _entropy_terms(k_probs).sum(dim=-1)
    return (weights * entropy).sum()


# -- evidence-bound machinery ------------------------------------------------------


@dataclass
class LossParts:
    total: torch.Tensor  # minimized: -(recon - kl_weight * (kl_beta + kl_k))
    recon: torch.Tensor
    kl_beta: torch.Tensor
    kl_k: torch.Tensor
    mdl: torch.Tensor

    @property
    def elbo(self) -> torch.Tensor:
        """The maximized bound estimate (negated total)."""
        return -self.total


def _categorical_kl(q_logits: torch.Tensor, p_logits: torch.Tensor) -> torch.Tensor:
    """KL between categorical distributions given logits, over the last dim."""
    q_log = F.log_softmax(q_logits, dim=-1)
    p_log = F.log_softmax(p_logits, dim=-1)
    return (q_log.exp() * (q_log - p_log)).sum(dim=-1)


def _sequential_q_pass(
    model: SkillModel,
    batch: PaddedBatch,
    features: torch.Tensor,
    beta_logits: torch.Tensor,
    rng: torch.Generator,
    relax: RelaxationConfig,
):
    """Walk the constrained sampler over a padded batch.

    Returns the relaxed latent path plus the path-conditioned skill
    logits. Rows are advanced in lockstep; steps where the segmentation
    forbids switching (or that are padding) copy the previous skill.
    """
    b, t_len = batch.b, batch.t
    dtype = features.dtype
    k = model.cfg.n_skills
    k_prev = torch.zeros(b, k, dtype=dtype)
    k_path, beta_path, k_logits_path = [], [], []
    beta1_soft = torch.zeros(b, t_len, dtype=dtype)
    free = (batch.beta_bar == 1) & batch.valid
    for t in range(t_len):
        if t == 0:
            b_val = torch.ones(b, dtype=dtype)
        else:
            sample = relaxed_categorical_sample(beta_logits[:, t], relax, rng)
            b_val = torch.where(free[:, t], sample[:, 1], torch.zeros(b, dtype=dtype))
        k_logits_t = model.q_k_logits(features[:, t], k_prev)
        k_free = relaxed_categorical_sample(k_logits_t, relax, rng)
        gate = b_val.unsqueeze(-1)
        k_t = gate * k_free + (1.0 - gate) * k_prev
        beta1_soft[:, t] = b_val
        k_path.append(k_t)
        beta_path.append(b_val)
        k_logits_path.append(k_logits_t)
        k_prev = k_t
    return (
        torch.stack(k_path, dim=1),  # (B, T, K)
        torch.stack(beta_path, dim=1),  # (B, T)
        torch.stack(k_logits_path, dim=1),  # (B, T, K)
    )


def batch_loss_parts(
    model: SkillModel,
    batch: PaddedBatch,
    rng: torch.Generator,
    kl_weight: float,
    relax: RelaxationConfig,
) -> LossParts:
    """Single-sample estimate of the per-trajectory objective, averaged
    over the batch. The switch KL is analytic per free step; the skill KL
    is weighted by the analytic switch probability along the sampled path."""
    dtype = model.dtype
    features = model.q_features(batch)
    beta_logits_q = model.q_beta_logits(features)
    k_path, beta_path, k_logits_q = _sequential_q_pass(
        model, batch, features, beta_logits_q, rng, relax
    )

    valid = batch.valid
    free = (batch.beta_bar == 1) & valid
    first = torch.zeros_like(free)
    first[:, 0] = True

    pi_logits = model.pi_logits(batch, k_path)
    log_probs = F.log_softmax(pi_logits, dim=-1)
    picked = log_probs.gather(-1, batch.act_ids.unsqueeze(-1)).squeeze(-1)
    recon = (picked * valid.to(dtype)).sum(dim=1)

    p_beta_logits, p_k_logits = model.p_outputs(batch, k_path, beta_path)
    kl_beta_steps = _categorical_kl(beta_logits_q, p_beta_logits)
    kl_beta = (kl_beta_steps * (free & ~first).to(dtype)).sum(dim=1)

    q_beta1 = F.softmax(beta_logits_q, dim=-1)[..., 1]
    kl_k_steps = _categorical_kl(k_logits_q, p_k_logits)
    k_weight = torch.where(first, torch.ones_like(q_beta1), q_beta1) * free.to(dtype)
    kl_k = (kl_k_steps * k_weight).sum(dim=1)

    k_probs_q = F.softmax(k_logits_q, dim=-1)
    prev_dist = shift_right(k_path)
    code = mixture_code_lengths(k_probs_q, q_beta1, prev_dist, first)
    mdl = (code * free.to(dtype)).sum(dim=1)

    j = recon - kl_weight * (kl_beta + kl_k)
    return LossParts(
        total=-j.mean(),
        recon=recon.mean(),
        kl_beta=kl_beta.mean(),
        kl_k=kl_k.mean(),
        mdl=mdl.mean(),
    )


def _log_pi_table(model: SkillModel, batch: PaddedBatch) -> torch.Tensor:
    """(T, K) log-probability of each observed action under every skill.
    The policy conditions only on the current skill, so one pass per skill
    value covers all steps."""
    t_len = batch.t
    k = model.cfg.n_skills
    rows = []
    for skill in range(k):
        k_path = torch.zeros(1, t_len, k, dtype=model.dtype)
        k_path[:, :, skill] = 1.0
        logits = model.pi_logits(batch, k_path)
        log_probs = F.log_softmax(logits, dim=-1)
        rows.append(log_probs[0].gather(-1, batch.act_ids[0].unsqueeze(-1)).squeeze(-1))
    return torch.stack(rows, dim=1)


def exact_elbo_parts(
    model: SkillModel, enriched: EnrichedTrajectory, kl_weight: float
) -> LossParts:
    """Analytically marginalized objective for one trajectory.

    Walks the constrained assignment tree, accumulating closed-form
    divergences per reachable prefix and the exactly marginalized
    reconstruction term. Feasible only when the segmentation has few
    boundaries; used by the equivalence tests against the enumeration
    reference.
    """
    cfg = model.cfg
    tensors = model.prepare(enriched)
    batch = pad_batch([tensors])
    features = model.q_features(batch)[0]
    beta_logits_q = model.q_beta_logits(features)
    log_q_beta = F.log_softmax(beta_logits_q, dim=-1)
    log_pi = _log_pi_table(model, batch)

    t_len = enriched.length
    switch_points = [t for t in range(t_len) if enriched.beta_bar[t] == 1]
    spans = [
        (s, (switch_points[i + 1] if i + 1 < len(switch_points) else t_len))
        for i, s in enumerate(switch_points)
    ]
    span_logpi = torch.stack([log_pi[s:e].sum(dim=0) for s, e in spans])  # (S, K)

    dtype = features.dtype
    recon = torch.zeros((), dtype=dtype)
    kl_beta = torch.zeros((), dtype=dtype)
    kl_k = torch.zeros((), dtype=dtype)
    # mdl over the tree is not needed here; the sampled path covers it

    def p_logits_at(t: int, k_prefix: list[int], beta_prefix: list[int]):
        k_path = torch.zeros(1, t_len, cfg.n_skills, dtype=dtype)
        beta_path = torch.zeros(1, t_len, dtype=dtype)
        for i, (kk, bb) in enumerate(zip(k_prefix, beta_prefix)):
            k_path[0, i, kk] = 1.0
            beta_path[0, i] = bb
        p_beta, p_k = model.p_outputs(batch, k_path, beta_path)
        return p_beta[0, t], p_k[0, t]

    def walk(i: int, k_prev: int, weight: torch.Tensor, k_prefix: list[int], beta_prefix: list[int]):
        nonlocal recon, kl_beta, kl_k
        if float(weight.detach()) == 0.0 or i == len(spans):
            return
        t, end = spans[i]
        p_beta_logits, p_k_logits = p_logits_at(t, k_prefix, beta_prefix)
        k_prev_onehot = torch.zeros(1, cfg.n_skills, dtype=dtype)
        if k_prev >= 0:
            k_prev_onehot[0, k_prev] = 1.0
        k_logits_q = model.q_k_logits(features[t : t + 1], k_prev_onehot)[0]
        log_qk = F.log_softmax(k_logits_q, dim=-1)
        qk = log_qk.exp()
        kl_k_step = (qk * (log_qk - F.log_softmax(p_k_logits, dim=-1))).sum()

        span_fill = [0] * (end - t - 1)
        if t == 0:
            kl_k = kl_k + weight * kl_k_step
            for k in range(cfg.n_skills):
                w = weight * qk[k]
                recon = recon + w * span_logpi[i, k]
                walk(i + 1, k, w, k_prefix + [k] + [k] * len(span_fill), beta_prefix + [1] + span_fill)
        else:
            qb = log_q_beta[t].exp()
            kl_beta_step = (qb * (log_q_beta[t] - F.log_softmax(p_beta_logits, dim=-1))).sum()
            kl_beta = kl_beta + weight * kl_beta_step
            kl_k = kl_k + weight * qb[1] * kl_k_step
            w_stay = weight * qb[0]
            recon = recon + w_stay * span_logpi[i, k_prev]
            walk(
                i + 1,
                k_prev,
                w_stay,
                k_prefix + [k_prev] * (end - t),
                beta_prefix + [0] + span_fill,
            )
            for k in range(cfg.n_skills):
                w = weight * qb[1] * qk[k]
                recon = recon + w * span_logpi[i, k]
                walk(i + 1, k, w, k_prefix + [k] + [k] * len(span_fill), beta_prefix + [1] + span_fill)

    walk(0, -1, torch.ones((), dtype=dtype), [], [])
    j = recon - kl_weight * (kl_beta + kl_k)
    zero = torch.zeros((), dtype=dtype)
    return LossParts(total=-j, recon=recon, kl_beta=kl_beta, kl_k=kl_k, mdl=zero)


def elbo_loss(
    model: SkillModel,
    enriched: EnrichedTrajectory | Sequence[EnrichedTrajectory],
    rng: torch.Generator | None,
    kl_weight: float,
    relax: RelaxationConfig = RelaxationConfig(),
    mode: str = "sampled",
) -> LossParts:
    """Objective estimate, negated for minimization.

    mode="sampled" draws one relaxed latent path; mode="exact" marginalizes
    over all feasible assignments (single trajectory, small instances).
    """
    items = [enriched] if isinstance(enriched, EnrichedTrajectory) else list(enriched)
    if not items:
        raise ValueError("empty batch")
    if mode == "exact":
        if len(items) != 1:
            raise ValueError("exact mode takes a single trajectory")
        parts = exact_elbo_parts(model, items[0], kl_weight)
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        batch = pad_batch([model.prepare(it) for it in items])
        parts = batch_loss_parts(model, batch, rng, kl_weight, relax)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not torch.isfinite(parts.total):
        raise TrainingDiverged(f"non-finite loss: {parts}")
    return parts


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SkillModel
    log: list[dict] = field(default_factory=list)


def _q_parameters(model: SkillModel) -> list[torch.nn.Parameter]:
    mods = [model.q_trunk, model.q_beta_head, model.q_k_head]
    return [p for m in mods for p in m.parameters()]


def train(
    corpus: Sequence[EnrichedTrajectory],
    cfg: TrainConfig,
    net_cfg: NetConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Optimize the joint objective over an enriched corpus.

    During the warm-up epochs the code-length term carries weight zero, so
    its gradient on the variational parameters is exactly zero; afterwards
    the full weight applies. The log records both objective components per
    epoch along with the measured code-length gradient norm.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if net_cfg is None:
        net_cfg = NetConfig(n_skills=cfg.n_skills)
    if net_cfg.n_skills != cfg.n_skills:
        raise ValueError("net_cfg.n_skills must match TrainConfig.n_skills")
    torch.manual_seed(cfg.seed)
    model = SkillModel(net_cfg)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    order_rng = torch.Generator().manual_seed(cfg.seed + 2)
    tensors = [model.prepare(item) for item in corpus]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    log_path = out_dir / "train_log.jsonl" if out_dir is not None else None
    last_good = copy.deepcopy(model.state_dict())
    warmup = cfg.effective_warmup
    q_params = _q_parameters(model)

    for epoch in range(cfg.total_epochs):
        frac = epoch / max(1, cfg.total_epochs - 1)
        temperature = cfg.temperature_start + frac * (cfg.temperature_end - cfg.temperature_start)
        relax = RelaxationConfig(temperature=temperature, hard=cfg.hard_samples)
        lam = 0.0 if epoch < warmup else cfg.mdl_weight
        order = torch.randperm(len(tensors), generator=order_rng).tolist()
        sums = {"elbo": 0.0, "recon": 0.0, "kl_beta": 0.0, "kl_k": 0.0, "mdl": 0.0, "total": 0.0}
        n_batches = 0
        mdl_grad_norm = 0.0
        for start in range(0, len(order), cfg.batch_size):
            picked = [tensors[i] for i in order[start : start + cfg.batch_size]]
            batch = pad_batch(picked)
            parts = batch_loss_parts(model, batch, rng, cfg.kl_weight, relax)
            mdl_term = lam * parts.mdl
            total = parts.total + mdl_term
            if not torch.isfinite(total):
                model.load_state_dict(last_good)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; restored epoch {epoch - 1} weights"
                )
            if start == 0:
                # gradient the code-length term actually contributes to q
                grads = torch.autograd.grad(
                    mdl_term, q_params, retain_graph=True, allow_unused=True
                )
                mdl_grad_norm = math.sqrt(
                    sum(float((g ** 2).sum()) for g in grads if g is not None)
                )
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sums["elbo"] += float(parts.elbo)
            sums["recon"] += float(parts.recon)
            sums["kl_beta"] += float(parts.kl_beta)
            sums["kl_k"] += float(parts.kl_k)
            sums["mdl"] += float(parts.mdl)
            sums["total"] += float(total)
            n_batches += 1
        record = {
            "epoch": epoch,
            "elbo": sums["elbo"] / n_batches,
            "recon": sums["recon"] / n_batches,
            "kl_beta": sums["kl_beta"] / n_batches,
            "kl_k": sums["kl_k"] / n_batches,
            "mdl": sums["mdl"] / n_batches,
            "total": sums["total"] / n_batches,
            "lr": cfg.learning_rate,
            "temperature": temperature,
            "mdl_weight": lam,
            "mdl_grad_norm_q": mdl_grad_norm,
        }
        log.append(record)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        last_good = copy.deepcopy(model.state_dict())
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_epoch{epoch + 1}.pt")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.pt")
    return TrainResult(model=model, log=log)


# -- skill extraction ----------------------------------------------------------------


def extract_skills(
    model: SkillModel,
    corpus: Sequence[EnrichedTrajectory],
    prune_threshold: float = 0.01,
) -> tuple[SkillLibrary, list[LatentAssignment]]:
    """Greedy argmax decode of every trajectory under the merge-only
    constraints, then keep the skills whose share of decoded segments
    reaches the threshold."""
    assignments: list[LatentAssignment] = []
    usage: Counter[int] = Counter()
    n_segments = 0
    for item in corpus:
        decode = q_forward(model, item, rng=None)
        assignment = LatentAssignment(decode.betas, decode.skills)
        assignments.append(assignment)
        for _, _, skill in assignment.segments():
            usage[skill] += 1
            n_segments += 1
    kept = sorted(
        k for k, count in usage.items() if count / max(1, n_segments) >= prune_threshold
    )
    library = SkillLibrary(
        kept_skill_ids=kept, usage_counts=dict(sorted(usage.items())), n_segments=n_segments
    )
    return library, assignments
