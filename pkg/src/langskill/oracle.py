"""Brute-force reference implementations for tiny instances.

These enumerate every feasible latent assignment or sum code lengths
directly from their definitions, independently of the training-path
implementations, so tests can check the two against each other. They ship
in the library (not in test code) so the verification CLI can run them.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import EnrichedTrajectory, LatentAssignment
from .nets import SkillModel, pad_batch


def feasible_count(beta_bar: Sequence[int], n_skills: int) -> int:
    """Number of assignments allowed by the merge-only constraints: the
    first boundary picks one of K skills; every later boundary either
    stays (1 way) or switches to one of K skills."""
    beta_bar = np.asarray(beta_bar, dtype=np.int64)
    if len(beta_bar) == 0 or beta_bar[0] != 1:
        raise ValueError("beta_bar must start with 1")
    n_boundaries = int(beta_bar.sum())
    return n_skills * (1 + n_skills) ** (n_boundaries - 1)


def enumerate_assignments(
    beta_bar: Sequence[int], n_skills: int, limit: int = 100_000
) -> list[LatentAssignment]:
    """All assignments satisfying the constraints, duplicate-free."""
    beta_bar = np.asarray(beta_bar, dtype=np.int64)
    count = feasible_count(beta_bar, n_skills)
    if count > limit:
        raise ValueError(f"{count} feasible assignments exceed the limit {limit}")
    t_len = len(beta_bar)
    switch_points = [t for t in range(t_len) if beta_bar[t] == 1]
    out: list[LatentAssignment] = []

    def build(i: int, betas: list[int], skills: list[int]):
        if i == len(switch_points):
            full_beta = np.zeros(t_len, dtype=np.int64)
            full_skill = np.zeros(t_len, dtype=np.int64)
            for idx, t in enumerate(switch_points):
                end = switch_points[idx + 1] if idx + 1 < len(switch_points) else t_len
                full_beta[t] = betas[idx]
                full_skill[t:end] = skills[idx]
            out.append(LatentAssignment(full_beta, full_skill))
            return
        if i == 0:
            for k in range(n_skills):
                build(1, [1], [k])
            return
        build(i + 1, betas + [0], skills + [skills[-1]])
        for k in range(n_skills):
            build(i + 1, betas + [1], skills + [k])

    build(0, [], [])
    assert len(out) == count
    return out


@torch.no_grad()
def _model_tables(model: SkillModel, enriched: EnrichedTrajectory):
    """Per-step distributions needed to weigh one assignment."""
    batch = pad_batch([model.prepare(enriched)])
    features = model.q_features(batch)[0]
    log_q_beta = F.log_softmax(model.q_beta_logits(features), dim=-1)
    t_len = enriched.length
    k = model.cfg.n_skills
    log_pi = torch.zeros(t_len, k, dtype=model.dtype)
    for skill in range(k):
        k_path = torch.zeros(1, t_len, k, dtype=model.dtype)
        k_path[:, :, skill] = 1.0
        lp = F.log_softmax(model.pi_logits(batch, k_path), dim=-1)
        log_pi[:, skill] = lp[0].gather(-1, batch.act_ids[0].unsqueeze(-1)).squeeze(-1)
    return batch, features, log_q_beta, log_pi


@torch.no_grad()
def _log_q_k(model: SkillModel, features: torch.Tensor, t: int, k_prev: int) -> torch.Tensor:
    k = model.cfg.n_skills
    prev = torch.zeros(1, k, dtype=features.dtype)
    if k_prev >= 0:
        prev[0, k_prev] = 1.0
    return F.log_softmax(model.q_k_logits(features[t : t + 1], prev)[0], dim=-1)


@torch.no_grad()
def _p_log_tables(model: SkillModel, batch, assignment: LatentAssignment):
    t_len = assignment.length
    k = model.cfg.n_skills
    k_path = F.one_hot(torch.from_numpy(assignment.skills), k).to(model.dtype).unsqueeze(0)
    beta_path = torch.from_numpy(assignment.beta).to(model.dtype).unsqueeze(0)
    p_beta_logits, p_k_logits = model.p_outputs(batch, k_path, beta_path)
    return (
        F.log_softmax(p_beta_logits[0], dim=-1),
        F.log_softmax(p_k_logits[0], dim=-1),
    )


def assignment_log_q(
    model: SkillModel,
    enriched: EnrichedTrajectory,
    assignment: LatentAssignment,
    features: torch.Tensor | None = None,
    log_q_beta: torch.Tensor | None = None,
) -> float:
    """log q(assignment | trajectory) under the constrained factorization."""
    if features is None or log_q_beta is None:
        _, features, log_q_beta, _ = _model_tables(model, enriched)
    total = 0.0
    prev = -1
    for t in range(enriched.length):
        if enriched.beta_bar[t] == 0:
            continue
        if t > 0:
            total += float(log_q_beta[t, assignment.beta[t]])
        if assignment.beta[t] == 1:
            total += float(_log_q_k(model, features, t, prev)[assignment.skills[t]])
        prev = int(assignment.skills[t])
    return total


def enumerate_posterior(
    model: SkillModel, enriched: EnrichedTrajectory, limit: int = 100_000
) -> list[tuple[LatentAssignment, float]]:
    """Every feasible assignment with its posterior probability."""
    assignments = enumerate_assignments(enriched.beta_bar, model.cfg.n_skills, limit)
    _, features, log_q_beta, _ = _model_tables(model, enriched)
    return [
        (a, math.exp(assignment_log_q(model, enriched, a, features, log_q_beta)))
        for a in assignments
    ]


def enumerate_elbo(model: SkillModel, enriched: EnrichedTrajectory, limit: int = 100_000) -> float:
    """Exact bound value by exhaustive summation over the posterior support:
    sum_phi q(phi) [log p(tau, phi) - log q(phi)], with the constant
    environment terms dropped on both sides."""
    assignments = enumerate_assignments(enriched.beta_bar, model.cfg.n_skills, limit)
    batch, features, log_q_beta, log_pi = _model_tables(model, enriched)
    total = 0.0
    for assignment in assignments:
        log_q = assignment_log_q(model, enriched, assignment, features, log_q_beta)
        p_beta, p_k = _p_log_tables(model, batch, assignment)
        log_p = 0.0
        for t in range(enriched.length):
            log_p += float(log_pi[t, assignment.skills[t]])
            if enriched.beta_bar[t] == 0:
                continue
            if t > 0:
                log_p += float(p_beta[t, assignment.beta[t]])
            if assignment.beta[t] == 1:
                log_p += float(p_k[t, assignment.skills[t]])
        total += math.exp(log_q) * (log_p - log_q)
    return total


def exact_code_length(
    k_probs: np.ndarray,
    beta1_probs: np.ndarray,
    beta_bar: Sequence[int],
    skill_path: Sequence[int],
) -> tuple[list[float], float]:
    """Per-step and total nats for a skill path, straight from the
    mixture definition in float64.

    Steps the segmentation marked unsplittable cost nothing; the first
    step always transmits; elsewhere the mixture weighs a fresh draw
    against copying the previous skill.
    """
    k_probs = np.asarray(k_probs, dtype=np.float64)
    if k_probs.ndim == 1:
        k_probs = k_probs[None, :]
    beta1 = np.asarray(beta1_probs, dtype=np.float64).reshape(-1)
    beta_bar = np.asarray(beta_bar, dtype=np.int64)
    path = np.asarray(skill_path, dtype=np.int64)
    per_step: list[float] = []
    for t in range(len(beta_bar)):
        if beta_bar[t] == 0:
            per_step.append(0.0)
            continue
        prev = int(path[t - 1]) if t > 0 else -1
        if prev < 0:
            m = k_probs[t].copy()
        else:
            m = k_probs[t] * beta1[t]
            m[prev] += 1.0 - beta1[t]
        per_step.append(float(-sum(p * math.log(p) for p in m if p > 0.0)))
    return per_step, float(sum(per_step))
