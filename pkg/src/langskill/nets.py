"""Sequence models for the three learned distributions.

One shared set of per-modality encoders (observation, action, annotation,
goal, skill) feeds three transformers:

* a bidirectional variational encoder that reads the whole annotated
  trajectory and predicts per-step switch and skill logits,
* a causally masked prior encoder that sees only the history and is the
  deployable high-level policy,
* a causally masked low-level policy that maps observations, the current
  skill, and the goal to action logits.

Switch and skill heads sit on a shared trunk. The previous skill reaches
the variational skill head as an embedded one-hot next to the trunk
feature (the trunk itself never sees sampled skills, so nothing sampled
leaks across time), while the prior and policy receive skill embeddings
in their step inputs. Discrete choices are trained through temperature
relaxation with an optional straight-through hard forward.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EnrichedTrajectory, Trajectory


@dataclass
class NetConfig:
    obs_shape: tuple[int, int, int] = (7, 7, 3)
    n_actions: int = 6
    n_skills: int = 100
    d_modality: int = 256
    d_model: int = 512
    n_layers: int = 3
    n_heads: int = 8
    d_ff: int | None = None
    lang_buckets: int = 512
    max_len: int = 512

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class RelaxationConfig:
    temperature: float = 1.0
    hard: bool = False

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive")


def text_token_ids(text: str, buckets: int) -> list[int]:
    """Stable token hashing; identical across processes and runs."""
    return [zlib.crc32(tok.encode("utf-8")) % buckets for tok in re.findall(r"[a-z0-9]+", text.lower())]


def text_to_bag(text: str, buckets: int) -> np.ndarray:
    """Normalized token-count vector for the learned bag encoder."""
    bag = np.zeros(buckets, dtype=np.float32)
    ids = text_token_ids(text, buckets)
    for i in ids:
        bag[i] += 1.0
    if ids:
        bag /= len(ids)
    return bag


def relaxed_categorical_sample(
    logits: torch.Tensor, cfg: RelaxationConfig, rng: torch.Generator
) -> torch.Tensor:
    """Temperature-relaxed categorical sample over the last dim.

    Soft mode returns the tempered softmax of Gumbel-perturbed logits;
    hard mode returns the exact one-hot of its argmax with the soft sample
    as the gradient path (straight-through).
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    u = torch.rand(logits.shape, generator=rng, dtype=logits.dtype, device=logits.device)
    gumbel = -torch.log(-torch.log(u.clamp_min(1e-12)).clamp_min(1e-12))
    soft = F.softmax((logits + gumbel) / cfg.temperature, dim=-1)
    if not cfg.hard:
        return soft
    index = soft.argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return (hard - soft).detach() + soft


class BagEncoder(nn.Module):
    """Linear bag-of-tokens text encoder."""

    def __init__(self, buckets: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(buckets, d_out)

    def forward(self, bags: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.proj(bags))


class ObsEncoder(nn.Module):
    """Two conv stages over the integer grid window, then a projection."""

    def __init__(self, obs_shape: tuple[int, int, int], d_out: int):
        super().__init__()
        h, w, c = obs_shape
        c1 = max(4, d_out // 16)
        c2 = max(8, d_out // 8)
        self.conv1 = nn.Conv2d(c, c1, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, padding=1)
        self.proj = nn.Linear(c2 * h * w, d_out)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        # obs: (..., H, W, C) integer-coded
        lead = obs.shape[:-3]
        x = obs.reshape(-1, *obs.shape[-3:]).to(self.proj.weight.dtype) / 8.0
        x = x.permute(0, 3, 1, 2)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = torch.tanh(self.proj(x.flatten(1)))
        return x.reshape(*lead, -1)


class LinearEncoder(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_in, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.proj(x.to(self.proj.weight.dtype)))


class MLPHead(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.ReLU(), nn.Linear(d_ff, d_model))

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        h = self.ln1(x)
        a, _ = self.attn(
            h, h, h, attn_mask=attn_mask, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + a
        return x + self.ff(self.ln2(x))


class SeqTrunk(nn.Module):
    """Stack of attention blocks with learned positions; optionally causal."""

    def __init__(self, cfg: NetConfig, d_in: int, causal: bool):
        super().__init__()
        self.causal = causal
        self.max_len = cfg.max_len
        self.proj = nn.Linear(d_in, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        b, t, _ = x.shape
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        h = self.proj(x) + self.pos(torch.arange(t, device=x.device)).to(x.dtype)
        attn_mask = None
        if self.causal:
            attn_mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        key_padding_mask = None
        if valid is not None and not self.causal:
            # padded keys must stay invisible to the bidirectional trunk
            key_padding_mask = ~valid
        for block in self.blocks:
            h = block(h, attn_mask=attn_mask, key_padding_mask=key_padding_mask)
        return self.ln_f(h)


class SkillModel(nn.Module):
    """Container for the shared encoders, the three trunks, and their heads."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_modality
        self.obs_enc = ObsEncoder(cfg.obs_shape, d)
        self.act_enc = LinearEncoder(cfg.n_actions, d)
        self.lang_enc = BagEncoder(cfg.lang_buckets, d)
        self.goal_enc = BagEncoder(cfg.lang_buckets, d)
        self.skill_enc = LinearEncoder(cfg.n_skills, d)

        self.q_trunk = SeqTrunk(cfg, d_in=4 * d + 2, causal=False)
        self.q_beta_head = MLPHead(cfg.d_model, cfg.d_model, 2)
        self.q_k_head = MLPHead(cfg.d_model + d, cfg.d_model, cfg.n_skills)

        self.p_trunk = SeqTrunk(cfg, d_in=4 * d + 2, causal=True)
        self.p_beta_head = MLPHead(cfg.d_model, cfg.d_model, 2)
        self.p_k_head = MLPHead(cfg.d_model, cfg.d_model, cfg.n_skills)

        self.pi_trunk = SeqTrunk(cfg, d_in=2 * d, causal=True)
        self.pi_head = MLPHead(cfg.d_model + d, cfg.d_model, cfg.n_actions)

    @property
    def dtype(self) -> torch.dtype:
        return self.q_beta_head.fc1.weight.dtype

    # -- input preparation -------------------------------------------------

    def prepare(self, item: Trajectory | EnrichedTrajectory) -> "TrajTensors":
        base = item.base if isinstance(item, EnrichedTrajectory) else item
        t = base.length
        obs = torch.from_numpy(np.ascontiguousarray(base.observations))
        act_ids = torch.from_numpy(np.ascontiguousarray(base.actions)).long()
        act_onehot = F.one_hot(act_ids, self.cfg.n_actions).to(torch.float32)
        goal_bag = torch.from_numpy(text_to_bag(base.goal_text, self.cfg.lang_buckets))
        if isinstance(item, EnrichedTrajectory):
            beta_bar = torch.from_numpy(np.ascontiguousarray(item.beta_bar)).long()
            bags = {}
            lang = torch.empty(t, self.cfg.lang_buckets, dtype=torch.float32)
            for i, text in enumerate(item.annotations):
                if text not in bags:
                    bags[text] = torch.from_numpy(text_to_bag(text, self.cfg.lang_buckets))
                lang[i] = bags[text]
        else:
            beta_bar = torch.ones(t, dtype=torch.long)
            lang = torch.zeros(t, self.cfg.lang_buckets, dtype=torch.float32)
        return TrajTensors(obs, act_ids, act_onehot, lang, goal_bag, beta_bar)

    # -- trunk passes --------------------------------------------------------

    def q_features(self, batch: "PaddedBatch") -> torch.Tensor:
        d = self.dtype
        parts = [
            self.obs_enc(batch.obs),
            self.act_enc(batch.act_onehot),
            self.lang_enc(batch.lang.to(d)),
            self.goal_enc(batch.goal_bag.to(d)).unsqueeze(1).expand(-1, batch.t, -1),
            beta_indicator(batch.beta_bar.to(d)),
        ]
        return self.q_trunk(torch.cat(parts, dim=-1), valid=batch.valid)

    def q_beta_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.q_beta_head(features)

    def q_k_logits(self, feature_t: torch.Tensor, k_prev: torch.Tensor) -> torch.Tensor:
        emb = self.skill_enc(k_prev)
        return self.q_k_head(torch.cat([feature_t, emb], dim=-1))

    def p_outputs(
        self,
        batch: "PaddedBatch",
        k_path: torch.Tensor,
        beta_path: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Causal prior pass. k_path (B,T,K) and beta_path (B,T) are the
        realized latent path; position t sees only entries before t."""
        d = self.dtype
        b, t = beta_path.shape
        act_prev = shift_right(batch.act_onehot.to(d))
        k_prev = shift_right(k_path.to(d))
        beta_prev = shift_right(beta_path.to(d).unsqueeze(-1)).squeeze(-1)
        parts = [
            self.obs_enc(batch.obs),
            self.act_enc(act_prev),
            self.skill_enc(k_prev),
            self.goal_enc(batch.goal_bag.to(d)).unsqueeze(1).expand(-1, t, -1),
            beta_indicator(beta_prev),
        ]
        features = self.p_trunk(torch.cat(parts, dim=-1))
        return self.p_beta_head(features), self.p_k_head(features)

    def pi_logits(self, batch: "PaddedBatch", k_path: torch.Tensor) -> torch.Tensor:
        d = self.dtype
        parts = [
            self.obs_enc(batch.obs),
            self.goal_enc(batch.goal_bag.to(d)).unsqueeze(1).expand(-1, batch.t, -1),
        ]
        features = self.pi_trunk(torch.cat(parts, dim=-1))
        emb = self.skill_enc(k_path.to(d))
        return self.pi_head(torch.cat([features, emb], dim=-1))


def beta_indicator(value: torch.Tensor) -> torch.Tensor:
    """Two-dim indicator (1-b, b) of a (possibly soft) switch value."""
    value = value.unsqueeze(-1)
    return torch.cat([1.0 - value, value], dim=-1)


def shift_right(x: torch.Tensor) -> torch.Tensor:
    """Shift along dim 1 so position t holds the value from t-1; zeros at t=0."""
    pad = torch.zeros_like(x[:, :1])
    return torch.cat([pad, x[:, :-1]], dim=1)


@dataclass
class TrajTensors:
    obs: torch.Tensor  # (T, H, W, C) long
    act_ids: torch.Tensor  # (T,) long
    act_onehot: torch.Tensor  # (T, A)
    lang: torch.Tensor  # (T, buckets)
    goal_bag: torch.Tensor  # (buckets,)
    beta_bar: torch.Tensor  # (T,) long

    @property
    def t(self) -> int:
        return int(self.act_ids.shape[0])


@dataclass
class PaddedBatch:
    obs: torch.Tensor  # (B, T, H, W, C)
    act_ids: torch.Tensor  # (B, T)
    act_onehot: torch.Tensor  # (B, T, A)
    lang: torch.Tensor  # (B, T, buckets)
    goal_bag: torch.Tensor  # (B, buckets)
    beta_bar: torch.Tensor  # (B, T)
    valid: torch.Tensor  # (B, T) bool
    lengths: torch.Tensor  # (B,) long

    @property
    def b(self) -> int:
        return int(self.obs.shape[0])

    @property
    def t(self) -> int:
        return int(self.obs.shape[1])


def pad_batch(items: list[TrajTensors]) -> PaddedBatch:
    t_max = max(it.t for it in items)
    b = len(items)
    first = items[0]
    obs = torch.zeros(b, t_max, *first.obs.shape[1:], dtype=first.obs.dtype)
    act_ids = torch.zeros(b, t_max, dtype=torch.long)
    act_onehot = torch.zeros(b, t_max, first.act_onehot.shape[-1])
    lang = torch.zeros(b, t_max, first.lang.shape[-1])
    goal = torch.zeros(b, first.goal_bag.shape[-1])
    beta_bar = torch.zeros(b, t_max, dtype=torch.long)
    valid = torch.zeros(b, t_max, dtype=torch.bool)
    lengths = torch.zeros(b, dtype=torch.long)
    for i, it in enumerate(items):
        n = it.t
        obs[i, :n] = it.obs
        act_ids[i, :n] = it.act_ids
        act_onehot[i, :n] = it.act_onehot
        lang[i, :n] = it.lang
        goal[i] = it.goal_bag
        beta_bar[i, :n] = it.beta_bar
        valid[i, :n] = True
        lengths[i] = n
    return PaddedBatch(obs, act_ids, act_onehot, lang, goal, beta_bar, valid, lengths)


# -- single-trajectory operations ------------------------------------------------


@dataclass
class PrefixInputs:
    """History available to the prior at one step: observations o_1..o_t,
    actions a_1..a_{t-1}, skills k_1..k_{t-1}, switches beta_1..beta_{t-1},
    and the goal text."""

    observations: np.ndarray
    actions: np.ndarray
    skills: np.ndarray
    betas: np.ndarray
    goal_text: str

    def __post_init__(self):
        t = len(self.observations)
        if t < 1:
            raise ValueError("prefix needs at least one observation")
        for name in ("actions", "skills", "betas"):
            arr = getattr(self, name)
            if len(arr) != t - 1:
                raise ValueError(f"{name} must have length {t - 1}, got {len(arr)}")


def _batch_of_one(model: SkillModel, tensors: TrajTensors) -> PaddedBatch:
    return pad_batch([tensors])


@torch.no_grad()
def p_forward(model: SkillModel, prefix: PrefixInputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Prior logits at the last prefix position: (2,) switch and (K,) skill."""
    cfg = model.cfg
    t = len(prefix.observations)
    traj = Trajectory(
        goal_text=prefix.goal_text,
        observations=np.asarray(prefix.observations),
        actions=np.concatenate([np.asarray(prefix.actions, dtype=np.int64), [0]]),
    )
    tensors = model.prepare(traj)
    # position t must not see a_t, so zero the placeholder current action
    tensors.act_onehot[-1] = 0.0
    batch = _batch_of_one(model, tensors)
    k_path = torch.zeros(1, t, cfg.n_skills, dtype=model.dtype)
    skills = np.asarray(prefix.skills, dtype=np.int64)
    if len(skills):
        k_path[0, : t - 1] = F.one_hot(torch.from_numpy(skills), cfg.n_skills).to(model.dtype)
    beta_path = torch.zeros(1, t, dtype=model.dtype)
    betas = np.asarray(prefix.betas, dtype=np.int64)
    if len(betas):
        beta_path[0, : t - 1] = torch.from_numpy(betas).to(model.dtype)
    beta_logits, k_logits = model.p_outputs(batch, k_path, beta_path)
    return beta_logits[0, t - 1], k_logits[0, t - 1]


@torch.no_grad()
def pi_forward(
    model: SkillModel, observations: np.ndarray, skill_id: int, goal_text: str
) -> torch.Tensor:
    """Action logits at the last observation under the given skill."""
    cfg = model.cfg
    if not (0 <= skill_id < cfg.n_skills):
        raise ValueError(f"skill id {skill_id} outside 0..{cfg.n_skills - 1}")
    t = len(observations)
    traj = Trajectory(
        goal_text=goal_text,
        observations=np.asarray(observations),
        actions=np.zeros(t, dtype=np.int64),
    )
    batch = _batch_of_one(model, model.prepare(traj))
    k_path = torch.zeros(1, t, cfg.n_skills, dtype=model.dtype)
    k_path[0, :, skill_id] = 1.0
    logits = model.pi_logits(batch, k_path)
    return logits[0, t - 1]


@dataclass
class QDecode:
    beta_logits: torch.Tensor  # (T, 2)
    k_logits: torch.Tensor  # (T, K), along the realized path
    betas: np.ndarray  # (T,)
    skills: np.ndarray  # (T,)


@torch.no_grad()
def q_forward(
    model: SkillModel, enriched: EnrichedTrajectory, rng: torch.Generator | None = None
) -> QDecode:
    """Variational logits plus the realized constrained path.

    The switch at a step is free only where the initial segmentation
    opened a segment; elsewhere it is 0 and the skill is copied. With
    rng=None the path is the greedy argmax decode, otherwise sampled.
    """
    if enriched.length < 1:
        raise ValueError("empty trajectory")
    cfg = model.cfg
    batch = _batch_of_one(model, model.prepare(enriched))
    features = model.q_features(batch)[0]
    beta_logits = model.q_beta_logits(features)
    t_len = enriched.length
    betas = np.zeros(t_len, dtype=np.int64)
    skills = np.zeros(t_len, dtype=np.int64)
    k_logits_path = torch.zeros(t_len, cfg.n_skills, dtype=features.dtype)
    k_prev = torch.zeros(1, cfg.n_skills, dtype=features.dtype)
    prev_id = 0
    for t in range(t_len):
        if t == 0:
            switch = 1
        elif enriched.beta_bar[t] == 0:
            switch = 0
        elif rng is None:
            switch = int(beta_logits[t, 1] > beta_logits[t, 0])
        else:
            prob1 = torch.softmax(beta_logits[t], dim=-1)[1]
            switch = int(torch.rand((), generator=rng, dtype=prob1.dtype) < prob1)
        k_logits_t = model.q_k_logits(features[t : t + 1], k_prev)[0]
        k_logits_path[t] = k_logits_t
        if switch:
            if rng is None:
                choice = int(k_logits_t.argmax())
            else:
                probs = torch.softmax(k_logits_t, dim=-1)
                choice = int(torch.multinomial(probs, 1, generator=rng))
        else:
            choice = prev_id
        betas[t] = switch
        skills[t] = choice
        prev_id = choice
        k_prev = torch.zeros(1, cfg.n_skills, dtype=features.dtype)
        k_prev[0, choice] = 1.0
    return QDecode(beta_logits, k_logits_path, betas, skills)


# -- checkpoints ------------------------------------------------------------------


CHECKPOINT_VERSION = 1


def save_checkpoint(model: SkillModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.cfg)
    cfg["obs_shape"] = list(model.cfg.obs_shape)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "net_config": cfg,
            "state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(
    path: str | Path,
    expected_n_skills: int | None = None,
    expected_n_actions: int | None = None,
) -> tuple[SkillModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    raw = dict(payload["net_config"])
    raw["obs_shape"] = tuple(raw["obs_shape"])
    cfg = NetConfig(**raw)
    if expected_n_skills is not None and cfg.n_skills != expected_n_skills:
        raise ValueError(f"checkpoint has {cfg.n_skills} skills, expected {expected_n_skills}")
    if expected_n_actions is not None and cfg.n_actions != expected_n_actions:
        raise ValueError(f"checkpoint has {cfg.n_actions} actions, expected {expected_n_actions}")
    model = SkillModel(cfg)
    model.load_state_dict(payload["state"])
    return model, payload.get("extra", {})
