"""Training strategies (joint, naive fine-tune, replay with distillation,
SFT) and the sequential harness producing ID/OOD error matrices.

Replay follows the score -> select -> retrain scheme: past and new samples
are ranked by a label-free PDE score, the worst plus a random remainder form
D_mix, and the student trains on D_mix against the configured loss plus a
frozen-teacher distillation term weighted by lambda.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import AdamState, adam_step
from .data import Dataset, GridSample, derived_seed, mix64
from .losses import LossConfig, ScoredSample
from .model import Transolver, TransolverConfig

STRATEGIES = ("joint", "naive_finetune", "replay")


@dataclass
class ReplayPlan:
    """Fractions of past/new data entering D_mix, split worst vs random."""
    past_fraction: float = 0.10
    past_worst_fraction: float = 0.08
    past_random_fraction: float = 0.02
    new_fraction: float = 0.80
    new_worst_fraction: float = 0.64
    new_random_fraction: float = 0.16

    def __post_init__(self):
        for name in ("past_fraction", "past_worst_fraction", "past_random_fraction",
                     "new_fraction", "new_worst_fraction", "new_random_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not math.isclose(self.past_worst_fraction + self.past_random_fraction,
                            self.past_fraction, abs_tol=1e-9):
            raise ValueError("past worst + random fractions must equal past_fraction")
        if not math.isclose(self.new_worst_fraction + self.new_random_fraction,
                            self.new_fraction, abs_tol=1e-9):
            raise ValueError("new worst + random fractions must equal new_fraction")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "past_fraction", "past_worst_fraction", "past_random_fraction",
            "new_fraction", "new_worst_fraction", "new_random_fraction")}


@dataclass
class CLConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lambda_distill: float = 0.3
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 8
    score_kind: str = "strong"
    lora: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0
    plan: ReplayPlan = field(default_factory=ReplayPlan)

    def __post_init__(self):
        if self.lambda_distill < 0:
            raise ValueError("lambda_distill must be >= 0")
        if self.score_kind not in ("strong", "energy"):
            raise ValueError(f"unknown score kind {self.score_kind!r}")

    def to_dict(self) -> dict:
        return {"loss": vars(self.loss), "lambda_distill": self.lambda_distill,
                "epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                "score_kind": self.score_kind, "lora": self.lora,
                "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
                "plan": self.plan.to_dict()}


@dataclass
class ErrorMatrix:
    """Stage-by-group relative errors; row m comes from the single model
    trained through groups 1..m, with OOD flags where the group is unseen."""
    stages: list[int]
    group_ids: list[int]
    rel_l2: np.ndarray
    rel_h1: np.ndarray
    ood: np.ndarray
    strategy: str = ""

    def rows(self):
        for i, stage in enumerate(self.stages):
            for j, gid in enumerate(self.group_ids):
                yield (stage, gid, float(self.rel_l2[i, j]),
                       float(self.rel_h1[i, j]), bool(self.ood[i, j]))


def write_error_matrix(path, matrix: ErrorMatrix) -> None:
    with open(path, "w") as fh:
        fh.write("stage,group,rel_L2,rel_H1,ood_flag\n")
        for stage, gid, l2, h1, ood in matrix.rows():
            fh.write(f"{stage},{gid},{l2!r},{h1!r},{int(ood)}\n")


# ---------------------------------------------------------------------------
# scoring and replay selection


def default_forcing(nx: int, ny: int) -> np.ndarray:
    return np.ones((nx, ny), dtype=np.float64)


def score_dataset(model: Transolver, samples: list[GridSample], score_kind: str,
                  boundary_mode: str = "hard_mask",
                  q: np.ndarray | None = None) -> list[ScoredSample]:
    """Label-free PDE score of the model's prediction on each sample."""
    out = []
    for s in samples:
        q_field = default_forcing(*s.k.shape) if q is None else q
        t_hat = losses.apply_dirichlet(model.forward(s.k), boundary_mode)
        out.append(losses.score_sample(s.k, t_hat, q_field, score_kind,
                                       group_id=s.group_id,
                                       sample_index=s.sample_index))
    return out


def _rounded_count(fraction: float, total: int) -> int:
    if fraction <= 0.0:
        return 0
    return max(1, int(math.floor(fraction * total + 0.5)))


def _select_one_source(scored: list[ScoredSample], worst_fraction: float,
                       random_fraction: float, rng) -> tuple[list, list]:
    if not scored and (worst_fraction > 0 or random_fraction > 0):
        raise ValueError("positive selection fraction with an empty source")
    ranked = sorted(scored, key=lambda s: (-s.score, s.group_id, s.sample_index))
    n_worst = _rounded_count(worst_fraction, len(scored))
    worst = ranked[:n_worst]
    rest = sorted(ranked[n_worst:], key=lambda s: (s.group_id, s.sample_index))
    n_random = min(_rounded_count(random_fraction, len(scored)), len(rest))
    chosen = rng.choice(len(rest), size=n_random, replace=False) if n_random else []
    randoms = [rest[i] for i in sorted(chosen)]
    return worst, randoms


@dataclass
class ReplaySelection:
    past_worst: list[ScoredSample]
    past_random: list[ScoredSample]
    new_worst: list[ScoredSample]
    new_random: list[ScoredSample]

    def tagged(self):
        for tag in ("past_worst", "past_random", "new_worst", "new_random"):
            for s in getattr(self, tag):
                yield tag, s

    def ids(self) -> list[tuple[int, int]]:
        return [(s.group_id, s.sample_index) for _, s in self.tagged()]


def select_replay(scored_past: list[ScoredSample], scored_new: list[ScoredSample],
                  plan: ReplayPlan, seed: int) -> ReplaySelection:
    """Worst-scored subsets (sentinels first, descending score, ties by ids)
    plus seeded random picks from the remainder; all four subsets disjoint."""
    rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
    past_worst, past_random = _select_one_source(
        scored_past, plan.past_worst_fraction, plan.past_random_fraction, rng)
    new_worst, new_random = _select_one_source(
        scored_new, plan.new_worst_fraction, plan.new_random_fraction, rng)
    return ReplaySelection(past_worst, past_random, new_worst, new_random)


# ---------------------------------------------------------------------------
# training loops


def _predict_field(model: Transolver, k: np.ndarray, boundary_mode: str) -> np.ndarray:
    return losses.apply_dirichlet(model.forward(k), boundary_mode)


def _fit(model: Transolver, samples: list[GridSample], cfg: CLConfig, seed: int,
         teacher_preds: dict | None = None,
         sft: tuple[list[GridSample], list[GridSample], dict] | None = None) -> None:
    """Adam training loop shared by every strategy (mutates `model`).

    With `teacher_preds`, adds lambda * MSE(student, teacher) per sample.
    With `sft`, trains supervised on the first list while distilling on the
    second (samples argument is ignored then).
    """
    params = model.trainable_parameters()
    state = AdamState(params)
    rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
    lam = cfg.lambda_distill
    batch = max(1, cfg.batch_size)

    def graph_loss(sample: GridSample, supervised: bool):
        nx, ny = sample.k.shape
        q = default_forcing(nx, ny)
        t_raw = model.forward_t(sample.k)
        if supervised:
            t_hat = losses.apply_dirichlet_t(t_raw, nx, ny, cfg.loss.boundary_mode)
            return losses.data_loss_t(t_hat, ad.constant(sample.label.reshape(-1)))
        term = losses.loss_from_raw_t(t_raw, sample.k, q, cfg.loss, sample.label)
        if teacher_preds is not None and lam > 0:
            # distillation shares the forward pass with the training loss
            t_hat = losses.apply_dirichlet_t(t_raw, nx, ny, cfg.loss.boundary_mode)
            ref = teacher_preds[(sample.group_id, sample.sample_index)]
            term = term + lam * losses.data_loss_t(t_hat, ad.constant(ref.reshape(-1)))
        return term

    def distill_term(sample: GridSample, preds: dict):
        nx, ny = sample.k.shape
        t_raw = model.forward_t(sample.k)
        t_hat = losses.apply_dirichlet_t(t_raw, nx, ny, cfg.loss.boundary_mode)
        ref = preds[(sample.group_id, sample.sample_index)]
        return losses.data_loss_t(t_hat, ad.constant(ref.reshape(-1)))

    for epoch in range(cfg.epochs):
        if sft is None:
            order = rng.permutation(len(samples))
            batches = [order[i:i + batch] for i in range(0, len(order), batch)]
            for ids in batches:
                total = None
                for idx in ids:
                    term = graph_loss(samples[idx], supervised=False)
                    total = term if total is None else total + term
                _step(total, len(ids), params, state, cfg.lr, epoch)
        else:
            d_sft, d_left, preds = sft
            order = rng.permutation(len(d_sft))
            batches = [order[i:i + batch] for i in range(0, len(order), batch)]
            left_order = rng.permutation(len(d_left)) if d_left else []
            cursor = 0
            for ids in batches:
                total = None
                for idx in ids:
                    term = graph_loss(d_sft[idx], supervised=True)
                    total = term if total is None else total + term
                total = ad.div(total, ad.constant(float(len(ids))))
                if d_left and lam > 0:
                    dist = None
                    for _ in range(min(batch, len(d_left))):
                        s = d_left[left_order[cursor % len(d_left)]]
                        cursor += 1
                        term = distill_term(s, preds)
                        dist = term if dist is None else dist + term
                    n = min(batch, len(d_left))
                    total = total + lam * ad.div(dist, ad.constant(float(n)))
                _step(total, 1, params, state, cfg.lr, epoch)


def _step(total, count: int, params, state, lr: float, epoch: int) -> None:
    loss = ad.div(total, ad.constant(float(count))) if count > 1 else total
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value} at epoch {epoch}")
    adam_step(params, ad.grad(loss, params), state, lr)


def train_baseline(model_init: Transolver, samples: list[GridSample], strategy: str,
                   cfg: CLConfig, seed: int = 0) -> Transolver:
    """Plain training (no teacher, no replay); joint passes the union of
    groups, naive passes new data only.  Returns a trained copy."""
    if strategy not in ("joint", "naive_finetune"):
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    if not samples:
        raise ValueError("samples must be non-empty")
    model = model_init.copy()
    _fit(model, samples, cfg, seed)
    return model


def replay_train(model_past: Transolver, d_mix: list[GridSample], cfg: CLConfig,
                 seed: int = 0) -> Transolver:
    """Distillation-guarded training on D_mix; the teacher is the past model
    itself, never mutated (callers may digest-check it)."""
    if not d_mix:
        raise ValueError("D_mix must be non-empty")
    teacher = model_past
    preds = {(s.group_id, s.sample_index):
             _predict_field(teacher, s.k, cfg.loss.boundary_mode) for s in d_mix}
    student = model_past.copy()
    if cfg.lora:
        student.attach_lora(rank=cfg.lora_rank, alpha=cfg.lora_alpha,
                            seed=derived_seed(seed, 0xADA, 0))
    _fit(student, d_mix, cfg, seed, teacher_preds=preds)
    if cfg.lora:
        student.merge_lora()
    return student


def sft_train(model: Transolver, d_sft: list[GridSample], d_left: list[GridSample],
              cfg: CLConfig, seed: int = 0) -> Transolver:
    """Supervised fine-tune on labeled D_sft with distillation on D_left."""
    if any(s.label is None for s in d_sft):
        raise ValueError("every D_sft sample needs an oracle label")
    sft_ids = {(s.group_id, s.sample_index) for s in d_sft}
    left_ids = {(s.group_id, s.sample_index) for s in d_left}
    if sft_ids & left_ids:
        raise ValueError(f"D_sft and D_left overlap: {sorted(sft_ids & left_ids)}")
    teacher = model
    preds = {(s.group_id, s.sample_index):
             _predict_field(teacher, s.k, cfg.loss.boundary_mode) for s in d_left}
    student = model.copy()
    if cfg.lora:
        student.attach_lora(rank=cfg.lora_rank, alpha=cfg.lora_alpha,
                            seed=derived_seed(seed, 0xADA, 1))
    _fit(student, [], cfg, seed, sft=(d_sft, d_left, preds))
    if cfg.lora:
        student.merge_lora()
    return student


# ---------------------------------------------------------------------------
# sequential harness


def split_group(samples: list[GridSample], eval_fraction: float) -> tuple[list, list]:
    """Leading part trains, trailing part evaluates (at least one each)."""
    n_eval = min(len(samples) - 1, max(1, int(round(eval_fraction * len(samples)))))
    return samples[:-n_eval], samples[-n_eval:]


def evaluate_groups(model: Transolver, eval_sets: list[list[GridSample]],
                    boundary_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Mean (rel_L2, rel_H1) against oracle labels, one entry per group."""
    l2 = np.zeros(len(eval_sets))
    h1 = np.zeros(len(eval_sets))
    for j, samples in enumerate(eval_sets):
        pair = [losses.relative_errors(_predict_field(model, s.k, boundary_mode),
                                       s.label) for s in samples]
        l2[j] = float(np.mean([p[0] for p in pair]))
        h1[j] = float(np.mean([p[1] for p in pair]))
    return l2, h1


@dataclass
class SequenceResult:
    matrix: ErrorMatrix
    manifest: dict
    model: Transolver
    scores: list[ScoredSample] = field(default_factory=list)


def run_sequence(dataset: Dataset, strategy: str, cfg: CLConfig,
                 model_cfg: TransolverConfig, seed: int = 0,
                 eval_fraction: float = 0.25) -> SequenceResult:
    """Sequential protocol: learn groups one by one under `strategy`, after
    each stage evaluate every group against its oracle labels."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if len(dataset.groups) < 2:
        raise ValueError("need at least 2 groups for a sequential run")
    for g in dataset.groups:
        if not g.has_labels:
            raise ValueError(f"group {g.group_id} lacks oracle labels; evaluation "
                             "requires ground truth")

    splits = [split_group(g.samples, eval_fraction) for g in dataset.groups]
    train_sets = [s[0] for s in splits]
    eval_sets = [s[1] for s in splits]
    n_groups = len(dataset.groups)
    rel_l2 = np.zeros((n_groups, n_groups))
    rel_h1 = np.zeros((n_groups, n_groups))
    ood = np.zeros((n_groups, n_groups), dtype=bool)
    stage_seconds, stage_records, all_scores = [], [], []
    boundary_mode = cfg.loss.boundary_mode

    model = Transolver(model_cfg, seed=seed)
    for m in range(1, n_groups + 1):
        stage_seed = derived_seed(seed, 0x57A6E, m)
        started = time.perf_counter()
        record = {"stage": m, "strategy": strategy,
                  "trained_groups": [g.group_id for g in dataset.groups[:m]]}
        if strategy == "joint":
            pool = [s for t in train_sets[:m] for s in t]
            model = train_baseline(Transolver(model_cfg, seed=seed), pool,
                                   "joint", cfg, seed=stage_seed)
        elif strategy == "naive_finetune" or m == 1:
            model = train_baseline(model, train_sets[m - 1], "naive_finetune",
                                   cfg, seed=stage_seed)
        else:
            past = [s for t in train_sets[:m - 1] for s in t]
            scored_past = score_dataset(model, past, cfg.score_kind, boundary_mode)
            scored_new = score_dataset(model, train_sets[m - 1], cfg.score_kind,
                                       boundary_mode)
            selection = select_replay(scored_past, scored_new, cfg.plan,
                                      derived_seed(seed, 0x5E1EC7, m))
            by_id = {(s.group_id, s.sample_index): s
                     for t in train_sets for s in t}
            d_mix = [by_id[i] for i in selection.ids()]
            sel_record: dict[str, list] = {"past_worst": [], "past_random": [],
                                           "new_worst": [], "new_random": []}
            for tag, s in selection.tagged():
                sel_record[tag].append([s.group_id, s.sample_index])
            record["selection"] = sel_record
            record["d_mix_size"] = len(d_mix)
            all_scores.extend(scored_past + scored_new)
            model = replay_train(model, d_mix, cfg, seed=stage_seed)
        stage_seconds.append(time.perf_counter() - started)

        digest_before = model.digest()
        l2, h1 = evaluate_groups(model, eval_sets, boundary_mode)
        assert model.digest() == digest_before, "evaluation mutated the model"
        rel_l2[m - 1], rel_h1[m - 1] = l2, h1
        ood[m - 1, m:] = True
        stage_records.append(record)

    matrix = ErrorMatrix(stages=list(range(1, n_groups + 1)),
                         group_ids=[g.group_id for g in dataset.groups],
                         rel_l2=rel_l2, rel_h1=rel_h1, ood=ood, strategy=strategy)
    manifest = {
        "strategy": strategy,
        "seed": seed,
        "eval_fraction": eval_fraction,
        "config": cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "stages": stage_records,
        "wall_clock_seconds": stage_seconds,
        "groups": [{"group_id": g.group_id, "mu": g.mu, "sigma": g.sigma,
                    "train": len(t), "eval": len(e)}
                   for g, t, e in zip(dataset.groups, train_sets, eval_sets)],
    }
    return SequenceResult(matrix=matrix, manifest=manifest, model=model,
                          scores=all_scores)
