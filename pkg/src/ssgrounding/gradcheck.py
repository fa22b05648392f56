"""Finite-difference gradient suite over every objective and support-set cell.

Each check perturbs the clip embeddings, the text embeddings and the
head parameters (grounder, caption, pooling) of a small random problem and
compares the analytic gradient of :func:`head_loss_and_grads` with central
differences. Single auxiliary terms are checked with the grounding term
switched off, so only the variables they depend on are perturbed. To keep
100 seeds affordable, each variable block contributes at most
``per_block`` seeded coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .model import ENCODER_KEYS, Mode, ModelSpec, active_keys, head_loss_and_grads, token_bags
from .numerics import check_gradient
from .supportset import Construction, GroundTruthInterval, PoolingMethod

CELL_INDEPENDENT = ("gtc_contrast", "gtc_caption", "grounding", "gtc_total")
PER_CELL = ("ss_contrast", "ss_caption", "ss_total")
OBJECTIVES = CELL_INDEPENDENT + PER_CELL
GRID = tuple(itertools.product(Construction, PoolingMethod))


@dataclass
class GradCheckProblem:
    X_list: list
    Y: np.ndarray
    gts: list
    sentences: list
    bags: np.ndarray
    params: dict
    D: int
    t_max: int
    vocab_size: int


@dataclass
class GradCheckRow:
    objective: str
    construction: Optional[str]
    pooling: Optional[str]
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def random_problem(seed: int, max_B: int = 4, max_T: int = 8, max_D: int = 16,
                   vocab_size: int = 5) -> GradCheckProblem:
    """A small batch with a proper (non-full) GT interval in every video."""
    rng = np.random.default_rng([seed, 99])
    B = int(rng.integers(2, max_B + 1))
    D = int(rng.integers(3, max_D + 1))
    X_list, gts, sentences = [], [], []
    for _ in range(B):
        T = int(rng.integers(2, max_T + 1))
        length = int(rng.integers(1, T))
        start = int(rng.integers(0, T - length + 1))
        gts.append(GroundTruthInterval(start, start + length - 1))
        X_list.append(rng.normal(scale=0.5, size=(T, D)))
        sentences.append(rng.integers(0, vocab_size, size=int(rng.integers(1, 4))))
    Y = rng.normal(scale=0.5, size=(B, D))
    t_max = max(x.shape[0] for x in X_list)
    params = {
        "grd_in": rng.normal(scale=0.3, size=D),
        "grd_out": rng.normal(scale=0.3, size=D),
        "grd_b": rng.normal(size=1),
        "cap_w": rng.normal(scale=0.5, size=(D, D)),
        "cap_b": rng.normal(scale=0.1, size=D),
        "dec_w": rng.normal(scale=0.5, size=(D, vocab_size)),
        "dec_b": rng.normal(scale=0.1, size=vocab_size),
        "fc_weight": rng.normal(scale=0.3, size=(t_max * D, D)),
        "fc_bias": rng.normal(scale=0.1, size=D),
        "conv_kernel": rng.normal(scale=0.3, size=(3, D, D)),
        "conv_bias": rng.normal(scale=0.1, size=D),
    }

    class _S:  # token_bags only needs ``.tokens``
        def __init__(self, tokens):
            self.tokens = tokens

    bags = token_bags([_S(s) for s in sentences], vocab_size)
    return GradCheckProblem(X_list, Y, gts, sentences, bags, params, D, t_max, vocab_size)


def _spec_for(objective: str, problem: GradCheckProblem, construction=None, pooling=None):
    base = dict(D=problem.D, D_v=problem.D, D_l=problem.D, vocab_size=problem.vocab_size,
                t_max=problem.t_max, lambda1=1.0, lambda2=1.0)
    if construction is not None:
        base.update(construction=construction, pooling=pooling)
    table = {
        "grounding": (dict(mode=Mode.BASELINE), False),
        "gtc_contrast": (dict(mode=Mode.GTC, use_caption=False), True),
        "gtc_caption": (dict(mode=Mode.GTC, use_contrast=False), True),
        "gtc_total": (dict(mode=Mode.GTC, lambda1=0.1, lambda2=0.1), False),
        "ss_contrast": (dict(mode=Mode.SS, use_caption=False), True),
        "ss_caption": (dict(mode=Mode.SS, use_contrast=False), True),
        "ss_total": (dict(mode=Mode.SS, lambda1=0.1, lambda2=0.1), False),
    }
    extra, alone = table[objective]
    return ModelSpec(**{**base, **extra, "use_grounding": not alone})


def check_objective(objective: str, problem: GradCheckProblem, construction=None, pooling=None,
                    h: float = 1e-5, floor: float = 1e-5, per_block: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None):
    spec = _spec_for(objective, problem, construction, pooling)
    keys = [k for k in active_keys(spec) if k not in ENCODER_KEYS]
    sizes = [x.size for x in problem.X_list] + [problem.Y.size] + [problem.params[k].size for k in keys]
    offsets = np.cumsum([0] + sizes)

    def unpack(vec):
        X_list = [vec[offsets[i]:offsets[i + 1]].reshape(x.shape)
                  for i, x in enumerate(problem.X_list)]
        n = len(X_list)
        Y = vec[offsets[n]:offsets[n + 1]].reshape(problem.Y.shape)
        params = dict(problem.params)
        for j, k in enumerate(keys):
            params[k] = vec[offsets[n + 1 + j]:offsets[n + 2 + j]].reshape(problem.params[k].shape)
        return X_list, Y, params

    def run(vec, with_grads):
        X_list, Y, params = unpack(vec)
        args = (X_list, Y, problem.gts, problem.sentences, problem.bags, params)
        value, _, grads = head_loss_and_grads(*args, spec, with_grads)
        return value, grads

    x0 = np.concatenate([x.ravel() for x in problem.X_list] + [problem.Y.ravel()]
                        + [problem.params[k].ravel() for k in keys])
    _, grads = run(x0, True)
    analytic = np.concatenate([g.ravel() for g in grads["X"]] + [grads["Y"].ravel()]
                              + [grads.get(k, np.zeros_like(problem.params[k])).ravel() for k in keys])
    indices = None
    if per_block is not None:
        rng = rng or np.random.default_rng(0)
        blocks = [np.arange(offsets[0], offsets[len(problem.X_list)])]
        blocks += [np.arange(offsets[i], offsets[i + 1]) for i in range(len(problem.X_list), len(sizes))]
        indices = np.concatenate([b if b.size <= per_block else np.sort(rng.choice(b, per_block, replace=False))
                                  for b in blocks])
    return check_gradient(lambda v: run(v, False)[0], x0, analytic, h, floor, indices)


def run_suite(seeds: Iterable[int] = range(100), grid=GRID, h: float = 1e-5,
              per_block: Optional[int] = 4, max_B: int = 4, max_T: int = 8, max_D: int = 16) -> list:
    """One row per (objective, cell, seed); cell-independent objectives carry no cell."""
    rows = []
    for seed in seeds:
        problem = random_problem(seed, max_B, max_T, max_D)
        rng = np.random.default_rng([seed, 100])
        for obj in CELL_INDEPENDENT:
            rep = check_objective(obj, problem, h=h, per_block=per_block, rng=rng)
            rows.append(GradCheckRow(obj, None, None, seed, rep.max_rel_error))
        for construction, pooling in grid:
            for obj in PER_CELL:
                rep = check_objective(obj, problem, construction, pooling, h=h,
                                      per_block=per_block, rng=rng)
                rows.append(GradCheckRow(obj, construction.value, pooling.value, seed,
                                         rep.max_rel_error))
    return rows


def summarize(rows: list) -> list:
    """Worst error per (objective, construction, pooling), in first-seen order."""
    worst = {}
    for r in rows:
        key = (r.objective, r.construction, r.pooling)
        worst[key] = max(worst.get(key, 0.0), r.max_rel_error)
    return [(*k, v) for k, v in worst.items()]
