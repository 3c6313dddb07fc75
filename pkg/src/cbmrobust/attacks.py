"""Minimal-norm concept-space attacks on linear and layered heads.

For a linear head the attack "flip the prediction to target t" is the
quadratic program  min ||delta||^2  s.t.  (w_t - w_k) . delta >= beta_k + eps
for every k != t, where beta_k is class k's logit advantage over t at the
clean point. Two closed-form constructions are provided: the O(K)
single-constraint solution against the true class only, and the
pseudoinverse solution of the full constraint system. The pseudoinverse
solves the constraints as equalities, which is a feasible-point
construction rather than the exact QP optimum; success is therefore always
re-verified with a forward pass and reported honestly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    ConceptVector,
    LinearHead,
    MlpHead,
    as_vector,
    logits,
    mlp_forward,
    mlp_jacobian,
    mlp_predict,
    predict,
    pseudoinverse,
)
from .errors import DegenerateDirectionError, ParameterError, ShapeError

log = logging.getLogger(__name__)

ATTACK_METHODS = ("single", "multi")


@dataclass(frozen=True)
class AttackConfig:
    """Knobs shared by every attack routine.

    epsilon is the decision margin added to each constraint so the flip is
    a strict argmax, not a tie. clamp_concepts evaluates success on the
    perturbed vector clipped back into [0,1]^K.
    """

    epsilon: float = 1e-3
    max_relin_iters: int = 20
    clamp_concepts: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if self.max_relin_iters < 1:
            raise ParameterError("max_relin_iters must be >= 1")


@dataclass(frozen=True)
class AttackResult:
    delta: np.ndarray
    norm: float
    target: int
    success: bool
    margins: np.ndarray  # beta_k for k != t, ascending k
    method: str = "single"

    def __post_init__(self):
        d = as_vector(self.delta)
        m = as_vector(self.margins)
        d.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "margins", m)
        object.__setattr__(self, "norm", float(np.linalg.norm(d)))


def apply_perturbation(c_star, delta, clamp: bool = False) -> ConceptVector:
    """The perturbed concept vector, optionally clipped back into [0,1]^K."""
    moved = as_vector(c_star) + as_vector(delta)
    if clamp:
        return ConceptVector(np.clip(moved, 0.0, 1.0), clamped=True)
    return ConceptVector(moved)


def _check_success(head: LinearHead, c_star, delta, target: int, cfg: AttackConfig) -> bool:
    perturbed = apply_perturbation(c_star, delta, clamp=cfg.clamp_concepts)
    return predict(head, perturbed) == target


def margins(head: LinearHead, c_star, t: int) -> np.ndarray:
    """beta_k = (w_k - w_t) . c* + (b_k - b_t) for every class; entry t is 0.

    beta_k > 0 means class k currently beats the target t.
    """
    if not 0 <= t < head.num_classes:
        raise ParameterError(f"target {t} out of range for {head.num_classes} classes")
    scores = logits(head, c_star)
    return scores - scores[t]


def _drop_target(vec: np.ndarray, t: int) -> np.ndarray:
    return np.delete(vec, t)


def single_constraint_attack(
    head: LinearHead, c_star, y_star: int, t: int, cfg: AttackConfig = AttackConfig()
) -> AttackResult:
    """Closed-form minimal perturbation against the true-class boundary only.

    delta = (beta_y* + eps) / ||w_t - w_y*||^2 * (w_t - w_y*). When the
    target already wins by at least eps (beta_y* + eps <= 0) the zero
    vector is returned instead of stepping away from a satisfied
    constraint. A third class can still intercept the flip, so success is
    verified with a forward pass.
    """
    if t == y_star:
        raise ParameterError("target class must differ from the true class")
    beta = margins(head, c_star, t)
    if not 0 <= y_star < head.num_classes:
        raise ParameterError(f"true class {y_star} out of range")
    direction = head.weights[t] - head.weights[y_star]
    denom = float(direction @ direction)
    if denom == 0.0:
        raise DegenerateDirectionError(
            f"classes {t} and {y_star} share an identical weight row"
        )
    gap = beta[y_star] + cfg.epsilon
    delta = (gap / denom) * direction if gap > 0 else np.zeros(head.num_concepts)
    return AttackResult(
        delta=delta,
        norm=0.0,
        target=t,
        success=_check_success(head, c_star, delta, t, cfg),
        margins=_drop_target(beta, t),
        method="single",
    )


def multi_constraint_attack(
    head: LinearHead, c_star, y_star: int, t: int, cfg: AttackConfig = AttackConfig()
) -> AttackResult:
    """Pseudoinverse solution of the full constraint system.

    Builds A with rows (w_t - w_k) and right-hand side beta_k + eps over
    all k != t, and returns delta = pinv(A) @ rhs. With a full-row-rank A
    this meets every boundary with margin exactly eps; in degenerate
    geometry the least-squares solution can under-satisfy some constraint,
    which the forward check reports as success=False.
    """
    if t == y_star:
        raise ParameterError("target class must differ from the true class")
    if not 0 <= y_star < head.num_classes:
        raise ParameterError(f"true class {y_star} out of range")
    beta = margins(head, c_star, t)
    a = head.weights[t][None, :] - np.delete(head.weights, t, axis=0)
    if not np.any(a):
        raise DegenerateDirectionError("constraint matrix is entirely zero")
    rhs = _drop_target(beta, t) + cfg.epsilon
    delta = pseudoinverse(a) @ rhs
    return AttackResult(
        delta=delta,
        norm=0.0,
        target=t,
        success=_check_success(head, c_star, delta, t, cfg),
        margins=_drop_target(beta, t),
        method="multi",
    )


def targeted_attack(
    head: LinearHead, c_star, y_star: int, t: int, cfg: AttackConfig = AttackConfig(),
    method: str = "multi",
) -> AttackResult:
    if method == "single":
        return single_constraint_attack(head, c_star, y_star, t, cfg)
    if method == "multi":
        return multi_constraint_attack(head, c_star, y_star, t, cfg)
    raise ParameterError(f"unknown attack method {method!r}")


def attacks_over_targets(
    head: LinearHead, c_star, y_star: int, cfg: AttackConfig = AttackConfig(),
    method: str = "multi",
) -> dict[int, AttackResult]:
    """Per-target attack results for every t != y*; degenerate targets are skipped."""
    results: dict[int, AttackResult] = {}
    skipped = 0
    for t in range(head.num_classes):
        if t == y_star:
            continue
        try:
            results[t] = targeted_attack(head, c_star, y_star, t, cfg, method=method)
        except DegenerateDirectionError:
            skipped += 1
    if skipped:
        log.warning("skipped %d degenerate target(s) for true class %d", skipped, y_star)
    if not results:
        raise DegenerateDirectionError("every target direction is degenerate")
    return results


def untargeted_min_attack(
    head: LinearHead, c_star, y_star: int, cfg: AttackConfig = AttackConfig(),
    method: str = "multi",
) -> AttackResult:
    """Minimal-norm flip over all targets.

    Successful attacks always beat unsuccessful ones; within each group the
    smallest norm wins and ties go to the lowest target index.
    """
    if head.num_classes < 2:
        raise ParameterError("need at least two classes")
    best: Optional[AttackResult] = None
    for t, res in sorted(attacks_over_targets(head, c_star, y_star, cfg, method).items()):
        if best is None:
            best = res
        elif (res.success, -res.norm) > (best.success, -best.norm):
            best = res
    assert best is not None
    return best


def linearized_attack(
    head: MlpHead, c_star, y_star: int, t: int, cfg: AttackConfig = AttackConfig()
) -> AttackResult:
    """Iterative attack on a layered head through repeated local linearization.

    At the current point c the head is replaced by its tangent model
    (Jacobian rows as weights, g(c) - J c as bias), the multi-constraint
    attack is solved there, and the point steps by the resulting delta.
    Stops as soon as the true head predicts the target; gives up after
    max_relin_iters with success=False rather than raising.
    """
    if t == y_star:
        raise ParameterError("target class must differ from the true class")
    if not 0 <= t < head.num_classes:
        raise ParameterError(f"target {t} out of range for {head.num_classes} classes")
    start = as_vector(c_star)
    current = start.copy()
    init_margins: Optional[np.ndarray] = None
    success = False
    for _ in range(cfg.max_relin_iters):
        jac = mlp_jacobian(head, current)
        local_bias = mlp_forward(head, current) - jac @ current
        try:
            local = LinearHead(weights=jac, bias=local_bias)
            step_res = multi_constraint_attack(local, current, y_star, t, cfg)
        except DegenerateDirectionError:
            break  # no usable gradient signal at this point
        if init_margins is None:
            init_margins = step_res.margins
        current = current + step_res.delta
        point = apply_perturbation(start, current - start, clamp=cfg.clamp_concepts)
        if mlp_predict(head, point) == t:
            success = True
            break
    if init_margins is None:
        scores = mlp_forward(head, start)
        init_margins = _drop_target(scores - scores[t], t)
    return AttackResult(
        delta=current - start,
        norm=0.0,
        target=t,
        success=success,
        margins=init_margins,
        method="linearized",
    )


def mlp_attacks_over_targets(
    head: MlpHead, c_star, y_star: int, cfg: AttackConfig = AttackConfig()
) -> dict[int, AttackResult]:
    return {
        t: linearized_attack(head, c_star, y_star, t, cfg)
        for t in range(head.num_classes)
        if t != y_star
    }


def mlp_untargeted_min_attack(
    head: MlpHead, c_star, y_star: int, cfg: AttackConfig = AttackConfig()
) -> AttackResult:
    best: Optional[AttackResult] = None
    for t, res in sorted(mlp_attacks_over_targets(head, c_star, y_star, cfg).items()):
        if best is None or (res.success, -res.norm) > (best.success, -best.norm):
            best = res
    if best is None:
        raise ParameterError("need at least two classes")
    return best
