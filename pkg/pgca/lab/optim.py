from dataclasses import asdict, dataclass, field

import numpy as np

from pgca.core.errors import ConfigError, FrozenParameterError, NonFiniteError


@dataclass(frozen=True)
class TrainHyper:
    lr_max: float
    warmup_steps: int
    total_steps: int
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    stage: int = 1
    eval_every: int = 200
    eval_limit: int = 0

    def validate(self, strict=True):
        problems = []
        if not self.lr_max > 0:
            problems.append(f"lr_max={self.lr_max} must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            problems.append(f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size} must be positive")
        if self.stage not in (1, 2):
            problems.append(f"stage={self.stage} must be 1 or 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("adam betas must lie in [0, 1)")
        if self.eval_every < 1:
            problems.append(f"eval_every={self.eval_every} must be positive")
        if problems and strict:
            raise ConfigError("Invalid training hyperparameters: " + "; ".join(problems))
        return problems

    def as_dict(self):
        return asdict(self)


# Desk-scale defaults and the published two-stage budgets.
STAGE1_DESK = TrainHyper(lr_max=2e-3, warmup_steps=200, total_steps=2000, batch_size=8, stage=1)
STAGE2_DESK = TrainHyper(lr_max=5e-3, warmup_steps=300, total_steps=3000, batch_size=8, stage=2)
STAGE1_PUBLISHED = TrainHyper(lr_max=1.25e-5, warmup_steps=8000, total_steps=80000, batch_size=4, stage=1)
STAGE2_PUBLISHED = TrainHyper(lr_max=5.0e-5, warmup_steps=30000, total_steps=180000, batch_size=8, stage=2)


def lr_schedule(step, hp):
    """Linear warm-up to lr_max, then linear decay to zero at total_steps."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < hp.warmup_steps:
        return hp.lr_max * step / hp.warmup_steps
    decay_span = hp.total_steps - hp.warmup_steps
    if decay_span <= 0:
        return hp.lr_max if step == hp.warmup_steps else 0.0
    return hp.lr_max * max(0.0, (hp.total_steps - step) / decay_span)


@dataclass
class OptState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, named_params):
        return cls(
            step=0,
            m={name: np.zeros_like(t.data) for name, t in named_params},
            v={name: np.zeros_like(t.data) for name, t in named_params},
        )

    def copy(self):
        return OptState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(named_params, max_norm):
    """Rescales grads in place when their global norm exceeds max_norm."""
    grads = [t.grad for _, t in named_params if t.grad is not None]
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def adamw_step(named_params, state, hp, lr, frozen=()):
    """One AdamW update; weight decay is applied to the parameter directly,
    not folded into the gradient."""
    frozen = set(frozen)
    for name, tensor in named_params:
        if name in frozen:
            raise FrozenParameterError(f"parameter {name!r} is frozen and must not be updated")
        if name not in state.m:
            raise KeyError(f"optimizer state has no moments for {name!r}")
        if tensor.grad is not None and tensor.grad.shape != tensor.shape:
            raise ValueError(f"gradient shape {tensor.grad.shape} != parameter shape {tensor.shape} for {name!r}")
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.step + 1}; update skipped")

    state.step += 1
    t = state.step
    correction1 = 1.0 - hp.beta1**t
    correction2 = 1.0 - hp.beta2**t
    for name, tensor in named_params:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * grad
        v *= hp.beta2
        v += (1.0 - hp.beta2) * grad * grad
        tensor.data *= 1.0 - lr * hp.weight_decay
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + hp.adam_eps)
    return state
