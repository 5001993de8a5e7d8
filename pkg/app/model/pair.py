"""
Student/teacher parameter pair of the mean-teacher scheme.

The teacher starts as an exact copy of the student and afterwards moves only
through ema_update: θ' ← αθ' + (1−α)θ. Teacher tensors never require a
gradient, so no loss can reach them.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from app.autodiff import Tensor, no_grad
from app.errors import DimensionError
from app.model.networks import ModelInput, Network, Params, build_network
from app.model.schemas import PairConfig


@dataclass
class StudentTeacherPair:
    spec: object  # MlpSpec | FusionSpec | ConcatSpec
    network: Network
    student: Params
    teacher: Params
    config: PairConfig

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def student_params(self) -> List[Tensor]:
        return list(self.student.values())

    def teacher_params(self) -> List[Tensor]:
        return list(self.teacher.values())

    def check_congruent(self) -> None:
        if list(self.student) != list(self.teacher):
            raise DimensionError("student and teacher parameter names differ")
        for name, p in self.student.items():
            if p.shape != self.teacher[name].shape:
                raise DimensionError(f"parameter {name} differs in shape", p.shape, self.teacher[name].shape)

    def snapshot(self, which: str = "teacher") -> Dict[str, np.ndarray]:
        params = self.teacher if which == "teacher" else self.student
        return OrderedDict((k, v.values.copy()) for k, v in params.items())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.student.values()))


def clone_params(params: Params, requires_grad: bool) -> Params:
    return OrderedDict((k, Tensor(v.values.copy(), requires_grad=requires_grad, name=k)) for k, v in params.items())


def init_model(spec, seed: int, config: Optional[PairConfig] = None) -> StudentTeacherPair:
    """
    Weights ~ U(−1/√fan_in, 1/√fan_in), biases zero, teacher cloned from student.
    Without an explicit config the architecture's dropout rate is used for both.
    """
    if config is None:
        rate = getattr(spec, "dropout_rate", 0.0)
        config = PairConfig(student_dropout=rate, teacher_dropout=rate)
    network = build_network(spec)
    student = network.init_params(np.random.default_rng(seed))
    for name, p in student.items():
        p.name = name
    teacher = clone_params(student, requires_grad=False)
    return StudentTeacherPair(spec=spec, network=network, student=student, teacher=teacher, config=config)


def forward_student(pair: StudentTeacherPair, x: ModelInput, rng: np.random.Generator,
                    mode: str = "train") -> Tensor:
    train = mode == "train"
    return pair.network.forward(pair.student, x, rng, train,
                                noise_sigma=pair.config.noise_sigma,
                                dropout_rate=pair.config.student_dropout)


def forward_teacher(pair: StudentTeacherPair, x: ModelInput, rng: np.random.Generator,
                    mode: str = "train") -> Tensor:
    """Independent perturbation; evaluated off-tape and returned detached."""
    train = mode == "train"
    with no_grad():
        out = pair.network.forward(pair.teacher, x, rng, train,
                                   noise_sigma=pair.config.noise_sigma,
                                   dropout_rate=pair.config.teacher_dropout)
    return out.detach()


def forward_eval(pair: StudentTeacherPair, x: ModelInput, which: str = "teacher") -> np.ndarray:
    """Deterministic predictions as a plain array."""
    params = pair.teacher if which == "teacher" else pair.student
    with no_grad():
        out = pair.network.forward(params, x, np.random.default_rng(0), False)
    return out.values.copy()


def ema_update(pair: StudentTeacherPair, alpha: Optional[float] = None) -> None:
    a = pair.alpha if alpha is None else float(alpha)
    for name, t in pair.teacher.items():
        s = pair.student[name]
        if s.shape != t.shape:
            raise DimensionError(f"parameter {name} differs in shape", s.shape, t.shape)
        if a == 0.0:
            t.values = s.values.copy()
        else:
            t.values = a * t.values + (1.0 - a) * s.values


def load_params(params: Params, arrays: Dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in arrays:
            raise DimensionError(f"missing parameter {name}")
        if arrays[name].shape != p.shape:
            raise DimensionError(f"parameter {name} differs in shape", arrays[name].shape, p.shape)
        p.values = np.array(arrays[name], dtype=float)
