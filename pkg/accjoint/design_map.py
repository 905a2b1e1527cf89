"""
Design Map - declarative model specification

A ModelSpec maps every (task, cell, accumulator) of an experiment onto named
parameters. The subject-level random-effects vector alpha is ordered by
`vector_order`; natural-scale parameters are exp(alpha). Names listed under
`fixed` are natural-scale constants that are not estimated.

model.json:
    {
      "tasks": [
        {"name": "out", "params": ["out.b_a", ...],
         "cells": {"accuracy_left": {"accumulators": [
             {"b": "out.b_a", "A": "out.A", "v": "out.v_c", "tau": "out.tau", "correct": true},
             {"b": "out.b_a", "A": "out.A", "v": "out.v_e", "tau": "out.tau"}]}}}
      ],
      "vector_order": ["out.b_a", ...],
      "fixed": {}
    }

Usage:
    from design_map import load_model_spec, resolve

    spec = load_model_spec("model.json")
    params = resolve(spec, "out", "accuracy_left", alpha)
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError, InvalidInputError, ModelNotFoundError
from lba import AccumulatorParams, TrialRecord

FIXTURES_DIR = Path(__file__).resolve().parent / "fixtures"


# ==================== SPEC DOCUMENT ====================

class AccumulatorMap(BaseModel):
    """Parameter names driving one accumulator in one cell"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    b: str
    A: str
    v: str
    tau: str
    correct: bool = False  # accumulator matches the stimulus


class CellMap(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    accumulators: List[AccumulatorMap] = Field(..., min_length=1)


class TaskBlock(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    params: List[str]
    cells: Dict[str, CellMap]


class ModelSpec(BaseModel):
    """Immutable mapping from design cells to the parameter vector"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tasks: List[TaskBlock] = Field(..., min_length=1)
    vector_order: List[str] = Field(..., min_length=1)
    fixed: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_names(self):
        duplicates = [n for n, k in Counter(self.vector_order).items() if k > 1]
        if duplicates:
            raise ValueError(f"vector_order lists names more than once: {duplicates}")

        task_names = [t.name for t in self.tasks]
        if len(set(task_names)) != len(task_names):
            raise ValueError(f"task names must be unique: {task_names}")

        estimated = set(self.vector_order)
        for name, value in self.fixed.items():
            if name in estimated:
                raise ValueError(f"'{name}' is both fixed and estimated")
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"fixed value for '{name}' must be finite and non-negative: {value}")

        owned: List[str] = []
        for task in self.tasks:
            owned.extend(task.params)
            for cell_name, cell in task.cells.items():
                taus = {acc.tau for acc in cell.accumulators}
                if len(taus) != 1:
                    raise ValueError(f"{task.name}/{cell_name}: accumulators must share one tau name, got {sorted(taus)}")
                for acc in cell.accumulators:
                    for name in (acc.b, acc.A, acc.v, acc.tau):
                        if name not in estimated and name not in self.fixed:
                            raise ValueError(f"{task.name}/{cell_name} references unknown parameter '{name}'")

        if sorted(owned) != sorted(self.vector_order):
            missing = sorted(estimated - set(owned))
            extra = sorted(set(owned) - estimated)
            raise ValueError(
                f"task params must partition vector_order (unowned: {missing}, not in vector_order: {extra})"
            )
        return self

    # -------------------- derived layout --------------------

    @property
    def dimension(self) -> int:
        return len(self.vector_order)

    @cached_property
    def columns(self) -> Dict[str, int]:
        """Column of every name in the natural table: estimated first, then fixed"""
        cols = {name: i for i, name in enumerate(self.vector_order)}
        for j, name in enumerate(self.fixed):
            cols[name] = self.dimension + j
        return cols

    @cached_property
    def block_labels(self) -> List[str]:
        """Task name owning each coordinate of alpha"""
        owner = {name: task.name for task in self.tasks for name in task.params}
        return [owner[name] for name in self.vector_order]

    @cached_property
    def fixed_values(self) -> np.ndarray:
        return np.array(list(self.fixed.values()), dtype=float)

    def task(self, name: str) -> TaskBlock:
        for task in self.tasks:
            if task.name == name:
                return task
        raise ConfigurationError(f"unknown task '{name}'", task=name)

    def cell(self, task: str, cell: str) -> CellMap:
        block = self.task(task)
        if cell not in block.cells:
            raise ConfigurationError(f"cell '{cell}' is not mapped for task '{task}'", task=task, cell=cell)
        return block.cells[cell]

    def cells(self) -> List[Tuple[str, str]]:
        return [(task.name, cell) for task in self.tasks for cell in task.cells]

    def correct_response(self, task: str, cell: str) -> int:
        """Index of the accumulator tagged as matching the stimulus (-1 if none)"""
        for k, acc in enumerate(self.cell(task, cell).accumulators):
            if acc.correct:
                return k
        return -1

    def natural_table(self, alpha: np.ndarray) -> np.ndarray:
        """exp(alpha) followed by fixed constants; works row-wise on (R, D)"""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1] != self.dimension:
            raise InvalidInputError(f"alpha has length {alpha.shape[-1]}, spec needs {self.dimension}")
        natural = np.exp(alpha)
        fixed = np.broadcast_to(self.fixed_values, alpha.shape[:-1] + (len(self.fixed),))
        return np.concatenate([natural, fixed], axis=-1)

    def compile_trials(self, trials: Sequence[TrialRecord]) -> "CompiledTrials":
        """Index arrays for one subject's trials (see CompiledTrials)"""
        return compile_trials(self, trials)


# ==================== SUBJECT EFFECTS ====================

@dataclass(frozen=True)
class SubjectEffects:
    """One subject's log-scale random effects"""

    alpha: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1 or not np.all(np.isfinite(alpha)):
            raise InvalidInputError("alpha must be a finite vector", subject=self.subject_id)
        object.__setattr__(self, "alpha", alpha)

    @property
    def natural(self) -> np.ndarray:
        return np.exp(self.alpha)


def _alpha_vector(alpha: Union[SubjectEffects, np.ndarray, Sequence[float]]) -> np.ndarray:
    if isinstance(alpha, SubjectEffects):
        return alpha.alpha
    return np.asarray(alpha, dtype=float)


# ==================== OPERATIONS ====================

def resolve(spec: ModelSpec, task: str, cell: str,
            alpha: Union[SubjectEffects, np.ndarray]) -> List[AccumulatorParams]:
    """
    Natural-scale accumulator parameters for one design cell

    Raises:
        ConfigurationError: If the task or cell is not mapped
    """
    natural = spec.natural_table(_alpha_vector(alpha))
    cols = spec.columns
    return [
        AccumulatorParams(
            b_gap=float(natural[cols[acc.b]]),
            A=float(natural[cols[acc.A]]),
            v=float(natural[cols[acc.v]]),
            tau=float(natural[cols[acc.tau]]),
        )
        for acc in spec.cell(task, cell).accumulators
    ]


@dataclass(frozen=True)
class CompiledTrials:
    """
    One subject's trials as index arrays into the natural table

    b_idx, A_idx, v_idx, mask and chosen_mask are (N, K) with K the largest
    race in the data; padded accumulators point at column 0 and are masked.
    """

    subject_id: str
    rt: np.ndarray
    response: np.ndarray
    b_idx: np.ndarray
    A_idx: np.ndarray
    v_idx: np.ndarray
    tau_idx: np.ndarray
    mask: np.ndarray
    chosen_mask: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tasks: List[str] = field(default_factory=list)
    cells: List[str] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return int(self.rt.shape[0])

    def natural(self, alphas: np.ndarray) -> np.ndarray:
        """Natural table rows for (R, D) alphas"""
        alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
        with np.errstate(over="ignore"):
            natural = np.exp(alphas)
        fixed = np.broadcast_to(self.fixed, (alphas.shape[0], self.fixed.shape[0]))
        return np.concatenate([natural, fixed], axis=1)


def compile_trials(spec: ModelSpec, trials: Sequence[TrialRecord]) -> CompiledTrials:
    """
    Raises:
        InvalidInputError: If trials mix subjects or a response is outside its race
        ConfigurationError: If a trial's cell is not mapped
    """
    subjects = {t.subject_id for t in trials}
    if len(subjects) > 1:
        raise InvalidInputError(f"trials belong to {len(subjects)} subjects, expected one", subjects=sorted(subjects))
    subject_id = next(iter(subjects)) if subjects else ""

    cols = spec.columns
    layout: Dict[Tuple[str, str], List[AccumulatorMap]] = {}
    for t in trials:
        key = (t.task, t.cell)
        if key not in layout:
            layout[key] = spec.cell(t.task, t.cell).accumulators
    k_max = max((len(accs) for accs in layout.values()), default=1)

    n = len(trials)
    b_idx = np.zeros((n, k_max), dtype=np.intp)
    A_idx = np.zeros((n, k_max), dtype=np.intp)
    v_idx = np.zeros((n, k_max), dtype=np.intp)
    tau_idx = np.zeros(n, dtype=np.intp)
    mask = np.zeros((n, k_max), dtype=bool)
    chosen = np.zeros((n, k_max), dtype=bool)

    for i, t in enumerate(trials):
        accs = layout[(t.task, t.cell)]
        if t.response >= len(accs):
            raise InvalidInputError(
                f"response {t.response} outside race of {len(accs)} accumulators in {t.task}/{t.cell}",
                subject=t.subject_id,
            )
        k = len(accs)
        b_idx[i, :k] = [cols[a.b] for a in accs]
        A_idx[i, :k] = [cols[a.A] for a in accs]
        v_idx[i, :k] = [cols[a.v] for a in accs]
        tau_idx[i] = cols[accs[0].tau]
        mask[i, :k] = True
        chosen[i, t.response] = True

    return CompiledTrials(
        subject_id=subject_id,
        rt=np.array([t.rt for t in trials], dtype=float),
        response=np.array([t.response for t in trials], dtype=np.intp),
        b_idx=b_idx,
        A_idx=A_idx,
        v_idx=v_idx,
        tau_idx=tau_idx,
        mask=mask,
        chosen_mask=chosen,
        fixed=spec.fixed_values,
        tasks=[t.task for t in trials],
        cells=[t.cell for t in trials],
    )


@dataclass
class SpecReport:
    """Coverage of a data set by a model spec"""

    ok: bool
    n_parameters: int
    unmapped_cells: List[str] = field(default_factory=list)
    unused_parameters: List[str] = field(default_factory=list)
    cell_counts: Dict[str, int] = field(default_factory=dict)
    bad_responses: int = 0

    def summary(self) -> str:
        status = "✓ spec covers data" if self.ok else "✗ spec does not cover data"
        lines = [status, f"  parameters: {self.n_parameters}"]
        if self.unmapped_cells:
            lines.append(f"  unmapped cells: {', '.join(self.unmapped_cells)}")
        if self.unused_parameters:
            lines.append(f"  unused parameters: {', '.join(self.unused_parameters)}")
        if self.bad_responses:
            lines.append(f"  responses outside their race: {self.bad_responses}")
        return "\n".join(lines)


def validate_spec(spec: ModelSpec, data: Sequence[TrialRecord]) -> SpecReport:
    """Report-style check of spec against data; never raises"""
    referenced = set()
    for task in spec.tasks:
        for cell in task.cells.values():
            for acc in cell.accumulators:
                referenced.update((acc.b, acc.A, acc.v, acc.tau))

    mapped = {(task.name, cell): len(c.accumulators) for task in spec.tasks for cell, c in task.cells.items()}
    counts: Counter = Counter()
    unmapped: List[str] = []
    bad = 0
    for t in data:
        label = f"{t.task}/{t.cell}"
        counts[label] += 1
        size = mapped.get((t.task, t.cell))
        if size is None:
            if label not in unmapped:
                unmapped.append(label)
        elif t.response >= size:
            bad += 1

    return SpecReport(
        ok=not unmapped and bad == 0,
        n_parameters=spec.dimension,
        unmapped_cells=unmapped,
        unused_parameters=[name for name in spec.vector_order if name not in referenced],
        cell_counts=dict(counts),
        bad_responses=bad,
    )


# ==================== LOADING ====================

def parse_model_spec(document: dict) -> ModelSpec:
    try:
        return ModelSpec.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"invalid model spec: {e.errors()[0]['msg']}", errors=str(e)) from e


def load_model_spec(path: Union[str, Path]) -> ModelSpec:
    """
    Load and validate model.json

    Raises:
        ModelNotFoundError: If the file does not exist
        ConfigurationError: If it is not a valid spec
    """
    path = Path(path)
    if not path.is_file():
        raise ModelNotFoundError(f"model spec not found: {path}", path=str(path))
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"model spec is not valid JSON: {e}", path=str(path)) from e
    return parse_model_spec(document)


def bundled_spec(name: str) -> ModelSpec:
    """One of the fixture specs: two_session, three_task, desk, tiny"""
    return load_model_spec(FIXTURES_DIR / f"{name}_model.json")
