import json

import numpy as np
import pytest

from conftest import TINY_START
from design_map import (
    FIXTURES_DIR, SubjectEffects, bundled_spec, compile_trials, load_model_spec, parse_model_spec, resolve,
    validate_spec,
)
from errors import ConfigurationError, InvalidInputError, ModelNotFoundError
from lba import TrialRecord, subject_log_likelihood


def test_bundled_spec_dimensions():
    assert bundled_spec("two_session").dimension == 14
    assert bundled_spec("three_task").dimension == 27
    assert bundled_spec("desk").dimension == 6
    assert bundled_spec("tiny").dimension == 4


def test_block_labels_follow_task_ownership():
    spec = bundled_spec("two_session")
    assert spec.block_labels == ["out"] * 7 + ["in"] * 7


def test_resolve_exponentiates_alpha(tiny_spec):
    params = resolve(tiny_spec, "main", "left", SubjectEffects(np.zeros(4)))
    assert len(params) == 2
    for p in params:
        assert p.b_gap == 1.0 and p.v == 1.0 and p.tau == 1.0
        assert p.A == 0.5  # fixed constant


def test_resolve_maps_correct_accumulator(tiny_spec):
    alpha = np.log([1.0, 3.0, 1.2, 0.2])
    left = resolve(tiny_spec, "main", "left", alpha)
    right = resolve(tiny_spec, "main", "right", alpha)
    assert left[0].v == pytest.approx(3.0) and left[1].v == pytest.approx(1.2)
    assert right[0].v == pytest.approx(1.2) and right[1].v == pytest.approx(3.0)
    assert tiny_spec.correct_response("main", "left") == 0
    assert tiny_spec.correct_response("main", "right") == 1


def test_resolve_unknown_cell(tiny_spec):
    with pytest.raises(ConfigurationError):
        resolve(tiny_spec, "main", "middle", np.zeros(4))
    with pytest.raises(ConfigurationError):
        resolve(tiny_spec, "other", "left", np.zeros(4))


def test_resolve_wrong_length(tiny_spec):
    with pytest.raises(InvalidInputError):
        resolve(tiny_spec, "main", "left", np.zeros(3))


def test_subject_effects_reject_nonfinite():
    with pytest.raises(InvalidInputError):
        SubjectEffects(np.array([0.0, np.inf]))


def _doc(**changes):
    doc = {
        "tasks": [{"name": "t", "params": ["t.b", "t.v", "t.tau"], "cells": {
            "c": {"accumulators": [
                {"b": "t.b", "A": "t.A", "v": "t.v", "tau": "t.tau", "correct": True},
                {"b": "t.b", "A": "t.A", "v": "t.v", "tau": "t.tau"},
            ]}}}],
        "vector_order": ["t.b", "t.v", "t.tau"],
        "fixed": {"t.A": 0.4},
    }
    doc.update(changes)
    return doc


def test_parse_accepts_minimal_document():
    spec = parse_model_spec(_doc())
    assert spec.dimension == 3
    assert spec.columns["t.A"] == 3


@pytest.mark.parametrize("changes", [
    {"vector_order": ["t.b", "t.v", "t.tau", "t.b"]},
    {"vector_order": ["t.b", "t.v"]},
    {"fixed": {}},
    {"fixed": {"t.A": -1.0}},
    {"fixed": {"t.A": 0.4, "t.b": 1.0}},
])
def test_parse_rejects_bad_documents(changes):
    with pytest.raises(ConfigurationError):
        parse_model_spec(_doc(**changes))


def test_parse_rejects_mixed_tau():
    doc = _doc()
    doc["tasks"][0]["cells"]["c"]["accumulators"][1]["tau"] = "t.b"
    with pytest.raises(ConfigurationError):
        parse_model_spec(doc)


def test_load_missing_file(tmp_path):
    with pytest.raises(ModelNotFoundError) as info:
        load_model_spec(tmp_path / "absent.json")
    assert info.value.code == "E_MODEL_NOT_FOUND"


def test_load_bad_json(tmp_path):
    path = tmp_path / "model.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_model_spec(path)


def test_validate_reports_unmapped_cells_and_bad_responses(tiny_spec):
    data = [
        TrialRecord("s1", "main", "left", 0, 0.5),
        TrialRecord("s1", "main", "up", 0, 0.5),
        TrialRecord("s1", "main", "right", 3, 0.5),
    ]
    report = validate_spec(tiny_spec, data)
    assert not report.ok
    assert report.unmapped_cells == ["main/up"]
    assert report.bad_responses == 1
    assert report.cell_counts["main/left"] == 1
    assert "unmapped" in report.summary()


def test_validate_ok_for_fixture(tiny_spec, tiny_trials):
    report = validate_spec(tiny_spec, tiny_trials)
    assert report.ok
    assert report.unused_parameters == []
    assert sum(report.cell_counts.values()) == 90


def test_validate_flags_unused_parameters():
    doc = _doc()
    doc["tasks"][0]["params"].append("t.spare")
    doc["vector_order"].append("t.spare")
    report = validate_spec(parse_model_spec(doc), [])
    assert report.unused_parameters == ["t.spare"]


def test_compile_trials_layout(tiny_spec, tiny_trials):
    trials = [t for t in tiny_trials if t.subject_id == "s02"]
    compiled = compile_trials(tiny_spec, trials)
    assert compiled.n_trials == 30
    assert compiled.mask.shape == (30, 2)
    assert compiled.chosen_mask.sum() == 30
    np.testing.assert_array_equal(compiled.chosen_mask.argmax(axis=1), compiled.response)
    natural = compiled.natural(np.zeros((2, 4)))
    assert natural.shape == (2, 5)
    assert natural[0, 4] == 0.5


def test_compile_trials_rejects_mixed_subjects(tiny_spec):
    with pytest.raises(InvalidInputError):
        compile_trials(tiny_spec, [TrialRecord("a", "main", "left", 0, 0.5),
                                   TrialRecord("b", "main", "left", 0, 0.5)])


@pytest.mark.parametrize("name", ["three_task", "two_session", "desk"])
def test_compiled_indices_agree_with_resolve(name):
    spec = bundled_spec(name)
    alpha = np.random.default_rng(5).normal(0.0, 0.3, spec.dimension)
    cells = spec.cells()
    compiled = compile_trials(spec, [TrialRecord("s1", task, cell, 0, 1.0) for task, cell in cells])
    natural = compiled.natural(alpha)[0]
    for i, (task, cell) in enumerate(cells):
        params = resolve(spec, task, cell, alpha)
        k = len(params)
        assert compiled.mask[i].sum() == k
        np.testing.assert_allclose(natural[compiled.b_idx[i, :k]], [p.b_gap for p in params])
        np.testing.assert_allclose(natural[compiled.A_idx[i, :k]], [p.A for p in params])
        np.testing.assert_allclose(natural[compiled.v_idx[i, :k]], [p.v for p in params])
        assert natural[compiled.tau_idx[i]] == pytest.approx(params[0].tau)


def test_trial_order_does_not_change_likelihood(tiny_spec, tiny_trials):
    trials = [t for t in tiny_trials if t.subject_id == "s02"]
    alpha = np.array(TINY_START)
    base = subject_log_likelihood(trials, alpha, tiny_spec)
    assert np.isfinite(base)
    rng = np.random.default_rng(8)
    for _ in range(3):
        shuffled = [trials[i] for i in rng.permutation(len(trials))]
        assert subject_log_likelihood(shuffled, alpha, tiny_spec) == pytest.approx(base, rel=1e-12)


def test_cell_and_parameter_order_do_not_change_likelihood(tiny_spec, tiny_trials):
    trials = [t for t in tiny_trials if t.subject_id == "s01"]
    alpha = np.array(TINY_START)
    base = subject_log_likelihood(trials, alpha, tiny_spec)

    doc = json.loads((FIXTURES_DIR / "tiny_model.json").read_text())
    for task in doc["tasks"]:
        task["cells"] = dict(reversed(list(task["cells"].items())))
        task["params"] = list(reversed(task["params"]))
    doc["vector_order"] = list(reversed(doc["vector_order"]))
    reordered = parse_model_spec(doc)

    assert list(reordered.cells()) == list(reversed(tiny_spec.cells()))
    assert subject_log_likelihood(trials, alpha[::-1], reordered) == pytest.approx(base, rel=1e-12)
