import json

import pytest

from config import SEED_ENV, FitConfig, env_seed_override, load_fit_config
from design_map import FIXTURES_DIR
from errors import ConfigurationError, DataNotFoundError, ModelNotFoundError


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


def _write(tmp_path, document):
    path = tmp_path / "fit.json"
    path.write_text(json.dumps(document))
    return path


def test_load_fixture_resolves_paths():
    cfg = load_fit_config(FIXTURES_DIR / "fit.json")
    assert cfg.data == (FIXTURES_DIR / "tiny_trials.csv").resolve()
    assert cfg.model == (FIXTURES_DIR / "tiny_model.json").resolve()
    assert cfg.out.is_absolute()
    assert cfg.sampler.seed == 11
    assert cfg.analysis.predictive_draws == 5


def test_missing_config(tmp_path):
    with pytest.raises(ConfigurationError):
        load_fit_config(tmp_path / "fit.json")


@pytest.mark.parametrize("document", [
    {"log_level": "LOUD"},
    {"sampler": {"mixture_weights": [0.2, 0.2]}},
    {"hierarchy": {"nu": 1.0}},
    {"hierarchy": {"A_scale": [1.0, -1.0]}},
    {"extra": True},
])
def test_invalid_documents(tmp_path, document):
    with pytest.raises(ConfigurationError):
        load_fit_config(_write(tmp_path, document), check_paths=False)


def test_missing_inputs_have_specific_codes(tmp_path):
    (tmp_path / "trials.csv").write_text("subject,task,cell,response,rt\n")
    path = _write(tmp_path, {"data": "absent.csv", "model": "model.json", "out": "out"})
    with pytest.raises(DataNotFoundError):
        load_fit_config(path)
    path = _write(tmp_path, {"data": "trials.csv", "model": "model.json", "out": "out"})
    with pytest.raises(ModelNotFoundError):
        load_fit_config(path)


def test_paths_required():
    with pytest.raises(ConfigurationError):
        FitConfig().validate_paths()


def test_env_seed_then_flag(monkeypatch):
    cfg = FitConfig()
    monkeypatch.setenv(SEED_ENV, "41")
    assert cfg.with_overrides().sampler.seed == 41
    assert cfg.with_overrides(seed=5).sampler.seed == 5
    assert cfg.with_overrides(workers=3).sampler.workers == 3


@pytest.mark.parametrize("raw", ["seven", "-1"])
def test_bad_env_seed(monkeypatch, raw):
    monkeypatch.setenv(SEED_ENV, raw)
    with pytest.raises(ConfigurationError):
        env_seed_override()


def test_blank_env_seed_is_ignored(monkeypatch):
    monkeypatch.setenv(SEED_ENV, " ")
    assert env_seed_override() is None


def test_overrides_resolve_paths(tmp_path):
    cfg = FitConfig().with_overrides(data=tmp_path / "x.csv", out=tmp_path / "out")
    assert cfg.data == (tmp_path / "x.csv").resolve()
    assert cfg.model is None
