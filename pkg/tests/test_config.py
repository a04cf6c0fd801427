import json

import numpy as np
import pytest

from diffusionfa.config import (
    ConfigError,
    apply_overrides,
    bundled_config_path,
    load_json,
    model_from_json,
    model_to_json,
    sim_config_from_json,
    sim_config_to_json,
)
from diffusionfa.montecarlo import experiment_from_json

from conftest import THETA_TRUE, make_spec


def test_model_document_roundtrip(truth):
    spec = make_spec()
    doc = model_to_json(spec, truth)
    spec2, params2 = model_from_json(doc)
    assert spec2 == spec
    assert np.array_equal(params2.a, truth.a)
    assert np.array_equal(params2.sigma_ff, truth.sigma_ff)
    assert np.array_equal(params2.sigma_ee, truth.sigma_ee)


def test_model_document_without_params():
    spec, params = model_from_json(
        {"p": 6, "k": 2, "regime": "ergodic", "n": 10, "h": 0.1})
    assert params is None
    assert spec.p == 6


def test_missing_field_names_field():
    with pytest.raises(ConfigError, match="'h'"):
        model_from_json({"p": 6, "k": 2, "regime": "ergodic", "n": 10})


def test_sim_config_roundtrip(sim_config):
    doc = sim_config_to_json(sim_config)
    back = sim_config_from_json(doc, path="")
    assert back.spec == sim_config.spec
    assert np.array_equal(back.a, sim_config.a)
    assert np.array_equal(back.factor_dispersion, sim_config.factor_dispersion)
    assert back.seed == sim_config.seed
    from diffusionfa import simulate

    assert np.array_equal(simulate(back).x, simulate(sim_config).x)


def test_sim_config_missing_nested_field(sim_config):
    doc = sim_config_to_json(sim_config)
    del doc["spec"]["h"]
    with pytest.raises(ConfigError, match="'h'"):
        sim_config_from_json(doc, path="sim")


def test_custom_drift_not_serializable(sim_config):
    doc = sim_config_to_json(sim_config)
    doc["unique_drifts"][0] = {"kind": "custom"}
    with pytest.raises(ConfigError, match="custom"):
        sim_config_from_json(doc, path="sim")


def test_apply_overrides_plain_and_nested(sim_config):
    doc = sim_config_to_json(sim_config)
    apply_overrides(doc, ["seed=42", "spec.n=123", "substeps=3"])
    assert doc["seed"] == 42
    assert doc["spec"]["n"] == 123
    assert doc["substeps"] == 3


def test_apply_overrides_bad_forms(sim_config):
    doc = sim_config_to_json(sim_config)
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(doc, ["oops"])
    with pytest.raises(ConfigError, match="does not exist"):
        apply_overrides(doc, ["nope.deep=1"])


def test_bundled_configs_parse():
    for name in ("system_p6k2", "table6_nonergodic", "ergodic_scaled",
                 "model_p6k2.json"):
        path = bundled_config_path(name)
        doc = load_json(path)
        assert isinstance(doc, dict)
    with pytest.raises(ConfigError, match="bundled"):
        bundled_config_path("missing_config")


def test_experiment_from_bundled_table6():
    doc = load_json(bundled_config_path("table6_nonergodic"))
    exp = experiment_from_json(doc)
    assert exp.replications == 1000
    assert exp.k_grid == (1, 2)
    assert np.array_equal(
        np.concatenate([exp.truth.a.flatten(order="F"),
                        [13.0, 13.0, 26.0], exp.truth.sigma_ee]),
        THETA_TRUE)


def test_experiment_truth_consistency_enforced(sim_config):
    doc = {
        "sim": sim_config_to_json(sim_config),
        "truth": {
            "a": sim_config.a.tolist(),
            "sigma_ff": [13.0, 13.0, 25.0],  # wrong corner entry
            "sigma_ee": (sim_config.unique_dispersions**2).tolist(),
        },
        "replications": 5,
    }
    with pytest.raises(ConfigError, match="inconsistent"):
        experiment_from_json(doc)


def test_experiment_replication_count_validated(sim_config):
    doc = {"sim": sim_config_to_json(sim_config), "replications": 0}
    with pytest.raises(ConfigError, match="replications must be >= 1"):
        experiment_from_json(doc)


def test_invalid_json_reports_line(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}\n")
    with pytest.raises(ConfigError, match="line"):
        load_json(str(bad))
