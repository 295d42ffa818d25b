import pytest

from weightlens.config import (
    DEFAULT_WORKERS,
    WORKERS_ENV,
    PipelineConfig,
    apply_overrides,
    checkpoint_identity,
    config_from_mapping,
    derive_seed,
    load_config,
    resolve_workers,
)
from weightlens.errors import ConfigError


@pytest.fixture
def checkpoints(tmp_path):
    base = tmp_path / "base.safetensors"
    tuned = tmp_path / "tuned.safetensors"
    base.write_bytes(b"")
    tuned.write_bytes(b"")
    return str(base), str(tuned)


# Test that a complete configuration validates
def test_valid_config(checkpoints):
    base, tuned = checkpoints
    PipelineConfig(base=base, finetuned=[tuned]).validate()


# Test that validation reports every problem at once
def test_validation_enumerates_problems(tmp_path):
    cfg = PipelineConfig(base=str(tmp_path / "missing"), finetuned=[], eta=0.5, window=2,
                         k=[0], recipes=[{"kind": "bogus"}], workers=0, zero_policy="nope")
    with pytest.raises(ConfigError) as excinfo:
        cfg.validate()
    problems = excinfo.value.problems
    assert len(problems) == 8
    assert any("does not exist" in p for p in problems)
    assert any("no fine-tuned" in p for p in problems)
    assert any("eta" in p for p in problems)
    assert any(p.startswith("recipe 0:") for p in problems)
    assert "8 configuration problem(s)" in str(excinfo.value)


# Test that values of the wrong type are reported as problems
def test_wrong_types_are_problems(checkpoints):
    base, tuned = checkpoints
    cfg = PipelineConfig(base=base, finetuned=[tuned], eta="abc", window="3", k=["8"], seed=1.5,
                         workers="two", spectral="yes", recipes=["safe"])
    with pytest.raises(ConfigError) as excinfo:
        cfg.validate()
    problems = excinfo.value.problems
    assert len(problems) == 7
    for key in ("eta", "window", "k", "seed", "workers", "spectral", "recipes"):
        assert any(p.startswith(key) for p in problems), key


# Test that a YAML file with quoted numbers fails validation cleanly
def test_yaml_strings_for_numbers(tmp_path, checkpoints):
    base, tuned = checkpoints
    path = tmp_path / "weightlens.yaml"
    path.write_text(f"base: {base}\nfinetuned: [{tuned}]\neta: '1e-3'\nwindow: 'three'\n")
    with pytest.raises(ConfigError) as excinfo:
        load_config(str(path)).validate()
    assert excinfo.value.problems == ["eta must be a number; got '1e-3'",
                                      "window must be an odd count >= 1; got 'three'"]


# Test that a missing base path is reported
def test_missing_base_is_a_problem():
    with pytest.raises(ConfigError) as excinfo:
        PipelineConfig(finetuned=[]).validate()
    assert "base checkpoint path is missing" in excinfo.value.problems


# Test loading a YAML file
def test_load_config(tmp_path, checkpoints):
    base, tuned = checkpoints
    path = tmp_path / "weightlens.yaml"
    path.write_text(f"base: {base}\nfinetuned: {tuned}\neta: 0.0005\nk: 8\n"
                    "recipes:\n  - {kind: safe, alpha: 0.25}\nseed: 3\n")
    cfg = load_config(str(path))
    assert cfg.finetuned == [tuned]
    assert cfg.k == [8]
    assert cfg.eta == 0.0005
    assert cfg.seed == 3
    cfg.validate()


# Test that an empty YAML file gives the defaults
def test_load_empty_config(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(str(path)) == PipelineConfig()


# Test that a non-mapping YAML document is rejected
def test_load_config_rejects_lists(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="must be a mapping"):
        load_config(str(path))


# Test that unknown keys are rejected by name
def test_unknown_keys():
    with pytest.raises(ConfigError) as excinfo:
        config_from_mapping({"base": "x", "etaa": 0.1, "kk": 2})
    assert excinfo.value.problems == ["unknown key 'etaa'", "unknown key 'kk'"]


# Test that flags override file values and None means unset
def test_overrides():
    cfg = PipelineConfig(eta=1e-3, seed=1)
    apply_overrides(cfg, {"eta": 2e-4, "seed": None, "output_dir": "elsewhere"})
    assert cfg.eta == 2e-4
    assert cfg.seed == 1
    assert cfg.output_dir == "elsewhere"
    with pytest.raises(ConfigError, match="unknown override"):
        apply_overrides(cfg, {"colour": "blue"})


# Test that the fingerprint ignores the worker count but follows the checkpoint files
def test_fingerprint(checkpoints):
    base, tuned = checkpoints
    a = PipelineConfig(base=base, finetuned=[tuned], workers=1)
    b = PipelineConfig(base=base, finetuned=[tuned], workers=8)
    c = PipelineConfig(base=base, finetuned=[tuned], workers=1, eta=5e-4)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()

    before = a.fingerprint()
    with open(tuned, "wb") as fh:
        fh.write(b"replaced")
    assert a.fingerprint() != before
    assert checkpoint_identity(tuned)[0] == len(b"replaced")
    assert checkpoint_identity(tuned + ".missing") is None
    PipelineConfig(base="b", finetuned=["f"]).fingerprint()


# Test recipe seeds derived from the root seed
def test_mask_recipes_get_derived_seeds():
    cfg = PipelineConfig(seed=5, recipes=[{"kind": "random_matched"}, {"kind": "principal", "seed": 11}])
    recipes = cfg.mask_recipes()
    assert recipes[0].seed == derive_seed(5, "recipe/0")
    assert recipes[1].seed == 11


# Test the layer filter switch for 1-D layers
def test_layer_filter():
    assert PipelineConfig().layer_filter().min_rank == 2
    everything = PipelineConfig(all_layers=True).layer_filter()
    assert everything.min_rank == 1
    assert everything.exclude == ()


# Test worker resolution: flag, then environment, then default
def test_resolve_workers(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers() == DEFAULT_WORKERS
    monkeypatch.setenv(WORKERS_ENV, "6")
    assert resolve_workers() == 6
    assert resolve_workers(2) == 2
    monkeypatch.setenv(WORKERS_ENV, "")
    assert resolve_workers() == DEFAULT_WORKERS


@pytest.mark.parametrize("raw", ["many", "0", "-3"])
def test_resolve_workers_rejects_bad_env(monkeypatch, raw):
    monkeypatch.setenv(WORKERS_ENV, raw)
    with pytest.raises(ConfigError, match=WORKERS_ENV):
        resolve_workers()


# Test that derived seeds are stable and label-dependent
def test_derive_seed():
    assert derive_seed(0, "recipe/0") == derive_seed(0, "recipe/0")
    assert derive_seed(0, "recipe/0") != derive_seed(0, "recipe/1")
    assert derive_seed(0, "recipe/0") != derive_seed(1, "recipe/0")
    assert 0 <= derive_seed(123, "x") < 2 ** 32
