import pytest

from fedlfd import config
from fedlfd.aggregation import StrategyKind
from fedlfd.errors import ConfigError

MINIMAL = """
name = "tiny"
seed = 1
rounds = 2

[[platforms]]
id = 1
sensors = ["Force"]
robots = ["Arm"]
tasks = ["Manipulation"]

[[models]]
id = 1
sensors = ["Force"]
robots = ["Arm"]
tasks = ["Manipulation"]
layer_sizes = [2, 1]

[[teachers]]
id = 1
"""


def problems_of(text):
    with pytest.raises(ConfigError) as exc:
        config.loads(text)
    return exc.value.problems


@pytest.mark.parametrize("name", config.PRESETS)
def test_presets_round_trip(name):
    cfg = config.preset(name)
    again = config.loads(config.dumps(cfg))
    assert config.to_dict(again) == config.to_dict(cfg)


def test_minimal_defaults():
    cfg = config.loads(MINIMAL)
    assert cfg.strategy.kind is StrategyKind.FEDAVG
    assert cfg.training.lr_local == 0.05
    assert cfg.data.buffer_size == 256


def test_unknown_keys_rejected_everywhere():
    text = MINIMAL.replace('name = "tiny"', 'name = "tiny"\ncolour = 3') + "\n[training]\nlr = 0.1\n"
    text = text.replace("[[teachers]]\nid = 1", "[[teachers]]\nid = 1\nmood = 'ok'")
    found = problems_of(text)
    assert "config: unknown key 'colour'" in found
    assert "training: unknown key 'lr'" in found
    assert "teachers[0]: unknown key 'mood'" in found


def test_report_is_exhaustive():
    text = MINIMAL + "\n[training]\nlr_local = 0.0\nsample_fraction = 0.5\n[data]\nbuffer_size = -1\n"
    found = problems_of(text)
    assert any("lr_local" in p for p in found)
    assert any("C*L" in p for p in found)
    assert any("buffer_size" in p for p in found)


def test_type_errors_reported():
    assert any("expected int" in p for p in problems_of(MINIMAL.replace("seed = 1", 'seed = "x"')))


def test_unknown_strategy():
    assert any("unknown strategy" in p for p in problems_of(MINIMAL + '\n[strategy]\nkind = "magic"\n'))


def test_bias_and_model_bias_exclusive():
    text = MINIMAL.replace("[[teachers]]\nid = 1", "[[teachers]]\nid = 1\nbias = [1.0]\n"
                           "model_bias = { \"1\" = [1.0] }")
    assert any("not both" in p for p in problems_of(text))


def test_clustering_excludes_cross_task():
    text = config.preset_text("crm").replace('kind = "user_weighting"', 'kind = "user_clustering"')
    assert any("user_clustering" in p for p in problems_of(text))


def test_transfer_shape_mismatch():
    text = config.preset_text("crm").replace('layers = ["layer0.weight", "layer0.bias"]',
                                             'layers = ["layer1.weight"]')
    text = text.replace("layer_sizes = [6, 16, 3]\nloss = \"mse\"\npolicy = \"mlp\"\n\n[[models]]\nid = 3",
                        "layer_sizes = [6, 16, 2]\nloss = \"mse\"\npolicy = \"mlp\"\n\n[[models]]\nid = 3")
    found = problems_of(text)
    assert any("differ" in p for p in found)


def test_meta_validation():
    found = problems_of(MINIMAL + "\n[cross_task.meta]\ninner_lr = 0.0\nsupport_fraction = 1.0\n")
    assert any("inner_lr" in p for p in found)
    assert any("support_fraction" in p for p in found)
    assert any("two training teachers" in p for p in found)


def test_toml_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        config.loads("name = ")


def test_load_path_and_preset(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(MINIMAL, encoding="utf-8")
    assert config.load(path).name == "tiny"
    assert config.load("crm").name == "crm"
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.toml")
