import pytest

from harmony.config import DEFAULTS, Settings
from harmony.exceptions import ConfigurationError
from harmony.simulator import SynthSpec
from harmony.training import TrainConfig


def test_defaults_match_code():
    s = Settings.load()
    config = TrainConfig()
    assert s["train.learning_rate"] == config.learning_rate
    assert s["train.batch_size"] == config.batch_size
    assert s["model.d_model"] == config.d_model
    assert s["sim.window"] == 144 and s["sim.buffer"] == 0.10
    assert s["decision.w_short"] == [4.0] and s["decision.w_excess"] == [1.0]
    assert s.synth_spec() == SynthSpec()


def test_file_overrides(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("train.loss = pinball\nsla.threshold = 80\nsla.quality_index = 0\nsynth.gains = 0.3,0.1\n")
    s = Settings.load(path, {"seed": 5})
    assert s["train.loss"] == "pinball" and s["seed"] == 5
    assert s.decision_config().sla.sla_threshold == 80.0
    assert s.synth_spec().gains == (0.3, 0.1)
    assert s.estimator_params()["random_state"] == 5


def test_text_round_trip(tmp_path):
    s = Settings.load()
    path = tmp_path / "all.conf"
    path.write_text(s.to_text())
    assert Settings.load(path) == s
    assert len(s.to_text().splitlines()) == len(DEFAULTS)


@pytest.mark.parametrize("line", ["nope.key = 1", "train.epochs = many", "decision.strict_paper = maybe"])
def test_rejects_bad_entries(tmp_path, line):
    path = tmp_path / "c.conf"
    path.write_text(line + "\n")
    with pytest.raises(ConfigurationError):
        Settings.load(path)


def test_sla_needs_index(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("sla.threshold = 3\n")
    with pytest.raises(ConfigurationError):
        Settings.load(path).decision_config()
