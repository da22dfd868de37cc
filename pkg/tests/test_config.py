import numpy as np
import pytest

from hvar.config import RunConfig, load_config, parse_config_text, preset
from hvar.synth import SyntheticDatasetSpec, generate_dataset


def test_paper_preset_pins_schedule():
    cfg = preset("paper")
    assert cfg.resolutions == (4, 6, 8, 10, 14, 16, 20, 24, 28, 32)
    assert cfg.scales == (0.25, 0.5, 1.0) and cfg.f == 0.25 and cfg.var_depth == 16
    assert cfg.schedule.boundaries == (3, 6, 10)
    assert cfg.schedule.token_count() == 3452


def test_desk_preset_is_consistent():
    cfg = preset("desk")
    assert cfg.image_size * cfg.f == cfg.resolutions[-1] == 16
    assert cfg.transformer().vocab_size == cfg.codebook_size
    with pytest.raises(KeyError):
        preset("huge")


def test_text_round_trip_for_every_preset():
    for name in ("desk", "paper"):
        cfg = preset(name)
        back = parse_config_text(cfg.to_text())
        assert back == cfg and back.digest() == cfg.digest()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 7\nresolutions = 1,2,4\nimage_size = 16\nlearned_phi = false\n")
    cfg = load_config(str(path), overrides={"seed": "9", "var_lr": "0.5"})
    assert cfg.seed == 9 and cfg.var_lr == 0.5 and cfg.resolutions == (1, 2, 4)
    assert cfg.learned_phi is False
    assert load_config(None, "paper").preset == "paper"


def test_bad_config_values():
    with pytest.raises(KeyError):
        parse_config_text("nonsense = 1\n")
    with pytest.raises(ValueError):
        parse_config_text("seed = abc\n")
    with pytest.raises(ValueError):
        parse_config_text("just words\n")
    with pytest.raises(ValueError):
        parse_config_text("learned_phi = maybe\n")
    with pytest.raises(ValueError):
        RunConfig(resolutions=(2, 4, 7))


def test_digest_changes_with_any_field():
    base = RunConfig()
    assert base.digest() != base.updated(seed=1).digest()
    assert base.digest() == RunConfig().digest()


def test_synthetic_dataset_is_deterministic_and_in_range():
    spec = SyntheticDatasetSpec(count=8, resolution=32, seed=3)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert a.shape == (8, 3, 32, 32)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, generate_dataset(SyntheticDatasetSpec(count=8, resolution=32, seed=4)))
    with pytest.raises(ValueError):
        generate_dataset(SyntheticDatasetSpec(count=1, patterns=("stripes",)))
