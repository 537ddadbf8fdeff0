import pytest

from lidarvpr import config as cfgmod


def test_defaults_and_profiles():
    desk = cfgmod.from_profile("desk")
    assert (desk.width, desk.poses, desk.rays, desk.dim, desk.epochs) == (512, 1024, 128, 64, 30)
    paper = cfgmod.from_profile("paper")
    assert (paper.width, paper.poses, paper.rays, paper.dim) == (1024, 2048, 256, 512)
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.from_profile("laptop")


def test_string_coercion():
    cfg = cfgmod.RunConfig().replace(epochs="7", lr="0.01", augment_query="yes", topn="10,1,5", mode="sptm")
    assert cfg.epochs == 7 and cfg.lr == 0.01 and cfg.augment_query is True
    assert cfg.topn == (1, 5, 10) and cfg.mode == "sptm"


@pytest.mark.parametrize("changes", [
    {"epochs": "seven"}, {"epochs": 2.5}, {"lr": "nan"}, {"augment_query": "maybe"},
    {"mode": "fancy"}, {"bogus": 1}, {"poses": 1}, {"obstacle_density": 0.9}, {"topn": "0"},
])
def test_bad_values_rejected(changes):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.RunConfig().replace(**changes)


def test_yaml_round_trip(tmp_path):
    cfg = cfgmod.RunConfig().replace(mode="sptm_a", K=9, topn=(1, 10))
    cfg.dump(tmp_path / "c.yaml")
    back = cfgmod.load(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()


def test_yaml_errors(tmp_path):
    (tmp_path / "nested.yaml").write_text("training:\n  epochs: 3\n")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    (tmp_path / "broken.yaml").write_text("a: [1, 2\n")
    (tmp_path / "old.yaml").write_text("format_version: 0\n")
    for name in ("nested", "list", "broken", "old"):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(tmp_path / f"{name}.yaml")
    (tmp_path / "empty.yaml").write_text("")
    assert cfgmod.load(tmp_path / "empty.yaml") == cfgmod.from_profile("desk")


def test_hashes():
    base = cfgmod.RunConfig()
    assert base.hash() == base.replace(workers=4).hash()
    assert base.hash() != base.replace(seed=1).hash()
    assert base.dataset_hash() == base.replace(mode="sptm", epochs=3).dataset_hash()
    assert base.dataset_hash() != base.replace(rays=64).dataset_hash()


def test_conversions():
    cfg = cfgmod.RunConfig().replace(mutual_verification=False, K=3, hidden1=16)
    assert cfg.mining().K == 3 and cfg.mining().mutual is False
    assert cfg.train().hidden == (16, 128) and cfg.mining().gt_radius == cfg.radius
