import pytest

from medusa.config import SCENARIOS, ExperimentConfig, load_config, parse_config_text
from medusa.errors import InvalidArgumentError
from medusa.heads import HeadKind

TEXT = """
[experiment]
name = demo
tasks = depth, segm, normals
heads = normals:hrhead
sfa = off
seeds = 0, 4

[train]
epochs = 3
base_lr = 1e-3
task_loss_weights = depth:2.0

[model]
channels = 4, 4, 6, 8
stem_channels = 4

[data]
image_size = 32
n_train = 10
"""


def test_parse():
    cfg = parse_config_text(TEXT)
    assert cfg.name == "demo" and cfg.tasks == ["depth", "segm", "normals"]
    assert cfg.head_kind("normals") is HeadKind.HRHEAD and cfg.head_kind("depth") is HeadKind.MSA
    assert cfg.sfa is False and cfg.seeds == [0, 4]
    assert cfg.train.epochs == 3 and cfg.train.weight("depth") == 2.0 and cfg.train.weight("segm") == 1.0
    assert cfg.backbone.channels == (4, 4, 6, 8) and cfg.scene.image_size == 32 and cfg.n_train == 10


def test_hash_stable_and_sensitive():
    a, b = parse_config_text(TEXT), parse_config_text(TEXT)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != parse_config_text(TEXT.replace("epochs = 3", "epochs = 4")).config_hash()
    # the output directory is not part of the experiment identity
    assert a.config_hash() == parse_config_text(TEXT.replace("[experiment]", "[experiment]\nout = elsewhere")).config_hash()


@pytest.mark.parametrize(
    "bad",
    [
        "[experiment]\ntasks =\n",
        "[experiment]\ntasks = depth, flow\n",
        "[experiment]\nhead = mtinet\n",
        "[experiment]\ncolour = red\n",
        "[train]\nepochs = 0\n",
        "[bogus]\nx = 1\n",
        "[experiment]\nsfa = maybe\n",
    ],
)
def test_invalid(bad):
    with pytest.raises(InvalidArgumentError):
        parse_config_text(bad)


@pytest.mark.parametrize("name", SCENARIOS)
def test_scenarios_load(name):
    cfg = load_config(name)
    assert cfg.name == name
    assert cfg.tasks


def test_ablation_scenario_covers_grid():
    cfg = load_config("ablation_grid")
    assert cfg.kind == "ablation" and len(cfg.seeds) == 3


def test_missing_config():
    with pytest.raises(InvalidArgumentError):
        load_config("/nonexistent/x.cfg")


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.train.epochs == 30 and cfg.gate == "literal"
