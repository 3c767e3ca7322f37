import json

import pytest

from icvit.config import RunConfig
from icvit.errors import ConfigError


def test_round_trip_and_digest(tmp_path):
    cfg = RunConfig()
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    back = RunConfig.load(p)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert isinstance(back.data.bf_angles, tuple)


def test_digest_tracks_content():
    a, b = RunConfig(), RunConfig()
    b.train.epochs += 1
    assert a.digest() != b.digest()


def test_partial_document_keeps_defaults():
    cfg = RunConfig.from_dict({"seed": 3, "train": {"epochs": 4, "warmup_epochs": 1}})
    assert cfg.seed == 3 and cfg.train.epochs == 4
    assert cfg.model == RunConfig().model


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"epoch": 3}},
        {"model": 5},
        {"model": {"dim": 30, "heads": 4}},
        {"pretrain": {"teacher_temp": 0.0}},
        [],
    ],
)
def test_bad_documents_raise_config_error(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)


def test_dumps_is_canonical():
    doc = json.loads(RunConfig().dumps())
    assert set(doc) == {"seed", "data", "model", "pretrain", "train", "paths"}
