import json

import numpy as np
import pytest

from wsodkit.data import (
    PART_COLORS,
    EmptyProposalSet,
    RunConfig,
    SchemaError,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_proposals,
    proposal_recall,
    save_dataset,
    write_proposals,
)
from wsodkit.geometry import Box, ProposalSet


def test_single_instance_one_hot():
    for seed in range(20):
        s = generate_scene(np.random.default_rng(seed), num_classes=4, max_instances=1)
        assert len(s.instances) == 1
        assert s.image_label.sum() == 1 and s.image_label[s.instances[0][0]] == 1


def test_deterministic():
    a = generate_dataset(5, 4)
    b = generate_dataset(5, 4)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert x.instances == y.instances
        np.testing.assert_array_equal(x.proposals.as_array(), y.proposals.as_array())
    assert not np.array_equal(a[0].image, generate_dataset(6, 1)[0].image)


def test_scene_contract():
    for s in generate_dataset(1, 50, num_classes=3, max_instances=3):
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert 1 <= len(s.instances) <= 3
        assert 50 <= len(s.proposals) <= 200
        expected = np.zeros(3, dtype=np.int64)
        for c, _ in s.instances:
            expected[c] = 1
        np.testing.assert_array_equal(s.image_label, expected)
        b = s.proposals.as_array()
        assert (b[:, 2] > b[:, 0]).all() and (b[:, 3] > b[:, 1]).all()
        assert b.min() >= 0 and b[:, 2:].max() <= 64


def test_recall_audit():
    assert proposal_recall(generate_dataset(11, 1000)) >= 0.95


@pytest.mark.parametrize("purity,shift", [(1.0, 0), (0.0, 1)])
def test_part_colour_follows_purity(purity, shift):
    for seed in range(10):
        s = generate_scene(np.random.default_rng(seed), num_classes=3, max_instances=1, part_purity=purity)
        (c, _), part = s.instances[0], s.parts[0]
        x, y = int((part.x1 + part.x2) / 2), int((part.y1 + part.y2) / 2)
        np.testing.assert_allclose(s.image[:, y, x], PART_COLORS[(c + shift) % 3], atol=1e-6)


@pytest.mark.parametrize("scale", [0.25, 1 / 3, 0.5])
def test_part_geometry(scale):
    for seed in range(10):
        s = generate_scene(np.random.default_rng(seed), part_scale=scale)
        assert len(s.parts) == len(s.instances)
        for (_, b), part in zip(s.instances, s.parts):
            assert b.x1 <= part.x1 < part.x2 <= b.x2 and b.y1 <= part.y1 < part.y2 <= b.y2
            assert part.area == pytest.approx(scale ** 2 * b.area)


def test_too_few_classes():
    with pytest.raises(ValueError):
        generate_scene(np.random.default_rng(0), num_classes=1)


class TestProposalFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        sets = []
        for k in range(2):
            xy = rng.uniform(0, 50, (30, 2))
            arr = np.hstack([xy, xy + rng.uniform(1, 14, (30, 2))])
            sets.append(ProposalSet.from_array(arr, image_id=f"im{k}", image_size=(64, 64)))
        path = tmp_path / "p.jsonl"
        write_proposals(path, sets)
        out = load_proposals(path, {"im0": (64, 64), "im1": (64, 64)})
        assert sorted(out) == ["im0", "im1"]
        for ps in sets:
            np.testing.assert_allclose(out[ps.image_id].as_array(), ps.as_array(), atol=1e-6)

    def test_many_boxes_not_truncated(self, tmp_path):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 400, (2001, 2))
        arr = np.hstack([xy, xy + rng.uniform(1, 90, (2001, 2))])
        path = tmp_path / "big.jsonl"
        write_proposals(path, [ProposalSet.from_array(arr, image_id="x", image_size=(500, 500))])
        assert len(load_proposals(path, {"x": (500, 500)})["x"]) == 2001

    def test_objectness_kept(self, tmp_path):
        path = tmp_path / "o.jsonl"
        path.write_text(json.dumps({"image_id": "a", "x1": 0, "y1": 0, "x2": 5, "y2": 5, "objectness": 0.7}) + "\n")
        assert load_proposals(path)["a"].objectness == [0.7]

    def test_clipping(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({"image_id": "a", "x1": -5, "y1": -5, "x2": 80, "y2": 20}) + "\n")
        np.testing.assert_array_equal(load_proposals(path, {"a": (64, 64)})["a"].as_array(), [[0, 0, 64, 20]])

    @pytest.mark.parametrize("bad,line", [
        ('{"image_id": "a", "x1": 5, "y1": 0, "x2": 5, "y2": 3}', 2),
        ('{"image_id": "a", "x1": 0, "y1": 0, "x2": 4}', 2),
        ("not json", 2),
        ('{"image_id": "a", "x1": 0, "y1": 0, "x2": 4, "y2": 4, "objectness": "high"}', 2),
    ])
    def test_schema_error_has_line(self, tmp_path, bad, line):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id": "a", "x1": 0, "y1": 0, "x2": 4, "y2": 4}\n' + bad + "\n")
        with pytest.raises(SchemaError) as err:
            load_proposals(path)
        assert err.value.line == line

    def test_empty_after_clip(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text(json.dumps({"image_id": "a", "x1": 70, "y1": 70, "x2": 80, "y2": 80}) + "\n")
        with pytest.raises(EmptyProposalSet):
            load_proposals(path, {"a": (64, 64)})


def test_dataset_round_trip(tmp_path):
    scenes = generate_dataset(3, 5)
    save_dataset(scenes, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    for a, b in zip(scenes, back):
        assert a.image_id == b.image_id and np.array_equal(a.image, b.image)
        assert a.instances == b.instances
        np.testing.assert_allclose(a.proposals.as_array(), b.proposals.as_array(), atol=1e-6)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.p, cfg.mist_iou_tau, cfg.drop_clamp_tau, cfg.fg_iou) == (0.15, 0.2, 0.3, 0.5)
        assert (cfg.sub_batch_size, cfg.students, cfg.momentum, cfg.weight_decay) == (500, 3, 0.9, 1e-4)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig(p=0.1, seed=4, drop="fixed")
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("kw", [dict(p=0), dict(mist_iou_tau=1.5), dict(drop="on"), dict(block_size=4),
                                    dict(mode="fast"), dict(num_classes=9), dict(optimizer="lbfgs"),
                                    dict(part_scale=0.7), dict(drop_lr_scale=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunConfig(**kw).validate()

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"p": 0.1, "bogus": 1})
