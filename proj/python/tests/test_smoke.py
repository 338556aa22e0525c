import math

import numpy as np
import pytest

import markvqa as mv


def small_scene_config(size=112):
    c = mv.SceneConfig()
    c.image_height = size
    c.image_width = size
    c.min_objects = 2
    c.max_objects = 3
    return c


TINY = {
    "image_height": 112,
    "image_width": 112,
    "scene_token_count": 4,
    "encoder": {"embed_dim": 16, "depth": 1, "heads": 2, "lora_rank": 4, "mlp_ratio": 2},
    "decoder_embed_dim": 16,
    "decoder_depth": 1,
    "decoder_heads": 2,
    "mlp_hidden": 32,
    "batch_size": 2,
    "total_iters": 3,
    "max_new_tokens": 6,
}


def test_scene_generation_is_deterministic():
    a = mv.generate_scene(small_scene_config(), 4)
    b = mv.generate_scene(small_scene_config(), 4)
    assert a.scene_id == b.scene_id
    assert np.array_equal(a.images[0], b.images[0])
    assert a.images[0].shape == (112, 112, 3)
    assert len(a.detections) >= 2
    assert all(d.mask.shape == (112, 112) for d in a.detections)


def test_markers_round_trip():
    scene = mv.generate_scene(small_scene_config(224), 1)
    index_map, warnings = mv.build_index_map(scene.detections)
    assert warnings == []
    assert len(index_map) == len(scene.detections)
    for k, det in enumerate(scene.detections, start=1):
        assert mv.index_to_coords(index_map, k) == mv.compute_centroid(det.mask)
    c = index_map.coords(1)
    k, same = mv.assign_query_coordinate(index_map, (c.x + 30, c.y + 40))
    assert len(same) == len(index_map)
    rendered = mv.render_marker_image(scene.images[0], index_map, scene.detections)
    assert rendered.shape == scene.images[0].shape
    assert not np.array_equal(rendered, scene.images[0])
    assert mv.MarkerIndexMap.from_json(index_map.to_json()).coords(1) == c


def test_mcnet_matches_frozen_encoder_at_init():
    cfg = mv.EncoderConfig()
    cfg.embed_dim = 16
    cfg.depth = 1
    cfg.heads = 2
    net = mv.MarkerControlNet(cfg, 112, 112, 3)
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (112, 112, 3), dtype=np.uint8)
    marker = rng.integers(0, 256, (112, 112, 3), dtype=np.uint8)
    assert net.grid == (4, 4)
    assert np.array_equal(net.mcnet_forward(image, marker), net.encode(image))


def test_mask_average_pool_full_mask_is_mean():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(16, 5))
    pooled = mv.mask_average_pool(feats, 4, 4, np.ones((32, 32), dtype=np.uint8))
    assert np.allclose(pooled[0], feats.mean(axis=0))


def test_metrics():
    assert mv.match_score([(110, 110)], [(100, 100)]) == 1.0
    assert mv.match_score([(100, 117)], [(100, 100)]) == 0.0
    assert mv.accuracy(["Yes", "b"], ["yes", "c"]) == 0.5
    assert mv.bleu4("yes", ["yes"]) == 1.0
    assert abs(mv.bleu4("stop now", ["please stop now"]) - 0.6065306597) < 1e-9
    assert abs(mv.rouge_l("stop now", "please stop now") - 0.7721518987) < 1e-9
    assert [tuple(p) for p in mv.extract_coords("at (1.5,2) and ( 3 , 4 )")] == [(1.5, 2.0), (3.0, 4.0)]
    with pytest.raises(mv.ValidationError):
        mv.accuracy(["a"], [])


def test_train_generate_checkpoint(tmp_path):
    scenes = mv.generate_dataset(small_scene_config(), 3)
    trainer = mv.Trainer(TINY, scenes)
    names = trainer.trainable_names()
    assert names and all("frozen" not in n for n in names)
    seen = []
    curve = trainer.train(scenes, progress=lambda it, lr, loss: seen.append(it))
    assert len(curve) == 3 and seen == [0, 1, 2]
    assert all(math.isfinite(loss) for _, _, loss in curve)
    records = trainer.generate(scenes)
    assert len(records) == sum(len(s.qa) for s in scenes)
    report = mv.evaluate_run(records, scenes)
    assert report["counts"]["evaluated"] == len(records)
    for key in ("match", "accuracy", "bleu4", "rouge_l"):
        assert 0.0 <= report[key] <= 1.0

    path = tmp_path / "model.bin"
    trainer.save(path)
    again = mv.Trainer.load(path)
    assert again.iteration == 3
    assert again.config == trainer.config
    assert [r["text"] for r in again.generate(scenes)] == [r["text"] for r in records]


def test_invalid_config_raises():
    scenes = mv.generate_dataset(small_scene_config(), 1)
    with pytest.raises(mv.ValidationError):
        mv.Trainer({**TINY, "use_markers": False, "use_mcnet": True}, scenes)
    with pytest.raises(mv.ValidationError):
        mv.Trainer({**TINY, "not_a_key": 1}, scenes)


def test_divergence_reports_iteration():
    scenes = mv.generate_dataset(small_scene_config(), 2)
    trainer = mv.Trainer({**TINY, "initial_lr": 1e30, "grad_clip": 0, "weight_decay": 0}, scenes)
    with pytest.raises(mv.NumericalError) as err:
        trainer.train(scenes)
    assert err.value.iteration >= 0
