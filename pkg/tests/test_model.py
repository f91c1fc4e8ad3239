import numpy as np
import pytest

from attnvote import tensor as T
from attnvote.backbone import BackboneConfig
from attnvote.dump import dump_votes
from attnvote.head import LossWeights, detection_loss
from attnvote.model import DetectorConfig, VoteDetector, config_from_text, config_to_text, load_config, save_config
from attnvote.nn import Adam, load_store, save_store
from attnvote.scene import SceneSpec, generate_scene, read_ply
from attnvote.train import (TrainConfig, compute_anchors, evaluate_model, fit, predict, prepare_batch, train_step,
                            vote_distance)

from conftest import jitter_batchnorm, numeric_grad, rel_error

SPEC = SceneSpec(room_size=(3.0, 3.0, 2.0), object_count=(1, 2), density=60)


def tiny_model(kind="se", seed=0, **kw):
    cfg = DetectorConfig.toy(kind, **{"num_points": 512, **kw})
    return VoteDetector(cfg, seed=seed)


# -- config file ----------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = DetectorConfig.toy("point_transformer", num_proposals=64, cluster_radius=0.45)
    text = config_to_text(cfg)
    assert "sa_mlps = 16:16:32; 32:32:32; 32:32:32; 32:32:32" in text
    assert config_from_text(text) == cfg
    save_config(cfg, tmp_path / "m.cfg")
    assert load_config(tmp_path / "m.cfg") == cfg
    assert config_from_text(config_to_text(DetectorConfig())) == DetectorConfig()


def test_config_errors():
    with pytest.raises(ValueError, match="line 2"):
        config_from_text("num_classes = 10\nwidth = 3\n")
    with pytest.raises(ValueError, match="line 1"):
        config_from_text("num_classes ten\n")
    with pytest.raises(ValueError):
        config_from_text("num_proposals = 4096\n")
    cfg = config_from_text("# comment only\n\nattention = cbam  # trailing\n")
    assert cfg.backbone.attention == "cbam"


# -- parameter store ----------------------------------------------------------------

def test_store_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.array([1.5], np.float64),
               "ünï": np.zeros((0, 4), np.float32), "s": np.float64(2.0)}
    save_store(tmp_path / "p.patd", tensors)
    raw = (tmp_path / "p.patd").read_bytes()
    assert raw[:4] == b"PATD"
    back = load_store(tmp_path / "p.patd")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype
        np.testing.assert_array_equal(back[k].reshape(np.shape(v)), v)
    (tmp_path / "bad").write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError, match="magic"):
        load_store(tmp_path / "bad")


def test_model_save_load(tmp_path):
    m = tiny_model()
    jitter_batchnorm(m, 1)
    m.anchors = np.random.default_rng(0).random((10, 3)) + 0.5
    m.save(tmp_path / "model")
    n = VoteDetector.load(tmp_path / "model")
    assert n.cfg == m.cfg
    for (ka, a), (kb, b) in zip(sorted(m.state_dict().items()), sorted(n.state_dict().items())):
        assert ka == kb
        np.testing.assert_array_equal(a, b)
    pts = prepare_batch([generate_scene(0, SPEC)], 512).points
    assert n.detect(pts) == m.detect(pts)


# -- end to end -------------------------------------------------------------------

def test_end_to_end_gradient_sampled(f64):
    """Finite differences of the full loss on 1% of all parameters."""
    scene = generate_scene(2, SPEC)
    m = tiny_model("se", seed=3, num_points=256, num_proposals=16)
    jitter_batchnorm(m, 3)
    m.anchors = compute_anchors([scene], 10)
    batch = prepare_batch([scene], 256)
    m.train()
    buffers = {k: v.copy() for k, v in m.named_buffers()}

    def loss():
        for k, v in m.named_buffers():
            v[...] = buffers[k]
        out = m(batch.points)
        total, _ = detection_loss(out.proposals, out.votes, out.seeds.xyz, out.clusters.centers.data,
                                  batch.targets, m.anchors)
        return total

    m.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    ana, num = [], []
    for p in m.parameters():
        k = max(1, p.size // 100)
        entries = rng.choice(p.size, k, replace=False)
        g = numeric_grad(lambda: loss().item(), p.data, 1e-6, entries)
        num.append(g.reshape(-1)[entries])
        ana.append((np.zeros(p.size) if p.grad is None else p.grad.reshape(-1))[entries])
    assert sum(len(a) for a in ana) >= 0.01 * m.num_parameters()
    assert rel_error(np.concatenate(ana), np.concatenate(num)) < 1e-3


def test_detections_permutation_invariant():
    scene = generate_scene(4, SPEC)
    m = tiny_model("se", seed=1)
    jitter_batchnorm(m, 1)
    m.anchors = compute_anchors([scene], 10)
    pts = prepare_batch([scene], 512).points
    perm = np.random.default_rng(0).permutation(512)
    (a,), (b,) = m.detect(pts), m.detect(pts[:, perm])
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.label == y.label and x.box.center == y.box.center and x.box.size == y.box.size
        assert abs(x.score - y.score) <= 1e-5


def test_train_smoke_on_one_scene():
    scene = generate_scene(6, SPEC)
    m = tiny_model("se", seed=2)
    d0 = vote_distance(m, [scene])
    hist = fit(m, [scene], TrainConfig(steps=50, batch_size=1))
    assert all(np.isfinite(h["grad_norm"]) for h in hist)
    assert all(np.isfinite(h["total"]) and h["total"] > 0 for h in hist)
    assert np.mean([h["total"] for h in hist[-5:]]) < np.mean([h["total"] for h in hist[:5]])
    assert vote_distance(m, [scene]) < d0


def test_training_is_deterministic():
    scenes = [generate_scene(i, SPEC, scene_id=f"s{i}") for i in range(3)]
    runs = []
    for _ in range(2):
        m = tiny_model("cbam", seed=5)
        hist = fit(m, scenes, TrainConfig(steps=6, batch_size=2, seed=1))
        runs.append((hist, evaluate_model(m, scenes).to_table(), m.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    for k in runs[0][2]:
        assert runs[0][2][k].tobytes() == runs[1][2][k].tobytes()


def test_batch_resampling_is_per_scene():
    scenes = [generate_scene(i, SPEC, scene_id=f"s{i}") for i in range(3)]
    full = prepare_batch(scenes, 300)
    alone = prepare_batch(scenes[1:2], 300)
    np.testing.assert_array_equal(full.points[1], alone.points[0])


def test_anchors_from_scenes():
    scenes = [generate_scene(i, SPEC) for i in range(4)]
    a = compute_anchors(scenes, 10)
    for c in set(l for s in scenes for l in s.labels):
        sizes = [b.size for s in scenes for b, l in zip(s.boxes, s.labels) if l == c]
        np.testing.assert_allclose(a[c], np.mean(sizes, axis=0))
    assert a.shape == (10, 3) and np.all(a > 0)


def test_untrained_predictions_are_valid():
    scenes = [generate_scene(i, SPEC) for i in range(2)]
    m = tiny_model("none")
    m.anchors = compute_anchors(scenes, 10)
    dets = predict(m, scenes)
    assert len(dets) == 2
    assert all(0 <= d.score <= 1 and 0 <= d.label < 10 for ds in dets for d in ds)


# -- vote dump ----------------------------------------------------------------------

def test_dump_votes(tmp_path):
    scene = generate_scene(7, SPEC)
    m = tiny_model("se", seed=4)
    d0 = dump_votes(m, scene, tmp_path / "before.votes.ply")
    els = read_ply(tmp_path / "before.votes.ply")
    assert set(els) == {"vertex", "seed", "vote", "centroid", "box"}
    assert len(els["vote"]["x"]) == len(els["seed"]["x"]) == m.cfg.backbone.seed_count
    assert len(els["vertex"]["x"]) == len(scene.points)
    np.testing.assert_array_equal(els["box"]["label"], scene.labels)
    fit(m, [scene], TrainConfig(steps=100, batch_size=1))
    assert dump_votes(m, scene, tmp_path / "after.votes.ply") < d0


def test_default_seed_count():
    cfg = DetectorConfig()
    assert cfg.backbone.seed_count == 1024 and cfg.num_proposals == 256
