import numpy as np
import pytest

from kptpose import frontend, harness, synthgen, viz


@pytest.fixture(scope="module")
def rig():
    cfg = harness.TrainConfig(epochs=1, batch_size=4, augment=False, seed=8,
                              checkpoint_every=0)
    samples = [synthgen.sample_scene(i, cfg.scene_config()) for i in range(4)]
    tr = harness.Trainer(cfg, samples)
    tr.train_step()
    return tr, samples


def test_heatmap_overlay_centers_match_uv():
    hm = np.zeros((8, 8))
    kps = [frontend.Keypoint((0.25, 0.5), 1.0)]
    svg = viz.heatmap_overlay_svg(hm, kps, out_size=160)
    assert f'cx="{0.25 * 160:.2f}"' in svg
    assert f'cy="{0.5 * 160:.2f}"' in svg


def test_attention_zero_weight_omitted():
    s = synthgen.sample_scene(0)
    export = [{"layer": 0, "queries": [{
        "query": "joint:right:0",
        "keypoints": [{"uv": [0.5, 0.5], "weight": 1.0},
                      {"uv": [0.2, 0.2], "weight": 0.0}],
    }]}]
    svg = viz.attention_svg(s, export, ["joint:right:0"])
    # exactly one attention circle: the zero-weight keypoint is dropped
    body = svg[svg.index("<text"):] if "<text" in svg else svg
    assert svg.count('stroke="#e63946"') == 1


def test_attention_radius_normalized_to_max():
    s = synthgen.sample_scene(0)
    export = [{"layer": 0, "queries": [{
        "query": "joint:right:0",
        "keypoints": [{"uv": [0.5, 0.5], "weight": 0.5},
                      {"uv": [0.2, 0.2], "weight": 0.25}],
    }]}]
    svg = viz.attention_svg(s, export, ["joint:right:0"], out_size=320)
    max_r = 0.055 * 320
    assert f'r="{max_r:.2f}"' in svg
    assert f'r="{max_r / 2:.2f}"' in svg


def test_visualize_writes_all_files(tmp_path, rig):
    tr, samples = rig
    paths = viz.visualize(tr.model, samples[0], str(tmp_path))
    names = sorted(p.split("/")[-1] for p in paths)
    assert names == ["attention.svg", "heatmap.svg", "pose.json", "skeleton.svg"]
    for p in paths:
        assert len(open(p).read()) > 100


def test_default_query_names(rig):
    tr, _ = rig
    names = viz.default_query_names(tr.model)
    assert all(n.startswith("joint:right:") for n in names)
