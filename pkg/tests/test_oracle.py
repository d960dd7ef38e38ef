import logging

import numpy as np
import pytest

from gags.config import CANONICAL_LABELS, CameraRing, ObjectNode, SceneSpec, SegmentConfig
from gags.errors import DataError, FormatError, IngestError
from gags.oracle import (
    Codebook,
    GranularityMasks,
    SceneHierarchy,
    build_codebook,
    export_view,
    gen_scene,
    ingest,
    ingest_view,
    load_scene_spec,
    query_ground_truth,
    region_count_cv,
    render_labels,
    save_scene_spec,
    scene_preset,
    synth_embed,
    synth_segment,
)
from gags.splat import project, render
from gags.tensorio import write_pgm16, write_tensor


def _spec(objects, **kwargs):
    kwargs.setdefault("cameras", CameraRing(count=2, radii=[2.5, 3.5], image_width=32, image_height=32))
    kwargs.setdefault("gaussians_per_unit_area", 100.0)
    kwargs.setdefault("feature_dim", 4)
    kwargs.setdefault("codebook_dim", 8)
    return SceneSpec(objects=objects, **kwargs)


def _label_render():
    """8x8 view: four sub-part quadrants, two part halves, one whole."""
    labels = np.zeros((8, 8, 3), dtype=np.uint32)
    labels[:4, :4, 0], labels[:4, 4:, 0], labels[4:, :4, 0], labels[4:, 4:, 0] = 1, 2, 3, 4
    labels[:, :4, 1], labels[:, 4:, 1] = 1, 2
    labels[..., 2] = 1
    return labels


QUADRANT_CENTERS = np.array([[2, 2], [6, 2], [2, 6], [6, 6]])


def test_single_sphere_shares_one_whole_label():
    bundle = gen_scene(_spec([ObjectNode(label="ball", shape="sphere", extent=[0.3])]), seed=0)
    assert len(bundle.field) > 0
    assert np.all(bundle.gt_labels == 1)
    assert bundle.hierarchy.labels == [["ball"], ["ball"], ["ball"]]


def test_disjoint_boxes_keep_their_labels_apart():
    a = ObjectNode(label="left", center=[-1, 0, 0], extent=[0.2, 0.2, 0.2])
    b = ObjectNode(label="right", center=[1, 0, 0], extent=[0.2, 0.2, 0.2])
    bundle = gen_scene(_spec([a, b]), seed=0)
    whole = bundle.gt_labels[:, 2]
    assert set(np.unique(whole)) == {1, 2}
    assert np.all(bundle.field.positions[whole == 1, 0] < 0)
    assert np.all(bundle.field.positions[whole == 2, 0] > 0)


def test_hierarchy_links_sub_parts_to_wholes(tiny_scene):
    bundle = gen_scene(tiny_scene, seed=0)
    h = bundle.hierarchy
    assert h.labels[2] == ["cup"]
    assert h.labels[1] == ["cup base", "cup top"]
    assert h.labels[0] == ["cup base lower", "cup base upper", "cup top"]
    assert h.whole_of(0, 2) == 1
    assert h.ids_for_label("cup base") == (1, [1])
    with pytest.raises(DataError):
        h.ids_for_label("saucer")


def test_degenerate_primitive_is_rejected():
    with pytest.raises(DataError):
        gen_scene(_spec([ObjectNode(label="flat", shape="box", extent=[0.2, 0.0, 0.2])]), seed=0)
    with pytest.raises(DataError):
        gen_scene(_spec([]), seed=0)


def test_ring_radii_set_apparent_size():
    spec = _spec(
        [ObjectNode(label="ball", shape="sphere", extent=[0.3])],
        cameras=CameraRing(count=2, radii=[2.0, 6.0], height=0.0, image_width=64, image_height=64),
        gaussians_per_unit_area=2000.0,
    )
    bundle = gen_scene(spec, seed=0)
    widths = [np.ptp(project(bundle.field, cam).means2d[:, 0]) for cam in bundle.cameras]
    assert widths[0] / widths[1] == pytest.approx(3.0, rel=0.07)


def test_codebook_geometry():
    parts = [ObjectNode(label="cup base"), ObjectNode(label="cup top")]
    objects = [ObjectNode(label="cup", children=parts), ObjectNode(label="lamp")]
    book = build_codebook(objects, dim=16, mix=0.6, seed=0)
    for label in CANONICAL_LABELS:
        assert label in book.vectors
        assert label not in book.text
    anchors = np.stack([book[label] for label in (*CANONICAL_LABELS, "cup", "lamp")])
    np.testing.assert_allclose(anchors @ anchors.T, np.eye(6), atol=1e-10)
    assert book["cup base"] @ book["cup"] >= 0.8 - 1e-9
    np.testing.assert_allclose(np.linalg.norm(book["cup top"]), 1.0)
    assert book.canonical().shape == (4, 16)


def test_codebook_needs_canonical_labels():
    with pytest.raises(FormatError):
        Codebook(vectors={"cup": np.ones(4)}, text={})


def test_faithful_segmentation_reproduces_ground_truth():
    labels = _label_render()
    masks = synth_segment(labels, QUADRANT_CENTERS, SegmentConfig(), seed=0)
    for level in range(3):
        np.testing.assert_array_equal(masks.maps[level], labels[..., level])
    masks.validate()
    assert [masks.region_count(level) for level in range(3)] == [4, 2, 1]
    assert masks.tables[1][1].pixels == 32


def test_unprompted_regions_are_left_out():
    masks = synth_segment(_label_render(), QUADRANT_CENTERS[:1], SegmentConfig(), seed=0)
    assert masks.region_count(0) == 1
    assert np.count_nonzero(masks.m_s) == 16
    assert masks.region_count(2) == 1


def test_drop_everything_at_sub_part_level():
    masks = synth_segment(_label_render(), QUADRANT_CENTERS, SegmentConfig(p_drop=[1.0, 0.0, 0.0]), seed=0)
    assert not masks.m_s.any()
    assert masks.region_count(1) == 2


def test_no_prompts_gives_empty_masks(caplog):
    with caplog.at_level(logging.WARNING, logger="gags.oracle"):
        masks = synth_segment(_label_render(), np.zeros((0, 2)), SegmentConfig(), seed=0)
    assert not masks.maps.any()
    assert "no prompt points" in caplog.text


def test_sparsely_prompted_region_merges_into_neighbour():
    labels = np.zeros((4, 8, 3), dtype=np.uint32)
    labels[:, :4, 0], labels[:, 4:, 0] = 1, 2
    labels[..., 1] = 1
    labels[..., 2] = 1
    prompts = np.array([[1, 1], [2, 2], [6, 1]])
    noise = SegmentConfig(p_merge=[1.0, 0.0, 0.0], merge_min_prompts=2)
    masks = synth_segment(labels, prompts, noise, seed=0)
    assert masks.region_count(0) == 1
    assert np.all(masks.m_s == 1)
    # without merging both regions survive
    assert synth_segment(labels, prompts, SegmentConfig(), seed=0).region_count(0) == 2


def test_mutually_sparse_neighbours_merge():
    labels = np.zeros((4, 8, 3), dtype=np.uint32)
    labels[:, :4, 0], labels[:, 4:, 0] = 1, 2
    labels[..., 1:] = 1
    prompts = np.array([[1, 1], [6, 1]])
    always = SegmentConfig(p_merge=[1.0, 0.0, 0.0], merge_min_prompts=2)
    assert synth_segment(labels, prompts, always, seed=0).region_count(0) == 1
    # either region choosing to merge joins the pair: 1 - (1 - p)^2
    half = SegmentConfig(p_merge=[0.5, 0.0, 0.0], merge_min_prompts=2)
    merged = np.mean([synth_segment(labels, prompts, half, seed=s).region_count(0) == 1 for s in range(400)])
    assert merged == pytest.approx(0.75, abs=0.08)


def test_merge_chains_collapse_into_one_region():
    labels = np.zeros((4, 12, 3), dtype=np.uint32)
    labels[:, :4, 0], labels[:, 4:8, 0], labels[:, 8:, 0] = 1, 2, 3
    labels[..., 1:] = 1
    prompts = np.array([[1, 1], [5, 1], [10, 1]])
    masks = synth_segment(labels, prompts, SegmentConfig(p_merge=[1.0, 0.0, 0.0], merge_min_prompts=2), seed=0)
    assert masks.region_count(0) == 1
    assert np.all(masks.m_s == 1)


def test_merge_noise_raises_cross_view_variance():
    labels = _label_render()
    noisy = SegmentConfig(p_merge=[0.5, 0.5, 0.0], merge_min_prompts=2)
    views = range(20)
    clean = [synth_segment(labels, QUADRANT_CENTERS, SegmentConfig(), seed=3, view=k) for k in views]
    merged = [synth_segment(labels, QUADRANT_CENTERS, noisy, seed=3, view=k) for k in views]
    renders = [labels] * 20
    assert region_count_cv(clean, renders) == 0.0
    assert region_count_cv(merged, renders) > 0.0


def _tiny_bundle_view(tiny_scene):
    bundle = gen_scene(tiny_scene, seed=0)
    out = render(bundle.field, bundle.cameras[0])
    labels = render_labels(out, bundle.gt_labels)
    ys, xs = np.nonzero(labels[..., 2] > 0)
    prompts = np.stack([xs, ys], axis=1)
    return bundle, labels, synth_segment(labels, prompts, SegmentConfig(), seed=0, hierarchy=bundle.hierarchy)


def test_noise_free_embedding_copies_the_codebook(tiny_scene):
    bundle, _, masks = _tiny_bundle_view(tiny_scene)
    features = synth_embed(masks, bundle.codebook, [0.0, 0.0, 0.0], seed=0)
    features.validate(masks)
    for level in range(3):
        for rid, info in masks.tables[level].items():
            np.testing.assert_allclose(features.tables[level][rid], bundle.codebook[info.label])


def test_quarter_turn_noise_is_orthogonal(tiny_scene):
    bundle, _, masks = _tiny_bundle_view(tiny_scene)
    features = synth_embed(masks, bundle.codebook, [np.pi / 2] * 3, seed=0)
    for level in range(3):
        for rid, info in masks.tables[level].items():
            assert abs(features.tables[level][rid] @ bundle.codebook[info.label]) < 1e-9
            assert np.linalg.norm(features.tables[level][rid]) == pytest.approx(1.0)


def test_unlabeled_regions_cannot_be_embedded(tiny_scene):
    bundle = gen_scene(tiny_scene, seed=0)
    masks = GranularityMasks.from_maps(np.ones((3, 4, 4)))
    with pytest.raises(IngestError):
        synth_embed(masks, bundle.codebook)


def test_export_and_ingest_round_trip(tmp_path, tiny_scene):
    bundle, _, masks = _tiny_bundle_view(tiny_scene)
    features = synth_embed(masks, bundle.codebook, seed=0)
    export_view(masks, features, tmp_path, 4)
    back_masks, back_features = ingest_view(tmp_path, 4)
    np.testing.assert_array_equal(back_masks.maps, masks.maps)
    for level in range(3):
        np.testing.assert_allclose(back_features.tables[level], features.tables[level], atol=1e-6)
        assert {k: v.label for k, v in back_masks.tables[level].items()} == \
            {k: v.label for k, v in masks.tables[level].items()}


def _write_level_files(directory, maps, tables):
    mask_files, feature_files = [], []
    for level in range(3):
        mask_files.append(directory / f"m{level}.pgm")
        feature_files.append(directory / f"f{level}.tensor")
        write_pgm16(mask_files[-1], maps[level])
        write_tensor(feature_files[-1], tables[level])
    return mask_files, feature_files


def test_ingest_two_regions(tmp_path):
    m = np.array([[1, 1, 2, 2]] * 2)
    table = np.vstack([np.zeros(3), np.eye(3)[:2]])
    masks, features = ingest(*_write_level_files(tmp_path, [m] * 3, [table] * 3))
    assert masks.region_count(0) == 2
    np.testing.assert_allclose(features.dense(masks, 1)[0, 3], [0, 1, 0])


def test_ingest_missing_feature_row(tmp_path):
    m = np.array([[1, 2]])
    short = np.vstack([np.zeros(3), np.eye(3)[:1]])
    with pytest.raises(IngestError):
        ingest(*_write_level_files(tmp_path, [m] * 3, [short] * 3))


def test_ingest_renormalizes_with_warning(tmp_path, caplog):
    m = np.array([[1]])
    table = np.array([[0.0, 0.0], [1.01, 0.0]])
    with caplog.at_level(logging.WARNING, logger="gags.oracle"):
        _, features = ingest(*_write_level_files(tmp_path, [m] * 3, [table] * 3))
    assert "drift" in caplog.text
    np.testing.assert_allclose(features.tables[0][1], [1.0, 0.0])


def test_query_ground_truth_box():
    labels = _label_render()
    labels[..., 2] = 0
    labels[2:5, 3:7, 2] = 1

    hierarchy = SceneHierarchy(labels=[["cup"], ["cup"], ["cup"]], parent=[[1], [1], [0]])
    mask, box = query_ground_truth(labels, hierarchy, "cup")
    assert box == (3, 2, 6, 4)
    assert mask.sum() == 12


def test_presets_and_scene_spec_files(tmp_path):
    spec = scene_preset("a", seed=4)
    assert len(spec.objects) == 10
    assert spec.cameras.count == 20
    save_scene_spec(spec, tmp_path / "scene.json")
    back = load_scene_spec(tmp_path / "scene.json")
    assert back == spec
    with pytest.raises(DataError):
        scene_preset("c")
