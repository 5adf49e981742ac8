import json

import numpy as np
import pytest

from artigen.mesh import (
    ArticulatedObject,
    Joint,
    ManifestError,
    MeshError,
    Part,
    TriMesh,
    articulate,
    load_manifest,
    load_obj,
    merge_meshes,
    rotation_about_axis,
    sample_surface,
    save_obj,
)
from fixtures import simple_box


def test_trimesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(MeshError):
        TriMesh(v, np.array([[0, 1, 5]]))  # out of range
    with pytest.raises(MeshError):
        TriMesh(np.array([[0.0, 0.0, np.nan]] * 3), np.array([[0, 1, 2]]))


def test_trimesh_read_only():
    m = simple_box()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def test_obj_round_trip(tmp_path):
    m = simple_box((1.5, 2.0, 0.5), (0.3, -0.2, 1.0))
    path = tmp_path / "box.obj"
    save_obj(m, path)
    m2 = load_obj(path)
    np.testing.assert_array_equal(m.vertices, m2.vertices)
    np.testing.assert_array_equal(m.faces, m2.faces)


def test_obj_fan_triangulation_and_negative_indices(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "f 1 2 3 4\n"
        "f -4 -3 -2\n"
    )
    m = load_obj(path)
    assert m.n_faces == 3
    np.testing.assert_array_equal(m.faces[0], [0, 1, 2])
    np.testing.assert_array_equal(m.faces[1], [0, 2, 3])
    np.testing.assert_array_equal(m.faces[2], [0, 1, 2])


def test_obj_error_reports_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nf 1 2 9\n")
    with pytest.raises(MeshError, match=":3:"):
        load_obj(path)


def test_save_obj_refuses_empty(tmp_path):
    with pytest.raises(MeshError):
        save_obj(TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int)),
                 tmp_path / "e.obj")


def test_joint_validation():
    with pytest.raises(ManifestError):
        Joint("revolute", axis=np.array([0.0, 0.0, 2.0]))
    with pytest.raises(ManifestError):
        Joint("revolute", axis=np.array([0.0, 0.0, 1.0]), range=(1.0, 0.0))
    with pytest.raises(ManifestError):
        Joint("spherical")
    assert Joint("fixed").is_fixed


def test_rotation_about_axis():
    r = rotation_about_axis(np.array([0.0, 0.0, 1.0]), np.pi / 2)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    # orthonormality
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-15)


def test_articulate_revolute_and_prismatic():
    m = simple_box()
    j = Joint("revolute", axis=np.array([0.0, 0.0, 1.0]),
              pivot=np.array([1.0, 0.0, 0.0]), range=(0.0, np.pi))
    out = articulate(m, j, np.pi)
    # rotation by pi about z through (1,0,0): (x,y) -> (2-x, -y)
    np.testing.assert_allclose(out.vertices[:, 0], 2 - m.vertices[:, 0], atol=1e-15)
    np.testing.assert_allclose(out.vertices[:, 1], -m.vertices[:, 1], atol=1e-15)

    jp = Joint("prismatic", axis=np.array([0.0, 1.0, 0.0]), range=(0.0, 2.0))
    out = articulate(m, jp, 1.5)
    np.testing.assert_allclose(out.vertices, m.vertices + [0, 1.5, 0])

    with pytest.raises(ManifestError):
        articulate(m, j, 4.0)  # outside range


def test_articulate_fixed_ignores_state():
    m = simple_box()
    out = articulate(m, Joint("fixed"), 0.0)
    np.testing.assert_array_equal(out.vertices, m.vertices)


def test_merge_meshes_offsets_faces():
    a, b = simple_box(), simple_box(center=(3, 0, 0))
    m = merge_meshes([a, b])
    assert m.n_vertices == 16 and m.n_faces == 24
    np.testing.assert_array_equal(m.faces[12:], b.faces + 8)


def test_part_and_object_validation():
    m = simple_box()
    with pytest.raises(ManifestError):
        Part("p", (), Joint("fixed"))
    with pytest.raises(ManifestError):
        Part("p", (m,), Joint("revolute", axis=np.array([0.0, 0.0, 1.0]),
                              range=(0.0, 1.0)), ref_states=(2.0,))
    p1 = Part("a", (m,), Joint("fixed"))
    p2 = Part("a", (m,), Joint("fixed"))
    with pytest.raises(ManifestError):
        ArticulatedObject(parts=(p1, p2))  # duplicate names
    p2 = Part("b", (m,), Joint("fixed"))
    with pytest.raises(ManifestError):
        ArticulatedObject(parts=(p1, p2))  # two fixed parts


def _write_manifest(tmp_path, joint):
    save_obj(simple_box(), tmp_path / "a.obj")
    save_obj(simple_box(center=(3, 0, 0)), tmp_path / "b.obj")
    rec = {
        "parts": [
            {"name": "base", "convex_objs": ["a.obj"], "joint": {"kind": "fixed"}},
            {"name": "arm", "convex_objs": ["b.obj"], "joint": joint},
        ]
    }
    path = tmp_path / "obj.json"
    path.write_text(json.dumps(rec))
    return path


def test_load_manifest(tmp_path):
    path = _write_manifest(tmp_path, {"kind": "revolute", "axis": [0, 0, 2],
                                      "pivot": [0, 0, 0], "range": [0, 1]})
    obj = load_manifest(path)  # non-unit axis is normalized at load
    assert obj.part("arm").joint.axis[2] == 1.0
    assert obj.convex_count() == 2


def test_load_manifest_zero_axis(tmp_path):
    path = _write_manifest(tmp_path, {"kind": "revolute", "axis": [0, 0, 0],
                                      "range": [0, 1]})
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_manifest_missing_file(tmp_path):
    rec = {"parts": [{"name": "a", "convex_objs": ["nope.obj"],
                      "joint": {"kind": "fixed"}}]}
    path = tmp_path / "obj.json"
    path.write_text(json.dumps(rec))
    with pytest.raises((ManifestError, MeshError, FileNotFoundError)):
        load_manifest(path)


def test_sample_surface_deterministic_and_on_surface():
    m = simple_box()
    p1 = sample_surface(m, 256, seed=3)
    p2 = sample_surface(m, 256, seed=3)
    np.testing.assert_array_equal(p1, p2)
    assert p1.shape == (256, 3)
    # all samples on the box surface: at least one |coord| == 0.5
    assert np.isclose(np.abs(p1), 0.5).any(axis=1).all()
    p3 = sample_surface(m, 256, seed=4)
    assert not np.array_equal(p1, p3)


def test_content_hash_stable():
    assert simple_box().content_hash() == simple_box().content_hash()
    assert simple_box().content_hash() != simple_box((2, 1, 1)).content_hash()
